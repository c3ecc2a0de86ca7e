"""Multi-stage instance localization: per-stage box refinement heads with
increasing-IoU resampling, optional segmentation heads, and cross-stage
proposal merging/filtering.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError
from .geometry import BitMask, Box, FeatureGrid, box_iou, roi_align
from .numerics import FCLayer, sigmoid

log = logging.getLogger(__name__)

POOLED_HW = (7, 7)
MASK_POOLED_HW = (14, 14)
MASK_LOGIT_DIM = MASK_POOLED_HW[0] * MASK_POOLED_HW[1]


@dataclass
class Instance:
    """A detected entity at some cascade stage."""

    class_id: int
    confidence: float
    box: Box
    mask: BitMask | None = None
    stage_of_origin: int = 0
    lineage: int = -1  # index of the seed proposal this instance refines

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise DataError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class CascadeConfig:
    """Stage count, per-stage IoU thresholds, merge cutoff and loss weights."""

    stages: int = 3
    iou_thresholds: tuple = (0.5, 0.6, 0.7)
    merge_threshold: float = 0.3
    beta: tuple = (1.0, 0.5, 0.25)
    gamma: tuple = (1.0, 0.5, 0.25)
    seg_weights: tuple = (1.0, 0.5, 0.25)

    def __post_init__(self):
        t = self.stages
        if not (len(self.iou_thresholds) == len(self.beta) == len(self.gamma)
                == len(self.seg_weights) == t):
            raise DataError("per-stage schedules must all have length T")
        if any(b >= a for a, b in zip(self.iou_thresholds[1:], self.iou_thresholds)):
            raise DataError("IoU thresholds must be strictly increasing")
        if not 0.0 <= self.merge_threshold <= 1.0:
            raise DataError("merge threshold must lie in [0, 1]")


HEAD_INIT_SCALE = 0.01  # near-zero head init keeps early refinements tame


class StageHead:
    """Box regression (4 deltas) plus a score refiner (1 logit) over the
    flattened pooled feature of the input region."""

    def __init__(self, channels, rng, pooled_hw=POOLED_HW):
        in_dim = channels * pooled_hw[0] * pooled_hw[1]
        self.pooled_hw = pooled_hw
        self.regressor = FCLayer(in_dim, 4, "none", rng)
        self.scorer = FCLayer(in_dim, 1, "sigmoid", rng)
        self.regressor.w.value *= HEAD_INIT_SCALE
        self.scorer.w.value *= HEAD_INIT_SCALE

    def params(self, prefix):
        return (self.regressor.params(f"{prefix}.reg")
                + self.scorer.params(f"{prefix}.score"))

    def forward(self, pooled_flat):
        return self.regressor.forward(pooled_flat), self.scorer.forward(pooled_flat)


class SegHead:
    """Mask logits (14x14) from the summed current/previous pooled features."""

    def __init__(self, channels, rng, pooled_hw=MASK_POOLED_HW):
        self.pooled_hw = pooled_hw
        in_dim = channels * pooled_hw[0] * pooled_hw[1]
        self.fc = FCLayer(in_dim, MASK_LOGIT_DIM, "none", rng)
        self.fc.w.value *= HEAD_INIT_SCALE

    def params(self, prefix):
        return self.fc.params(f"{prefix}.mask")

    def forward(self, pooled_flat):
        return self.fc.forward(pooled_flat)


def apply_box_deltas(box: Box, deltas) -> Box | None:
    """Standard center/log-size parameterization:
    cx' = cx + dx*w, cy' = cy + dy*h, w' = w*exp(dw), h' = h*exp(dh).
    Returns None for a degenerate (<= 1 px) result."""
    dx, dy, dw, dh = (float(v) for v in deltas)
    cx, cy = box.center
    w, h = box.width, box.height
    ncx, ncy = cx + dx * w, cy + dy * h
    nw = w * np.exp(np.clip(dw, -8.0, 8.0))
    nh = h * np.exp(np.clip(dh, -8.0, 8.0))
    if nw <= 1.0 or nh <= 1.0:
        return None
    return Box(ncx - nw / 2, ncy - nh / 2, ncx + nw / 2, ncy + nh / 2)


def box_delta_targets(src: Box, dst: Box):
    """Inverse of apply_box_deltas: the deltas mapping src onto dst."""
    scx, scy = src.center
    dcx, dcy = dst.center
    return np.array([(dcx - scx) / src.width,
                     (dcy - scy) / src.height,
                     np.log(dst.width / src.width),
                     np.log(dst.height / src.height)])


def clip_box(box: Box, width, height) -> Box | None:
    x1, y1 = max(box.x1, 0.0), max(box.y1, 0.0)
    x2, y2 = min(box.x2, float(width)), min(box.y2, float(height))
    if x2 - x1 <= 1.0 or y2 - y1 <= 1.0:
        return None
    return Box(x1, y1, x2, y2)


def refine_stage(grid: FeatureGrid, inst: Instance, head: StageHead) -> Instance | None:
    """One refinement step: pool the instance box, regress deltas, rescore.

    Returns None (and logs) when the refined box degenerates.
    """
    pooled = roi_align(grid, inst.box, head.pooled_hw)
    deltas, score = head.forward(pooled.ravel())
    new_box = apply_box_deltas(inst.box, deltas)
    if new_box is not None:
        new_box = clip_box(new_box, grid.image_width, grid.image_height)
    if new_box is None:
        log.info("dropping degenerate refinement of %s at stage %d",
                 inst.box, inst.stage_of_origin + 1)
        return None
    return replace(inst, box=new_box, confidence=float(score[0]),
                   stage_of_origin=inst.stage_of_origin + 1)


def rasterize_mask_into_box(cell_bits, box: Box, width, height) -> BitMask:
    """Paint a cell grid (e.g. 14x14) into the box at image resolution."""
    cells = np.asarray(cell_bits, dtype=bool)
    gh, gw = cells.shape
    bits = np.zeros((height, width), dtype=bool)
    x1 = max(int(np.floor(box.x1)), 0)
    x2 = min(int(np.ceil(box.x2)), width)
    y1 = max(int(np.floor(box.y1)), 0)
    y2 = min(int(np.ceil(box.y2)), height)
    if x2 <= x1 or y2 <= y1:
        return BitMask(bits)
    ys = np.arange(y1, y2)
    xs = np.arange(x1, x2)
    rows = np.floor((ys + 0.5 - box.y1) / box.height * gh).astype(int)
    cols = np.floor((xs + 0.5 - box.x1) / box.width * gw).astype(int)
    ok_r = (rows >= 0) & (rows < gh)
    ok_c = (cols >= 0) & (cols < gw)
    if ok_r.any() and ok_c.any():
        bits[np.ix_(ys[ok_r], xs[ok_c])] = cells[np.ix_(rows[ok_r], cols[ok_c])]
    return BitMask(bits)


def segment_stage(grid: FeatureGrid, inst: Instance, head: SegHead,
                  prev_pooled=None) -> Instance:
    """Predict a mask for a refined instance.

    Logits are thresholded at 0.5 after sigmoid; if every cell falls below
    the threshold the single max-logit cell is kept so the instance never
    loses its mask.
    """
    pooled = roi_align(grid, inst.box, head.pooled_hw)
    total = pooled.ravel()
    if prev_pooled is not None:
        total = total + np.asarray(prev_pooled, dtype=np.float64).ravel()
    logits = head.forward(total)
    probs = sigmoid(logits).reshape(head.pooled_hw)
    cells = probs > 0.5
    if not cells.any():
        flat = int(np.argmax(logits))
        cells[flat // head.pooled_hw[1], flat % head.pooled_hw[1]] = True
    mask = rasterize_mask_into_box(cells, inst.box, grid.image_width, grid.image_height)
    if not mask.any():
        # Box smaller than a pixel footprint; mark its center pixel.
        cx, cy = inst.box.center
        bits = np.zeros((grid.image_height, grid.image_width), dtype=bool)
        bits[min(int(cy), grid.image_height - 1), min(int(cx), grid.image_width - 1)] = True
        mask = BitMask(bits)
    return replace(inst, mask=mask)


@dataclass
class LabeledProposal:
    """One resampled training example for a localization stage."""

    box: Box
    positive: bool
    class_id: int = -1
    delta_target: np.ndarray | None = None
    gt_index: int = -1
    iou: float = 0.0


def resample_for_stage(proposals, gt_instances, iou_threshold) -> list[LabeledProposal]:
    """Label proposals against ground truth at the stage threshold.

    A proposal is positive iff its best-IoU ground-truth box reaches the
    threshold; ground-truth boxes are appended as perfect positives.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise DataError(f"stage IoU threshold {iou_threshold} outside (0, 1)")
    labeled = []
    for prop in proposals:
        box = prop.box if isinstance(prop, Instance) else prop
        best_iou, best_idx = 0.0, -1
        for gi, gt in enumerate(gt_instances):
            v = box_iou(box, gt.box)
            if v > best_iou:
                best_iou, best_idx = v, gi
        if best_idx >= 0 and best_iou >= iou_threshold:
            gt = gt_instances[best_idx]
            labeled.append(LabeledProposal(box, True, gt.class_id,
                                           box_delta_targets(box, gt.box),
                                           best_idx, best_iou))
        else:
            labeled.append(LabeledProposal(box, False, iou=best_iou))
    for gi, gt in enumerate(gt_instances):
        labeled.append(LabeledProposal(gt.box, True, gt.class_id,
                                       np.zeros(4), gi, 1.0))
    return labeled


def merge_and_filter(per_stage_outputs, threshold=0.3) -> list[Instance]:
    """Concatenate all stages' instances and drop low-confidence ones.

    Order is deterministic: stage first, then input order within a stage.
    """
    if not 0.0 <= threshold <= 1.0:
        raise DataError(f"confidence threshold {threshold} outside [0, 1]")
    merged = []
    for stage_instances in per_stage_outputs:
        for inst in stage_instances:
            if inst.confidence >= threshold:
                merged.append(inst)
    return merged


def dedup_by_lineage(instances) -> list[Instance]:
    """Keep the latest-stage survivor of each refinement lineage.

    Merged stage outputs contain one instance per (stage, seed proposal);
    evaluating them all as separate detections floods the metrics with
    near-duplicate triplets, so pair building keeps only the deepest
    refinement of each seed. Instances without lineage pass through.
    """
    best: dict[int, Instance] = {}
    passthrough = []
    order: list[int] = []
    for inst in instances:
        if inst.lineage < 0:
            passthrough.append(inst)
            continue
        cur = best.get(inst.lineage)
        if cur is None:
            order.append(inst.lineage)
            best[inst.lineage] = inst
        elif inst.stage_of_origin > cur.stage_of_origin:
            best[inst.lineage] = inst
    return [best[k] for k in order] + passthrough
