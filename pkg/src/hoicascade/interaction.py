"""Relation ranking and triple-stream relation classification: pair
enumeration, the RRM/RCM heads, score fusion, the per-stage model bundle
and the image-level inference protocol.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .cascade import (
    MASK_POOLED_HW,
    POOLED_HW,
    CascadeConfig,
    Instance,
    SegHead,
    StageHead,
    dedup_by_lineage,
    merge_and_filter,
    refine_stage,
    segment_stage,
)
from .errors import DataError, ShapeError
from .features import (
    CooccurrenceTable,
    FUSED_DIM,
    GEOMETRIC_DIM,
    assemble_visual,
    build_efra_stack,
    build_fusion_stack,
    cross_stage_fuse,
    efra_attend,
    efra_enhance,
    face_region,
    geometric_feature,
    ihsm_enhance,
    semantic_prior,
)
from .geometry import (
    BitMask,
    Box,
    FeatureGrid,
    box_iou,
    mask_roi_align,
    roi_align,
    spatial_pair_encoding,
    union_box,
)
from .numerics import ConvPoolEncoder, FCLayer, ParamStore

TOP_K = 64
HINGE_MARGIN = 0.2
MAX_TRAIN_PAIRS = 128
POS_NEG_RATIO = (1, 3)
PERSON_CLASS = 0


@dataclass
class RelationFeatures:
    """Per-pair relation representation."""

    x_s: np.ndarray                      # (N,) verb-frequency prior
    x_g: np.ndarray                      # (256,) geometric descriptor
    x_v: np.ndarray                      # (3C, 7, 7) enhanced visual tensor
    x_v_fused: np.ndarray | None = None  # (1024,) after cross-stage fusion
    rank_score: float | None = None


@dataclass
class HOICandidate:
    human: Instance
    object: Instance
    features: RelationFeatures | None = None
    stage_scores: list = field(default_factory=list)   # fused (N,) per stage
    stage_streams: list = field(default_factory=list)  # (s_s, s_g, s_v) per stage

    @property
    def final_scores(self):
        return self.stage_scores[-1] if self.stage_scores else None


@dataclass(frozen=True)
class GroundTruthPair:
    """An annotated human-object pair with its multi-label verb set."""

    h_box: Box
    o_box: Box
    o_class: int
    verbs: frozenset
    h_mask: BitMask | None = None
    o_mask: BitMask | None = None


@dataclass
class TripletPrediction:
    human: Instance
    object: Instance
    verb: int
    score: float


@dataclass
class TrainBatchSpec:
    max_pairs: int = MAX_TRAIN_PAIRS
    pos_neg_ratio: tuple = POS_NEG_RATIO
    include_gt_pairs: bool = True

    @property
    def max_positive(self):
        p, n = self.pos_neg_ratio
        return self.max_pairs * p // (p + n)


class RRMHead:
    """Ranking score g(P) = sigmoid(FC([fused visual, geometric]))."""

    def __init__(self, rng):
        self.fc = FCLayer(FUSED_DIM + GEOMETRIC_DIM, 1, "sigmoid", rng)

    def params(self, prefix):
        return self.fc.params(f"{prefix}.fc")

    def score(self, fused, geometric):
        fused = np.asarray(fused, dtype=np.float64)
        x = np.concatenate([fused, np.asarray(geometric, dtype=np.float64)], axis=-1)
        out = self.fc.forward(x)
        return out[..., 0]


class RCMHeads:
    """Independent semantic / geometric / visual verb scorers."""

    def __init__(self, n_verbs, rng):
        self.n_verbs = n_verbs
        self.semantic = FCLayer(n_verbs, n_verbs, "sigmoid", rng)
        self.geometric = FCLayer(GEOMETRIC_DIM, n_verbs, "sigmoid", rng)
        self.visual = FCLayer(FUSED_DIM, n_verbs, "sigmoid", rng)

    def params(self, prefix):
        return (self.semantic.params(f"{prefix}.sem")
                + self.geometric.params(f"{prefix}.geo")
                + self.visual.params(f"{prefix}.vis"))


def enumerate_pairs(instances, person_class=PERSON_CLASS) -> list[HOICandidate]:
    """All ordered pairs whose first element is a person; an instance never
    pairs with itself. No persons means no candidates."""
    pairs = []
    for i, h in enumerate(instances):
        if h.class_id != person_class:
            continue
        for j, o in enumerate(instances):
            if i == j:
                continue
            pairs.append(HOICandidate(human=h, object=o))
    return pairs


def rank_pairs(candidates, rrm: RRMHead) -> list[HOICandidate]:
    """Stable sort by ranking score, descending; ties keep enumeration order."""
    for cand in candidates:
        f = cand.features
        if f is None or f.x_v_fused is None or f.x_g is None:
            raise DataError("candidate features must be built before ranking")
        f.rank_score = float(rrm.score(f.x_v_fused, f.x_g))
    return sorted(candidates, key=lambda c: -c.features.rank_score)


def select_topk(ranked, k=TOP_K) -> list[HOICandidate]:
    if k < 1:
        raise DataError(f"top-k must be >= 1, got {k}")
    return list(ranked[:k])


def classify_relation(candidate: HOICandidate, heads: RCMHeads):
    """Per-stream verb scores (s_s, s_g, s_v); multi-label, no softmax."""
    f = candidate.features
    if f is None or f.x_v_fused is None:
        raise DataError("candidate features must be built before classification")
    s_s = heads.semantic.forward(f.x_s)
    s_g = heads.geometric.forward(f.x_g)
    s_v = heads.visual.forward(f.x_v_fused)
    return s_s, s_g, s_v


def fuse_scores(s_v, s_g, s_s):
    """Final fusion (s_v + s_g) * s_s, elementwise."""
    s_v = np.asarray(s_v, dtype=np.float64)
    s_g = np.asarray(s_g, dtype=np.float64)
    s_s = np.asarray(s_s, dtype=np.float64)
    if not (s_v.shape == s_g.shape == s_s.shape):
        raise ShapeError("score vectors must share one length")
    return (s_v + s_g) * s_s


@dataclass
class LabeledPair:
    candidate: HOICandidate
    positive: bool
    verb_targets: np.ndarray  # (N,) multi-hot; all zeros for negatives
    matched_gt: int = -1


@dataclass
class SampledPairBatch:
    positives: list
    negatives: list

    def all_pairs(self):
        return self.positives + self.negatives


def match_candidate_to_gt(candidate, gt_pairs, iou_threshold):
    """Best annotated pair whose human and object boxes both reach the
    threshold; returns (index, min_iou) or (-1, 0.0)."""
    best_idx, best_quality = -1, 0.0
    for gi, gt in enumerate(gt_pairs):
        qh = box_iou(candidate.human.box, gt.h_box)
        qo = box_iou(candidate.object.box, gt.o_box)
        quality = min(qh, qo)
        if qh >= iou_threshold and qo >= iou_threshold and quality > best_quality:
            best_idx, best_quality = gi, quality
    return best_idx, best_quality


def sample_training_pairs(candidates, gt_pairs, iou_threshold, n_verbs,
                          spec: TrainBatchSpec | None = None, rng=None,
                          stage=0) -> SampledPairBatch:
    """Label candidates against annotated pairs at the stage threshold,
    append the annotated pairs themselves, and subsample to the batch cap
    at the configured positive:negative ratio (negatives fill any slack).
    """
    if spec is None:
        spec = TrainBatchSpec()
    pos, neg = [], []
    for cand in candidates:
        gi, _ = match_candidate_to_gt(cand, gt_pairs, iou_threshold)
        if gi >= 0:
            targets = np.zeros(n_verbs)
            targets[list(gt_pairs[gi].verbs)] = 1.0
            pos.append(LabeledPair(cand, True, targets, gi))
        else:
            neg.append(LabeledPair(cand, False, np.zeros(n_verbs)))
    if spec.include_gt_pairs:
        for gi, gt in enumerate(gt_pairs):
            human = Instance(PERSON_CLASS, 1.0, gt.h_box, mask=gt.h_mask,
                             stage_of_origin=stage)
            obj = Instance(gt.o_class, 1.0, gt.o_box, mask=gt.o_mask,
                           stage_of_origin=stage)
            targets = np.zeros(n_verbs)
            targets[list(gt.verbs)] = 1.0
            pos.append(LabeledPair(HOICandidate(human, obj), True, targets, gi))
    n_pos = min(len(pos), spec.max_positive)
    n_neg = min(len(neg), spec.max_pairs - n_pos)
    if rng is not None:
        if n_pos < len(pos):
            pos = [pos[i] for i in rng.permutation(len(pos))[:n_pos]]
        if n_neg < len(neg):
            neg = [neg[i] for i in rng.permutation(len(neg))[:n_neg]]
    return SampledPairBatch(pos[:n_pos], neg[:n_neg])


def total_loss(stage_losses, cfg: CascadeConfig) -> float:
    """Weighted sum over stages: beta*loc + gamma*(rrm + rcm) [+ seg]."""
    if len(stage_losses) != cfg.stages:
        raise ShapeError(f"expected {cfg.stages} stage losses, got {len(stage_losses)}")
    total = 0.0
    for t, losses in enumerate(stage_losses):
        total += cfg.beta[t] * losses.get("loc", 0.0)
        total += cfg.gamma[t] * (losses.get("rrm", 0.0) + losses.get("rcm", 0.0))
        if "seg" in losses:
            total += cfg.seg_weights[t] * losses["seg"]
    return total


# ----------------------------------------------------------------- model

class CascadeModel:
    """Per-stage localization and relation heads plus the shared feature
    machinery (geometric encoder, facial attention stacks, fusion stack)."""

    def __init__(self, n_classes, n_verbs, channels, config=None, seed=0,
                 person_class=PERSON_CLASS, segment=False, representation="box"):
        if representation not in ("box", "mask"):
            raise DataError(f"unknown representation {representation!r}")
        self.n_classes = n_classes
        self.n_verbs = n_verbs
        self.channels = channels
        self.config = config or CascadeConfig()
        self.person_class = person_class
        self.segment = segment
        self.representation = representation
        self.seed = seed
        self.hinge_margin = HINGE_MARGIN
        self.cooccurrence = None

        rng = np.random.default_rng(seed)
        t_stages = self.config.stages
        self.box_heads = [StageHead(channels, rng) for _ in range(t_stages)]
        self.seg_heads = [SegHead(channels, rng) for _ in range(t_stages)]
        self.rrm_heads = [RRMHead(rng) for _ in range(t_stages)]
        self.rcm_heads = [RCMHeads(n_verbs, rng) for _ in range(t_stages)]
        self.geo_encoder = ConvPoolEncoder(2, (64, 64), rng=rng)
        self.face_stack = build_efra_stack(channels, POOLED_HW, rng)
        self.noface_stack = build_efra_stack(channels, POOLED_HW, rng)
        self.fusion_stack = build_fusion_stack(3 * channels * POOLED_HW[0] * POOLED_HW[1], rng)

        self.store = ParamStore()
        for t in range(t_stages):
            for name, p in (self.box_heads[t].params(f"stage{t + 1}.box")
                            + self.seg_heads[t].params(f"stage{t + 1}.seg")
                            + self.rrm_heads[t].params(f"stage{t + 1}.rrm")
                            + self.rcm_heads[t].params(f"stage{t + 1}.rcm")):
                self.store.add(name, p)
        for name, p in (self.geo_encoder.params("shared.geo_encoder")
                        + self.face_stack.params("shared.face_stack")
                        + self.noface_stack.params("shared.noface_stack")
                        + self.fusion_stack.params("shared.fusion")):
            self.store.add(name, p)

    # ------------------------------------------------------------ features

    def face_zeroed_grid(self, grid: FeatureGrid, human_box: Box) -> FeatureGrid:
        """Image-level grid with the cells under the person's facial region
        zeroed (the face-removed variant used by the face-agnostic path)."""
        face = face_region(human_box).box
        gh, gw = grid.grid_height, grid.grid_width
        cx = (np.arange(gw) + 0.5) / grid.scale_x
        cy = (np.arange(gh) + 0.5) / grid.scale_y
        inside = ((cx[None, :] >= face.x1) & (cx[None, :] < face.x2)
                  & (cy[:, None] >= face.y1) & (cy[:, None] < face.y2))
        return FeatureGrid(grid.data * (~inside)[None, :, :],
                           grid.image_height, grid.image_width)

    def pool_entity(self, grid: FeatureGrid, inst: Instance):
        if self.representation == "mask":
            if inst.mask is None:
                raise DataError("mask representation requires instance masks")
            return mask_roi_align(grid, inst.mask, POOLED_HW)
        return roi_align(grid, inst.box, POOLED_HW)

    def pool_union(self, grid: FeatureGrid, human: Instance, obj: Instance):
        ubox = union_box(human.box, obj.box)
        if self.representation == "mask":
            if human.mask is None or obj.mask is None:
                raise DataError("mask representation requires instance masks")
            return mask_roi_align(grid, BitMask(human.mask.bits | obj.mask.bits), POOLED_HW)
        return roi_align(grid, ubox, POOLED_HW)

    def pool_face_features(self, grid: FeatureGrid, human: Instance):
        face = face_region(human.box).box
        face_feat = roi_align(grid, face, POOLED_HW)
        noface_feat = roi_align(self.face_zeroed_grid(grid, human.box), human.box, POOLED_HW)
        return face_feat, noface_feat

    def build_pair_map(self, human: Instance, obj: Instance):
        # float32 keeps the conv encoder's column buffers light; the maps
        # are binary so nothing is lost
        if self.representation == "mask":
            pm = spatial_pair_encoding(human.box, obj.box, mode="mask",
                                       h_mask=human.mask, o_mask=obj.mask)
        else:
            pm = spatial_pair_encoding(human.box, obj.box, mode="box")
        return pm.astype(np.float32)

    def build_features(self, grid: FeatureGrid, human: Instance, obj: Instance) -> RelationFeatures:
        """Inference-path relation features for one pair (no caches kept)."""
        if self.cooccurrence is None:
            raise DataError("model has no co-occurrence table; train or load first")
        x_s = semantic_prior(obj.class_id, self.cooccurrence)
        x_g = geometric_feature(self.build_pair_map(human, obj), self.geo_encoder)
        h_feat = self.pool_entity(grid, human)
        o_feat = self.pool_entity(grid, obj)
        u_feat = self.pool_union(grid, human, obj)
        face_feat, noface_feat = self.pool_face_features(grid, human)
        h_bar, _ = ihsm_enhance(h_feat)
        alpha, alpha_bar = efra_attend(face_feat, noface_feat, o_feat,
                                       self.face_stack, self.noface_stack)
        o_bar = efra_enhance(o_feat, face_feat, noface_feat, alpha, alpha_bar)
        x_v = assemble_visual(h_bar, o_bar, u_feat)
        return RelationFeatures(x_s=x_s, x_g=x_g, x_v=x_v)

    # -------------------------------------------------------------- io

    def meta_dict(self):
        return {
            "n_classes": self.n_classes,
            "n_verbs": self.n_verbs,
            "channels": self.channels,
            "person_class": self.person_class,
            "segment": self.segment,
            "representation": self.representation,
            "seed": self.seed,
            "config": {
                "stages": self.config.stages,
                "iou_thresholds": list(self.config.iou_thresholds),
                "merge_threshold": self.config.merge_threshold,
                "beta": list(self.config.beta),
                "gamma": list(self.config.gamma),
                "seg_weights": list(self.config.seg_weights),
            },
        }

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        meta = self.meta_dict()
        if self.cooccurrence is not None:
            meta["cooccurrence"] = json.loads(self.cooccurrence.to_json())
        with open(os.path.join(directory, "model.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)
            fh.write("\n")
        self.store.save(os.path.join(directory, "params.json"),
                        os.path.join(directory, "params.bin"))

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, "model.json"), encoding="utf-8") as fh:
            meta = json.load(fh)
        cfg = CascadeConfig(
            stages=meta["config"]["stages"],
            iou_thresholds=tuple(meta["config"]["iou_thresholds"]),
            merge_threshold=meta["config"]["merge_threshold"],
            beta=tuple(meta["config"]["beta"]),
            gamma=tuple(meta["config"]["gamma"]),
            seg_weights=tuple(meta["config"]["seg_weights"]),
        )
        model = cls(meta["n_classes"], meta["n_verbs"], meta["channels"], cfg,
                    seed=meta["seed"], person_class=meta["person_class"],
                    segment=meta["segment"], representation=meta["representation"])
        if "cooccurrence" in meta:
            model.cooccurrence = CooccurrenceTable.from_json(json.dumps(meta["cooccurrence"]))
        model.store.load(os.path.join(directory, "params.json"),
                         os.path.join(directory, "params.bin"))
        return model


# -------------------------------------------------------------- inference

def run_localization(grid: FeatureGrid, seed_proposals, model: CascadeModel):
    """Refine all proposals through every stage; returns per-stage outputs.

    Segmentation heads run when the model predicts masks; the stage-1
    predecessor pooled feature is zeros.
    """
    current = []
    for i, prop in enumerate(seed_proposals):
        current.append(replace(prop, lineage=i if prop.lineage < 0 else prop.lineage))
    stage_outputs = []
    for t in range(model.config.stages):
        nxt = []
        for inst in current:
            refined = refine_stage(grid, inst, model.box_heads[t])
            if refined is None:
                continue
            if model.segment:
                prev = (roi_align(grid, inst.box, MASK_POOLED_HW).ravel()
                        if t > 0 else None)
                refined = segment_stage(grid, refined, model.seg_heads[t], prev)
            nxt.append(refined)
        stage_outputs.append(nxt)
        current = nxt
    return stage_outputs


def infer_image(grid: FeatureGrid, seed_proposals, model: CascadeModel,
                top_k=TOP_K, fusion="hadamard") -> list[TripletPrediction]:
    """Full image protocol: cascade localization, stage merging and
    filtering, pair ranking, top-k selection, and staged classification
    with the final stage's fused scores emitted per verb.

    fusion selects the emission rule: "hadamard" is the published
    (s_v + s_g) * s_s; "sum" (s_v + s_g + s_s) exists for the ablation.
    """
    if fusion not in ("hadamard", "sum"):
        raise DataError(f"unknown fusion rule {fusion!r}")
    stage_outputs = run_localization(grid, seed_proposals, model)
    merged = merge_and_filter(stage_outputs, model.config.merge_threshold)
    kept = dedup_by_lineage(merged)
    candidates = enumerate_pairs(kept, model.person_class)
    if not candidates:
        return []
    for cand in candidates:
        cand.features = model.build_features(grid, cand.human, cand.object)
        prev = cand.features.x_v if model.config.stages > 1 else np.zeros_like(cand.features.x_v)
        cand.features.x_v_fused = cross_stage_fuse(cand.features.x_v, prev, model.fusion_stack)
    ranked = rank_pairs(candidates, model.rrm_heads[-1])
    top = select_topk(ranked, top_k)
    for cand in top:
        prev = np.zeros_like(cand.features.x_v)
        cand.stage_scores = []
        cand.stage_streams = []
        for t in range(model.config.stages):
            cand.features.x_v_fused = cross_stage_fuse(cand.features.x_v, prev, model.fusion_stack)
            s_s, s_g, s_v = classify_relation(cand, model.rcm_heads[t])
            cand.stage_streams.append((s_s, s_g, s_v))
            cand.stage_scores.append(fuse_scores(s_v, s_g, s_s))
            prev = cand.features.x_v
    predictions = []
    for cand in top:
        if fusion == "sum":
            s_s, s_g, s_v = cand.stage_streams[-1]
            final = s_v + s_g + s_s
        else:
            final = cand.final_scores
        for verb in range(model.n_verbs):
            predictions.append(TripletPrediction(cand.human, cand.object,
                                                 verb, float(final[verb])))
    return predictions
