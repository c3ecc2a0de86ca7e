"""Two-phase training: localization first, then joint localization and
relation recognition, stepping after every scene (image-centric batches).

Gradient flow: planted feature grids are constants, so localization
gradients stop at the stage heads, and relation gradients flow through the
fusion stack, the facial-attention stacks and the geometric encoder. Box
coordinates and the prior-stage visual tensor propagate as data only,
which keeps the per-stage graphs independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cascade import (
    MASK_POOLED_HW,
    POOLED_HW,
    CascadeConfig,
    Instance,
    apply_box_deltas,
    clip_box,
    resample_for_stage,
)
from .errors import DataError
from .features import (
    CooccurrenceTable,
    efra_attend,
    efra_attend_backward,
    ihsm_enhance,
    semantic_prior,
)
from .formats import RunConfig, predictions_to_record
from .geometry import FeatureGrid, box_iou, roi_align
from .interaction import (
    CascadeModel,
    SampledPairBatch,
    TrainBatchSpec,
    enumerate_pairs,
    infer_image,
    run_localization,
    sample_training_pairs,
    total_loss,
)
from .metrics import TripletRecord, map_rel, recall_at_k
from .numerics import binary_cross_entropy, pairwise_hinge_loss, sgd_step, sigmoid, smooth_l1
from .synth import SceneSpec, gt_pairs_of, render_feature_grid


def build_cooccurrence(scenes, spec: SceneSpec) -> CooccurrenceTable:
    triples = []
    for scene in scenes:
        for t in scene.triplets:
            triples.append((scene.entities[t.object].class_id, t.verb))
    return CooccurrenceTable.from_triplets(triples, spec.n_classes, spec.n_verbs)


def prepare_grids(scenes, spec: SceneSpec, channels, grid_size):
    return {s.image_id: render_feature_grid(s, spec, channels, grid_size)
            for s in scenes}


def seed_instances(scene) -> list:
    out = []
    for i, prop in enumerate(scene.proposals):
        cls = scene.entities[prop.entity].class_id
        out.append(Instance(cls, 1.0, prop.box, stage_of_origin=0, lineage=i))
    return out


def _mask_targets(gt_mask, box, hw):
    """Ground-truth mask sampled at the cell centers of a box."""
    gh, gw = hw
    xs = box.x1 + (np.arange(gw) + 0.5) * box.width / gw
    ys = box.y1 + (np.arange(gh) + 0.5) * box.height / gh
    px = np.clip(xs.astype(int), 0, gt_mask.width - 1)
    py = np.clip(ys.astype(int), 0, gt_mask.height - 1)
    return gt_mask.bits[np.ix_(py, px)].astype(np.float64)


def localization_stage_step(model: CascadeModel, grid: FeatureGrid, proposals,
                            gt_instances, stage, train=True):
    """Loss (and optional backward) for one localization stage.

    Returns (losses, refined instances for the next stage). The refined
    boxes reuse the head outputs computed for the loss batch; resampled
    ground-truth boxes keep flowing to deeper stages.
    """
    cfg = model.config
    labeled = resample_for_stage(proposals, gt_instances, cfg.iou_thresholds[stage])
    head = model.box_heads[stage]
    losses = {"loc": 0.0}
    if model.segment:
        losses["seg"] = 0.0
    if not labeled:
        return losses, []

    pooled = np.stack([roi_align(grid, lab.box, POOLED_HW).ravel() for lab in labeled])
    deltas = head.regressor.forward(pooled)
    scores = head.scorer.forward(pooled)
    labels = np.array([[1.0 if lab.positive else 0.0] for lab in labeled])
    bce, d_scores = binary_cross_entropy(scores, labels)
    score_loss = bce / len(labeled)
    pos = [i for i, lab in enumerate(labeled) if lab.positive]
    reg_loss = 0.0
    d_deltas = np.zeros_like(deltas)
    if pos:
        targets = np.stack([labeled[i].delta_target for i in pos])
        sl1, d_diff = smooth_l1(deltas[pos] - targets)
        reg_loss = sl1 / len(pos)
        d_deltas[pos] = d_diff / len(pos)
    losses["loc"] = reg_loss + score_loss
    if train:
        weight = cfg.beta[stage]
        head.scorer.backward(weight * d_scores / len(labeled))
        head.regressor.backward(weight * d_deltas)

    # refined boxes for every labeled row, reusing the batch outputs
    refined = []
    refined_boxes = [None] * len(labeled)
    for i, lab in enumerate(labeled):
        new_box = apply_box_deltas(lab.box, deltas[i])
        if new_box is not None:
            new_box = clip_box(new_box, grid.image_width, grid.image_height)
        if new_box is None:
            continue
        refined_boxes[i] = new_box
        if i < len(proposals):
            src = proposals[i]
            refined.append(Instance(src.class_id, float(scores[i, 0]), new_box,
                                    stage_of_origin=stage + 1, lineage=src.lineage))
        else:
            refined.append(Instance(lab.class_id, float(scores[i, 0]), new_box,
                                    stage_of_origin=stage + 1))

    if model.segment and pos:
        seg_head = model.seg_heads[stage]
        rows, targets14 = [], []
        for i in pos:
            lab = labeled[i]
            out_box = refined_boxes[i]
            gt_mask = gt_instances[lab.gt_index].mask
            if out_box is None or gt_mask is None:
                continue
            cur = roi_align(grid, out_box, MASK_POOLED_HW).ravel()
            if stage > 0:
                cur = cur + roi_align(grid, lab.box, MASK_POOLED_HW).ravel()
            rows.append(cur)
            targets14.append(_mask_targets(gt_mask, out_box, MASK_POOLED_HW).ravel())
        if rows:
            feats = np.stack(rows)
            targets14 = np.stack(targets14)
            logits = seg_head.forward(feats)
            probs = sigmoid(logits)
            seg_bce, d_probs = binary_cross_entropy(probs, targets14)
            losses["seg"] = seg_bce / targets14.size
            if train:
                d_logits = (cfg.seg_weights[stage] / targets14.size
                            * d_probs * probs * (1.0 - probs))
                seg_head.backward(d_logits)
    return losses, refined


class RelationPass:
    """Batched forward/backward over the sampled relation pairs of one or
    more stages at once.

    Stage losses are independent (the prior-stage tensor is detached), so
    the shared feature machinery runs a single combined forward, stage
    heads operate on row slices, and one combined backward accumulates the
    shared-layer gradients.
    """

    def __init__(self, model: CascadeModel, grid: FeatureGrid, stage_pairs):
        """stage_pairs: list of (stage_index, [LabeledPair, ...])."""
        self.model = model
        self.slices = []
        self.stages = []
        entries = []
        start = 0
        for stage, pairs in stage_pairs:
            self.stages.append(stage)
            self.slices.append(slice(start, start + len(pairs)))
            entries.extend(pairs)
            start += len(pairs)
        self.n = len(entries)
        semantic_rows, pair_maps = [], []
        face_list, noface_list, obj_list = [], [], []
        self._visual_parts = []
        prev_mult = []
        for (stage, pairs) in stage_pairs:
            prev_mult.extend([1.0 if stage == 0 else 2.0] * len(pairs))
        self.prev_mult = np.asarray(prev_mult)
        for lab in entries:
            cand = lab.candidate
            semantic_rows.append(semantic_prior(cand.object.class_id, model.cooccurrence))
            pair_maps.append(model.build_pair_map(cand.human, cand.object))
            h_feat = model.pool_entity(grid, cand.human)
            o_feat = model.pool_entity(grid, cand.object)
            u_feat = model.pool_union(grid, cand.human, cand.object)
            face_feat, noface_feat = model.pool_face_features(grid, cand.human)
            h_bar, _ = ihsm_enhance(h_feat)
            face_list.append(face_feat)
            noface_list.append(noface_feat)
            obj_list.append(o_feat)
            self._visual_parts.append((h_bar, o_feat, u_feat))
        self.x_s = np.stack(semantic_rows)
        self.pair_maps = np.stack(pair_maps)
        self.faces = np.stack(face_list)
        self.nofaces = np.stack(noface_list)
        self.objs = np.stack(obj_list)

    def forward(self):
        model = self.model
        self.x_g = model.geo_encoder.forward(self.pair_maps)
        self.alphas, self.alpha_bars = efra_attend(self.faces, self.nofaces, self.objs,
                                                   model.face_stack, model.noface_stack)
        xv_rows = []
        for i, (h_bar, o_feat, u_feat) in enumerate(self._visual_parts):
            o_bar = (o_feat + self.alphas[i] * self.faces[i]
                     + self.alpha_bars[i] * self.nofaces[i])
            xv_rows.append(np.concatenate([h_bar, o_bar, u_feat], axis=0).ravel())
        self.x_v = np.stack(xv_rows)
        # prior-stage tensor enters as data: zeros at stage 1, a detached
        # copy of the current tensor afterwards
        self.fused = model.fusion_stack.forward(self.x_v * self.prev_mult[:, None])
        self.g = np.zeros(self.n)
        self.s_s = np.zeros_like(self.x_s)
        self.s_g = np.zeros((self.n, self.model.n_verbs))
        self.s_v = np.zeros((self.n, self.model.n_verbs))
        self._rrm_in = np.concatenate([self.fused, self.x_g], axis=1)
        for stage, sl in zip(self.stages, self.slices):
            if sl.stop == sl.start:
                continue
            self.g[sl] = model.rrm_heads[stage].fc.forward(self._rrm_in[sl])[:, 0]
            heads = model.rcm_heads[stage]
            self.s_s[sl] = heads.semantic.forward(self.x_s[sl])
            self.s_g[sl] = heads.geometric.forward(self.x_g[sl])
            self.s_v[sl] = heads.visual.forward(self.fused[sl])
        return self

    def backward(self, d_g, d_s_s, d_s_g, d_s_v):
        model = self.model
        width = self.fused.shape[1]
        d_fused = np.zeros_like(self.fused)
        d_xg = np.zeros_like(self.x_g)
        for stage, sl in zip(self.stages, self.slices):
            if sl.stop == sl.start:
                continue
            heads = model.rcm_heads[stage]
            heads.semantic.backward(d_s_s[sl])
            d_xg[sl] += heads.geometric.backward(d_s_g[sl])
            d_fused[sl] += heads.visual.backward(d_s_v[sl])
            d_rrm_in = model.rrm_heads[stage].fc.backward(d_g[sl, None])
            d_fused[sl] += d_rrm_in[:, :width]
            d_xg[sl] += d_rrm_in[:, width:]
        d_xv = model.fusion_stack.backward(d_fused) * self.prev_mult[:, None]
        c = self.model.channels
        d_alpha = np.zeros(self.n)
        d_alpha_bar = np.zeros(self.n)
        for i in range(self.n):
            d_obar = d_xv[i].reshape(3 * c, *POOLED_HW)[c:2 * c]
            d_alpha[i] = float((d_obar * self.faces[i]).sum())
            d_alpha_bar[i] = float((d_obar * self.nofaces[i]).sum())
        efra_attend_backward(d_alpha, d_alpha_bar, model.face_stack,
                             model.noface_stack, self.faces.shape[1:])
        model.geo_encoder.backward(d_xg)


def relation_losses_multi(model, grid, stage_batches, train=True):
    """Ranking hinge plus three-stream BCE for every stage's sampled batch.

    Losses are normalized per pair/element so the learning rate stays
    stable across batch sizes; the stage weights (gamma) scale the
    gradients here.
    """
    stage_pairs = [(t, b.all_pairs()) for t, b in enumerate(stage_batches)]
    out = [{"rrm": 0.0, "rcm": 0.0} for _ in stage_batches]
    if not any(pairs for _, pairs in stage_pairs):
        return out
    rp = RelationPass(model, grid, stage_pairs).forward()
    targets = np.zeros((rp.n, model.n_verbs))
    row = 0
    for _, pairs in stage_pairs:
        for lab in pairs:
            targets[row] = lab.verb_targets
            row += 1

    d_g = np.zeros(rp.n)
    d_s = [np.zeros_like(targets) for _ in range(3)]
    for t, (batch, sl) in enumerate(zip(stage_batches, rp.slices)):
        if sl.stop == sl.start:
            continue
        n_pos = len(batch.positives)
        g = rp.g[sl]
        pos_g, neg_g = g[:n_pos], g[n_pos:]
        hinge, d_pos, d_neg = pairwise_hinge_loss(pos_g, neg_g, model.hinge_margin)
        hinge_norm = max(len(pos_g) * len(neg_g), 1)
        out[t]["rrm"] = hinge / hinge_norm
        gamma = model.config.gamma[t]
        d_g[sl] = np.concatenate([d_pos, d_neg]) * (gamma / hinge_norm)

        t_sl = targets[sl]
        bce_total = 0.0
        for k, stream in enumerate((rp.s_s[sl], rp.s_g[sl], rp.s_v[sl])):
            bce, d_stream = binary_cross_entropy(stream, t_sl)
            bce_total += bce / t_sl.size
            d_s[k][sl] = gamma * d_stream / t_sl.size
        out[t]["rcm"] = bce_total
    if train:
        rp.backward(d_g, d_s[0], d_s[1], d_s[2])
    return out


def relation_stage_losses(model, grid, batch, stage, train=True):
    """Single-stage view of relation_losses_multi (kept for direct tests)."""
    batches = [SampledPairBatch([], []) for _ in range(model.config.stages)]
    batches[stage] = batch
    return relation_losses_multi(model, grid, batches, train=train)[stage]


def default_cascade_config(config: RunConfig) -> CascadeConfig:
    t = config.stages
    return CascadeConfig(
        stages=t,
        iou_thresholds=tuple(round(0.5 + 0.1 * i, 2) for i in range(t)),
        merge_threshold=config.merge_threshold,
        beta=tuple(0.5 ** i for i in range(t)),
        gamma=tuple(0.5 ** i for i in range(t)),
        seg_weights=tuple(0.5 ** i for i in range(t)),
    )


@dataclass
class TrainLog:
    phase1: list = field(default_factory=list)  # per-epoch mean total loss
    phase2: list = field(default_factory=list)


def train_model(train_scenes, spec: SceneSpec, config: RunConfig,
                grids=None, log=None) -> CascadeModel:
    """Phase 1 trains localization (and segmentation); phase 2 trains
    everything jointly under the weighted per-stage objective."""
    if not train_scenes:
        raise DataError("no training scenes")
    channels = config.channels or spec.min_channels()
    model = CascadeModel(spec.n_classes, spec.n_verbs, channels,
                         default_cascade_config(config),
                         seed=config.seed, person_class=spec.person_class,
                         segment=config.mode == "segment",
                         representation=config.representation)
    model.hinge_margin = config.hinge_margin
    model.cooccurrence = build_cooccurrence(train_scenes, spec)
    if grids is None:
        grids = prepare_grids(train_scenes, spec, channels, config.grid_size)
    if log is None:
        log = TrainLog()
    rng = np.random.default_rng([config.seed, 101])
    order = np.arange(len(train_scenes))
    batch_spec = TrainBatchSpec()

    # image-centric batches: mean gradient over a few scenes per step
    phase1_batch, phase2_batch = 8, 8

    for _ in range(config.phase1_epochs):
        rng.shuffle(order)
        epoch_losses = []
        pending = 0
        for step_i, si in enumerate(order, start=1):
            scene = train_scenes[si]
            grid = grids[scene.image_id]
            gt = scene.gt_instances()
            proposals = seed_instances(scene)
            stage_losses = []
            for t in range(model.config.stages):
                losses, proposals = localization_stage_step(model, grid, proposals, gt, t)
                stage_losses.append(losses)
            pending += 1
            if step_i % phase1_batch == 0 or step_i == len(order):
                sgd_step(model.store, config.learning_rate / pending)
                pending = 0
            epoch_losses.append(total_loss(stage_losses, model.config))
        log.phase1.append(float(np.mean(epoch_losses)))

    for _ in range(config.phase2_epochs):
        rng.shuffle(order)
        epoch_losses = []
        pending = 0
        for step_i, si in enumerate(order, start=1):
            scene = train_scenes[si]
            grid = grids[scene.image_id]
            gt = scene.gt_instances()
            gt_pairs = gt_pairs_of(scene, spec)
            proposals = seed_instances(scene)
            stage_losses = []
            stage_batches = []
            for t in range(model.config.stages):
                losses, refined = localization_stage_step(model, grid, proposals, gt, t)
                # detector outputs are the seed-lineage refinements; the
                # resampled ground-truth boxes only augment localization
                outputs = [inst for inst in refined if inst.lineage >= 0]
                candidates = enumerate_pairs(outputs, model.person_class)
                stage_batches.append(sample_training_pairs(
                    candidates, gt_pairs, model.config.iou_thresholds[t],
                    model.n_verbs, batch_spec, rng, stage=t + 1))
                stage_losses.append(losses)
                proposals = refined
            for losses, rel in zip(stage_losses,
                                   relation_losses_multi(model, grid, stage_batches)):
                losses.update(rel)
            pending += 1
            if step_i % phase2_batch == 0 or step_i == len(order):
                sgd_step(model.store, config.learning_rate / pending)
                pending = 0
            epoch_losses.append(total_loss(stage_losses, model.config))
        log.phase2.append(float(np.mean(epoch_losses)))

    polish_ranking(model, train_scenes, spec, config, grids=grids)
    return model


# ------------------------------------------------------- inference & eval

def infer_scenes(model: CascadeModel, scenes, spec: SceneSpec, config: RunConfig,
                 grids=None):
    """Predictions per scene, as NDJSON-ready records."""
    if grids is None:
        channels = config.channels or spec.min_channels()
        grids = prepare_grids(scenes, spec, channels, config.grid_size)
    records = []
    for scene in scenes:
        preds = infer_image(grids[scene.image_id], seed_instances(scene), model,
                            top_k=config.top_k)
        records.append(predictions_to_record(scene.image_id, preds,
                                             with_masks=model.segment))
    return records


def predictions_by_image(model, scenes, spec, config, grids=None, fusion="hadamard"):
    """In-memory {image_id: [TripletRecord]} view of the model's output."""
    if grids is None:
        channels = config.channels or spec.min_channels()
        grids = prepare_grids(scenes, spec, channels, config.grid_size)
    by_image = {}
    index = 0
    for scene in scenes:
        preds = infer_image(grids[scene.image_id], seed_instances(scene), model,
                            top_k=config.top_k, fusion=fusion)
        records = []
        for p in preds:
            records.append(TripletRecord(p.human.box, p.object.box, p.verb,
                                         p.score, index, p.human.mask, p.object.mask))
            index += 1
        by_image[scene.image_id] = records
    return by_image


def ground_truth_by_image(scenes):
    by_image = {}
    for scene in scenes:
        records = []
        for i, t in enumerate(scene.triplets):
            h, o = scene.entities[t.human], scene.entities[t.object]
            records.append(TripletRecord(h.box, o.box, t.verb, 0.0, i, h.mask, o.mask))
        by_image[scene.image_id] = records
    return by_image


def evaluate_detection(model, scenes, spec, config, grids=None, preds=None,
                       fusion="hadamard"):
    if preds is None:
        preds = predictions_by_image(model, scenes, spec, config, grids, fusion)
    return map_rel(preds, ground_truth_by_image(scenes), spec.n_verbs)


def evaluate_segmentation(model, scenes, spec, config, grids=None, preds=None,
                          ks=(20, 50, 100)):
    if preds is None:
        preds = predictions_by_image(model, scenes, spec, config, grids)
    return recall_at_k(preds, ground_truth_by_image(scenes), spec.geometric_verbs,
                       ks=ks, mode="mask" if model.segment else "box")


def _eval_path_ranking_features(model, scenes, spec, config, grids):
    """Cached [fused, geometric] ranking inputs and annotated/un-annotated
    labels per scene, built through the inference path with the last
    stage's fusion semantics."""
    from .features import cross_stage_fuse as _fuse
    from .interaction import dedup_by_lineage, enumerate_pairs, match_candidate_to_gt, \
        merge_and_filter, run_localization

    thr = model.config.iou_thresholds[-1]
    cached = []
    for scene in scenes:
        grid = grids[scene.image_id]
        gt_pairs = gt_pairs_of(scene, spec)
        stage_outputs = run_localization(grid, seed_instances(scene), model)
        kept = dedup_by_lineage(merge_and_filter(stage_outputs,
                                                 model.config.merge_threshold))
        candidates = enumerate_pairs(kept, model.person_class)
        if not candidates:
            continue
        rows, labels = [], []
        for cand in candidates:
            feats = model.build_features(grid, cand.human, cand.object)
            prev = feats.x_v if model.config.stages > 1 else np.zeros_like(feats.x_v)
            fused = _fuse(feats.x_v, prev, model.fusion_stack)
            rows.append(np.concatenate([fused, feats.x_g]))
            gi, _ = match_candidate_to_gt(cand, gt_pairs, thr)
            labels.append(gi >= 0)
        labels = np.asarray(labels)
        if labels.any() and not labels.all():
            cached.append((np.stack(rows), labels))
    return cached


def polish_ranking(model, scenes, spec, config, grids=None):
    """Ranking-only refinement: hinge steps on the deployed ranking head
    over frozen inference-path features, until the margin constraint holds
    (or the epoch budget runs out). Localization and classification stay
    untouched."""
    from .numerics import ParamStore as _Store

    if config.rrm_polish_epochs <= 0:
        return
    if grids is None:
        channels = config.channels or spec.min_channels()
        grids = prepare_grids(scenes, spec, channels, config.grid_size)
    cached = _eval_path_ranking_features(model, scenes, spec, config, grids)
    if not cached:
        return
    head = model.rrm_heads[-1]
    store = _Store()
    for name, p in head.params("rrm_polish"):
        store.add(name, p)
    for _ in range(config.rrm_polish_epochs):
        violations = 0
        for rows, labels in cached:
            g = head.fc.forward(rows)[:, 0]
            loss, d_pos, d_neg = pairwise_hinge_loss(g[labels], g[~labels],
                                                     model.hinge_margin)
            if loss == 0.0:
                continue
            violations += 1
            norm = max(int(labels.sum()) * int((~labels).sum()), 1)
            d = np.zeros_like(g)
            d[labels] = d_pos / norm
            d[~labels] = d_neg / norm
            head.fc.backward(d[:, None])
            sgd_step(store, config.rrm_polish_lr)
        if not violations:
            break


def ranking_constraint_report(model, scenes, spec, config, grids=None):
    """Per-scene check of the ranking constraint on annotated pairs.

    Candidate pairs are built through the inference path, partitioned into
    annotated / un-annotated at the last stage's IoU threshold, and scored
    with the deployed ranking head. Returns (scenes where every annotated
    pair outranks every un-annotated one, scenes with both kinds present,
    total raw hinge sum)."""
    if grids is None:
        channels = config.channels or spec.min_channels()
        grids = prepare_grids(scenes, spec, channels, config.grid_size)
    cached = _eval_path_ranking_features(model, scenes, spec, config, grids)
    head = model.rrm_heads[-1]
    ordered_scenes = 0
    hinge_total = 0.0
    for rows, labels in cached:
        g = head.fc.forward(rows)[:, 0]
        hinge, _, _ = pairwise_hinge_loss(g[labels], g[~labels], model.hinge_margin)
        hinge_total += hinge
        ordered_scenes += int(g[labels].min() > g[~labels].max())
    return ordered_scenes, len(cached), hinge_total


def stage_mean_ious(model, scenes, spec, config, grids=None):
    """Mean best-IoU against ground truth of each stage's outputs."""
    if grids is None:
        channels = config.channels or spec.min_channels()
        grids = prepare_grids(scenes, spec, channels, config.grid_size)
    sums = np.zeros(model.config.stages)
    counts = np.zeros(model.config.stages)
    for scene in scenes:
        gt_boxes = [e.box for e in scene.entities]
        outputs = run_localization(grids[scene.image_id], seed_instances(scene), model)
        for t, stage in enumerate(outputs):
            for inst in stage:
                best = max((box_iou(inst.box, g) for g in gt_boxes), default=0.0)
                sums[t] += best
                counts[t] += 1
    return [float(s / c) if c else 0.0 for s, c in zip(sums, counts)]
