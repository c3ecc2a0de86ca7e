"""Human-centric relation features: class-verb co-occurrence prior,
geometric pair encoding, attention-enhanced visual features and the
cross-stage fused vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .geometry import Box
from .numerics import FCStack, softmax_rows

FUSED_DIM = 1024
GEOMETRIC_DIM = 256

FACE_TOP_FRACTION = 0.30
FACE_WIDTH_FRACTION = 0.50


class CooccurrenceTable:
    """Object-class x verb co-occurrence counts with row frequencies."""

    def __init__(self, counts):
        counts = np.asarray(counts, dtype=np.float64)
        if counts.ndim != 2:
            raise ShapeError("co-occurrence counts must be 2-d")
        if np.any(counts < 0):
            raise DataError("co-occurrence counts must be non-negative")
        self.counts = counts

    @classmethod
    def from_triplets(cls, triplets, n_classes, n_verbs):
        """triplets: iterable of (object_class, verb) pairs from annotations."""
        triplets = list(triplets)
        if not triplets:
            raise DataError("no annotated triplets to build a co-occurrence table")
        counts = np.zeros((n_classes, n_verbs))
        for obj_class, verb in triplets:
            counts[obj_class, verb] += 1
        return cls(counts)

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def n_verbs(self):
        return self.counts.shape[1]

    def frequencies(self):
        """Row-normalized counts; rows with no observations are uniform."""
        totals = self.counts.sum(axis=1, keepdims=True)
        uniform = np.full_like(self.counts, 1.0 / self.n_verbs)
        with np.errstate(invalid="ignore"):
            freq = np.where(totals > 0, self.counts / np.where(totals > 0, totals, 1.0), uniform)
        return freq

    def to_json(self):
        return json.dumps({str(c): self.frequencies()[c].tolist()
                           for c in range(self.n_classes)}, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        n_classes = len(data)
        rows = [data[str(c)] for c in range(n_classes)]
        table = cls.__new__(cls)
        table.counts = np.asarray(rows, dtype=np.float64)
        return table


def semantic_prior(object_class, table: CooccurrenceTable):
    """Verb-frequency row for an object class; uniform for unseen classes."""
    if 0 <= object_class < table.n_classes:
        return table.frequencies()[object_class].copy()
    return np.full(table.n_verbs, 1.0 / table.n_verbs)


def geometric_feature(pair_map, encoder):
    """256-d descriptor of the two-channel pair map."""
    pair_map = np.asarray(pair_map, dtype=np.float64)
    if pair_map.ndim == 3 and pair_map.shape[0] != 2:
        raise ShapeError(f"pair map must have 2 channels, got {pair_map.shape}")
    return encoder.forward(pair_map)


@dataclass(frozen=True)
class FaceRegion:
    box: Box
    source: str  # "annotated" | "heuristic"


def face_region(human_box: Box, annotation: Box | None = None) -> FaceRegion:
    """Facial region of a person: the annotation when given, otherwise the
    top 30% of the box height over the middle 50% of its width, clipped
    to the person box."""
    if annotation is not None:
        clipped = Box(max(annotation.x1, human_box.x1), max(annotation.y1, human_box.y1),
                      min(annotation.x2, human_box.x2), min(annotation.y2, human_box.y2))
        return FaceRegion(clipped, "annotated")
    w = human_box.width
    x1 = human_box.x1 + (1.0 - FACE_WIDTH_FRACTION) / 2.0 * w
    x2 = x1 + FACE_WIDTH_FRACTION * w
    y2 = human_box.y1 + FACE_TOP_FRACTION * human_box.height
    return FaceRegion(Box(x1, human_box.y1, x2, y2), "heuristic")


# ------------------------------------------------------------------- IHSM

def ihsm_enhance(h_grid):
    """Self-similarity context pooling over a pooled human feature.

    Every spatial position attends to all positions with weights
    softmax_j(h_i . h_j); the context is added back onto the input.
    Returns (enhanced grid, attention matrix [(H*W) x (H*W)]).
    """
    h_grid = np.asarray(h_grid, dtype=np.float64)
    c, gh, gw = h_grid.shape
    x = h_grid.reshape(c, gh * gw).T            # (P, C)
    attn = softmax_rows(x @ x.T)                # (P, P)
    ctx = attn @ x                              # (P, C)
    out = (x + ctx).T.reshape(c, gh, gw)
    return out, attn


def ihsm_backward(d_out, h_grid, attn):
    """Gradient of ihsm_enhance's output w.r.t. its input grid."""
    h_grid = np.asarray(h_grid, dtype=np.float64)
    c, gh, gw = h_grid.shape
    x = h_grid.reshape(c, gh * gw).T            # (P, C)
    d_out = np.asarray(d_out, dtype=np.float64).reshape(c, gh * gw).T
    dx = d_out.copy()                           # residual path
    d_ctx = d_out
    d_attn = d_ctx @ x.T                        # (P, P)
    dx += attn.T @ d_ctx
    # softmax backward, then through the similarity logits S = X X^T
    d_logits = attn * (d_attn - (d_attn * attn).sum(axis=1, keepdims=True))
    dx += (d_logits + d_logits.T) @ x
    return dx.T.reshape(c, gh, gw)


# ------------------------------------------------------------------- EFRA

def build_efra_stack(channels, pooled_hw, rng, hidden=256):
    """FC_x2 stack scoring the relevance of a face-derived feature for an
    object feature: flattened concat -> hidden -> sigmoid scalar."""
    in_dim = 2 * channels * pooled_hw[0] * pooled_hw[1]
    return FCStack(in_dim, hidden, 1, rng, out_activation="sigmoid")


def efra_attend(face_feat, noface_feat, obj_feat, face_stack, noface_stack):
    """Attention scores (alpha, alpha_bar) in (0, 1) for the facial and
    face-removed human features against the object feature.

    Accepts single grids (C, H, W) or batches (B, C, H, W); the stacks
    cache this forward, so call the matching backward before reusing them.
    """
    face_feat = np.asarray(face_feat, dtype=np.float64)
    noface_feat = np.asarray(noface_feat, dtype=np.float64)
    obj_feat = np.asarray(obj_feat, dtype=np.float64)
    if not (face_feat.shape == noface_feat.shape == obj_feat.shape):
        raise ShapeError("EFRA features must share one shape")
    squeeze = face_feat.ndim == 3
    if squeeze:
        face_feat, noface_feat, obj_feat = (a[None] for a in (face_feat, noface_feat, obj_feat))
    b = face_feat.shape[0]
    fo = np.concatenate([face_feat.reshape(b, -1), obj_feat.reshape(b, -1)], axis=1)
    no = np.concatenate([noface_feat.reshape(b, -1), obj_feat.reshape(b, -1)], axis=1)
    alpha = face_stack.forward(fo)[:, 0]
    alpha_bar = noface_stack.forward(no)[:, 0]
    if squeeze:
        return float(alpha[0]), float(alpha_bar[0])
    return alpha, alpha_bar


def efra_attend_backward(d_alpha, d_alpha_bar, face_stack, noface_stack, feat_shape):
    """Backpropagate score gradients through both stacks.

    Returns (d_face, d_noface, d_obj) matching the forward feature shapes.
    """
    d_alpha = np.atleast_1d(np.asarray(d_alpha, dtype=np.float64))
    d_alpha_bar = np.atleast_1d(np.asarray(d_alpha_bar, dtype=np.float64))
    b = d_alpha.shape[0]
    flat = int(np.prod(feat_shape))
    d_fo = face_stack.backward(d_alpha[:, None])
    d_no = noface_stack.backward(d_alpha_bar[:, None])
    d_face = d_fo[:, :flat].reshape(b, *feat_shape)
    d_noface = d_no[:, :flat].reshape(b, *feat_shape)
    d_obj = (d_fo[:, flat:] + d_no[:, flat:]).reshape(b, *feat_shape)
    return d_face, d_noface, d_obj


def efra_enhance(obj_feat, face_feat, noface_feat, alpha, alpha_bar):
    """Object feature enriched by the weighted face-derived features."""
    obj_feat = np.asarray(obj_feat, dtype=np.float64)
    if obj_feat.shape != np.shape(face_feat) or obj_feat.shape != np.shape(noface_feat):
        raise ShapeError("EFRA enhance requires matching shapes")
    return obj_feat + alpha * np.asarray(face_feat) + alpha_bar * np.asarray(noface_feat)


def efra_enhance_backward(d_enh, face_feat, noface_feat, alpha, alpha_bar):
    """Gradients of efra_enhance w.r.t. (obj, face, noface, alpha, alpha_bar)."""
    d_enh = np.asarray(d_enh, dtype=np.float64)
    d_obj = d_enh
    d_face = alpha * d_enh
    d_noface = alpha_bar * d_enh
    d_alpha = float((d_enh * face_feat).sum())
    d_alpha_bar = float((d_enh * noface_feat).sum())
    return d_obj, d_face, d_noface, d_alpha, d_alpha_bar


# ------------------------------------------------------------- assembly

def assemble_visual(human_feat, obj_feat, union_feat):
    """Channel concatenation (human, object, union) -> (3C, H, W)."""
    parts = [np.asarray(a, dtype=np.float64) for a in (human_feat, obj_feat, union_feat)]
    if not (parts[0].shape == parts[1].shape == parts[2].shape):
        raise ShapeError("visual parts must share one shape")
    return np.concatenate(parts, axis=0)


def split_visual(visual):
    """Inverse of assemble_visual."""
    c = visual.shape[0]
    if c % 3:
        raise ShapeError("visual tensor channel count must be divisible by 3")
    third = c // 3
    return visual[:third], visual[third:2 * third], visual[2 * third:]


def build_fusion_stack(visual_dim, rng, hidden=FUSED_DIM):
    """Linear FC_x2 mapping the summed visual tensors to the 1024-d vector."""
    return FCStack(visual_dim, hidden, FUSED_DIM, rng)


def cross_stage_fuse(x_v, x_v_prev, stack):
    """Fused 1024-d visual vector from the current and prior-stage tensors.

    Stage 1 passes a zero tensor as predecessor. Accepts single tensors
    or batches whose leading axis is the batch.
    """
    x_v = np.asarray(x_v, dtype=np.float64)
    x_v_prev = np.asarray(x_v_prev, dtype=np.float64)
    if x_v.shape != x_v_prev.shape:
        raise ShapeError(f"stage tensors differ: {x_v.shape} vs {x_v_prev.shape}")
    squeeze = x_v.ndim in (1, 3)  # single vector or single (3C, H, W) tensor
    total = x_v + x_v_prev
    flat = total.reshape(1, -1) if squeeze else total.reshape(total.shape[0], -1)
    fused = stack.forward(flat)
    return fused[0] if squeeze else fused
