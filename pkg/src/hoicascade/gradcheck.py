"""Finite-difference gradient suites for every differentiable operation:
fully connected layers, the conv+pool encoder, RoI pooling, the similarity
attention, the facial attention stacks, the ranking and classification
heads, the ranking hinge and the binary cross-entropy.
"""

from __future__ import annotations

import numpy as np

from .features import (
    build_efra_stack,
    build_fusion_stack,
    efra_attend,
    efra_attend_backward,
    ihsm_backward,
    ihsm_enhance,
)
from .geometry import Box, FeatureGrid, roi_align, roi_align_backward
from .interaction import RCMHeads, RRMHead
from .numerics import (
    ConvPoolEncoder,
    FCLayer,
    GradCheckReport,
    Param,
    binary_cross_entropy,
    finite_diff_check,
    pairwise_hinge_loss,
)


def _merge(target: GradCheckReport, source: GradCheckReport, point):
    for name, err in source.per_block.items():
        key = f"{name}@p{point}"
        target.per_block[key] = err


def check_fc(points=10, tol=1e-4):
    report = GradCheckReport(tol=tol)
    for point in range(points):
        rng = np.random.default_rng([11, point])
        fc = FCLayer(6, 4, "sigmoid" if point % 2 else "none", rng)
        x = rng.normal(size=6)
        w = rng.normal(size=4)

        def run():
            y = fc.forward(x)
            fc.backward(w)
            return float((y * w).sum())

        _merge(report, finite_diff_check(run, dict(fc.params("fc")), tol=tol), point)
    return report


def check_conv_pool(points=10, tol=1e-4):
    report = GradCheckReport(tol=tol)
    for point in range(points):
        rng = np.random.default_rng([13, point])
        enc = ConvPoolEncoder(2, (8, 8), channels=(3, 3), rng=rng)
        x = rng.normal(size=(2, 8, 8))
        w = rng.normal(size=256)

        def run():
            y = enc.forward(x)
            enc.backward(w)
            return float((y * w).sum())

        _merge(report, finite_diff_check(run, dict(enc.params("enc")), tol=tol,
                                         max_entries=6), point)
    return report


def check_roi_align(points=10, tol=1e-4):
    report = GradCheckReport(tol=tol)
    for point in range(points):
        rng = np.random.default_rng([17, point])
        data = Param(rng.normal(size=(2, 6, 6)))
        x1, y1 = rng.uniform(0.5, 2.5, 2)
        box = Box(x1, y1, x1 + rng.uniform(1, 3), y1 + rng.uniform(1, 3))
        w = rng.normal(size=(2, 3, 3))

        def run():
            grid = FeatureGrid.from_array(data.value)
            y = roi_align(grid, box, out=(3, 3))
            data.grad += roi_align_backward(w, grid, box, out=(3, 3))
            return float((y * w).sum())

        _merge(report, finite_diff_check(run, {"grid": data}, tol=tol,
                                         max_entries=12), point)
    return report


def check_ihsm(points=10, tol=1e-4):
    report = GradCheckReport(tol=tol)
    for point in range(points):
        rng = np.random.default_rng([19, point])
        grid = Param(rng.normal(scale=0.6, size=(3, 2, 2)))
        w = rng.normal(size=(3, 2, 2))

        def run():
            out, attn = ihsm_enhance(grid.value)
            grid.grad += ihsm_backward(w, grid.value, attn)
            return float((out * w).sum())

        _merge(report, finite_diff_check(run, {"human": grid}, tol=tol,
                                         max_entries=12), point)
    return report


def check_efra(points=10, tol=1e-4):
    report = GradCheckReport(tol=tol)
    for point in range(points):
        rng = np.random.default_rng([23, point])
        face_stack = build_efra_stack(2, (2, 2), rng, hidden=6)
        noface_stack = build_efra_stack(2, (2, 2), rng, hidden=6)
        f, fb, o = (rng.normal(size=(2, 2, 2)) for _ in range(3))
        blocks = dict(face_stack.params("face") + noface_stack.params("noface"))

        def run():
            alpha, alpha_bar = efra_attend(f, fb, o, face_stack, noface_stack)
            efra_attend_backward(1.0, 0.5, face_stack, noface_stack, (2, 2, 2))
            return alpha + 0.5 * alpha_bar

        _merge(report, finite_diff_check(run, blocks, tol=tol, max_entries=6), point)
    return report


def check_rrm(points=10, tol=1e-4):
    report = GradCheckReport(tol=tol)
    for point in range(points):
        rng = np.random.default_rng([29, point])
        head = RRMHead(rng)
        fused = rng.normal(size=1024)
        geo = rng.normal(size=256)

        def run():
            g = head.score(fused, geo)
            head.fc.backward(np.array([1.0]))
            return float(g)

        _merge(report, finite_diff_check(run, dict(head.params("rrm")), tol=tol,
                                         max_entries=6), point)
    return report


def check_rcm(points=10, tol=1e-4):
    report = GradCheckReport(tol=tol)
    for point in range(points):
        rng = np.random.default_rng([31, point])
        heads = RCMHeads(4, rng)
        x_s = rng.uniform(size=4)
        x_g = rng.normal(size=256)
        fused = rng.normal(size=1024)
        w = rng.normal(size=4)

        def run():
            s_s = heads.semantic.forward(x_s)
            s_g = heads.geometric.forward(x_g)
            s_v = heads.visual.forward(fused)
            heads.semantic.backward(w)
            heads.geometric.backward(w)
            heads.visual.backward(w)
            return float(((s_s + s_g + s_v) * w).sum())

        _merge(report, finite_diff_check(run, dict(heads.params("rcm")), tol=tol,
                                         max_entries=6), point)
    return report


def check_fusion(points=10, tol=1e-4):
    report = GradCheckReport(tol=tol)
    for point in range(points):
        rng = np.random.default_rng([37, point])
        stack = build_fusion_stack(12, rng, hidden=8)
        x = rng.normal(size=12)
        w = rng.normal(size=1024)

        def run():
            y = stack.forward(x[None])
            stack.backward(w[None])
            return float((y[0] * w).sum())

        _merge(report, finite_diff_check(run, dict(stack.params("fusion")), tol=tol,
                                         max_entries=6), point)
    return report


def check_hinge(points=10, tol=1e-4):
    report = GradCheckReport(tol=tol)
    for point in range(points):
        rng = np.random.default_rng([41, point])
        # resample until every pair sits away from the hinge kink
        while True:
            pos = Param(rng.uniform(0.2, 0.8, size=3))
            neg = Param(rng.uniform(0.2, 0.8, size=3))
            slack = neg.value[None, :] - pos.value[:, None] + 0.2
            if np.all(np.abs(slack) > 1e-2):
                break

        def run():
            loss, dp, dn = pairwise_hinge_loss(pos.value, neg.value, 0.2)
            pos.grad += dp
            neg.grad += dn
            return loss

        _merge(report, finite_diff_check(run, {"pos": pos, "neg": neg}, tol=tol), point)
    return report


def check_bce(points=10, tol=1e-4):
    report = GradCheckReport(tol=tol)
    for point in range(points):
        rng = np.random.default_rng([43, point])
        # keep scores away from the clamp: the log's curvature near 0/1
        # swamps the central-difference truncation budget
        scores = Param(rng.uniform(0.15, 0.85, size=6))
        targets = (rng.uniform(size=6) < 0.5).astype(float)

        def run():
            loss, grad = binary_cross_entropy(scores.value, targets)
            scores.grad += grad
            return loss

        _merge(report, finite_diff_check(run, {"scores": scores}, tol=tol), point)
    return report


ALL_CHECKS = {
    "fc_forward": check_fc,
    "conv_pool_encoder": check_conv_pool,
    "roi_align": check_roi_align,
    "ihsm_attention": check_ihsm,
    "efra_attention": check_efra,
    "rrm_head": check_rrm,
    "rcm_heads": check_rcm,
    "fusion_stack": check_fusion,
    "pairwise_hinge": check_hinge,
    "binary_cross_entropy": check_bce,
}


def run_all_gradchecks(points=10, tol=1e-4):
    return {name: fn(points=points, tol=tol) for name, fn in ALL_CHECKS.items()}
