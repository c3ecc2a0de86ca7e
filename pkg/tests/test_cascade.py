import numpy as np
import pytest

from hoicascade.cascade import (
    CascadeConfig,
    Instance,
    LabeledProposal,
    SegHead,
    StageHead,
    apply_box_deltas,
    box_delta_targets,
    dedup_by_lineage,
    merge_and_filter,
    rasterize_mask_into_box,
    refine_stage,
    resample_for_stage,
    segment_stage,
)
from hoicascade.errors import DataError
from hoicascade.geometry import BitMask, Box, FeatureGrid, box_iou


def make_grid(c=3, size=16, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureGrid.from_array(rng.normal(size=(c, size, size)))


def zero_head(channels=3):
    head = StageHead(channels, np.random.default_rng(0))
    head.regressor.w.value[...] = 0.0
    head.regressor.b.value[...] = 0.0
    head.scorer.w.value[...] = 0.0
    head.scorer.b.value[...] = 0.0
    return head


class TestCascadeConfig:
    def test_defaults_match_protocol_constants(self):
        cfg = CascadeConfig()
        assert cfg.stages == 3
        assert cfg.iou_thresholds == (0.5, 0.6, 0.7)
        assert cfg.merge_threshold == 0.3
        assert cfg.beta == (1.0, 0.5, 0.25)
        assert cfg.gamma == (1.0, 0.5, 0.25)

    def test_thresholds_must_increase(self):
        with pytest.raises(DataError):
            CascadeConfig(iou_thresholds=(0.5, 0.5, 0.7))

    def test_schedule_lengths_checked(self):
        with pytest.raises(DataError):
            CascadeConfig(stages=2, iou_thresholds=(0.5, 0.6, 0.7))


class TestRefineStage:
    def test_zero_head_keeps_box_and_half_confidence(self):
        grid = make_grid()
        inst = Instance(1, 0.9, Box(2, 2, 8, 9), lineage=0)
        out = refine_stage(grid, inst, zero_head())
        assert out.box == inst.box
        assert out.confidence == 0.5
        assert out.stage_of_origin == 1
        # idempotent under the zero head
        again = refine_stage(grid, out, zero_head())
        assert again.box == inst.box

    def test_dx_shifts_center(self):
        box = Box(0, 0, 10, 10)
        shifted = apply_box_deltas(box, [0.1, 0.0, 0.0, 0.0])
        np.testing.assert_allclose(shifted.center, (6.0, 5.0))
        np.testing.assert_allclose((shifted.width, shifted.height), (10.0, 10.0))

    def test_dw_doubles_width(self):
        box = Box(0, 0, 10, 10)
        wider = apply_box_deltas(box, [0.0, 0.0, np.log(2.0), 0.0])
        np.testing.assert_allclose(wider.width, 20.0)
        np.testing.assert_allclose(wider.center, box.center)

    def test_delta_roundtrip(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            x1, y1 = rng.uniform(0, 5, 2)
            src = Box(x1, y1, x1 + rng.uniform(2, 8), y1 + rng.uniform(2, 8))
            x1, y1 = rng.uniform(0, 5, 2)
            dst = Box(x1, y1, x1 + rng.uniform(2, 8), y1 + rng.uniform(2, 8))
            back = apply_box_deltas(src, box_delta_targets(src, dst))
            np.testing.assert_allclose(back.as_tuple(), dst.as_tuple(), atol=1e-9)

    def test_degenerate_refinement_dropped(self):
        grid = make_grid()
        head = zero_head()
        head.regressor.b.value[...] = [0.0, 0.0, -9.0, 0.0]  # shrink to nothing
        inst = Instance(1, 0.9, Box(2, 2, 8, 8))
        assert refine_stage(grid, inst, head) is None


class TestSegmentStage:
    def test_positive_logits_fill_box(self):
        grid = make_grid(size=32)
        head = SegHead(3, np.random.default_rng(0))
        head.fc.w.value[...] = 0.0
        head.fc.b.value[...] = 5.0
        inst = Instance(1, 0.9, Box(4, 4, 20, 24), stage_of_origin=1)
        out = segment_stage(grid, inst, head)
        assert out.mask is not None
        inside = out.mask.bbox()
        assert box_iou(inside, inst.box) > 0.8

    def test_zero_weights_single_cell_fallback(self):
        grid = make_grid(size=32)
        head = SegHead(3, np.random.default_rng(0))
        head.fc.w.value[...] = 0.0
        head.fc.b.value[...] = 0.0
        inst = Instance(1, 0.9, Box(4, 4, 18, 18), stage_of_origin=1)
        out = segment_stage(grid, inst, head)
        # argmax of an all-zero logit vector is cell 0: top-left corner only
        assert out.mask.any()
        expected_cells = np.zeros((14, 14), dtype=bool)
        expected_cells[0, 0] = True
        ref = rasterize_mask_into_box(expected_cells, inst.box, 32, 32)
        assert out.mask == ref

    def test_checkerboard_vs_rasterization_oracle(self):
        cells = np.indices((14, 14)).sum(axis=0) % 2 == 0
        box = Box(3.0, 5.0, 17.0, 19.0)
        mask = rasterize_mask_into_box(cells, box, 24, 24)
        for py in range(24):
            for px in range(24):
                cx, cy = px + 0.5, py + 0.5
                inside = box.x1 <= cx < box.x2 and box.y1 <= cy < box.y2
                if not inside:
                    assert not mask.bits[py, px]
                else:
                    row = int((cy - box.y1) / box.height * 14)
                    col = int((cx - box.x1) / box.width * 14)
                    assert mask.bits[py, px] == cells[row, col]

    def test_prev_pooled_shifts_logits(self):
        grid = make_grid(size=32, seed=5)
        head = SegHead(3, np.random.default_rng(1))
        inst = Instance(1, 0.9, Box(4, 4, 20, 20), stage_of_origin=2)
        a = segment_stage(grid, inst, head)
        prev = np.full(3 * 14 * 14, 10.0)
        b = segment_stage(grid, inst, head, prev_pooled=prev)
        assert a.mask != b.mask


class TestResampleForStage:
    def test_gt_proposal_positive_at_any_threshold(self):
        gt = [Instance(2, 1.0, Box(1, 1, 9, 9))]
        for mu in (0.5, 0.6, 0.7, 0.95):
            labeled = resample_for_stage([Box(1, 1, 9, 9)], gt, mu)
            assert labeled[0].positive
            np.testing.assert_allclose(labeled[0].delta_target, np.zeros(4), atol=1e-12)

    def test_iou_55_crosses_schedule(self):
        # box (0,0,10,10) vs (0,0,10,5.5): inter 55, union 100 -> IoU 0.55
        gt = [Instance(1, 1.0, Box(0, 0, 10, 10))]
        prop = Box(0, 0, 10, 5.5)
        np.testing.assert_allclose(box_iou(prop, gt[0].box), 0.55)
        at_05 = resample_for_stage([prop], gt, 0.5)
        at_06 = resample_for_stage([prop], gt, 0.6)
        assert at_05[0].positive and not at_06[0].positive

    def test_gt_boxes_appended_as_positives(self):
        gt = [Instance(1, 1.0, Box(0, 0, 4, 4)), Instance(2, 1.0, Box(6, 6, 9, 9))]
        labeled = resample_for_stage([], gt, 0.5)
        assert len(labeled) == 2
        assert all(l.positive for l in labeled)
        assert [l.class_id for l in labeled] == [1, 2]

    def test_no_ground_truth_all_negative(self):
        labeled = resample_for_stage([Box(0, 0, 2, 2)], [], 0.5)
        assert len(labeled) == 1 and not labeled[0].positive

    def test_positives_always_reach_threshold(self):
        rng = np.random.default_rng(9)
        gt = [Instance(1, 1.0, Box(2, 2, 10, 10))]
        props = []
        for _ in range(40):
            x1, y1 = rng.uniform(0, 8, 2)
            props.append(Box(x1, y1, x1 + rng.uniform(2, 10), y1 + rng.uniform(2, 10)))
        for mu in (0.5, 0.6, 0.7):
            for lab in resample_for_stage(props, gt, mu):
                if lab.positive:
                    assert lab.iou >= mu or lab.iou == 1.0

    def test_bad_threshold(self):
        with pytest.raises(DataError):
            resample_for_stage([], [], 1.5)


class TestMergeAndFilter:
    def test_all_confident_kept_in_order(self):
        s1 = [Instance(1, 0.9, Box(0, 0, 2, 2), stage_of_origin=1, lineage=0)]
        s2 = [Instance(1, 0.9, Box(1, 1, 3, 3), stage_of_origin=2, lineage=0),
              Instance(2, 0.9, Box(4, 4, 6, 6), stage_of_origin=2, lineage=1)]
        merged = merge_and_filter([s1, s2], 0.3)
        assert [m.stage_of_origin for m in merged] == [1, 2, 2]

    def test_default_threshold_03(self):
        dropped = Instance(1, 0.29, Box(0, 0, 2, 2))
        kept = Instance(1, 0.30, Box(0, 0, 2, 2))
        merged = merge_and_filter([[dropped, kept]])
        assert merged == [kept]

    def test_mixed_vs_filter_oracle(self):
        rng = np.random.default_rng(13)
        stages = []
        for t in range(3):
            stages.append([Instance(1, float(rng.uniform()), Box(0, 0, 2, 2),
                                    stage_of_origin=t + 1, lineage=i)
                           for i in range(5)])
        tau = 0.4
        merged = merge_and_filter(stages, tau)
        expected = [i for stage in stages for i in stage if i.confidence >= tau]
        assert merged == expected
        assert all(i.confidence >= tau for i in merged)

    def test_empty_result_allowed(self):
        assert merge_and_filter([[Instance(1, 0.1, Box(0, 0, 2, 2))]], 0.3) == []


class TestLineageDedup:
    def test_latest_stage_wins(self):
        a1 = Instance(1, 0.8, Box(0, 0, 2, 2), stage_of_origin=1, lineage=0)
        a3 = Instance(1, 0.7, Box(0, 0, 2.2, 2.2), stage_of_origin=3, lineage=0)
        b2 = Instance(2, 0.9, Box(5, 5, 7, 7), stage_of_origin=2, lineage=1)
        kept = dedup_by_lineage([a1, a3, b2])
        assert kept == [a3, b2]

    def test_unlineaged_pass_through(self):
        plain = Instance(1, 0.5, Box(0, 0, 2, 2))
        assert dedup_by_lineage([plain]) == [plain]
