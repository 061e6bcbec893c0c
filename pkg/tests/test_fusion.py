import numpy as np
import pytest

from panofuse.fusion import (
    assign_instance_classes,
    build_panoptic_logits,
    decode,
    instance_mask_map,
    instance_semantic_map,
    run_fusion,
    suppress_small_stuff,
)
from panofuse.panoptic import VOID_ID, PanopticMap, SegmentInfo
from panofuse.pruning import InstanceProposal, PrunedSet, canvas_paste
from panofuse.tensor import BBox, CategorySet, LogitTensor, MaskPatch, channel_argmax

from oracles import argmax_scan, fused_logits_reference


def rng(seed=0):
    return np.random.Generator(np.random.Philox(seed))


def patch(value=6.0):
    return MaskPatch(np.full((28, 28), value))


def pruned_from(props, h, w):
    return canvas_paste(props, h, w)


CATS = CategorySet.synthetic(2, 2)


class TestInstanceSemanticMap:
    def test_full_image_box(self):
        x_thing = LogitTensor(rng(1).standard_normal((2, 6, 6)))
        p = InstanceProposal(BBox(0, 0, 6, 6), 3, 0.9, patch())
        out = instance_semantic_map(x_thing, p, CATS)
        np.testing.assert_array_equal(out, x_thing.data[1])

    def test_zero_area_box(self):
        x_thing = LogitTensor(rng(2).standard_normal((2, 6, 6)))
        p = InstanceProposal(BBox(2.0, 2.0, 2.1, 2.1), 2, 0.9, patch())
        assert (instance_semantic_map(x_thing, p, CATS) == 0).all()

    def test_random_box_matches_loop(self):
        g = rng(3)
        x_thing = LogitTensor(g.standard_normal((2, 12, 10)))
        p = InstanceProposal(BBox(2.2, 1.7, 7.9, 9.1), 2, 0.9, patch())
        out = instance_semantic_map(x_thing, p, CATS)
        expected = np.zeros((12, 10))
        for r in range(12):
            for c in range(10):
                if 2 <= r < 9 and 2 <= c < 8:
                    expected[r, c] = x_thing.data[0, r, c]
        np.testing.assert_array_equal(out, expected)

    def test_non_thing_category_rejected(self):
        x_thing = LogitTensor(np.zeros((2, 4, 4)))
        p = InstanceProposal(BBox(0, 0, 2, 2), 1, 0.9, patch())
        with pytest.raises(ValueError):
            instance_semantic_map(x_thing, p, CATS)


class TestInstanceMaskMap:
    def test_constant_patch_full_box(self):
        p = InstanceProposal(BBox(0, 0, 8, 8), 2, 0.9, patch(1.25))
        out = instance_mask_map(p, 8, 8)
        np.testing.assert_allclose(out, 1.25)

    def test_zero_patch(self):
        p = InstanceProposal(BBox(1, 1, 5, 5), 2, 0.9, patch(0.0))
        assert (instance_mask_map(p, 8, 8) == 0).all()

    def test_zero_area_box_warns(self, caplog):
        p = InstanceProposal(BBox(3.0, 3.0, 3.1, 3.1), 2, 0.9, patch())
        with caplog.at_level("WARNING", logger="panofuse.fusion"):
            out = instance_mask_map(p, 8, 8)
        assert (out == 0).all()
        assert "empty region" in caplog.text

    def test_matches_resize_then_paste(self):
        from panofuse.tensor import bilinear_resize, rasterize_box

        g = rng(5)
        mask = MaskPatch(g.standard_normal((28, 28)))
        p = InstanceProposal(BBox(1.2, 0.9, 9.4, 6.8), 2, 0.9, mask)
        out = instance_mask_map(p, 10, 12)
        y0, y1, x0, x1 = rasterize_box(p.box, 10, 12)
        expected = np.zeros((10, 12))
        expected[y0:y1, x0:x1] = bilinear_resize(mask.logits, y1 - y0, x1 - x0)
        np.testing.assert_array_equal(out, expected)


class TestBuildPanopticLogits:
    def test_unknown_logit_arithmetic(self):
        # one pixel: max thing logit 2.0, boxed instance value 0.5 -> 1.5
        x = np.zeros((4, 1, 1))
        x[2, 0, 0] = 2.0
        x[3, 0, 0] = 0.5
        p = InstanceProposal(BBox(0, 0, 1, 1), 3, 0.9, patch(0.0))
        pruned = PrunedSet((p,), (np.ones((1, 1), dtype=bool),))
        z = build_panoptic_logits(LogitTensor(x), CATS, pruned, enable_unknown=True)
        assert z.base.data[-1, 0, 0] == pytest.approx(1.5)

    def test_zero_survivors_unknown_is_thing_max(self):
        g = rng(6)
        x = LogitTensor(g.standard_normal((4, 5, 5)))
        z = build_panoptic_logits(x, CATS, PrunedSet((), ()), enable_unknown=True)
        assert z.base.channels == 3
        np.testing.assert_allclose(z.base.data[-1], x.data[2:].max(axis=0))

    def test_stuff_channels_bit_identical(self):
        g = rng(7)
        x = LogitTensor(g.standard_normal((4, 6, 6)))
        props = [InstanceProposal(BBox(1, 1, 5, 5), 2, 0.9, patch())]
        z = build_panoptic_logits(x, CATS, pruned_from(props, 6, 6))
        np.testing.assert_array_equal(z.base.data[:2], x.data[:2])

    def test_channel_count_mismatch(self):
        x = LogitTensor(np.zeros((3, 4, 4)))
        with pytest.raises(ValueError, match="channels"):
            build_panoptic_logits(x, CATS, PrunedSet((), ()))

    @pytest.mark.parametrize("enable_unknown", [True, False])
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_per_pixel_oracle(self, seed, enable_unknown):
        g = rng(seed + 40)
        x = g.standard_normal((4, 8, 8))
        props = []
        for _ in range(int(g.integers(1, 4))):
            x0, y0 = g.uniform(0, 4, size=2)
            bw, bh = g.uniform(2, 4, size=2)
            cat = 2 + int(g.integers(2))
            props.append(
                InstanceProposal(
                    BBox(x0, y0, x0 + bw, y0 + bh), cat, 0.9,
                    MaskPatch(g.standard_normal((28, 28))),
                )
            )
        pruned = PrunedSet(
            tuple(props), tuple(np.zeros((8, 8), dtype=bool) for _ in props)
        )
        z = build_panoptic_logits(LogitTensor(x), CATS, pruned, enable_unknown)
        raw = [
            ((p.box.x0, p.box.y0, p.box.x1, p.box.y1), p.category, p.score,
             np.asarray(p.mask.logits))
            for p in props
        ]
        expected = fused_logits_reference(x, 2, raw, enable_unknown)
        np.testing.assert_allclose(z.base.data, expected, atol=1e-12)

    def test_single_survivor_negative_boxed_max(self):
        # With one survivor the boxed max inside its box can go negative.
        x = np.zeros((4, 2, 2))
        x[2] = -1.0  # thing channel for category 2
        p = InstanceProposal(BBox(0, 0, 2, 2), 2, 0.9, patch(0.0))
        pruned = PrunedSet((p,), (np.ones((2, 2), dtype=bool),))
        z = build_panoptic_logits(LogitTensor(x), CATS, pruned, enable_unknown=True)
        # thing max = 0 (channel 3), boxed max = -1 -> unknown = 1
        np.testing.assert_allclose(z.base.data[-1], 1.0)

    def test_argmax_shift_invariance(self):
        g = rng(9)
        x = g.standard_normal((4, 6, 6))
        props = [InstanceProposal(BBox(1, 1, 5, 5), 3, 0.9, patch())]
        pruned = PrunedSet(tuple(props), (np.zeros((6, 6), bool),))
        z = build_panoptic_logits(LogitTensor(x), CATS, pruned)
        base = decode(z)
        shifted = LogitTensor(z.base.data + 7.5)
        zs = type(z)(base=shifted, n_inst=z.n_inst,
                     unknown_enabled=z.unknown_enabled, survivors=z.survivors)
        np.testing.assert_array_equal(decode(zs).ids, base.ids)


class TestDecode:
    def test_zero_survivors_unknown_off_is_stuff_argmax(self):
        g = rng(10)
        x = LogitTensor(g.standard_normal((4, 7, 7)))
        z = build_panoptic_logits(x, CATS, PrunedSet((), ()), enable_unknown=False)
        pm = decode(z)
        stuff_arg = np.argmax(x.data[:2], axis=0)
        np.testing.assert_array_equal(pm.ids, stuff_arg.astype(np.uint32) + 1)

    def test_dominant_instance_channel_claims_region(self):
        x = np.zeros((4, 8, 8))
        x[0] = 1.0
        p = InstanceProposal(BBox(2, 2, 6, 6), 2, 0.9, patch(10.0))
        pruned = pruned_from([p], 8, 8)
        pm = decode(build_panoptic_logits(LogitTensor(x), CATS, pruned))
        assert (pm.ids[2:6, 2:6] == 3).all()  # instance slot 0 -> id n_stuff+1
        assert pm.segments[3].category == 2
        assert pm.segments[3].area == 16

    def test_unknown_channel_decodes_void(self):
        x = np.zeros((4, 4, 4))
        x[2] = 5.0  # strong thing logit, no instances -> unknown wins
        z = build_panoptic_logits(LogitTensor(x), CATS, PrunedSet((), ()))
        pm = decode(z)
        assert (pm.ids == VOID_ID).all()
        assert pm.segments == {}

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_argmax_oracle(self, seed):
        g = rng(seed + 60)
        x = g.standard_normal((4, 9, 9))
        props = []
        for _ in range(2):
            x0, x1 = sorted(g.uniform(0, 9, 2))
            y0, y1 = sorted(g.uniform(0, 9, 2))
            props.append(
                InstanceProposal(
                    BBox(x0, y0, x1 + 1, y1 + 1), 2 + int(g.integers(2)), 0.9,
                    MaskPatch(g.standard_normal((28, 28)) * 3),
                )
            )
        # use direct PrunedSet to exercise decode alone
        pruned = PrunedSet(tuple(props), tuple(np.zeros((9, 9), bool) for _ in props))
        z = build_panoptic_logits(LogitTensor(x), CATS, pruned, enable_unknown=True)
        pm = decode(z)
        arg = argmax_scan(np.asarray(z.base.data))
        lut = np.array([1, 2, 3, 4, 0], dtype=np.uint32)  # 2 stuff, 2 slots, unknown
        np.testing.assert_array_equal(pm.ids, lut[arg])

    def test_every_pixel_assigned(self):
        g = rng(70)
        x = LogitTensor(g.standard_normal((4, 8, 8)))
        props = [InstanceProposal(BBox(1, 1, 6, 6), 3, 0.9, patch())]
        pm = decode(build_panoptic_logits(x, CATS, pruned_from(props, 8, 8)))
        covered = np.zeros((8, 8), dtype=int)
        for sid in pm.segments:
            covered += (pm.ids == sid).astype(int)
        covered += (pm.ids == VOID_ID).astype(int)
        assert (covered == 1).all()


def simple_map(ids, cats_by_id):
    return PanopticMap.from_ids(np.asarray(ids, dtype=np.uint32), cats_by_id)


class TestAssignInstanceClasses:
    def make(self, sem_mode_cat, inst_cat=2, frac=1.0):
        # 10x10: instance id 3 occupies rows 0..4 (50 px)
        ids = np.full((10, 10), 1, dtype=np.uint32)
        ids[:5] = 3
        pm = simple_map(ids, {1: 0, 3: inst_cat})
        sem = np.zeros((10, 10), dtype=np.int64)
        inst_px = ids == 3
        flat = np.flatnonzero(inst_px.ravel())
        n_mode = int(round(frac * flat.size))
        sem_flat = sem.ravel()
        sem_flat[flat[:n_mode]] = sem_mode_cat
        sem_flat[flat[n_mode:]] = inst_cat
        sem = sem_flat.reshape(10, 10)
        props = (
            InstanceProposal(BBox(0, 0, 10, 5), inst_cat, 0.9, patch()),
        )
        return pm, props, sem

    def test_consistent_keeps_detector_class(self):
        pm, props, sem = self.make(sem_mode_cat=2, inst_cat=2)
        out = assign_instance_classes(pm, props, sem, CATS)
        assert out.segments[3].category == 2

    def test_stuff_majority_merges(self):
        pm, props, sem = self.make(sem_mode_cat=1, inst_cat=2, frac=0.6)
        out = assign_instance_classes(pm, props, sem, CATS)
        assert 3 not in out.segments
        # merged into stuff category 1 -> segment id 2
        assert out.segments[2].category == 1
        assert (out.ids[:5] == 2).all()

    def test_thing_majority_keeps_detector_class(self):
        pm, props, sem = self.make(sem_mode_cat=3, inst_cat=2, frac=0.8)
        out = assign_instance_classes(pm, props, sem, CATS)
        assert out.segments[3].category == 2

    def test_exact_half_keeps_detector_class(self):
        pm, props, sem = self.make(sem_mode_cat=1, inst_cat=2, frac=0.5)
        out = assign_instance_classes(pm, props, sem, CATS)
        assert out.segments[3].category == 2

    def test_merge_unions_existing_stuff_segment(self):
        ids = np.full((10, 10), 2, dtype=np.uint32)  # stuff category 1 everywhere
        ids[:5] = 3
        pm = simple_map(ids, {2: 1, 3: 2})
        sem = np.ones((10, 10), dtype=np.int64)  # semantic says stuff 1 everywhere
        props = (InstanceProposal(BBox(0, 0, 10, 5), 2, 0.9, patch()),)
        out = assign_instance_classes(pm, props, sem, CATS)
        assert set(out.segments) == {2}
        assert out.segments[2].area == 100

    def test_zero_pixel_instance_ignored(self):
        ids = np.full((6, 6), 1, dtype=np.uint32)
        pm = simple_map(ids, {1: 0})
        props = (InstanceProposal(BBox(0, 0, 3, 3), 2, 0.9, patch()),)
        sem = np.zeros((6, 6), dtype=np.int64)
        out = assign_instance_classes(pm, props, sem, CATS)
        assert set(out.segments) == {1}


class TestSuppressSmallStuff:
    def test_zero_threshold_no_change(self):
        ids = np.full((4, 4), 1, dtype=np.uint32)
        pm = simple_map(ids, {1: 0})
        out = suppress_small_stuff(pm, 0, CATS)
        np.testing.assert_array_equal(out.ids, pm.ids)

    def test_small_stuff_voided(self):
        ids = np.full((8, 8), 1, dtype=np.uint32)
        ids[:2, :5] = 2  # 10 px of stuff category 1
        pm = simple_map(ids, {1: 0, 2: 1})
        out = suppress_small_stuff(pm, 2048, CATS)
        assert 2 not in out.segments
        assert (out.ids[:2, :5] == VOID_ID).all()

    def test_things_untouched(self):
        ids = np.full((8, 8), 1, dtype=np.uint32)
        ids[:2, :2] = 3  # 4 px instance
        pm = simple_map(ids, {1: 0, 3: 2})
        out = suppress_small_stuff(pm, 2048, CATS)
        assert out.segments[3].area == 4

    def test_matches_table_filter_oracle(self):
        g = rng(80)
        ids = g.integers(0, 5, size=(16, 16)).astype(np.uint32)
        cats = {1: 0, 2: 1, 3: 2, 4: 3}
        pm = simple_map(ids, cats)
        out = suppress_small_stuff(pm, 4096, CATS)
        for sid, info in pm.segments.items():
            doomed = cats[sid] < 2 and info.area < 4096
            assert (sid in out.segments) == (not doomed)


class TestFusionConsistency:
    @pytest.mark.parametrize("scale", [0.25, 1.0, 4.0, 64.0])
    def test_clean_inputs_reproduce_gt_for_any_scale(self, scale):
        from panofuse.harness import generate, synthesize_inputs

        scene, gt, _ = generate(11, (40, 40), 2, 2, 4)
        x, props = synthesize_inputs(scene, logit_scale=scale, seed=12)
        pm = run_fusion(x, scene.categories(), props)
        np.testing.assert_array_equal(pm.ids, gt.ids)
        assert pm.segments.keys() == gt.segments.keys()
        for sid in gt.segments:
            assert pm.segments[sid].category == gt.segments[sid].category
            assert pm.segments[sid].area == gt.segments[sid].area

    def test_unknown_soundness_outside_boxes(self):
        # Off-box pixels: boxed-logit max is 0, unknown equals the thing max.
        g = rng(90)
        x = g.standard_normal((4, 10, 10))
        p = InstanceProposal(BBox(0, 0, 4, 4), 2, 0.9, patch())
        pruned = pruned_from([p], 10, 10)
        z = build_panoptic_logits(LogitTensor(x), CATS, pruned, enable_unknown=True)
        outside = np.ones((10, 10), dtype=bool)
        outside[:4, :4] = False
        thing_max = x[2:].max(axis=0)
        np.testing.assert_allclose(
            z.base.data[-1][outside], thing_max[outside], atol=1e-12
        )
