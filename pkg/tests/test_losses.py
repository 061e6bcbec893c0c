import math

import numpy as np
import pytest

from panofuse.fusion import PanopticLogits, build_panoptic_logits
from panofuse.losses import (
    IGNORE_INDEX,
    PanopticTarget,
    build_target,
    panoptic_ce,
    roi_ce,
)
from panofuse.panoptic import PanopticMap
from panofuse.pruning import PrunedSet
from panofuse.tensor import BBox, CategorySet, LogitTensor

from oracles import fd_gradient


def rng(seed=0):
    return np.random.Generator(np.random.Philox(seed))


CATS = CategorySet.synthetic(2, 2)


def logits_of(data, n_inst=0, unknown=False):
    return PanopticLogits(
        base=LogitTensor(np.asarray(data, dtype=np.float64)),
        n_inst=n_inst,
        unknown_enabled=unknown,
        survivors=PrunedSet((), ()),
    )


class TestBuildTarget:
    def gt(self):
        # 8x8: stuff band 0 on top, stuff 1 below; instances 3, 4 painted over
        ids = np.zeros((8, 8), dtype=np.uint32)
        ids[:4] = 1
        ids[4:] = 2
        ids[0:2, 0:4] = 3
        ids[5:8, 3:7] = 4
        return PanopticMap.from_ids(ids, {1: 0, 2: 1, 3: 2, 4: 3})

    def test_rate_zero_keeps_instance_slots(self):
        t = build_target(self.gt(), [3, 4], CATS, unknown_rate=0.0, seed=1)
        assert (t.channel_index[0:2, 0:4] == 2).all()  # slot 0 -> channel n_stuff+0
        assert (t.channel_index[5:8, 3:7] == 3).all()
        assert (t.channel_index[3, :] == 0).all()
        assert (t.channel_index[4, 0] == 1).all()

    def test_rate_one_retargets_all(self):
        t = build_target(self.gt(), [3, 4], CATS, unknown_rate=1.0, seed=1)
        unknown_slot = 2 + 2  # n_stuff + K
        assert (t.channel_index[0:2, 0:4] == unknown_slot).all()
        assert (t.channel_index[5:8, 3:7] == unknown_slot).all()

    def test_rounded_count_and_reproducible(self):
        ids = np.zeros((4, 40), dtype=np.uint32)
        table = {}
        for j in range(10):
            ids[:, 4 * j : 4 * j + 4] = j + 3
            table[j + 3] = 2
        table = {sid: cat for sid, cat in table.items()}
        gt = PanopticMap.from_ids(ids, table)
        order = list(range(3, 13))
        a = build_target(gt, order, CATS, unknown_rate=0.3, seed=42)
        b = build_target(gt, order, CATS, unknown_rate=0.3, seed=42)
        np.testing.assert_array_equal(a.channel_index, b.channel_index)
        unknown_slot = 2 + 10
        flagged = {
            j for j in range(10)
            if (a.channel_index[:, 4 * j : 4 * j + 4] == unknown_slot).all()
        }
        assert len(flagged) == 3  # round(0.3 * 10)
        c = build_target(gt, order, CATS, unknown_rate=0.3, seed=43)
        assert not np.array_equal(a.channel_index, c.channel_index)

    def test_void_ignored(self):
        ids = np.zeros((4, 4), dtype=np.uint32)
        ids[0, 0] = 1
        gt = PanopticMap.from_ids(ids, {1: 0})
        t = build_target(gt, [], CATS)
        assert t.channel_index[0, 0] == 0
        assert (t.channel_index.ravel()[1:] == IGNORE_INDEX).all()

    def test_unlisted_instance_rejected(self):
        with pytest.raises(ValueError, match="not listed"):
            build_target(self.gt(), [3], CATS)


class TestPanopticCe:
    def test_uniform_logits_ln_c(self):
        z = logits_of(np.zeros((5, 3, 3)))
        t = PanopticTarget(np.zeros((3, 3), dtype=np.int32))
        loss, grad = panoptic_ce(z, t)
        assert loss == pytest.approx(math.log(5), rel=1e-12)

    def test_confident_two_channel_below_log_half(self):
        data = np.zeros((2, 2, 2))
        data[0] = 3.0  # target channel has a +3 margin everywhere
        z = logits_of(data)
        t = PanopticTarget(np.zeros((2, 2), dtype=np.int32))
        loss, _ = panoptic_ce(z, t)
        assert loss < -math.log(0.5)

    def test_all_ignored(self, caplog):
        z = logits_of(np.zeros((3, 2, 2)))
        t = PanopticTarget(np.full((2, 2), IGNORE_INDEX, dtype=np.int32))
        with caplog.at_level("WARNING", logger="panofuse.losses"):
            loss, grad = panoptic_ce(z, t)
        assert loss == 0.0
        assert (grad == 0).all()
        assert "ignored" in caplog.text

    def test_gradient_matches_finite_differences(self):
        g = rng(3)
        data = g.standard_normal((6, 5, 5))
        idx = g.integers(0, 6, size=(5, 5)).astype(np.int32)
        idx[0, 0] = IGNORE_INDEX
        t = PanopticTarget(idx)
        _, grad = panoptic_ce(logits_of(data), t)

        def f(arr):
            return panoptic_ce(logits_of(arr), t)[0]

        fd = fd_gradient(f, data.copy(), eps=1e-5)
        denom = np.maximum(np.abs(fd), 1e-8)
        assert (np.abs(grad - fd) / denom).max() < 1e-4

    def test_gradient_zero_at_ignore(self):
        g = rng(4)
        data = g.standard_normal((4, 3, 3))
        idx = g.integers(0, 4, size=(3, 3)).astype(np.int32)
        idx[1, 1] = IGNORE_INDEX
        _, grad = panoptic_ce(logits_of(data), PanopticTarget(idx))
        assert (grad[:, 1, 1] == 0).all()

    def test_gradient_channel_sums_zero(self):
        g = rng(5)
        data = g.standard_normal((4, 4, 4))
        idx = g.integers(0, 4, size=(4, 4)).astype(np.int32)
        _, grad = panoptic_ce(logits_of(data), PanopticTarget(idx))
        np.testing.assert_allclose(grad.sum(axis=0), 0.0, atol=1e-9)

    def test_loss_decreases_when_target_logit_rises(self):
        g = rng(6)
        data = g.standard_normal((4, 3, 3))
        idx = g.integers(0, 4, size=(3, 3)).astype(np.int32)
        t = PanopticTarget(idx)
        base, _ = panoptic_ce(logits_of(data), t)
        bumped = data.copy()
        bumped[idx[0, 0], 0, 0] += 0.5
        higher, _ = panoptic_ce(logits_of(bumped), t)
        assert higher < base

    def test_loss_from_real_target(self):
        from panofuse.harness import generate, synthesize_inputs
        from panofuse.pruning import canvas_paste

        scene, gt, _ = generate(21, (32, 32), 2, 2, 3)
        x, props = synthesize_inputs(scene, seed=22)
        pruned = canvas_paste(props, 32, 32)
        z = build_panoptic_logits(x, scene.categories(), pruned, enable_unknown=True)
        order = [2 + 1 + j for j in range(3)]
        t = build_target(gt, order, scene.categories(), unknown_rate=0.0, seed=0)
        loss, grad = panoptic_ce(z, t)
        assert loss >= 0.0
        assert grad.shape == z.base.data.shape


class TestRoiCe:
    def test_box_matching_28_reduces_to_plain_ce(self):
        g = rng(10)
        data = g.standard_normal((3, 30, 30))
        labels = g.integers(0, 3, size=(28, 28))
        box = BBox(1.0, 1.0, 29.0, 29.0)
        loss, grad = roi_ce(LogitTensor(data), box, labels)
        crop = data[:, 1:29, 1:29]
        shifted = crop - crop.max(axis=0, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=0))
        picked = np.take_along_axis(shifted, labels[None], axis=0)[0]
        assert loss == pytest.approx(float((logz - picked).mean()), rel=1e-12)

    def test_uniform_logits_ln_c(self):
        labels = np.zeros((28, 28), dtype=np.int64)
        loss, _ = roi_ce(LogitTensor(np.zeros((4, 10, 10))), BBox(0, 0, 10, 10), labels)
        assert loss == pytest.approx(math.log(4), rel=1e-12)

    def test_zero_area_box_rejected(self):
        labels = np.zeros((28, 28), dtype=np.int64)
        with pytest.raises(ValueError, match="empty"):
            roi_ce(LogitTensor(np.zeros((2, 8, 8))), BBox(3.0, 3.0, 3.2, 3.2), labels)

    def test_bad_labels_rejected(self):
        labels = np.full((28, 28), 9, dtype=np.int64)
        with pytest.raises(ValueError):
            roi_ce(LogitTensor(np.zeros((2, 8, 8))), BBox(0, 0, 8, 8), labels)

    def test_gradient_matches_finite_differences(self):
        g = rng(11)
        h, w, c = 11, 9, 4
        data = g.standard_normal((c, h, w))
        box = BBox(1.3, 2.1, 7.8, 9.6)
        labels = g.integers(0, c, size=(28, 28))
        t = LogitTensor(data)
        _, grad = roi_ce(t, box, labels)
        from panofuse.tensor import rasterize_box

        y0, y1, x0, x1 = rasterize_box(box, h, w)
        assert grad.shape == (c, y1 - y0, x1 - x0)

        def f(crop):
            full = data.copy()
            full[:, y0:y1, x0:x1] = crop
            return roi_ce(LogitTensor(full), box, labels)[0]

        fd = fd_gradient(f, data[:, y0:y1, x0:x1].copy(), eps=1e-5)
        denom = np.maximum(np.abs(fd), 1e-8)
        assert (np.abs(grad - fd) / denom).max() < 1e-4

    def test_gradient_pixel_sums_zero(self):
        g = rng(12)
        data = g.standard_normal((3, 12, 12))
        labels = g.integers(0, 3, size=(28, 28))
        _, grad = roi_ce(LogitTensor(data), BBox(2, 2, 9, 10), labels)
        np.testing.assert_allclose(grad.sum(axis=0), 0.0, atol=1e-9)

    def test_loss_decreases_when_target_logit_rises(self):
        g = rng(13)
        data = g.standard_normal((3, 10, 10))
        labels = np.full((28, 28), 1, dtype=np.int64)
        box = BBox(0, 0, 10, 10)
        base, _ = roi_ce(LogitTensor(data), box, labels)
        bumped = data.copy()
        bumped[1] += 0.25
        lower, _ = roi_ce(LogitTensor(bumped), box, labels)
        assert lower < base
