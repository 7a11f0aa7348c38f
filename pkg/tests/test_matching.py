import itertools

import numpy as np
import pytest

from vidseg import autodiff as ad
from vidseg import matching as m
from vidseg.gradcheck import finite_difference_check


def brute_force_min_cost(cost: np.ndarray) -> float:
    """Exhaustive minimum over injective assignments (oracle)."""
    n, k = cost.shape
    if n <= k:
        best = np.inf
        for cols in itertools.permutations(range(k), n):
            best = min(best, sum(cost[i, c] for i, c in enumerate(cols)))
        return best
    return brute_force_min_cost(cost.T)


class TestHungarian:
    def test_two_by_two(self):
        a = m.hungarian(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert a.pairs == ((0, 0), (1, 1))
        assert a.total_cost(np.array([[0.0, 1.0], [1.0, 0.0]])) == 0.0

    def test_one_by_one(self):
        assert m.hungarian(np.array([[3.5]])).pairs == ((0, 0),)

    def test_empty(self):
        assert m.hungarian(np.zeros((0, 4))).pairs == ()
        assert m.hungarian(np.zeros((4, 0))).pairs == ()

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            m.hungarian(np.array([[np.inf, 1.0], [1.0, 0.0]]))

    @pytest.mark.parametrize("n", range(1, 8))
    def test_square_exhaustive_dimension_sweep(self, n):
        g = np.random.default_rng(100 + n)
        for _ in range(25):
            cost = g.normal(size=(n, n))
            a = m.hungarian(cost)
            assert len(a.pairs) == n
            assert a.total_cost(cost) == pytest.approx(brute_force_min_cost(cost), abs=1e-9)

    def test_rectangular_random_instances(self):
        g = np.random.default_rng(7)
        for _ in range(300):
            n, k = g.integers(1, 6, size=2)
            cost = g.normal(size=(n, k)) * g.uniform(0.1, 10)
            a = m.hungarian(cost)
            assert len(a.pairs) == min(n, k)
            assert a.total_cost(cost) == pytest.approx(brute_force_min_cost(cost), abs=1e-9)

    def test_injectivity_enforced(self):
        with pytest.raises(ValueError):
            m.Assignment(((0, 0), (1, 0)), 2, 1)


class TestMatchCost:
    def test_perfect_prediction_cost_is_minus_lambda_cls(self):
        # Saturated correct class and exact mask: mask terms vanish, class
        # probability is ~1, so cost ~ -lambda_cls.
        w = m.LossWeights()
        gt_mask = np.array([1.0, 1.0, 0.0, 0.0])
        cost = m.match_cost(
            np.array([30.0, 0.0, 0.0]),
            np.array([20.0, 20.0, -20.0, -20.0]),
            0,
            gt_mask,
            w,
        )
        assert cost == pytest.approx(-w.cls, abs=1e-6)

    def test_hand_arithmetic_half_overlap(self):
        # Uniform class logits over 3 channels, 2x2 mask at logit 0
        # everywhere, GT covering half the pixels.
        w = m.LossWeights()
        gt = np.array([1.0, 1.0, 0.0, 0.0])
        cost = m.match_cost(np.zeros(3), np.zeros(4), 1, gt, w)
        p_cls = 1.0 / 3.0
        bce = np.log(2.0)  # every pixel: -log sigmoid(0) either way
        dice = 1.0 - (2 * (0.5 * 2) + 1) / (0.5 * 4 + 2 + 1)
        expected = w.cls * (-p_cls) + w.ce * bce + w.dice * dice
        assert cost == pytest.approx(expected, rel=1e-12)

    def test_monotone_in_gt_class_probability(self):
        w = m.LossWeights()
        gt = np.array([1.0, 0.0])
        mask = np.array([5.0, -5.0])
        costs = [
            m.match_cost(np.array([s, 0.0]), mask, 0, gt, w) for s in (-2.0, 0.0, 2.0, 4.0)
        ]
        assert costs == sorted(costs, reverse=True)

    def test_matrix_matches_scalar(self):
        g = np.random.default_rng(3)
        cls = g.normal(size=(3, 4))
        msk = g.normal(size=(3, 6))
        gts = [0, 2]
        gt_masks = (g.uniform(size=(2, 6)) < 0.5).astype(float)
        mat = m.match_cost_matrix(cls, msk, gts, gt_masks)
        for i in range(3):
            for j in range(2):
                assert mat[i, j] == pytest.approx(
                    m.match_cost(cls[i], msk[i], gts[j], gt_masks[j]), rel=1e-12
                )


class TestDiceLoss:
    def test_perfect_saturated(self):
        logits = ad.tensor(np.full((1, 9), 25.0))
        gt = np.ones((1, 9))
        assert m.dice_loss(logits, gt).item() == pytest.approx(0.0, abs=1e-6)

    def test_empty_gt_saturated_negative(self):
        logits = ad.tensor(np.full((1, 9), -25.0))
        gt = np.zeros((1, 9))
        assert m.dice_loss(logits, gt).item() == pytest.approx(0.0, abs=1e-6)

    def test_hand_arithmetic_half_mask(self):
        # p = 0.5 on every pixel of a 2x2 grid, GT covers half:
        # 1 - (2*(0.5*2)+1) / (0.5*4 + 2 + 1) = 1 - 3/5 = 0.4
        logits = ad.tensor(np.zeros((1, 4)))
        gt = np.array([[1.0, 1.0, 0.0, 0.0]])
        assert m.dice_loss(logits, gt).item() == pytest.approx(0.4, rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        g = np.random.default_rng(11)
        gt = (g.uniform(size=(2, 16)) < 0.5).astype(float)
        err = finite_difference_check(
            lambda x: m.dice_loss(x, gt), ad.tensor(g.normal(size=(2, 16)))
        )
        assert err < 1e-4


class TestSegmenterLoss:
    def _setup(self, seed=0):
        g = np.random.default_rng(seed)
        cls = ad.tensor(g.normal(size=(4, 4)), requires_grad=True)
        msk = ad.tensor(g.normal(size=(4, 9)), requires_grad=True)
        gt_classes = [0, 2]
        gt_masks = (g.uniform(size=(2, 9)) < 0.5).astype(float)
        assignment = m.Assignment(((0, 0), (2, 1)), 4, 2)
        return cls, msk, gt_classes, gt_masks, assignment

    def test_perfect_prediction_hits_cls_floor(self):
        # Both rows saturate their GT class and mask: every term vanishes.
        cls = ad.tensor(np.array([[30.0, 0.0], [30.0, 0.0]]))
        msk = ad.tensor(np.array([[25.0, -25.0], [-25.0, 25.0]]))
        gt_masks = np.array([[1.0, 0.0], [0.0, 1.0]])
        assignment = m.Assignment(((0, 0), (1, 1)), 2, 2)
        loss = m.segmenter_loss(cls, msk, [0, 0], gt_masks, assignment)
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_lambda_dice_scales_linearly(self):
        cls, msk, gt_classes, gt_masks, assignment = self._setup()
        w1 = m.LossWeights(cl=0.0, cls=0.0, dice=5.0, ce=0.0)
        w2 = m.LossWeights(cl=0.0, cls=0.0, dice=10.0, ce=0.0)
        l1 = m.segmenter_loss(cls, msk, gt_classes, gt_masks, assignment, weights=w1)
        l2 = m.segmenter_loss(cls, msk, gt_classes, gt_masks, assignment, weights=w2)
        assert l2.item() == pytest.approx(2 * l1.item(), rel=1e-12)

    def test_term_by_term_recomputation(self):
        cls, msk, gt_classes, gt_masks, assignment = self._setup(5)
        w = m.LossWeights()
        loss = m.segmenter_loss(cls, msk, gt_classes, gt_masks, assignment, weights=w)

        # Independent recomputation with plain numpy.
        logits = cls.data
        targets = np.array([gt_classes[0], 3, gt_classes[1], 3])
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        l_cls = -logp[np.arange(4), targets].mean()

        rows = msk.data[[0, 2]]
        p = 1 / (1 + np.exp(-rows))
        l_ce = (-(gt_masks * np.log(p) + (1 - gt_masks) * np.log(1 - p))).mean()
        num = 2 * (p * gt_masks).sum(axis=1) + 1
        den = p.sum(axis=1) + gt_masks.sum(axis=1) + 1
        l_dice = (1 - num / den).mean()

        expected = w.cls * l_cls + w.ce * l_ce + w.dice * l_dice
        assert loss.item() == pytest.approx(expected, rel=1e-10)

    def test_unmatched_rows_supervised_to_background(self):
        cls, msk, gt_classes, gt_masks, assignment = self._setup(8)
        loss = m.segmenter_loss(cls, msk, gt_classes, gt_masks, assignment)
        loss.backward()
        # Rows 1 and 3 are unmatched: their class gradient pushes towards
        # the background channel (last index) and their mask logits get none.
        for row in (1, 3):
            assert cls.grad[row][-1] < 0  # raising bg logit lowers the loss
            assert np.all(msk.grad[row] == 0.0)
        for row in (0, 2):
            assert np.any(msk.grad[row] != 0.0)

    def test_classification_gradcheck(self):
        g = np.random.default_rng(21)
        targets = g.integers(0, 5, size=6)
        err = finite_difference_check(
            lambda x: m.classification_loss(x, targets),
            ad.tensor(g.normal(size=(6, 5)) * 3),
        )
        assert err < 1e-4


class TestTrackerMatching:
    def _clip(self, seed=0, frames=3):
        g = np.random.default_rng(seed)
        classes = [0, 1]
        masks = np.zeros((2, frames, 16))
        masks[0, :, :4] = 1.0  # object 0 visible from frame 0
        masks[1, 1:, 8:12] = 1.0  # object 1 first appears at frame 1
        return m.ClipTargets(classes, masks), g

    def test_first_appearance_frames(self):
        targets, _ = self._clip()
        assert targets.first_appearance() == {0: 0, 1: 1}

    def test_matching_uses_first_appearance_frame_only(self):
        targets, g = self._clip()
        cls = [g.normal(size=(3, 3)) for _ in range(3)]
        msk = [g.normal(size=(3, 16)) for _ in range(3)]
        match = m.tracker_matching(cls, msk, targets, 0, 100, cls, msk)
        assert match.frames_used == {0: 0, 1: 1}

    def test_warm_start_switches_at_half(self):
        targets, g = self._clip(3)
        own_cls = [g.normal(size=(3, 3)) for _ in range(3)]
        own_msk = [g.normal(size=(3, 16)) for _ in range(3)]
        seg_cls = [g.normal(size=(3, 3)) for _ in range(3)]
        seg_msk = [g.normal(size=(3, 16)) for _ in range(3)]
        early = m.tracker_matching(own_cls, own_msk, targets, 49, 100, seg_cls, seg_msk)
        late = m.tracker_matching(own_cls, own_msk, targets, 50, 100, seg_cls, seg_msk)
        assert early.source == "segmenter"
        assert late.source == "tracker"

    def test_all_visible_from_first_frame_reduces_to_frame_zero_hungarian(self):
        g = np.random.default_rng(9)
        classes = [0, 1, 2]
        masks = (g.uniform(size=(3, 2, 16)) < 0.4).astype(float)
        masks[:, 0] = np.maximum(masks[:, 0], np.eye(3, 16))  # visible at frame 0
        targets = m.ClipTargets(classes, masks)
        cls = [g.normal(size=(4, 4)) for _ in range(2)]
        msk = [g.normal(size=(4, 16)) for _ in range(2)]
        match = m.tracker_matching(cls, msk, targets, 0, 10, cls, msk)
        cost = m.match_cost_matrix(cls[0], msk[0], classes, masks[:, 0])
        direct = m.hungarian(cost)
        assert match.assignment.pairs == direct.pairs


class TestTrackerLoss:
    def test_single_frame_equals_segmenter_loss(self):
        g = np.random.default_rng(4)
        cls = ad.tensor(g.normal(size=(3, 4)))
        msk = ad.tensor(g.normal(size=(3, 8)))
        gt_masks = (g.uniform(size=(2, 8)) < 0.5).astype(float)
        targets = m.ClipTargets([1, 2], gt_masks[:, None, :].reshape(2, 1, 8))
        assignment = m.Assignment(((0, 0), (1, 1)), 3, 2)
        via_tracker = m.tracker_loss([cls], [msk], targets, assignment)
        via_segmenter = m.segmenter_loss(cls, msk, [1, 2], gt_masks, assignment)
        assert via_tracker.item() == pytest.approx(via_segmenter.item(), abs=1e-12)

    def test_two_frames_sum_hand_check(self):
        g = np.random.default_rng(6)
        cls = [ad.tensor(g.normal(size=(3, 4))) for _ in range(2)]
        msk = [ad.tensor(g.normal(size=(3, 8))) for _ in range(2)]
        masks = (g.uniform(size=(2, 2, 8)) < 0.5).astype(float)
        targets = m.ClipTargets([0, 1], masks)
        assignment = m.Assignment(((1, 0), (2, 1)), 3, 2)
        total = m.tracker_loss(cls, msk, targets, assignment)
        per_frame = [
            m.segmenter_loss(cls[t], msk[t], [0, 1], masks[:, t], assignment).item()
            for t in range(2)
        ]
        assert total.item() == pytest.approx(sum(per_frame), rel=1e-12)


class TestRefinerLoss:
    def test_single_frame_equals_segmenter_loss(self):
        g = np.random.default_rng(14)
        video_cls = ad.tensor(g.normal(size=(3, 4)))
        frame_msk = [ad.tensor(g.normal(size=(3, 8)))]
        masks = (g.uniform(size=(2, 1, 8)) < 0.5).astype(float)
        targets = m.ClipTargets([0, 2], masks)
        loss, assignment = m.refiner_loss(video_cls, frame_msk, targets)
        direct = m.segmenter_loss(
            video_cls, frame_msk[0], [0, 2], masks[:, 0], assignment
        )
        assert loss.item() == pytest.approx(direct.item(), abs=1e-12)

    def test_stacked_tube_iou_identity(self):
        # Stacking frames along the mask axis pools intersections/unions,
        # so tube IoU on stacks equals sum-inter / sum-union over frames.
        g = np.random.default_rng(15)
        a = g.uniform(size=(3, 5, 7)) < 0.4
        b = g.uniform(size=(3, 5, 7)) < 0.4
        from vidseg.metrics import tube_iou

        stacked = tube_iou(a.reshape(1, -1, 7), b.reshape(1, -1, 7))
        pooled = np.logical_and(a, b).sum() / np.logical_or(a, b).sum()
        assert stacked == pytest.approx(pooled, rel=1e-12)

    def test_gt_permutation_invariance(self):
        g = np.random.default_rng(16)
        video_cls = ad.tensor(g.normal(size=(4, 4)))
        frame_msk = [ad.tensor(g.normal(size=(4, 8))) for _ in range(3)]
        masks = (g.uniform(size=(3, 3, 8)) < 0.5).astype(float)
        l1, _ = m.refiner_loss(video_cls, frame_msk, m.ClipTargets([0, 1, 2], masks))
        perm = [2, 0, 1]
        l2, _ = m.refiner_loss(video_cls, frame_msk, m.ClipTargets([2, 0, 1], masks[perm]))
        assert l1.item() == pytest.approx(l2.item(), rel=1e-12)
