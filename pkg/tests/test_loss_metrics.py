import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vesselshot.loss_metrics import (
    LossConfig,
    MetricsError,
    aggregate,
    all_metrics,
    ce_loss,
    dice_coefficient,
    dice_loss,
    format_table,
    hybrid_loss,
    iou,
    precision,
    sensitivity,
)


def _logits_for_probs(probs):
    """Binary logits whose softmax equals the given foreground probabilities."""
    p = torch.tensor(probs, dtype=torch.float64).clamp(1e-12, 1 - 1e-12)
    return torch.stack([torch.zeros_like(p), torch.log(p / (1 - p))])


class TestCeLoss:
    def test_near_perfect_prediction(self):
        gt = torch.ones(2, 2, 2, dtype=torch.long)
        logits = _logits_for_probs(np.full((2, 2, 2), 1 - 1e-6))
        assert ce_loss(logits, gt).item() == pytest.approx(1e-6, rel=0.01)

    def test_uniform_prediction_log2(self):
        gt = torch.zeros(2, 2, 2, dtype=torch.long)
        logits = torch.zeros(2, 2, 2, 2, dtype=torch.float64)
        assert ce_loss(logits, gt).item() == pytest.approx(math.log(2), rel=1e-9)

    def test_matches_per_voxel_hand_sum(self, rng):
        logits = torch.tensor(rng.normal(size=(2, 2, 2, 2)), dtype=torch.float64)
        gt_np = rng.integers(0, 2, size=(2, 2, 2))
        gt = torch.tensor(gt_np, dtype=torch.long)
        # brute-force: per-voxel -log softmax at the gt class
        total = 0.0
        for x in range(2):
            for y in range(2):
                for z in range(2):
                    s = logits[:, x, y, z].numpy()
                    p = np.exp(s) / np.exp(s).sum()
                    total += -np.log(p[gt_np[x, y, z]])
        assert ce_loss(logits, gt).item() == pytest.approx(total / 8, abs=1e-6)

    def test_gradient_matches_finite_differences(self, rng):
        logits = torch.tensor(
            rng.normal(size=(2, 2, 2, 2)), dtype=torch.float64, requires_grad=True
        )
        gt = torch.tensor(rng.integers(0, 2, size=(2, 2, 2)), dtype=torch.long)
        ce_loss(logits, gt).backward()
        h = 1e-6
        flat = logits.detach().view(-1)
        for i in range(0, flat.numel(), 3):
            orig = flat[i].item()
            flat[i] = orig + h
            plus = ce_loss(logits.detach(), gt).item()
            flat[i] = orig - h
            minus = ce_loss(logits.detach(), gt).item()
            flat[i] = orig
            fd = (plus - minus) / (2 * h)
            assert logits.grad.view(-1)[i].item() == pytest.approx(fd, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(MetricsError):
            ce_loss(torch.zeros(2, 2, 2, 2), torch.zeros(3, 3, 3, dtype=torch.long))


class TestDiceLoss:
    def test_one_hot_near_zero(self):
        gt = torch.ones(2, 2, 2, dtype=torch.long)
        logits = _logits_for_probs(np.full((2, 2, 2), 1 - 1e-9))
        assert dice_loss(logits, gt).item() == pytest.approx(0.0, abs=1e-4)

    def test_zero_foreground_prob_nonempty_gt(self):
        gt = torch.ones(2, 2, 2, dtype=torch.long)
        logits = _logits_for_probs(np.full((2, 2, 2), 1e-12))
        assert dice_loss(logits, gt).item() == pytest.approx(1.0, abs=1e-4)

    def test_half_probability_half_foreground(self):
        gt = torch.zeros(2, 2, 2, dtype=torch.long)
        gt[0] = 1  # 4 of 8 voxels foreground
        logits = torch.zeros(2, 2, 2, 2, dtype=torch.float64)  # p_fg = 0.5 everywhere
        eps = 1e-5
        expected = 1.0 - (2 * (0.5 * 4) + eps) / (0.5 * 8 + 4 + eps)
        assert dice_loss(logits, gt, eps).item() == pytest.approx(expected, rel=1e-9)

    def test_bounded_in_unit_interval(self, rng):
        for _ in range(10):
            logits = torch.tensor(rng.normal(size=(2, 3, 3, 2)), dtype=torch.float64)
            gt = torch.tensor(rng.integers(0, 2, size=(3, 3, 2)), dtype=torch.long)
            val = dice_loss(logits, gt).item()
            assert 0.0 <= val <= 1.0


class TestHybridLoss:
    def test_perfect_prediction_near_zero(self):
        gt = torch.ones(2, 2, 2, dtype=torch.long)
        logits = _logits_for_probs(np.full((2, 2, 2), 1 - 1e-9))
        assert hybrid_loss(logits, gt).item() == pytest.approx(0.0, abs=1e-4)

    def test_closed_form_combination(self):
        # CE = log 2 and Dice = 0.5 at default weights: 0.6 log 2 + 0.35
        gt = torch.zeros(2, 2, 2, dtype=torch.long)
        gt[0] = 1
        logits = torch.zeros(2, 2, 2, 2, dtype=torch.float64)
        expected = 0.6 * math.log(2) + 0.35
        assert hybrid_loss(logits, gt).item() == pytest.approx(expected, abs=1e-5)

    def test_zero_dice_weight_reduces_to_ce(self, rng):
        logits = torch.tensor(rng.normal(size=(2, 2, 2, 2)), dtype=torch.float64)
        gt = torch.tensor(rng.integers(0, 2, size=(2, 2, 2)), dtype=torch.long)
        cfg = LossConfig(w_ce=0.6, w_dice=0.0)
        assert hybrid_loss(logits, gt, cfg).item() == pytest.approx(
            0.6 * ce_loss(logits, gt).item(), rel=1e-12
        )

    def test_negative_weights_rejected(self):
        with pytest.raises(MetricsError):
            LossConfig(w_ce=-0.1)


class TestHardMetrics:
    def test_perfect_prediction(self, rng):
        gt = rng.integers(0, 2, size=(4, 4, 4))
        gt[0, 0, 0] = 1
        m = all_metrics(gt, gt)
        assert all(v == 1.0 for v in m.values())

    def test_disjoint_masks(self):
        pred = np.zeros((4, 4, 4), dtype=int)
        gt = np.zeros((4, 4, 4), dtype=int)
        pred[0], gt[1] = 1, 1
        m = all_metrics(pred, gt)
        assert m == {"dc": 0.0, "sensitivity": 0.0, "precision": 0.0, "iou": 0.0}

    def test_confusion_matrix_oracle(self):
        # TP=2, FP=1, FN=1
        pred = np.zeros((2, 2, 2), dtype=int)
        gt = np.zeros((2, 2, 2), dtype=int)
        pred[0, 0, 0] = pred[0, 0, 1] = pred[0, 1, 0] = 1
        gt[0, 0, 0] = gt[0, 0, 1] = gt[1, 1, 1] = 1
        m = all_metrics(pred, gt)
        assert m["dc"] == pytest.approx(2 * 2 / 6)
        assert m["iou"] == pytest.approx(0.5)
        assert m["sensitivity"] == pytest.approx(2 / 3)
        assert m["precision"] == pytest.approx(2 / 3)

    def test_empty_empty_convention(self):
        z = np.zeros((2, 2, 2), dtype=int)
        assert all(v == 1.0 for v in all_metrics(z, z).values())

    def test_empty_gt_nonempty_pred(self):
        pred = np.ones((2, 2, 2), dtype=int)
        gt = np.zeros((2, 2, 2), dtype=int)
        m = all_metrics(pred, gt)
        assert (m["dc"], m["iou"], m["precision"], m["sensitivity"]) == (0.0, 0.0, 0.0, 1.0)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 10**9))
    def test_dc_iou_identity(self, seed):
        r = np.random.default_rng(seed)
        pred = r.integers(0, 2, size=(3, 3, 3))
        gt = r.integers(0, 2, size=(3, 3, 3))
        dc = dice_coefficient(pred, gt)
        j = iou(pred, gt)
        assert abs(dc - 2 * j / (1 + j)) <= 1e-12

    def test_spatial_permutation_invariance(self, rng):
        pred = rng.integers(0, 2, size=(3, 3, 3))
        gt = rng.integers(0, 2, size=(3, 3, 3))
        perm = rng.permutation(27)
        pred2 = pred.ravel()[perm].reshape(3, 3, 3)
        gt2 = gt.ravel()[perm].reshape(3, 3, 3)
        assert all_metrics(pred, gt) == all_metrics(pred2, gt2)

    def test_shape_mismatch(self):
        with pytest.raises(MetricsError):
            dice_coefficient(np.zeros((2, 2, 2)), np.zeros((3, 3, 3)))


class TestAggregate:
    def _case(self, v):
        return {"dc": v, "sensitivity": v, "precision": v, "iou": v}

    def test_single_case_sd_zero(self):
        rep = aggregate(["a"], [self._case(0.5)])
        assert rep.sd["dc"] == 0.0
        assert rep.mean["dc"] == 0.5

    def test_two_case_hand_arithmetic(self):
        rep = aggregate(["a", "b"], [self._case(0.6), self._case(0.7)])
        assert rep.mean["dc"] == pytest.approx(0.65)
        assert rep.sd["dc"] == pytest.approx(0.05)

    def test_table_formatting(self):
        rep = aggregate(["a", "b"], [self._case(0.64), self._case(0.68)])
        row = rep.format_row("1-way 5-shot")
        assert "0.66 (0.02)" in row
        table = format_table([("1-way 5-shot", rep)])
        assert table.splitlines()[0].startswith("Method")

    def test_pm_formatting(self):
        rep = aggregate(["a", "b"], [self._case(0.59), self._case(0.65)])
        assert "dc=0.62±0.03" in rep.format_pm()

    def test_empty_rejected(self):
        with pytest.raises(MetricsError):
            aggregate([], [])
