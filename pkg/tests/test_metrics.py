"""Metric tests against exhaustive brute-force oracles and invariance properties."""

import numpy as np
import pytest

from quadmotion.errors import ValidationError
from quadmotion.metrics import (
    KeypointMap,
    MetricReport,
    acceleration_error,
    fit_linear_keypoint_map,
    mask_iou,
    motion_chamfer_distance,
    pck_at_threshold,
    sequence_mse,
    velocity_error,
)


# ---------------------------------------------------------------------------
# linear keypoint map


def test_keypoint_map_recovers_permutation():
    rng = np.random.default_rng(0)
    perm = rng.permutation(6)
    p = np.eye(6)[perm]
    src = rng.normal(size=(12, 6, 2)) * 10
    tgt = np.einsum("ts,fsc->ftc", p, src)
    fit = fit_linear_keypoint_map(src, tgt)
    np.testing.assert_allclose(fit.matrix, p, atol=1e-8)
    assert fit.residual < 1e-12


def test_keypoint_map_recovers_scaling():
    rng = np.random.default_rng(1)
    src = rng.normal(size=(10, 5, 2))
    fit = fit_linear_keypoint_map(src, 2.0 * src)
    np.testing.assert_allclose(fit.matrix, 2.0 * np.eye(5), atol=1e-8)
    assert fit.residual < 1e-12


def test_keypoint_map_recovers_planted_map_under_noise():
    rng = np.random.default_rng(2)
    planted = rng.normal(size=(7, 5))
    src = rng.normal(size=(40, 5, 2)) * 5
    noise = 0.01
    tgt = np.einsum("ts,fsc->ftc", planted, src) + rng.normal(0, noise, size=(40, 7, 2))
    fit = fit_linear_keypoint_map(src, tgt)
    assert np.abs(fit.matrix - planted).max() < 0.05
    assert fit.residual < 4 * noise**2 * 7 / 7 + 1e-3  # at the noise floor


def test_keypoint_map_warns_on_rank_deficiency():
    rng = np.random.default_rng(3)
    src = rng.normal(size=(8, 4, 2))
    src[:, 3] = src[:, 0]  # duplicate column -> rank deficient
    tgt = rng.normal(size=(8, 4, 2))
    with pytest.warns(UserWarning, match="rank deficient"):
        fit_linear_keypoint_map(src, tgt)


def test_keypoint_map_apply_shapes():
    m = KeypointMap(matrix=np.eye(3) * 2.0, residual=0.0)
    out = m.apply(np.ones((4, 3, 2)))
    assert out.shape == (4, 3, 2)
    np.testing.assert_allclose(out, 2.0)


# ---------------------------------------------------------------------------
# PCK


def test_pck_perfect_and_hopeless():
    rng = np.random.default_rng(4)
    kp = rng.normal(size=(6, 5, 2)) * 20
    assert pck_at_threshold(kp, kp, 64, 48) == 1.0
    off = kp + np.array([2 * 0.1 * 64, 0.0])
    assert pck_at_threshold(off, kp, 64, 48) == 0.0


def test_pck_matches_counting_oracle():
    rng = np.random.default_rng(5)
    gt = rng.normal(size=(50, 2)) * 10
    pred = gt + rng.normal(size=(50, 2)) * 4
    h, w, alpha = 40, 60, 0.1
    got = pck_at_threshold(pred, gt, h, w, alpha)
    count = 0
    for i in range(50):
        dx, dy = pred[i] - gt[i]
        if (dx * dx + dy * dy) ** 0.5 < alpha * 60:
            count += 1
    assert got == pytest.approx(count / 50)


def test_pck_monotone_in_alpha():
    rng = np.random.default_rng(6)
    gt = rng.normal(size=(80, 2)) * 10
    pred = gt + rng.normal(size=(80, 2)) * 3
    values = [pck_at_threshold(pred, gt, 64, 64, a) for a in (0.02, 0.05, 0.1, 0.2, 0.5)]
    assert values == sorted(values)


def test_pck_rejects_empty():
    with pytest.raises(ValidationError):
        pck_at_threshold(np.zeros((0, 2)), np.zeros((0, 2)), 4, 4)


# ---------------------------------------------------------------------------
# mask IoU


def test_mask_iou_basic_cases():
    a = np.zeros((8, 8), dtype=bool)
    a[:4] = True
    assert mask_iou(a, a) == 1.0
    b = np.zeros((8, 8), dtype=bool)
    b[6:] = True
    assert mask_iou(a, b) == 0.0
    assert mask_iou(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


def test_mask_iou_matches_pixel_loop_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a = rng.random((10, 12)) > 0.5
        b = rng.random((10, 12)) > 0.5
        inter = union = 0
        for i in range(10):
            for j in range(12):
                inter += a[i, j] and b[i, j]
                union += a[i, j] or b[i, j]
        want = 1.0 if union == 0 else inter / union
        assert mask_iou(a, b) == pytest.approx(want)


def test_mask_iou_symmetric():
    rng = np.random.default_rng(8)
    a = rng.random((9, 9)) > 0.4
    b = rng.random((9, 9)) > 0.6
    assert mask_iou(a, b) == mask_iou(b, a)


def test_mask_iou_rejects_dim_mismatch():
    with pytest.raises(ValidationError):
        mask_iou(np.zeros((4, 4)), np.zeros((4, 5)))


# ---------------------------------------------------------------------------
# velocity error


def test_velocity_error_zero_for_identical():
    rng = np.random.default_rng(9)
    seq = rng.normal(size=(6, 4, 2)) * 8
    assert velocity_error(seq, seq) == 0.0


def test_velocity_error_static_prediction_is_one():
    gt = np.zeros((5, 3, 2))
    for t in range(5):
        gt[t] += t * np.array([2.0, 1.0])  # uniform displacement every frame
    pred = np.zeros((5, 3, 2))
    assert velocity_error(pred, gt) == pytest.approx(1.0)


def test_velocity_error_matches_loop_oracle():
    rng = np.random.default_rng(10)
    gt = np.cumsum(rng.normal(size=(7, 5, 2)), axis=0)
    pred = gt + rng.normal(size=(7, 5, 2)) * 0.3
    got = velocity_error(pred, gt)

    frame_means = []
    for t in range(1, 7):
        vals = []
        for k in range(5):
            dg = gt[t, k] - gt[t - 1, k]
            dp = pred[t, k] - pred[t - 1, k]
            n = np.linalg.norm(dg)
            if n >= 1e-6:
                vals.append(np.linalg.norm(dp - dg) / n)
        if vals:
            frame_means.append(np.mean(vals))
    assert got == pytest.approx(np.mean(frame_means))


def test_velocity_error_excludes_degenerate_keypoints():
    gt = np.zeros((4, 2, 2))
    gt[:, 0, 0] = np.arange(4)  # keypoint 0 moves, keypoint 1 static
    pred = gt.copy()
    pred[:, 1, 1] = 9.0  # static keypoint offset must not count
    assert velocity_error(pred, gt) == 0.0


def test_velocity_error_all_degenerate_raises():
    with pytest.raises(ValidationError):
        velocity_error(np.ones((4, 3, 2)), np.ones((4, 3, 2)) * 2)


def test_velocity_error_offset_invariance():
    rng = np.random.default_rng(11)
    gt = np.cumsum(rng.normal(size=(6, 4, 2)), axis=0)
    pred = gt + rng.normal(size=(6, 4, 2)) * 0.2
    shifted = velocity_error(pred + 7.5, gt + 7.5)
    assert shifted == pytest.approx(velocity_error(pred, gt))


# ---------------------------------------------------------------------------
# acceleration error


def test_acceleration_error_zero_for_linear_trajectories():
    t = np.arange(6, dtype=float)[:, None, None]
    gt = np.tile(t, (1, 3, 2)) * np.array([1.5, -2.0])
    pred = gt + 4.0  # constant offset keeps acceleration zero
    assert acceleration_error(pred, gt) == pytest.approx(0.0)


def test_acceleration_error_zero_for_identical():
    rng = np.random.default_rng(12)
    seq = np.cumsum(rng.normal(size=(6, 4, 2)), axis=0)
    assert acceleration_error(seq, seq) == 0.0


def test_acceleration_error_matches_loop_oracle():
    rng = np.random.default_rng(13)
    gt = np.cumsum(rng.normal(size=(8, 3, 2)), axis=0)
    pred = gt + rng.normal(size=(8, 3, 2)) * 0.5
    got = acceleration_error(pred, gt)
    vals = []
    for t in range(1, 7):
        for k in range(3):
            ap = pred[t + 1, k] - 2 * pred[t, k] + pred[t - 1, k]
            ag = gt[t + 1, k] - 2 * gt[t, k] + gt[t - 1, k]
            vals.append(np.linalg.norm(ap - ag))
    assert got == pytest.approx(np.mean(vals))


def test_acceleration_error_needs_three_frames():
    with pytest.raises(ValidationError):
        acceleration_error(np.zeros((2, 3, 2)), np.zeros((2, 3, 2)))


def test_acceleration_error_offset_invariance():
    rng = np.random.default_rng(14)
    gt = np.cumsum(rng.normal(size=(7, 4, 2)), axis=0)
    pred = gt + rng.normal(size=(7, 4, 2)) * 0.3
    assert acceleration_error(pred + 3.0, gt + 3.0) == pytest.approx(acceleration_error(pred, gt))


# ---------------------------------------------------------------------------
# motion Chamfer distance


def test_mcd_zero_for_identical_sets():
    rng = np.random.default_rng(15)
    seqs = [rng.normal(size=(5, 4, 2)) for _ in range(4)]
    fwd, bwd, mcd = motion_chamfer_distance(seqs, list(seqs))
    assert fwd == 0.0 and bwd == 0.0 and mcd == 0.0


def test_mcd_single_pair_equals_sequence_mse():
    rng = np.random.default_rng(16)
    a = rng.normal(size=(5, 4, 2))
    b = rng.normal(size=(5, 4, 2))
    fwd, bwd, mcd = motion_chamfer_distance([a], [b])
    want = sequence_mse(a, b)
    assert fwd == pytest.approx(want)
    assert bwd == pytest.approx(want)
    assert mcd == pytest.approx(want)


def test_mcd_matches_exhaustive_double_loop():
    rng = np.random.default_rng(17)
    gen = [rng.normal(size=(6, 3, 2)) for _ in range(5)]
    gt = [rng.normal(size=(6, 3, 2)) for _ in range(7)]
    fwd, bwd, mcd = motion_chamfer_distance(gen, gt)

    def mse(a, b):
        total = 0.0
        for t in range(6):
            for k in range(3):
                total += ((a[t, k] - b[t, k]) ** 2).sum()
        return total / (6 * 3)

    fwd_want = np.mean([min(mse(g, x) for x in gen) for g in gt])
    bwd_want = np.mean([min(mse(x, g) for g in gt) for x in gen])
    assert fwd == pytest.approx(fwd_want)
    assert bwd == pytest.approx(bwd_want)
    assert mcd == pytest.approx((fwd_want + bwd_want) / 2)


def test_mcd_rejects_empty_sets():
    with pytest.raises(ValidationError):
        motion_chamfer_distance([], [np.zeros((3, 2, 2))])


def test_mcd_zero_iff_sets_cover_each_other():
    rng = np.random.default_rng(18)
    a = rng.normal(size=(4, 3, 2))
    b = rng.normal(size=(4, 3, 2))
    fwd, bwd, mcd = motion_chamfer_distance([a, b], [b, a])
    assert mcd == 0.0
    _, _, nonzero = motion_chamfer_distance([a, b], [b, a + 0.5])
    assert nonzero > 0.0


# ---------------------------------------------------------------------------
# shared invariances and the report type


def test_metrics_invariant_to_joint_index_permutation():
    rng = np.random.default_rng(19)
    gt = np.cumsum(rng.normal(size=(6, 5, 2)), axis=0)
    pred = gt + rng.normal(size=(6, 5, 2)) * 0.4
    perm = rng.permutation(5)
    assert pck_at_threshold(pred[:, perm], gt[:, perm], 64, 64) == pytest.approx(
        pck_at_threshold(pred, gt, 64, 64)
    )
    assert velocity_error(pred[:, perm], gt[:, perm]) == pytest.approx(velocity_error(pred, gt))
    assert acceleration_error(pred[:, perm], gt[:, perm]) == pytest.approx(
        acceleration_error(pred, gt)
    )
    before = motion_chamfer_distance([pred], [gt])
    after = motion_chamfer_distance([pred[:, perm]], [gt[:, perm]])
    assert after == pytest.approx(before)


def test_randomized_oracle_sweep():
    rng = np.random.default_rng(20)
    for _ in range(100):
        frames = int(rng.integers(3, 7))
        joints = int(rng.integers(2, 6))
        gt = np.cumsum(rng.normal(size=(frames, joints, 2)), axis=0)
        pred = gt + rng.normal(size=(frames, joints, 2)) * rng.uniform(0.1, 2.0)
        h, w = int(rng.integers(16, 128)), int(rng.integers(16, 128))
        alpha = rng.uniform(0.05, 0.3)

        err = np.linalg.norm(pred - gt, axis=-1)
        assert pck_at_threshold(pred, gt, h, w, alpha) == pytest.approx(
            float((err < alpha * max(h, w)).mean())
        )
        ap = pred[2:] - 2 * pred[1:-1] + pred[:-2]
        ag = gt[2:] - 2 * gt[1:-1] + gt[:-2]
        assert acceleration_error(pred, gt) == pytest.approx(
            float(np.linalg.norm(ap - ag, axis=-1).mean())
        )


def test_metric_report_validation():
    MetricReport(
        pck=0.5, mask_iou=0.5, velocity_error=0.1, acceleration_error=0.1,
        mcd_forward=1.0, mcd_backward=1.0, mcd=1.0,
    )
    with pytest.raises(ValidationError):
        MetricReport(
            pck=1.5, mask_iou=0.5, velocity_error=0.1, acceleration_error=0.1,
            mcd_forward=1.0, mcd_backward=1.0, mcd=1.0,
        )
    with pytest.raises(ValidationError):
        MetricReport(
            pck=0.5, mask_iou=0.5, velocity_error=-0.1, acceleration_error=0.1,
            mcd_forward=1.0, mcd_backward=1.0, mcd=1.0,
        )
