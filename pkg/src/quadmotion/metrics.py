"""Evaluation metrics for 2D keypoint sequences and silhouette masks.

Everything here is plain numpy over ground-truth-aligned arrays: keypoint
accuracy (PCK), mask IoU, first- and second-difference temporal errors, a
least-squares linear keypoint mapping for mismatched skeletons, and the
bidirectional motion Chamfer distance between sequence sets.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass
class KeypointMap:
    """Linear map from predicted joints to annotated keypoints.

    matrix is (target_K, source_K), applied per 2D coordinate:
    target ≈ matrix @ source for each frame's (K, 2) coordinate block.
    """

    matrix: np.ndarray
    residual: float  # mean squared 2D error on the fitting frames

    def apply(self, keypoints: np.ndarray) -> np.ndarray:
        """(..., source_K, 2) -> (..., target_K, 2)."""
        return np.einsum("ts,...sc->...tc", self.matrix, keypoints)


def fit_linear_keypoint_map(pred: np.ndarray, gt: np.ndarray) -> KeypointMap:
    """Least-squares fit of a (target_K, source_K) linear map over paired frames.

    pred: (F, source_K, 2) predicted joints; gt: (F, target_K, 2) annotations.
    Falls back to the minimum-norm solution (with a warning) when the stacked
    system is rank deficient.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim != 3 or gt.ndim != 3 or pred.shape[0] != gt.shape[0]:
        raise ValidationError("expected (F, K, 2) arrays with matching frame counts")
    frames, source_k = pred.shape[0], pred.shape[1]
    if 2 * frames < source_k:
        raise ValidationError(
            f"need at least {(source_k + 1) // 2} frames to fit a {source_k}-column map"
        )
    # stack frames and the two coordinates into rows: a @ m.T = b
    a = pred.transpose(0, 2, 1).reshape(-1, source_k)
    b = gt.transpose(0, 2, 1).reshape(-1, gt.shape[1])
    solution, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    if rank < source_k:
        warnings.warn(
            f"keypoint-map system is rank deficient ({rank}/{source_k}); "
            "returning the minimum-norm solution",
            stacklevel=2,
        )
    matrix = solution.T
    residual = float(np.mean(np.sum((np.einsum("ts,fsc->ftc", matrix, pred) - gt) ** 2, axis=-1)))
    return KeypointMap(matrix=matrix, residual=residual)


def pck_at_threshold(pred: np.ndarray, gt: np.ndarray, h: int, w: int, alpha: float = 0.1) -> float:
    """Fraction of keypoints with 2D error below alpha * max(h, w).

    Accepts any matching leading shape ending in (..., 2).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 2 or pred.size == 0:
        raise ValidationError("pred and gt must be matching nonempty (..., 2) arrays")
    err = np.linalg.norm(pred - gt, axis=-1)
    return float(np.mean(err < alpha * max(h, w)))


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValidationError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def velocity_error(pred: np.ndarray, gt: np.ndarray, eps: float = 1e-6) -> float:
    """Relative error of per-frame keypoint displacements.

    For each consecutive frame pair and keypoint: ||pred displacement - gt
    displacement|| / ||gt displacement||, averaged over keypoints then frames.
    Keypoints whose ground-truth displacement is below eps pixels are excluded;
    if every displacement degenerates the metric is undefined and raises.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ValidationError("expected matching (T, K, 2) sequences")
    if pred.shape[0] < 2:
        raise ValidationError("velocity error needs at least 2 frames")
    dp = np.diff(pred, axis=0)
    dg = np.diff(gt, axis=0)
    gt_norm = np.linalg.norm(dg, axis=-1)
    valid = gt_norm >= eps
    if not valid.any():
        raise ValidationError("all ground-truth displacements are degenerate")
    rel = np.linalg.norm(dp - dg, axis=-1) / np.where(valid, gt_norm, 1.0)
    per_frame_sum = np.where(valid, rel, 0.0).sum(axis=1)
    counts = valid.sum(axis=1)
    frame_means = per_frame_sum[counts > 0] / counts[counts > 0]
    return float(frame_means.mean())


def acceleration_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean norm of the difference of second finite differences of the trajectories."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ValidationError("expected matching (T, K, 2) sequences")
    if pred.shape[0] < 3:
        raise ValidationError("acceleration error needs at least 3 frames")
    ap = pred[2:] - 2 * pred[1:-1] + pred[:-2]
    ag = gt[2:] - 2 * gt[1:-1] + gt[:-2]
    return float(np.linalg.norm(ap - ag, axis=-1).mean())


def sequence_mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over frames and keypoints of squared 2D keypoint distance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError("sequences must have identical shapes")
    return float(np.sum((a - b) ** 2, axis=-1).mean())


def motion_chamfer_distance(generated, gt) -> tuple[float, float, float]:
    """Bidirectional nearest-sequence distance between two sets of keypoint sequences.

    Per direction: for every sequence in one set, the minimum sequence MSE to
    the other set, averaged. Returns (forward, backward, mean of both), where
    forward scans the ground-truth set and backward the generated set.
    """
    generated = [np.asarray(s, dtype=np.float64) for s in generated]
    gt = [np.asarray(s, dtype=np.float64) for s in gt]
    if not generated or not gt:
        raise ValidationError("both sequence sets must be nonempty")
    shape = generated[0].shape
    if any(s.shape != shape for s in generated + gt):
        raise ValidationError("all sequences must share one (T, K, 2) shape")

    gen = np.stack(generated)  # (M, T, K, 2)
    ref = np.stack(gt)  # (N, T, K, 2)
    diff = gen[None] - ref[:, None]  # (N, M, T, K, 2)
    pair_mse = np.sum(diff**2, axis=-1).mean(axis=(-1, -2))  # (N, M)
    forward = float(pair_mse.min(axis=1).mean())
    backward = float(pair_mse.min(axis=0).mean())
    return forward, backward, (forward + backward) / 2.0


@dataclass
class MetricReport:
    """Aggregated evaluation numbers plus the counts they were computed over."""

    pck: float
    mask_iou: float
    velocity_error: float
    acceleration_error: float
    mcd_forward: float
    mcd_backward: float
    mcd: float
    sequence_count: int = 0
    frame_count: int = 0
    generated_count: int = 0
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.pck <= 1.0 or not 0.0 <= self.mask_iou <= 1.0:
            raise ValidationError("pck and mask_iou must lie in [0, 1]")
        for name in ("velocity_error", "acceleration_error", "mcd_forward", "mcd_backward", "mcd"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")

    def as_dict(self) -> dict:
        out = {
            "pck": self.pck,
            "mask_iou": self.mask_iou,
            "velocity_error": self.velocity_error,
            "acceleration_error": self.acceleration_error,
            "mcd_forward": self.mcd_forward,
            "mcd_backward": self.mcd_backward,
            "mcd": self.mcd,
            "sequence_count": self.sequence_count,
            "frame_count": self.frame_count,
            "generated_count": self.generated_count,
        }
        out.update(self.extras)
        return out
