"""Training losses and their weighted combinations.

All losses are pure torch functions: they accept leading batch dimensions,
return per-item scalars (or a plain scalar when unbatched), are >= 0, and are
exactly 0 on their own perfect input. The two objective assemblers reduce over
the batch with a mean and return an itemized LossReport whose weighted total
is what gets backpropagated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor

from .errors import ValidationError
from .skeleton import Camera, MotionSequence, Skeleton, keypoints2d


@dataclass
class LossWeights:
    """Scalar weights for every loss term.

    `mask` and `feature` are kept for full-scale reconstruction back-ends that
    split the reconstruction term; the desk-scale keypoint proxy ignores them.
    `shape_reg` weights a no-op hook here.
    """

    mask: float = 10.0
    feature: float = 10.0
    shape_reg: float = 0.1
    temporal: float = 1.0
    kl: float = 0.001
    teacher: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValidationError(f"loss weight {name} must be >= 0, got {value}")


@dataclass
class LossReport:
    """Itemized loss values for one batch.

    terms hold unweighted scalar tensors; total is the weighted sum used for
    backprop. validate() asserts the recomposition identity and is called on
    every training step.
    """

    terms: dict[str, Tensor]
    weights: dict[str, float]
    total: Tensor

    def validate(self) -> "LossReport":
        recomposed = sum(self.weights[k] * v for k, v in self.terms.items())
        err = (self.total - recomposed).abs().item()
        if err > 1e-6 * max(1.0, abs(self.total.item())):
            raise ValidationError(f"loss total fails to recompose from terms (err={err:g})")
        return self

    def scalars(self) -> dict[str, float]:
        out = {k: float(v.item()) for k, v in self.terms.items()}
        out["total"] = float(self.total.item())
        return out


def keypoint_recon_loss(
    pred: MotionSequence, target_keypoints: Tensor, skel: Skeleton, cam: Camera
) -> Tensor:
    """Reconstruction proxy: squared pixel error of projected posed joints.

    Per frame, the mean over joints of squared 2D Euclidean error, normalized
    by max(h, w)^2; summed over the sequence. target_keypoints is (..., T, B, 2).
    """
    if target_keypoints.shape[-3] != pred.length:
        raise ValidationError(
            f"prediction has {pred.length} frames, targets have {target_keypoints.shape[-3]}"
        )
    if target_keypoints.shape[-2] != pred.joint_count:
        raise ValidationError("keypoint count must match the joint count")
    kp = keypoints2d(skel, pred, cam)
    per_frame = ((kp - target_keypoints) ** 2).sum(-1).mean(-1)  # (..., T)
    return per_frame.sum(-1) / cam.max_extent**2


def temporal_smoothness(poses: MotionSequence | Tensor) -> Tensor:
    """Sum over t of squared L2 distance between consecutive pose-parameter vectors.

    Covers the full parameter vector: rigid rotation, rigid translation, and all
    bone rotations, concatenated unweighted. Accepts a MotionSequence or a raw
    (..., T, P) parameter tensor.
    """
    params = poses.parameters() if isinstance(poses, MotionSequence) else poses
    if params.shape[-2] < 2:
        raise ValidationError("temporal smoothness needs at least 2 frames")
    diff = params[..., 1:, :] - params[..., :-1, :]
    return (diff**2).sum(dim=(-1, -2))


def kl_loss(dist) -> Tensor:
    """KL divergence from a diagonal Gaussian to the standard normal.

    With v the per-element variance: sum_i 0.5 * (v_i + mu_i^2 - 1 - log v_i).
    Zero iff the distribution is exactly standard normal.
    """
    var = dist.variance()
    return 0.5 * (var + dist.mean**2 - 1.0 - dist.logvar).sum(-1)


def teacher_loss(pred: MotionSequence, pseudo_gt: MotionSequence) -> Tensor:
    """Sum over frames of squared pose-parameter distance to recycled predictions."""
    if pred.length != pseudo_gt.length or pred.joint_count != pseudo_gt.joint_count:
        raise ValidationError("prediction and pseudo ground truth must match in T and joints")
    diff = pred.parameters() - pseudo_gt.parameters()
    return (diff**2).sum(dim=(-1, -2))


def shape_regularizer(pred: MotionSequence) -> Tensor:
    """Hook for the shape/viewpoint regularizers of a full-scale mesh back-end.

    Desk scale has no mesh regularization; always 0 (kept so the weighted
    objective shape is stable across back-ends).
    """
    return torch.zeros((), dtype=pred.bone_rot.dtype, device=pred.bone_rot.device)


def video_objective(
    pred: MotionSequence,
    target_keypoints: Tensor,
    skel: Skeleton,
    cam: Camera,
    weights: LossWeights,
) -> LossReport:
    """Phase-1 objective: reconstruction + weighted shape hook + temporal smoothness."""
    recon = keypoint_recon_loss(pred, target_keypoints, skel, cam).mean()
    temporal = temporal_smoothness(pred).mean()
    reg = shape_regularizer(pred)
    terms = {"recon": recon, "shape_reg": reg, "temporal": temporal}
    w = {"recon": 1.0, "shape_reg": weights.shape_reg, "temporal": weights.temporal}
    total = recon + weights.shape_reg * reg + weights.temporal * temporal
    return LossReport(terms=terms, weights=w, total=total).validate()


def full_objective(
    pred: MotionSequence,
    target_keypoints: Tensor,
    skel: Skeleton,
    cam: Camera,
    dist,
    pseudo_gt: MotionSequence | None,
    weights: LossWeights,
) -> LossReport:
    """Phase-2 objective: video objective + weighted KL + weighted teacher loss."""
    if pseudo_gt is None:
        raise ValidationError("phase-2 objective requires pseudo ground-truth poses")
    base = video_objective(pred, target_keypoints, skel, cam, weights)
    kl = kl_loss(dist).mean()
    teach = teacher_loss(pred, pseudo_gt).mean()
    terms = dict(base.terms, kl=kl, teacher=teach)
    w = dict(base.weights, kl=weights.kl, teacher=weights.teacher)
    total = base.total + weights.kl * kl + weights.teacher * teach
    return LossReport(terms=terms, weights=w, total=total).validate()
