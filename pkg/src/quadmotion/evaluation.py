"""Model evaluation: held-out reconstruction metrics and generation quality.

Reconstruction decodes each held-out sequence from its posterior mean (plus the
rigid head) and scores projected keypoints and rasterized silhouettes against
ground truth. Generation samples the prior and scores the motion Chamfer
distance against the held-out set; both sides are projected in the canonical
frame (identity rigid transform) so the comparison covers articulated motion
only, since sampled motions carry no rigid trajectory of their own.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ValidationError
from .metrics import (
    MetricReport,
    acceleration_error,
    mask_iou,
    motion_chamfer_distance,
    pck_at_threshold,
    sequence_mse,
    velocity_error,
)
from .motionvae import MotionVAE
from .skeleton import MotionSequence, keypoints2d
from .synthdata import DatasetManifest, rasterize_skeleton_mask
from .trainer import TrainingTensors, build_training_tensors, predict_vae_batch


@dataclass
class EvalOptions:
    sample_count: int = 200
    sample_seed: int = 0
    pck_alpha: float = 0.1
    mask_frames: int = 4  # silhouette IoU frames scored per sequence (evenly spaced)


def canonical_keypoint_sequences(dataset: DatasetManifest, records) -> list[np.ndarray]:
    """Ground-truth keypoints re-projected with an identity rigid transform."""
    out = []
    for r in records:
        motion = r.motion()
        canonical = MotionSequence(
            rigid_rot=torch.zeros_like(motion.rigid_rot),
            rigid_trans=torch.zeros_like(motion.rigid_trans),
            bone_rot=motion.bone_rot,
        )
        out.append(keypoints2d(dataset.skeleton, canonical, r.camera).numpy())
    return out


def sampled_keypoint_sequences(
    model: MotionVAE, dataset: DatasetManifest, count: int, seq_len: int, generator
) -> list[np.ndarray]:
    """Prior samples decoded to canonical-frame 2D keypoint sequences."""
    rot = model.sample_prior(seq_len, count=count, generator=generator)
    zeros = torch.zeros(count, seq_len, 3, dtype=rot.dtype)
    motion = MotionSequence(rigid_rot=zeros, rigid_trans=zeros.clone(), bone_rot=rot)
    kp = keypoints2d(dataset.skeleton, motion, dataset.camera).numpy()
    return [kp[i] for i in range(count)]


def reconstruct_eval_sequences(
    model: MotionVAE, dataset: DatasetManifest, data: TrainingTensors | None = None
) -> np.ndarray:
    """Posterior-mean reconstructions of the eval split, as (N, T, B, 2) keypoints."""
    records = dataset.eval_records
    if not records:
        raise ValidationError("dataset has no eval sequences")
    if data is None:
        data = build_training_tensors(dataset, records, model.config)
    model.eval()
    with torch.no_grad():
        pred, _ = predict_vae_batch(model, data, torch.arange(data.count), generator=None)
        kp = keypoints2d(dataset.skeleton, pred, dataset.camera)
    return kp.numpy()


def evaluate_model(
    model: MotionVAE, dataset: DatasetManifest, options: EvalOptions | None = None
) -> tuple[MetricReport, list[dict]]:
    """Full evaluation pass; returns the aggregate report and per-sequence details."""
    options = options or EvalOptions()
    records = dataset.eval_records
    pred_kp = reconstruct_eval_sequences(model, dataset)
    h, w = dataset.camera.image_size

    details = []
    for i, r in enumerate(records):
        gt = r.keypoints.astype(np.float64)
        pred = pred_kp[i].astype(np.float64)
        frames = np.linspace(0, r.length - 1, min(options.mask_frames, r.length)).astype(int)
        ious = [
            mask_iou(
                rasterize_skeleton_mask(
                    pred[t], dataset.skeleton.parents, r.camera.image_size,
                    float(dataset.config.get("capsule_radius", 2.5)),
                ),
                r.masks[t],
            )
            for t in frames
        ]
        details.append(
            {
                "seq_id": r.seq_id,
                "gait": r.gait,
                "frames": int(r.length),
                "pck": pck_at_threshold(pred, gt, h, w, options.pck_alpha),
                "mask_iou": float(np.mean(ious)),
                "velocity_error": velocity_error(pred, gt),
                "acceleration_error": acceleration_error(pred, gt),
                "recon_mse": sequence_mse(pred, gt),
            }
        )

    gt_canonical = canonical_keypoint_sequences(dataset, records)
    generator = torch.Generator().manual_seed(options.sample_seed)
    generated = sampled_keypoint_sequences(
        model, dataset, options.sample_count, records[0].length, generator
    )
    forward, backward, mcd = motion_chamfer_distance(generated, gt_canonical)

    report = MetricReport(
        pck=float(np.mean([d["pck"] for d in details])),
        mask_iou=float(np.mean([d["mask_iou"] for d in details])),
        velocity_error=float(np.mean([d["velocity_error"] for d in details])),
        acceleration_error=float(np.mean([d["acceleration_error"] for d in details])),
        mcd_forward=forward,
        mcd_backward=backward,
        mcd=mcd,
        sequence_count=len(records),
        frame_count=int(sum(r.length for r in records)),
        generated_count=options.sample_count,
        extras={"recon_mse": float(np.mean([d["recon_mse"] for d in details]))},
    )
    return report, details
