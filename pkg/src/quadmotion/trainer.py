"""Two-phase training loop, checkpointing, and long-sequence generation.

Phase 1 trains the single-frame pose path (spatial fusion + per-frame pose and
rigid heads) under the reconstruction+smoothness objective, then sweeps the
training set once to record its predictions as pseudo ground truth. Phase 2
swaps in the full motion VAE, freezing the single-frame pose head, and trains
end-to-end with the added KL and teacher terms.

Descriptors are built once per dataset against the rest pose (the local feature
map still varies per frame through its anchors), so each step is a pure batched
tensor pass. All randomness flows through one torch.Generator whose state is
checkpointed, which makes fixed-seed runs and mid-phase resumes bit-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING

import torch
from torch import Tensor

from .errors import CheckpointError, ValidationError
from .motionvae import ModelConfig, MotionVAE, build_bone_descriptors, reparameterize
from .objectives import LossWeights, full_objective, video_objective
from .skeleton import MotionSequence, Pose
from .synthdata import DatasetManifest, SequenceRecord

if TYPE_CHECKING:
    from .config import Config

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    """Schedule, optimizer, and ablation settings for both phases."""

    phase1_epochs: int = 120
    phase2_epochs: int = 180
    batch_size: int = 16
    learning_rate: float = 1e-4
    seed: int = 0
    seq_len: int = 10
    weights: LossWeights = field(default_factory=LossWeights)
    no_temporal_smoothness: bool = False
    checkpoint_every: int = 1
    keep_checkpoints: int = 2  # epoch checkpoints retained besides the final one
    transition_iters: int = 100
    transition_lr: float = 1e-2
    transition_tol: float = 1e-4

    def __post_init__(self):
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ValidationError("epoch counts must be >= 0")
        if self.seq_len < 2:
            raise ValidationError("seq_len must be >= 2")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")

    def effective_weights(self) -> LossWeights:
        if self.no_temporal_smoothness:
            return replace(self.weights, temporal=0.0)
        return self.weights


@dataclass
class PseudoGTStore:
    """Recycled phase-1 pose predictions keyed by sequence id."""

    seq_ids: list[str]
    params: Tensor  # (N, T, 6 + 3*(B-1))

    def __post_init__(self):
        if len(self.seq_ids) != self.params.shape[0]:
            raise ValidationError("pseudo-GT ids and parameter rows disagree")
        self._index = {s: i for i, s in enumerate(self.seq_ids)}

    def get(self, seq_id: str) -> Tensor:
        if seq_id not in self._index:
            raise ValidationError(f"missing pseudo ground truth for sequence {seq_id!r}")
        return self.params[self._index[seq_id]]

    def gather(self, seq_ids: list[str]) -> Tensor:
        return torch.stack([self.get(s) for s in seq_ids])

    def require_complete(self, seq_ids: list[str]) -> None:
        for s in seq_ids:
            self.get(s)


@dataclass
class TrainingTensors:
    """Precomputed per-split tensors: descriptors, global features, target keypoints."""

    seq_ids: list[str]
    descriptors: Tensor  # (N, T, K, width)
    global_feats: Tensor  # (N, T, global_dim)
    keypoints: Tensor  # (N, T, B, 2)

    @property
    def count(self) -> int:
        return len(self.seq_ids)

    @property
    def seq_len(self) -> int:
        return self.descriptors.shape[1]


def build_training_tensors(
    dataset: DatasetManifest, records: list[SequenceRecord], model_cfg: ModelConfig
) -> TrainingTensors:
    """Assemble the batched model inputs for a list of records.

    Descriptors are built against the rest pose: the projected rest joints act
    as the query pixels into each frame's local feature map.
    """
    skel = dataset.skeleton
    if skel.bone_count != model_cfg.bone_count:
        raise ValidationError(
            f"dataset skeleton has {skel.bone_count} bones, model expects {model_cfg.bone_count}"
        )
    rest = Pose.identity(skel.joint_count)
    desc, glob, keypoints = [], [], []
    for r in records:
        frames = [
            build_bone_descriptors(r.frame_features(t), skel, rest, r.camera, model_cfg)
            for t in range(r.length)
        ]
        desc.append(torch.stack(frames))
        glob.append(torch.from_numpy(r.global_feats))
        keypoints.append(torch.from_numpy(r.keypoints))
    return TrainingTensors(
        seq_ids=[r.seq_id for r in records],
        descriptors=torch.stack(desc),
        global_feats=torch.stack(glob),
        keypoints=torch.stack(keypoints),
    )


def predict_singleframe_batch(model: MotionVAE, data: TrainingTensors, idx: Tensor) -> MotionSequence:
    """Phase-1 forward: per-frame pose predictions for a batch of sequences."""
    desc = data.descriptors[idx]  # (b, T, K, W)
    glob = data.global_feats[idx]  # (b, T, G)
    b, t, k, w = desc.shape
    flat_desc = desc.permute(2, 0, 1, 3).reshape(k, b * t, w)
    flat_glob = glob.reshape(b * t, -1)
    rigid, bones = model.predict_pose_singleframe(flat_desc, flat_glob)
    rigid = rigid.reshape(b, t, 6)
    bones = bones.reshape(b, t, k, 3)
    return MotionSequence(rigid_rot=rigid[..., 0:3], rigid_trans=rigid[..., 3:6], bone_rot=bones)


def predict_vae_batch(
    model: MotionVAE, data: TrainingTensors, idx: Tensor, generator: torch.Generator | None
):
    """Phase-2 forward: sequence encoding, reparameterized latent, decoded motion.

    With generator=None the posterior mean is used (deterministic reconstruction).
    """
    desc = data.descriptors[idx]
    glob = data.global_feats[idx]
    b, t = desc.shape[0], desc.shape[1]
    if model.config.spatial_transformer:
        dist = model.encode(desc)
    else:
        dist = model.encode_global(glob)
    if generator is None:
        z = dist.mean
    else:
        noise = torch.randn(dist.mean.shape, generator=generator, dtype=dist.mean.dtype)
        z = reparameterize(dist, noise)
    bones = model.decode(z, t)
    rigid = model.predict_rigid_pose(glob)
    pred = MotionSequence(rigid_rot=rigid[..., 0:3], rigid_trans=rigid[..., 3:6], bone_rot=bones)
    return pred, dist


# ---------------------------------------------------------------------------
# checkpointing


def _config_dict(cfg: "Config") -> dict:
    from .config import config_to_dict

    return config_to_dict(cfg)


def config_hash(cfg: "Config | dict") -> str:
    doc = cfg if isinstance(cfg, dict) else _config_dict(cfg)
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def save_checkpoint(
    path,
    model: MotionVAE,
    cfg: "Config",
    *,
    phase: int,
    epoch: int,
    optimizer: torch.optim.Optimizer | None = None,
    generator: torch.Generator | None = None,
    pseudo_gt: PseudoGTStore | None = None,
) -> None:
    """Versioned container: weights, optimizer and RNG state, config + hash."""
    doc = _config_dict(cfg)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": doc,
        "config_hash": config_hash(doc),
        "phase": phase,
        "epoch": epoch,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "generator_state": generator.get_state() if generator is not None else None,
        "pseudo_gt": None
        if pseudo_gt is None
        else {"seq_ids": pseudo_gt.seq_ids, "params": pseudo_gt.params},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path, cfg: "Config | None" = None) -> dict:
    """Load and verify a checkpoint container.

    Refuses unknown versions, payloads whose stored hash does not match their
    stored config (tampering), and, if cfg is given, mismatched configurations.
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:  # torch raises various things for corrupt files
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format in {path}")
    if config_hash(payload["config"]) != payload.get("config_hash"):
        raise CheckpointError(f"config hash mismatch in {path} (corrupt or tampered)")
    if cfg is not None and config_hash(cfg) != payload["config_hash"]:
        raise CheckpointError("checkpoint was written with a different configuration")
    return payload


def restore_model(payload: dict) -> tuple[MotionVAE, "Config"]:
    """Rebuild the model (and full config) stored in a checkpoint payload."""
    from .config import config_from_dict

    cfg = config_from_dict(payload["config"])
    model = MotionVAE(cfg.model)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, cfg


def restore_pseudo_gt(payload: dict) -> PseudoGTStore:
    stored = payload.get("pseudo_gt")
    if stored is None:
        raise CheckpointError("checkpoint carries no pseudo ground-truth store")
    return PseudoGTStore(seq_ids=list(stored["seq_ids"]), params=stored["params"])


# ---------------------------------------------------------------------------
# training loops


@dataclass
class PhaseResult:
    model: MotionVAE
    epoch_losses: list[float]
    checkpoint_path: Path | None
    pseudo_gt: PseudoGTStore | None = None


class _StepLogger:
    def __init__(self, out_dir: Path | None):
        self.path = None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            self.path = out_dir / "train_log.jsonl"

    def log(self, record: dict) -> None:
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")


def _prune_checkpoints(ckpt_dir: Path, keep: int) -> None:
    epochs = sorted(ckpt_dir.glob("epoch_*.pt"), key=lambda p: int(p.stem.split("_")[1]))
    for stale in epochs[:-keep] if keep > 0 else epochs:
        stale.unlink()


def _run_phase(
    *,
    phase: int,
    model: MotionVAE,
    params,
    data: TrainingTensors,
    dataset: DatasetManifest,
    cfg: "Config",
    epochs: int,
    out_dir: Path | None,
    generator: torch.Generator,
    start_epoch: int = 0,
    optimizer_state=None,
    pseudo_gt: PseudoGTStore | None = None,
    step_offset: int = 0,
    save_final: bool = True,
) -> tuple[list[float], Path | None, int]:
    train_cfg = cfg.train
    weights = train_cfg.effective_weights()
    optimizer = torch.optim.Adam(params, lr=train_cfg.learning_rate)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
    logger = _StepLogger(out_dir)
    ckpt_dir = out_dir / "ckpt" / f"phase{phase}" if out_dir is not None else None

    skel, cam = dataset.skeleton, dataset.camera
    losses = []
    step = step_offset
    for epoch in range(start_epoch, epochs):
        order = torch.randperm(data.count, generator=generator)
        epoch_total, batches = 0.0, 0
        for lo in range(0, data.count, train_cfg.batch_size):
            idx = order[lo : lo + train_cfg.batch_size]
            if phase == 1:
                pred = predict_singleframe_batch(model, data, idx)
                report = video_objective(pred, data.keypoints[idx], skel, cam, weights)
            else:
                pred, dist = predict_vae_batch(model, data, idx, generator)
                pseudo = MotionSequence.from_parameters(
                    pseudo_gt.gather([data.seq_ids[i] for i in idx.tolist()]),
                    joint_count=pred.joint_count,
                )
                report = full_objective(
                    pred, data.keypoints[idx], skel, cam, dist, pseudo, weights
                )
            total = report.total
            if not torch.isfinite(total):
                if out_dir is not None:
                    save_checkpoint(
                        out_dir / f"diagnostic_phase{phase}.pt", model, cfg,
                        phase=phase, epoch=epoch, optimizer=optimizer, generator=generator,
                    )
                raise RuntimeError(
                    f"non-finite loss at phase {phase} epoch {epoch} step {step}: "
                    f"{report.scalars()}"
                )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            step += 1
            epoch_total += float(total.item())
            batches += 1
            logger.log({"step": step, "phase": phase, "epoch": epoch, **report.scalars()})
        losses.append(epoch_total / max(batches, 1))

        if ckpt_dir is not None and train_cfg.checkpoint_every > 0 and (epoch + 1) % train_cfg.checkpoint_every == 0:
            save_checkpoint(
                ckpt_dir / f"epoch_{epoch + 1}.pt", model, cfg,
                phase=phase, epoch=epoch + 1, optimizer=optimizer, generator=generator,
                pseudo_gt=pseudo_gt if phase == 2 else None,
            )
            _prune_checkpoints(ckpt_dir, train_cfg.keep_checkpoints)

    final_path = None
    if ckpt_dir is not None and save_final:
        final_path = ckpt_dir / "final.pt"
        save_checkpoint(
            final_path, model, cfg, phase=phase, epoch=epochs,
            optimizer=optimizer, generator=generator,
            pseudo_gt=pseudo_gt,
        )
    return losses, final_path, step


def collect_pseudo_gt(model: MotionVAE, data: TrainingTensors) -> PseudoGTStore:
    """Sweep the training set with the single-frame path and store its predictions."""
    model.eval()
    with torch.no_grad():
        pred = predict_singleframe_batch(model, data, torch.arange(data.count))
    model.train()
    return PseudoGTStore(seq_ids=list(data.seq_ids), params=pred.parameters())


def _phase1_parameters(model: MotionVAE):
    mods = [model.frame_pose_head, model.rigid_head]
    if model.config.spatial_transformer:
        mods += [model.input_proj, model.spatial_encoder]
        params = [model.bone_query]
    else:
        mods.append(model.global_proj)
        params = []
    for m in mods:
        params.extend(m.parameters())
    return params


def _phase2_parameters(model: MotionVAE):
    frozen = {id(p) for p in model.frame_pose_head.parameters()}
    return [p for p in model.parameters() if id(p) not in frozen]


def train_phase1(
    dataset: DatasetManifest,
    cfg: "Config",
    out_dir=None,
    resume_from=None,
) -> PhaseResult:
    """Train the single-frame pose path, then populate the pseudo-GT store.

    With phase1_epochs=0 no optimizer step runs, but the store is still filled
    from the freshly initialized model.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    records = dataset.train_records
    if not records:
        raise ValidationError("dataset has no training sequences")
    _check_seq_len(cfg, records)

    torch.manual_seed(cfg.train.seed)
    model = MotionVAE(cfg.model)
    generator = torch.Generator().manual_seed(cfg.train.seed + 1)
    data = build_training_tensors(dataset, records, cfg.model)

    start_epoch, optimizer_state = 0, None
    if resume_from is not None:
        payload = load_checkpoint(resume_from, cfg)
        if payload["phase"] != 1:
            raise CheckpointError("resume checkpoint is not a phase-1 checkpoint")
        model.load_state_dict(payload["model_state"])
        optimizer_state = payload["optimizer_state"]
        generator.set_state(payload["generator_state"])
        start_epoch = payload["epoch"]

    model.train()
    losses, _, _ = _run_phase(
        phase=1, model=model, params=_phase1_parameters(model), data=data,
        dataset=dataset, cfg=cfg, epochs=cfg.train.phase1_epochs, out_dir=out_dir,
        generator=generator, start_epoch=start_epoch, optimizer_state=optimizer_state,
        save_final=False,  # the final phase-1 checkpoint below carries the pseudo-GT store
    )
    pseudo = collect_pseudo_gt(model, data)

    ckpt = None
    if out_dir is not None:
        ckpt = out_dir / "ckpt" / "phase1" / "final.pt"
        save_checkpoint(
            ckpt, model, cfg, phase=1, epoch=cfg.train.phase1_epochs,
            generator=generator, pseudo_gt=pseudo,
        )
    model.eval()
    return PhaseResult(model=model, epoch_losses=losses, checkpoint_path=ckpt, pseudo_gt=pseudo)


def train_phase2(
    dataset: DatasetManifest,
    phase1: "PhaseResult | str | Path",
    cfg: "Config",
    out_dir=None,
    resume_from=None,
) -> PhaseResult:
    """Train the motion VAE end-to-end from a phase-1 result or checkpoint path."""
    out_dir = Path(out_dir) if out_dir is not None else None
    records = dataset.train_records
    if not records:
        raise ValidationError("dataset has no training sequences")
    _check_seq_len(cfg, records)

    if isinstance(phase1, PhaseResult):
        model = phase1.model
        pseudo = phase1.pseudo_gt
    else:
        payload = load_checkpoint(phase1, cfg)
        model, _ = restore_model(payload)
        pseudo = restore_pseudo_gt(payload)
    if pseudo is None:
        raise ValidationError("phase 1 result carries no pseudo ground-truth store")

    data = build_training_tensors(dataset, records, cfg.model)
    pseudo.require_complete(data.seq_ids)
    generator = torch.Generator().manual_seed(cfg.train.seed + 2)

    start_epoch, optimizer_state = 0, None
    if resume_from is not None:
        payload = load_checkpoint(resume_from, cfg)
        if payload["phase"] != 2:
            raise CheckpointError("resume checkpoint is not a phase-2 checkpoint")
        model.load_state_dict(payload["model_state"])
        optimizer_state = payload["optimizer_state"]
        generator.set_state(payload["generator_state"])
        start_epoch = payload["epoch"]
        pseudo = restore_pseudo_gt(payload)

    model.train()
    losses, final_path, _ = _run_phase(
        phase=2, model=model, params=_phase2_parameters(model), data=data,
        dataset=dataset, cfg=cfg, epochs=cfg.train.phase2_epochs, out_dir=out_dir,
        generator=generator, start_epoch=start_epoch, optimizer_state=optimizer_state,
        pseudo_gt=pseudo,
    )
    model.eval()
    return PhaseResult(model=model, epoch_losses=losses, checkpoint_path=final_path, pseudo_gt=pseudo)


def _check_seq_len(cfg: "Config", records: list[SequenceRecord]) -> None:
    t = records[0].length
    if any(r.length != t for r in records):
        raise ValidationError("all records must share one sequence length")
    if cfg.train.seq_len != t:
        raise ValidationError(
            f"train.seq_len={cfg.train.seq_len} but dataset sequences have T={t}"
        )


# ---------------------------------------------------------------------------
# long-sequence generation


@dataclass
class StitchReport:
    """Transition-optimization diagnostics for generate_long_sequence."""

    converged: list[bool]
    final_objectives: list[float]
    naive_discontinuity: list[float]
    stitched_discontinuity: list[float]
    warned: bool = False


def generate_long_sequence(
    model: MotionVAE,
    n_segments: int,
    generator: torch.Generator,
    *,
    seq_len: int | None = None,
    iters: int = 100,
    lr: float = 1e-2,
    tol: float = 1e-4,
) -> tuple[MotionSequence, StitchReport]:
    """Sample segment latents and bridge adjacent segments with optimized transitions.

    Each transition latent starts from the mean of its neighbors and is
    optimized so the transition's first/last poses match the previous segment's
    last pose and the next segment's first pose. The result interleaves
    segments and transitions; the rigid transform is identity throughout
    (callers supply it externally). If a transition fails to reach `tol`, the
    best iterate is kept and the report flags it.
    """
    if n_segments < 1:
        raise ValidationError("n_segments must be >= 1")
    t = 10 if seq_len is None else seq_len
    model.eval()
    d = model.config.latent_dim
    dtype = next(model.parameters()).dtype
    z = torch.randn(n_segments, d, generator=generator, dtype=dtype)
    with torch.no_grad():
        segments = model.decode(z, t)  # (n, T, K, 3)

    if n_segments == 1:
        motion = _rotations_to_motion(segments[0])
        return motion, StitchReport([], [], [], [])

    chunks = [segments[0]]
    report = StitchReport([], [], [], [])
    for i in range(n_segments - 1):
        first_target = segments[i, -1].detach()
        last_target = segments[i + 1, 0].detach()
        z_t = ((z[i] + z[i + 1]) / 2).clone().requires_grad_(True)
        optimizer = torch.optim.Adam([z_t], lr=lr)
        best_val, best_rot = float("inf"), None
        converged = False
        for _ in range(iters):
            rot = model.decode(z_t.unsqueeze(0), t)[0]
            obj = 0.5 * (((rot[0] - first_target) ** 2).mean() + ((rot[-1] - last_target) ** 2).mean())
            val = float(obj.item())
            if val < best_val:
                best_val, best_rot = val, rot.detach().clone()
            if val <= tol:
                converged = True
                break
            optimizer.zero_grad()
            obj.backward()
            optimizer.step()
        report.converged.append(converged)
        report.final_objectives.append(best_val)
        report.naive_discontinuity.append(
            float((segments[i + 1, 0] - segments[i, -1]).norm().item())
        )
        report.stitched_discontinuity.append(
            max(
                float((best_rot[0] - segments[i, -1]).norm().item()),
                float((segments[i + 1, 0] - best_rot[-1]).norm().item()),
            )
        )
        chunks.append(best_rot)
        chunks.append(segments[i + 1])

    if not all(report.converged):
        report.warned = True
        warnings.warn(
            "transition optimization did not reach tolerance for every segment pair; "
            "keeping best iterates",
            stacklevel=2,
        )
    return _rotations_to_motion(torch.cat(chunks, dim=0)), report


def _rotations_to_motion(bone_rot: Tensor) -> MotionSequence:
    t = bone_rot.shape[0]
    zeros = torch.zeros(t, 3, dtype=bone_rot.dtype)
    return MotionSequence(rigid_rot=zeros, rigid_trans=zeros.clone(), bone_rot=bone_rot)
