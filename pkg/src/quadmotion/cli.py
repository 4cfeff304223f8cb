"""Command-line entry point.

Subcommands: gendata, train, sample, animate, eval. Every command takes an
optional JSON config file plus repeatable dotted-key overrides, echoes the
effective config into its output directory, and derives all randomness from
the configured seeds.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime failure.
The QUADMOTION_OUT environment variable, when set, prefixes relative output
directories.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from .config import (
    Config,
    apply_overrides,
    config_to_dict,
    default_config,
    load_config,
    save_config,
    validate_config,
)
from .errors import CheckpointError, DatasetError, ValidationError
from .evaluation import EvalOptions, evaluate_model
from .skeleton import MotionSequence, linear_blend_skinning, save_obj
from .synthdata import generate_dataset, read_dataset, write_dataset
from .trainer import (
    generate_long_sequence,
    load_checkpoint,
    restore_model,
    train_phase1,
    train_phase2,
)

USAGE_ERROR, VALIDATION_ERROR, RUNTIME_ERROR = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; usage errors are 1 here
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _resolve_out(path: str) -> Path:
    root = os.environ.get("QUADMOTION_OUT")
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _load_effective_config(args) -> Config:
    cfg = load_config(args.config) if args.config else default_config()
    if getattr(args, "set", None):
        cfg = apply_overrides(cfg, args.set)
    if getattr(args, "seed", None) is not None:
        cfg.data.seed = args.seed
        cfg.train.seed = args.seed
    return validate_config(cfg)


def _echo_config(cfg: Config, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.json")


# ---------------------------------------------------------------------------
# commands


def cmd_gendata(args) -> int:
    cfg = _load_effective_config(args)
    out = _resolve_out(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise ValidationError(f"output directory {out} is not empty (use --force)")
        shutil.rmtree(out)
    manifest = generate_dataset(cfg.data)
    write_dataset(manifest, out)
    _echo_config(cfg, out)

    counts: dict[str, list[int]] = {}
    for r in manifest.records:
        counts.setdefault(r.gait, [0, 0])
        counts[r.gait][0] += 1
        counts[r.gait][1] += r.length
    print(f"wrote {len(manifest.records)} sequences to {out} (seed {cfg.data.seed})")
    print(f"{'Gait':<10}{'Sequences':>12}{'Frames':>10}")
    for gait in sorted(counts):
        seqs, frames = counts[gait]
        print(f"{gait:<10}{seqs:>12}{frames:>10}")
    total_frames = sum(c[1] for c in counts.values())
    print(f"{'Total':<10}{len(manifest.records):>12}{total_frames:>10}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_effective_config(args)
    dataset = read_dataset(_resolve_out(args.data))
    out = _resolve_out(args.out)
    _echo_config(cfg, out)

    if args.phase in ("1", "all"):
        result1 = train_phase1(dataset, cfg, out_dir=out, resume_from=args.resume)
        print(f"phase 1 done: {len(result1.epoch_losses)} epochs, checkpoint {result1.checkpoint_path}")
    if args.phase in ("2", "all"):
        if args.phase == "all":
            source = result1
        else:
            source = Path(args.phase1_checkpoint) if args.phase1_checkpoint else (
                out / "ckpt" / "phase1" / "final.pt"
            )
            if not source.exists():
                raise ValidationError(f"phase-1 checkpoint {source} not found")
        result2 = train_phase2(
            dataset, source, cfg, out_dir=out,
            resume_from=args.resume if args.phase == "2" else None,
        )
        print(f"phase 2 done: {len(result2.epoch_losses)} epochs, checkpoint {result2.checkpoint_path}")
    return 0


def cmd_sample(args) -> int:
    payload = load_checkpoint(_resolve_out(args.checkpoint))
    model, cfg = restore_model(payload)
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    generator = torch.Generator().manual_seed(args.seed)
    seq_len = cfg.data.seq_len

    motions = []
    if args.segments > 1:
        for _ in range(args.count):
            motion, _report = generate_long_sequence(
                model, args.segments, generator, seq_len=seq_len,
                iters=cfg.train.transition_iters, lr=cfg.train.transition_lr,
                tol=cfg.train.transition_tol,
            )
            motions.append(motion.bone_rot.numpy())
        rotations = np.stack(motions)
    else:
        rotations = model.sample_prior(seq_len, count=args.count, generator=generator).numpy()

    path = out / "samples.npz"
    np.savez(
        path,
        bone_rot=rotations.astype("<f4"),
        seed=np.int64(args.seed),
        segments=np.int64(args.segments),
    )
    print(f"wrote {rotations.shape[0]} motion samples of length {rotations.shape[1]} to {path}")
    return 0


def cmd_animate(args) -> int:
    dataset = read_dataset(_resolve_out(args.data))
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.motion:
        with np.load(_resolve_out(args.motion)) as data:
            bone_rot = data["bone_rot"][args.index]
        t = bone_rot.shape[0]
        motion = MotionSequence(
            rigid_rot=torch.zeros(t, 3), rigid_trans=torch.zeros(t, 3),
            bone_rot=torch.from_numpy(bone_rot.astype(np.float32)),
        )
    elif args.sequence:
        motion = dataset.record(args.sequence).motion()
    else:
        raise ValidationError("animate needs either --motion or --sequence")

    verts = linear_blend_skinning(dataset.mesh, dataset.skeleton, motion)
    for t in range(motion.length):
        save_obj(out / f"frame_{t:04d}.obj", verts[t], dataset.mesh.faces)
    print(f"wrote {motion.length} OBJ frames to {out}")
    return 0


def cmd_eval(args) -> int:
    payload = load_checkpoint(_resolve_out(args.checkpoint))
    model, _cfg = restore_model(payload)
    dataset = read_dataset(_resolve_out(args.data))
    options = EvalOptions(sample_count=args.samples, sample_seed=args.seed or 0)
    report, details = evaluate_model(model, dataset, options)

    out = _resolve_out(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(report.as_dict(), indent=1, sort_keys=True))
        with open(out / "per_sequence.jsonl", "w") as fh:
            for d in details:
                fh.write(json.dumps(d) + "\n")

    print(f"{'metric':<20}{'value':>12}")
    for key, value in report.as_dict().items():
        if isinstance(value, float):
            print(f"{key:<20}{value:>12.5f}")
        else:
            print(f"{key:<20}{value:>12}")
    return 0


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="quadmotion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=None):
        p.add_argument("--config", help="JSON config file; defaults apply when omitted")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted-key config override, repeatable")
        p.add_argument("--seed", type=int, default=seed_default, help="overrides data/train seeds")

    p = sub.add_parser("gendata", help="generate the synthetic gait corpus")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output dir")
    p.set_defaults(func=cmd_gendata)

    p = sub.add_parser("train", help="run the two-phase training schedule")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory from gendata")
    p.add_argument("--out", required=True)
    p.add_argument("--phase", choices=("1", "2", "all"), default="all")
    p.add_argument("--phase1-checkpoint", help="phase-1 checkpoint for --phase 2")
    p.add_argument("--resume", help="resume the selected phase from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample motions from a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1400)
    p.add_argument("--segments", type=int, default=1,
                   help=">1 stitches segments with optimized transition latents")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("animate", help="export a motion as one OBJ mesh per frame")
    p.add_argument("--data", required=True, help="dataset directory (skeleton + mesh)")
    p.add_argument("--motion", help="samples.npz from the sample command")
    p.add_argument("--index", type=int, default=0, help="sample index within --motion")
    p.add_argument("--sequence", help="dataset sequence id to animate instead")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's eval split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="where to write metrics.json and per_sequence.jsonl")
    p.add_argument("--samples", type=int, default=200, help="prior samples for the Chamfer metric")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return VALIDATION_ERROR
    except (DatasetError, CheckpointError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
