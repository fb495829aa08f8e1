"""Command-line entry point.

Commands: generate, train, eval, sweep-threshold, infer, gradcheck.
Exit codes: 0 success, 1 a check or accuracy gate failed, 2 usage error.

Setting VEPE_DETERMINISTIC=1 appends a sha256 content line for every
artifact a command writes, so two runs can be diffed from their logs alone.
All computation is seeded and single-threaded; the variable adds the
evidence, not the determinism.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_module, save_module
from .config import RunConfig, check_documented_defaults
from .gradcheck import run_suite
from .metrics import format_report
from .model import VepeModel
from .synth import (ClipFormatError, draw_skeleton, generate_clip, load_clip,
                    save_clip, split_config)
from .tensor import ConfigError, no_grad
from .train import (MODES, evaluate, threshold_sweep, tracking_agreement,
                    train)

MANIFEST_HEADER = "VEPE-MANIFEST-1"
MANIFEST_NAME = "MANIFEST"

# Overlay palette chosen to be impossible in generated frames: no generated
# pixel has green below the background level, so the magenta joint markers
# survive a render-back check even on top of ground-truth markers.
OVERLAY_LIMB = (230.0, 120.0, 0.0)
OVERLAY_MARKER = (255.0, 0.0, 255.0)


class UsageError(Exception):
    pass


def _deterministic() -> bool:
    return os.environ.get("VEPE_DETERMINISTIC", "") not in ("", "0")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Emitter:
    """Writes lines to stdout and, optionally, a log file."""

    def __init__(self, log_path: Path | None):
        self.log_path = log_path
        self.lines: list[str] = []

    def __call__(self, line: str) -> None:
        self.lines.append(line)
        print(line)

    def artifact(self, path: Path) -> None:
        if _deterministic():
            self(f"artifact {path.name} sha256 {_sha256(path)}")

    def flush(self) -> None:
        if self.log_path is not None:
            self.log_path.write_text("".join(l + "\n" for l in self.lines))


# -- config plumbing --------------------------------------------------------

_TUPLE_FIELDS = {"persons", "speed", "blur"}
_BOOL_FIELDS = {"use_mask", "use_stdme", "use_stpd"}


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON config file; flags override its fields")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name in _BOOL_FIELDS:
            parser.add_argument(flag, dest=f.name, default=None,
                                action=argparse.BooleanOptionalAction)
        elif f.name in _TUPLE_FIELDS:
            parser.add_argument(flag, dest=f.name, default=None, type=str,
                                help="comma-separated pair, e.g. 2,6")
        else:
            parser.add_argument(flag, dest=f.name, default=None, type=type(f.default))


def build_config(args: argparse.Namespace) -> RunConfig:
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        cfg = RunConfig.from_json(args.config.read_text())
    else:
        cfg = RunConfig()
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is None:
            continue
        if f.name in _TUPLE_FIELDS:
            parts = [p for p in str(value).split(",") if p]
            if len(parts) != 2:
                raise UsageError(f"--{f.name} expects two comma-separated "
                                 f"values, got {value!r}")
            value = tuple(type(f.default[0])(p) for p in parts)
        setattr(cfg, f.name, value)
    try:
        cfg.validate()
    except ConfigError as e:
        raise UsageError(str(e))
    return cfg


# -- data directories -------------------------------------------------------

def write_manifest(data_dir: Path, split: str, count: int, cfg: RunConfig,
                   names: list) -> Path:
    lines = [MANIFEST_HEADER,
             f"split {split} count {count} seed {cfg.seed} "
             f"image_size {cfg.image_size} frames {cfg.frames}"]
    for name in names:
        lines.append(f"clip {name} sha256 {_sha256(data_dir / name)}")
    path = data_dir / MANIFEST_NAME
    path.write_text("".join(l + "\n" for l in lines))
    return path


def read_manifest(data_dir: Path) -> list:
    path = data_dir / MANIFEST_NAME
    if not path.is_file():
        raise UsageError(f"no {MANIFEST_NAME} in {data_dir}; "
                         "run `vepe generate` first")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise UsageError(f"{path} is not a {MANIFEST_HEADER} manifest")
    names = [l.split()[1] for l in lines if l.startswith("clip ")]
    missing = [n for n in names if not (data_dir / n).is_file()]
    if missing:
        raise UsageError(f"manifest lists missing clip files: {missing[:3]}")
    return names


def load_clips(data_dir: Path) -> list:
    return [load_clip(data_dir / name) for name in read_manifest(data_dir)]


# -- commands ----------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = build_config(args)
    synth = split_config(cfg.synth_config(), args.split)
    args.out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.default_rng(cfg.seed).integers(1 << 31, size=args.count)
    emit = Emitter(None)
    names = []
    for s in seeds:
        clip = generate_clip(synth, seed=int(s))
        name = f"{clip.clip_id}.clip"
        save_clip(clip, args.out / name)
        names.append(name)
    manifest = write_manifest(args.out, args.split, args.count, cfg, names)
    emit(f"generated {len(names)} clips split {args.split} in {args.out}")
    emit(f"manifest sha256 {_sha256(manifest)}")
    return 0


def _load_model(cfg: RunConfig, ckpt: Path | None, what: str) -> VepeModel:
    model = VepeModel(cfg)
    if ckpt is not None:
        if not ckpt.is_file():
            raise UsageError(f"{what} checkpoint not found: {ckpt}")
        try:
            load_module(ckpt, model)
        except CheckpointError as e:
            raise UsageError(f"cannot load {what} checkpoint {ckpt}: {e}")
    return model


def cmd_train(args) -> int:
    cfg = build_config(args)
    clips = load_clips(args.data)
    eval_clips = load_clips(args.eval_data) if args.eval_data \
        else clips[:min(8, len(clips))]
    if args.mode in ("temporal",) and args.init is None:
        raise UsageError("temporal mode trains on top of frozen spatial "
                         "weights; pass --init with a spatial checkpoint")
    model = _load_model(cfg, args.init, "initial")
    args.out.mkdir(parents=True, exist_ok=True)
    emit = Emitter(args.out / "train.log")
    emit(f"train mode {args.mode} clips {len(clips)} epochs {cfg.epochs} "
         f"seed {cfg.seed}")
    train(model, clips, cfg, args.mode, eval_clips=eval_clips, log_fn=emit)
    ckpt = args.out / "model.ckpt"
    save_module(ckpt, model)
    (args.out / "config.json").write_text(cfg.to_json())
    emit(f"saved {ckpt.name}")
    emit.artifact(ckpt)
    emit.artifact(args.out / "config.json")
    emit.flush()
    emit.artifact(args.out / "train.log")
    return 0


def cmd_eval(args) -> int:
    cfg = build_config(args)
    clips = load_clips(args.data)
    model = _load_model(cfg, args.ckpt, "model")
    report, _ = evaluate(model, clips, cfg, args.mode, cfg.tau)
    text = format_report(report)
    print(text)
    if args.report is not None:
        args.report.parent.mkdir(parents=True, exist_ok=True)
        args.report.write_text(text + "\n")
        emit = Emitter(None)
        emit.artifact(args.report)
    if args.tracking:
        rate = tracking_agreement(model, clips, cfg)
        print(f"tracking agreement {rate:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = build_config(args)
    clips = load_clips(args.data)
    model = _load_model(cfg, args.ckpt, "model")
    thresholds = [float(t) for t in args.thresholds.split(",") if t]
    if not thresholds:
        raise UsageError("no thresholds given")
    if any(not 0.0 <= t <= 1.0 for t in thresholds):
        raise UsageError(f"thresholds must lie in [0, 1]: {thresholds}")
    rows = threshold_sweep(model, clips, cfg, thresholds)
    print("threshold mAP retained")
    for r in rows:
        print(f"{r.threshold:.2f} {100.0 * r.mean_ap:.1f} "
              f"{r.mean_retained:.1f}")
    return 0


def cmd_infer(args) -> int:
    from PIL import Image

    cfg = build_config(args)
    if not args.clip.is_file():
        raise UsageError(f"clip not found: {args.clip}")
    try:
        clip = load_clip(args.clip)
    except ClipFormatError as e:
        raise UsageError(f"cannot read {args.clip}: {e}")
    model = _load_model(cfg, args.ckpt, "model")
    args.out.mkdir(parents=True, exist_ok=True)
    emit = Emitter(None)

    pose_lines = ["VEPE-POSES-1", f"clip {clip.clip_id}"]
    with no_grad():
        cache: dict = {}
        for t in range(len(clip.frames)):
            res = model.forward_clip(clip.frames, t, freeze_spatial=True,
                                     cache=cache)
            tp = res.temporal
            kps = tp.keypoints.data
            scores = tp.scores.data
            links = []
            for i, r in enumerate(res.ref_indices):
                sims = tp.similarities[i]
                if r == t or sims.shape[1] == 0:
                    links.append(np.full(len(scores), -1, dtype=int))
                else:
                    links.append(sims.argmax(axis=1))
            canvas = clip.frames[t].astype(np.float64)
            pose_lines.append(f"frame {t} {len(scores)}")
            for row in range(len(scores)):
                # every retained pose is recorded, but only confident ones
                # are drawn, so empty scenes render as clean frames
                if scores[row] >= model.temporal.threshold:
                    draw_skeleton(canvas, kps[row], OVERLAY_LIMB,
                                  marker_color=OVERLAY_MARKER)
                flat = " ".join(f"{float(v)!r}" for v in kps[row].ravel())
                linked = " ".join(str(int(l[row])) for l in links) or "-"
                pose_lines.append(
                    f"pose {row} score {float(scores[row])!r} "
                    f"links {linked} kp {flat}")
            png = args.out / f"frame-{t:03d}.png"
            Image.fromarray(np.clip(canvas, 0.0, 255.0)
                            .round().astype(np.uint8)).save(png)
            emit.artifact(png)
    poses = args.out / "poses.txt"
    poses.write_text("".join(l + "\n" for l in pose_lines))
    emit.artifact(poses)
    print(f"wrote {len(clip.frames)} overlays and {poses}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed)
    failed = 0
    for r in results:
        status = "ok  " if r.passed else "FAIL"
        print(f"{status} {r.name} max_err={r.max_err:.3e} tol={r.tol:.1e} "
              f"n={r.n_checked} {r.seconds:.2f}s")
        failed += 0 if r.passed else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="vepe",
        description="Video pose estimation on synthetic multi-person clips")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a clip dataset + manifest")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--split", choices=("clean", "occlusion", "blur", "fast"),
                   default="clean")
    add_config_flags(g)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--eval-data", type=Path, default=None)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--mode", choices=MODES, default="spatial")
    t.add_argument("--init", type=Path, default=None,
                   help="checkpoint to start from")
    add_config_flags(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--mode", choices=("spatial", "temporal"),
                   default="temporal")
    e.add_argument("--report", type=Path, default=None)
    e.add_argument("--tracking", action="store_true",
                   help="also print cross-frame identity agreement")
    add_config_flags(e)
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep-threshold",
                       help="mAP at several selection thresholds")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--thresholds", type=str, default="0.1,0.2,0.3,0.4,0.5")
    add_config_flags(s)
    s.set_defaults(fn=cmd_sweep)

    i = sub.add_parser("infer", help="overlay predictions on one clip")
    i.add_argument("--clip", type=Path, required=True)
    i.add_argument("--ckpt", type=Path, required=True)
    i.add_argument("--out", type=Path, required=True)
    add_config_flags(i)
    i.set_defaults(fn=cmd_infer)

    c = sub.add_parser("gradcheck",
                       help="numeric gradient check of every operation")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        check_documented_defaults()
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ClipFormatError, CheckpointError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except RuntimeError as e:
        print(f"check failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
