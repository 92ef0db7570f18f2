"""Command-line entry point: ``msvsr <command> [flags]``.

Every command writes ``run_manifest.json`` into its output directory with the
resolved configuration, artifact paths, timestamps and exit status. Values
are resolved as defaults < ``--config`` JSON file < command-line flags.

Exit codes: 0 success, 1 unexpected error, 2 configuration error, 3 data
error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import traceback
from datetime import datetime, timezone
from pathlib import Path

from . import errors
from .data import DegradationSpec, list_frames, load_dataset, load_sequence, make_synthetic_dataset, save_sequence, write_dataset
from .data import FrameSequence
from .losses import LossConfig
from .metrics import MetricReport
from .model import MODEL_CONFIGS, VARIANTS, ModelConfig, get_config, model_stats

log = logging.getLogger("msvsr")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3, 4

_CONFIG_ERRORS = (errors.ConfigError, errors.InvalidState, errors.InvalidArgument, errors.VersionError)
_DATA_ERRORS = (
    errors.NotFound,
    errors.ShapeMismatch,
    errors.EmptyDataset,
    errors.InvalidDataset,
    errors.ChecksumMismatch,
)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, errors.NumericalDivergence):
        return EXIT_DIVERGENCE
    if isinstance(exc, _CONFIG_ERRORS):
        return EXIT_CONFIG
    if isinstance(exc, _DATA_ERRORS):
        return EXIT_DATA
    return EXIT_ERROR


# -- argument parsing ------------------------------------------------------------


def _data_default():
    return os.environ.get("MSVSR_DATA_ROOT")


def _add_common(p: argparse.ArgumentParser, out_default=None):
    p.add_argument("--config", help="flat JSON file of flag=value defaults")
    p.add_argument("--out", default=out_default, required=out_default is None, help="output directory")
    p.add_argument("--workers", type=int, default=1, help="I/O worker threads (order stays deterministic)")
    p.add_argument("--log-level", default="INFO")


def _add_model_flags(p: argparse.ArgumentParser, model_default="tiny"):
    p.add_argument("--model", default=model_default, help=f"named config: {', '.join(MODEL_CONFIGS)}")
    p.add_argument("--no-lfm", action="store_true", help="disable the local fusion stage")
    p.add_argument("--no-ram", action="store_true", help="replace re-alignment with plain flow-guided alignment")
    p.add_argument("--no-aux", action="store_true", help="disable the auxiliary stage-2 head and loss")


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--data", default=_data_default(), help="dataset root (default: $MSVSR_DATA_ROOT)")
    p.add_argument("--iters", type=int, default=2000, help="total training iterations")
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--patch", type=int, default=32, help="LR patch size")
    p.add_argument("--frames", type=int, default=5, help="frames per training clip")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--aux-weight", type=float, default=1.0)
    p.add_argument("--freeze-iters", type=int, default=100, help="iterations with the flow network frozen")
    p.add_argument("--lr", type=float, default=2e-4, help="initial main learning rate")
    p.add_argument("--lr-flow", type=float, default=2e-5, help="initial flow-network learning rate")
    p.add_argument("--lr-final", type=float, default=2e-7)


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="msvsr", description="Multi-stage video super-resolution toolkit", formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("make-data", help="write a synthetic translating-texture dataset", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--clips", type=int, default=2)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--hr-size", type=int, default=128)
    p.add_argument("--motion", type=float, default=4.0, help="HR pixels per frame")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=1.6, help="BD blur sigma in HR pixels")
    subs["make-data"] = p

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    _add_common(p)
    _add_model_flags(p, model_default=None)
    _add_train_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=0)
    subs["train"] = p

    p = sub.add_parser("eval", help="PSNR/SSIM report for a checkpoint or two frame directories", formatter_class=fmt)
    _add_common(p, out_default="eval")
    p.add_argument("--ckpt")
    p.add_argument("--data", default=_data_default())
    p.add_argument("--channel-mode", choices=["y", "rgb"], default="y")
    p.add_argument("--crop-border", type=int, default=0)
    p.add_argument("--compare-dirs", nargs=2, metavar=("SR", "GT"), help="compare two directories of frames directly")
    subs["eval"] = p

    p = sub.add_parser("infer", help="super-resolve a directory of LR frames", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="directory of LR frames")
    p.add_argument("--aux-out", help="also write auxiliary-head frames here")
    subs["infer"] = p

    p = sub.add_parser("ablate", help="train and compare the A/B/C/full component variants", formatter_class=fmt)
    _add_common(p, out_default="ablation")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--variants", default="A,B,C,full", help="comma-separated subset of A,B,C,full")
    p.add_argument("--channel-mode", choices=["y", "rgb"], default="rgb")
    subs["ablate"] = p

    p = sub.add_parser("stats", help="parameter counts of a named model", formatter_class=fmt)
    _add_common(p, out_default=".")
    _add_model_flags(p)
    subs["stats"] = p
    return parser, subs


def parse_args(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise errors.ConfigError(f"config file not found: {path}")
        try:
            values = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise errors.ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(values, dict):
            raise errors.ConfigError("config file must hold a flat JSON object")
        known = {a.dest for a in subs[args.command]._actions}
        values = {k.replace("-", "_"): v for k, v in values.items()}
        unknown = sorted(set(values) - known)
        if unknown:
            raise errors.ConfigError(f"unknown config keys for {args.command}: {unknown}")
        subs[args.command].set_defaults(**values)
        args = parser.parse_args(argv)
    return args


# -- helpers -------------------------------------------------------------------


def model_config_from_args(args) -> ModelConfig:
    return get_config(
        args.model or "tiny",
        use_lfm=not args.no_lfm,
        use_ram=not args.no_ram,
        use_aux_loss=not args.no_aux,
    )


def train_config_from_args(args):
    from .trainer import TrainConfig

    return TrainConfig(
        total_iters=args.iters,
        lr_main_init=args.lr,
        lr_flow_init=args.lr_flow,
        lr_final=args.lr_final,
        flow_freeze_iters=min(args.freeze_iters, args.iters),
        batch_size=args.batch,
        patch_size=args.patch,
        n_frames=args.frames,
        seed=args.seed,
        loss=LossConfig(aux_weight=args.aux_weight),
    )


def _require_data(args):
    if not args.data:
        raise errors.ConfigError("--data is required (or set MSVSR_DATA_ROOT)")
    return load_dataset(args.data, workers=args.workers)


def _jsonable(v):
    if dataclasses.is_dataclass(v):
        return dataclasses.asdict(v)
    if isinstance(v, Path):
        return str(v)
    return v


# -- commands ------------------------------------------------------------------


def cmd_make_data(args, manifest):
    pairs = make_synthetic_dataset(
        args.clips, args.frames, args.hr_size, args.motion, args.seed, DegradationSpec(blur_sigma=args.sigma)
    )
    info = {"seed": args.seed, "motion": args.motion, "hr_size": args.hr_size, "blur_sigma": args.sigma}
    root = write_dataset(pairs, args.out, info, workers=args.workers)
    manifest["artifacts"] = {"dataset": str(root), "manifest": str(root / "manifest.json")}
    print(f"wrote {len(pairs)} clips to {root}")


def cmd_train(args, manifest):
    from .checkpoint import load_checkpoint
    from .trainer import train, write_history

    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        ckpt_cfg = ModelConfig.from_dict(resume.model_config)
        if args.model is not None and model_config_from_args(args) != ckpt_cfg:
            raise errors.ConfigError(f"--model {args.model} and flags do not match the checkpoint being resumed")
        model_cfg = ckpt_cfg
    else:
        model_cfg = model_config_from_args(args)
    cfg = train_config_from_args(args)
    manifest["config"]["model_config"] = model_cfg.to_dict()
    manifest["config"]["train_config"] = cfg.to_dict()
    dataset = _require_data(args)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.ckpt"
    hist_path = out / "loss_history.csv"
    history = []
    try:
        result = train(
            model_cfg,
            cfg,
            dataset,
            resume=resume,
            checkpoint_path=ckpt_path,
            checkpoint_every=args.checkpoint_every,
            callback=history.append,
        )
    finally:
        if resume is not None and hist_path.exists():
            from .trainer import HISTORY_COLUMNS

            with open(hist_path, "a") as fh:
                for row in history:
                    fh.write(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k]) for k in HISTORY_COLUMNS) + "\n")
        else:
            write_history(history, hist_path)
    manifest["artifacts"] = {"checkpoint": str(ckpt_path), "loss_history": str(hist_path)}
    last = history[-1]["loss_total"] if history else float("nan")
    print(f"trained to iteration {result.checkpoint.iteration}; final loss {last:.6f}; checkpoint {ckpt_path}")


def _compare_dirs(sr_dir: Path, gt_dir: Path, report: MetricReport, workers: int):
    sr_dir, gt_dir = Path(sr_dir), Path(gt_dir)
    if not sr_dir.is_dir() or not gt_dir.is_dir():
        raise errors.NotFound(f"missing directory: {sr_dir if not sr_dir.is_dir() else gt_dir}")
    clip_dirs = sorted(d.name for d in gt_dir.iterdir() if d.is_dir())
    pairs = [(sr_dir / c, gt_dir / c, c) for c in clip_dirs] if clip_dirs else [(sr_dir, gt_dir, gt_dir.name)]
    for s, g, clip_id in pairs:
        sr = load_sequence(s, workers=workers)
        gt = load_sequence(g, workers=workers)
        if len(sr) != len(gt):
            raise errors.ShapeMismatch(f"{s} and {g} hold different frame counts")
        report.add_clip("compare", clip_id, sr.frames, gt.frames)


def cmd_eval(args, manifest):
    from .checkpoint import load_checkpoint
    from .trainer import evaluate, model_from_checkpoint

    report = MetricReport(channel_mode=args.channel_mode, crop_border=args.crop_border)
    if args.compare_dirs:
        _compare_dirs(*args.compare_dirs, report, args.workers)
    else:
        if not args.ckpt:
            raise errors.ConfigError("eval needs --ckpt (or --compare-dirs)")
        ckpt = load_checkpoint(args.ckpt)
        dataset = _require_data(args)
        report = evaluate(model_from_checkpoint(ckpt), dataset, args.channel_mode, args.crop_border)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.tsv").write_text(report.to_tsv())
    (out / "report.json").write_text(report.to_json())
    manifest["artifacts"] = {"report_tsv": str(out / "report.tsv"), "report_json": str(out / "report.json")}
    print(report.to_tsv(), end="")


def cmd_infer(args, manifest):
    from .checkpoint import load_checkpoint
    from .trainer import model_from_checkpoint, super_resolve

    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    if args.aux_out and not model.cfg.use_aux_loss:
        raise errors.InvalidState("--aux-out requires a checkpoint trained with the auxiliary head")
    paths = list_frames(args.input)
    seq = load_sequence(args.input, workers=args.workers)
    names = [p.with_suffix(".png").name for p in paths]
    sr, aux = super_resolve(model, seq.frames)
    written = save_sequence(FrameSequence(sr, clip_id=seq.clip_id), args.out, names, workers=args.workers)
    manifest["artifacts"] = {"sr_frames": [str(p) for p in written]}
    if args.aux_out:
        aux_written = save_sequence(FrameSequence(aux, clip_id=seq.clip_id), args.aux_out, names, workers=args.workers)
        manifest["artifacts"]["aux_frames"] = [str(p) for p in aux_written]
    print(f"wrote {len(written)} frames to {args.out}")


def cmd_ablate(args, manifest):
    from .trainer import ablate, ablation_markdown, ablation_tsv

    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in VARIANTS]
    if bad or not variants:
        raise errors.ConfigError(f"unknown variants {bad}; choose from {list(VARIANTS)}")
    base = get_config(args.model)
    cfg = train_config_from_args(args)
    manifest["config"]["train_config"] = cfg.to_dict()
    dataset = _require_data(args)
    rows = ablate(base, cfg, dataset, variants, args.channel_mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.md").write_text(ablation_markdown(rows))
    (out / "ablation.tsv").write_text(ablation_tsv(rows))
    manifest["artifacts"] = {"markdown": str(out / "ablation.md"), "tsv": str(out / "ablation.tsv")}
    print(ablation_markdown(rows), end="")


def cmd_stats(args, manifest):
    cfg = model_config_from_args(args)
    stats = model_stats(cfg)
    manifest["artifacts"] = {"stats": stats}
    print(f"model {args.model}: {stats['param_count']:,} parameters")
    for name, n in stats["per_module"].items():
        print(f"  {name:<14} {n:>12,}")


COMMANDS = {
    "make-data": cmd_make_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "ablate": cmd_ablate,
    "stats": cmd_stats,
}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except errors.MSVSRError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), format="%(levelname)s %(name)s: %(message)s")

    manifest = {
        "command": args.command,
        "argv": argv,
        "config": {k: _jsonable(v) for k, v in vars(args).items()},
        "seed": getattr(args, "seed", None),
        "artifacts": {},
        "started": _now(),
    }
    code = EXIT_OK
    try:
        COMMANDS[args.command](args, manifest)
        manifest["status"] = "ok"
    except Exception as exc:  # every failure is recorded in the manifest
        code = exit_code_for(exc)
        manifest["status"] = "error"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if code == EXIT_ERROR:
            traceback.print_exc()
    manifest["finished"] = _now()
    manifest["exit_code"] = code
    try:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, default=str))
    except OSError as exc:
        print(f"error: could not write run manifest: {exc}", file=sys.stderr)
        code = code or EXIT_ERROR
    return code


if __name__ == "__main__":
    sys.exit(main())
