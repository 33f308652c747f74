"""``evgen`` command line.

Every subcommand exits 0 on success. Failures print one line of the form
``evgen: error: <kind>: <message>`` on stderr and exit 1; usage errors
(unknown subcommand, missing arguments) exit 2.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._validation import EventFormatError, UsageError, ValidationError

log = logging.getLogger("evgen")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _config(args):
    from .config import RunConfig, load_config

    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _read_stream(path, width=None, height=None):
    from .events import format_for_path, read_events

    fmt = format_for_path(path)
    if fmt == "csv":
        if width is None or height is None:
            raise ValidationError("CSV input needs --width and --height")
        return read_events(path, "csv", width=width, height=height)
    return read_events(path, "binary")


# -- subcommands ----------------------------------------------------------------


def cmd_synth_data(args) -> int:
    from .experiment import synth_dataset, write_dataset

    ds = synth_dataset(
        args.classes.split(","), args.per_class, args.seed, args.width, args.height, args.duration_us, args.events_per_us,
        args.noise_rate, args.phase,
    )
    paths = write_dataset(ds, args.out, args.format)
    print(f"wrote {len(paths)} streams to {args.out}")
    return EXIT_OK


def cmd_filter(args) -> int:
    from .events import format_for_path, write_events
    from .preprocess import FilterConfig, active_patch_filter

    stream = _read_stream(args.input, args.width, args.height)
    out = active_patch_filter(stream, FilterConfig(args.window_us, args.patch_px, args.threshold))
    write_events(out, args.output, format_for_path(args.output))
    print(f"kept {len(out)} of {len(stream)} events")
    return EXIT_OK


def cmd_voxelize(args) -> int:
    from .voxel import stream_to_grids, write_grids

    stream = _read_stream(args.input, args.width, args.height)
    grids = stream_to_grids(stream, args.count, args.n_bins, args.size, args.cap)
    write_grids(args.output, list(grids))
    print(f"wrote {len(grids)} grids of shape {tuple(grids.shape[1:]) if len(grids) else ()}")
    return EXIT_OK


def _dataset(path, cfg, args):
    from .experiment import load_dataset

    return load_dataset(path, cfg.class_names, getattr(args, "width", None), getattr(args, "height", None))


def cmd_train_ae(args) -> int:
    from .autoencoder import save_model
    from .experiment import fit_autoencoder

    cfg = _config(args)
    train = _dataset(args.data or cfg.data.train, cfg, args)
    val_dir = args.val or cfg.data.val
    val = _dataset(val_dir, cfg, args) if val_dir else None
    est = fit_autoencoder(cfg, train.streams, val.streams if val else None)
    save_model(est.model_, args.out)
    for r in est.reports_:
        print(f"stage {r.stage}: final train loss {r.train_loss[-1]:.6g}" + (f", val F1 {r.final_f1:.4f}" if r.val_f1 else ""))
    return EXIT_OK


def cmd_train_dm(args) -> int:
    from .autoencoder import StagedSparseAutoencoder, load_model
    from .experiment import encode_streams, fit_diffusion

    cfg = _config(args)
    train = _dataset(args.data or cfg.data.train, cfg, args)
    model, _ = load_model(args.ckpt_ae)
    ae = StagedSparseAutoencoder.from_model(model, cap=cfg.voxel.cap)
    latents = encode_streams(ae, train.streams, cfg)
    dm = fit_diffusion(cfg, latents, train.labels, train.class_names)
    dm.save(args.out)
    print(f"trained on {len(latents)} latent sequences; final loss {np.mean(dm.loss_curve_[-50:]):.6g}")
    return EXIT_OK


def cmd_train_cls(args) -> int:
    from .experiment import fit_classifier

    cfg = _config(args)
    train = _dataset(args.data or cfg.data.train, cfg, args)
    val_dir = args.val or cfg.data.val
    val = _dataset(val_dir, cfg, args) if val_dir else None
    cls = fit_classifier(cfg, train, val)
    cls.save(args.out)
    rep = cls.report_
    for e, acc in zip(rep.epochs, rep.train_accuracy):
        line = f"epoch {e}: train accuracy {acc:.4f}"
        if rep.val_accuracy:
            line += f", val accuracy {rep.val_accuracy[e - 1]:.4f}"
        print(line)
    return EXIT_OK


def _pipeline(args, cfg):
    from .autoencoder import load_model
    from .diffusion import ConditionalLatentDiffusion
    from .pipeline import GenerationPipeline

    model, _ = load_model(args.ckpt_ae)
    dm = ConditionalLatentDiffusion.load(args.ckpt_dm)
    guidance = args.guidance if args.guidance is not None else cfg.diffusion.guidance
    steps = args.steps if args.steps is not None else cfg.diffusion.steps
    slice_us = args.slice_us if args.slice_us is not None else cfg.generation.slice_us
    return GenerationPipeline(model, dm, slice_us, guidance, steps)


def cmd_generate(args) -> int:
    from .events import format_for_path, write_events

    cfg = _config(args)
    pipe = _pipeline(args, cfg)
    names = pipe.diffusion.class_names_
    label = names.index(args.prompt) if args.prompt in names else None
    out = Path(args.out)
    for i in range(args.n):
        stream = pipe.generate(args.prompt, args.seed + i, args.boost, label)
        path = out if args.n == 1 else out.with_name(f"{out.stem}_{i:03d}{out.suffix}")
        write_events(stream, path, format_for_path(path))
        print(f"{path}: {len(stream)} events")
    return EXIT_OK


def _prompts(args, cfg, class_names):
    if args.prompts:
        doc = json.loads(Path(args.prompts).read_text())
        if not isinstance(doc, dict) or "prompts" not in doc:
            raise ValidationError(f"{args.prompts}: expected an object with a 'prompts' mapping")
        unknown = sorted(set(doc) - {"prompts", "groups"})
        if unknown:
            raise ValidationError(f"{args.prompts}: unknown key(s) {unknown}")
        prompts = {str(k): _class_id(v, class_names) for k, v in doc["prompts"].items()}
        return prompts, doc.get("groups") or cfg.evaluation.groups or None
    if cfg.evaluation.prompts:
        return {k: _class_id(v, class_names) for k, v in cfg.evaluation.prompts.items()}, cfg.evaluation.groups or None
    return {n: i for i, n in enumerate(class_names)}, cfg.evaluation.groups or None


def _class_id(value, class_names) -> int:
    if isinstance(value, str):
        if value not in class_names:
            raise LookupError(f"unknown class {value!r}; available: {class_names}")
        return class_names.index(value)
    return int(value)


def cmd_evaluate(args) -> int:
    from .classifier import GestureClassifier
    from .pipeline import evaluate_generated

    cfg = _config(args)
    boosts = args.boost if args.boost is not None else list(cfg.generation.boost)
    if not (args.ckpt_ae and args.ckpt_dm and args.ckpt_cls):
        if not args.config:
            raise UsageError("give --ckpt-ae, --ckpt-dm and --ckpt-cls, or --config to run the whole pipeline")
        return _evaluate_end_to_end(args, cfg, boosts)
    pipe = _pipeline(args, cfg)
    cls = GestureClassifier.load(args.ckpt_cls)
    prompts, groups = _prompts(args, cfg, pipe.diffusion.class_names_)
    n = args.samples_per_prompt or cfg.generation.samples_per_prompt
    reports = evaluate_generated(pipe, cls, prompts, n, boosts, cfg.seed, groups)
    doc = {"reports": [r.to_dict() for r in reports]}
    _emit(doc, args.report)
    return EXIT_OK


def _evaluate_end_to_end(args, cfg, boosts) -> int:
    from .experiment import load_dataset, run_end_to_end

    if cfg.data.train is None:
        raise ValidationError("config needs data.train for an end-to-end run")
    cfg.generation.boost = list(boosts)
    if args.samples_per_prompt:
        cfg.generation.samples_per_prompt = args.samples_per_prompt
    train = load_dataset(cfg.data.train, cfg.class_names)
    val = load_dataset(cfg.data.val, cfg.class_names) if cfg.data.val else None
    if args.prompts:
        prompts, groups = _prompts(args, cfg, train.class_names)
        cfg.evaluation.prompts, cfg.evaluation.groups = prompts, groups or {}
    workdir = args.workdir or (Path(args.report).parent if args.report else Path("."))
    summary = run_end_to_end(cfg, train, val, workdir)
    _emit(summary, args.report)
    return EXIT_OK


def _emit(doc, path):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text)
    sys.stdout.write(text)


def cmd_render(args) -> int:
    from .render import accumulate_grids, accumulate_on, spacetime_image, write_pgm, write_ppm
    from .voxel import read_grids

    is_grid = Path(args.input).read_bytes()[:4] == b"EVG1"
    if args.mode == "accumulate":
        if is_grid:
            img = accumulate_grids(read_grids(args.input), args.grids)
        else:
            img = accumulate_on(_read_stream(args.input, args.width, args.height), args.count, args.grids)
        write_pgm(args.output, img)
    else:
        if is_grid:
            raise ValidationError("spacetime mode needs an event file, not a grid file")
        write_ppm(args.output, spacetime_image(_read_stream(args.input, args.width, args.height), args.steps))
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .nn import check_layer_kinds

    reports = check_layer_kinds(args.seed, args.tolerance)
    ok = True
    for kind, rep in reports.items():
        ok &= rep.passed
        print(f"{kind:10s} max_rel_err={rep.max_error:.3e} {'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


# -- parser ---------------------------------------------------------------------


def _geometry(p):
    p.add_argument("--width", type=int, help="sensor width (CSV input only)")
    p.add_argument("--height", type=int, help="sensor height (CSV input only)")


def _train_common(p, with_val=True):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--data", help="directory of labeled event files (overrides data.train)")
    if with_val:
        p.add_argument("--val", help="validation directory (overrides data.val)")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    _geometry(p)


def _gen_common(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--ckpt-ae", dest="ckpt_ae", help="autoencoder checkpoint")
    p.add_argument("--ckpt-dm", dest="ckpt_dm", help="diffusion checkpoint")
    p.add_argument("--guidance", type=float, help="guidance scale w (default 7.5)")
    p.add_argument("--steps", type=int, help="sampling steps (default: all T)")
    p.add_argument("--slice-us", dest="slice_us", type=int, help="duration of one generated slice in us")
    p.add_argument("--seed", type=int, default=None, help="sampling seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evgen", description="Event-stream generation toolkit.")
    parser.add_argument("--version", action="version", version=f"evgen {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth-data", help="write a synthetic labeled gesture dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--classes", default="clockwise,counter-clockwise", help="comma-separated gesture names")
    p.add_argument("--per-class", dest="per_class", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--duration-us", dest="duration_us", type=int, default=1_000_000)
    p.add_argument("--events-per-us", dest="events_per_us", type=float, default=0.0164)
    p.add_argument("--noise-rate", dest="noise_rate", type=float, default=0.0005, help="noise events per us over the sensor")
    p.add_argument("--phase", type=float, help="fixed starting angle of rotation gestures in radians (default: random per stream)")
    p.add_argument("--format", choices=["binary", "csv"], default="binary")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("filter", help="active-patch noise filter")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--window-us", dest="window_us", type=int, default=20_000)
    p.add_argument("--patch-px", dest="patch_px", type=int, default=8)
    p.add_argument("--threshold", type=int, default=7)
    _geometry(p)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("voxelize", help="slice by event count and write EVG1 grids")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--count", type=int, default=2048)
    p.add_argument("--n-bins", dest="n_bins", type=int, default=1)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--cap", type=float, default=None, help="probability cap (default: raw counts)")
    _geometry(p)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("train-ae", help="staged autoencoder training")
    _train_common(p)
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("train-dm", help="latent diffusion training")
    _train_common(p, with_val=False)
    p.add_argument("--ckpt-ae", dest="ckpt_ae", required=True)
    p.set_defaults(func=cmd_train_dm)

    p = sub.add_parser("train-cls", help="gesture classifier training")
    _train_common(p)
    p.set_defaults(func=cmd_train_cls)

    p = sub.add_parser("generate", help="sample an event stream for a prompt")
    _gen_common(p)
    p.add_argument("--prompt", required=True, help="class name or embedding key")
    p.add_argument("--boost", type=float, default=3.0)
    p.add_argument("--n", type=int, default=1, help="number of streams (suffixes _000, _001, ...)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate, seed=0)

    p = sub.add_parser("evaluate", help="classify generated samples and write a report")
    _gen_common(p)
    p.add_argument("--ckpt-cls", dest="ckpt_cls")
    p.add_argument("--prompts", help="JSON file: {\"prompts\": {prompt: class}, \"groups\": {name: [class ids]}}")
    p.add_argument("--boost", type=float, nargs="+", help="one or more boost factors (default: config)")
    p.add_argument("--samples-per-prompt", dest="samples_per_prompt", type=int)
    p.add_argument("--report", help="JSON report path (also printed)")
    p.add_argument("--workdir", help="checkpoint directory for a --config end-to-end run")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", help="PGM/PPM rendering of events or grids")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--mode", choices=["accumulate", "spacetime"], default="accumulate")
    p.add_argument("--grids", type=int, default=100, help="number of leading grids/slices to accumulate")
    p.add_argument("--count", type=int, default=2048, help="events per slice when accumulating an event file")
    p.add_argument("--steps", type=int, default=16, help="time steps for the mean-position track")
    _geometry(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("grad-check", help="finite-difference check of every layer kind")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)
    return parser


def _one_line(exc: BaseException) -> str:
    kind = {ValidationError: "validation", EventFormatError: "format", UsageError: "usage", LookupError: "lookup"}
    name = next((v for k, v in kind.items() if isinstance(exc, k)), "io" if isinstance(exc, OSError) else type(exc).__name__)
    msg = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
    return f"evgen: error: {name}: {' '.join(msg.split())}"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits

        from .config import thread_limit

        limit = thread_limit()
        ctx = threadpool_limits(limits=limit) if limit else contextlib.nullcontext()
        with ctx:
            return args.func(args)
    except (ValidationError, EventFormatError, UsageError, LookupError, OSError, ValueError) as exc:
        print(_one_line(exc), file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
