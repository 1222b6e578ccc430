"""Command-line entry point: curate, synth, analyze, train, infer, eval.

Exit codes: 0 success, 1 validation failure, 2 runtime failure. Every command
prints a human-readable summary and writes the same numbers as JSON.

Frame directories can be muxed into a video with e.g.
``ffmpeg -framerate 24 -i sbs/frame_%06d.png -c:v libx264 -pix_fmt yuv420p out.mp4``.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import shutil
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import datakit, metrics
from .datakit import DataError, FrameSequence

log = logging.getLogger("layerstereo")

OUTPUT_ENV = "LAYERSTEREO_OUTPUT_DIR"

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ValidationFailure(Exception):
    """Raised by commands for bad inputs; maps to exit code 1."""


@dataclass
class CommandResult:
    exit_code: int
    report_path: Optional[Path] = None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------- helpers


def _default_out(command):
    return Path(os.environ.get(OUTPUT_ENV, "runs")) / command


def _prepare_dir(path, overwrite):
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise ValidationFailure(f"{path} is not empty (pass --overwrite to replace it)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return _jsonable(v.item())
    if isinstance(v, Path):
        return str(v)
    return v


def _write_report(path, report):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_jsonable(report), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"report: {path}")
    return path


def _load_pair(directory):
    """Left/right sequences from a directory with ``left/`` and ``right/`` frames."""
    directory = Path(directory)
    for side in ("left", "right"):
        if not (directory / side).is_dir():
            raise ValidationFailure(f"{directory} has no {side}/ frame directory")
    left = datakit.load_frame_dir(directory / "left")
    right = datakit.load_frame_dir(directory / "right")
    if left.shape != right.shape:
        raise ValidationFailure(f"{directory}: left {left.shape} and right {right.shape} frames are not paired")
    return left, right


def _load_training_pair(directory):
    """Exact arrays when a synthetic scene dump is present, PNG frames otherwise."""
    directory = Path(directory)
    if (directory / "left.npy").is_file():
        scene = datakit.load_scene(directory)
        return scene.left, scene.right
    return _load_pair(directory)


def _configs(args, overrides=()):
    from .training import build_configs, parse_flat_config

    raw = {}
    if args.config:
        if not Path(args.config).is_file():
            raise ValidationFailure(f"config file {args.config} not found")
        raw = parse_flat_config(Path(args.config).read_text())
    extra = {}
    for item in overrides:
        if "=" not in item:
            raise ValidationFailure(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        extra[k.strip()] = v.strip()
    extra.setdefault("seed", str(args.seed))
    return build_configs(raw, extra)


def _to_u8(x):
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def _disparity_image(d, lo, hi):
    span = max(hi - lo, 1e-6)
    return _to_u8((np.asarray(d) - lo) / span * 255.0)


# --------------------------------------------------------------------------- commands


def cmd_curate(args):
    entries = datakit.read_manifest(args.manifest)
    if not entries:
        raise ValidationFailure("no entries in manifest")
    out = _prepare_dir(args.output_dir, args.overwrite)
    curated, failures = [], []
    for entry in entries:
        try:
            left, right = datakit.ingest_frames(entry, Path(args.input_dir) / entry.source_path)
        except (DataError, OSError) as exc:
            failures.append({"video_id": entry.video_id, "error": str(exc)})
            print(f"rejected {entry.video_id}: {exc}")
            continue
        dest = out / entry.video_id
        datakit.write_frames(dest / "left", left.frames)
        datakit.write_frames(dest / "right", right.frames)
        extra = dict(entry.extra)
        extra["curated_from"] = {"source_path": entry.source_path, "start_frame": entry.start_frame,
                                 "end_frame": entry.end_frame, "layout": entry.layout}
        curated.append(datakit.ManifestEntry(
            video_id=entry.video_id, source_path=entry.video_id,
            width=left.shape[2], height=left.shape[1],
            start_frame=0, end_frame=len(left), layout="separate", extra=extra,
        ))
        print(f"curated {entry.video_id}: {len(left)} frames of {left.shape[2]}x{left.shape[1]}")
    datakit.write_manifest(out / "manifest.jsonl", curated)
    report = {"curated": [e.video_id for e in curated], "rejected": failures,
              "total": len(entries)}
    print(f"summary: {len(curated)} curated, {len(failures)} rejected of {len(entries)}")
    path = _write_report(out / "curate_report.json", report)
    return CommandResult(EXIT_INVALID if failures else EXIT_OK, path)


def cmd_synth(args):
    try:
        raw = json.loads(Path(args.spec_file).read_text())
        spec = datakit.SyntheticSceneSpec.from_dict(raw)
        spec.validate()
    except FileNotFoundError:
        raise ValidationFailure(f"spec file {args.spec_file} not found") from None
    except (json.JSONDecodeError, TypeError) as exc:
        raise ValidationFailure(f"spec does not parse: {exc}") from None
    out = _prepare_dir(args.output_dir or _default_out("synth"), args.overwrite)
    scene = datakit.generate_synthetic_stereo(spec, seed=args.seed)
    datakit.save_scene(out, scene, meta={"spec": spec.to_dict(), "seed": args.seed})
    occ = float(scene.gt_occlusion.mean())
    print(f"wrote {spec.length} frames of {spec.canvas[1]}x{spec.canvas[0]} to {out}")
    print(f"occluded fraction (right view): {occ:.4f}")
    return CommandResult(EXIT_OK, out / "meta.json")


def cmd_analyze(args):
    frames = Path(args.frames_dir)
    left, right = _load_pair(frames)
    provider_name = args.flow
    if provider_name == "auto":
        provider_name = "gt" if (frames / "gt_disparity.npy").is_file() else "farneback"
    if provider_name == "gt":
        try:
            provider = metrics.ground_truth_flow_provider(np.load(frames / "left_disparity.npy"),
                                                          np.load(frames / "gt_disparity.npy"))
        except FileNotFoundError:
            raise ValidationFailure(f"{frames} has no ground-truth disparity arrays") from None
    else:
        try:
            import cv2  # noqa: F401
        except ImportError:
            raise ValidationFailure("farneback flow needs opencv (pip install opencv-python-headless)") from None
        provider = metrics.farneback_flow_provider
    eps = args.epsilon
    print(f"epsilon: {eps:g}")
    rows = metrics.analyze_sequence(left, right, provider, eps)
    fractions = [r["occluded_fraction"] for r in rows]
    buckets = metrics.occlusion_breakdown(fractions)
    for r in rows:
        print(f"frame {r['frame']:4d}  mean error {r['mean_error']:.4f}  occluded {r['occluded_fraction']:.4f}")
    print("frames with occluded fraction below: " + "  ".join(
        f"<{int(e * 100)}%: {b:.1f}%" for e, b in zip(metrics.BUCKET_EDGES, buckets)))
    report = {"epsilon": eps, "flow": provider_name, "frames": rows,
              "buckets": dict(zip([f"lt_{e:.2f}" for e in metrics.BUCKET_EDGES], buckets))}
    out = Path(args.output) if args.output else frames / "analysis.json"
    if out.exists() and not args.overwrite:
        raise ValidationFailure(f"{out} exists (pass --overwrite to replace it)")
    return CommandResult(EXIT_OK, _write_report(out, report))


def _bundled_scene(seed):
    text = resources.files("layerstereo").joinpath("data/default_scene.json").read_text()
    spec = datakit.SyntheticSceneSpec.from_dict(json.loads(text))
    scene = datakit.generate_synthetic_stereo(spec, seed=seed)
    return scene.left, scene.right


def cmd_train(args):
    from .training import dump_flat_config, train_loop

    tcfg, mcfg = _configs(args, args.set)
    if args.steps is not None:
        tcfg.max_iters = args.steps
        tcfg.validate()
    data = [_load_training_pair(d) for d in args.data] if args.data else [_bundled_scene(args.seed)]
    out = Path(args.out or _default_out("train"))
    if args.resume is None:
        out = _prepare_dir(out, args.overwrite)
    (out / "config.txt").write_text(dump_flat_config(tcfg, mcfg))
    result = train_loop(data, tcfg, mcfg, out_dir=out, resume=args.resume)
    losses = [r["total"] for r in result.log]
    report = {"steps": result.step, "config_hash": result.model.config.digest(),
              "first_loss": losses[0] if losses else None, "last_loss": losses[-1] if losses else None,
              "checkpoint": out / "checkpoint.pt", "metrics_log": out / "metrics.jsonl"}
    if losses:
        print(f"trained {len(losses)} steps: loss {losses[0]:.3f} -> {losses[-1]:.3f}")
    print(f"config hash: {report['config_hash']}")
    return CommandResult(EXIT_OK, _write_report(out / "train_report.json", report))


def _load_model(path):
    from .model import load_checkpoint

    if not Path(path).is_file():
        raise ValidationFailure(f"checkpoint {path} not found")
    model, _ = load_checkpoint(path)
    return model


def cmd_infer(args):
    import torch

    from .training import infer_video

    torch.manual_seed(args.seed)
    model = _load_model(args.checkpoint)
    src = Path(args.input)
    left = datakit.load_frame_dir(src / "left" if (src / "left").is_dir() else src)
    out = _prepare_dir(args.out or _default_out("infer"), args.overwrite)
    right, diag = infer_video(left, model, diagnostics=True)
    lf, rf = _to_u8(left.frames), _to_u8(right.frames)
    datakit.write_frames(out / "left", lf)
    datakit.write_frames(out / "right", rf)
    datakit.write_frames(out / "sbs", np.concatenate([lf, rf], axis=2))
    datakit.write_frames(out / "anaglyph", [datakit.make_anaglyph(a, b) for a, b in zip(lf, rf)])
    report = {"frames": len(right), "config_hash": model.config.digest(), "output": out}
    if args.dump_layers:
        shifts = model.config.shifts
        lo, hi = -max(shifts), -min(shifts)
        am = diag["argmax_disp"]
        datakit.write_frames(out / "argmax", _disparity_image(am, lo, hi))
        np.save(out / "argmax_disparity.npy", am)
        if "layered_disp" in diag:
            ld = diag["layered_disp"]
            llo, lhi = float(ld.min()), float(ld.max())
            for k in range(ld.shape[1]):
                datakit.write_frames(out / "layers" / f"layer_{k:02d}", _disparity_image(ld[:, k], llo, lhi))
            np.save(out / "layered_disparity.npy", ld)
            report["layered_disparity_range"] = [llo, lhi]
    print(f"wrote {len(right)} right-view frames, SBS composites and anaglyphs to {out}")
    return CommandResult(EXIT_OK, _write_report(out / "infer_report.json", report))


def cmd_eval(args):
    from .training import evaluate_model

    clips = [_load_pair(d) for d in args.data]
    if not clips:
        raise ValidationFailure("empty evaluation set")
    if args.pred:
        if len(args.pred) != len(clips):
            raise ValidationFailure("--pred needs one directory per --data directory")
        reports = []
        for pdir, (_, right) in zip(args.pred, clips):
            pred = datakit.load_frame_dir(pdir)
            if pred.shape != right.shape:
                raise ValidationFailure(f"{pdir}: prediction shape {pred.shape} vs ground truth {right.shape}")
            reports.append(metrics.evaluate_pair(pred, right))
        summary = metrics.aggregate_reports(reports)
        config_hash = None
    elif args.checkpoint:
        model = _load_model(args.checkpoint)
        summary, reports = evaluate_model(model, clips)
        config_hash = model.config.digest()
    else:
        raise ValidationFailure("eval needs --checkpoint or --pred")
    print(f"L1 {summary.l1:.5f}  SSIM {summary.ssim:.4f}  PSNR {summary.psnr:.3f} dB  ({len(clips)} clips)")
    report = {"summary": summary.as_dict(), "clips": [r.as_dict() for r in reports],
              "data": list(args.data), "config_hash": config_hash}
    out = Path(args.out) if args.out else _default_out("eval") / "eval_report.json"
    if out.exists() and not args.overwrite:
        raise ValidationFailure(f"{out} exists (pass --overwrite to replace it)")
    return CommandResult(EXIT_OK, _write_report(out, report))


# --------------------------------------------------------------------------- parser


def _global_flags(parser, suppress):
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", help="flat key = value configuration file", **({"default": None} | kw))
    parser.add_argument("--seed", type=int, help="global random seed (default 0)", **({"default": 0} | kw))
    parser.add_argument("--overwrite", action="store_true", help="replace existing outputs", **kw)
    parser.add_argument("--dump-layers", action="store_true",
                        help="infer: write per-layer disparity and implicit argmax maps", **kw)


def build_parser():
    parser = _Parser(prog="layerstereo", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        p.set_defaults(func=fn)
        return p

    p = add("curate", cmd_curate, "split side-by-side frames into left/right directories")
    p.add_argument("manifest")
    p.add_argument("input_dir")
    p.add_argument("output_dir")

    p = add("synth", cmd_synth, "render a synthetic stereo scene with exact ground truth")
    p.add_argument("spec_file")
    p.add_argument("output_dir", nargs="?")

    p = add("analyze", cmd_analyze, "left-right flow consistency statistics")
    p.add_argument("frames_dir")
    p.add_argument("--epsilon", type=float, default=metrics.DEFAULT_EPSILON)
    p.add_argument("--flow", choices=("auto", "gt", "farneback"), default="auto")
    p.add_argument("--output")

    p = add("train", cmd_train, "train a model")
    p.add_argument("--data", nargs="*", default=[], help="directories with left/ and right/ frames")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume")
    p.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE")

    p = add("infer", cmd_infer, "convert a left-view clip to stereo")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out")

    p = add("eval", cmd_eval, "L1 / SSIM / PSNR against ground-truth right views")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--pred", nargs="*")
    p.add_argument("--out")
    return parser


def run(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CommandResult(EXIT_INVALID)
    except ValueError as exc:  # library validation errors subclass ValueError
        print(f"error: {exc}", file=sys.stderr)
        return CommandResult(EXIT_INVALID)
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return CommandResult(EXIT_RUNTIME)


def main(argv=None):
    return run(argv).exit_code


if __name__ == "__main__":
    sys.exit(main())
