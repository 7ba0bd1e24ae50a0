"""Command-line entry point: gen-data, train, eval, bench, detect, experiment.

Exit codes: 0 success, 1 usage or configuration error (including missing
input files), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import cascade as cc
from . import datagen as dg
from . import evaluation as ev
from . import experiment as ex
from . import nn_core as nn
from .cascade import FingerStrategy, HandStrategy
from .config import RunConfig, build_config

log = logging.getLogger("fingercascade")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="INI file with a [run] section")
    p.add_argument("--out", dest="out_dir", metavar="DIR", help="output directory")
    g = p.add_argument_group("config keys (override the file)")
    for f in fields(RunConfig):
        if f.name == "out_dir":
            continue
        flag = "--" + f.name.replace("_", "-")
        g.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fingercascade", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic dataset into --data-dir")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train one stage from the manifest in --data-dir")
    p.add_argument("--stage", required=True, choices=ex.STAGES)
    _add_config_flags(p)

    p = sub.add_parser("eval", help="write curves, cross table and zone metrics to --out")
    _add_config_flags(p)

    p = sub.add_parser("bench", help="per-stage latency report")
    _add_config_flags(p)

    p = sub.add_parser("detect", help="run the cascade on one image")
    p.add_argument("image", help="PNG image path")
    p.add_argument("--hand", dest="hand_strategy", choices=["RHD", "AHD", "RECENTER"],
                   type=str.upper, default=None)
    p.add_argument("--finger", dest="finger_strategy", choices=["MFD", "SPD"],
                   type=str.upper, default=None)
    p.add_argument("--annotate", metavar="PNG", help="also write an annotated copy")
    _add_config_flags(p)

    p = sub.add_parser("experiment", help="full desk-scale ablation into --out")
    _add_config_flags(p)
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    overrides = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    try:
        return build_config(args.config, overrides)
    except (ValueError, FileNotFoundError) as e:
        raise UsageError(str(e)) from e


def _manifest(cfg: RunConfig) -> dg.DatasetManifest:
    return dg.read_manifest(cfg.data_dir)


def _models(cfg: RunConfig) -> cc.TrainedModels:
    return cc.TrainedModels.load(cfg.models_dir)


# -- commands --------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    manifest = dg.generate_dataset(cfg.scene_params(), cfg.count, cfg.data_dir)
    s = dg.summarize(manifest)
    split = ", ".join(f"{k} {v:.3f}" for k, v in s["direction_split"].items())
    print(f"manifest: {manifest.path}")
    print(f"count: {s['count']}  dark fraction: {s['dark_fraction']:.3f}  directions: {split}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    manifest = _manifest(cfg)

    def progress(epoch, loss):
        print(f"epoch {epoch}: loss {loss:.6f}", flush=True)

    ex.train_stage(cfg, args.stage, manifest, cfg.models_dir, progress)
    print(f"weights: {Path(cfg.models_dir) / cc.MODEL_FILES[ex.STAGE_MODEL[args.stage]]}")
    print(f"loss trace: {ex.loss_trace_path(Path(cfg.models_dir), args.stage)}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    models = _models(cfg)
    out = ex.evaluate_to_dir(cfg, models, _manifest(cfg).frames(), cfg.out_dir)
    print(out.cross.render())
    for s in ex.OVERLAP_STRATEGIES:
        print(f"mean overlap {s.value}: {ev.mean_iou(out.records, s):.4f}")
    if out.failures:
        print(f"{len(out.failures)} frame(s) failed and were excluded", file=sys.stderr)
    print(f"wrote {len(out.files)} files to {cfg.out_dir}")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, args) -> int:
    if cfg.reps < ev.MIN_BENCH_REPETITIONS:
        raise UsageError(f"repetitions ≥ {ev.MIN_BENCH_REPETITIONS} required (got {cfg.reps})")
    models = _models(cfg)
    hand = HandStrategy(cfg.hand_strategy)
    if hand is HandStrategy.GT:
        raise UsageError("bench needs a detector hand strategy, not GT")
    report = ev.benchmark_latency(models, _manifest(cfg), cfg.reps, cfg.warmup, hand,
                                  FingerStrategy(cfg.finger_strategy))
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    path = ev.emit_csv(report, Path(cfg.out_dir) / "timing.json")
    print(report.render())
    print("reference GPU ms (not targets): " + ", ".join(
        f"{k} {v}" for k, v in ev.REFERENCE_TIMINGS_MS.items()))
    print(f"report: {path}")
    return EXIT_OK


def annotate(img, det: cc.Detection, path: str | Path) -> None:
    """Draw the hand box and keypoints on a copy of ``img`` and save it as PNG."""
    from PIL import Image, ImageDraw

    data = (img.clip(0, 1) * 255).round().astype("uint8")
    im = Image.fromarray(data, mode="RGB")
    draw = ImageDraw.Draw(im)
    b = det.hand_box
    draw.rectangle([b.x1, b.y1, b.x2 - 1, b.y2 - 1], outline=(0, 255, 0))
    points = [(det.fingertip, (255, 0, 0))]
    if det.joint is not None:
        points.append((det.joint, (0, 128, 255)))
    for p, color in points:
        draw.ellipse([p.x - 2, p.y - 2, p.x + 2, p.y + 2], outline=color, fill=color)
    im.save(path, format="PNG")


def cmd_detect(cfg: RunConfig, args) -> int:
    path = Path(args.image)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    img = dg.read_png(path)
    hand = HandStrategy(cfg.hand_strategy)
    if hand is HandStrategy.GT:
        raise UsageError("detect has no ground truth; choose RHD, AHD or RECENTER")
    det = cc.run_cascade(_models(cfg), img, hand, FingerStrategy(cfg.finger_strategy))
    print(json.dumps(det.to_json()))
    if args.annotate:
        annotate(img, det, args.annotate)
    return EXIT_OK


def cmd_experiment(cfg: RunConfig, args) -> int:
    result = ex.run_desk_experiment(cfg, cfg.out_dir, log=print)
    for c in result.criteria:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    return EXIT_OK if result.passed else EXIT_RUNTIME


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "detect": cmd_detect,
    "experiment": cmd_experiment,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # argparse usage errors and --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except nn.NonFiniteLossError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError, nn.WeightsFileError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
