"""Command-line entry point: ``mvmcad <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import mvtn
from . import tensor as T
from .checkpoint import Checkpoint
from .config import RunConfig
from .data import SynthPlan, load_dataset, stack_views, synth_dataset
from .errors import MvmcadError, NumericError, StorageError, ValidationError
from .gradcheck import format_table, gradcheck
from .model import Model
from .pipeline import evaluate, infer, load_image, model_from_checkpoint, train

log = logging.getLogger("mvmcad")


def _config(args, seed_section: str = "train") -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.updated(**{seed_section: {"seed": args.seed}})
    if getattr(args, "data", None):
        cfg = cfg.updated(data={"root": str(args.data)})
    return cfg


def _dtype(args):
    return np.float64 if args.f64 else np.float32


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise ValidationError(f"--{name.replace('_', '-')} is required for {args.command}")


def cmd_synth(args) -> int:
    cfg = _config(args, seed_section="data")
    _require(args, "out")
    root = synth_dataset(args.out, SynthPlan.from_config(cfg), jobs=args.jobs)
    print(f"dataset written to {root}")
    return 0


def read_weight_dir(folder) -> dict[str, np.ndarray]:
    folder = Path(folder)
    if not folder.is_dir():
        raise StorageError(f"backbone weight directory {folder} not found")
    return {p.stem: mvtn.load(p) for p in sorted(folder.glob("*.mvtn"))}


def cmd_train(args) -> int:
    cfg = _config(args)
    _require(args, "out")
    root = args.data or cfg.data.root
    if root is None:
        raise ValidationError("train needs --data or data.root in the config")
    samples = list(load_dataset(root, "train", image_size=cfg.model.image_size,
                                categories=cfg.data.categories))
    arrays = stack_views(samples)
    table = read_weight_dir(args.backbone_weights) if args.backbone_weights else None
    start = time.perf_counter()
    result = train(cfg, arrays["images"], out_dir=args.out, dtype=_dtype(args), backbone_table=table)
    last = result.log[-1]["loss"] if result.log else float("nan")
    print(f"trained {cfg.train.iterations} iterations in {time.perf_counter() - start:.1f}s, "
          f"final loss {last:.6f}; checkpoint at {Path(args.out) / 'checkpoint.mvmc'}")
    return 0


def cmd_eval(args) -> int:
    _require(args, "checkpoint")
    ck = Checkpoint.load(args.checkpoint)
    root = args.data or ck.config.get("data", {}).get("root")
    if root is None:
        raise ValidationError("eval needs --data or data.root in the checkpoint config")
    report = evaluate(ck, root, out_dir=args.out, jobs=args.jobs, dtype=_dtype(args),
                      heatmaps=args.heatmaps)
    print(json.dumps(report.to_dict(), sort_keys=True, indent=2))
    return 0


def cmd_infer(args) -> int:
    _require(args, "checkpoint", "image", "out")
    result = infer(Checkpoint.load(args.checkpoint), args.image, args.out, dtype=_dtype(args))
    print(f"score {result.score:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    rows = gradcheck(cfg, seed=args.seed or 0)
    print(format_table(rows))
    if not all(r.ok for r in rows):
        raise NumericError("gradient check failed")
    return 0


def _model_for_trace(args) -> Model:
    if args.checkpoint:
        return model_from_checkpoint(Checkpoint.load(args.checkpoint), dtype=_dtype(args))
    return Model.init(_config(args), dtype=_dtype(args))


def cmd_aam_trace(args) -> int:
    _require(args, "image", "out")
    model = _model_for_trace(args)
    if not model.cfg.toggles.aam_enabled:
        raise ValidationError("aam-trace needs a configuration with aam_enabled")
    image = load_image(args.image, model.cfg)
    with T.no_grad():
        out = model.forward(T.Tensor(image, dtype=_dtype(args)))
    folder = Path(args.out)
    folder.mkdir(parents=True, exist_ok=True)
    for name, t in out.aam.named().items():
        mvtn.save(folder / f"{name}.mvtn", t.data)
    print(f"wrote {len(out.aam.named())} trace tensors to {folder}")
    return 0


def cmd_export_weights(args) -> int:
    _require(args, "out")
    if args.checkpoint:
        table = {k: v for k, v in Checkpoint.load(args.checkpoint).tensors.items()
                 if k.startswith("backbone.")}
    else:
        table = {k: t.data for k, t in Model.init(_config(args), dtype=_dtype(args)).backbone.named().items()}
    folder = Path(args.out)
    try:
        folder.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {folder}: {exc}") from exc
    for name, arr in sorted(table.items()):
        mvtn.save(folder / f"{name}.mvtn", arr)
    print(f"exported {len(table)} backbone tensors to {folder}")
    return 0


COMMANDS = {
    "synth": (cmd_synth, "render the synthetic multi-view dataset"),
    "train": (cmd_train, "train on the normal training split"),
    "eval": (cmd_eval, "score the test split and write metrics.json"),
    "infer": (cmd_infer, "anomaly map and score for one image"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient check in float64"),
    "aam-trace": (cmd_aam_trace, "dump amplification intermediates for one image"),
    "export-weights": (cmd_export_weights, "write backbone weights as tensor dumps"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides data.seed for synth, train.seed otherwise")
    common.add_argument("--data", type=Path, help="dataset root")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="worker cap; 1 is bitwise reproducible")
    common.add_argument("--f64", action="store_true", help="run in float64")
    common.add_argument("--checkpoint", type=Path)
    common.add_argument("--image", type=Path)
    common.add_argument("--backbone-weights", type=Path, help="directory of backbone.*.mvtn dumps")
    common.add_argument("--heatmaps", action="store_true", help="eval: also write per-view heatmaps")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mvmcad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return 2
    if args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return 2
    handler, _ = COMMANDS[args.command]
    try:
        return handler(args)
    except MvmcadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
