# pipeline/run_all.py
"""
Command-line entry point.

    python -m pipeline.run_all synth-data --seen 10 --unseen 3 --attrs 12 --out data/synth
    python -m pipeline.run_all train --data data/synth --out runs/synth
    python -m pipeline.run_all eval --data data/synth --checkpoint runs/synth/final.ckpt --mode gzsl

Exit codes: 0 success, 1 validation/config error, 2 missing artifact, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape

# Add project root to sys.path for absolute imports
ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT))

from hdafl.errors import ConfigError, HDAFLError  # noqa: E402
from hdafl.losses import LossWeights  # noqa: E402
from pipeline.evaluate import (  # noqa: E402
    EVAL_MODES,
    evaluate,
    export_embeddings,
    gamma_sweep,
    parse_gamma_range,
)
from pipeline.experiments import ABLATION_STAGES, SWEEPABLE, run_ablation, run_sweep  # noqa: E402
from pipeline.report_utils import (  # noqa: E402
    metrics_table,
    report_summary_str,
    summary_table,
    write_report_json,
    write_reports_csv,
)
from pipeline.settings import (  # noqa: E402
    GAMMA_AWA2,
    GAMMA_DEFAULT,
    SEED_ENV,
    ModelSettings,
    RunSettings,
    TrainConfig,
    load_run_settings,
)
from pipeline.trainer import train  # noqa: E402
from zsldata.convert import convert_xlsa17  # noqa: E402
from zsldata.dataset import describe, load_dataset, save_dataset  # noqa: E402
from zsldata.episodes import EpisodeSpec  # noqa: E402
from zsldata.synthetic import SynthSpec, generate_synthetic  # noqa: E402

console = Console()

_TRAIN = TrainConfig()
_LOSS = LossWeights()
_EPISODE = EpisodeSpec()
_MODEL = ModelSettings()


# ----------------------------
# Logging
# ----------------------------
def setup_logging(log_dir: str) -> None:
    """File log at <log_dir>/runs.log plus a rich console handler (added once)."""
    log_path = Path(log_dir)
    log_path.mkdir(parents=True, exist_ok=True)
    log_file = str((log_path / "runs.log").resolve())
    root = logging.getLogger()
    root.setLevel(logging.INFO)
    if not any(isinstance(h, logging.FileHandler) and h.baseFilename == log_file for h in root.handlers):
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(message)s"))
        root.addHandler(file_handler)
    if not any(isinstance(h, RichHandler) for h in root.handlers):
        rich_handler = RichHandler(console=Console(stderr=True), show_path=False, level=logging.WARNING)
        root.addHandler(rich_handler)


# ----------------------------
# Helpers
# ----------------------------
def prepare_out_dir(path: Path, force: bool) -> Path:
    """Refuse to write into a non-empty directory unless --force (which clears it)."""
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"output directory {path} is not empty; pass --force to overwrite")
        logging.info("Clearing %s (--force)", path)
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _train_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        "general.seed": getattr(args, "seed", None),
        "general.dtype": getattr(args, "dtype", None),
        "train.epochs": getattr(args, "epochs", None),
        "train.learning_rate": getattr(args, "lr", None),
        "train.sampling": getattr(args, "sampling", None),
        "train.max_episodes": getattr(args, "max_episodes", None),
        "episode.ways": getattr(args, "ways", None),
        "episode.shots": getattr(args, "shots", None),
        "loss.alpha": getattr(args, "alpha", None),
        "loss.mu": getattr(args, "mu", None),
        "loss.epsilon": getattr(args, "epsilon", None),
        "loss.tau_attr": getattr(args, "tau_attr", None),
        "loss.tau_class": getattr(args, "tau_class", None),
        "eval.gamma": getattr(args, "gamma", None),
    }


def _print_table(text: str) -> None:
    console.print(text, markup=False, highlight=False)


# ----------------------------
# Commands
# ----------------------------
def cmd_synth_data(args: argparse.Namespace, settings: RunSettings) -> int:
    spec = SynthSpec(
        n_seen=args.seen,
        n_unseen=args.unseen,
        K=args.attrs,
        C=args.channels,
        H=args.height,
        W=args.width,
        images_per_class=args.per_class,
        noise_scale=args.noise,
        seed=settings.train.seed,
        name=args.name,
    )
    out = prepare_out_dir(Path(args.out), args.force)
    ds = generate_synthetic(spec)
    save_dataset(ds, out)
    logging.info("Synthetic dataset written to %s", out)
    _print_table(summary_table(describe(ds)))
    return 0


def cmd_convert(args: argparse.Namespace, settings: RunSettings) -> int:
    out = prepare_out_dir(Path(args.out), args.force)
    ds = convert_xlsa17(
        args.res101, args.att_splits, args.feature_maps, out,
        attributes_npy=args.attributes, name=args.name,
    )
    _print_table(summary_table(describe(ds)))
    return 0


def cmd_describe(args: argparse.Namespace, settings: RunSettings) -> int:
    _print_table(summary_table(describe(load_dataset(args.data))))
    return 0


def cmd_train(args: argparse.Namespace, settings: RunSettings) -> int:
    ds = load_dataset(args.data)
    out = Path(args.out or settings.train.checkpoint_dir)
    if args.resume is None:
        prepare_out_dir(out, args.force)
    result = train(ds, settings.train, out_dir=out, resume_from=args.resume, run_name=ds.name)
    last = result.trace.iloc[-1]["total"] if len(result.trace) else float("nan")
    console.print(f"[green]trained[/green] {len(result.trace)} episodes, final total loss {last:.4f}")
    console.print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args: argparse.Namespace, settings: RunSettings) -> int:
    ds = load_dataset(args.data)
    ckpt = Path(args.checkpoint)
    out = Path(args.out) if args.out else ckpt.parent / "reports"

    if args.gamma_sweep:
        gammas = parse_gamma_range(args.gamma_sweep)
        reports = gamma_sweep(ckpt, ds, gammas)
        rows = [r.to_dict() for r in reports]
        write_reports_csv(rows, out / "gamma_sweep.csv", "gamma")
        write_report_json({"reports": rows}, out / "gamma_sweep.json")
        _print_table(metrics_table(rows, "gamma"))
        return 0

    report = evaluate(ckpt, ds, mode=args.mode, gamma=settings.eval.gamma)
    write_report_json(report.to_dict(), out / f"report_{args.mode}.json")
    _print_table(metrics_table([report.to_dict()], "mode"))
    logging.info("%s: %s", ds.name, report_summary_str(report.to_dict()))
    return 0


def cmd_export_embeddings(args: argparse.Namespace, settings: RunSettings) -> int:
    ds = load_dataset(args.data)
    df = export_embeddings(
        Path(args.checkpoint), ds,
        enhanced=args.features == "enhanced",
        presence_threshold=settings.train.presence_threshold,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(out, index=False)
    console.print(f"exported {len(df)} rows to {out}")
    return 0


def cmd_ablate(args: argparse.Namespace, settings: RunSettings) -> int:
    ds = load_dataset(args.data)
    out = prepare_out_dir(Path(args.out), args.force)
    stages = args.stages.split(",") if args.stages else None
    rows = run_ablation(ds, settings.train, out, stages=stages, gamma=settings.eval.gamma)
    write_reports_csv(rows, out / "ablation.csv", "stage")
    _print_table(metrics_table(rows, "stage"))
    return 0


def parse_values(param: str, text: str) -> List[Any]:
    cast = int if param == "ways" else float
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"--values for {param} must be a comma-separated list of numbers, got {text!r}") from e


def cmd_sweep(args: argparse.Namespace, settings: RunSettings) -> int:
    ds = load_dataset(args.data)
    out = prepare_out_dir(Path(args.out), args.force)
    values = parse_values(args.param, args.values)
    rows = run_sweep(ds, settings.train, args.param, values, out, gamma=settings.eval.gamma)
    write_reports_csv(rows, out / f"sweep_{args.param}.csv", args.param)
    _print_table(metrics_table(rows, args.param))
    return 0


# ----------------------------
# Parser
# ----------------------------
def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="settings TOML (default: pipeline/settings.toml)")
    p.add_argument("--seed", type=int, help=f"run seed (default {_TRAIN.seed}; {SEED_ENV} overrides)")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--epochs", type=int, help=f"epochs (default {_TRAIN.epochs})")
    p.add_argument("--lr", type=float, help=f"SGD learning rate (default {_TRAIN.learning_rate})")
    p.add_argument("--ways", type=int, help=f"classes per episode M (default {_EPISODE.ways})")
    p.add_argument("--shots", type=int, help=f"images per class N (default {_EPISODE.shots})")
    p.add_argument("--sampling", choices=["episode", "random"], help=f"batch sampling (default {_TRAIN.sampling})")
    p.add_argument("--max-episodes", type=int, help="cap on optimisation steps (default: none)")
    p.add_argument("--dtype", choices=["float32", "float64"], help=f"tensor dtype (default {_TRAIN.dtype})")
    p.add_argument("--alpha", type=float, help=f"cosine scale factor (default {_LOSS.alpha})")
    p.add_argument("--mu", type=float, help=f"hard-positive drop fraction (default {_LOSS.mu})")
    p.add_argument("--epsilon", type=float, help=f"hard-negative drop fraction (default {_LOSS.epsilon})")
    p.add_argument("--tau-attr", dest="tau_attr", type=float,
                   help=f"attribute contrastive temperature (default {_LOSS.tau_attr})")
    p.add_argument("--tau-class", dest="tau_class", type=float,
                   help=f"class contrastive temperature (default {_LOSS.tau_class})")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")


def build_parser() -> argparse.ArgumentParser:
    epilog = (
        f"Fixed defaults: momentum {_TRAIN.momentum}, weight decay {_TRAIN.weight_decay}, "
        f"lambdas {_LOSS.lambda_mse}/{_LOSS.lambda_aal}/{_LOSS.lambda_acl}/{_LOSS.lambda_ccl}, "
        f"heads {_MODEL.heads}, hidden width {_MODEL.hidden_dim}, "
        f"gamma {GAMMA_AWA2} for AWA2-named datasets else {GAMMA_DEFAULT}."
    )
    parser = argparse.ArgumentParser(prog="hdafl", description="Zero-shot attribute head toolkit", epilog=epilog)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset directory", epilog=epilog)
    _add_common(p)
    p.add_argument("--seen", type=int, default=10, help="seen classes (default 10)")
    p.add_argument("--unseen", type=int, default=3, help="unseen classes (default 3)")
    p.add_argument("--attrs", type=int, default=12, help="attributes K (default 12)")
    p.add_argument("--channels", type=int, default=64, help="feature channels C (default 64)")
    p.add_argument("--height", type=int, default=7, help="feature map height (default 7)")
    p.add_argument("--width", type=int, default=7, help="feature map width (default 7)")
    p.add_argument("--per-class", dest="per_class", type=int, default=20, help="images per class (default 20)")
    p.add_argument("--noise", type=float, default=0.1, help="noise scale (default 0.1)")
    p.add_argument("--name", default="synthetic", help="dataset name (default synthetic)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("convert", help="convert res101.mat / att_splits.mat + feature maps")
    _add_common(p)
    p.add_argument("--res101", required=True, help="res101.mat (labels)")
    p.add_argument("--att-splits", dest="att_splits", required=True, help="att_splits.mat")
    p.add_argument("--feature-maps", dest="feature_maps", required=True, help="N x H x W x C .npy")
    p.add_argument("--attributes", help="optional K x D attribute vectors .npy")
    p.add_argument("--name", help="dataset name (default: att_splits parent directory)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("describe", help="print dataset statistics")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("train", help="train the head", epilog=epilog)
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--out", help=f"checkpoint directory (default {_TRAIN.checkpoint_dir})")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint", epilog=epilog)
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--mode", choices=EVAL_MODES, default="gzsl", help="evaluation mode (default gzsl)")
    p.add_argument("--gamma", type=float,
                   help=f"calibration factor (default {GAMMA_AWA2} for AWA2-named datasets, else {GAMMA_DEFAULT})")
    p.add_argument("--gamma-sweep", dest="gamma_sweep", help="GZSL sweep start:stop:step, e.g. 0:1:0.1")
    p.add_argument("--out", help="report directory (default: <checkpoint dir>/reports)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-embeddings", help="write attribute-feature pool entries of the test split")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--features", choices=["raw", "enhanced"], default="enhanced",
                   help="AF (raw) or EAF (enhanced) rows (default enhanced)")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("ablate", help="train and evaluate the loss-component stages", epilog=epilog)
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--stages", help=f"comma-separated subset of {','.join(ABLATION_STAGES)}")
    p.add_argument("--gamma", type=float, help=f"calibration factor (default {GAMMA_DEFAULT})")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="train and evaluate over values of one hyperparameter", epilog=epilog)
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--param", required=True, choices=sorted(SWEEPABLE), help="hyperparameter to sweep")
    p.add_argument("--values", required=True, help="comma-separated values, e.g. 15,20,25,30")
    p.add_argument("--gamma", type=float, help=f"calibration factor (default {GAMMA_DEFAULT})")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    return parser


# ----------------------------
# Main
# ----------------------------
def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = load_run_settings(args.config, _train_overrides(args))
    except HDAFLError as e:
        setup_logging("logs")
        logging.error("%s", e)
        console.print(f"[red]error:[/red] {escape(str(e))}", highlight=False)
        return e.exit_code

    setup_logging(settings.log_dir)
    logging.info("=== %s start ===", args.command)
    try:
        rc = args.func(args, settings)
    except HDAFLError as e:
        logging.error("%s failed: %s", args.command, e)
        console.print(f"[red]error:[/red] {escape(str(e))}", highlight=False)
        return e.exit_code
    except Exception:
        logging.exception("Unhandled exception in %s", args.command)
        return 1
    logging.info("=== %s done ===", args.command)
    return rc


if __name__ == "__main__":
    sys.exit(main())
