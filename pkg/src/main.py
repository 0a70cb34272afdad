"""Command-line entry point: ``python -m src.main <command> [options]``."""

import argparse
import json
import logging
import shutil
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd
from pydantic import ValidationError

from src.config import ExperimentConfig, get_settings, load_experiment_config, parse_assignments
from src.data import (
    dataset_hash,
    datasets_fingerprint,
    export_datasets,
    generate_synthetic_domains,
    load_datasets,
    samples_to_tensors,
)
from src.errors import (
    CadaSegError,
    ConfigFileError,
    ConfigurationError,
    InputError,
    ParameterError,
    TrainingDivergedError,
)
from src.evaluation import evaluate_model, predict_labels
from src.experiments import run_ablation, run_ratio_sweep, run_sda_comparison
from src.models import (
    CurveRow,
    DomainDatasets,
    DomainId,
    FinetuneScope,
    Method,
    MetricsRow,
    RunManifest,
    TrainHistory,
)
from src.network import build_checkpoint, load_checkpoint, restore_checkpoint, save_checkpoint
from src.report import (
    plot_domain_histograms,
    plot_history,
    plot_ratio_curves,
    write_curve,
    write_metrics,
    write_overlays,
)
from src.store import CheckpointStore
from src.trainer import finetune, history_frame, train, write_history_csv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG_FILE = 2
EXIT_CONFIG = 3
EXIT_RUNTIME = 4

MANIFEST = "manifest.json"
METRICS = "metrics.json"
HISTORY = "history.csv"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _prepare_dir(path: Path, force: bool) -> Path:
    """Create ``path``; an existing non-empty directory needs ``force``."""
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigurationError(f"{path} already exists; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _run_dir(args, config: ExperimentConfig, label: Optional[str] = None) -> Path:
    if args.out:
        return _prepare_dir(Path(args.out), args.force)
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    name = f"{label or config.method.value}_{config.seed}_{stamp}"
    return _prepare_dir(Path(get_settings().out_root) / name, args.force)


def _load_config(args) -> ExperimentConfig:
    overrides: Dict[str, Any] = {}
    try:
        overrides.update(parse_assignments(getattr(args, "set", None) or []))
    except ValueError as e:
        raise ConfigurationError(str(e)) from e
    if getattr(args, "method", None):
        overrides["method"] = args.method
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "iters", None) is not None:
        overrides["schedule.k_max"] = args.iters
    return load_experiment_config(args.config, overrides)


def _attach_log_file(run_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(run_dir / "train.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


def _data_hash(config: ExperimentConfig, datasets: DomainDatasets) -> str:
    if config.data.root:
        return dataset_hash(config.data.root)
    samples = [*datasets.source_labeled, *datasets.target_labeled, *datasets.target_unlabeled,
               *datasets.validation, *datasets.test]
    return datasets_fingerprint(samples)


def _write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def _write_manifest(run_dir: Path, manifest: RunManifest) -> None:
    _write_json(run_dir / MANIFEST, manifest.model_dump(mode="json"))


def _write_run_outputs(run_dir: Path, history: TrainHistory, row: MetricsRow) -> Dict[str, str]:
    write_history_csv(history, str(run_dir / HISTORY))
    _write_json(run_dir / METRICS, row.model_dump(mode="json"))
    outputs = {"history": HISTORY, "metrics": METRICS}
    if history.rows:
        plot_history(history_frame(history), str(run_dir / "losses.png"), row.method)
        outputs["loss_plot"] = "losses.png"
    return outputs


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_generate(args) -> int:
    config = _load_config(args)
    data = config.data
    out = Path(args.out) if args.out else Path(get_settings().out_root) / f"data_{data.kind.value}_{data.seed}"
    _prepare_dir(out, args.force)
    datasets = generate_synthetic_domains(data.kind, data.style.source, data.style.target,
                                          data.counts, data.seed, data.image_size)
    counts = export_datasets(datasets, str(out))
    plot_domain_histograms(datasets, str(out / "domain_histograms.png"))
    digest = dataset_hash(str(out))
    print(f"Wrote {sum(counts.values())} images to {out}")
    for split, n in counts.items():
        print(f"  {split:<18} {n}")
    print(f"dataset hash: {digest}")
    return EXIT_OK


def _train_run(config: ExperimentConfig, datasets: DomainDatasets, run_dir: Path,
               run) -> MetricsRow:
    """Manifest before, outputs and finalized manifest after ``run``."""
    manifest = RunManifest(config=config.snapshot(), dataset_hash=_data_hash(config, datasets),
                           started_at=_now())
    _write_manifest(run_dir, manifest)
    handler = _attach_log_file(run_dir)
    started = time.perf_counter()
    try:
        history, model = run()
        row = evaluate_model(model, datasets.test, DomainId.TARGET, spacing=datasets.spacing,
                             method=config.method.value)
        manifest.outputs = _write_run_outputs(run_dir, history, row)
        manifest.status = "completed"
        return row
    except Exception:
        manifest.status = "failed"
        raise
    finally:
        manifest.timings["total_seconds"] = round(time.perf_counter() - started, 3)
        manifest.finished_at = _now()
        _write_manifest(run_dir, manifest)
        logging.getLogger().removeHandler(handler)
        handler.close()


def cmd_train(args) -> int:
    config = _load_config(args)
    datasets = load_datasets(config.data, config.arch.n_classes)
    run_dir = _run_dir(args, config)
    store = CheckpointStore(str(run_dir / "checkpoints"))

    def run():
        result = train(config, datasets, store)
        return result.history, result.best_model()

    row = _train_run(config, datasets, run_dir, run)
    print(f"{config.method.value}: test Dice {row.mean_dice:.2f} -> {run_dir}")
    return EXIT_OK


def _checkpoint_path(path: str, key: str = "best") -> Path:
    """Accept an archive or a run directory holding ``checkpoints/<key>.pt``."""
    candidate = Path(path)
    if candidate.is_dir():
        for name in (key, "final"):
            archive = candidate / "checkpoints" / f"{name}.pt"
            if archive.exists():
                return archive
        raise ConfigurationError(f"no checkpoint found under {candidate}")
    if not candidate.exists():
        raise ConfigurationError(f"checkpoint {candidate} does not exist")
    return candidate


def cmd_finetune(args) -> int:
    scope = FinetuneScope(args.scope)
    method = Method.FINETUNE_LAST if scope == FinetuneScope.LAST_BLOCK else Method.FINETUNE_ALL
    args.method = method.value
    config = _load_config(args)
    checkpoint = load_checkpoint(str(_checkpoint_path(args.checkpoint)))
    if checkpoint.get("method") not in (None, Method.BASELINE_SOURCE.value):
        logger.warning("fine-tuning a %s checkpoint; expected baseline_source", checkpoint["method"])
    pretrained, _ = restore_checkpoint(checkpoint)
    datasets = load_datasets(config.data, pretrained.arch.n_classes)
    run_dir = _run_dir(args, config)

    def run():
        history = TrainHistory()
        model = finetune(pretrained, scope, datasets.target_labeled, config, history=history)
        save_checkpoint(build_checkpoint(model, None, len(history.rows), method.value),
                        str(run_dir / "finetuned.pt"))
        return history, model

    row = _train_run(config, datasets, run_dir, run)
    print(f"{method.value}: test Dice {row.mean_dice:.2f} -> {run_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    student, _ = restore_checkpoint(load_checkpoint(str(_checkpoint_path(args.checkpoint))))
    datasets = load_datasets(config.data, student.arch.n_classes)
    row = evaluate_model(student, datasets.test, DomainId.TARGET, spacing=datasets.spacing,
                         method=args.label or Path(args.checkpoint).stem)
    checkpoint_arg = Path(args.checkpoint)
    out = Path(args.out) if args.out else (checkpoint_arg if checkpoint_arg.is_dir() else checkpoint_arg.parent)
    out.mkdir(parents=True, exist_ok=True)
    target = out / METRICS
    if target.exists() and not args.force:
        raise ConfigurationError(f"{target} already exists; pass --force to overwrite")
    _write_json(target, row.model_dump(mode="json"))
    print(f"test Dice {row.mean_dice:.2f} over {row.n_cases} cases -> {target}")
    return EXIT_OK


def cmd_ablation(args) -> int:
    config = _load_config(args)
    datasets = load_datasets(config.data, config.arch.n_classes)
    label = "sda" if args.table == "sda" else "ablation"
    run_dir = _run_dir(args, config, label)
    handler = _attach_log_file(run_dir)
    try:
        harness = run_sda_comparison if args.table == "sda" else run_ablation
        rows = harness(config, datasets)
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()
    write_metrics(rows, str(run_dir / f"{label}.csv"), str(run_dir / f"{label}.txt"))
    print((run_dir / f"{label}.txt").read_text())
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _load_config(args)
    datasets = load_datasets(config.data, config.arch.n_classes)
    try:
        ratios = [float(r) for r in args.ratios.split(",")]
        methods = [Method(m) for m in args.methods.split(",")]
    except ValueError as e:
        raise ConfigurationError(f"invalid sweep arguments: {e}") from e
    run_dir = _run_dir(args, config, "sweep")
    handler = _attach_log_file(run_dir)
    try:
        rows = run_ratio_sweep(config, datasets, ratios, methods)
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()
    write_curve(rows, str(run_dir / "sweep.csv"), str(run_dir / "sweep.txt"))
    plot_ratio_curves(rows, str(run_dir / "sweep.png"))
    print((run_dir / "sweep.txt").read_text())
    return EXIT_OK


def _run_overlays(run_dir: Path, out_dir: Path) -> int:
    manifest = json.loads((run_dir / MANIFEST).read_text())
    config = ExperimentConfig.model_validate(manifest["config"])
    student, _ = restore_checkpoint(load_checkpoint(str(_checkpoint_path(str(run_dir)))))
    datasets = load_datasets(config.data, student.arch.n_classes)
    images, _ = samples_to_tensors(datasets.test)
    predictions = predict_labels(student, images, DomainId.TARGET)
    paths = write_overlays([s.image for s in datasets.test], list(predictions),
                           [s.mask for s in datasets.test], [s.id for s in datasets.test],
                           student.arch.n_classes, str(out_dir))
    return len(paths)


def cmd_report(args) -> int:
    out = _prepare_dir(Path(args.out) if args.out else Path(get_settings().out_root) / "report",
                       args.force)
    rows: List[MetricsRow] = []
    for run in args.run_dirs:
        run_dir = Path(run)
        if (run_dir / METRICS).exists():
            rows.append(MetricsRow.model_validate_json((run_dir / METRICS).read_text()))
        if (run_dir / HISTORY).exists():
            history = pd.read_csv(run_dir / HISTORY)
            if not history.empty:
                plot_history(history, str(out / f"{run_dir.name}_losses.png"), run_dir.name)
        if (run_dir / "sweep.csv").exists():
            frame = pd.read_csv(run_dir / "sweep.csv")
            curve = [CurveRow(**record) for record in frame.to_dict(orient="records")]
            plot_ratio_curves(curve, str(out / f"{run_dir.name}_sweep.png"))
        if args.overlays and (run_dir / MANIFEST).exists() and (run_dir / "checkpoints").is_dir():
            n = _run_overlays(run_dir, out / "overlays" / run_dir.name)
            logger.info("%s: %d overlay images", run_dir.name, n)
    if not rows:
        raise ConfigurationError("none of the run directories holds metrics.json")
    consistent = write_metrics(rows, str(out / "report.csv"), str(out / "report.txt"))
    print((out / "report.txt").read_text())
    if not consistent:
        print("warning: runs disagree on the test set", file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser and error boundary
# --------------------------------------------------------------------------

def _common(parser: argparse.ArgumentParser, training: bool = True) -> None:
    parser.add_argument("--config", default=None, help="Experiment YAML (default: CADASEG_CONFIG_PATH)")
    parser.add_argument("--out", default=None, help="Output directory")
    parser.add_argument("--force", action="store_true", help="Overwrite existing outputs")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="Dotted config override, repeatable")
    if training:
        parser.add_argument("--iters", type=int, default=None, help="Override schedule.k_max")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cadaseg",
                                     description="Semi-supervised cross-anatomy domain adaptation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="Write a synthetic two-domain dataset")
    _common(p, training=False)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("train", help="Train one method")
    _common(p)
    p.add_argument("--method", choices=[m.value for m in Method], default=None)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("finetune", help="Fine-tune a source-trained checkpoint on labeled target images")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="Archive or run directory")
    p.add_argument("--scope", choices=[s.value for s in FinetuneScope], default="all")
    p.set_defaults(handler=cmd_finetune)

    p = sub.add_parser("evaluate", help="Evaluate a checkpoint on the test split")
    _common(p, training=False)
    p.add_argument("--checkpoint", required=True, help="Archive or run directory")
    p.add_argument("--label", default=None, help="Method name in the metrics row")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("ablation", help="Train and compare the method variants")
    _common(p)
    p.add_argument("--table", choices=["ablation", "sda"], default="ablation")
    p.set_defaults(handler=cmd_ablation)

    p = sub.add_parser("sweep", help="Mean Dice against the labeled target ratio")
    _common(p)
    p.add_argument("--ratios", default="0.05,0.1,0.3,0.5")
    p.add_argument("--methods", default=Method.CS_CADA.value)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("report", help="Merge run directories into tables and plots")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.add_argument("--overlays", action="store_true", help="Render test-case overlays")
    p.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=get_settings().log_level.upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except ConfigFileError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG_FILE
    except (ConfigurationError, ParameterError, InputError, ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as e:
        logger.error("training diverged: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (CadaSegError, RuntimeError, OSError) as e:
        logger.exception("command failed")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
