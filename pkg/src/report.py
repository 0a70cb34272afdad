"""Comparison tables, training curves, ratio curves and segmentation overlays."""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from PIL import Image  # noqa: E402

from src.evaluation import boundary  # noqa: E402
from src.models import CurveRow, DomainDatasets, MetricsRow  # noqa: E402

logger = logging.getLogger(__name__)

HASH_WARNING = "WARNING: rows were evaluated on different test sets; values are not comparable"

TP_COLOR = (0, 200, 0)
FN_COLOR = (230, 0, 0)
FP_COLOR = (255, 150, 0)
BOUNDARY_COLOR = (255, 255, 0)


def _fmt(stat) -> str:
    return "" if stat is None else f"{stat.mean:.2f} ± {stat.sd:.2f}"


def metrics_frame(rows: Sequence[MetricsRow]) -> pd.DataFrame:
    """One line per (method, class); numeric means and sds in separate columns."""
    records = []
    for row in rows:
        for name, m in row.classes.items():
            records.append({
                "method": row.method,
                "class": name,
                "n_cases": row.n_cases,
                "dice_mean": m.dice_pct.mean, "dice_sd": m.dice_pct.sd,
                "recall_mean": m.recall_pct.mean, "recall_sd": m.recall_pct.sd,
                "precision_mean": m.precision_pct.mean, "precision_sd": m.precision_pct.sd,
                "assd_mean": m.assd_mm.mean if m.assd_mm else np.nan,
                "assd_sd": m.assd_mm.sd if m.assd_mm else np.nan,
                "assd_missing": m.assd_missing,
                "test_set_hash": row.test_set_hash,
            })
    return pd.DataFrame.from_records(records)


def metrics_table(rows: Sequence[MetricsRow]) -> pd.DataFrame:
    """Printable table: one row per method, "mean ± sd" cells per class."""
    table: Dict[str, Dict[str, str]] = {}
    for row in rows:
        cells = table.setdefault(row.method, {})
        for name, m in row.classes.items():
            prefix = "avg" if name == "average" else f"c{name}"
            cells[f"{prefix} Dice"] = _fmt(m.dice_pct)
            cells[f"{prefix} Recall"] = _fmt(m.recall_pct)
            cells[f"{prefix} Precision"] = _fmt(m.precision_pct)
            cells[f"{prefix} ASSD"] = _fmt(m.assd_mm)
    return pd.DataFrame.from_dict(table, orient="index")


def hashes_consistent(rows: Sequence[MetricsRow]) -> bool:
    return len({row.test_set_hash for row in rows}) <= 1


def write_metrics(rows: Sequence[MetricsRow], csv_path: str, txt_path: str) -> bool:
    """Write the CSV and the aligned text table.

    Returns False (and puts a banner on top of the text table) when the rows
    come from different test sets.
    """
    consistent = hashes_consistent(rows)
    metrics_frame(rows).to_csv(csv_path, index=False)
    text = metrics_table(rows).to_string()
    if not consistent:
        logger.warning(HASH_WARNING)
        text = f"{HASH_WARNING}\n\n{text}"
    Path(txt_path).write_text(text + "\n")
    return consistent


def curve_frame(rows: Sequence[CurveRow]) -> pd.DataFrame:
    return pd.DataFrame.from_records([row.model_dump() for row in rows],
                                     columns=["method", "ratio", "n_labeled", "mean_dice", "upper_bound"])


def write_curve(rows: Sequence[CurveRow], csv_path: str, txt_path: str) -> None:
    frame = curve_frame(rows)
    frame.to_csv(csv_path, index=False)
    Path(txt_path).write_text(frame.to_string(index=False) + "\n")


# --------------------------------------------------------------------------
# Plots
# --------------------------------------------------------------------------

def plot_history(history: pd.DataFrame, path: str, title: Optional[str] = None) -> None:
    """Loss components against iteration."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for column in ("total", "l_sup", "l_unsup", "l_ct"):
        if column in history and history[column].abs().sum() > 0:
            ax.plot(history["iter"], history[column], label=column, linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title(title or "training losses")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ratio_curves(rows: Sequence[CurveRow], path: str) -> None:
    """Mean Dice against labeled ratio, one line per method, dashed upper bound."""
    frame = curve_frame(rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    for method, group in frame[~frame["upper_bound"]].groupby("method", sort=False):
        group = group.sort_values("ratio")
        ax.plot(group["ratio"] * 100, group["mean_dice"], marker="o", label=method)
    bound = frame[frame["upper_bound"]]
    if not bound.empty:
        ax.axhline(float(bound["mean_dice"].iloc[0]), linestyle="--", color="gray",
                   label="fully supervised")
    ax.set_xlabel("labeled target images (%)")
    ax.set_ylabel("mean Dice (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_domain_histograms(datasets: DomainDatasets, path: str, bins: int = 64) -> None:
    """Intensity histograms of source and target training images."""
    source = np.concatenate([s.image.ravel() for s in datasets.source_labeled])
    target = np.concatenate(
        [s.image.ravel() for s in list(datasets.target_labeled) + list(datasets.target_unlabeled)])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(source, bins=bins, range=(0, 1), alpha=0.6, density=True, label="source")
    ax.hist(target, bins=bins, range=(0, 1), alpha=0.6, density=True, label="target")
    ax.set_xlabel("intensity")
    ax.set_ylabel("density")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# --------------------------------------------------------------------------
# Overlays
# --------------------------------------------------------------------------

def overlay(image: np.ndarray, pred: np.ndarray, gt: np.ndarray, class_id: int = 1,
            alpha: float = 0.5) -> Image.Image:
    """RGB image of the input with TP/FN/FP pixels of ``class_id`` tinted and
    the predicted boundary drawn on top; same height and width as ``image``."""
    gray = (np.clip(image, 0.0, 1.0) * 255).astype(np.float64)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    p, g = pred == class_id, gt == class_id
    for selector, color in ((p & g, TP_COLOR), (~p & g, FN_COLOR), (p & ~g, FP_COLOR)):
        rgb[selector] = (1 - alpha) * rgb[selector] + alpha * np.asarray(color, dtype=np.float64)
    rgb[boundary(p)] = BOUNDARY_COLOR
    return Image.fromarray(rgb.round().astype(np.uint8))


def write_overlays(images: Sequence[np.ndarray], predictions: Sequence[np.ndarray],
                   masks: Sequence[np.ndarray], ids: Sequence[str], n_classes: int,
                   out_dir: str) -> List[str]:
    """One PNG per test case and foreground class."""
    directory = Path(out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for image, pred, mask, case_id in zip(images, predictions, masks, ids):
        for c in range(1, n_classes):
            path = directory / f"{case_id}_class{c}.png"
            overlay(image, pred, mask, c).save(path)
            paths.append(str(path))
    return paths
