"""Segmentation metrics and model evaluation on a test split."""

import logging
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy import ndimage

from src.data import datasets_fingerprint, samples_to_tensors
from src.errors import InputError, UndefinedMetricError
from src.models import ClassMetrics, DomainId, LabeledSample, MetricStat, MetricsRow

logger = logging.getLogger(__name__)

Spacing = Union[float, Tuple[float, float]]

# 4-neighbourhood
_CROSS = ndimage.generate_binary_structure(2, 1)


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise InputError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return pred, gt


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P∩G| / (|P|+|G|) in percent; 100 when both masks are empty."""
    pred, gt = _check_pair(pred, gt)
    denominator = int(pred.sum()) + int(gt.sum())
    if denominator == 0:
        return 100.0
    return 200.0 * int(np.logical_and(pred, gt).sum()) / denominator


def recall_precision(pred: np.ndarray, gt: np.ndarray) -> Tuple[float, float]:
    """(TP/(TP+FN), TP/(TP+FP)) in percent; 100 for a zero denominator."""
    pred, gt = _check_pair(pred, gt)
    tp = int(np.logical_and(pred, gt).sum())
    fn = int(np.logical_and(~pred, gt).sum())
    fp = int(np.logical_and(pred, ~gt).sum())
    recall = 100.0 if tp + fn == 0 else 100.0 * tp / (tp + fn)
    precision = 100.0 if tp + fp == 0 else 100.0 * tp / (tp + fp)
    return recall, precision


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour.

    Pixels outside the image count as background.
    """
    mask = np.asarray(mask).astype(bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def _directed_mean(from_border: np.ndarray, to_border: np.ndarray, spacing: Spacing) -> float:
    distances = ndimage.distance_transform_edt(~to_border, sampling=spacing)
    return float(distances[from_border].mean())


def assd(pred: np.ndarray, gt: np.ndarray, spacing: Spacing = 1.0) -> float:
    """Average symmetric surface distance in mm.

    The mean boundary-to-boundary distance from pred to gt and from gt to
    pred, averaged.
    """
    pred, gt = _check_pair(pred, gt)
    if not pred.any() or not gt.any():
        raise UndefinedMetricError("ASSD is undefined for an empty mask")
    border_pred, border_gt = boundary(pred), boundary(gt)
    forward = _directed_mean(border_pred, border_gt, spacing)
    backward = _directed_mean(border_gt, border_pred, spacing)
    return 0.5 * (forward + backward)


def predict_labels(model, images: torch.Tensor, domain: DomainId = DomainId.TARGET,
                   batch_size: int = 8) -> np.ndarray:
    """Per-pixel argmax labels (ties go to the lowest class id), N x H x W."""
    was_training = model.training
    model.eval()
    labels = []
    try:
        with torch.no_grad():
            for start in range(0, images.shape[0], batch_size):
                probs = model.segment(images[start:start + batch_size], domain)
                labels.append(probs.argmax(dim=1).cpu().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(labels, axis=0)


def case_metrics(pred: np.ndarray, gt: np.ndarray, n_classes: int, spacing: Spacing = 1.0,
                 with_assd: bool = True) -> Dict[int, Dict[str, Optional[float]]]:
    """Metrics of every foreground class of one case."""
    out: Dict[int, Dict[str, Optional[float]]] = {}
    for c in range(1, n_classes):
        p, g = pred == c, gt == c
        recall, precision = recall_precision(p, g)
        distance = None
        if with_assd:
            try:
                distance = assd(p, g, spacing)
            except UndefinedMetricError:
                distance = None
        out[c] = {"dice": dice(p, g), "recall": recall, "precision": precision, "assd": distance}
    return out


def _stat(values: Sequence[float]) -> MetricStat:
    arr = np.asarray(values, dtype=np.float64)
    return MetricStat(mean=float(arr.mean()), sd=float(arr.std()))


def _aggregate(per_case: List[Dict[str, Optional[float]]], with_assd: bool) -> ClassMetrics:
    distances = [case["assd"] for case in per_case if case["assd"] is not None]
    return ClassMetrics(
        dice_pct=_stat([case["dice"] for case in per_case]),
        recall_pct=_stat([case["recall"] for case in per_case]),
        precision_pct=_stat([case["precision"] for case in per_case]),
        assd_mm=_stat(distances) if with_assd and distances else None,
        assd_missing=(len(per_case) - len(distances)) if with_assd else 0,
    )


def evaluate_predictions(
    predictions: Sequence[np.ndarray],
    test_set: Sequence[LabeledSample],
    n_classes: int,
    spacing: Spacing = 1.0,
    with_assd: bool = True,
    method: str = "model",
) -> MetricsRow:
    """Per-case metrics aggregated as mean ± sd, per class and averaged.

    A case's averaged entry is the mean over foreground classes; its ASSD
    averages the classes where ASSD is defined and is missing when none is.
    """
    if len(test_set) == 0:
        raise InputError("cannot evaluate on an empty test set")
    if len(predictions) != len(test_set):
        raise InputError(f"{len(predictions)} predictions for {len(test_set)} test cases")

    per_class: Dict[int, List[Dict[str, Optional[float]]]] = {c: [] for c in range(1, n_classes)}
    averaged: List[Dict[str, Optional[float]]] = []
    for pred, sample in zip(predictions, test_set):
        metrics = case_metrics(np.asarray(pred), sample.mask, n_classes, spacing, with_assd)
        for c, values in metrics.items():
            per_class[c].append(values)
        distances = [v["assd"] for v in metrics.values() if v["assd"] is not None]
        averaged.append({
            "dice": float(np.mean([v["dice"] for v in metrics.values()])),
            "recall": float(np.mean([v["recall"] for v in metrics.values()])),
            "precision": float(np.mean([v["precision"] for v in metrics.values()])),
            "assd": float(np.mean(distances)) if distances else None,
        })

    classes = {str(c): _aggregate(values, with_assd) for c, values in per_class.items()}
    classes["average"] = _aggregate(averaged, with_assd)
    missing = classes["average"].assd_missing
    if missing:
        logger.warning("%s: ASSD undefined for %d of %d cases", method, missing, len(test_set))
    return MetricsRow(method=method, n_cases=len(test_set),
                      test_set_hash=datasets_fingerprint(test_set), classes=classes)


def evaluate_model(
    model,
    test_set: Sequence[LabeledSample],
    domain: DomainId = DomainId.TARGET,
    spacing: Spacing = 1.0,
    with_assd: bool = True,
    method: str = "model",
    batch_size: int = 8,
) -> MetricsRow:
    """Evaluate ``model`` in eval mode, routed through ``domain``."""
    if len(test_set) == 0:
        raise InputError("cannot evaluate on an empty test set")
    images, _ = samples_to_tensors(test_set)
    predictions = predict_labels(model, images, domain, batch_size)
    return evaluate_predictions(list(predictions), test_set, model.arch.n_classes, spacing,
                                with_assd, method)
