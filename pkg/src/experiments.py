"""Experiment harnesses: ablation table, supervised-adaptation comparison and
annotation-ratio sweep."""

import logging
from typing import Callable, List, Optional, Sequence, Tuple

from src.config import ExperimentConfig
from src.data import repartition_target
from src.errors import ConfigurationError
from src.evaluation import evaluate_model
from src.models import CurveRow, DomainDatasets, DomainId, Method, MetricsRow
from src.store import CheckpointStore
from src.trainer import TrainResult, train

logger = logging.getLogger(__name__)

ABLATION_ORDER = (
    Method.BASELINE_TARGET,
    Method.SEMT_ONLY,
    Method.DSBN_ONLY,
    Method.SS_CADA,
    Method.CS_CADA,
)

SDA_ORDER = (
    Method.BASELINE_SOURCE,
    Method.BASELINE_TARGET,
    Method.JOINT_TRAINING,
    Method.FINETUNE_LAST,
    Method.FINETUNE_ALL,
    Method.DSBN_ONLY,
    Method.CS_CADA,
)

StoreFactory = Callable[[Method], Optional[CheckpointStore]]


def train_and_evaluate(
    config: ExperimentConfig,
    datasets: DomainDatasets,
    store: Optional[CheckpointStore] = None,
) -> Tuple[TrainResult, MetricsRow]:
    """Train one method and evaluate its selected model on the test split."""
    result = train(config, datasets, store)
    row = evaluate_model(result.best_model(), datasets.test, DomainId.TARGET,
                         spacing=datasets.spacing, method=config.method.value)
    logger.info("%s: test Dice %.2f", config.method.value, row.mean_dice)
    return result, row


def _run_methods(
    base_config: ExperimentConfig,
    datasets: DomainDatasets,
    methods: Sequence[Method],
    store_factory: Optional[StoreFactory],
) -> List[MetricsRow]:
    rows = []
    for method in methods:
        config = base_config.with_overrides({"method": method.value})
        store = store_factory(method) if store_factory else None
        rows.append(train_and_evaluate(config, datasets, store)[1])
    hashes = {row.test_set_hash for row in rows}
    if len(hashes) != 1:
        raise ConfigurationError("methods were evaluated on different test sets")
    return rows


def run_ablation(
    base_config: ExperimentConfig,
    datasets: DomainDatasets,
    store_factory: Optional[StoreFactory] = None,
) -> List[MetricsRow]:
    """baseline_target, semt_only, dsbn_only, ss_cada and cs_cada with the same
    seed and architecture, in that order."""
    return _run_methods(base_config, datasets, ABLATION_ORDER, store_factory)


def run_sda_comparison(
    base_config: ExperimentConfig,
    datasets: DomainDatasets,
    store_factory: Optional[StoreFactory] = None,
) -> List[MetricsRow]:
    """Supervised adaptation baselines against the full method."""
    return _run_methods(base_config, datasets, SDA_ORDER, store_factory)


def run_ratio_sweep(
    base_config: ExperimentConfig,
    datasets: DomainDatasets,
    ratios: Sequence[float],
    methods: Sequence[Method] = (Method.CS_CADA,),
) -> List[CurveRow]:
    """Mean test Dice per (ratio, method), plus one fully supervised upper bound.

    Every ratio re-partitions the target training images deterministically
    from the config seed.
    """
    if not ratios:
        raise ConfigurationError("ratio sweep needs at least one ratio")
    for ratio in ratios:
        if not 0.0 < ratio <= 1.0:
            raise ConfigurationError(f"ratio must be in (0, 1], got {ratio}")

    rows: List[CurveRow] = []
    for ratio in ratios:
        split = repartition_target(datasets, ratio, base_config.seed)
        for method in methods:
            config = base_config.with_overrides({"method": Method(method).value})
            _, metrics = train_and_evaluate(config, split)
            rows.append(CurveRow(method=config.method.value, ratio=ratio,
                                 n_labeled=len(split.target_labeled), mean_dice=metrics.mean_dice))

    full = repartition_target(datasets, 1.0, base_config.seed)
    config = base_config.with_overrides({"method": Method.BASELINE_TARGET.value})
    _, metrics = train_and_evaluate(config, full)
    rows.append(CurveRow(method=config.method.value, ratio=1.0, n_labeled=len(full.target_labeled),
                         mean_dice=metrics.mean_dice, upper_bound=True))
    return rows
