"""Optimization loop for the full method, its ablations and the baselines."""

import copy
import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Union

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from src.config import ExperimentConfig
from src.data import SamplePool, TensorBatch, batch_to_tensors, compose_batch
from src.errors import ConfigurationError, InputError, ParameterError, TrainingDivergedError
from src.evaluation import evaluate_model
from src.losses import (
    consistency_loss,
    contrastive_loss,
    seg_loss,
    supervised_loss,
    total_loss,
    weighted_total,
)
from src.mean_teacher import TeacherState, consistency_weight, ema_update, perturb
from src.models import (
    BatchLayout,
    DomainDatasets,
    DomainId,
    FinetuneScope,
    LossBreakdown,
    Method,
    TrainHistory,
)
from src.network import DsbnUNet, build_checkpoint, build_model, frozen_statistics, restore_checkpoint
from src.store import CheckpointStore

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["iter", "l_sup", "l_unsup", "l_ct", "total", "lr", "consistency_weight",
                   "lambda1", "lambda2"]


@dataclass(frozen=True)
class MethodSpec:
    """Which pools, normalization routing and loss terms a method uses."""
    uses_source: bool
    uses_target_labeled: bool
    uses_unlabeled: bool
    dsbn: bool
    mean_teacher: bool
    contrastive: bool
    finetune: Optional[FinetuneScope] = None


METHODS: Dict[Method, MethodSpec] = {
    Method.BASELINE_SOURCE: MethodSpec(True, False, False, False, False, False),
    Method.BASELINE_TARGET: MethodSpec(False, True, False, False, False, False),
    Method.JOINT_TRAINING: MethodSpec(True, True, False, False, False, False),
    Method.FINETUNE_LAST: MethodSpec(True, False, False, False, False, False,
                                     FinetuneScope.LAST_BLOCK),
    Method.FINETUNE_ALL: MethodSpec(True, False, False, False, False, False, FinetuneScope.ALL),
    Method.DSBN_ONLY: MethodSpec(True, True, False, True, False, False),
    Method.SEMT_ONLY: MethodSpec(False, True, True, False, True, False),
    Method.SS_CADA: MethodSpec(True, True, True, True, True, False),
    Method.CS_CADA: MethodSpec(True, True, True, True, True, True),
}


def route(spec: MethodSpec, domain: DomainId) -> DomainId:
    """Normalization set used for ``domain``; without DSBN everything shares
    the target set, which is also the inference set."""
    return domain if spec.dsbn else DomainId.TARGET


def lr_schedule(k: int, lr0: float, decay: float, step: int) -> float:
    """lr0 * decay ** floor(k / step)."""
    return lr0 * decay ** (k // step)


def method_layout(config: ExperimentConfig) -> BatchLayout:
    """Configured layout with the quotas of forbidden pools set to zero."""
    spec = METHODS[config.method]
    layout = config.batch_layout
    return BatchLayout(
        n_source_labeled=layout.n_source_labeled if spec.uses_source else 0,
        n_target_labeled=layout.n_target_labeled if spec.uses_target_labeled else 0,
        n_target_unlabeled=layout.n_target_unlabeled if spec.uses_unlabeled else 0,
    )


def check_requirements(config: ExperimentConfig, datasets: DomainDatasets) -> None:
    """Fail before training when the data cannot serve the method."""
    spec = METHODS[config.method]
    layout = method_layout(config)
    needs = [
        ("source_labeled", spec.uses_source, layout.n_source_labeled),
        ("target_labeled", spec.uses_target_labeled, layout.n_target_labeled),
        ("target_unlabeled", spec.uses_unlabeled, layout.n_target_unlabeled),
    ]
    for name, used, quota in needs:
        if not used:
            continue
        if len(getattr(datasets, name)) == 0:
            raise ConfigurationError(f"{config.method.value} needs a non-empty {name} pool")
        if quota < 2:
            raise ConfigurationError(
                f"{config.method.value} needs at least 2 {name} images per batch, got {quota}")
    if spec.finetune is not None and not datasets.target_labeled:
        raise ConfigurationError(f"{config.method.value} fine-tunes on target_labeled, which is empty")
    if datasets.n_classes != config.arch.n_classes:
        raise ConfigurationError(
            f"data has {datasets.n_classes} classes but arch.n_classes is {config.arch.n_classes}")


def _check_batch(spec: MethodSpec, batch: TensorBatch) -> None:
    present = {
        "source_labeled": batch.source_images is not None,
        "target_labeled": batch.target_images is not None,
        "target_unlabeled": batch.unlabeled_images is not None,
    }
    allowed = {
        "source_labeled": spec.uses_source,
        "target_labeled": spec.uses_target_labeled,
        "target_unlabeled": spec.uses_unlabeled,
    }
    for name in present:
        if present[name] != allowed[name]:
            state = "present" if present[name] else "missing"
            raise ConfigurationError(f"batch pool {name} is {state} for this method")


def make_optimizer(params, config: ExperimentConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=config.schedule.lr0, betas=tuple(config.optim.betas),
                            eps=config.optim.eps)


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for param_group in optimizer.param_groups:
        param_group["lr"] = lr


def train_step(
    batch: TensorBatch,
    student: DsbnUNet,
    teacher: Optional[TeacherState],
    optimizer: torch.optim.Optimizer,
    config: ExperimentConfig,
    k: int,
    generator: Optional[torch.Generator] = None,
    update_teacher: bool = True,
) -> LossBreakdown:
    """One optimization step.

    Disabled loss terms contribute exactly zero and run no forward pass.
    """
    spec = METHODS[config.method]
    _check_batch(spec, batch)
    student.train()
    schedule = config.schedule
    lr = lr_schedule(k, schedule.lr0, schedule.lr_decay, schedule.lr_step)
    _set_lr(optimizer, lr)
    seg_kwargs = dict(ce_weight=config.loss.ce_weight, dice_weight=config.loss.dice_weight,
                      smooth=config.loss.dice_smooth)

    source_preds = target_preds = None
    if spec.uses_source:
        source_preds = student.segment(batch.source_images, route(spec, DomainId.SOURCE))
    if spec.uses_target_labeled:
        target_preds = student.segment(batch.target_images, route(spec, DomainId.TARGET))
    l_sup = supervised_loss(source_preds, batch.source_masks, target_preds, batch.target_masks,
                            **seg_kwargs)
    zero = torch.zeros((), dtype=l_sup.dtype)

    ramp, l_unsup, lambda1 = 0.0, zero, 0.0
    if spec.mean_teacher:
        if teacher is None:
            raise ConfigurationError(f"{config.method.value} needs a teacher model")
        mt = config.mean_teacher
        ramp = consistency_weight(k, max(schedule.k_max, 1), mt.ramp_scale, mt.ramp_sharpness)
        lambda1 = config.loss.lambda1 * ramp
        x_student = perturb(batch.unlabeled_images, generator, mt.noise_sigma)
        x_teacher = perturb(batch.unlabeled_images, generator, mt.noise_sigma)
        p_student = student.segment(x_student, DomainId.TARGET)
        p_teacher = teacher.predict(x_teacher, DomainId.TARGET)
        l_unsup = consistency_loss(p_student, p_teacher)

    l_ct, lambda2 = zero, 0.0
    if spec.contrastive:
        n = min(batch.source_images.shape[0], batch.target_images.shape[0])
        x_i, x_j = batch.source_images[:n], batch.target_images[:n]
        # Cross-routed forwards must not leak statistics into the other domain
        with frozen_statistics(student):
            g_s_i = student.project(x_i, DomainId.SOURCE)
            g_t_i = student.project(x_i, DomainId.TARGET)
            g_s_j = student.project(x_j, DomainId.SOURCE)
            g_t_j = student.project(x_j, DomainId.TARGET)
        l_ct = contrastive_loss(g_s_i, g_t_i, g_s_j, g_t_j, config.loss.tau)
        lambda2 = config.loss.lambda2

    total = weighted_total(l_sup, l_unsup, l_ct, lambda1, lambda2)
    if not torch.isfinite(total):
        raise TrainingDivergedError(k, {
            "l_sup": float(l_sup.detach()), "l_unsup": float(l_unsup.detach()),
            "l_ct": float(l_ct.detach()), "lambda1": lambda1, "lambda2": lambda2, "lr": lr,
        })

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()

    if spec.mean_teacher and update_teacher:
        ema_update(teacher, student, config.mean_teacher.ema_decay)

    return total_loss(l_sup, l_unsup, l_ct, lambda1, lambda2, iteration=k,
                      consistency_weight=ramp, lr=lr)


@dataclass
class TrainResult:
    """Models and records of one training run."""
    student: DsbnUNet
    teacher: Optional[TeacherState]
    history: TrainHistory
    best_checkpoint: Optional[Dict[str, Any]] = None

    def best_model(self) -> DsbnUNet:
        """Student selected on validation Dice, or the final student."""
        if self.best_checkpoint is None:
            return self.student
        return restore_checkpoint(self.best_checkpoint)[0]


class Trainer:
    """Runs one experiment configuration on a set of datasets."""

    def __init__(self, config: ExperimentConfig, datasets: DomainDatasets,
                 store: Optional[CheckpointStore] = None):
        self.config = config
        self.datasets = datasets
        self.spec = METHODS[config.method]
        self.store = store or CheckpointStore()
        self.pools = {
            "source_labeled": SamplePool(datasets.source_labeled, "source_labeled"),
            "target_labeled": SamplePool(datasets.target_labeled, "target_labeled"),
            "target_unlabeled": SamplePool(datasets.target_unlabeled, "target_unlabeled"),
        }

    def _validate(self, student: DsbnUNet, teacher: Optional[TeacherState],
                  history: TrainHistory, iteration: int) -> None:
        if not self.datasets.validation:
            return
        row = evaluate_model(student, self.datasets.validation, DomainId.TARGET,
                             spacing=self.datasets.spacing, with_assd=False,
                             method=self.config.method.value)
        if history.record_validation(iteration, row.mean_dice):
            self.store.set("best", build_checkpoint(
                student, teacher.model if teacher else None, iteration, self.config.method.value))
        last = history.rows[-1] if history.rows else None
        if last is not None:
            logger.info("iter %d: l_sup %.4f l_unsup %.4f l_ct %.4f total %.4f", iteration,
                        last.l_sup, last.l_unsup, last.l_ct, last.total)
        logger.info("iter %d: validation Dice %.2f (best %.2f @ %s)", iteration, row.mean_dice,
                    history.best_dice, history.best_iteration)

    def run(self) -> TrainResult:
        config = self.config
        check_requirements(config, self.datasets)
        layout = method_layout(config)
        for name, quota in (("source_labeled", layout.n_source_labeled),
                            ("target_labeled", layout.n_target_labeled),
                            ("target_unlabeled", layout.n_target_unlabeled)):
            if 0 < len(self.pools[name]) < quota:
                logger.warning("%s holds %d images for a quota of %d; sampling with replacement",
                               name, len(self.pools[name]), quota)

        torch.manual_seed(config.seed)
        rng = np.random.default_rng(config.seed)
        generator = torch.Generator().manual_seed(config.seed)
        student = build_model(config.arch, config.seed, config.dsbn.eps, config.dsbn.momentum)
        teacher = (TeacherState.from_student(student, config.mean_teacher.ema_decay)
                   if self.spec.mean_teacher else None)
        optimizer = make_optimizer(student.parameters(), config)
        history = TrainHistory()

        k_max = config.schedule.k_max
        every = config.train.validate_every
        for k in tqdm(range(k_max), desc=config.method.value, disable=not config.train.show_progress):
            batch = compose_batch(self.pools["source_labeled"], self.pools["target_labeled"],
                                  self.pools["target_unlabeled"], layout, rng)
            tensors = batch_to_tensors(batch, rng, config.data.augment)
            try:
                row = train_step(tensors, student, teacher, optimizer, config, k, generator)
            except TrainingDivergedError as e:
                logger.error("Training diverged: %s", e)
                raise
            history.append(row)
            if (k + 1) % every == 0:
                self._validate(student, teacher, history, k + 1)

        if self.spec.finetune is not None and k_max > 0:
            # the reported model must be a fine-tuned one
            history.reset_best()
            self.store.delete("best")
            student = finetune(student, self.spec.finetune, self.pools["target_labeled"], config,
                               history=history, start_iteration=k_max)
            if self.datasets.validation:
                self._validate(student, None, history, len(history.rows))

        history.pool_reads = {name: pool.reads for name, pool in self.pools.items()}
        self.store.set("final", build_checkpoint(
            student, teacher.model if teacher else None, len(history.rows), config.method.value))
        return TrainResult(student=student, teacher=teacher, history=history,
                           best_checkpoint=self.store.get("best"))


def train(config: ExperimentConfig, datasets: DomainDatasets,
          store: Optional[CheckpointStore] = None) -> TrainResult:
    """Train ``config.method`` for k_max iterations (plus fine-tuning for the
    fine-tuning baselines)."""
    return Trainer(config, datasets, store).run()


def finetune(
    pretrained: DsbnUNet,
    scope: Union[FinetuneScope, str],
    target_labeled,
    config: ExperimentConfig,
    history: Optional[TrainHistory] = None,
    start_iteration: int = 0,
) -> DsbnUNet:
    """Fine-tune a copy of ``pretrained`` on labeled target images.

    With ``last_block`` only the last decoder block and the classifier are
    optimized; every other layer runs on its running statistics and keeps
    its parameters bit-identical.
    """
    try:
        scope = FinetuneScope(scope)
    except ValueError as e:
        raise ParameterError(f"unknown fine-tuning scope {scope!r}") from e
    if len(target_labeled) == 0:
        raise InputError("fine-tuning needs labeled target images")

    model = copy.deepcopy(pretrained)
    iterations = config.train.finetune_iterations
    if iterations == 0:
        return model

    trainable_norms = set()
    if scope == FinetuneScope.LAST_BLOCK:
        model.requires_grad_(False)
        for module in model.last_block_modules():
            module.requires_grad_(True)
            trainable_norms.update(id(m) for m in module.modules())
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = make_optimizer(params, config)

    rng = np.random.default_rng(config.seed + 1)
    layout = BatchLayout(n_source_labeled=0, n_target_labeled=config.train.finetune_batch_size,
                         n_target_unlabeled=0)
    seg_kwargs = dict(ce_weight=config.loss.ce_weight, dice_weight=config.loss.dice_weight,
                      smooth=config.loss.dice_smooth)
    schedule = config.schedule

    for k in range(iterations):
        model.train()
        if scope == FinetuneScope.LAST_BLOCK:
            for layer in model.dsbn_layers().values():
                if id(layer) not in trainable_norms:
                    layer.eval()
        lr = lr_schedule(k, schedule.lr0, schedule.lr_decay, schedule.lr_step)
        _set_lr(optimizer, lr)

        batch = batch_to_tensors(compose_batch([], target_labeled, [], layout, rng), rng,
                                 config.data.augment)
        loss = seg_loss(model.segment(batch.target_images, DomainId.TARGET), batch.target_masks,
                        **seg_kwargs)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(start_iteration + k, {"l_sup": float(loss.detach())})
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        if history is not None:
            history.append(total_loss(loss, 0.0, 0.0, 0.0, 0.0, iteration=start_iteration + k,
                                      consistency_weight=0.0, lr=lr))

    model.requires_grad_(True)
    return model


def history_frame(history: TrainHistory) -> pd.DataFrame:
    """Per-iteration loss table with the history CSV columns."""
    records = [{
        "iter": r.iteration, "l_sup": r.l_sup, "l_unsup": r.l_unsup, "l_ct": r.l_ct,
        "total": r.total, "lr": r.lr, "consistency_weight": r.consistency_weight,
        "lambda1": r.lambda1, "lambda2": r.lambda2,
    } for r in history.rows]
    return pd.DataFrame.from_records(records, columns=HISTORY_COLUMNS)


def write_history_csv(history: TrainHistory, path: str) -> None:
    history_frame(history).to_csv(path, index=False)
