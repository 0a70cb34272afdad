import numpy as np
import pandas as pd
import pytest
import torch

from src.data import batch_to_tensors, compose_batch
from src.errors import ConfigurationError, InputError, ParameterError, TrainingDivergedError
from src.mean_teacher import TeacherState, consistency_weight
from src.models import DomainId
from src.network import build_model
from src.trainer import (
    HISTORY_COLUMNS,
    METHODS,
    finetune,
    history_frame,
    lr_schedule,
    make_optimizer,
    method_layout,
    train,
    train_step,
    write_history_csv,
)


def _batch(config, datasets, seed=0):
    rng = np.random.default_rng(seed)
    batch = compose_batch(datasets.source_labeled, datasets.target_labeled,
                          datasets.target_unlabeled, method_layout(config), rng)
    return batch_to_tensors(batch, rng, config.data.augment)


def _setup(config):
    student = build_model(config.arch, config.seed)
    teacher = TeacherState.from_student(student) if METHODS[config.method].mean_teacher else None
    return student, teacher, make_optimizer(student.parameters(), config)


def _state(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


class TestLrSchedule:

    def test_values(self):
        assert lr_schedule(0, 5e-4, 0.95, 1000) == 5e-4
        assert lr_schedule(999, 5e-4, 0.95, 1000) == 5e-4
        assert lr_schedule(1000, 5e-4, 0.95, 1000) == pytest.approx(4.75e-4)
        assert lr_schedule(20_000, 5e-4, 0.95, 1000) == pytest.approx(5e-4 * 0.95 ** 20)

    def test_no_decay(self):
        assert {lr_schedule(k, 1e-3, 1.0, 10) for k in range(0, 200, 7)} == {1e-3}


class TestTrainStep:
    """Single optimization steps and loss-term gating."""

    def test_baseline_target_gating(self, tiny_config, small_datasets, monkeypatch):
        config = tiny_config.with_overrides({"method": "baseline_target"})
        student, teacher, optimizer = _setup(config)
        domains = []
        segment = student.segment

        def recording_segment(x, domain):
            domains.append(DomainId(domain))
            return segment(x, domain)

        monkeypatch.setattr(student, "segment", recording_segment)
        row = train_step(_batch(config, small_datasets), student, teacher, optimizer, config, 0)
        assert row.l_unsup == 0.0 and row.l_ct == 0.0
        assert row.lambda1 == 0.0 and row.lambda2 == 0.0
        assert domains == [DomainId.TARGET]
        assert row.total == pytest.approx(row.l_sup)

    def test_forbidden_pool_in_batch(self, tiny_config, small_datasets):
        config = tiny_config.with_overrides({"method": "baseline_target"})
        student, teacher, optimizer = _setup(config)
        with pytest.raises(ConfigurationError):
            train_step(_batch(tiny_config, small_datasets), student, teacher, optimizer, config, 0)

    def test_full_ramp_at_end(self, tiny_config, small_datasets):
        student, teacher, optimizer = _setup(tiny_config)
        k = tiny_config.schedule.k_max
        row = train_step(_batch(tiny_config, small_datasets), student, teacher, optimizer,
                         tiny_config, k)
        assert row.consistency_weight == consistency_weight(k, k)
        assert row.consistency_weight == pytest.approx(0.1)
        assert row.lambda1 == pytest.approx(0.1 * tiny_config.loss.lambda1)
        assert row.lambda2 == tiny_config.loss.lambda2
        assert row.l_unsup >= 0 and row.l_ct > 0

    def test_teacher_untouched_without_update(self, tiny_config, small_datasets):
        student, teacher, optimizer = _setup(tiny_config)
        before = _state(teacher.model)
        train_step(_batch(tiny_config, small_datasets), student, teacher, optimizer, tiny_config, 1,
                   update_teacher=False)
        for k, v in teacher.model.state_dict().items():
            assert torch.equal(v, before[k])
        assert all(p.grad is None for p in teacher.model.parameters())

    def test_teacher_follows_student(self, tiny_config, small_datasets):
        student, teacher, optimizer = _setup(tiny_config)
        train_step(_batch(tiny_config, small_datasets), student, teacher, optimizer, tiny_config, 1)
        assert teacher.iteration == 1
        weight = teacher.model.inc.conv1.weight
        assert not torch.equal(weight, student.inc.conv1.weight)

    def test_contrastive_keeps_statistics_per_domain(self, tiny_config, small_datasets):
        """Only the matching-domain segmentation forwards touch running statistics."""
        config = tiny_config.with_overrides({"method": "dsbn_only"})
        batch = _batch(tiny_config, small_datasets)
        with_ct, teacher, optimizer = _setup(tiny_config)
        without_ct, _, optimizer_b = _setup(config)
        train_step(batch, with_ct, teacher, optimizer, tiny_config, 0)
        batch.unlabeled_images = None
        train_step(batch, without_ct, None, optimizer_b, config, 0)
        layer_a = with_ct.dsbn_layers()["inc.norm1"]
        layer_b = without_ct.dsbn_layers()["inc.norm1"]
        assert torch.equal(layer_a.running_mean_S, layer_b.running_mean_S)

    def test_divergence(self, tiny_config, small_datasets, monkeypatch):
        config = tiny_config.with_overrides({"method": "baseline_target"})
        student, teacher, optimizer = _setup(config)
        monkeypatch.setattr("src.trainer.supervised_loss",
                            lambda *a, **kw: torch.tensor(float("nan"), requires_grad=True))
        with pytest.raises(TrainingDivergedError, match="l_sup"):
            train_step(_batch(config, small_datasets), student, teacher, optimizer, config, 3)


class TestTrain:
    """Whole training runs on the tiny synthetic task."""

    def test_loss_decomposition(self, tiny_config, small_datasets):
        result = train(tiny_config, small_datasets)
        k_max = tiny_config.schedule.k_max
        assert [r.iteration for r in result.history.rows] == list(range(k_max))
        for row in result.history.rows:
            expected = row.l_sup + row.lambda1 * row.l_unsup + row.lambda2 * row.l_ct
            assert row.total == pytest.approx(expected, abs=1e-6)
            assert row.lambda1 == pytest.approx(
                tiny_config.loss.lambda1 * consistency_weight(row.iteration, k_max))

    def test_deterministic(self, tiny_config, small_datasets, tmp_path):
        paths = []
        for run in range(2):
            result = train(tiny_config, small_datasets)
            path = tmp_path / f"history_{run}.csv"
            write_history_csv(result.history, str(path))
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_no_iterations(self, tiny_config, small_datasets):
        config = tiny_config.with_overrides({"schedule.k_max": 0})
        result = train(config, small_datasets)
        assert result.history.rows == []
        fresh = build_model(config.arch, config.seed)
        for k, v in fresh.state_dict().items():
            assert torch.equal(result.student.state_dict()[k], v)

    @pytest.mark.parametrize("method,unread", [
        ("baseline_source", ["target_labeled", "target_unlabeled"]),
        ("baseline_target", ["source_labeled", "target_unlabeled"]),
        ("semt_only", ["source_labeled"]),
        ("dsbn_only", ["target_unlabeled"]),
        ("cs_cada", []),
    ])
    def test_forbidden_pools_never_read(self, tiny_config, small_datasets, method, unread):
        config = tiny_config.with_overrides({"method": method, "schedule.k_max": 2})
        reads = train(config, small_datasets).history.pool_reads
        for name, count in reads.items():
            if name in unread:
                assert count == 0
            else:
                assert count > 0

    def test_empty_pool_rejected(self, tiny_config, small_datasets):
        datasets = small_datasets.model_copy(update={"target_unlabeled": []})
        with pytest.raises(ConfigurationError, match="target_unlabeled"):
            train(tiny_config, datasets)

    def test_small_quota_rejected(self, tiny_config, small_datasets):
        config = tiny_config.with_overrides({"method": "baseline_target",
                                             "batch_layout.n_target_labeled": 1})
        with pytest.raises(ConfigurationError):
            train(config, small_datasets)

    def test_class_count_mismatch(self, tiny_config, small_datasets):
        config = tiny_config.with_overrides({"arch.n_classes": 2})
        with pytest.raises(ConfigurationError, match="classes"):
            train(config, small_datasets)

    def test_best_checkpoint(self, tiny_config, small_datasets):
        result = train(tiny_config, small_datasets)
        assert [v.iteration for v in result.history.validation] == [2, 4]
        assert result.best_checkpoint is not None
        assert result.best_checkpoint["iteration"] == result.history.best_iteration
        assert result.best_model() is not result.student

    def test_finetune_method_history(self, tiny_config, small_datasets):
        config = tiny_config.with_overrides({"method": "finetune_all"})
        history = train(config, small_datasets).history
        iterations = [r.iteration for r in history.rows]
        assert iterations == list(range(4 + config.train.finetune_iterations))

    def test_finetune_method_selects_finetuned_model(self, tiny_config, small_datasets):
        config = tiny_config.with_overrides({"method": "finetune_last"})
        result = train(config, small_datasets)
        final_iteration = 4 + config.train.finetune_iterations
        assert [v.iteration for v in result.history.validation] == [2, 4, final_iteration]
        assert result.history.validation[-1].is_best
        assert result.history.best_iteration == final_iteration
        assert result.best_checkpoint["iteration"] == final_iteration
        x = torch.rand(2, 1, 16, 16, generator=torch.Generator().manual_seed(0))
        best = result.best_model().eval()
        assert torch.equal(best.segment(x, DomainId.TARGET),
                           result.student.eval().segment(x, DomainId.TARGET))

    def test_finetune_without_validation_keeps_no_pretraining_best(self, tiny_config, small_datasets):
        datasets = small_datasets.model_copy(update={"validation": []})
        result = train(tiny_config.with_overrides({"method": "finetune_all"}), datasets)
        assert result.best_checkpoint is None
        assert result.best_model() is result.student

    def test_history_csv(self, tiny_config, small_datasets, tmp_path):
        result = train(tiny_config, small_datasets)
        path = tmp_path / "history.csv"
        write_history_csv(result.history, str(path))
        frame = pd.read_csv(path)
        assert list(frame.columns) == HISTORY_COLUMNS
        assert len(frame) == tiny_config.schedule.k_max
        assert frame["iter"].tolist() == history_frame(result.history)["iter"].tolist()


class TestFinetune:
    """Fine-tuning a source-pretrained network on labeled target images."""

    def test_last_block_freezes_encoder(self, tiny_config, small_datasets):
        pretrained = build_model(tiny_config.arch, seed=0)
        tuned = finetune(pretrained, "last_block", small_datasets.target_labeled, tiny_config)
        frozen = ("inc.", "down.")
        changed = False
        for k, v in tuned.state_dict().items():
            original = pretrained.state_dict()[k]
            if k.startswith(frozen):
                assert torch.equal(v, original), k
            elif k.startswith("classifier."):
                changed = changed or not torch.equal(v, original)
        assert changed

    def test_original_untouched(self, tiny_config, small_datasets):
        pretrained = build_model(tiny_config.arch, seed=0)
        before = _state(pretrained)
        finetune(pretrained, "all", small_datasets.target_labeled, tiny_config)
        for k, v in pretrained.state_dict().items():
            assert torch.equal(v, before[k])

    def test_zero_iterations_identity(self, tiny_config, small_datasets):
        config = tiny_config.with_overrides({"train.finetune_iterations": 0})
        pretrained = build_model(config.arch, seed=0)
        tuned = finetune(pretrained, "all", small_datasets.target_labeled, config)
        for k, v in tuned.state_dict().items():
            assert torch.equal(v, pretrained.state_dict()[k])

    def test_all_parameters_trainable_afterwards(self, tiny_config, small_datasets):
        tuned = finetune(build_model(tiny_config.arch), "last_block",
                         small_datasets.target_labeled, tiny_config)
        assert all(p.requires_grad for p in tuned.parameters())

    def test_unknown_scope(self, tiny_config, small_datasets):
        with pytest.raises(ParameterError):
            finetune(build_model(tiny_config.arch), "middle", small_datasets.target_labeled,
                     tiny_config)

    def test_no_target_labels(self, tiny_config):
        with pytest.raises(InputError):
            finetune(build_model(tiny_config.arch), "all", [], tiny_config)
