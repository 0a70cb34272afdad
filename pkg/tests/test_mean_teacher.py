import pytest
import torch

from src.errors import ParameterError, StructureError
from src.mean_teacher import TeacherState, consistency_weight, ema_update, perturb
from src.network import build_model


def _max_gap(teacher, student):
    gaps = [(t - s).abs().max().item()
            for (_, t), (_, s) in zip(teacher.model.state_dict().items(), student.state_dict().items())
            if t.is_floating_point()]
    return max(gaps)


class TestEmaUpdate:
    """Teacher parameters follow the student by exponential moving average."""

    def test_fixed_point(self, tiny_model):
        teacher = TeacherState.from_student(tiny_model)
        before = {k: v.clone() for k, v in teacher.model.state_dict().items()}
        ema_update(teacher, tiny_model, decay=0.7)
        for k, v in teacher.model.state_dict().items():
            assert torch.equal(v, before[k])
        assert teacher.iteration == 1

    def test_zero_decay_copies_student(self, tiny_arch, tiny_model):
        teacher = TeacherState(build_model(tiny_arch, seed=5))
        ema_update(teacher, tiny_model, decay=0.0)
        for (_, t), (_, s) in zip(teacher.model.state_dict().items(), tiny_model.state_dict().items()):
            assert torch.equal(t, s)

    def test_single_scalar(self):
        teacher = TeacherState(torch.nn.Linear(1, 1, bias=False))
        student = torch.nn.Linear(1, 1, bias=False)
        with torch.no_grad():
            teacher.model.weight.fill_(0.0)
            student.weight.fill_(1.0)
        ema_update(teacher, student, decay=0.99)
        assert teacher.model.weight.item() == pytest.approx(0.01, rel=1e-6)

    def test_contraction(self, tiny_arch):
        """With a frozen student the gap shrinks by exactly the decay per step."""
        student = build_model(tiny_arch, seed=0).double()
        teacher = TeacherState(build_model(tiny_arch, seed=1).double(), decay=0.99)
        gap0 = _max_gap(teacher, student)
        for k in range(1, 51):
            ema_update(teacher, student)
            assert _max_gap(teacher, student) == pytest.approx(0.99 ** k * gap0, rel=1e-9)

    def test_teacher_not_trainable(self, tiny_model):
        teacher = TeacherState.from_student(tiny_model)
        assert not teacher.model.training
        assert not any(p.requires_grad for p in teacher.model.parameters())
        assert all(p.requires_grad for p in tiny_model.parameters())

    def test_structure_mismatch(self, tiny_model):
        other = build_model({"widths": [4, 8, 16], "n_classes": 3, "projection_hidden": 16,
                             "projection_dim": 8})
        with pytest.raises(StructureError):
            ema_update(TeacherState(other), tiny_model)

    def test_shape_mismatch(self, tiny_model):
        other = build_model({"widths": [6, 8], "n_classes": 3, "projection_hidden": 16,
                             "projection_dim": 8})
        with pytest.raises(StructureError):
            ema_update(TeacherState(other), tiny_model)

    @pytest.mark.parametrize("decay", [-0.1, 1.5])
    def test_decay_range(self, tiny_model, decay):
        with pytest.raises(ParameterError):
            ema_update(TeacherState.from_student(tiny_model), tiny_model, decay=decay)


class TestPerturb:

    def test_zero_sigma(self):
        x = torch.rand(2, 1, 8, 8)
        assert torch.equal(perturb(x, None, 0.0), x)

    def test_clipped(self):
        x = torch.rand(4, 1, 16, 16)
        out = perturb(x, torch.Generator().manual_seed(0), 0.5)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_noise_level(self):
        x = torch.full((100_000,), 0.5, dtype=torch.float64)
        out = perturb(x, torch.Generator().manual_seed(0), 0.05)
        assert (out - x).std().item() == pytest.approx(0.05, rel=0.05)
        assert (out - x).mean().item() == pytest.approx(0.0, abs=1e-3)

    def test_independent_draws(self):
        x = torch.full((2, 1, 8, 8), 0.5)
        g = torch.Generator().manual_seed(0)
        assert not torch.equal(perturb(x, g, 0.1), perturb(x, g, 0.1))

    def test_negative_sigma(self):
        with pytest.raises(ParameterError):
            perturb(torch.zeros(1), None, -0.1)


class TestConsistencyWeight:
    """Gaussian warm-up of the consistency term."""

    def test_values(self):
        assert consistency_weight(0, 1000) == pytest.approx(6.7379e-4, rel=1e-4)
        assert consistency_weight(500, 1000) == pytest.approx(2.8650e-2, rel=1e-4)
        assert consistency_weight(1000, 1000) == 0.1

    def test_monotone(self):
        values = [consistency_weight(k, 999) for k in range(1000)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_clamped_beyond_end(self):
        assert consistency_weight(2500, 1000) == 0.1

    def test_invalid(self):
        with pytest.raises(ParameterError):
            consistency_weight(0, 0)
        with pytest.raises(ParameterError):
            consistency_weight(-1, 10)
