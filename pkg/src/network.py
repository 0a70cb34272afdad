"""U-Net segmentation backbone with domain-specific batch normalization and
a projection head for contrastive embeddings."""

from contextlib import contextmanager
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import ValidationError

from src.dsbn import DomainLike, DomainSpecificBatchNorm2d
from src.errors import ConfigurationError, InputError, ShapeError
from src.models import ArchSpec, DomainId

TEACHER_PREFIX = "teacher/"


class ConvBlock(nn.Module):
    """(conv3x3 -> DSBN -> ReLU) x 2."""

    def __init__(self, in_channels: int, out_channels: int, eps: float, momentum: float):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1, bias=False)
        self.norm1 = DomainSpecificBatchNorm2d(out_channels, eps, momentum)
        self.conv2 = nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1, bias=False)
        self.norm2 = DomainSpecificBatchNorm2d(out_channels, eps, momentum)

    def forward(self, x: torch.Tensor, domain: DomainLike) -> torch.Tensor:
        x = F.relu(self.norm1(self.conv1(x), domain))
        return F.relu(self.norm2(self.conv2(x), domain))


class UpBlock(nn.Module):
    """Bilinear up-sampling, 1x1 channel reduction, skip concatenation, ConvBlock."""

    def __init__(self, in_channels: int, skip_channels: int, eps: float, momentum: float):
        super().__init__()
        self.reduce = nn.Conv2d(in_channels, skip_channels, kernel_size=1, bias=False)
        self.block = ConvBlock(2 * skip_channels, skip_channels, eps, momentum)

    def forward(self, x: torch.Tensor, skip: torch.Tensor, domain: DomainLike) -> torch.Tensor:
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        x = self.reduce(x)
        return self.block(torch.cat([skip, x], dim=1), domain)


class DsbnUNet(nn.Module):
    """U-Net whose every normalization site is domain-specific.

    Convolution kernels (encoder and decoder) are shared by both domains; the
    source parameter set is [convs, gamma_S, beta_S] and the target set
    [convs, gamma_T, beta_T], both views of the same tensors.
    """

    def __init__(self, arch: ArchSpec, eps: float = 1e-5, momentum: float = 0.9):
        super().__init__()
        self.arch = arch
        self.eps = eps
        self.momentum = momentum
        widths = arch.widths

        self.inc = ConvBlock(arch.in_channels, widths[0], eps, momentum)
        self.down = nn.ModuleList(
            [ConvBlock(widths[i - 1], widths[i], eps, momentum) for i in range(1, len(widths))])
        self.up = nn.ModuleList(
            [UpBlock(widths[i], widths[i - 1], eps, momentum)
             for i in range(len(widths) - 1, 0, -1)])
        self.classifier = nn.Conv2d(widths[0], arch.n_classes, kernel_size=1)
        self.projection = nn.Sequential(
            nn.Linear(widths[-1], arch.projection_hidden),
            nn.ReLU(inplace=True),
            nn.Linear(arch.projection_hidden, arch.projection_dim),
        )
        self._init_weight()

    def _init_weight(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.arch.in_channels:
            raise InputError(
                f"expected N x {self.arch.in_channels} x H x W input, got {tuple(x.shape)}")
        factor = 2 ** self.arch.depth
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise ShapeError(
                f"spatial size {tuple(x.shape[-2:])} not divisible by 2^{self.arch.depth}")

    def encode(self, x: torch.Tensor, domain: DomainLike) -> List[torch.Tensor]:
        """Feature maps of every encoder level, finest first."""
        self._check_input(x)
        features = [self.inc(x, domain)]
        for block in self.down:
            features.append(block(F.max_pool2d(features[-1], 2), domain))
        return features

    def logits(self, x: torch.Tensor, domain: DomainLike) -> torch.Tensor:
        features = self.encode(x, domain)
        out = features[-1]
        for block, skip in zip(self.up, reversed(features[:-1])):
            out = block(out, skip, domain)
        return self.classifier(out)

    def segment(self, x: torch.Tensor, domain: DomainLike) -> torch.Tensor:
        """Per-pixel class probabilities, N x C x H x W."""
        return torch.softmax(self.logits(x, domain), dim=1)

    def project(self, x: torch.Tensor, domain: DomainLike) -> torch.Tensor:
        """Embeddings of the pooled bottleneck, N x projection_dim."""
        bottleneck = self.encode(x, domain)[-1]
        pooled = F.adaptive_avg_pool2d(bottleneck, 1).flatten(1)
        return self.projection(pooled)

    def forward(self, x: torch.Tensor, domain: DomainLike) -> torch.Tensor:
        return self.segment(x, domain)

    # -- parameter views -------------------------------------------------

    def dsbn_layers(self) -> Dict[str, DomainSpecificBatchNorm2d]:
        return {name: m for name, m in self.named_modules()
                if isinstance(m, DomainSpecificBatchNorm2d)}

    def shared_parameters(self) -> Dict[str, nn.Parameter]:
        """Convolution weights of encoder and decoder (theta_en, theta_de)."""
        return {name: p for name, p in self.named_parameters()
                if not name.startswith("projection.") and ".gamma." not in name
                and ".beta." not in name}

    def domain_parameters(self, domain: DomainLike) -> Dict[str, nn.Parameter]:
        """gamma and beta of every DSBN layer for one domain."""
        key = DomainId(domain).value
        return {name: p for name, p in self.named_parameters()
                if name.endswith(f".gamma.{key}") or name.endswith(f".beta.{key}")}

    def head_parameters(self) -> Dict[str, nn.Parameter]:
        return {name: p for name, p in self.named_parameters() if name.startswith("projection.")}

    def parameter_set(self, domain: DomainLike) -> Dict[str, nn.Parameter]:
        """Theta^d: shared convolutions plus domain-d affine parameters."""
        return {**self.shared_parameters(), **self.domain_parameters(domain)}

    def encoder_modules(self) -> List[nn.Module]:
        return [self.inc, *self.down]

    def last_block_modules(self) -> List[nn.Module]:
        """Last convolutional block of the decoder and the classifier."""
        last = self.up[-1] if len(self.up) else self.inc
        return [last, self.classifier]


@contextmanager
def frozen_statistics(model: nn.Module) -> Iterator[nn.Module]:
    """Train-mode forwards inside this block use batch statistics but leave
    running statistics untouched."""
    layers = [m for m in model.modules() if isinstance(m, DomainSpecificBatchNorm2d)]
    previous = [m.track_running_stats for m in layers]
    for m in layers:
        m.track_running_stats = False
    try:
        yield model
    finally:
        for m, flag in zip(layers, previous):
            m.track_running_stats = flag


def build_model(
    arch: Union[ArchSpec, Dict[str, Any]],
    seed: int = 0,
    eps: float = 1e-5,
    momentum: float = 0.9,
) -> DsbnUNet:
    """Build a network deterministically from ``seed``; the global RNG is left untouched."""
    try:
        spec = arch if isinstance(arch, ArchSpec) else ArchSpec.model_validate(arch)
    except ValidationError as e:
        raise ConfigurationError(f"invalid architecture descriptor: {e}") from e
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DsbnUNet(spec, eps=eps, momentum=momentum)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --------------------------------------------------------------------------
# Checkpoint archives
# --------------------------------------------------------------------------

def export_state(model: DsbnUNet) -> Dict[str, torch.Tensor]:
    """Tensors keyed ``dsbn.<layer>.<S|T>.{gamma,beta,mean,var}`` for
    normalization sites and by module path for everything else."""
    layers = model.dsbn_layers()
    state: Dict[str, torch.Tensor] = {}
    for name, layer in layers.items():
        for domain in DomainId:
            for field, tensor in layer.domain_state(domain).items():
                state[f"dsbn.{name}.{domain.value}.{field}"] = tensor.detach().clone()
    prefixes = tuple(f"{name}." for name in layers)
    for key, tensor in model.state_dict().items():
        if not key.startswith(prefixes):
            state[key] = tensor.detach().clone()
    return state


def import_state(model: DsbnUNet, state: Dict[str, torch.Tensor]) -> DsbnUNet:
    """Inverse of :func:`export_state`; strict about missing or extra keys."""
    fields = {"gamma": "gamma.{d}", "beta": "beta.{d}",
              "mean": "running_mean_{d}", "var": "running_var_{d}"}
    native: Dict[str, torch.Tensor] = {}
    for key, tensor in state.items():
        if key.startswith("dsbn."):
            layer, domain, field = key[len("dsbn."):].rsplit(".", 2)
            native[f"{layer}.{fields[field].format(d=domain)}"] = tensor
        else:
            native[key] = tensor
    model.load_state_dict(native, strict=True)
    return model


def build_checkpoint(
    student: DsbnUNet,
    teacher: Optional[DsbnUNet] = None,
    iteration: int = 0,
    method: Optional[str] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """Single archive: arch, iteration, student tensors and teacher tensors
    under the ``teacher/`` prefix."""
    state = export_state(student)
    if teacher is not None:
        state.update({f"{TEACHER_PREFIX}{k}": v for k, v in export_state(teacher).items()})
    return {
        "arch": student.arch.model_dump(),
        "dsbn": {"eps": student.eps, "momentum": student.momentum},
        "iteration": iteration,
        "method": method,
        "state": state,
        **(extra or {}),
    }


def restore_checkpoint(checkpoint: Dict[str, Any]) -> Tuple[DsbnUNet, Optional[DsbnUNet]]:
    """Rebuild student (and teacher when present) from an archive."""
    arch = ArchSpec.model_validate(checkpoint["arch"])
    dsbn = checkpoint.get("dsbn", {})
    state = checkpoint["state"]
    student_state = {k: v for k, v in state.items() if not k.startswith(TEACHER_PREFIX)}
    teacher_state = {k[len(TEACHER_PREFIX):]: v for k, v in state.items()
                     if k.startswith(TEACHER_PREFIX)}

    student = import_state(DsbnUNet(arch, **dsbn), student_state)
    teacher = None
    if teacher_state:
        teacher = import_state(DsbnUNet(arch, **dsbn), teacher_state)
        teacher.requires_grad_(False)
    return student, teacher


def save_checkpoint(checkpoint: Dict[str, Any], path: str) -> None:
    torch.save(checkpoint, path)


def load_checkpoint(path: str) -> Dict[str, Any]:
    return torch.load(path, map_location="cpu")
