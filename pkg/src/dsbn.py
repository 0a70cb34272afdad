"""Domain-specific batch normalization.

Each layer whitens features with statistics of the batch's own domain and
applies that domain's affine transform. Running statistics are kept per
domain and only ever updated from batches of that domain.
"""

from typing import Dict, Union

import torch
import torch.nn as nn

from src.errors import BatchSizeError, InputError, NumericError, ParameterError
from src.models import DomainId

DomainLike = Union[DomainId, str]


def _domain_key(domain: DomainLike) -> str:
    return DomainId(domain).value


def update_running_stats(
    layer: "DomainSpecificBatchNorm2d",
    domain: DomainLike,
    batch_mean: torch.Tensor,
    batch_var: torch.Tensor,
    momentum: float,
) -> "DomainSpecificBatchNorm2d":
    """running <- momentum * running + (1 - momentum) * batch, for ``domain`` only."""
    if not 0.0 < momentum < 1.0:
        raise ParameterError(f"momentum must lie in (0, 1), got {momentum}")
    key = _domain_key(domain)
    with torch.no_grad():
        running_mean = getattr(layer, f"running_mean_{key}")
        running_var = getattr(layer, f"running_var_{key}")
        running_mean.mul_(momentum).add_(batch_mean.detach(), alpha=1.0 - momentum)
        running_var.mul_(momentum).add_(batch_var.detach(), alpha=1.0 - momentum)
    return layer


class DomainSpecificBatchNorm2d(nn.Module):
    """Batch normalization with one (gamma, beta, mean, var) set per domain.

    Variances are biased (divided by N*H*W) in both the batch and the running
    estimate. ``momentum`` weights the previous running value.
    """

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.9):
        super().__init__()
        if eps <= 0:
            raise ParameterError(f"eps must be positive, got {eps}")
        if not 0.0 < momentum < 1.0:
            raise ParameterError(f"momentum must lie in (0, 1), got {momentum}")
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.track_running_stats = True
        self.gamma = nn.ParameterDict(
            {d.value: nn.Parameter(torch.ones(num_features)) for d in DomainId})
        self.beta = nn.ParameterDict(
            {d.value: nn.Parameter(torch.zeros(num_features)) for d in DomainId})
        for d in DomainId:
            self.register_buffer(f"running_mean_{d.value}", torch.zeros(num_features))
            self.register_buffer(f"running_var_{d.value}", torch.ones(num_features))

    def running_stats(self, domain: DomainLike) -> Dict[str, torch.Tensor]:
        key = _domain_key(domain)
        return {
            "mean": getattr(self, f"running_mean_{key}"),
            "var": getattr(self, f"running_var_{key}"),
        }

    def domain_state(self, domain: DomainLike) -> Dict[str, torch.Tensor]:
        """gamma, beta, mean and var of one domain."""
        key = _domain_key(domain)
        return {
            "gamma": self.gamma[key],
            "beta": self.beta[key],
            **self.running_stats(domain),
        }

    def forward(self, features: torch.Tensor, domain: DomainLike) -> torch.Tensor:
        if features.ndim != 4 or features.shape[1] != self.num_features:
            raise InputError(
                f"expected N x {self.num_features} x H x W features, got {tuple(features.shape)}")
        if not torch.isfinite(features).all():
            raise NumericError("non-finite features entering domain-specific batch norm")
        key = _domain_key(domain)

        if self.training:
            if features.shape[0] < 2:
                raise BatchSizeError(
                    f"train-mode normalization needs at least 2 samples of domain {key}, "
                    f"got {features.shape[0]}")
            mean = features.mean(dim=(0, 2, 3))
            var = features.var(dim=(0, 2, 3), unbiased=False)
            if self.track_running_stats:
                update_running_stats(self, key, mean, var, self.momentum)
        else:
            mean = getattr(self, f"running_mean_{key}")
            var = getattr(self, f"running_var_{key}")

        whitened = (features - mean[None, :, None, None]) / torch.sqrt(var[None, :, None, None] + self.eps)
        return self.gamma[key][None, :, None, None] * whitened + self.beta[key][None, :, None, None]

    def extra_repr(self) -> str:
        return f"{self.num_features}, eps={self.eps}, momentum={self.momentum}, domains=S/T"
