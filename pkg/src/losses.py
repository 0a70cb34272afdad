"""Training objectives: hybrid supervised loss, mean-square consistency,
bidirectional cross-domain contrastive loss and their weighted total."""

from typing import Optional, Sequence, Union

import torch
import torch.nn.functional as F

from src.errors import InputError, NumericError, ParameterError
from src.models import LossBreakdown

Scalar = Union[float, torch.Tensor]

_LOG_FLOOR = 1e-12


def soft_dice(p: torch.Tensor, one_hot: torch.Tensor, smooth: float = 1e-5) -> torch.Tensor:
    """Per-sample, per-class soft Dice, N x C.

    Squared terms in the denominator: (2*sum(p*y) + s) / (sum(p^2) + sum(y^2) + s).
    """
    dims = tuple(range(2, p.ndim))
    intersect = (p * one_hot).sum(dim=dims)
    denominator = (p * p).sum(dim=dims) + (one_hot * one_hot).sum(dim=dims)
    return (2.0 * intersect + smooth) / (denominator + smooth)


def seg_loss(
    p: torch.Tensor,
    y: torch.Tensor,
    ce_weight: float = 0.5,
    dice_weight: float = 0.5,
    smooth: float = 1e-5,
    reduction: str = "mean",
) -> torch.Tensor:
    """ce_weight * CE + dice_weight * (1 - mean foreground soft Dice).

    ``p`` holds probabilities (N x C x H x W), ``y`` class ids (N x H x W).
    With ``reduction="none"`` one value per sample is returned.
    """
    if p.ndim != 4 or y.ndim != 3 or p.shape[0] != y.shape[0] or p.shape[2:] != y.shape[1:]:
        raise InputError(f"prediction {tuple(p.shape)} and mask {tuple(y.shape)} are not aligned")
    n_classes = p.shape[1]
    if y.numel() and (int(y.max()) >= n_classes or int(y.min()) < 0):
        raise InputError(f"mask holds class ids outside [0, {n_classes})")

    y = y.long()
    log_p = torch.log(p.clamp_min(_LOG_FLOOR))
    ce = -log_p.gather(1, y.unsqueeze(1)).squeeze(1).flatten(1).mean(dim=1)

    one_hot = F.one_hot(y, n_classes).permute(0, 3, 1, 2).to(p.dtype)
    dice = soft_dice(p, one_hot, smooth)[:, 1:].mean(dim=1)

    per_sample = ce_weight * ce + dice_weight * (1.0 - dice)
    if reduction == "none":
        return per_sample
    return per_sample.mean()


def supervised_loss(
    source_preds: Optional[torch.Tensor],
    source_masks: Optional[torch.Tensor],
    target_preds: Optional[torch.Tensor],
    target_masks: Optional[torch.Tensor],
    **seg_kwargs,
) -> torch.Tensor:
    """Mean seg_loss over labeled source plus mean seg_loss over labeled target.

    Either batch may be absent (None or empty), not both.
    """
    terms = []
    for preds, masks in ((source_preds, source_masks), (target_preds, target_masks)):
        if preds is None or preds.shape[0] == 0:
            continue
        if masks is None:
            raise InputError("predictions given without masks")
        terms.append(seg_loss(preds, masks, **seg_kwargs))
    if not terms:
        raise InputError("supervised loss needs at least one labeled batch")
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def consistency_loss(p_student: torch.Tensor, p_teacher: torch.Tensor) -> torch.Tensor:
    """Mean squared difference; the teacher side carries no gradient."""
    if p_student.shape != p_teacher.shape:
        raise InputError(
            f"student {tuple(p_student.shape)} and teacher {tuple(p_teacher.shape)} differ")
    return F.mse_loss(p_student, p_teacher.detach())


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last dimension, clamped to [-1, 1]."""
    norm_a = a.norm(dim=-1)
    norm_b = b.norm(dim=-1)
    if bool((norm_a == 0).any()) or bool((norm_b == 0).any()):
        raise NumericError("cosine similarity is undefined for zero-norm embeddings")
    return ((a * b).sum(dim=-1) / (norm_a * norm_b)).clamp(-1.0, 1.0)


def info_nce(
    anchor: torch.Tensor,
    positive: torch.Tensor,
    negatives: Sequence[torch.Tensor],
    tau: float,
) -> torch.Tensor:
    """-log softmax of the positive similarity among [positive, negatives],
    averaged over the batch."""
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    if anchor.ndim == 1:
        anchor, positive = anchor[None], positive[None]
        negatives = [n[None] for n in negatives]
    for other in (positive, *negatives):
        if other.shape != anchor.shape:
            raise InputError(
                f"embedding batch {tuple(other.shape)} does not pair with {tuple(anchor.shape)}")

    logits = torch.stack(
        [cosine_sim(anchor, positive)] + [cosine_sim(anchor, n) for n in negatives], dim=1) / tau
    labels = torch.zeros(anchor.shape[0], dtype=torch.long, device=anchor.device)
    return F.cross_entropy(logits, labels)


def contrastive_s2t(
    g_s_i: torch.Tensor,
    g_t_j: torch.Tensor,
    g_t_i: torch.Tensor,
    g_s_j: torch.Tensor,
    tau: float = 0.1,
) -> torch.Tensor:
    """Source-to-target term: anchor g_s_i, positive g_t_j, negatives {g_t_i, g_s_j}."""
    return info_nce(g_s_i, g_t_j, (g_t_i, g_s_j), tau)


def contrastive_t2s(
    g_t_j: torch.Tensor,
    g_s_i: torch.Tensor,
    g_s_j: torch.Tensor,
    g_t_i: torch.Tensor,
    tau: float = 0.1,
) -> torch.Tensor:
    """Target-to-source term: anchor g_t_j, positive g_s_i, negatives {g_s_j, g_t_i}."""
    return info_nce(g_t_j, g_s_i, (g_s_j, g_t_i), tau)


def contrastive_loss(
    g_s_i: torch.Tensor,
    g_t_i: torch.Tensor,
    g_s_j: torch.Tensor,
    g_t_j: torch.Tensor,
    tau: float = 0.1,
) -> torch.Tensor:
    """Average of both directions.

    ``g_s_i``/``g_t_i`` embed source images through source/target
    normalization, ``g_s_j``/``g_t_j`` embed the paired target images;
    row k of every tensor belongs to pair k.
    """
    n_pairs = {g.shape[0] if g.ndim > 1 else 1 for g in (g_s_i, g_t_i, g_s_j, g_t_j)}
    if len(n_pairs) != 1:
        raise InputError(f"mismatched pair counts {sorted(n_pairs)}")
    s2t = contrastive_s2t(g_s_i, g_t_j, g_t_i, g_s_j, tau)
    t2s = contrastive_t2s(g_t_j, g_s_i, g_s_j, g_t_i, tau)
    return 0.5 * (s2t + t2s)


def weighted_total(
    l_sup: Scalar,
    l_unsup: Scalar,
    l_ct: Scalar,
    lambda1: float = 1.0,
    lambda2: float = 0.1,
) -> Scalar:
    """L = l_sup + lambda1 * l_unsup + lambda2 * l_ct."""
    if lambda1 < 0 or lambda2 < 0:
        raise ParameterError(f"loss weights must be non-negative, got {lambda1}, {lambda2}")
    return l_sup + lambda1 * l_unsup + lambda2 * l_ct


def total_loss(
    l_sup: Scalar,
    l_unsup: Scalar,
    l_ct: Scalar,
    lambda1: float = 1.0,
    lambda2: float = 0.1,
    **row_fields,
) -> LossBreakdown:
    """Weighted total with its components retained."""
    values = [float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
              for v in (l_sup, l_unsup, l_ct)]
    total = weighted_total(values[0], values[1], values[2], lambda1, lambda2)
    return LossBreakdown(l_sup=values[0], l_unsup=values[1], l_ct=values[2], total=total,
                         lambda1=lambda1, lambda2=lambda2, **row_fields)
