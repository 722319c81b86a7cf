"""Selective (partial-label) class-weighted Dice and its deep-supervision sum.

For one resolution level the statistic is

    DSC = sum_k alpha_k * S_k / (eps + sum_ij mask_ij * (A_ijk + B_ijk)),
    S_k = sum_ij mask_ij * A_ijk * B_ijk

with ``A`` the one-hot target, ``B`` the predicted probabilities and
``mask`` zero at unlabeled pixels.  ``factor_two=True`` multiplies ``S_k`` by
two, giving the classical Dice normalization.  The training loss is
``1 - sum_m beta_m * DSC_m`` over pyramid levels.

All functions accept torch tensors shaped ``(K, H, W)`` or ``(N, K, H, W)``
(targets and predictions) and ``(H, W)`` / ``(N, H, W)`` (masks); a batch is
pooled into a single sum over every pixel of every sample.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .types import LossConfig, UNLABELED


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def selective_dice(
    target,
    mask,
    pred,
    alpha: Sequence[float] | torch.Tensor,
    epsilon: float = 1e-5,
    factor_two: bool = False,
) -> torch.Tensor:
    pred = _as_tensor(pred)
    target = _as_tensor(target, pred.dtype)
    mask = _as_tensor(mask, pred.dtype)
    alpha = _as_tensor(alpha, pred.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"target shape {tuple(target.shape)} != prediction shape {tuple(pred.shape)}")
    if mask.shape != pred.shape[:-3] + pred.shape[-2:]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match prediction {tuple(pred.shape)}")
    K = pred.shape[-3]
    if alpha.shape != (K,):
        raise ValueError(f"alpha has shape {tuple(alpha.shape)}, expected ({K},)")
    if (alpha < 0).any():
        raise ValueError("alpha must be nonnegative")

    m = mask.unsqueeze(-3)
    # pool batch and spatial axes, keep the class axis
    pred_c = pred.movedim(-3, 0).reshape(K, -1)
    target_c = target.movedim(-3, 0).reshape(K, -1)
    m_c = m.expand_as(pred).movedim(-3, 0).reshape(K, -1)
    inter = (m_c * target_c * pred_c).sum(dim=1)
    total = (m_c * (target_c + pred_c)).sum(dim=1)
    if factor_two:
        inter = 2 * inter
    return (alpha * inter / (epsilon + total)).sum()


def one_hot_torch(labels: torch.Tensor, K: int, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Integer labels ``(..., H, W)`` -> one-hot ``(..., K, H, W)`` and mask ``(..., H, W)``."""
    labels = labels.long()
    mask = labels != UNLABELED
    if (labels[mask] >= K).any():
        raise ValueError(f"label >= K={K} found")
    safe = torch.where(mask, labels, torch.zeros_like(labels))
    onehot = torch.nn.functional.one_hot(safe, K).movedim(-1, -3).to(dtype)
    onehot = onehot * mask.unsqueeze(-3).to(dtype)
    return onehot, mask.to(dtype)


def _check_levels(n_targets: int, n_preds: int, config: LossConfig) -> None:
    if abs(sum(config.beta) - 1.0) > 1e-9:
        raise ValueError(f"beta must sum to 1, got {sum(config.beta)!r}")
    if not (n_targets == n_preds == config.M):
        raise ValueError(
            f"level count mismatch: {n_targets} targets, {n_preds} predictions, {config.M} betas"
        )


def multilevel_loss(targets, preds, config: LossConfig) -> torch.Tensor:
    """``1 - sum_m beta_m * DSC_m``.

    ``targets`` is a sequence of ``(one_hot, mask)`` pairs, one per level,
    finest first; ``preds`` the matching probability maps.
    """
    _check_levels(len(targets), len(preds), config)
    total = None
    for (onehot, mask), pred, beta in zip(targets, preds, config.beta):
        if pred.shape[-2:] != onehot.shape[-2:]:
            raise ValueError(f"level shape mismatch {tuple(pred.shape)} vs {tuple(onehot.shape)}")
        term = beta * selective_dice(onehot, mask, pred, config.alpha, config.epsilon, config.factor_two)
        total = term if total is None else total + term
    return 1 - total


def multilevel_loss_from_logits(targets, logits, config: LossConfig) -> torch.Tensor:
    return multilevel_loss(targets, [torch.softmax(z, dim=-3) for z in logits], config)


def loss_gradient(targets, logits, config: LossConfig) -> list[torch.Tensor]:
    """Exact gradient of the multilevel loss with respect to every logit."""
    leaves = [_as_tensor(z).detach().clone().requires_grad_(True) for z in logits]
    loss = multilevel_loss_from_logits(targets, leaves, config)
    return list(torch.autograd.grad(loss, leaves, allow_unused=True))


def pyramid_targets(labels: torch.Tensor, K: int, levels: int, dtype=torch.float32):
    """One-hot/mask pairs for every level of a label pyramid (top-left subsampling)."""
    out = []
    lab = labels
    for m in range(levels):
        if m:
            lab = lab[..., ::2, ::2]
        out.append(one_hot_torch(lab, K, dtype))
    return out
