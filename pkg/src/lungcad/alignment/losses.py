"""Symmetric cross-entropy loss for contrastive image/feature alignment."""

from __future__ import annotations

import numpy as np
import torch

RCE_LOG_ZERO = -4.0


def _ce_rce_one_direction(logits: torch.Tensor, log_zero: float) -> tuple[torch.Tensor, torch.Tensor]:
    """CE and reverse-CE over rows of a logit matrix with identity targets."""
    n = logits.shape[0]
    logp = torch.log_softmax(logits, dim=1)
    p = logp.exp()
    idx = torch.arange(n)
    ce = -logp[idx, idx].mean()
    # Targets are one-hot, so log(q) is 0 on the diagonal and log(0) elsewhere;
    # the off-diagonal log is clamped to a finite constant.
    rce = (-log_zero) * (1.0 - p[idx, idx]).mean()
    return ce, rce


def sce_loss(
    similarity,
    temperature: float = 0.07,
    alpha: float = 1.0,
    beta: float = 1.0,
    log_zero: float = RCE_LOG_ZERO,
) -> torch.Tensor:
    """Symmetric cross-entropy over a square similarity matrix of matched pairs.

    Row i is an image embedding paired with feature embedding i, so the
    target distribution is the identity pairing. Predicted probabilities
    come from softmax(similarity / temperature); the loss is evaluated
    across rows and across columns and averaged, then combined as
    alpha * CE + beta * RCE.
    """
    sim = similarity if torch.is_tensor(similarity) else torch.as_tensor(np.asarray(similarity, dtype=np.float64))
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"similarity must be a square matrix, got shape {tuple(sim.shape)}")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if alpha < 0 or beta < 0 or alpha + beta <= 0:
        raise ValueError(f"loss weights must be non-negative with a positive sum, got alpha={alpha}, beta={beta}")
    logits = sim / temperature
    ce_r, rce_r = _ce_rce_one_direction(logits, log_zero)
    ce_c, rce_c = _ce_rce_one_direction(logits.t(), log_zero)
    ce = 0.5 * (ce_r + ce_c)
    rce = 0.5 * (rce_r + rce_c)
    return alpha * ce + beta * rce
