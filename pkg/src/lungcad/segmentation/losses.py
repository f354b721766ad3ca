"""Training losses for the segmentation stage.

All three losses accept either torch tensors or array-likes and return a
scalar torch tensor, so they can be used both inside the training loop
(with autograd) and directly in tests.
"""

from __future__ import annotations

import numpy as np
import torch

BCE_EPS = 1e-7
DICE_SMOOTH = 1e-6


def _as_tensor(x) -> torch.Tensor:
    # Tensors keep their dtype (training runs float32); everything else is
    # evaluated in float64 so hand-checked values hold to tight tolerances.
    if torch.is_tensor(x):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _pair(pred, target) -> tuple[torch.Tensor, torch.Tensor]:
    s = _as_tensor(pred)
    g = torch.as_tensor(target, dtype=s.dtype) if not torch.is_tensor(target) else target.to(s.dtype)
    if s.shape != g.shape:
        raise ValueError(f"prediction shape {tuple(s.shape)} does not match target shape {tuple(g.shape)}")
    return s, g


def bce_loss(pred, target, eps: float = BCE_EPS) -> torch.Tensor:
    """Mean binary cross-entropy between per-pixel probabilities and a binary mask.

    Probabilities are clamped to [eps, 1-eps] because the log terms are
    undefined at exactly 0 or 1.
    """
    s, g = _pair(pred, target)
    s = s.clamp(eps, 1.0 - eps)
    return -(g * torch.log(s) + (1.0 - g) * torch.log(1.0 - s)).mean()


def dice_loss(pred, target, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Soft Dice loss, 1 - 2*sum(g*s) / (sum(g^2) + sum(s^2)).

    The smoothing term keeps the ratio defined when both masks are empty
    (that case evaluates to a loss of ~0).
    """
    s, g = _pair(pred, target)
    inter = (g * s).sum()
    denom = (g * g).sum() + (s * s).sum()
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def combined_loss(pred, target) -> torch.Tensor:
    """Unweighted sum of BCE and Dice losses."""
    return bce_loss(pred, target) + dice_loss(pred, target)
