"""Training losses: scanpath content, CLS reconstruction, adversarial terms.

Scanpath content loss averages weighted squared differences of (position,
duration, eos) over the first k steps of the real path, where k is the real
path's true length; pad steps never contribute. The eos channel uses mean
squared error against the binary marker. The adversarial pair keeps the
1 - log D(fake) generator form and binary cross-entropy for the
discriminator, with probabilities clamped away from {0, 1}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .corpus import NormalizedScanpath
from .errors import ValidationError

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # position term
    beta: float = 1.0  # duration term
    gamma: float = 1.0  # eos term

    def validate(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValidationError("loss weights must be non-negative")
        if max(self.alpha, self.beta, self.gamma) <= 0:
            raise ValidationError("at least one loss weight must be positive")


def _as_tensor(x, like: torch.Tensor) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(like.dtype)
    return torch.as_tensor(x, dtype=like.dtype)


def scanpath_content_loss(
    gen_steps: torch.Tensor,
    real: NormalizedScanpath,
    weights: LossWeights = LossWeights(),
) -> torch.Tensor:
    """Single-sample content loss over the real path's true length."""
    weights.validate()
    if real.true_length < 1:
        raise ValidationError("real scanpath has zero true length")
    real_steps = _as_tensor(real.steps, gen_steps)
    if gen_steps.shape != real_steps.shape:
        raise ValidationError(
            f"step shapes differ: {tuple(gen_steps.shape)} vs {tuple(real_steps.shape)}"
        )
    k = real.true_length
    diff = gen_steps[:k] - real_steps[:k]
    terms = (
        weights.alpha * diff[:, 0] ** 2
        + weights.beta * diff[:, 1] ** 2
        + weights.gamma * diff[:, 2] ** 2
    )
    return terms.sum() / k


def batched_scanpath_content_loss(
    gen_steps: torch.Tensor,
    real_steps: torch.Tensor,
    true_lengths: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> torch.Tensor:
    """(B, T, 3) x (B, T, 3) x (B,) -> (B,) per-sample content losses."""
    weights.validate()
    if torch.any(true_lengths < 1):
        raise ValidationError("true_lengths must all be >= 1")
    mask = (
        torch.arange(gen_steps.shape[1], device=gen_steps.device).unsqueeze(0)
        < true_lengths.unsqueeze(1)
    ).to(gen_steps.dtype)
    diff = gen_steps - real_steps
    w = torch.tensor(
        [weights.alpha, weights.beta, weights.gamma], dtype=gen_steps.dtype
    )
    per_step = (diff**2 * w).sum(dim=2)  # (B, T)
    return (per_step * mask).sum(dim=1) / true_lengths.to(gen_steps.dtype)


def text_content_loss(cls_recon: torch.Tensor, cls_real) -> torch.Tensor:
    """Mean squared difference over the CLS dimensions."""
    cls_real_t = _as_tensor(cls_real, cls_recon)
    if cls_recon.shape != cls_real_t.shape:
        raise ValidationError(
            f"cls shapes differ: {tuple(cls_recon.shape)} vs {tuple(cls_real_t.shape)}"
        )
    return ((cls_recon - cls_real_t) ** 2).mean(dim=-1)


def adversarial_terms(d_real, d_fake) -> tuple[torch.Tensor, torch.Tensor]:
    """(gen_term, disc_loss) from discriminator outputs in (0, 1).

    gen_term = 1 - ln(d_fake); disc_loss = -ln(d_real) - ln(1 - d_fake).
    Inputs are clamped to [eps, 1-eps] so both are always finite. Tensor
    inputs of any matching shape are reduced by mean.
    """
    d_real_t = torch.as_tensor(d_real, dtype=torch.get_default_dtype()) if not isinstance(d_real, torch.Tensor) else d_real
    d_fake_t = torch.as_tensor(d_fake, dtype=d_real_t.dtype) if not isinstance(d_fake, torch.Tensor) else d_fake
    d_real_c = d_real_t.clamp(PROB_EPS, 1.0 - PROB_EPS)
    d_fake_c = d_fake_t.clamp(PROB_EPS, 1.0 - PROB_EPS)
    gen_term = (1.0 - torch.log(d_fake_c)).mean()
    disc_loss = (-torch.log(d_real_c) - torch.log(1.0 - d_fake_c)).mean()
    return gen_term, disc_loss


def net_generator_loss(ls, lr, gen_term) -> torch.Tensor:
    """Unweighted sum of the three generator components."""
    total = 0.0
    for part in (ls, lr, gen_term):
        part_t = part if isinstance(part, torch.Tensor) else torch.as_tensor(float(part), dtype=torch.float64)
        total = total + (part_t.mean() if part_t.dim() > 0 else part_t)
    return total
