"""Personalized-generator objective: reconstruction plus prior preservation.

Only the loss is implemented. The denoiser is any callable
``denoiser(noisy, cond) -> prediction of the clean input``; sampling a real
diffusion model is left to external generator clients.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from persrep import errors


@dataclass(frozen=True)
class NoiseSchedule:
    alphas: tuple[float, ...]
    sigmas: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        n = len(self.alphas)
        if n < 1 or len(self.sigmas) != n or len(self.weights) != n:
            raise errors.ShapeMismatch("alphas, sigmas and weights must share a length >= 1")
        for name in ("alphas", "sigmas", "weights"):
            if min(getattr(self, name)) <= 0:
                raise errors.GenerationError(f"schedule {name} must be positive")

    @property
    def T(self) -> int:
        return len(self.alphas)

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, T)
        abar = np.cumprod(1.0 - betas)
        return cls(tuple(np.sqrt(abar)), tuple(np.sqrt(1.0 - abar)), (1.0,) * T)


Denoiser = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def _as_tensor(x, like: Optional[torch.Tensor] = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def dreambooth_loss(
    denoiser: Denoiser,
    x, x_pr, cond, cond_pr,
    t: int, t_prime: int,
    eps, eps_prime,
    lam: float,
    schedule: NoiseSchedule,
    loss_mask=None,
) -> torch.Tensor:
    """``w_t |D(a_t x + s_t eps, c) - x|^2 + lam * w_t' |D(a_t' x_pr + s_t' eps', c_pr) - x_pr|^2``.

    ``loss_mask`` (same shape as ``x``, 1 = foreground) drops background pixels
    from the reconstruction residual, the masked-training variant. Returns a
    scalar tensor that carries gradients whenever the denoiser does.
    """
    x = _as_tensor(x)
    x_pr = _as_tensor(x_pr, x)
    eps = _as_tensor(eps, x)
    eps_prime = _as_tensor(eps_prime, x)
    cond = _as_tensor(cond, x)
    cond_pr = _as_tensor(cond_pr, x)
    if eps.shape != x.shape or eps_prime.shape != x_pr.shape:
        raise errors.ShapeMismatch(f"noise {tuple(eps.shape)}/{tuple(eps_prime.shape)} vs "
                                   f"images {tuple(x.shape)}/{tuple(x_pr.shape)}")
    for step in (t, t_prime):
        if not (0 <= int(step) < schedule.T):
            raise errors.InvalidTimestep(f"timestep {step} outside [0, {schedule.T})")

    a, s, w = schedule.alphas[t], schedule.sigmas[t], schedule.weights[t]
    residual = denoiser(a * x + s * eps, cond) - x
    if residual.shape != x.shape:
        raise errors.ShapeMismatch(f"denoiser returned {tuple(residual.shape)} for input {tuple(x.shape)}")
    if loss_mask is not None:
        m = _as_tensor(loss_mask, x)
        if m.shape != x.shape:
            raise errors.ShapeMismatch("loss mask must match x")
        residual = residual * m
    recon = w * (residual ** 2).sum()

    a2, s2, w2 = schedule.alphas[t_prime], schedule.sigmas[t_prime], schedule.weights[t_prime]
    prior_res = denoiser(a2 * x_pr + s2 * eps_prime, cond_pr) - x_pr
    prior = w2 * (prior_res ** 2).sum()
    return recon + lam * prior
