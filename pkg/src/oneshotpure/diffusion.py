"""Discrete Gaussian diffusion: forward steps, closed-form marginals, posteriors.

Images live in the internal range [-1, 1].  Every stochastic function takes an
explicit ``torch.Generator`` so results are a pure function of the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .errors import DegenerateScheduleError, ParameterError

# Two-step schedule used by the one-shot purifier.
DEFAULT_BETAS = (0.0167, 0.0331)


@dataclass(frozen=True)
class VarianceSchedule:
    """Per-step variances beta_1..beta_T with precomputed products.

    ``alpha_bars[t]`` is the cumulative product up to step ``t``; index 0 holds
    the empty product 1 so that ``alpha_bars`` has length T + 1.
    """

    betas: tuple[float, ...]
    alphas: torch.Tensor = field(init=False, repr=False, compare=False)
    alpha_bars: torch.Tensor = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        betas = tuple(float(b) for b in self.betas)
        if len(betas) < 1:
            raise ParameterError("schedule needs at least one step")
        for b in betas:
            if not (0.0 <= b < 1.0):
                raise ParameterError(f"beta must lie in [0, 1), got {b}")
        b = torch.tensor(betas, dtype=torch.float64)
        alphas = 1.0 - b
        alpha_bars = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(alphas, 0)])
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @classmethod
    def linear(cls, T: int, beta_start: float = 1e-3, beta_end: float = 2e-2) -> "VarianceSchedule":
        if T < 1:
            raise ParameterError("T must be >= 1")
        if T == 1:
            return cls((beta_start,))
        step = (beta_end - beta_start) / (T - 1)
        return cls(tuple(beta_start + i * step for i in range(T)))

    @property
    def T(self) -> int:
        return len(self.betas)

    def beta(self, t: int) -> float:
        self._check_step(t, lo=1)
        return self.betas[t - 1]

    def alpha_bar(self, t: int) -> float:
        self._check_step(t, lo=0)
        return float(self.alpha_bars[t])

    def marginal_coefficients(self, t: int) -> tuple[float, float]:
        """(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)) for q(x_t | x_0)."""
        ab = self.alpha_bar(t)
        return math.sqrt(ab), math.sqrt(1.0 - ab)

    def posterior_coefficients(self, t: int) -> tuple[float, float, float]:
        """Coefficients of q(x_{t-1} | x_t, x_0).

        Returns ``(coef_x0, coef_xt, variance)`` with
        mean = coef_x0 * x_0 + coef_xt * x_t.
        """
        if t < 1:
            raise ParameterError("posterior is only defined for t >= 1")
        self._check_step(t, lo=1)
        ab_t = float(self.alpha_bars[t])
        ab_prev = float(self.alpha_bars[t - 1])
        beta_t = self.betas[t - 1]
        denom = 1.0 - ab_t
        if denom <= 0.0:
            raise DegenerateScheduleError(f"1 - alpha_bar_{t} = 0; posterior undefined")
        coef_x0 = math.sqrt(ab_prev) * beta_t / denom
        coef_xt = math.sqrt(1.0 - beta_t) * (1.0 - ab_prev) / denom
        variance = (1.0 - ab_prev) / denom * beta_t
        return coef_x0, coef_xt, variance

    def to_list(self) -> list[float]:
        return list(self.betas)

    def _check_step(self, t: int, lo: int) -> None:
        if not (lo <= t <= self.T):
            raise ParameterError(f"step index {t} outside [{lo}, {self.T}]")


def _normal_like(x: torch.Tensor, rng: torch.Generator | None) -> torch.Tensor:
    return torch.randn(x.shape, generator=rng, dtype=x.dtype, device=x.device)


def diffuse_step(x: torch.Tensor, beta: float, rng: torch.Generator | None = None) -> torch.Tensor:
    """One forward step: sqrt(1 - beta) * x + sqrt(beta) * eps."""
    if not (0.0 <= beta < 1.0):
        raise ParameterError(f"beta must lie in [0, 1), got {beta}")
    if beta == 0.0:
        return x.clone()
    eps = _normal_like(x, rng)
    return math.sqrt(1.0 - beta) * x + math.sqrt(beta) * eps


def diffuse_to(x0: torch.Tensor, schedule: VarianceSchedule, t: int,
               rng: torch.Generator | None = None, noise: torch.Tensor | None = None) -> torch.Tensor:
    """Sample q(x_t | x_0) in closed form. ``noise`` overrides the draw."""
    if t < 0 or t > schedule.T:
        raise ParameterError(f"t={t} outside [0, {schedule.T}]")
    if t == 0:
        return x0.clone()
    a, s = schedule.marginal_coefficients(t)
    eps = _normal_like(x0, rng) if noise is None else noise
    return a * x0 + s * eps


def posterior_mean_variance(x_t: torch.Tensor, x0_hat: torch.Tensor,
                            schedule: VarianceSchedule, t: int) -> tuple[torch.Tensor, float]:
    if x_t.shape != x0_hat.shape:
        raise ParameterError(f"shape mismatch {tuple(x_t.shape)} vs {tuple(x0_hat.shape)}")
    c0, ct, var = schedule.posterior_coefficients(t)
    return c0 * x0_hat + ct * x_t, var


def posterior_sample(x_t: torch.Tensor, x0_hat: torch.Tensor, schedule: VarianceSchedule, t: int,
                     rng: torch.Generator | None = None) -> torch.Tensor:
    """Draw x_{t-1} ~ q(x_{t-1} | x_t, x_0 = x0_hat).

    The draw is reparameterized, so gradients flow through ``x0_hat`` and
    ``x_t`` with the noise held fixed.
    """
    mean, var = posterior_mean_variance(x_t, x0_hat, schedule, t)
    if var == 0.0:
        return mean
    return mean + math.sqrt(var) * _normal_like(mean, rng)


def two_step_forward(x0: torch.Tensor, schedule: VarianceSchedule,
                     rng: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (x1, x2) by applying the first two steps of ``schedule`` in sequence."""
    if schedule.T < 2:
        raise ParameterError("two-step forward needs a schedule with T >= 2")
    x1 = diffuse_step(x0, schedule.betas[0], rng)
    x2 = diffuse_step(x1, schedule.betas[1], rng)
    return x1, x2


def ddpm_reverse_step(x_t: torch.Tensor, eps_hat: torch.Tensor, schedule: VarianceSchedule, t: int,
                      rng: torch.Generator | None = None, clip: bool = True) -> torch.Tensor:
    """Reverse step from a noise prediction: recover x0_hat, then sample the posterior."""
    a, s = schedule.marginal_coefficients(t)
    x0_hat = (x_t - s * eps_hat) / a
    if clip:
        x0_hat = x0_hat.clamp(-1.0, 1.0)
    return posterior_sample(x_t, x0_hat, schedule, t, rng)


def make_schedule(betas: Sequence[float] | VarianceSchedule) -> VarianceSchedule:
    if isinstance(betas, VarianceSchedule):
        return betas
    return VarianceSchedule(tuple(betas))
