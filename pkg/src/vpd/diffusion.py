"""Noise schedules, the Gaussian forward process, and the filtered reverse sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import ShapeError
from .volume import ONE_HOT, HypothesisPlanes, normalize_along_depth, online_filter

# model(y_t, prior, t, contexts) -> estimate of the clean volume, same shape as prior
Denoiser = Callable[[np.ndarray, np.ndarray, int, Sequence], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step retention ``alphas[t-1]`` and cumulative products ``alpha_bars[t-1]`` for t = 1..T."""

    alphas: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        if a.ndim != 1 or a.size < 1:
            raise ValueError("schedule needs at least one step")
        if not np.all((a > 0) & (a < 1)):
            raise ValueError("every alpha must lie strictly inside (0, 1)")
        a.setflags(write=False)
        bars = np.cumprod(a)
        bars.setflags(write=False)
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "_bars", bars)

    @property
    def T(self) -> int:
        return self.alphas.size

    @property
    def alpha_bars(self) -> np.ndarray:
        return self._bars

    @property
    def betas(self) -> np.ndarray:
        return 1.0 - self.alphas

    def alpha(self, t: int) -> float:
        self._check(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative retention at step ``t``; step 0 is the clean volume (1.0)."""
        if t == 0:
            return 1.0
        self._check(t)
        return float(self._bars[t - 1])

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")


def make_schedule(T: int = 1000, kind: str = "linear", beta_start: float = 1e-4,
                  beta_end: float = 0.02, cosine_offset: float = 0.008) -> NoiseSchedule:
    """Linear-beta or squared-cosine schedule.

    The cosine form ignores the beta bounds except that betas are capped at 0.999.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T)
    elif kind == "cosine":
        s = cosine_offset
        f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * np.pi / 2) ** 2
        bars = f / f[0]
        betas = np.clip(1 - bars[1:] / bars[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(1.0 - betas)


def forward_sample(y0: np.ndarray, t: int, schedule: NoiseSchedule, noise: np.ndarray) -> np.ndarray:
    """Draw y_t from the closed-form marginal given the clean volume and a noise draw."""
    y0 = np.asarray(y0)
    noise = np.asarray(noise)
    if noise.shape != y0.shape:
        raise ShapeError(f"noise {noise.shape} does not match volume {y0.shape}")
    schedule._check(t)
    ab = schedule.alpha_bar(t)
    return (np.sqrt(ab) * y0 + np.sqrt(1 - ab) * noise).astype(y0.dtype, copy=False)


def forward_step(y_prev: np.ndarray, t: int, schedule: NoiseSchedule, noise: np.ndarray) -> np.ndarray:
    """One Markov transition from step t-1 to step t."""
    a = schedule.alpha(t)
    return np.sqrt(a) * y_prev + np.sqrt(1 - a) * noise


def predicted_noise(y_t: np.ndarray, t: int, y0_hat: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    ab = schedule.alpha_bar(t)
    return (y_t - np.sqrt(ab) * y0_hat) / np.sqrt(1 - ab)


def reverse_step(y_t: np.ndarray, t: int, y0_hat: np.ndarray, schedule: NoiseSchedule,
                 eta: float = 0.0, t_prev: int | None = None,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Move from step ``t`` to ``t_prev`` (default t-1) given an estimate of the clean volume.

    eta = 0 is deterministic; eta > 0 injects fresh noise drawn from ``rng``.
    """
    if t == 0:
        raise ValueError("chain already at t = 0")
    schedule._check(t)
    t_prev = t - 1 if t_prev is None else t_prev
    if not 0 <= t_prev < t:
        raise ValueError(f"previous step {t_prev} must lie in [0, {t})")
    y_t = np.asarray(y_t)
    y0_hat = np.asarray(y0_hat)
    if y_t.shape != y0_hat.shape:
        raise ShapeError(f"estimate {y0_hat.shape} does not match state {y_t.shape}")
    ab_t = schedule.alpha_bar(t)
    ab_p = schedule.alpha_bar(t_prev)
    eps = predicted_noise(y_t, t, y0_hat, schedule)
    sigma = eta * np.sqrt((1 - ab_p) / (1 - ab_t) * (1 - ab_t / ab_p)) if eta else 0.0
    out = np.sqrt(ab_p) * y0_hat + np.sqrt(max(1 - ab_p - sigma ** 2, 0.0)) * eps
    if sigma:
        if rng is None:
            raise ValueError("stochastic reverse steps need an rng")
        out = out + sigma * rng.standard_normal(y_t.shape)
    return out.astype(y_t.dtype, copy=False)


def sampling_timesteps(num_iterations: int, T: int) -> list[int]:
    """``num_iterations`` timesteps evenly spread over [1, T], descending."""
    if num_iterations < 1:
        raise ValueError(f"need at least one iteration, got {num_iterations}")
    if num_iterations > T:
        raise ValueError(f"{num_iterations} iterations exceed the {T}-step chain")
    return [int(t) for t in np.round(np.linspace(T, 1, num_iterations))]


def sample(prior: np.ndarray, contexts, model: Denoiser, schedule: NoiseSchedule,
           num_iterations: int, seed: int, planes: HypothesisPlanes, use_filter: bool = True,
           filter_mode: str = ONE_HOT, eta: float = 0.0) -> np.ndarray:
    """Refine ``prior`` by running the reverse chain from pure noise.

    At each visited step the model's clean-volume estimate is filtered (when
    enabled) and then used for the reverse update. Returns the last estimate,
    normalized along D.
    """
    prior = np.asarray(prior)
    rng = np.random.default_rng(seed)
    y = rng.standard_normal(prior.shape).astype(prior.dtype)
    steps = sampling_timesteps(num_iterations, schedule.T)
    y0_hat = None
    for i, t in enumerate(steps):
        y0_hat = np.asarray(model(y, prior, t, contexts))
        if y0_hat.shape != prior.shape:
            raise ShapeError(f"model returned {y0_hat.shape}, expected {prior.shape}")
        if use_filter:
            y0_hat = online_filter(y0_hat, planes, filter_mode)
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        y = reverse_step(y, t, y0_hat, schedule, eta, t_prev, rng)
    return normalize_along_depth(y0_hat)
