"""Noise schedules and discrete diffusion steps.

Timestep convention: t = 0 is clean data; ``beta`` entries cover t = 1..T.
``alpha_bar`` has length T+1 with ``alpha_bar[0] = 1`` so that the marginal

    z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps

holds for every t >= 0.  The deterministic reverse step drops the injected
noise of the stochastic sampler, making whole chains reproducible; the
conditioned sampler runs that step on the diffusion slot of a concatenated
latent while leaving the conditioning slot untouched.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

__all__ = [
    "NoiseSchedule",
    "build_schedule",
    "LatentState",
    "forward_step",
    "forward_marginal",
    "ddpm_reverse_step",
    "ddim_reverse_step",
    "reverse_diffusion",
    "reverse_diffusion_trajectory",
]

Predictor = Callable[["LatentState", int], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule with derived products.

    beta[i] is the variance increment of timestep t = i+1; alpha = 1 - beta;
    alpha_bar[t] is the running product of alpha over steps 1..t (length T+1,
    alpha_bar[0] = 1).
    """

    beta: np.ndarray
    beta_start: float = field(repr=False, default=float("nan"))
    beta_end: float = field(repr=False, default=float("nan"))

    def __post_init__(self) -> None:
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty 1-D array")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ValueError("beta entries must lie in (0, 1)")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", 1.0 - beta)
        ab = np.empty(beta.size + 1, dtype=np.float64)
        ab[0] = 1.0
        ab[1:] = np.cumprod(1.0 - beta)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def beta_at(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} out of range 1..{self.T}")
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        return 1.0 - self.beta_at(t)

    def alpha_bar_at(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise IndexError(f"timestep {t} out of range 0..{self.T}")
        return float(self.alpha_bar[t])

    def content_hash(self) -> str:
        return hashlib.sha256(self.beta.tobytes()).hexdigest()[:16]

    def to_text(self) -> str:
        if not np.isfinite(self.beta_start):
            raise ValueError("only linear schedules built by build_schedule serialize to text")
        return f"{self.T} {self.beta_start!r} {self.beta_end!r}\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @staticmethod
    def load(path: str | Path) -> "NoiseSchedule":
        parts = Path(path).read_text().split()
        if len(parts) != 3:
            raise IOError(f"malformed schedule file {path}")
        return build_schedule(int(parts[0]), float(parts[1]), float(parts[2]))


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear beta schedule from beta_start to beta_end over T steps."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    return NoiseSchedule(beta, beta_start=beta_start, beta_end=beta_end)


@dataclass(frozen=True)
class LatentState:
    """Concatenated latent [a, z]: conditioning slot a, diffusion slot z."""

    a: np.ndarray
    z: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "a", np.atleast_1d(np.asarray(self.a, dtype=np.float64)))
        object.__setattr__(self, "z", np.atleast_1d(np.asarray(self.z, dtype=np.float64)))

    @property
    def s1(self) -> int:
        return int(self.a.size)

    @property
    def s2(self) -> int:
        return int(self.z.size)

    def concat(self) -> np.ndarray:
        return np.concatenate([self.a, self.z])

    @staticmethod
    def from_concat(vec: np.ndarray, s1: int) -> "LatentState":
        vec = np.asarray(vec, dtype=np.float64)
        return LatentState(vec[:s1], vec[s1:])

    def with_z(self, z: np.ndarray) -> "LatentState":
        return LatentState(self.a, z)


def _match(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def forward_step(z_prev: np.ndarray, beta_t: float, eps: np.ndarray) -> np.ndarray:
    """One forward noising step: sqrt(1-beta_t) z_{t-1} + sqrt(beta_t) eps."""
    _match(z_prev, eps, "forward_step")
    return np.sqrt(1.0 - beta_t) * np.asarray(z_prev) + np.sqrt(beta_t) * np.asarray(eps)


def forward_marginal(z0: np.ndarray, alpha_bar_t: float, eps: np.ndarray) -> np.ndarray:
    """Jump to timestep t directly: sqrt(ab_t) z_0 + sqrt(1-ab_t) eps."""
    if not 0.0 < alpha_bar_t <= 1.0:
        raise ValueError(f"alpha_bar_t must be in (0, 1], got {alpha_bar_t}")
    _match(z0, eps, "forward_marginal")
    return np.sqrt(alpha_bar_t) * np.asarray(z0) + np.sqrt(1.0 - alpha_bar_t) * np.asarray(eps)


def ddpm_reverse_step(
    z_t: np.ndarray,
    eps_hat: np.ndarray,
    schedule: NoiseSchedule,
    t: int,
    noise: np.ndarray,
) -> np.ndarray:
    """Stochastic reverse step:
    (z_t - beta_t/sqrt(1-ab_t) eps_hat)/sqrt(alpha_t) + sqrt(beta_t) noise.
    """
    _match(z_t, eps_hat, "ddpm_reverse_step")
    _match(z_t, noise, "ddpm_reverse_step noise")
    beta = schedule.beta_at(t)
    alpha = schedule.alpha_at(t)
    ab = schedule.alpha_bar_at(t)
    mean = (np.asarray(z_t) - beta / np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(alpha)
    return mean + np.sqrt(beta) * np.asarray(noise)


def ddim_reverse_step(
    z_i: np.ndarray,
    eps_hat: np.ndarray,
    alpha_bar_i: float,
    alpha_bar_prev: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic reverse step; returns (z_{i-1}, implied clean estimate).

    z_hat = (z_i - sqrt(1-ab_i) eps_hat) / sqrt(ab_i)
    z_{i-1} = sqrt(ab_{i-1}) z_hat + sqrt(1-ab_{i-1}) eps_hat
    """
    if alpha_bar_i <= 0.0 or alpha_bar_prev <= 0.0:
        raise ValueError("alpha_bar values must be positive")
    _match(z_i, eps_hat, "ddim_reverse_step")
    z_i = np.asarray(z_i, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    z_hat = (z_i - np.sqrt(1.0 - alpha_bar_i) * eps_hat) / np.sqrt(alpha_bar_i)
    z_prev = np.sqrt(alpha_bar_prev) * z_hat + np.sqrt(1.0 - alpha_bar_prev) * eps_hat
    return z_prev, z_hat


def reverse_diffusion_trajectory(
    state: LatentState,
    steps: int,
    predictor: Predictor,
    schedule: NoiseSchedule,
) -> list[LatentState]:
    """All intermediate states [v_p, v_{p-1}, ..., v_0] of the conditioned sampler.

    The input's diffusion slot is used as z_p (no internal resampling); the
    conditioning slot is re-attached unchanged at every step.
    """
    if not 1 <= steps <= schedule.T:
        raise ValueError(f"steps must be in 1..{schedule.T}, got {steps}")
    traj = [state]
    for i in range(steps, 0, -1):
        eps_hat = np.asarray(predictor(state, i), dtype=np.float64)
        if eps_hat.shape != state.z.shape:
            raise ValueError(
                f"predictor returned shape {eps_hat.shape}, expected {state.z.shape}"
            )
        z_prev, _ = ddim_reverse_step(
            state.z, eps_hat, schedule.alpha_bar_at(i), schedule.alpha_bar_at(i - 1)
        )
        state = state.with_z(z_prev)
        traj.append(state)
    return traj


def reverse_diffusion(
    state: LatentState,
    steps: int,
    predictor: Predictor,
    schedule: NoiseSchedule,
) -> LatentState:
    """Run the deterministic sampler for ``steps`` steps; returns v_0."""
    return reverse_diffusion_trajectory(state, steps, predictor, schedule)[-1]
