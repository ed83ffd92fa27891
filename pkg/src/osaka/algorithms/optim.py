"""ADAM and Bayesian Gradient Descent on lists / vectors of float64 arrays."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from ..ndcore import NonFiniteError

SIGMA_FLOOR = 1e-10


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kw)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float):
    """One bias-corrected ADAM step. Mutates ``state``; returns new arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient passed to adam_step")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


@dataclass(frozen=True)
class BgdState:
    mu: np.ndarray
    sigma: np.ndarray
    mc_samples: int = 5
    beta: float = 1.0
    sigma0: float = 0.01

    @classmethod
    def init(cls, mu: np.ndarray, sigma0: float, mc_samples: int = 5, beta: float = 1.0):
        mu = np.asarray(mu, dtype=np.float64)
        return cls(mu.copy(), np.full_like(mu, sigma0), mc_samples, beta, sigma0)


def bgd_step(state: BgdState, grad_fn: Callable[[np.ndarray], np.ndarray], rng) -> BgdState:
    """Closed-form BGD update with Monte Carlo expectations.

    Samples ``phi = mu + sigma * eps`` and applies

        mu    <- mu - beta * sigma**2 * E[g]
        sigma <- sigma * sqrt(1 + sigma * E[g * eps] / 2) - sigma * E[g * eps] / 2

    with both expectations over the same draws.
    """
    if state.mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    eps = rng.standard_normal((state.mc_samples, state.mu.size))
    mean_g = np.zeros_like(state.mu)
    mean_ge = np.zeros_like(state.mu)
    for k in range(state.mc_samples):
        g = np.asarray(grad_fn(state.mu + state.sigma * eps[k]), dtype=np.float64)
        mean_g += g
        mean_ge += g * eps[k]
    mean_g /= state.mc_samples
    mean_ge /= state.mc_samples
    if not (np.all(np.isfinite(mean_g)) and np.all(np.isfinite(mean_ge))):
        raise NonFiniteError("non-finite BGD expectations")

    s = state.sigma
    half = 0.5 * s * mean_ge
    radicand = 1.0 + half
    if np.any(radicand < 0):
        raise NonFiniteError("BGD sigma update left the domain of the square root")
    mu = state.mu - state.beta * s * s * mean_g
    sigma = np.maximum(s * np.sqrt(radicand) - half, SIGMA_FLOOR)
    return replace(state, mu=mu, sigma=sigma)
