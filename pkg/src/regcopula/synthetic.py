"""Synthetic data generators for experiments and tests."""

from __future__ import annotations

import numpy as np

from .bases import build_bspline_design, make_design
from .config import Dataset
from .copula import CopulaState, normalization
from .priors import Ar2Hyper


def heteroscedastic_dataset(n: int, seed: int) -> Dataset:
    """Smooth mean, smoothly varying scale, right-skewed noise.

    y = f(x) + s(x) * e with f(x) = sin(2 pi x) + 2x, s(x) in [0.25, 1.15]
    peaking at the ends, and e a centered standardized Gamma(2) variable.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, n)
    f = np.sin(2 * np.pi * x) + 2.0 * x
    scale = 0.25 + 0.9 * (x - 0.5) ** 2 * 4.0
    noise = (rng.gamma(2.0, 1.0, n) - 2.0) / np.sqrt(2.0)
    y = f + scale * noise
    X = x[:, None]
    return Dataset(y, X, X.copy(), "y", ["x"], ["x"])


def smooth_coefficients(p: int, amplitude: float, phase: float = 0.0) -> np.ndarray:
    """A slowly varying coefficient vector for basis functions."""
    t = np.linspace(0.0, 1.0, p)
    return amplitude * (np.sin(2 * np.pi * t + phase) + 0.4 * np.cos(4 * np.pi * t))


def hpsc_dataset(
    n: int,
    p1: int,
    p2: int,
    seed: int,
    beta_scale: float = 1.2,
    alpha_scale: float = 0.8,
) -> tuple[Dataset, CopulaState]:
    """Data generated from the heteroscedastic pseudo-response model itself.

    The pseudo-responses are conditionally Gaussian with smooth mean and
    log-variance functions; the observed response is a fixed monotone
    transform (sinh) of the standardized pseudo-response, which makes the
    margin non-Gaussian while keeping the generating state known.
    """
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0.0, 1.0, n))
    B, _ = build_bspline_design(x, p1)
    V, _ = build_bspline_design(x, p2)
    design = make_design(B, V)
    state = CopulaState(
        "hpsc",
        smooth_coefficients(p1, beta_scale),
        Ar2Hyper(1.0, 0.4, -0.1),
        smooth_coefficients(p2, alpha_scale, phase=1.0),
        Ar2Hyper(0.5, 0.2, 0.0),
    )
    cache = normalization(state, design)
    s = np.sqrt(cache.s2)
    z = s * (B @ state.beta) + np.sqrt(cache.s2 * cache.sigma2) * rng.standard_normal(n)
    y = np.sinh(z)
    X = x[:, None]
    return Dataset(y, X, X.copy(), "y", ["x"], ["x"]), state
