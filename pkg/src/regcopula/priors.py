"""Regularization priors for the basis coefficients.

Two families: the stationary AR(2) precision parameterized by a disturbance
variance tau^2 and two partial autocorrelations (psi1, psi2), with all first
and second derivatives needed by Metropolis-Hastings proposals and gradient
code; and the horseshoe (half-Cauchy local/global scales), carried on the
log scale with Jacobians folded in.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigurationError

PSI_EPS = 0.05  # partial autocorrelations clamped to [-1 + eps, 1 - eps]
B_TAU2_DEFAULT = 10.0


@dataclass(frozen=True)
class Ar2Hyper:
    tau2: float
    psi1: float
    psi2: float

    def __post_init__(self):
        if not (self.tau2 > 0 and np.isfinite(self.tau2)):
            raise ConfigurationError(f"tau2 must be positive and finite, got {self.tau2}")
        for p in (self.psi1, self.psi2):
            if abs(p) > 1 - PSI_EPS:
                raise ConfigurationError(f"|psi| must be <= {1 - PSI_EPS}, got {p}")
            if abs(abs(p) - (1 - PSI_EPS)) < 1e-12:
                warnings.warn("psi at the clamp boundary", RuntimeWarning, stacklevel=2)


@dataclass(frozen=True)
class HorseshoeHyper:
    local_scales: np.ndarray  # lambda_j > 0, one per coefficient
    global_scale: float       # tau > 0

    def __post_init__(self):
        lam = np.asarray(self.local_scales, dtype=float)
        object.__setattr__(self, "local_scales", lam)
        if np.any(lam <= 0) or not np.all(np.isfinite(lam)):
            raise ConfigurationError("local scales must be positive and finite")
        if not (self.global_scale > 0 and np.isfinite(self.global_scale)):
            raise ConfigurationError("global scale must be positive and finite")


@dataclass(frozen=True)
class PrecisionFactor:
    """Banded factor Delta with Delta' Delta = P(psi) and its half log-det."""

    delta: np.ndarray
    logdet_half: float


def _delta_entries(psi1: float, psi2: float) -> dict[str, float]:
    s1 = np.sqrt(1.0 - psi1 * psi1)
    s2 = np.sqrt(1.0 - psi2 * psi2)
    return {
        "d11": s1 * s2,
        "d21": -psi1 * s2,
        "d22": s2,
        "sub1": -psi1 * (1.0 - psi2),  # rows >= 3, first sub-diagonal
        "sub2": -psi2,                 # rows >= 3, second sub-diagonal
        "diag": 1.0,
    }


@lru_cache(maxsize=64)
def _band_indices(p: int):
    idx = np.arange(2, p)
    return idx, idx - 1, idx - 2


def _delta_matrix(entries: dict[str, float], p: int) -> np.ndarray:
    d = np.zeros((p, p))
    d[0, 0] = entries["d11"]
    d[1, 0] = entries["d21"]
    d[1, 1] = entries["d22"]
    idx, idx1, idx2 = _band_indices(p)
    d[idx, idx] = entries["diag"]
    d[idx, idx1] = entries["sub1"]
    d[idx, idx2] = entries["sub2"]
    return d


def ar2_delta(psi1: float, psi2: float, p: int) -> PrecisionFactor:
    """Innovation-standardizing factor of a stationary AR(2) of length p."""
    if p < 3:
        raise ConfigurationError(f"AR(2) precision needs dimension >= 3, got {p}")
    delta = _delta_matrix(_delta_entries(psi1, psi2), p)
    return PrecisionFactor(delta, ar2_logdet_half(psi1, psi2))


def ar2_precision(h: Ar2Hyper, p: int) -> tuple[np.ndarray, PrecisionFactor]:
    """Scaled AR(2) precision P_theta = Delta' Delta / tau^2 and its factor."""
    factor = ar2_delta(h.psi1, h.psi2, p)
    return factor.delta.T @ factor.delta / h.tau2, factor


def ar2_logdet_half(psi1: float, psi2: float) -> float:
    """log det(P(psi))^(1/2) = log det(Delta)."""
    return 0.5 * np.log1p(-psi1 * psi1) + np.log1p(-psi2 * psi2)


def ar2_logdet_half_deriv(psi1: float, psi2: float, which: str, order: int = 1) -> float:
    if which == "psi1":
        if order == 1:
            return -psi1 / (1.0 - psi1 * psi1)
        return -(1.0 + psi1 * psi1) / (1.0 - psi1 * psi1) ** 2
    if order == 1:
        return -2.0 * psi2 / (1.0 - psi2 * psi2)
    return -2.0 * (1.0 + psi2 * psi2) / (1.0 - psi2 * psi2) ** 2


def _delta_entry_derivs(psi1: float, psi2: float, which: str, order: int) -> dict[str, float]:
    s1 = np.sqrt(1.0 - psi1 * psi1)
    s2 = np.sqrt(1.0 - psi2 * psi2)
    if which == "psi1":
        if order == 1:
            return {"d11": -psi1 * s2 / s1, "d21": -s2, "d22": 0.0,
                    "sub1": -(1.0 - psi2), "sub2": 0.0, "diag": 0.0}
        return {"d11": -s2 / s1**3, "d21": 0.0, "d22": 0.0,
                "sub1": 0.0, "sub2": 0.0, "diag": 0.0}
    if order == 1:
        return {"d11": -psi2 * s1 / s2, "d21": psi1 * psi2 / s2, "d22": -psi2 / s2,
                "sub1": psi1, "sub2": -1.0, "diag": 0.0}
    return {"d11": -s1 / s2**3, "d21": psi1 / s2**3, "d22": -1.0 / s2**3,
            "sub1": 0.0, "sub2": 0.0, "diag": 0.0}


def ar2_delta_deriv(psi1: float, psi2: float, p: int, which: str, order: int = 1) -> np.ndarray:
    """Elementwise derivative of Delta with respect to psi1 or psi2."""
    if which not in ("psi1", "psi2"):
        raise ConfigurationError(f"which must be 'psi1' or 'psi2', got {which!r}")
    return _delta_matrix(_delta_entry_derivs(psi1, psi2, which, order), p)


def ar2_precision_derivatives(
    h: Ar2Hyper, p: int, which: str
) -> tuple[np.ndarray, float]:
    """d/dpsi of the scaled precision P_theta and of log det(P(psi))^(1/2).

    Matches central finite differences of ``ar2_precision``; the log-det
    derivative is tau-free because the tau^2 scaling drops out of the
    psi-dependence.
    """
    delta = ar2_delta(h.psi1, h.psi2, p).delta
    ddelta = ar2_delta_deriv(h.psi1, h.psi2, p, which)
    dP = (ddelta.T @ delta + delta.T @ ddelta) / h.tau2
    return dP, ar2_logdet_half_deriv(h.psi1, h.psi2, which)


def ar2_precision_second_derivative(h: Ar2Hyper, p: int, which: str) -> np.ndarray:
    """d^2/dpsi^2 of the unscaled P(psi) = Delta' Delta."""
    delta = ar2_delta(h.psi1, h.psi2, p).delta
    d1 = ar2_delta_deriv(h.psi1, h.psi2, p, which, order=1)
    d2 = ar2_delta_deriv(h.psi1, h.psi2, p, which, order=2)
    return d2.T @ delta + 2.0 * (d1.T @ d1) + delta.T @ d2


# -- partial-autocorrelation transform ---------------------------------------

def psi_transform(psi: float) -> float:
    """Map psi in (-1+eps, 1-eps) to the real line."""
    b = 1.0 - PSI_EPS
    if abs(psi) >= b:
        raise ConfigurationError(f"|psi| must be < {b} for the transform")
    return float(np.log((psi + b) / (b - psi)))


def psi_untransform(t: float) -> float:
    return float((1.0 - PSI_EPS) * np.tanh(0.5 * np.asarray(t, dtype=float)))


def psi_jacobian(t):
    """d psi / d psi~ evaluated at the transformed value t."""
    e = np.exp(-np.abs(t))
    return 2.0 * (1.0 - PSI_EPS) * e / (1.0 + e) ** 2


def psi_log_jacobian(t):
    """log(d psi / d psi~) = log(2(1-eps)) + log sig(t) + log(1 - sig(t))."""
    t = np.asarray(t, dtype=float)
    return np.log(2.0 * (1.0 - PSI_EPS)) - np.abs(t) - 2.0 * np.log1p(np.exp(-np.abs(t)))


def psi_log_jacobian_deriv(t, order: int = 1):
    """Derivatives of log(d psi / d psi~): 1 - 2*sigmoid(t), then -2*sig*(1-sig)."""
    sig = 1.0 / (1.0 + np.exp(-np.asarray(t, dtype=float)))
    if order == 1:
        return 1.0 - 2.0 * sig
    return -2.0 * sig * (1.0 - sig)


# -- log-prior blocks ---------------------------------------------------------

def ar2_logprior_and_grad(
    coef: np.ndarray, h: Ar2Hyper, b_tau2: float = B_TAU2_DEFAULT
) -> tuple[float, dict[str, float | np.ndarray]]:
    """Log prior of (coef, tau2, psi1, psi2) on unconstrained coordinates.

    Coordinates are ltau2 = log(tau2) and tpsi_j = psi_transform(psi_j);
    Jacobians of both maps are included. The gradient dict has one entry per
    block: 'coef', 'ltau2', 'tpsi1', 'tpsi2'.
    """
    p = coef.size
    ltau2 = np.log(h.tau2)
    P_unscaled, factor = ar2_precision(Ar2Hyper(1.0, h.psi1, h.psi2), p)
    quad = float(coef @ (P_unscaled @ coef))
    root = np.sqrt(h.tau2 / b_tau2)
    logp = (
        -0.5 * (p - 1) * ltau2
        + factor.logdet_half
        - 0.5 * quad / h.tau2
        - root
        + float(np.sum([psi_log_jacobian(psi_transform(ps)) for ps in (h.psi1, h.psi2)]))
    )
    grads: dict[str, float | np.ndarray] = {
        "coef": -(P_unscaled @ coef) / h.tau2,
        "ltau2": -0.5 * (p - 1) + 0.5 * quad / h.tau2 - 0.5 * root,
    }
    for j, (name, psi) in enumerate([("tpsi1", h.psi1), ("tpsi2", h.psi2)], start=1):
        t = psi_transform(psi)
        which = f"psi{j}"
        dPu = ar2_delta_deriv(h.psi1, h.psi2, p, which)
        delta = factor.delta
        dP = dPu.T @ delta + delta.T @ dPu
        dpsi = (
            ar2_logdet_half_deriv(h.psi1, h.psi2, which)
            - 0.5 * float(coef @ (dP @ coef)) / h.tau2
        )
        grads[name] = float(psi_log_jacobian_deriv(t)) + dpsi * float(psi_jacobian(t))
    return logp, grads


def horseshoe_logprior_and_grad(
    coef: np.ndarray, h: HorseshoeHyper
) -> tuple[float, dict[str, float | np.ndarray]]:
    """Horseshoe log prior on (coef, log lambda_j^2, log tau) with gradients.

    The hierarchy is coef_j | lambda_j ~ N(0, lambda_j^2),
    lambda_j | tau ~ C+(0, tau), tau ~ C+(0, 1), with the scale parameters
    carried on the log scale.
    """
    lam2 = h.local_scales**2
    tau2 = h.global_scale**2
    p = coef.size
    ratio = lam2 / tau2
    logp = float(
        0.5 * np.sum(np.log(lam2))
        - 0.5 * np.sum(coef**2 / lam2)
        - (p - 1) * np.log(h.global_scale)
        - np.sum(np.log1p(ratio))
        - np.log1p(tau2)
    )
    grads = {
        "coef": -coef / lam2,
        "log_lambda2": 0.5 * coef**2 / lam2 - ratio / (1.0 + ratio) + 0.5,
        "log_tau": float(-(p - 1) + 2.0 * np.sum(ratio / (1.0 + ratio)) - 2.0 * tau2 / (1.0 + tau2)),
    }
    return logp, grads
