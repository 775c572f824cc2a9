"""Gaussian variational approximation with factor covariance, calibrated by
stochastic gradient ascent on the evidence lower bound.

The approximation is N(mu, Psi Psi' + diag(d)^2) with Psi a p x K
lower-triangular factor loading matrix (strict upper triangle zero, diagonal
unconstrained). Gradients use the reparameterization trick with a single
draw per step: theta = mu + Psi xi + d o delta, zeta = (xi, delta) ~ N(0, I).
The per-draw gradient is the pathwise derivative of log h(theta) -
log q(theta) with the variational parameters inside log q held fixed, which
vanishes identically at an exact-family optimum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, NumericalError

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class VariationalParams:
    mu: np.ndarray   # (p,)
    Psi: np.ndarray  # (p, K), strictly upper triangle zero
    d: np.ndarray    # (p,), any sign; the variance uses d^2

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.Psi = np.atleast_2d(np.asarray(self.Psi, dtype=float))
        if self.Psi.size == 0:
            self.Psi = self.Psi.reshape(self.mu.size, 0)
        self.d = np.asarray(self.d, dtype=float)
        p = self.mu.size
        if self.Psi.shape[0] != p or self.d.size != p:
            raise ConfigurationError("variational parameter shapes disagree")
        self.Psi = np.tril(self.Psi)

    @property
    def p(self) -> int:
        return self.mu.size

    @property
    def K(self) -> int:
        return self.Psi.shape[1]

    def covariance(self) -> np.ndarray:
        return self.Psi @ self.Psi.T + np.diag(self.d**2)


def draw_and_transform(vp: VariationalParams, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One reparameterized draw; the generating noise is returned for gradient assembly."""
    zeta = rng.standard_normal(vp.K + vp.p)
    xi, delta = zeta[: vp.K], zeta[vp.K :]
    theta = vp.mu + vp.Psi @ xi + vp.d * delta
    return theta, xi, delta


def _woodbury_pieces(vp: VariationalParams):
    d2 = vp.d**2
    if np.any(d2 <= 0) and vp.K == 0:
        raise NumericalError("singular diagonal in a factor-free approximation")
    d2 = np.maximum(d2, 1e-300)
    A = np.eye(vp.K) + (vp.Psi / d2[:, None]).T @ vp.Psi
    try:
        cho = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"factor covariance solve failed: {exc}") from exc
    return d2, cho


def upsilon_solve(vp: VariationalParams, v: np.ndarray) -> np.ndarray:
    """(Psi Psi' + diag(d)^2)^{-1} v in O(p K^2 + K^3) via the Woodbury identity."""
    d2, cho = _woodbury_pieces(vp)
    w = v / d2
    if vp.K:
        rhs = vp.Psi.T @ w
        y = np.linalg.solve(cho.T, np.linalg.solve(cho, rhs))
        w = w - (vp.Psi @ y) / d2
    return w


def log_q(vp: VariationalParams, theta: np.ndarray) -> float:
    """Gaussian log density of the approximation at theta."""
    d2, cho = _woodbury_pieces(vp)
    v = theta - vp.mu
    quad = float(v @ upsilon_solve(vp, v))
    logdet = float(np.sum(np.log(d2)) + 2.0 * np.sum(np.log(np.diag(cho))))
    return -0.5 * (vp.p * LOG_2PI + logdet + quad)


def elbo_gradient_estimate(
    vp: VariationalParams, logh_grad, rng
) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Single-draw pathwise gradient of the lower bound.

    ``logh_grad(theta)`` returns (log h, grad log h). Returns
    (grad_mu, grad_Psi, grad_d, lb_estimate); grad_Psi is dense (p, K) with
    its strict upper triangle zeroed, i.e. the vech layout kept in matrix
    form.
    """
    theta, xi, delta = draw_and_transform(vp, rng)
    lh, gh = logh_grad(theta)
    v = vp.Psi @ xi + vp.d * delta
    g = gh + upsilon_solve(vp, v)
    grad_mu = g
    grad_psi = np.tril(np.outer(g, xi)) if vp.K else np.zeros((vp.p, 0))
    grad_d = g * delta
    lb = lh - log_q(vp, theta)
    return grad_mu, grad_psi, grad_d, float(lb)


# -- ADADELTA -------------------------------------------------------------------

@dataclass
class AdadeltaState:
    """Bias-corrected exponential moving averages of g^2 and step^2."""

    eg2: np.ndarray
    ed2: np.ndarray
    t: int = 0
    rho: float = 0.95
    eps: float = 1e-6

    @staticmethod
    def zeros(size: int, rho: float = 0.95, eps: float = 1e-6) -> "AdadeltaState":
        return AdadeltaState(np.zeros(size), np.zeros(size), 0, rho, eps)


def adadelta_update(acc: AdadeltaState, grad: np.ndarray) -> np.ndarray:
    """Ascent step for the given gradient; updates the accumulators in place."""
    acc.t += 1
    acc.eg2 = acc.rho * acc.eg2 + (1.0 - acc.rho) * grad * grad
    g2 = acc.eg2 / (1.0 - acc.rho**acc.t)
    d2 = acc.ed2 / (1.0 - acc.rho ** (acc.t - 1)) if acc.t > 1 else np.zeros_like(acc.ed2)
    step = np.sqrt(d2 + acc.eps) / np.sqrt(g2 + acc.eps) * grad
    acc.ed2 = acc.rho * acc.ed2 + (1.0 - acc.rho) * step * step
    return step


# -- optimizer --------------------------------------------------------------------

@dataclass
class SgaTrace:
    lower_bound_estimates: np.ndarray
    step_count: int
    rejected_steps: int = 0

    @property
    def lb_bar(self) -> float:
        """Mean noisy lower bound over the final ceil(0.1 * steps) entries."""
        w = int(np.ceil(0.1 * self.step_count))
        return float(np.nanmean(self.lower_bound_estimates[-w:]))

    def lb_bar_se(self) -> float:
        """Batch-means standard error of lb_bar (autocorrelation-robust)."""
        w = int(np.ceil(0.1 * self.step_count))
        tail = self.lower_bound_estimates[-w:]
        tail = tail[np.isfinite(tail)]
        nb = max(2, int(np.sqrt(tail.size)))
        size = tail.size // nb
        means = tail[: nb * size].reshape(nb, size).mean(axis=1)
        return float(np.std(means, ddof=1) / np.sqrt(nb))


def maximize_elbo(
    logh_grad,
    p_theta: int,
    K: int,
    steps: int,
    seed: int,
    init: VariationalParams | None = None,
    rho: float = 0.95,
    eps_ad: float = 1e-6,
    init_d: float = 0.1,
) -> tuple[VariationalParams, SgaTrace]:
    """Run the SGA loop and return the tail-averaged variational parameters.

    Steps with a non-finite lower-bound estimate or gradient are rejected:
    the parameters and accumulators are left untouched and the rejection is
    counted.
    """
    if K < 0 or K > p_theta:
        raise ConfigurationError(f"factor count K must be in [0, {p_theta}], got {K}")
    if steps < 100:
        raise ConfigurationError("SGA needs at least 100 steps")
    rng = np.random.default_rng(seed)
    vp = init if init is not None else VariationalParams(
        np.zeros(p_theta), np.zeros((p_theta, K)), np.full(p_theta, init_d)
    )
    tril = np.tril(np.ones((p_theta, K), dtype=bool)) if K else np.zeros((p_theta, 0), dtype=bool)
    n_psi = int(tril.sum())
    acc = AdadeltaState.zeros(p_theta + n_psi + p_theta, rho, eps_ad)

    lbs = np.full(steps, np.nan)
    rejected = 0
    window = int(np.ceil(0.1 * steps))
    sum_mu = np.zeros(p_theta)
    sum_psi = np.zeros((p_theta, K))
    sum_d = np.zeros(p_theta)
    averaged = 0
    for t in range(steps):
        gm, gp, gd, lb = elbo_gradient_estimate(vp, logh_grad, rng)
        flat = np.concatenate([gm, gp[tril], gd])
        if np.isfinite(lb) and np.all(np.isfinite(flat)):
            step = adadelta_update(acc, flat)
            vp.mu = vp.mu + step[:p_theta]
            if n_psi:
                psi_step = np.zeros((p_theta, K))
                psi_step[tril] = step[p_theta : p_theta + n_psi]
                vp.Psi = np.tril(vp.Psi + psi_step)
            vp.d = vp.d + step[p_theta + n_psi :]
            lbs[t] = lb
        else:
            rejected += 1
        if t >= steps - window:
            sum_mu += vp.mu
            sum_psi += vp.Psi
            sum_d += vp.d
            averaged += 1
    vp_hat = VariationalParams(sum_mu / averaged, sum_psi / averaged, sum_d / averaged)
    return vp_hat, SgaTrace(lbs, steps, rejected)


def sample_variational(vp: VariationalParams, n: int, rng) -> np.ndarray:
    """Draws from the fitted approximation, one row per draw."""
    zeta = rng.standard_normal((n, vp.K + vp.p))
    return vp.mu + zeta[:, : vp.K] @ vp.Psi.T + zeta[:, vp.K :] * vp.d


VPARAMS_FORMAT_VERSION = 1


def save_vparams(path, vp: VariationalParams) -> None:
    with open(path, "w") as fh:
        fh.write(f"vparams-v{VPARAMS_FORMAT_VERSION}\n")
        fh.write(f"p_theta={vp.p}\nK={vp.K}\n")
        for v in vp.mu:
            fh.write(f"{v:.17g}\n")
        for i in range(vp.p):
            for j in range(min(i + 1, vp.K)):
                fh.write(f"{vp.Psi[i, j]:.17g}\n")
        for v in vp.d:
            fh.write(f"{v:.17g}\n")


def load_vparams(path) -> VariationalParams:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != f"vparams-v{VPARAMS_FORMAT_VERSION}":
            raise DataError(f"unsupported vparams header {header!r}")
        p = int(fh.readline().split("=", 1)[1])
        K = int(fh.readline().split("=", 1)[1])
        vals = [float(line) for line in fh if line.strip()]
    mu = np.array(vals[:p])
    psi = np.zeros((p, K))
    k = p
    for i in range(p):
        for j in range(min(i + 1, K)):
            psi[i, j] = vals[k]
            k += 1
    d = np.array(vals[k : k + p])
    if len(vals) != k + p:
        raise DataError("vparams file length does not match its header")
    return VariationalParams(mu, psi, d)
