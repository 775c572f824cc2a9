"""Exact posterior sampling: Gibbs update for beta, mode-and-curvature
Metropolis-Hastings for each scalar hyperparameter, and Hamiltonian Monte
Carlo with dual-averaging step-size adaptation for alpha.

One sweep updates, in order: beta, tau2_beta, psi_beta_1, psi_beta_2,
alpha (HMC), tau2_alpha, psi_alpha_1, psi_alpha_2. The homoscedastic model
runs the same sweep with the alpha-block steps skipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular

from .bases import DesignMatrices
from .copula import CopulaState, PosteriorDraws, state_to_theta, theta_labels
from .errors import ConfigurationError, NumericalError
from .margins import MarginModel, margin_log_jacobian, to_copula_scale
from .priors import (
    Ar2Hyper,
    B_TAU2_DEFAULT,
    ar2_delta,
    ar2_delta_deriv,
    ar2_logdet_half,
    ar2_logdet_half_deriv,
    psi_jacobian,
    psi_log_jacobian,
    psi_log_jacobian_deriv,
    psi_transform,
    psi_untransform,
)

LOG_2PI = np.log(2.0 * np.pi)


# -- Hamiltonian Monte Carlo ---------------------------------------------------

@dataclass
class DualAveragingState:
    """Step-size adaptation state; eps freezes at eps_bar once m exceeds M_adapt."""

    eps: float
    mu: float
    M_adapt: int
    eps_bar: float = 1.0
    H_bar: float = 0.0
    m: int = 0
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75
    delta: float = 0.75
    iota: float = 1.0

    def update(self, accept_prob: float) -> None:
        self.m += 1
        if self.m <= self.M_adapt:
            frac = 1.0 / (self.m + self.t0)
            self.H_bar = (1.0 - frac) * self.H_bar + frac * (self.delta - accept_prob)
            log_eps = self.mu - np.sqrt(self.m) / self.gamma * self.H_bar
            w = self.m ** (-self.kappa)
            log_eps_bar = w * log_eps + (1.0 - w) * np.log(self.eps_bar)
            self.eps = float(np.exp(log_eps))
            self.eps_bar = float(np.exp(log_eps_bar))
        else:
            self.eps = self.eps_bar


def leapfrog(q, r, eps, n_steps, grad_fn):
    """Symplectic leapfrog integrator; returns final position and momentum."""
    q = np.array(q, dtype=float)
    r = np.array(r, dtype=float)
    g = grad_fn(q)
    for _ in range(n_steps):
        r = r + 0.5 * eps * g
        q = q + eps * r
        g = grad_fn(q)
        r = r + 0.5 * eps * g
    return q, r


def hmc_step(q0, logp_grad, eps: float, iota: float, rng) -> tuple[np.ndarray, float, bool]:
    """One HMC proposal with identity mass matrix and L = max(1, round(iota/eps)).

    Returns (new position, acceptance probability, accepted flag). A
    non-finite Hamiltonian rejects with acceptance probability zero.
    """
    r0 = rng.standard_normal(np.size(q0))
    n_steps = max(1, int(round(iota / eps)))
    lp0, g = logp_grad(q0)
    q, r = np.array(q0, dtype=float), r0.copy()
    lp1 = -np.inf
    diverged = False
    for _ in range(n_steps):
        r = r + 0.5 * eps * g
        q = q + eps * r
        if not np.all(np.isfinite(q)):
            diverged = True
            break
        lp1, g = logp_grad(q)
        if not np.all(np.isfinite(g)) or not np.isfinite(lp1):
            diverged = True
            break
        r = r + 0.5 * eps * g
    if diverged:
        accept_prob = 0.0
    else:
        log_ratio = (lp1 - 0.5 * r @ r) - (lp0 - 0.5 * r0 @ r0)
        accept_prob = float(np.exp(min(0.0, log_ratio))) if np.isfinite(log_ratio) else 0.0
    accepted = rng.uniform() < accept_prob
    return (q if accepted else np.array(q0, dtype=float)), accept_prob, bool(accepted)


def find_reasonable_eps(q0, logp_grad, rng, eps0: float = 1.0) -> float:
    """Double or halve eps from 1 until one-step acceptance crosses 0.5."""
    lp0, g0 = logp_grad(q0)
    r0 = rng.standard_normal(np.size(q0))

    def one_step_accept(eps: float) -> float:
        r = r0 + 0.5 * eps * g0
        q = q0 + eps * r
        lp1, g1 = logp_grad(q)
        if not (np.isfinite(lp1) and np.all(np.isfinite(g1))):
            return 0.0
        r = r + 0.5 * eps * g1
        return float(np.exp(min(0.0, (lp1 - 0.5 * r @ r) - (lp0 - 0.5 * r0 @ r0))))

    eps = eps0
    direction = 1.0 if one_step_accept(eps) > 0.5 else -1.0
    for _ in range(60):
        eps = eps * (2.0 if direction > 0 else 0.5)
        crossed = (one_step_accept(eps) > 0.5) != (direction > 0)
        if crossed:
            break
    return eps


# -- scalar Metropolis-Hastings -------------------------------------------------

MH_FALLBACK_SCALE = 0.1


def _proposal(x: float, grad: float, hess: float) -> tuple[float, float, bool]:
    """Gaussian proposal from one Newton step; symmetric random walk when the
    curvature is not negative (flagged)."""
    if np.isfinite(hess) and hess < -1e-12 and np.isfinite(grad):
        return x - grad / hess, float(np.sqrt(-1.0 / hess)), False
    return x, MH_FALLBACK_SCALE, True


def _norm_logpdf(x: float, mean: float, sd: float) -> float:
    return -0.5 * ((x - mean) / sd) ** 2 - np.log(sd) - 0.5 * LOG_2PI


def mh_mode_curvature_step(target, x0: float, rng) -> tuple[float, bool, bool]:
    """One MH update of a scalar with a mode/curvature-matched Gaussian proposal.

    ``target(x)`` returns (log density, first derivative, second derivative).
    The proposal density is evaluated at both ends, so detailed balance holds
    even though the kernel is state-dependent. Returns (value, accepted,
    fallback_used).
    """
    l0, g0, h0 = target(x0)
    m0, s0, fb0 = _proposal(x0, g0, h0)
    x1 = float(rng.normal(m0, s0))
    l1, g1, h1 = target(x1)
    if not np.isfinite(l1):
        rng.uniform()  # keep the draw stream aligned with the accept branch
        return x0, False, fb0
    m1, s1, fb1 = _proposal(x1, g1, h1)
    log_acc = (l1 - l0) + _norm_logpdf(x0, m1, s1) - _norm_logpdf(x1, m0, s0)
    accepted = bool(np.log(rng.uniform()) < log_acc)
    return (x1 if accepted else x0), accepted, fb0 or fb1


# -- sweep state ----------------------------------------------------------------

class _Sweep:
    """Mutable state of one chain with the caches the block updates need."""

    def __init__(self, design: DesignMatrices, z: np.ndarray, cfg: "McmcConfig"):
        self.design = design
        self.z = z
        self.cfg = cfg
        self.n = design.n
        self.beta = np.zeros(design.p1)
        self.alpha = np.zeros(design.p2)
        self.tau2_beta = cfg.init_tau2
        self.psi_beta = [cfg.init_psi1, cfg.init_psi2]
        self.tau2_alpha = cfg.init_tau2
        self.psi_alpha = [cfg.init_psi1, cfg.init_psi2]
        self._refresh_beta_prior()
        self._refresh_alpha_prior()
        self._refresh_sigma()
        self.bb = self.design.B @ self.beta

    # cache refreshes
    def _refresh_beta_prior(self):
        p1 = self.design.p1
        self.delta_beta = ar2_delta(self.psi_beta[0], self.psi_beta[1], p1).delta
        y = solve_triangular(self.delta_beta, self.design.unique_b.T, trans="T", lower=True)
        self.c_unique = np.sum(y * y, axis=0)  # b' P(psi)^{-1} b at tau2 = 1
        self.quad = self.tau2_beta * self.c_unique[self.design.b_index]

    def _refresh_alpha_prior(self):
        if self.design.p2:
            delta = ar2_delta(self.psi_alpha[0], self.psi_alpha[1], self.design.p2).delta
            self.P0_alpha = delta.T @ delta
            self.Pa = self.P0_alpha / self.tau2_alpha
        else:
            self.P0_alpha = np.zeros((0, 0))
            self.Pa = np.zeros((0, 0))

    def _refresh_sigma(self):
        if self.cfg.alpha_steps:
            eta = self.design.V @ self.alpha
            with np.errstate(over="ignore"):
                self.sigma2 = np.clip(np.exp(eta), 1e-300, 1e300)
        else:
            self.sigma2 = np.ones(self.n)
        self.s2 = 1.0 / (self.sigma2 + self.quad)

    # likelihood pieces at the current caches
    def _ll_terms(self, quad=None, sigma2=None):
        s2 = 1.0 / ((self.sigma2 if sigma2 is None else sigma2) + (self.quad if quad is None else quad))
        sig2 = self.sigma2 if sigma2 is None else sigma2
        s = np.sqrt(s2)
        bb = self.bb
        t = self.z - s * bb
        value = -0.5 * np.sum(np.log(s2) + np.log(sig2)) - 0.5 * np.sum(t * t / (s2 * sig2))
        d1 = 0.5 * s2 - 0.5 / sig2 * t * (bb * s + t)
        d2 = -0.5 * s2 * s2 - 0.25 / sig2 * bb * s * s2 * (bb * s + t)
        return value, d1, d2

    # -- block updates
    def step_beta(self, rng):
        P = (self.delta_beta.T @ self.delta_beta) / self.tau2_beta
        Bw = self.design.B / self.sigma2[:, None]
        A = self.design.B.T @ Bw + P
        try:
            L = cholesky(A, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"beta precision factorization failed: {exc}") from exc
        rhs = self.design.B.T @ (self.z / (self.sigma2 * np.sqrt(self.s2)))
        mu = cho_solve((L, True), rhs)
        self.beta = mu + solve_triangular(L.T, rng.standard_normal(self.design.p1), lower=False)
        self.bb = self.design.B @ self.beta

    def _tau2_beta_target(self, u: float):
        tau2 = np.exp(u)
        quad = tau2 * self.c_unique[self.design.b_index]
        value, d1, d2 = self._ll_terms(quad=quad)
        P0 = self.delta_beta.T @ self.delta_beta
        bPb = float(self.beta @ (P0 @ self.beta))
        root = np.sqrt(tau2 / self.cfg.b_tau2)
        p1 = self.design.p1
        value += -0.5 * (p1 - 1) * u - 0.5 * bPb / tau2 - root
        g = float(np.sum(d1 * quad)) - 0.5 * (p1 - 1) + 0.5 * bPb / tau2 - 0.5 * root
        h = float(np.sum(d2 * quad * quad + d1 * quad)) - 0.5 * bPb / tau2 - 0.25 * root
        return value, g, h

    def step_tau2_beta(self, rng):
        u, acc, fb = mh_mode_curvature_step(self._tau2_beta_target, np.log(self.tau2_beta), rng)
        if acc:
            self.tau2_beta = float(np.exp(u))
            self.quad = self.tau2_beta * self.c_unique[self.design.b_index]
            self._refresh_sigma()
        return acc, fb

    def _psi_target(self, j: int, block: str):
        """Target for transformed psi_{block,j}; j in {0, 1}."""
        design = self.design
        coef = self.beta if block == "beta" else self.alpha
        tau2 = self.tau2_beta if block == "beta" else self.tau2_alpha
        psis = self.psi_beta if block == "beta" else self.psi_alpha
        which = f"psi{j + 1}"
        p = coef.size

        def target(t: float):
            psi = list(psis)
            psi[j] = psi_untransform(t)
            if abs(psi[j]) >= 1 - 1e-9:
                return -np.inf, np.nan, np.nan
            delta = ar2_delta(psi[0], psi[1], p).delta
            d1D = ar2_delta_deriv(psi[0], psi[1], p, which, order=1)
            d2D = ar2_delta_deriv(psi[0], psi[1], p, which, order=2)
            dP = d1D.T @ delta + delta.T @ d1D
            d2P = d2D.T @ delta + 2.0 * (d1D.T @ d1D) + delta.T @ d2D
            Pc = delta @ coef
            dPc = dP @ coef
            cPc = float(Pc @ Pc)
            cdPc = float(coef @ dPc)
            cd2Pc = float(coef @ (d2P @ coef))
            ld = ar2_logdet_half(psi[0], psi[1])
            ld1 = ar2_logdet_half_deriv(psi[0], psi[1], which, 1)
            ld2 = ar2_logdet_half_deriv(psi[0], psi[1], which, 2)
            value = psi_log_jacobian(t) + ld - 0.5 * cPc / tau2
            dpsi = ld1 - 0.5 * cdPc / tau2
            d2psi = ld2 - 0.5 * cd2Pc / tau2
            if block == "beta":
                y = solve_triangular(delta, design.unique_b.T, trans="T",
                                     lower=True, check_finite=False)
                g_u = solve_triangular(delta, y, lower=True, check_finite=False)
                quad = tau2 * (y * y).sum(axis=0)[design.b_index]
                llv, d1l, d2l = self._ll_terms(quad=quad)
                value += llv
                w = dP @ g_u
                pinv_w = solve_triangular(
                    delta,
                    solve_triangular(delta, w, trans="T", lower=True, check_finite=False),
                    lower=True, check_finite=False,
                )
                dq_u = -tau2 * (g_u * w).sum(axis=0)
                d2q_u = tau2 * (2.0 * (w * pinv_w).sum(axis=0) - (g_u * (d2P @ g_u)).sum(axis=0))
                dq = dq_u[design.b_index]
                d2q = d2q_u[design.b_index]
                dpsi += float(d1l @ dq)
                d2psi += float(d2l @ (dq * dq) + d1l @ d2q)
            jac = float(psi_jacobian(t))
            djac = jac * float(psi_log_jacobian_deriv(t, 1))
            g = float(psi_log_jacobian_deriv(t, 1)) + dpsi * jac
            h = float(psi_log_jacobian_deriv(t, 2)) + d2psi * jac * jac + dpsi * djac
            return value, g, h

        return target

    def step_psi(self, j: int, block: str, rng):
        psis = self.psi_beta if block == "beta" else self.psi_alpha
        t0 = psi_transform(psis[j])
        t1, acc, fb = mh_mode_curvature_step(self._psi_target(j, block), t0, rng)
        if acc:
            psis[j] = psi_untransform(t1)
            if block == "beta":
                self._refresh_beta_prior()
                self._refresh_sigma()
            else:
                self._refresh_alpha_prior()
        return acc, fb

    def _tau2_alpha_target(self, u: float):
        tau2 = np.exp(u)
        Q = float(self.alpha @ (self.P0_alpha @ self.alpha))
        root = np.sqrt(tau2 / self.cfg.b_tau2)
        p2 = self.design.p2
        value = -0.5 * (p2 - 1) * u - 0.5 * Q / tau2 - root
        g = -0.5 * (p2 - 1) + 0.5 * Q / tau2 - 0.5 * root
        h = -0.5 * Q / tau2 - 0.25 * root
        return value, g, h

    def step_tau2_alpha(self, rng):
        u, acc, fb = mh_mode_curvature_step(self._tau2_alpha_target, np.log(self.tau2_alpha), rng)
        if acc:
            self.tau2_alpha = float(np.exp(u))
            self._refresh_alpha_prior()
        return acc, fb

    def _alpha_logp_grad(self, alpha):
        if not np.all(np.isfinite(alpha)) or np.max(np.abs(alpha)) > 1e6:
            return -np.inf, np.zeros_like(alpha)
        eta = self.design.V @ alpha
        with np.errstate(over="ignore"):
            sigma2 = np.clip(np.exp(eta), 1e-300, 1e300)
        s2 = 1.0 / (sigma2 + self.quad)
        s = np.sqrt(s2)
        bb = self.bb
        t = self.z - s * bb
        Pa = self.Pa
        with np.errstate(over="ignore", invalid="ignore"):
            value = (
                -0.5 * np.sum(np.log(s2) + np.log(sigma2))
                - 0.5 * np.sum(t * t / (s2 * sigma2))
                - 0.5 * float(alpha @ (Pa @ alpha))
            )
            kappa1 = 1.0 / (sigma2 * s2)
            g_eta = 0.5 * sigma2 * s2 - 0.5 - 0.5 * t * bb * s - 0.5 * t * t * (1.0 - kappa1)
            grad = self.design.V.T @ g_eta - Pa @ alpha
        if not np.isfinite(value):
            return -np.inf, np.zeros_like(alpha)
        return float(value), grad

    def step_alpha(self, rng, da: DualAveragingState):
        new, accept_prob, accepted = hmc_step(self.alpha, self._alpha_logp_grad, da.eps, da.iota, rng)
        da.update(accept_prob)
        if accepted:
            self.alpha = new
            self._refresh_sigma()
        return accept_prob, accepted

    def current_state(self) -> CopulaState:
        hb = Ar2Hyper(self.tau2_beta, self.psi_beta[0], self.psi_beta[1])
        if not self.cfg.alpha_steps:
            return CopulaState("psc", self.beta.copy(), hb)
        ha = Ar2Hyper(self.tau2_alpha, self.psi_alpha[0], self.psi_alpha[1])
        return CopulaState("hpsc", self.beta.copy(), hb, self.alpha.copy(), ha)


# -- driver ----------------------------------------------------------------------

@dataclass
class McmcConfig:
    """Sampler settings. ``alpha_steps=None`` derives the flag from the model."""

    model_kind: str = "hpsc"
    burn_in: int = 40_000
    draws: int = 50_000
    thin: int = 1
    m_adapt: int | None = None
    delta: float = 0.75
    iota: float = 1.0
    b_tau2: float = B_TAU2_DEFAULT
    alpha_steps: bool | None = None
    init_tau2: float = 1.0
    init_psi1: float = 0.0
    init_psi2: float = 0.0
    mu_from_ten_eps: bool = True  # mu = log(10 eps0); set False for mu = log(eps0)

    def __post_init__(self):
        if self.model_kind not in ("psc", "hpsc"):
            raise ConfigurationError("the exact sampler supports the AR(2) models psc and hpsc")
        if self.alpha_steps is None:
            self.alpha_steps = self.model_kind == "hpsc"
        if self.m_adapt is None:
            self.m_adapt = self.burn_in


@dataclass
class ChainOutput:
    draws: PosteriorDraws
    acceptance: dict[str, float]
    seed: int
    eps_final: float = np.nan
    fallback_counts: dict[str, int] = field(default_factory=dict)


def run_chain(
    config: McmcConfig,
    design: DesignMatrices,
    y: np.ndarray,
    margin: MarginModel,
    rng_seed: int,
) -> ChainOutput:
    """Run the block sampler and return stored post-burn-in draws.

    Deterministic given (config, data, seed): one generator drives every
    random draw in a fixed sweep order.
    """
    rng = np.random.default_rng(rng_seed)
    _, z = to_copula_scale(margin, np.asarray(y, dtype=float))
    sweep = _Sweep(design, z, config)

    da = None
    if config.alpha_steps:
        eps0 = find_reasonable_eps(sweep.alpha, sweep._alpha_logp_grad, rng)
        mu = np.log(10.0 * eps0) if config.mu_from_ten_eps else np.log(eps0)
        da = DualAveragingState(eps=eps0, mu=mu, M_adapt=config.m_adapt,
                                delta=config.delta, iota=config.iota)

    blocks = ["beta", "tau2_beta", "psi1_beta", "psi2_beta"]
    if config.alpha_steps:
        blocks += ["alpha", "tau2_alpha", "psi1_alpha", "psi2_alpha"]
    accepted = {b: 0 for b in blocks}
    attempts = {b: 0 for b in blocks}
    fallbacks = {b: 0 for b in blocks}
    hmc_probs = []

    total = config.burn_in + config.draws
    stored = []
    for m in range(1, total + 1):
        sweep.step_beta(rng)
        attempts["beta"] += 1
        accepted["beta"] += 1  # Gibbs draw, always accepted
        for name, step in (
            ("tau2_beta", lambda: sweep.step_tau2_beta(rng)),
            ("psi1_beta", lambda: sweep.step_psi(0, "beta", rng)),
            ("psi2_beta", lambda: sweep.step_psi(1, "beta", rng)),
        ):
            acc, fb = step()
            attempts[name] += 1
            accepted[name] += acc
            fallbacks[name] += fb
        if config.alpha_steps:
            prob, acc = sweep.step_alpha(rng, da)
            attempts["alpha"] += 1
            accepted["alpha"] += acc
            hmc_probs.append(prob)
            for name, step in (
                ("tau2_alpha", lambda: sweep.step_tau2_alpha(rng)),
                ("psi1_alpha", lambda: sweep.step_psi(0, "alpha", rng)),
                ("psi2_alpha", lambda: sweep.step_psi(1, "alpha", rng)),
            ):
                acc, fb = step()
                attempts[name] += 1
                accepted[name] += acc
                fallbacks[name] += fb
        if m > config.burn_in and (m - config.burn_in) % config.thin == 0:
            stored.append(state_to_theta(sweep.current_state()))

    template = sweep.current_state()
    rates = {b: accepted[b] / max(1, attempts[b]) for b in blocks}
    if hmc_probs:
        rates["alpha_mean_prob"] = float(np.mean(hmc_probs))
    return ChainOutput(
        draws=PosteriorDraws(np.stack(stored), template, "mcmc"),
        acceptance=rates,
        seed=rng_seed,
        eps_final=da.eps if da is not None else np.nan,
        fallback_counts=fallbacks,
    )


def inefficiency_factor(trace: np.ndarray, max_lag: int | None = None) -> float:
    """1 + 2 sum of autocorrelations, truncated at the first non-positive
    consecutive pair (initial-positive-sequence rule)."""
    trace = np.asarray(trace, dtype=float).ravel()
    n = trace.size
    if max_lag is None:
        max_lag = max(1, n // 10)
    if n < 10 * max_lag:
        raise ConfigurationError(f"trace length {n} too short for max_lag {max_lag}")
    if np.ptp(trace) == 0:
        raise NumericalError("inefficiency factor undefined for a constant trace")
    x = trace - trace.mean()
    m = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, m)
    acov = np.fft.irfft(f * np.conj(f), m)[: max_lag + 1] / n
    rho = acov[1:] / acov[0]
    total = 0.0
    k = 0
    while k + 1 < rho.size:
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        total += pair
        k += 2
    return float(1.0 + 2.0 * total)


def save_chain(path, chain: ChainOutput) -> None:
    labels = theta_labels(chain.draws.template)
    with open(path, "w") as fh:
        fh.write(" ".join(labels) + "\n")
        for row in chain.draws.thetas:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_chain_thetas(path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        labels = fh.readline().split()
        thetas = np.loadtxt(fh)
    return labels, np.atleast_2d(thetas)
