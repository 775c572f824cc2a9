"""Implicit-copula core: normalization, correlation matrix, likelihood and
the augmented log posterior with its analytic gradient.

The pseudo-response regression has mean basis B beta and log-variance basis
V alpha. Integrating beta out and standardizing by s_i makes every margin of
the normalized pseudo-response standard normal; the observed-data likelihood
is then a diagonal Gaussian in z = ndtri(F_Y(y)) times a margin Jacobian,
evaluable in O(n).

Three model kinds are supported:
  psc    homoscedastic (alpha = 0), AR(2) prior on beta
  hpsc   heteroscedastic, AR(2) priors on beta and alpha
  hrbfc  heteroscedastic, horseshoe priors on beta and alpha
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.special import ndtri

from .bases import DesignMatrices
from .errors import ConfigurationError, NumericalError
from .priors import (
    Ar2Hyper,
    B_TAU2_DEFAULT,
    HorseshoeHyper,
    ar2_delta,
    ar2_delta_deriv,
    ar2_logprior_and_grad,
    horseshoe_logprior_and_grad,
    psi_jacobian,
    psi_transform,
    psi_untransform,
)

LOG_2PI = np.log(2.0 * np.pi)
FLOOR = 1e-300
DENSE_CAP_DEFAULT = 2000

MODEL_KINDS = ("psc", "hpsc", "hrbfc")


@dataclass(frozen=True)
class CopulaState:
    """Augmented parameter state: coefficients plus prior hyperparameters."""

    model_kind: str
    beta: np.ndarray
    hyper_beta: Ar2Hyper | HorseshoeHyper
    alpha: np.ndarray | None = None
    hyper_alpha: Ar2Hyper | HorseshoeHyper | None = None

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        if self.alpha is not None:
            object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float))
        if self.model_kind not in MODEL_KINDS:
            raise ConfigurationError(f"unknown model kind {self.model_kind!r}")
        if self.model_kind == "psc":
            if self.alpha is not None and np.any(self.alpha != 0):
                raise ConfigurationError("psc requires alpha identically zero")
            if not isinstance(self.hyper_beta, Ar2Hyper):
                raise ConfigurationError("psc uses the AR(2) prior")
        elif self.model_kind == "hpsc":
            if self.alpha is None or not isinstance(self.hyper_alpha, Ar2Hyper):
                raise ConfigurationError("hpsc needs alpha and AR(2) hypers for both blocks")
            if not isinstance(self.hyper_beta, Ar2Hyper):
                raise ConfigurationError("hpsc uses AR(2) priors")
        else:
            if self.alpha is None or not isinstance(self.hyper_alpha, HorseshoeHyper):
                raise ConfigurationError("hrbfc needs alpha and horseshoe hypers for both blocks")
            if not isinstance(self.hyper_beta, HorseshoeHyper):
                raise ConfigurationError("hrbfc uses horseshoe priors")

    @property
    def p1(self) -> int:
        return self.beta.size

    @property
    def p2(self) -> int:
        return 0 if self.alpha is None else self.alpha.size


@dataclass(frozen=True)
class NormalizationCache:
    sigma2: np.ndarray  # exp(V alpha), per observation
    quad: np.ndarray    # b_i' P_beta^{-1} b_i, per observation
    s2: np.ndarray      # (sigma2 + quad)^{-1}
    floored: bool       # a value hit the numerical floor; proposals should be rejectable


def prior_quad(hyper: Ar2Hyper | HorseshoeHyper, rows: np.ndarray) -> np.ndarray:
    """b' P^{-1} b for each row b of ``rows`` under the coefficient prior."""
    rows = np.atleast_2d(rows)
    if isinstance(hyper, HorseshoeHyper):
        return (rows * rows) @ (hyper.local_scales**2)
    factor = ar2_delta(hyper.psi1, hyper.psi2, rows.shape[1])
    y = solve_triangular(factor.delta, rows.T, trans="T", lower=True)
    return hyper.tau2 * np.sum(y * y, axis=0)


def prior_cross_quad(hyper, rows_a: np.ndarray, rows_b: np.ndarray) -> np.ndarray:
    """a' P^{-1} b for paired rows of ``rows_a`` and ``rows_b``."""
    rows_a = np.atleast_2d(rows_a)
    rows_b = np.atleast_2d(rows_b)
    if isinstance(hyper, HorseshoeHyper):
        return (rows_a * rows_b) @ (hyper.local_scales**2)
    factor = ar2_delta(hyper.psi1, hyper.psi2, rows_a.shape[1])
    ya = solve_triangular(factor.delta, rows_a.T, trans="T", lower=True)
    yb = solve_triangular(factor.delta, rows_b.T, trans="T", lower=True)
    return hyper.tau2 * np.sum(ya * yb, axis=0)


def normalization(state: CopulaState, design: DesignMatrices) -> NormalizationCache:
    """Per-observation variances sigma_i^2, prior quadratics and s_i^2.

    The prior solve runs once per unique design row and is broadcast back to
    observations through the dedup index.
    """
    uq = prior_quad(state.hyper_beta, design.unique_b)
    quad = uq[design.b_index]
    if state.alpha is None:
        sigma2 = np.ones(design.n)
    else:
        eta = design.V @ state.alpha
        with np.errstate(over="ignore"):
            sigma2 = np.exp(eta)
    floored = bool(np.any(~np.isfinite(sigma2)) or np.any(sigma2 < FLOOR))
    sigma2 = np.clip(np.nan_to_num(sigma2, nan=np.inf, posinf=np.inf), FLOOR, 1e300)
    denom = sigma2 + quad
    s2 = 1.0 / denom
    floored = floored or bool(np.any(s2 < FLOOR))
    s2 = np.clip(s2, FLOOR, None)
    return NormalizationCache(sigma2, quad, s2, floored)


def correlation_matrix(
    state: CopulaState, design: DesignMatrices, dense_cap: int = DENSE_CAP_DEFAULT
) -> np.ndarray:
    """Dense correlation matrix R = S (Sigma + B P^{-1} B') S.

    Diagnostic and dependence-metric use only; the likelihood never forms R.
    """
    n = design.n
    if n > dense_cap:
        raise ConfigurationError(f"dense R capped at n = {dense_cap}, got {n}")
    cache = normalization(state, design)
    if isinstance(state.hyper_beta, HorseshoeHyper):
        G = (state.hyper_beta.local_scales**2)[:, None] * design.B.T
    else:
        h = state.hyper_beta
        factor = ar2_delta(h.psi1, h.psi2, design.p1)
        y = solve_triangular(factor.delta, design.B.T, trans="T", lower=True)
        G = h.tau2 * solve_triangular(factor.delta, y, lower=True)
    core = design.B @ G
    core[np.diag_indices(n)] += cache.sigma2
    s = np.sqrt(cache.s2)
    R = core * s[:, None] * s[None, :]
    return 0.5 * (R + R.T)


def gaussian_copula_logdensity(u: np.ndarray, R: np.ndarray) -> float:
    """log c(u) = log phi(z; 0, R) - sum log phi(z_i), z = ndtri(u)."""
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0) or np.any(u >= 1):
        raise ConfigurationError("copula arguments must lie strictly inside (0, 1)")
    z = ndtri(u)
    try:
        L = cholesky(R, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"correlation matrix not positive definite: {exc}") from exc
    w = solve_triangular(L, z, lower=True)
    return float(-0.5 * (w @ w - z @ z) - np.sum(np.log(np.diag(L))))


def conditional_loglik(
    state: CopulaState,
    design: DesignMatrices,
    z: np.ndarray,
    margin_logjac: float = 0.0,
) -> float:
    """O(n) conditional log-likelihood of the observed response.

    ``margin_logjac`` is sum_i log p_Y(y_i) - log phi(z_i), supplied by the
    margin module (constant in the copula parameters).
    """
    cache = normalization(state, design)
    t = z - np.sqrt(cache.s2) * (design.B @ state.beta)
    return float(
        -0.5 * np.sum(np.log(cache.s2) + np.log(cache.sigma2))
        - 0.5 * np.sum(t * t / (cache.s2 * cache.sigma2))
        - 0.5 * design.n * LOG_2PI
        + margin_logjac
    )


def _loglik_pieces(state: CopulaState, design: DesignMatrices, z: np.ndarray):
    """Shared quantities for likelihood value and gradients."""
    cache = normalization(state, design)
    s2 = cache.s2
    s = np.sqrt(s2)
    sigma2 = cache.sigma2
    bb = design.B @ state.beta
    t = z - s * bb
    loglik = float(
        -0.5 * np.sum(np.log(s2) + np.log(sigma2))
        - 0.5 * np.sum(t * t / (s2 * sigma2))
        - 0.5 * design.n * LOG_2PI
    )
    return cache, s, bb, t, loglik


def _dloglik_dquad(cache, s, bb, t):
    """d loglik_i / d quad_i with sigma_i^2 held fixed."""
    inv_sig = 1.0 / cache.sigma2
    return 0.5 * cache.s2 - 0.5 * inv_sig * t * (bb * s + t)


def _grad_eta(cache, s, bb, t):
    """d loglik_i / d eta_i where eta = V alpha (sigma_i^2 = exp(eta_i))."""
    kappa1 = 1.0 / (cache.sigma2 * cache.s2)
    return (
        0.5 * cache.sigma2 * cache.s2
        - 0.5
        - 0.5 * t * bb * s
        - 0.5 * t * t * (1.0 - kappa1)
    )


def log_target_alpha_and_grad(
    state: CopulaState, design: DesignMatrices, z: np.ndarray
) -> tuple[float, np.ndarray]:
    """HMC target for alpha: conditional log-likelihood plus the alpha prior.

    Constant-in-alpha terms are retained; only differences matter to the
    sampler.
    """
    if state.model_kind == "psc":
        raise ConfigurationError("psc has no alpha block")
    cache, s, bb, t, loglik = _loglik_pieces(state, design, z)
    alpha = state.alpha
    if isinstance(state.hyper_alpha, Ar2Hyper):
        h = state.hyper_alpha
        Pu = ar2_delta(h.psi1, h.psi2, alpha.size).delta
        Pa = (Pu.T @ Pu) / h.tau2
        prior = -0.5 * float(alpha @ (Pa @ alpha))
        prior_grad = -(Pa @ alpha)
    else:
        lam2 = state.hyper_alpha.local_scales**2
        prior = -0.5 * float(np.sum(alpha**2 / lam2))
        prior_grad = -alpha / lam2
    grad = design.V.T @ _grad_eta(cache, s, bb, t) + prior_grad
    return loglik + prior, grad


# -- parameter vector packing -------------------------------------------------

def theta_dim(template: CopulaState) -> int:
    p1, p2 = template.p1, template.p2
    if template.model_kind == "psc":
        return p1 + 3
    if template.model_kind == "hpsc":
        return p1 + p2 + 6
    return 2 * p1 + 2 * p2 + 2


def theta_labels(template: CopulaState) -> list[str]:
    p1, p2 = template.p1, template.p2
    beta = [f"beta_{j}" for j in range(p1)]
    alpha = [f"alpha_{j}" for j in range(p2)]
    if template.model_kind == "psc":
        return beta + ["ltau2_beta", "tpsi1_beta", "tpsi2_beta"]
    if template.model_kind == "hpsc":
        return beta + alpha + [
            "ltau2_beta", "tpsi1_beta", "tpsi2_beta",
            "ltau2_alpha", "tpsi1_alpha", "tpsi2_alpha",
        ]
    return (
        beta + alpha
        + [f"llam2_beta_{j}" for j in range(p1)] + ["ltau_beta"]
        + [f"llam2_alpha_{j}" for j in range(p2)] + ["ltau_alpha"]
    )


def state_to_theta(state: CopulaState) -> np.ndarray:
    """Flatten a state to the unconstrained parameter vector."""
    if state.model_kind in ("psc", "hpsc"):
        hb = state.hyper_beta
        blocks = [state.beta]
        if state.model_kind == "hpsc":
            blocks.append(state.alpha)
        blocks.append([np.log(hb.tau2), psi_transform(hb.psi1), psi_transform(hb.psi2)])
        if state.model_kind == "hpsc":
            ha = state.hyper_alpha
            blocks.append([np.log(ha.tau2), psi_transform(ha.psi1), psi_transform(ha.psi2)])
        return np.concatenate([np.atleast_1d(np.asarray(b, dtype=float)) for b in blocks])
    hb, ha = state.hyper_beta, state.hyper_alpha
    return np.concatenate([
        state.beta, state.alpha,
        np.log(hb.local_scales**2), [np.log(hb.global_scale)],
        np.log(ha.local_scales**2), [np.log(ha.global_scale)],
    ])


def theta_to_state(theta: np.ndarray, template: CopulaState) -> CopulaState:
    theta = np.asarray(theta, dtype=float)
    p1, p2 = template.p1, template.p2
    if theta.size != theta_dim(template):
        raise ConfigurationError("theta has the wrong dimension for this model")
    if template.model_kind in ("psc", "hpsc"):
        beta = theta[:p1]
        k = p1
        alpha = None
        if template.model_kind == "hpsc":
            alpha = theta[k : k + p2]
            k += p2
        hb = Ar2Hyper(float(np.exp(theta[k])), psi_untransform(theta[k + 1]), psi_untransform(theta[k + 2]))
        k += 3
        ha = None
        if template.model_kind == "hpsc":
            ha = Ar2Hyper(float(np.exp(theta[k])), psi_untransform(theta[k + 1]), psi_untransform(theta[k + 2]))
        return replace(template, beta=beta, alpha=alpha, hyper_beta=hb, hyper_alpha=ha)
    beta = theta[:p1]
    alpha = theta[p1 : p1 + p2]
    k = p1 + p2
    hb = HorseshoeHyper(np.exp(0.5 * theta[k : k + p1]), float(np.exp(theta[k + p1])))
    k += p1 + 1
    ha = HorseshoeHyper(np.exp(0.5 * theta[k : k + p2]), float(np.exp(theta[k + p2])))
    return replace(template, beta=beta, alpha=alpha, hyper_beta=hb, hyper_alpha=ha)


# -- full log posterior -------------------------------------------------------

def log_posterior_and_grad(
    state: CopulaState,
    design: DesignMatrices,
    z: np.ndarray,
    margin_logjac: float = 0.0,
    b_tau2: float = B_TAU2_DEFAULT,
) -> tuple[float, np.ndarray]:
    """log h(theta) = conditional log-likelihood + all log priors, with its
    gradient on the unconstrained parameterization (layout of state_to_theta).
    """
    cache, s, bb, t, loglik = _loglik_pieces(state, design, z)
    dldq = _dloglik_dquad(cache, s, bb, t)
    grad_beta_lik = design.B.T @ (t / (cache.sigma2 * s))

    if state.model_kind in ("psc", "hpsc"):
        hb = state.hyper_beta
        logp_b, gb = ar2_logprior_and_grad(state.beta, hb, b_tau2)
        # likelihood sensitivity to the beta-block hypers through quad
        dl_ltau2 = float(np.sum(dldq * cache.quad))
        dpsi_terms = []
        factor = ar2_delta(hb.psi1, hb.psi2, design.p1)
        g_u = solve_triangular(
            factor.delta,
            solve_triangular(factor.delta, design.unique_b.T, trans="T", lower=True),
            lower=True,
        )  # P(psi)^{-1} b per unique row
        for which, tname in (("psi1", "tpsi1"), ("psi2", "tpsi2")):
            dPu = ar2_delta_deriv(hb.psi1, hb.psi2, design.p1, which)
            dP = dPu.T @ factor.delta + factor.delta.T @ dPu
            dq_u = -hb.tau2 * np.sum(g_u * (dP @ g_u), axis=0)
            jac = float(psi_jacobian(psi_transform(getattr(hb, which))))
            dpsi_terms.append(float(np.sum(dldq * dq_u[design.b_index])) * jac + gb[tname])
        grad = [grad_beta_lik + gb["coef"]]
        logp = loglik + margin_logjac + logp_b
        if state.model_kind == "hpsc":
            ha = state.hyper_alpha
            logp_a, ga = ar2_logprior_and_grad(state.alpha, ha, b_tau2)
            logp += logp_a
            grad.append(design.V.T @ _grad_eta(cache, s, bb, t) + ga["coef"])
            grad.append([gb["ltau2"] + dl_ltau2, dpsi_terms[0], dpsi_terms[1]])
            grad.append([ga["ltau2"], ga["tpsi1"], ga["tpsi2"]])
        else:
            grad.append([gb["ltau2"] + dl_ltau2, dpsi_terms[0], dpsi_terms[1]])
        return logp, np.concatenate([np.atleast_1d(np.asarray(g, dtype=float)) for g in grad])

    # horseshoe
    hb, ha = state.hyper_beta, state.hyper_alpha
    logp_b, gb = horseshoe_logprior_and_grad(state.beta, hb)
    logp_a, ga = horseshoe_logprior_and_grad(state.alpha, ha)
    logp = loglik + margin_logjac + logp_b + logp_a
    lam2_b = hb.local_scales**2
    grad_llam2_b = lam2_b * ((design.B**2).T @ dldq) + gb["log_lambda2"]
    grad = np.concatenate([
        grad_beta_lik + gb["coef"],
        design.V.T @ _grad_eta(cache, s, bb, t) + ga["coef"],
        grad_llam2_b, [gb["log_tau"]],
        ga["log_lambda2"], [ga["log_tau"]],
    ])
    return logp, grad


def make_logh(
    template: CopulaState,
    design: DesignMatrices,
    z: np.ndarray,
    margin_logjac: float = 0.0,
    b_tau2: float = B_TAU2_DEFAULT,
):
    """Callable theta -> (log h, grad) on the unconstrained parameterization."""

    def logh(theta: np.ndarray) -> tuple[float, np.ndarray]:
        state = theta_to_state(theta, template)
        return log_posterior_and_grad(state, design, z, margin_logjac, b_tau2)

    return logh


@dataclass
class PosteriorDraws:
    """Posterior sample of states, stored as unconstrained vectors."""

    thetas: np.ndarray  # (J, p_theta)
    template: CopulaState
    provenance: str  # "mcmc" | "va" | "point"

    def __len__(self) -> int:
        return self.thetas.shape[0]

    def state(self, j: int) -> CopulaState:
        return theta_to_state(self.thetas[j], self.template)

    def states(self):
        for j in range(len(self)):
            yield self.state(j)

    def posterior_mean_state(self) -> CopulaState:
        return theta_to_state(self.thetas.mean(axis=0), self.template)

    def subsample(self, max_draws: int) -> "PosteriorDraws":
        if len(self) <= max_draws:
            return self
        idx = np.linspace(0, len(self) - 1, max_draws).round().astype(int)
        return PosteriorDraws(self.thetas[idx], self.template, self.provenance)

    @staticmethod
    def from_states(states, provenance: str) -> "PosteriorDraws":
        states = list(states)
        thetas = np.stack([state_to_theta(s) for s in states])
        return PosteriorDraws(thetas, states[0], provenance)
