"""Posterior predictive density, regression mean/variance functions via
univariate quadrature, predictive quantiles, and replicate simulation.

Every estimator works through the standardized pseudo-response: at a new
point the pseudo-response is conditionally Gaussian with mean s b'beta and
standard deviation s sigma, and the observed response is its image under
F_Y^{-1} o Phi.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .bases import DesignMatrices
from .copula import CopulaState, PosteriorDraws, normalization, prior_quad
from .errors import ConfigurationError, DataError
from .margins import U_CLAMP, MarginModel, from_copula_scale

LOG_2PI = np.log(2.0 * np.pi)
MAX_DENSITY_DRAWS = 5000
GRID_CDF_TRIM = 1e-4


class QuadratureWarning(RuntimeWarning):
    """Two quadrature refinement levels disagreed beyond tolerance."""


@dataclass(frozen=True)
class PredictiveInput:
    """Basis rows at one prediction point (from the training knot grids)."""

    b_new: np.ndarray
    v_new: np.ndarray
    x_new: np.ndarray | None = None
    w_new: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "b_new", np.asarray(self.b_new, dtype=float).ravel())
        object.__setattr__(self, "v_new", np.asarray(self.v_new, dtype=float).ravel())


@dataclass(frozen=True)
class DensityGrid:
    y_grid: np.ndarray
    density_values: np.ndarray
    normalization: float  # trapezoid integral over the full margin support

    def __post_init__(self):
        if np.any(np.asarray(self.density_values) < 0):
            raise DataError("negative predictive density values")

    def cdf(self) -> np.ndarray:
        dv = np.asarray(self.density_values)
        yg = np.asarray(self.y_grid)
        c = np.concatenate([[0.0], np.cumsum(0.5 * (dv[1:] + dv[:-1]) * np.diff(yg))])
        return c


def point_params(state: CopulaState, point: PredictiveInput) -> tuple[float, float, float]:
    """(m, s, sigma) at the new point for one parameter draw, sigma^2 = exp(v'alpha)."""
    quad = float(prior_quad(state.hyper_beta, point.b_new[None, :])[0])
    sigma2 = 1.0 if state.alpha is None else float(np.exp(point.v_new @ state.alpha))
    s = 1.0 / np.sqrt(sigma2 + quad)
    m = s * float(point.b_new @ state.beta)
    return m, s, float(np.sqrt(sigma2))


def _draw_params(draws: PosteriorDraws, point: PredictiveInput, max_draws: int):
    sub = draws.subsample(max_draws)
    m = np.empty(len(sub))
    ssig = np.empty(len(sub))
    for j, state in enumerate(sub.states()):
        mj, sj, sigj = point_params(state, point)
        m[j] = mj
        ssig[j] = sj * sigj
    return m, ssig


def _z_and_logratio(margin: MarginModel, y: np.ndarray):
    u = np.clip(margin.cdf_at(y), U_CLAMP, 1.0 - U_CLAMP)
    z = ndtri(u)
    log_ratio = np.log(np.maximum(margin.density_at(y), 1e-300)) + 0.5 * z * z + 0.5 * LOG_2PI
    return z, log_ratio


def _mixture_density(y: np.ndarray, margin: MarginModel, m: np.ndarray, ssig: np.ndarray):
    """Average over draws of the single-draw predictive density at y."""
    z, log_ratio = _z_and_logratio(margin, y)
    mix = np.zeros_like(z)
    for k in range(0, m.size, 512):
        mk = m[k : k + 512][:, None]
        sk = ssig[k : k + 512][:, None]
        w = (z[None, :] - mk) / sk
        mix += np.sum(np.exp(-0.5 * w * w) / (sk * np.sqrt(2 * np.pi)), axis=0)
    mix /= m.size
    return np.exp(log_ratio) * mix


def _default_grid(margin: MarginModel) -> np.ndarray:
    keep = (margin.cdf >= GRID_CDF_TRIM) & (margin.cdf <= 1.0 - GRID_CDF_TRIM)
    return margin.grid[keep]


def predictive_density_mc(
    point: PredictiveInput,
    draws: PosteriorDraws,
    margin: MarginModel,
    y_grid: np.ndarray | None = None,
    max_draws: int = MAX_DENSITY_DRAWS,
) -> DensityGrid:
    """Monte Carlo posterior predictive density averaged over parameter draws.

    The normalization field holds the trapezoid integral over the full
    margin support regardless of the requested output grid.
    """
    if len(draws) < 1:
        raise DataError("predictive density needs at least one posterior draw")
    m, ssig = _draw_params(draws, point, max_draws)
    full = _mixture_density(margin.grid, margin, m, ssig)
    norm = float(np.trapezoid(full, margin.grid))
    if y_grid is None:
        keep = (margin.cdf >= GRID_CDF_TRIM) & (margin.cdf <= 1.0 - GRID_CDF_TRIM)
        return DensityGrid(margin.grid[keep], full[keep], norm)
    y_grid = np.asarray(y_grid, dtype=float)
    return DensityGrid(y_grid, _mixture_density(y_grid, margin, m, ssig), norm)


def predictive_density_point(
    point: PredictiveInput,
    theta_hat: CopulaState,
    margin: MarginModel,
    y_grid: np.ndarray | None = None,
) -> DensityGrid:
    """Point-estimate predictive density: the Monte Carlo form with one draw."""
    draws = PosteriorDraws.from_states([theta_hat], "point")
    return predictive_density_mc(point, draws, margin, y_grid)


def predictive_logpdf(
    point: PredictiveInput, state: CopulaState, margin: MarginModel, y: np.ndarray
) -> np.ndarray:
    """log of the point-estimate predictive density directly at response values."""
    m, s, sig = point_params(state, point)
    z, log_ratio = _z_and_logratio(margin, np.asarray(y, dtype=float))
    w = (z - m) / (s * sig)
    return log_ratio - 0.5 * w * w - np.log(s * sig) - 0.5 * LOG_2PI


def moment_functions(
    point: PredictiveInput,
    draws: PosteriorDraws,
    margin: MarginModel,
    n_nodes: int = 512,
    refine: int = 1024,
    tol: float = 1e-4,
    total_variance: bool = False,
    max_draws: int = 2000,
) -> tuple[float, float]:
    """Predictive mean and variance functions by per-draw quadrature over z.

    Returns (f_hat, v_hat): the posterior averages of the per-draw
    conditional mean and conditional variance of the response. With
    ``total_variance=True`` the variance of the per-draw conditional means
    is added (full law-of-total-variance decomposition; off by default).
    """
    m, ssig = _draw_params(draws, point, max_draws)

    def per_draw(nodes: int):
        grid = np.linspace(-8.0, 8.0, nodes)
        means = np.empty(m.size)
        second = np.empty(m.size)
        for j in range(m.size):
            zj = m[j] + ssig[j] * grid
            yj = from_copula_scale(margin, zj)
            pdf = np.exp(-0.5 * grid * grid) / np.sqrt(2 * np.pi)
            means[j] = np.trapezoid(yj * pdf, grid)
            second[j] = np.trapezoid(yj * yj * pdf, grid)
        return means, second

    means, second = per_draw(refine)
    means0, second0 = per_draw(n_nodes)
    f_hat = float(np.mean(means))
    v_hat = float(np.mean(second - means**2))
    scale = max(1.0, abs(f_hat))
    if abs(np.mean(means0) - f_hat) > tol * scale:
        warnings.warn(
            f"quadrature refinement changed f_hat from {np.mean(means0)} to {f_hat}",
            QuadratureWarning,
            stacklevel=2,
        )
    if total_variance:
        v_hat += float(np.var(means))
    return f_hat, v_hat


def predictive_quantile(
    point: PredictiveInput,
    draws: PosteriorDraws,
    margin: MarginModel,
    alpha: float,
    max_draws: int = MAX_DENSITY_DRAWS,
) -> float:
    """Root of the predictive distribution function at probability alpha."""
    if not (0.0 < alpha < 1.0):
        raise ConfigurationError(f"alpha must lie in (0, 1), got {alpha}")
    m, ssig = _draw_params(draws, point, max_draws)
    full = _mixture_density(margin.grid, margin, m, ssig)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (full[1:] + full[:-1]) * np.diff(margin.grid))])
    cdf /= cdf[-1]
    if alpha < cdf[1] or alpha > cdf[-2]:
        warnings.warn(f"quantile level {alpha} in the extreme tail of the grid", RuntimeWarning, stacklevel=2)
    return float(np.interp(alpha, cdf, margin.grid))


def simulate_replicate(
    fit: CopulaState | PosteriorDraws,
    design: DesignMatrices,
    margin: MarginModel,
    rng,
) -> np.ndarray:
    """One synthetic response vector from the fitted model.

    Draws the conditionally Gaussian pseudo-responses at the training design
    and maps them through F_Y^{-1} o Phi.
    """
    state = fit if isinstance(fit, CopulaState) else fit.posterior_mean_state()
    cache = normalization(state, design)
    s = np.sqrt(cache.s2)
    mean = s * (design.B @ state.beta)
    sd = np.sqrt(cache.s2 * cache.sigma2)
    z = mean + sd * rng.standard_normal(design.n)
    return from_copula_scale(margin, z)


def save_density_csv(path, grid: DensityGrid) -> None:
    with open(path, "w") as fh:
        fh.write("y,density\n")
        for y, d in zip(grid.y_grid, grid.density_values):
            fh.write(f"{y:.17g},{d:.17g}\n")


def save_quantiles_csv(path, alphas, quantiles) -> None:
    with open(path, "w") as fh:
        fh.write("alpha,quantile\n")
        for a, q in zip(alphas, quantiles):
            fh.write(f"{a:.17g},{q:.17g}\n")
