"""Model fitting orchestration shared by the CLI and the cross-validation
harness: margin fit, basis construction, estimator dispatch, and the
prediction-time basis evaluation for new points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bases import (
    DesignMatrices,
    KnotGrid,
    bspline_knots,
    evaluate_basis,
    make_design,
    sample_knots_stratified,
)
from .config import Dataset, RunConfig
from .copula import CopulaState, PosteriorDraws, make_logh, theta_dim, theta_to_state
from .errors import ConfigurationError
from .margins import MarginModel, fit_kde_margin, margin_log_jacobian, to_copula_scale
from .mcmc import ChainOutput, McmcConfig, run_chain
from .priors import Ar2Hyper, HorseshoeHyper
from .vb import SgaTrace, VariationalParams, maximize_elbo, sample_variational


@dataclass(frozen=True)
class CovariateScaling:
    """Training min-max scaling to the unit interval, applied at prediction too."""

    mins: np.ndarray
    maxs: np.ndarray

    @staticmethod
    def fit(X: np.ndarray) -> "CovariateScaling":
        mins = X.min(axis=0)
        maxs = X.max(axis=0)
        if np.any(maxs <= mins):
            raise ConfigurationError("degenerate covariate column: constant values")
        return CovariateScaling(mins, maxs)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return np.clip((X - self.mins) / (self.maxs - self.mins), 0.0, 1.0)


def default_template(model: str, p1: int, p2: int) -> CopulaState:
    """A structure-donor state with weakly informative hyperparameters."""
    if model == "psc":
        return CopulaState("psc", np.zeros(p1), Ar2Hyper(1.0, 0.0, 0.0))
    if model == "hpsc":
        return CopulaState("hpsc", np.zeros(p1), Ar2Hyper(1.0, 0.0, 0.0),
                           np.zeros(p2), Ar2Hyper(1.0, 0.0, 0.0))
    return CopulaState("hrbfc", np.zeros(p1), HorseshoeHyper(np.ones(p1), 1.0),
                       np.zeros(p2), HorseshoeHyper(np.ones(p2), 1.0))


@dataclass
class FittedModel:
    config: RunConfig
    margin: MarginModel
    mean_knots: KnotGrid
    var_knots: KnotGrid | None
    scaling: CovariateScaling | None
    template: CopulaState
    chain: ChainOutput | None = None
    vparams: VariationalParams | None = None
    trace: SgaTrace | None = None

    def point_state(self) -> CopulaState:
        """Point estimate: VB mean or MCMC posterior mean on unconstrained scale."""
        if self.vparams is not None:
            return theta_to_state(self.vparams.mu, self.template)
        return self.chain.draws.posterior_mean_state()

    def posterior_draws(self, n_draws: int = 1000, seed: int = 0) -> PosteriorDraws:
        if self.chain is not None:
            return self.chain.draws.subsample(n_draws)
        thetas = sample_variational(self.vparams, n_draws, np.random.default_rng(seed))
        return PosteriorDraws(thetas, self.template, "va")

    def basis_rows(self, X_new: np.ndarray, W_new: np.ndarray | None = None):
        """Basis rows at new covariate values, applying the training scaling
        and clamping covariates into the training range."""
        X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
        W_new = X_new if W_new is None else np.atleast_2d(np.asarray(W_new, dtype=float))
        if self.scaling is not None:
            B = evaluate_basis(self.mean_knots, self.scaling.transform(X_new))
            V = (evaluate_basis(self.var_knots, self.scaling.transform(W_new))
                 if self.var_knots is not None else np.zeros((X_new.shape[0], 0)))
            return B, V
        lo, hi = self.mean_knots.knots[0], self.mean_knots.knots[-1]
        B = evaluate_basis(self.mean_knots, np.clip(X_new[:, 0], lo, hi))
        if self.var_knots is None:
            return B, np.zeros((X_new.shape[0], 0))
        lo, hi = self.var_knots.knots[0], self.var_knots.knots[-1]
        V = evaluate_basis(self.var_knots, np.clip(W_new[:, 0], lo, hi))
        return B, V


def build_model_design(config: RunConfig, dataset: Dataset):
    """Knot grids plus the training design matrices for the configured model."""
    if config.model in ("psc", "hpsc"):
        if dataset.X.shape[1] != 1:
            raise ConfigurationError(
                f"{config.model} is a single-covariate model; got {dataset.X.shape[1]} x-columns"
            )
        mean_knots = bspline_knots(dataset.X[:, 0], config.p1)
        B = evaluate_basis(mean_knots, dataset.X[:, 0])
        if config.model == "psc":
            return mean_knots, None, None, make_design(B, np.zeros((dataset.n, 0)))
        var_knots = bspline_knots(dataset.W[:, 0], config.p2)
        V = evaluate_basis(var_knots, dataset.W[:, 0])
        return mean_knots, var_knots, None, make_design(B, V)
    scaling = CovariateScaling.fit(dataset.X)
    Xs = scaling.transform(dataset.X)
    Ws = scaling.transform(dataset.W)
    seed = config.seed if config.knot_strata is None else config.seed
    periodic = frozenset(config.periodic_dims)
    mean_knots = sample_knots_stratified(
        Xs, config.knots_mean, config.stratum_dim - 1, seed,
        n_strata=config.knot_strata, periodic_dims=periodic,
    )
    var_knots = sample_knots_stratified(
        Ws, config.knots_var, config.stratum_dim - 1, seed + 1,
        n_strata=config.knot_strata, periodic_dims=periodic,
    )
    B = evaluate_basis(mean_knots, Xs)
    V = evaluate_basis(var_knots, Ws)
    return mean_knots, var_knots, scaling, make_design(B, V)


def fit_model(config: RunConfig, dataset: Dataset, margin: MarginModel | None = None) -> FittedModel:
    """Two-stage fit: margin first (unless supplied), then the copula parameters."""
    if margin is None:
        margin = fit_kde_margin(dataset.y, config.margin_grid_size, config.pre())
    mean_knots, var_knots, scaling, design = build_model_design(config, dataset)
    template = default_template(config.model, design.p1, design.p2)
    fitted = FittedModel(config, margin, mean_knots, var_knots, scaling, template)
    if config.estimator == "mcmc":
        mc = McmcConfig(
            model_kind=config.model, burn_in=config.burn_in, draws=config.draws,
            thin=config.thin, m_adapt=config.m_adapt, delta=config.delta,
            iota=config.iota, b_tau2=config.b_tau2,
        )
        fitted.chain = run_chain(mc, design, dataset.y, margin, config.seed)
        fitted.template = fitted.chain.draws.template
    else:
        _, z = to_copula_scale(margin, dataset.y)
        logjac = margin_log_jacobian(margin, dataset.y, z)
        logh = make_logh(template, design, z, logjac, config.b_tau2)
        vp, trace = maximize_elbo(
            logh, theta_dim(template), config.vb_factors, config.vb_steps, config.seed
        )
        fitted.vparams = vp
        fitted.trace = trace
    return fitted
