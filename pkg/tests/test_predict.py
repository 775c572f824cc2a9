import numpy as np
import pytest
from scipy.special import ndtr
from scipy.stats import kstest, norm

from regcopula.bases import build_bspline_design, make_design
from regcopula.copula import CopulaState, PosteriorDraws
from regcopula.errors import ConfigurationError, DataError
from regcopula.margins import MarginModel, fit_kde_margin
from regcopula.predict import (
    DensityGrid,
    PredictiveInput,
    moment_functions,
    point_params,
    predictive_density_mc,
    predictive_density_point,
    predictive_logpdf,
    predictive_quantile,
    simulate_replicate,
)
from regcopula.priors import Ar2Hyper, HorseshoeHyper


def analytic_margin(loc=0.0, scale=1.0, span=7.0, size=4001) -> MarginModel:
    """Margin with known N(loc, scale^2) distribution on a dense grid."""
    grid = np.linspace(loc - span * scale, loc + span * scale, size)
    density = norm.pdf(grid, loc, scale)
    cdf = norm.cdf(grid, loc, scale)
    return MarginModel(grid, density, cdf)


def horseshoe_state(beta, quad_target, alpha=None, p2=0, log_sigma2=0.0):
    """State whose prediction-point quad equals quad_target when the basis
    row is the first unit vector, and whose sigma^2 = exp(log_sigma2) when
    the variance row is the first unit vector."""
    p1 = len(beta)
    lam = np.full(p1, 1e-6)
    lam[0] = np.sqrt(quad_target) if quad_target > 0 else 1e-6
    if alpha is None:
        alpha = np.zeros(max(p2, 1))
        alpha[0] = log_sigma2
    return CopulaState(
        "hrbfc", np.asarray(beta, dtype=float), HorseshoeHyper(lam, 1.0),
        np.asarray(alpha, dtype=float), HorseshoeHyper(np.ones(len(alpha)), 1.0),
    )


def unit_point(p1, p2):
    b = np.zeros(p1)
    b[0] = 1.0
    v = np.zeros(p2)
    if p2:
        v[0] = 1.0
    return PredictiveInput(b, v)


class TestPointParams:
    def test_formulas(self):
        state = horseshoe_state([2.0, 0.0, 0.0], quad_target=3.0, p2=1, log_sigma2=0.0)
        pt = unit_point(3, 1)
        m, s, sig = point_params(state, pt)
        assert s == pytest.approx(0.5)  # (1 + 3)^{-1/2}
        assert m == pytest.approx(0.5 * 2.0)
        assert sig == pytest.approx(1.0)

    def test_sigma_from_alpha(self):
        state = horseshoe_state([0.0, 0.0], quad_target=0.0, p2=1, log_sigma2=np.log(4.0))
        m, s, sig = point_params(state, unit_point(2, 1))
        assert sig == pytest.approx(2.0)
        assert s == pytest.approx(1.0 / 2.0, rel=1e-6)  # quad ~ 0


class TestPredictiveDensity:
    def test_standard_normal_margin_single_draw(self):
        """Identity margin: the predictive is exactly N(m, (s sigma)^2)."""
        margin = analytic_margin()
        state = horseshoe_state([1.2, 0.0], quad_target=1.0, p2=1, log_sigma2=0.0)
        pt = unit_point(2, 1)
        m, s, sig = point_params(state, pt)
        dg = predictive_density_point(pt, state, margin)
        expected = norm.pdf(dg.y_grid, m, s * sig)
        assert np.max(np.abs(dg.density_values - expected)) < 1e-4

    def test_normalization(self):
        margin = analytic_margin()
        state = horseshoe_state([0.8, 0.0], quad_target=0.5, p2=1, log_sigma2=0.3)
        dg = predictive_density_point(unit_point(2, 1), state, margin)
        assert dg.normalization == pytest.approx(1.0, abs=1e-3)

    def test_two_draw_mixture(self):
        margin = analytic_margin()
        s1 = horseshoe_state([1.0, 0.0], quad_target=0.0, p2=1)
        s2 = horseshoe_state([-1.0, 0.0], quad_target=3.0, p2=1)
        pt = unit_point(2, 1)
        draws = PosteriorDraws.from_states([s1, s2], "mcmc")
        mix = predictive_density_mc(pt, draws, margin)
        g1 = predictive_density_point(pt, s1, margin)
        g2 = predictive_density_point(pt, s2, margin)
        byhand = 0.5 * (g1.density_values + g2.density_values)
        assert np.max(np.abs(mix.density_values - byhand)) < 1e-12

    def test_point_estimate_matches_single_draw_mc(self):
        margin = analytic_margin()
        state = horseshoe_state([0.5, 0.3], quad_target=0.7, p2=1)
        pt = unit_point(2, 1)
        a = predictive_density_point(pt, state, margin)
        b = predictive_density_mc(pt, PosteriorDraws.from_states([state], "point"), margin)
        assert np.array_equal(a.density_values, b.density_values)

    def test_zero_signal_recovers_margin(self):
        """b = 0 and v = 0 with quad = 0 collapse the ratio to the margin."""
        rng = np.random.default_rng(0)
        margin = fit_kde_margin(rng.gamma(3.0, 1.0, 3000))
        state = horseshoe_state([0.4, -0.2], quad_target=0.0, p2=1)
        pt = PredictiveInput(np.zeros(2), np.zeros(1))
        dg = predictive_density_point(pt, state, margin)
        expected = np.interp(dg.y_grid, margin.grid, margin.density)
        assert np.max(np.abs(dg.density_values - expected)) < 1e-6

    def test_empty_draws_rejected(self):
        margin = analytic_margin()
        draws = PosteriorDraws(np.zeros((0, 5)), horseshoe_state([0.0, 0.0], 0.0, p2=1), "va")
        with pytest.raises(DataError):
            predictive_density_mc(unit_point(2, 1), draws, margin)

    def test_logpdf_matches_grid(self):
        margin = analytic_margin()
        state = horseshoe_state([0.5, 0.0], quad_target=0.4, p2=1)
        pt = unit_point(2, 1)
        ys = np.array([-1.0, 0.0, 0.7])
        lp = predictive_logpdf(pt, state, margin, ys)
        dg = predictive_density_point(pt, state, margin, y_grid=ys)
        assert np.allclose(np.exp(lp), dg.density_values, rtol=1e-10)


class TestMoments:
    def test_identity_margin(self):
        margin = analytic_margin()
        states = [
            horseshoe_state([m, 0.0], quad_target=q, p2=1, log_sigma2=ls)
            for m, q, ls in [(0.5, 0.2, 0.0), (-0.3, 1.0, 0.4), (1.0, 0.0, -0.5)]
        ]
        pt = unit_point(2, 1)
        draws = PosteriorDraws.from_states(states, "mcmc")
        f_hat, v_hat = moment_functions(pt, draws, margin)
        params = [point_params(s, pt) for s in states]
        exp_f = np.mean([m * 1.0 for m, s, sig in params])
        exp_v = np.mean([(s * sig) ** 2 for m, s, sig in params])
        assert f_hat == pytest.approx(exp_f, abs=1e-6)
        assert v_hat == pytest.approx(exp_v, rel=1e-4)

    def test_linear_margin_against_monte_carlo(self):
        """Margin N(a, c^2): closed form f = a + c E[m], v = c^2 E[(s sig)^2],
        cross-checked against a large Monte Carlo sample."""
        a, c = 2.0, 1.5
        margin = analytic_margin(loc=a, scale=c)
        state = horseshoe_state([0.8, 0.0], quad_target=0.5, p2=1, log_sigma2=0.2)
        pt = unit_point(2, 1)
        m, s, sig = point_params(state, pt)
        draws = PosteriorDraws.from_states([state], "point")
        f_hat, v_hat = moment_functions(pt, draws, margin)
        assert f_hat == pytest.approx(a + c * m, abs=1e-4)
        assert v_hat == pytest.approx(c**2 * (s * sig) ** 2, rel=1e-3)
        rng = np.random.default_rng(1)
        zs = m + s * sig * rng.standard_normal(1_000_000)
        ys = a + c * zs
        mc_f = ys.mean()
        mc_se = ys.std() / 1000.0
        assert abs(f_hat - mc_f) < 3 * mc_se
        v_draws = (ys - ys.mean()) ** 2
        assert abs(v_hat - v_draws.mean()) < 3 * v_draws.std() / 1000.0

    def test_variance_nonnegative(self):
        rng = np.random.default_rng(2)
        margin = fit_kde_margin(rng.standard_normal(2000))
        states = [horseshoe_state(rng.normal(0, 1, 2), quad_target=float(rng.uniform(0, 2)), p2=1)
                  for _ in range(10)]
        draws = PosteriorDraws.from_states(states, "mcmc")
        _, v_hat = moment_functions(unit_point(2, 1), draws, margin)
        assert v_hat >= 0


class TestQuantiles:
    def test_median_equivariance(self):
        margin = analytic_margin()
        state = horseshoe_state([0.9, 0.0], quad_target=0.3, p2=1)
        pt = unit_point(2, 1)
        m, s, sig = point_params(state, pt)
        draws = PosteriorDraws.from_states([state], "point")
        med = predictive_quantile(pt, draws, margin, 0.5)
        assert med == pytest.approx(m, abs=1e-3)  # identity margin: median = m

    def test_cdf_inverse_consistency(self):
        margin = analytic_margin()
        state = horseshoe_state([0.2, 0.0], quad_target=0.8, p2=1)
        pt = unit_point(2, 1)
        draws = PosteriorDraws.from_states([state], "point")
        for alpha in (0.1, 0.5, 0.9):
            q = predictive_quantile(pt, draws, margin, alpha)
            dg = predictive_density_point(pt, state, margin, y_grid=margin.grid)
            cdf = dg.cdf() / dg.cdf()[-1]
            assert np.interp(q, margin.grid, cdf) == pytest.approx(alpha, abs=1e-3)

    def test_monotone_margin_equivariance(self):
        """Log-transforming the margin log-transforms the quantiles."""
        rng = np.random.default_rng(3)
        y = rng.gamma(4.0, 1.0, 4000) + 1.0
        m_raw = fit_kde_margin(y)
        m_log = fit_kde_margin(np.log(y))
        state = horseshoe_state([0.6, 0.0], quad_target=0.4, p2=1)
        pt = unit_point(2, 1)
        draws = PosteriorDraws.from_states([state], "point")
        for alpha in (0.25, 0.5, 0.9):
            q_raw = predictive_quantile(pt, draws, m_raw, alpha)
            q_log = predictive_quantile(pt, draws, m_log, alpha)
            assert np.log(q_raw) == pytest.approx(q_log, abs=0.02)

    def test_alpha_domain(self):
        margin = analytic_margin()
        state = horseshoe_state([0.0, 0.0], quad_target=0.0, p2=1)
        draws = PosteriorDraws.from_states([state], "point")
        with pytest.raises(ConfigurationError):
            predictive_quantile(unit_point(2, 1), draws, margin, 1.5)


class TestSimulateReplicate:
    def make_design(self, n, seed=4):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0, 1, n)
        B, _ = build_bspline_design(x, 6)
        V, _ = build_bspline_design(x, 5)
        return make_design(B, V)

    def test_identity_pipeline(self):
        """Zero signal and identity margin give iid standard normal output."""
        margin = analytic_margin()
        design = self.make_design(10_000)
        state = CopulaState(
            "hpsc", np.zeros(6), Ar2Hyper(1e-300, 0.0, 0.0),
            np.zeros(5), Ar2Hyper(1.0, 0.0, 0.0),
        )
        y = simulate_replicate(state, design, margin, np.random.default_rng(5))
        assert kstest(y, "norm").pvalue > 0.01

    def test_margin_recovery(self):
        rng = np.random.default_rng(6)
        sample = rng.gamma(3.0, 2.0, 5000)
        margin = fit_kde_margin(sample)
        design = self.make_design(10_000)
        state = CopulaState(
            "hpsc", np.zeros(6), Ar2Hyper(1e-300, 0.0, 0.0),
            np.zeros(5), Ar2Hyper(1.0, 0.0, 0.0),
        )
        y = simulate_replicate(state, design, margin, np.random.default_rng(7))
        ks = kstest(y, lambda v: np.interp(v, margin.grid, margin.cdf)).statistic
        assert ks < 0.03

    def test_seeded_determinism(self):
        margin = analytic_margin()
        design = self.make_design(50)
        state = CopulaState("psc", np.zeros(6), Ar2Hyper(1.0, 0.0, 0.0))
        design_psc = make_design(design.B, np.zeros((50, 0)))
        a = simulate_replicate(state, design_psc, margin, np.random.default_rng(8))
        b = simulate_replicate(state, design_psc, margin, np.random.default_rng(8))
        assert np.array_equal(a, b)

    def test_draws_input_uses_posterior_mean(self):
        margin = analytic_margin()
        design = self.make_design(30)
        states = [horseshoe_state([w, 0, 0, 0, 0, 0], 0.1, p2=5) for w in (0.4, 0.6)]
        draws = PosteriorDraws.from_states(states, "mcmc")
        a = simulate_replicate(draws, design, margin, np.random.default_rng(9))
        b = simulate_replicate(draws.posterior_mean_state(), design, margin, np.random.default_rng(9))
        assert np.array_equal(a, b)


def test_density_grid_validation():
    with pytest.raises(DataError):
        DensityGrid(np.array([0.0, 1.0]), np.array([0.5, -0.1]), 1.0)
