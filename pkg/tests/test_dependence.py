import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import ndtr
from scipy.stats import kendalltau, spearmanr

from regcopula.bases import append_points, build_bspline_design, evaluate_basis, make_design
from regcopula.copula import CopulaState, PosteriorDraws, correlation_matrix
from regcopula.dependence import (
    DependenceSurface,
    bvn_cdf,
    dependence_surface,
    kendall_tau,
    pairwise_r,
    quantile_dependence,
    quantile_dependence_gaussian,
    save_surface_csv,
    spearman_rho,
)
from regcopula.errors import ConfigurationError
from regcopula.priors import Ar2Hyper, HorseshoeHyper
from regcopula.synthetic import hpsc_dataset, smooth_coefficients


def bvn_reference(h, k, rho):
    """Independent adaptive-quadrature route for the arcsine identity."""
    f = lambda th: np.exp(-(h * h + k * k - 2 * h * k * np.sin(th)) / (2 * np.cos(th) ** 2))
    val, _ = quad(f, 0.0, np.arcsin(rho), epsabs=1e-14, limit=400)
    return ndtr(h) * ndtr(k) + val / (2 * np.pi)


class TestBvnCdf:
    def test_closed_form_center(self):
        # Phi2(0, 0, rho) = 1/4 + arcsin(rho) / (2 pi)
        for rho in (-0.8, -0.3, 0.0, 0.5, 0.95):
            expected = 0.25 + np.arcsin(rho) / (2 * np.pi)
            assert bvn_cdf(0.0, 0.0, rho) == pytest.approx(expected, abs=1e-12)

    def test_independence_product(self):
        assert bvn_cdf(0.7, -1.2, 0.0) == pytest.approx(ndtr(0.7) * ndtr(-1.2), abs=1e-14)

    def test_comonotone_limits(self):
        assert bvn_cdf(0.3, -0.8, 1.0) == pytest.approx(min(ndtr(0.3), ndtr(-0.8)), abs=1e-14)
        assert bvn_cdf(0.3, 0.8, -1.0) == pytest.approx(max(ndtr(0.3) + ndtr(0.8) - 1, 0.0), abs=1e-14)

    @pytest.mark.parametrize("rho", [0.2, 0.5, 0.9, 0.924, 0.93, 0.99])
    def test_against_independent_quadrature(self, rho):
        for h, k in ((0.3, -0.8), (1.5, 1.2), (-2.0, 0.5)):
            assert abs(bvn_cdf(h, k, rho) - bvn_reference(h, k, rho)) < 1e-10

    def test_vectorized_rho(self):
        rhos = np.array([-0.95, -0.5, 0.0, 0.5, 0.95, 0.99])
        vals = bvn_cdf(0.4, 0.1, rhos)
        singles = np.array([bvn_cdf(0.4, 0.1, float(r)) for r in rhos])
        assert np.array_equal(vals, singles)

    def test_out_of_range_rejected(self):
        with pytest.raises(ConfigurationError):
            bvn_cdf(0.0, 0.0, 1.5)


class TestQuantileDependenceGaussian:
    def test_independence_gives_q(self):
        for q in (0.1, 0.3, 0.5):
            assert quantile_dependence_gaussian(q, 0.0) == pytest.approx(q, abs=1e-12)

    def test_comonotone_gives_one(self):
        assert quantile_dependence_gaussian(0.3, 1.0) == pytest.approx(1.0, abs=1e-12)

    def test_extremal_limit_decreasing(self):
        vals = [float(quantile_dependence_gaussian(q, 0.7)) for q in (1e-2, 1e-3, 1e-4)]
        assert vals[0] > vals[1] > vals[2] > 0.0

    def test_upper_lower_symmetry(self):
        # Gaussian copulas are radially symmetric: lambda_U(q) = lambda_L(1 - q)
        for q in (0.9, 0.99):
            up = quantile_dependence_gaussian(q, 0.6, "upper")
            lo = quantile_dependence_gaussian(1 - q, 0.6, "lower")
            assert up == pytest.approx(lo, abs=1e-10)


def pair_state(seed=0, kind="hpsc", p1=6, p2=5):
    rng = np.random.default_rng(seed)
    if kind == "hpsc":
        return CopulaState("hpsc", rng.normal(0, 0.5, p1), Ar2Hyper(1.2, 0.3, -0.1),
                           rng.normal(0, 0.3, p2), Ar2Hyper(0.8, 0.1, 0.0))
    return CopulaState("hrbfc", rng.normal(0, 0.5, p1),
                       HorseshoeHyper(np.exp(rng.normal(0, 0.3, p1)), 1.0),
                       rng.normal(0, 0.3, p2),
                       HorseshoeHyper(np.ones(p2), 1.0))


class TestPairwiseR:
    def test_identical_points_give_one(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0, 1, 10)
        B, bg = build_bspline_design(x, 6)
        V, vg = build_bspline_design(x, 5)
        design = make_design(B, V)
        state = pair_state()
        b = evaluate_basis(bg, np.array([0.4, 0.4]))
        v = evaluate_basis(vg, np.array([0.4, 0.4]))
        assert pairwise_r(state, append_points(design, b, v)) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint_support_gives_zero(self):
        # identity prior covariance: cross term is b_a' b_b = 0 for disjoint support
        state = CopulaState("hrbfc", np.zeros(8), HorseshoeHyper(np.ones(8), 1.0),
                            np.zeros(2), HorseshoeHyper(np.ones(2), 1.0))
        b_a = np.zeros(8)
        b_a[0] = 1.0
        b_b = np.zeros(8)
        b_b[7] = 1.0
        design = make_design(np.vstack([b_a, b_b]), np.zeros((2, 2)))
        assert pairwise_r(state, design) == 0.0

    def test_matches_dense_R(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 1, 8)
        B, bg = build_bspline_design(x, 6)
        V, vg = build_bspline_design(x, 5)
        design = make_design(B, V)
        state = pair_state(seed=3)
        b = evaluate_basis(bg, np.array([0.3, 0.7]))
        v = evaluate_basis(vg, np.array([0.3, 0.7]))
        plus = append_points(design, b, v)
        R = correlation_matrix(state, plus)
        assert pairwise_r(state, plus) == pytest.approx(R[-2, -1], abs=1e-12)


class TestArcsinMetrics:
    def constant_r_draws(self, r):
        """Draws engineered so the pair correlation is exactly r each draw."""
        lam = np.array([1.0, 1.0])
        state = CopulaState("hrbfc", np.zeros(2), HorseshoeHyper(lam, 1.0),
                            np.zeros(1), HorseshoeHyper(np.ones(1), 1.0))
        # rows (a, b) with unit self-quad + sigma2 = 1 give
        # r = (a . b) / sqrt((1+1)(1+1)); choose a, b for the target r
        c = 2.0 * r
        a_row = np.array([1.0, 0.0])
        b_row = np.array([c, np.sqrt(max(1.0 - c * c, 0.0))]) if abs(c) <= 1 else None
        if b_row is None:  # need |r| > 0.5: scale the basis rows instead
            a_row = np.array([np.sqrt(2.0), 0.0])
            b_row = np.array([np.sqrt(2.0) * r / 1.0, 0.0])
            # self-quad of b must be 1: add second component
            rest = 2.0 - b_row[0] ** 2
            b_row[1] = np.sqrt(max(rest, 0.0))
            # sigma2 = 1 gives s = 1/sqrt(1+2) for a; adjust: use direct check below
        pair = (np.vstack([a_row, b_row]), np.zeros((2, 1)))
        return pair, PosteriorDraws.from_states([state], "mcmc")

    def test_closed_identities(self):
        # identical points form a self-pair: r = 1, so rho = (6/pi) arcsin(1/2) = 1
        # and tau = (2/pi) arcsin(1) = 1
        state = CopulaState("hrbfc", np.zeros(2), HorseshoeHyper(np.ones(2), 1.0),
                            np.zeros(1), HorseshoeHyper(np.ones(1), 1.0))
        row = np.array([1.0, 1.0])
        pair = (np.vstack([row, row]), np.zeros((2, 1)))
        draws = PosteriorDraws.from_states([state], "mcmc")
        assert spearman_rho(pair, draws) == pytest.approx(1.0, abs=1e-12)
        assert kendall_tau(pair, draws) == pytest.approx(1.0, abs=1e-12)

    def test_zero_r(self):
        state = CopulaState("hrbfc", np.zeros(2), HorseshoeHyper(np.ones(2), 1.0),
                            np.zeros(1), HorseshoeHyper(np.ones(1), 1.0))
        pair = (np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros((2, 1)))
        draws = PosteriorDraws.from_states([state], "mcmc")
        assert spearman_rho(pair, draws) == 0.0
        assert kendall_tau(pair, draws) == 0.0

    def test_half_r_kendall(self):
        # self-quads 3 and cross 2 give r = 2 / sqrt((1+3)(1+3)) = 0.5,
        # hence tau = (2/pi) arcsin(0.5) = 1/3
        state = CopulaState("hrbfc", np.zeros(3), HorseshoeHyper(np.ones(3), 1.0),
                            np.zeros(1), HorseshoeHyper(np.ones(1), 1.0))
        a = np.array([np.sqrt(3.0), 0.0, 0.0])
        b = np.array([2.0 / np.sqrt(3.0), np.sqrt(5.0 / 3.0), 0.0])
        pair = (np.vstack([a, b]), np.zeros((2, 1)))
        draws = PosteriorDraws.from_states([state], "mcmc")
        assert kendall_tau(pair, draws) == pytest.approx(1.0 / 3.0, abs=1e-12)

    @pytest.mark.parametrize("r", [0.2, 0.5, 0.9])
    def test_rank_correlation_simulation(self, r):
        """arcsin values vs empirical rank correlations of simulated pairs."""
        rng = np.random.default_rng(int(r * 100))
        n = 100_000
        z1 = rng.standard_normal(n)
        z2 = r * z1 + np.sqrt(1 - r * r) * rng.standard_normal(n)
        u1, u2 = ndtr(z1), ndtr(z2)
        rho_hat = spearmanr(u1, u2).statistic
        tau_hat = kendalltau(u1, u2).statistic
        assert abs(6 / np.pi * np.arcsin(r / 2) - rho_hat) < 0.01
        assert abs(2 / np.pi * np.arcsin(r) - tau_hat) < 0.01


class TestQuantileDependenceMetric:
    def test_posterior_average(self):
        states = [pair_state(seed=s) for s in (1, 2, 3)]
        rng = np.random.default_rng(4)
        x = rng.uniform(0, 1, 6)
        B, bg = build_bspline_design(x, 6)
        V, vg = build_bspline_design(x, 5)
        b = evaluate_basis(bg, np.array([0.4, 0.5]))
        v = evaluate_basis(vg, np.array([0.4, 0.5]))
        pair = (b, v)
        draws = PosteriorDraws.from_states(states, "mcmc")
        val = quantile_dependence(pair, draws, q=0.1, tail="lower")
        per = [quantile_dependence(pair, PosteriorDraws.from_states([s], "mcmc"), 0.1)
               for s in states]
        assert val == pytest.approx(np.mean(per), abs=1e-12)
        assert 0.0 <= val <= 1.0


class TestSurface:
    def make_fit(self, n=150, seed=5):
        ds, state = hpsc_dataset(n, 10, 6, seed=seed)
        x = ds.X[:, 0]
        B, bg = build_bspline_design(x, 10)
        V, vg = build_bspline_design(x, 6)

        def builder(xs):
            return evaluate_basis(bg, xs), evaluate_basis(vg, xs)

        return state, builder

    def test_diagonal_and_symmetry(self):
        state, builder = self.make_fit()
        draws = PosteriorDraws.from_states([state], "mcmc")
        grid = np.linspace(0.1, 0.9, 9)
        surf = dependence_surface("spearman", grid, draws, builder)
        assert np.allclose(np.diag(surf.values), 1.0, atol=1e-10)
        assert np.array_equal(surf.values, surf.values.T)
        assert np.all(surf.values >= -1) and np.all(surf.values <= 1)
        tau = dependence_surface("kendall", grid, draws, builder)
        assert np.allclose(np.diag(tau.values), 1.0, atol=1e-10)

    def test_decay_with_distance(self):
        state, builder = self.make_fit()
        draws = PosteriorDraws.from_states([state], "mcmc")
        grid = np.linspace(0.2, 0.8, 7)
        surf = dependence_surface("spearman", grid, draws, builder)
        mid = 3
        row = surf.values[mid]
        assert row[mid] == max(row)
        assert row[0] < row[mid - 1] and row[-1] < row[mid + 1]

    def test_quantile_surface_range(self):
        state, builder = self.make_fit()
        draws = PosteriorDraws.from_states([state], "mcmc")
        grid = np.linspace(0.2, 0.8, 5)
        surf = dependence_surface("quantile_upper", grid, draws, builder, q=0.95)
        assert np.all(surf.values >= 0) and np.all(surf.values <= 1)
        with pytest.raises(ConfigurationError):
            dependence_surface("quantile_upper", grid, draws, builder)  # missing q

    def test_heteroscedastic_surface_varies_locally(self):
        """At fixed pair distance the heteroscedastic copula's dependence
        varies with location more than the homoscedastic one."""
        ds, state = hpsc_dataset(150, 10, 6, seed=7, alpha_scale=1.6)
        x = ds.X[:, 0]
        B, bg = build_bspline_design(x, 10)
        V, vg = build_bspline_design(x, 6)

        def builder(xs):
            return evaluate_basis(bg, xs), evaluate_basis(vg, xs)

        psc_state = CopulaState("psc", state.beta, state.hyper_beta)
        grid = np.linspace(0.15, 0.85, 21)
        h = dependence_surface("spearman", grid, PosteriorDraws.from_states([state], "mcmc"), builder)
        p = dependence_surface("spearman", grid, PosteriorDraws.from_states([psc_state], "mcmc"), builder)
        off = 2  # fixed |x_a - x_b| along a shifted diagonal
        h_diag = np.array([h.values[i, i + off] for i in range(len(grid) - off)])
        p_diag = np.array([p.values[i, i + off] for i in range(len(grid) - off)])
        assert np.var(h_diag) > np.var(p_diag)

    def test_csv_output(self, tmp_path):
        surf = DependenceSurface(np.array([0.0, 1.0]), np.array([0.0, 1.0]),
                                 np.array([[1.0, 0.5], [0.5, 1.0]]), "spearman")
        path = tmp_path / "surf.csv"
        save_surface_csv(path, surf)
        lines = path.read_text().splitlines()
        assert lines[0] == "x_a,x_b,value"
        assert len(lines) == 5
