import numpy as np
import pytest

from regcopula.bases import build_bspline_design, make_design
from regcopula.config import RunConfig
from regcopula.copula import CopulaState, normalization
from regcopula.errors import ConfigurationError, NumericalError
from regcopula.fitting import build_model_design
from regcopula.margins import fit_kde_margin
from regcopula.mcmc import (
    ChainOutput,
    DualAveragingState,
    McmcConfig,
    find_reasonable_eps,
    hmc_step,
    inefficiency_factor,
    leapfrog,
    load_chain_thetas,
    mh_mode_curvature_step,
    run_chain,
    save_chain,
)
from regcopula.priors import Ar2Hyper
from regcopula.synthetic import hpsc_dataset


def std_normal_target(q):
    return -0.5 * float(q @ q), -q


class TestLeapfrog:
    def test_reversibility(self):
        rng = np.random.default_rng(0)
        q0 = rng.standard_normal(10)
        r0 = rng.standard_normal(10)
        grad = lambda q: -q
        q1, r1 = leapfrog(q0, r0, 0.1, 25, grad)
        q2, r2 = leapfrog(q1, -r1, 0.1, 25, grad)
        assert np.max(np.abs(q2 - q0)) < 1e-10
        assert np.max(np.abs(-r2 - r0)) < 1e-10

    def test_energy_error_second_order(self):
        """Halving eps at fixed trajectory length quarters the energy error."""
        rng = np.random.default_rng(1)
        q0 = rng.standard_normal(6)
        r0 = rng.standard_normal(6)
        grad = lambda q: -q
        length = 2.0

        def dh(eps):
            q1, r1 = leapfrog(q0, r0, eps, int(round(length / eps)), grad)
            return abs(0.5 * (q1 @ q1 + r1 @ r1) - 0.5 * (q0 @ q0 + r0 @ r0))

        ratio = dh(0.1) / dh(0.05)
        assert 4.0 / 1.5 < ratio < 4.0 * 1.5


class TestHmc:
    def test_acceptance_calibration(self):
        """Post-adaptation acceptance concentrates near the 0.75 target."""
        rng = np.random.default_rng(2)
        q = rng.standard_normal(10)
        eps0 = find_reasonable_eps(q, std_normal_target, rng)
        da = DualAveragingState(eps=eps0, mu=np.log(10 * eps0), M_adapt=2000)
        probs = []
        for m in range(4000):
            q, p, _ = hmc_step(q, std_normal_target, da.eps, da.iota, rng)
            da.update(p)
            if m >= 2000:
                probs.append(p)
        assert 0.65 <= np.mean(probs) <= 0.85

    def test_eps_frozen_after_adaptation(self):
        da = DualAveragingState(eps=0.5, mu=np.log(5.0), M_adapt=5)
        for _ in range(5):
            da.update(0.9)
        frozen = da.eps_bar
        for _ in range(10):
            da.update(0.1)
        assert da.eps == frozen
        assert da.eps_bar == frozen

    def test_divergence_rejects(self):
        def blowup(q):
            return -0.5 * float(q @ q) * 1e8, -q * 1e8

        rng = np.random.default_rng(3)
        q0 = np.ones(3)
        q1, prob, accepted = hmc_step(q0, blowup, eps=10.0, iota=10.0, rng=rng)
        assert prob == 0.0 and not accepted
        assert np.array_equal(q1, q0)

    def test_sampling_moments(self):
        rng = np.random.default_rng(4)
        q = np.zeros(4)
        draws = []
        for _ in range(4000):
            q, _, _ = hmc_step(q, std_normal_target, 0.8, 1.0, rng)
            draws.append(q.copy())
        draws = np.array(draws[500:])
        assert np.max(np.abs(draws.mean(axis=0))) < 0.15
        assert np.max(np.abs(draws.std(axis=0) - 1.0)) < 0.12


class TestModeCurvatureMh:
    def test_stationary_for_gaussian_target(self):
        """Exact Gaussian target: the Newton proposal is an independence
        sampler at the true mode, so acceptance is 1 and draws are iid."""
        mu, sd = 1.3, 0.7

        def target(x):
            return -0.5 * ((x - mu) / sd) ** 2, -(x - mu) / sd**2, -1.0 / sd**2

        rng = np.random.default_rng(5)
        x = -2.0
        xs = []
        for _ in range(4000):
            x, acc, fb = mh_mode_curvature_step(target, x, rng)
            assert not fb
            xs.append(x)
        xs = np.array(xs[100:])
        assert xs.mean() == pytest.approx(mu, abs=4 * sd / np.sqrt(len(xs)) + 0.02)
        assert xs.std() == pytest.approx(sd, rel=0.08)

    def test_fallback_on_convex_target(self):
        def target(x):
            return -abs(x), -np.sign(x), 1.0  # positive curvature everywhere

        rng = np.random.default_rng(6)
        _, _, fb = mh_mode_curvature_step(target, 0.5, rng)
        assert fb

    def test_skewed_target_stationarity(self):
        """Long-chain mean of a gamma-like target matches quadrature."""
        a = 3.0

        def target(u):  # log-density of log X, X ~ Gamma(a, 1)
            return a * u - np.exp(u), a - np.exp(u), -np.exp(u)

        from scipy.integrate import quad

        norm = quad(lambda u: np.exp(a * u - np.exp(u)), -10, 10)[0]
        true_mean = quad(lambda u: u * np.exp(a * u - np.exp(u)) / norm, -10, 10)[0]
        rng = np.random.default_rng(7)
        x = 0.0
        xs = []
        n_acc = 0
        for _ in range(20000):
            x, acc, _ = mh_mode_curvature_step(target, x, rng)
            n_acc += acc
            xs.append(x)
        xs = np.array(xs[1000:])
        rate = n_acc / 20000
        assert 0.1 < rate < 0.99
        se = xs.std() / np.sqrt(len(xs) / 10)  # crude autocorrelation allowance
        assert abs(xs.mean() - true_mean) < 4 * max(se, 0.01)


@pytest.fixture(scope="module")
def small_problem():
    ds, state = hpsc_dataset(120, 8, 6, seed=3)
    cfg = RunConfig(model="hpsc", estimator="vb", p1=8, p2=6, x_columns=("x",))
    margin = fit_kde_margin(ds.y, 1024)
    _, _, _, design = build_model_design(cfg, ds)
    return ds, margin, design


class TestGibbsBeta:
    def make_sweep(self, design, z, alpha_steps=True):
        from regcopula.mcmc import _Sweep

        cfg = McmcConfig(model_kind="hpsc" if alpha_steps else "psc", burn_in=1, draws=1)
        return _Sweep(design, z, cfg)

    def test_zero_data_mean(self):
        rng = np.random.default_rng(8)
        x = rng.uniform(0, 1, 40)
        B, _ = build_bspline_design(x, 5)
        design = make_design(B, B)
        sweep = self.make_sweep(design, np.zeros(40), alpha_steps=False)
        draws = []
        for _ in range(20000):
            sweep.step_beta(rng)
            draws.append(sweep.beta.copy())
        draws = np.array(draws)
        se = draws.std(axis=0) / np.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0)) < 4 * se)

    def test_prior_shrinkage_limit(self):
        rng = np.random.default_rng(9)
        x = rng.uniform(0, 1, 40)
        B, _ = build_bspline_design(x, 5)
        design = make_design(B, B)
        z = rng.standard_normal(40)
        sweep = self.make_sweep(design, z, alpha_steps=False)
        sweep.tau2_beta = 1e-10
        sweep.quad = sweep.tau2_beta * sweep.c_unique[design.b_index]
        sweep._refresh_sigma()
        sweep.step_beta(rng)
        assert np.max(np.abs(sweep.beta)) < 1e-3

    def test_sample_covariance_matches_oracle(self):
        rng = np.random.default_rng(10)
        x = rng.uniform(0, 1, 60)
        B, _ = build_bspline_design(x, 5)
        design = make_design(B, B)
        z = rng.standard_normal(60)
        sweep = self.make_sweep(design, z, alpha_steps=False)
        P = (sweep.delta_beta.T @ sweep.delta_beta) / sweep.tau2_beta
        A = design.B.T @ design.B + P
        cov_oracle = np.linalg.inv(A)
        draws = np.array([(sweep.step_beta(rng), sweep.beta.copy())[1] for _ in range(100_000)])
        emp = np.cov(draws.T)
        rel = np.linalg.norm(emp - cov_oracle) / np.linalg.norm(cov_oracle)
        assert rel < 0.05


class TestRunChain:
    def test_seeded_determinism(self, small_problem):
        ds, margin, design = small_problem
        cfg = McmcConfig(model_kind="hpsc", burn_in=50, draws=100)
        a = run_chain(cfg, design, ds.y, margin, rng_seed=5)
        b = run_chain(cfg, design, ds.y, margin, rng_seed=5)
        assert np.array_equal(a.draws.thetas, b.draws.thetas)
        assert a.acceptance == b.acceptance

    def test_draw_count_arithmetic(self, small_problem):
        ds, margin, design = small_problem
        cfg = McmcConfig(model_kind="hpsc", burn_in=30, draws=90, thin=3)
        out = run_chain(cfg, design, ds.y, margin, rng_seed=6)
        assert len(out.draws) == 30

    def test_psc_equals_hpsc_with_alpha_disabled(self, small_problem):
        ds, margin, design = small_problem
        psc_design = make_design(design.B, np.zeros((design.n, 0)))
        a = run_chain(McmcConfig(model_kind="psc", burn_in=40, draws=80),
                      psc_design, ds.y, margin, rng_seed=7)
        b = run_chain(McmcConfig(model_kind="hpsc", alpha_steps=False, burn_in=40, draws=80),
                      psc_design, ds.y, margin, rng_seed=7)
        assert np.array_equal(a.draws.thetas, b.draws.thetas)

    def test_acceptance_rates_reasonable(self, small_problem):
        ds, margin, design = small_problem
        cfg = McmcConfig(model_kind="hpsc", burn_in=300, draws=600)
        out = run_chain(cfg, design, ds.y, margin, rng_seed=8)
        for name in ("tau2_beta", "psi1_beta", "psi2_beta", "tau2_alpha"):
            assert 0.1 < out.acceptance[name] < 0.99

    def test_posterior_recovers_curve(self):
        """Homoscedastic synthetic data: the generating curve lies inside the
        posterior bands of E(Y | x) at most design points."""
        rng = np.random.default_rng(11)
        n = 200
        x = np.sort(rng.uniform(0, 1, n))
        f = np.sin(2 * np.pi * x) + 1.5 * x
        y = f + 0.3 * rng.standard_normal(n)
        from regcopula.config import Dataset
        from regcopula.predict import PredictiveInput, moment_functions

        ds = Dataset(y, x[:, None], x[:, None].copy(), "y", ["x"], ["x"])
        cfg = RunConfig(model="psc", estimator="vb", p1=10, x_columns=("x",))
        margin = fit_kde_margin(ds.y, 1024)
        mk, _, _, design = build_model_design(cfg, ds)
        out = run_chain(McmcConfig(model_kind="psc", burn_in=1500, draws=3000),
                        design, ds.y, margin, rng_seed=12)
        sub = out.draws.subsample(150)
        from regcopula.bases import evaluate_basis

        grid = np.linspace(0.08, 0.92, 15)
        hits = 0
        for gx in grid:
            b_new = evaluate_basis(mk, np.array([gx]))[0]
            pt = PredictiveInput(b_new, np.zeros(0))
            per_draw = [
                moment_functions(pt, out.draws.__class__(sub.thetas[j : j + 1], sub.template, "mcmc"),
                                 margin, n_nodes=256, refine=256, max_draws=1)[0]
                for j in range(len(sub))
            ]
            lo, hi = np.percentile(per_draw, [2.5, 97.5])
            truth = np.sin(2 * np.pi * gx) + 1.5 * gx
            hits += lo <= truth <= hi
        assert hits >= 0.9 * len(grid)


class TestInefficiencyFactor:
    def test_iid_baseline(self):
        x = np.random.default_rng(13).standard_normal(10_000)
        assert 0.8 <= inefficiency_factor(x, 100) <= 1.2

    def test_ar1_analytic(self):
        rng = np.random.default_rng(14)
        n = 100_000
        x = np.empty(n)
        x[0] = 0.0
        eps = rng.standard_normal(n)
        for i in range(1, n):
            x[i] = 0.5 * x[i - 1] + eps[i]
        val = inefficiency_factor(x, 500)
        assert val == pytest.approx(3.0, rel=0.2)

    def test_constant_trace_rejected(self):
        with pytest.raises(NumericalError):
            inefficiency_factor(np.ones(1000), 10)

    def test_short_trace_rejected(self):
        with pytest.raises(ConfigurationError):
            inefficiency_factor(np.random.default_rng(0).standard_normal(50), 10)

    def test_prediction_trace_usage(self, small_problem):
        """The diagnosed quantity is a prediction trace, not a raw parameter."""
        ds, margin, design = small_problem
        out = run_chain(McmcConfig(model_kind="hpsc", burn_in=100, draws=400),
                        design, ds.y, margin, rng_seed=15)
        b_row = design.B[10]
        s_row = []
        for state in out.draws.states():
            cache = normalization(state, design)
            s_row.append(np.sqrt(cache.s2[10]) * float(b_row @ state.beta))
        val = inefficiency_factor(np.array(s_row), 40)
        assert val > 0


def test_chain_serialization(tmp_path, ):
    ds, state = hpsc_dataset(60, 6, 5, seed=4)
    cfg = RunConfig(model="hpsc", estimator="vb", p1=6, p2=5, x_columns=("x",))
    margin = fit_kde_margin(ds.y, 512)
    _, _, _, design = build_model_design(cfg, ds)
    out = run_chain(McmcConfig(model_kind="hpsc", burn_in=10, draws=20), design, ds.y, margin, 1)
    path = tmp_path / "chain.txt"
    save_chain(path, out)
    labels, thetas = load_chain_thetas(path)
    assert labels[0] == "beta_0" and labels[-1] == "tpsi2_alpha"
    assert np.array_equal(thetas, out.draws.thetas)
