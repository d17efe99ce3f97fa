import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fedhm.datasets import DeviceDataset, FederatedDataset
from fedhm.ep import (
    DegenerateTiltError,
    EpAggregationError,
    EpAlgorithm,
    EpConfig,
    EpState,
    cavity,
    reconcile_sites,
    server_aggregate,
    site_delta,
    tilt,
    tilted_project,
)
from fedhm.gaussian import NaturalGaussian, gaussian_product
from fedhm.models import DeviceStats, log_marginal_gaussian, make_spec
from fedhm.runtime import RoundConfig, run_rounds

STD = NaturalGaussian([0.0], [[1.0]])


def scalar(r, Q):
    return NaturalGaussian([float(r)], [[float(Q)]])


def conjugate_log_f(phi, rng):
    # y = 2 observed once with unit noise around phi
    return stats.norm.logpdf(2.0, phi[:, 0], 1.0)


def grid_posterior(dev, spec, lo=(-6, -12), hi=(6, 6), n=(601, 901)):
    """Posterior moments of a two-dimensional phi by brute-force quadrature."""
    g1, g2 = np.linspace(lo[0], hi[0], n[0]), np.linspace(lo[1], hi[1], n[1])
    M, L = np.meshgrid(g1, g2, indexing="ij")
    phi = np.stack([M.ravel(), L.ravel()], axis=1)
    pm = spec.prior.to_moments()
    lp = log_marginal_gaussian(phi, dev, spec) + stats.multivariate_normal(pm.mu, pm.sigma).logpdf(phi)
    w = np.exp(lp - lp.max())
    w /= w.sum()
    mean = w @ phi
    cov = ((phi - mean) * w[:, None]).T @ (phi - mean)
    return mean, cov


class TestCavity:
    def test_fresh_site(self):
        q = scalar(3, 2)
        c, ok = cavity(q, NaturalGaussian.zeros(1))
        assert ok and c.allclose(q)

    def test_subtraction(self):
        c, ok = cavity(scalar(7, 3), scalar(6, 2))
        assert ok and c.allclose(scalar(1, 1))

    def test_improper_flag(self):
        _, ok = cavity(scalar(0, 1), scalar(0, 2))
        assert not ok

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_inverse_of_product(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((3, 3))
        q0 = NaturalGaussian(rng.standard_normal(3), A @ A.T + np.eye(3))
        s = NaturalGaussian(rng.standard_normal(3), np.diag(rng.uniform(-0.5, 2, 3)))
        c, _ = cavity(gaussian_product(q0, s), s)
        assert c.allclose(q0, atol=1e-12)


class TestTilt:
    def test_flat_factor_returns_cavity(self):
        out = tilted_project(scalar(1, 2), lambda phi, rng: np.zeros(len(phi)), mc_draws=256,
                             rng=np.random.default_rng(0))
        assert out.allclose(scalar(1, 2), atol=1e-12)

    def test_empty_dataset_returns_cavity(self):
        spec = make_spec("lassoLaplace", 2)
        empty = DeviceStats(np.zeros((2, 2)), np.zeros(2), 0.0, 0)
        cav = NaturalGaussian.from_moments([0.0, 0.0], np.eye(2))
        assert tilted_project(cav, spec, empty, rng=np.random.default_rng(0)) is cav

    def test_conjugate_normal(self):
        out = tilted_project(STD, conjugate_log_f, mc_draws=4096, rng=np.random.default_rng(1)).to_moments()
        assert out.mu[0] == pytest.approx(1.0, abs=0.05)
        assert out.sigma[0, 0] == pytest.approx(0.5, abs=0.05)

    def test_error_halves_when_draws_double(self):
        rng = np.random.default_rng(2)
        mse = {}
        for n in (256, 512, 1024):
            errs = [tilt(STD, conjugate_log_f, n, rng).q_new.to_moments().mu[0] - 1.0 for _ in range(400)]
            mse[n] = np.mean(np.square(errs))
        assert 1.4 < mse[256] / mse[512] < 2.8
        assert 1.4 < mse[512] / mse[1024] < 2.8

    def test_refinement_rescues_a_sharp_factor(self):
        # a narrow likelihood three cavity sd out: the cavity alone puts a
        # handful of draws there, the refined proposal covers it
        sharp = lambda phi, rng: stats.norm.logpdf(3.0, phi[:, 0], 0.05)
        res = tilt(STD, sharp, 4096, np.random.default_rng(3))
        m = res.q_new.to_moments()
        exact_var = 1 / (1 + 1 / 0.05**2)
        exact_mean = exact_var * 3.0 / 0.05**2
        assert res.refinements >= 1 and res.ess > 0.5 * 4096
        assert m.mu[0] == pytest.approx(exact_mean, abs=0.01)
        assert m.sigma[0, 0] == pytest.approx(exact_var, rel=0.05)

    def test_degenerate(self):
        spike = lambda phi, rng: np.where(np.arange(len(phi)) == 0, 0.0, -np.inf)
        with pytest.raises(DegenerateTiltError, match="effective sample size"):
            tilt(STD, spike, 512, np.random.default_rng(0), refine=0)

    def test_improper_cavity_refused(self):
        with pytest.raises(Exception, match="improper"):
            tilted_project(scalar(0, -1), conjugate_log_f, rng=np.random.default_rng(0))


class TestSiteDelta:
    def test_converged(self):
        d = site_delta(scalar(3, 2), scalar(3, 2), 0.5)
        assert np.all(d.r == 0) and np.all(d.Q == 0)

    def test_undamped(self):
        assert site_delta(scalar(3, 2), scalar(1, 1), 1.0).allclose(scalar(2, 1))

    def test_damping_is_linear(self):
        assert site_delta(scalar(3, 2), scalar(1, 1), 0.5).allclose(scalar(1, 0.5))

    def test_damping_range(self):
        with pytest.raises(ValueError):
            site_delta(scalar(3, 2), scalar(1, 1), 0.0)


class TestServerAggregate:
    def test_no_deltas(self):
        s = EpState.initial(scalar(1, 1), 3)
        assert server_aggregate(s, {}) is s

    def test_single_delta(self):
        s = server_aggregate(EpState.initial(scalar(1, 1), 1), {0: scalar(2, 1)})
        assert s.q.allclose(scalar(3, 2)) and s.bookkeeping_gap() == 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.permutations(range(5)))
    def test_permutation_invariant(self, seed, order):
        rng = np.random.default_rng(seed)
        prior = NaturalGaussian.from_moments(np.zeros(2), np.eye(2))
        deltas = {}
        for k in range(5):
            A = rng.standard_normal((2, 2))
            deltas[k] = NaturalGaussian(rng.standard_normal(2), 0.2 * A @ A.T)
        a = server_aggregate(EpState.initial(prior, 5), deltas)
        b = server_aggregate(EpState.initial(prior, 5), {k: deltas[k] for k in order})
        assert np.array_equal(a.q.r, b.q.r) and np.array_equal(a.q.Q, b.q.Q)

    def test_halving_keeps_q_proper_and_bookkeeping_exact(self):
        s = EpState.initial(scalar(0, 1), 2)
        out = server_aggregate(s, {0: scalar(0, -0.6), 1: scalar(0, -0.6)})
        assert out.q.is_proper() and out.last_scale < 1.0
        assert out.pending_scale == [out.last_scale] * 2
        assert out.bookkeeping_gap() < 1e-15
        # the retained-precision guard: at least half of the old precision survives
        assert out.q.Q[0, 0] >= 0.5

    def test_gives_up_with_eigenvalue_report(self):
        s = EpState.initial(scalar(0, 1), 1)
        with pytest.raises(EpAggregationError, match="smallest precision eigenvalue"):
            server_aggregate(s, {0: scalar(0, -100.0)}, max_halvings=2)


def one_device(n=30, seed=0, slope=1.5, noise=0.5):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((1, n))
    return DeviceDataset("1", X, slope * X[0] + noise * rng.standard_normal(n))


class TestAlgorithm:
    def test_single_device_matches_exact_posterior(self):
        dev = one_device()
        spec = make_spec("meanFieldNormal", 1, noise_var=0.25)
        res = run_rounds(EpAlgorithm(spec, EpConfig(damping=1.0, mc_draws=20000)), FederatedDataset([dev]),
                         RoundConfig(2, seed=1))
        m = res.server.q.to_moments()
        mean, cov = grid_posterior(dev, spec)
        assert np.max(np.abs(m.mu - mean)) < 0.05
        assert np.max(np.abs(np.sqrt(np.diag(m.sigma)) - np.sqrt(np.diag(cov)))) < 0.05

    def test_degenerate_conjugate_mean_block(self):
        # log tau pinned near -18: theta equals mu and the model is conjugate in mu
        dev = one_device(n=20, seed=3)
        spec = make_spec("meanFieldNormal", 1, prior_mean=[0.0, -18.0], prior_sd=[1.0, 1e-3], noise_var=0.25)
        res = run_rounds(EpAlgorithm(spec, EpConfig(damping=1.0, mc_draws=20000)), FederatedDataset([dev]),
                         RoundConfig(1, seed=2))
        prec = 1.0 + dev.X[0] @ dev.X[0] / 0.25
        exact_mean = (dev.X[0] @ dev.Y / 0.25) / prec
        m = res.server.q.to_moments()
        assert m.mu[0] == pytest.approx(exact_mean, abs=0.05)
        assert np.sqrt(m.sigma[0, 0]) == pytest.approx(np.sqrt(1 / prec), abs=0.05)

    def test_identical_devices_get_equal_sites(self):
        dev = one_device(n=40, seed=5)
        devs = [DeviceDataset(str(k), dev.X, dev.Y) for k in range(4)]
        spec = make_spec("meanFieldNormal", 1, noise_var=0.25)
        alg = EpAlgorithm(spec, EpConfig(damping=0.5, mc_draws=8192))
        res = run_rounds(alg, FederatedDataset(devs), RoundConfig(8, seed=3))
        sites = reconcile_sites(res.devices, res.server)
        means = np.array([s.r for s in sites])
        assert np.max(np.abs(means - means.mean(axis=0))) < 0.15 * (1 + np.max(np.abs(means)))
        assert res.server.bookkeeping_gap() < 1e-9

    def test_bookkeeping_and_skips_logged(self):
        devs = [one_device(n=25, seed=s) for s in range(3)]
        devs = [DeviceDataset(str(k), d.X, d.Y) for k, d in enumerate(devs)]
        spec = make_spec("meanFieldNormal", 1, noise_var=0.25)
        res = run_rounds(EpAlgorithm(spec, EpConfig(mc_draws=1024)), FederatedDataset(devs), RoundConfig(5, seed=0))
        server = res.server
        sites = reconcile_sites(res.devices, server)
        total = NaturalGaussian(server.prior.r + sum(s.r for s in sites), server.prior.Q + sum(s.Q for s in sites))
        assert total.allclose(server.q, atol=1e-9)
        assert "phi_mean.mu[0]" in res.manifest.per_round[-1]["monitors"]

    def test_dimension_mismatch(self):
        spec = make_spec("meanFieldNormal", 2, noise_var=1.0)
        with pytest.raises(ValueError, match="d=2"):
            run_rounds(EpAlgorithm(spec), FederatedDataset([one_device()]), RoundConfig(1))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EpConfig(damping=1.5)
        with pytest.raises(ValueError):
            EpConfig(mc_draws=4)
