import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.special import logsumexp

from mtdskit.adais import (
    AdaIsConfig,
    CovarianceError,
    GaussianMixture,
    NoSupportError,
    WeightedSample,
    adais_fit,
    ess,
    filter_times,
    gmm_logpdf,
    gmm_sample,
    naive_smc_ess_trace,
    naive_smc_reweight,
    posterior_predictive,
    posterior_target,
    sequential_filter,
    weighted_em,
)
from mtdskit.core import ParamGenerator
from mtdskit.data import generate_synthetic, lds_family, pd_family

NEG_LOG_2PI = -1.8378770664093455
MIXTURE_AT_ZERO = -2.6565742687371817  # log(0.3 N(0; -1, 0.25) + 0.7 N(0; 2, 1))


def normal_logpdf(x, m, sd):
    return -0.5 * ((x - m) / sd) ** 2 - math.log(sd) - 0.5 * math.log(2 * math.pi)


class TestEss:
    def test_examples(self):
        assert math.isclose(ess(np.full(100, 0.01)), 100.0, rel_tol=1e-12)
        assert ess([1.0, 0.0, 0.0]) == 1.0
        assert ess([0.5, 0.5, 0.0, 0.0]) == 2.0

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=200))
    def test_bounds(self, logw):
        w = np.exp(np.array(logw) - max(logw))
        w /= w.sum()
        e = ess(w)
        assert 1.0 - 1e-12 <= e <= len(w) * (1 + 1e-12)
        if abs(e - len(w)) < 1e-12 * len(w):
            assert np.allclose(w, 1.0 / len(w), rtol=1e-5)


class TestMixture:
    def test_logpdf_examples(self):
        assert math.isclose(gmm_logpdf(GaussianMixture.standard(2), np.zeros(2)), NEG_LOG_2PI, rel_tol=1e-15)
        one = GaussianMixture([1.0], [[0.5, -1.0]], [[[2.0, 0.3], [0.3, 1.0]]])
        two = GaussianMixture([0.5, 0.5], [[0.5, -1.0]] * 2, [[[2.0, 0.3], [0.3, 1.0]]] * 2)
        z = np.array([0.1, 0.4])
        assert math.isclose(gmm_logpdf(one, z), gmm_logpdf(two, z), rel_tol=1e-14)
        mix = GaussianMixture([0.3, 0.7], [[-1.0], [2.0]], [[[0.25]], [[1.0]]])
        assert math.isclose(gmm_logpdf(mix, np.zeros(1)), MIXTURE_AT_ZERO, rel_tol=1e-14)

    def test_validation(self):
        with pytest.raises(ValueError):
            GaussianMixture([0.6, 0.6], [[0.0], [1.0]], [[[1.0]], [[1.0]]])
        with pytest.raises(CovarianceError) as exc:
            GaussianMixture([0.5, 0.5], [[0.0], [1.0]], [[[1.0]], [[-1.0]]])
        assert exc.value.component == 1
        with pytest.raises(ValueError):
            GaussianMixture([1.0], [[0.0, 0.0]], [[[1.0]]])

    def test_normalizes_on_a_line(self):
        mix = GaussianMixture([0.2, 0.5, 0.3], [[-3.0], [0.0], [4.0]], [[[0.3]], [[1.0]], [[2.5]]])
        total, _ = integrate.quad(lambda x: math.exp(gmm_logpdf(mix, np.array([x]))), -np.inf, np.inf, epsabs=1e-12)
        assert abs(total - 1.0) < 1e-6

    @pytest.mark.parametrize("quasi", [False, True])
    def test_samples_match_density(self, quasi):
        mix = GaussianMixture([0.3, 0.7], [[-1.0], [2.0]], [[[0.25]], [[1.0]]])
        Z = gmm_sample(mix, np.random.default_rng(0), 100_000, quasi_random=quasi)[:, 0]
        edges = np.linspace(-4, 6, 101)
        counts, _ = np.histogram(Z, edges)
        p_hat = counts / counts.sum()
        cdf = lambda x: 0.3 * _ncdf((x + 1) / 0.5) + 0.7 * _ncdf(x - 2)  # noqa: E731
        p = np.diff([cdf(e) for e in edges])
        p /= p.sum()
        keep = p_hat > 0
        kl = float(np.sum(p_hat[keep] * np.log(p_hat[keep] / p[keep])))
        assert kl < 0.02

    def test_single_draw_shape(self):
        z = gmm_sample(GaussianMixture.standard(3), np.random.default_rng(1))
        assert z.shape == (3,)

    def test_moments(self):
        mix = GaussianMixture([0.25, 0.75], [[0.0, 1.0], [2.0, -1.0]], [np.eye(2), 2 * np.eye(2)])
        assert np.allclose(mix.mean(), [1.5, -0.5])
        # Law of total variance.
        expect = 0.25 * np.eye(2) + 0.75 * 2 * np.eye(2) + 0.25 * 0.75 * np.outer([2.0, -2.0], [2.0, -2.0])
        assert np.allclose(mix.covariance(), expect)


def _ncdf(x):
    return 0.5 * (1 + math.erf(x / math.sqrt(2)))


def reference_em_1d(x, w, mu, var, pi, iters):
    """Plain-loop weighted EM for a 1-D two-component mixture."""
    mu, var, pi = list(mu), list(var), list(pi)
    for _ in range(iters):
        r = []
        for xm in x:
            d = [pi[j] * math.exp(normal_logpdf(xm, mu[j], math.sqrt(var[j]))) for j in range(2)]
            s = sum(d)
            r.append([dj / s for dj in d])
        for j in range(2):
            nj = sum(w[m] * r[m][j] for m in range(len(x)))
            mu[j] = sum(w[m] * r[m][j] * x[m] for m in range(len(x))) / nj
            var[j] = sum(w[m] * r[m][j] * (x[m] - mu[j]) ** 2 for m in range(len(x))) / nj
            pi[j] = nj
        tot = sum(pi)
        pi = [p / tot for p in pi]
    return mu, var, pi


class TestWeightedEm:
    def test_single_component_weighted_moments(self):
        rng = np.random.default_rng(0)
        Z = rng.normal(size=(50, 2))
        w = rng.random(50)
        w /= w.sum()
        fit = weighted_em(Z, w, 1, GaussianMixture.standard(2)).mixture
        mu = w @ Z
        cov = (Z - mu).T @ ((Z - mu) * w[:, None])
        assert np.allclose(fit.means[0], mu) and np.allclose(fit.covs[0], cov)

    def test_point_mass_floors(self):
        Z = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        res = weighted_em(Z, [0.0, 1.0, 0.0], 1, GaussianMixture.standard(2), cov_floor=1e-6)
        assert res.floored and np.allclose(res.mixture.means[0], [3.0, 4.0])
        assert np.allclose(res.mixture.covs[0], 1e-6 * np.eye(2))

    def test_degenerate_support_falls_back(self):
        Z = np.random.default_rng(1).normal(size=(10, 1))
        init = GaussianMixture.standard(1)
        res = weighted_em(Z, np.eye(10)[3], 2, init)
        assert res.fell_back and res.mixture.J == 2
        assert np.all(res.mixture.covs > 1.0)

    def test_two_clusters(self):
        rng = np.random.default_rng(2)
        x = np.concatenate([rng.normal(-5, 1, 200), rng.normal(5, 1, 200)])
        w = np.full(400, 1 / 400)
        res = weighted_em(x[:, None], w, 2, GaussianMixture.standard(1), n_em_iters=30)
        mix = res.mixture
        order = np.argsort(mix.means[:, 0])
        assert np.allclose(mix.means[order, 0], [-5, 5], atol=0.2)
        assert np.allclose(mix.weights, 0.5, atol=0.05)
        # Same start (the split of N(0, 1)) through an independent loop implementation.
        mu, var, pi = reference_em_1d(list(x), list(w), [0.5, -0.5], [1.0, 1.0], [0.5, 0.5], 30)
        assert np.allclose(mix.means[:, 0], mu, atol=1e-8)
        assert np.allclose(mix.covs[:, 0, 0], var, atol=1e-8)
        assert np.allclose(mix.weights, pi, atol=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 4))
    def test_monotone_loglik(self, seed, J):
        rng = np.random.default_rng(seed)
        Z = np.concatenate([rng.normal(c, 0.7, (60, 2)) for c in (-2.0, 0.0, 3.0)])
        w = rng.random(len(Z)) ** 2
        w /= w.sum()
        res = weighted_em(Z, w, J, GaussianMixture.standard(2), n_em_iters=15)
        if not res.floored and not res.fell_back:
            assert np.all(np.diff(res.loglik_trace) >= -1e-9)

    def test_too_few_particles(self):
        with pytest.raises(ValueError):
            weighted_em(np.zeros((2, 1)), [0.5, 0.5], 3, GaussianMixture.standard(1))


def std_normal_target(Z):
    return -0.5 * np.sum(Z**2, axis=1) - 0.5 * Z.shape[1] * math.log(2 * math.pi)


class TestAdaIs:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            AdaIsConfig(M=100, M_ess=101)
        with pytest.raises(ValueError):
            AdaIsConfig(J=0)
        with pytest.raises(ValueError):
            AdaIsConfig(thin=0)

    def test_prior_target_stops_immediately(self):
        cfg = AdaIsConfig(M=500, M_ess=250, J=1)
        _, diag = adais_fit(std_normal_target, GaussianMixture.standard(2), cfg)
        assert diag.n_adaptations == 1 and diag.reached_threshold
        assert math.isclose(diag.ess_trace[0], 500, rel_tol=1e-9)

    def test_self_target_keeps_full_ess(self):
        q0 = GaussianMixture([0.4, 0.6], [[-1.0, 0.0], [1.5, 1.0]], [np.eye(2), 0.5 * np.eye(2)])
        cfg = AdaIsConfig(M=1000, M_ess=999, J=2, N_adais=1)
        _, diag = adais_fit(q0.logpdf, q0, cfg)
        assert diag.ess_trace[0] >= 1000 * (1 - 1e-6)

    def test_gaussian_target(self):
        target = lambda Z: -0.5 * ((Z[:, 0] - 3.0) / 0.5) ** 2  # noqa: E731
        q, _ = adais_fit(target, GaussianMixture.standard(1), AdaIsConfig(M=2000, M_ess=1500, J=1, N_adais=10))
        assert abs(q.mean()[0] - 3.0) < 0.1
        assert abs(math.sqrt(q.covariance()[0, 0]) - 0.5) < 0.1

    def test_bimodal_target(self):
        def target(Z):
            z = Z[:, 0]
            return np.logaddexp(normal_logpdf(z, -2, 0.3), normal_logpdf(z, 2, 0.3))

        cfg = AdaIsConfig(M=4000, M_ess=2000, J=2, N_adais=10, seed=3)
        q, _ = adais_fit(target, GaussianMixture([1.0], [[0.0]], [[[4.0]]]), cfg)
        order = np.argsort(q.means[:, 0])
        assert np.allclose(q.means[order, 0], [-2, 2], atol=0.2)
        assert np.all((q.weights >= 0.35) & (q.weights <= 0.65))

    def test_no_support(self):
        with pytest.raises(NoSupportError):
            adais_fit(lambda Z: np.full(len(Z), -np.inf), GaussianMixture.standard(1), AdaIsConfig(M=10, M_ess=5))

    def test_deterministic_by_seed(self):
        target = lambda Z: -0.5 * np.sum((Z - 1.0) ** 2, axis=1) / 0.3  # noqa: E731
        for quasi in (False, True):
            cfg = AdaIsConfig(M=300, M_ess=290, J=2, N_adais=3, use_quasi_random=quasi, seed=9)
            a, _ = adais_fit(target, GaussianMixture.standard(2), cfg)
            b, _ = adais_fit(target, GaussianMixture.standard(2), cfg)
            assert np.array_equal(a.means, b.means) and np.array_equal(a.covs, b.covs)


def family(kind, k=1, N=2, T=100, seed=1):
    fam = (pd_family if kind == "pd" else lds_family)(k=k, N=N, T=T, seed=seed)
    ds, Z, _ = generate_synthetic(fam, seed + 4)
    return fam, ds, Z


def grid_posterior(fam, rec, n=512):
    target = posterior_target(fam.model, fam.gen, fam.shared, fam.nu, rec)
    g = np.linspace(-6, 6, 4001)
    lp = target(g[:, None])
    p = np.exp(lp - logsumexp(lp))
    m = g @ p
    sd = math.sqrt(((g - m) ** 2) @ p)
    g = np.linspace(m - 8 * sd, m + 8 * sd, n)
    lp = target(g[:, None])
    return g, np.exp(lp - logsumexp(lp)), m, sd


def tv_on_grid(g, p, q):
    qq = np.exp(q.logpdf(g[:, None]))
    return 0.5 * np.abs(p - qq / qq.sum()).sum()


class TestSequentialFilter:
    def test_filter_times(self):
        assert filter_times(10, 1) == list(range(1, 11))
        assert filter_times(10, 3) == [3, 6, 9, 10]
        assert filter_times(2, 5) == [2]

    def test_flat_likelihood_stays_prior(self):
        fam, ds, _ = family("lds", T=20)
        gen = fam.gen.replace(W=np.zeros_like(fam.gen.W))
        cfg = AdaIsConfig(M=4000, M_ess=1000, J=1, thin=5)
        post = sequential_filter(ds[0], gen, None, fam.nu, fam.model, cfg)
        assert [t for t, _ in post] == [0, 5, 10, 15, 20]
        for _, q in post[1:]:
            assert np.all(np.abs(q.mean()) < 0.1)
            assert np.linalg.norm(q.covariance() - np.eye(1), 2) < 0.15

    def test_matches_grid_and_one_shot(self):
        fam, ds, _ = family("lds", T=50)
        rec = ds[0]
        g, p, m, sd = grid_posterior(fam, rec)
        cfg = AdaIsConfig(M=2000, M_ess=500, J=2, thin=10, seed=4)
        q_seq = sequential_filter(rec, fam.gen, None, fam.nu, fam.model, cfg)[-1][1]
        assert abs(q_seq.mean()[0] - m) < 2 * sd
        assert tv_on_grid(g, p, q_seq) < 0.05
        one = AdaIsConfig(M=2000 * 5, M_ess=2500, J=2, N_adais=25, seed=5)
        q_one, _ = adais_fit(posterior_target(fam.model, fam.gen, None, fam.nu, rec), GaussianMixture.standard(1), one)
        assert tv_on_grid(g, p, q_one) < 0.08

    def test_determinism(self):
        fam, ds, _ = family("pd", T=30)
        for quasi in (False, True):
            cfg = AdaIsConfig(M=300, M_ess=100, J=2, thin=10, use_quasi_random=quasi, seed=2)
            a = sequential_filter(ds[0], fam.gen, None, fam.nu, fam.model, cfg)
            b = sequential_filter(ds[0], fam.gen, None, fam.nu, fam.model, cfg)
            for (ta, qa), (tb, qb) in zip(a, b):
                assert ta == tb and np.array_equal(qa.means, qb.means) and np.array_equal(qa.weights, qb.weights)

    def test_posterior_lookup(self):
        fam, ds, _ = family("pd", T=12)
        post = sequential_filter(ds[0], fam.gen, None, fam.nu, fam.model, AdaIsConfig(M=200, M_ess=50, J=1, thin=5))
        assert post.at(7) is post[1][1] and post.at(0) is post[0][1]
        assert set(post.diagnostics) == {5, 10, 12}

    def test_failed_thinned_jump_is_refined(self):
        # Ten PD steps at once are too far from the prior for M=1000, J=4;
        # without refinement every q_t would stay at an inflated prior.
        fam = pd_family(k=2, N=32, T=100, seed=0)
        held, _, _ = generate_synthetic(pd_family(k=2, N=40, T=100, seed=0), 1)
        rec = held[0]
        post = sequential_filter(rec, fam.gen, None, fam.nu, fam.model, AdaIsConfig(thin=10, seed=0))
        assert [t for t, _ in post] == list(range(0, 101, 10))
        assert all(d.reached_threshold for d in post.diagnostics.values())
        # The final mean must lie in the 95% highest-density region of a grid posterior.
        target = posterior_target(fam.model, fam.gen, None, fam.nu, rec)
        lo, hi = np.full(2, -4.0), np.full(2, 4.0)
        for _ in range(3):
            axes = [np.linspace(lo[i], hi[i], 128) for i in range(2)]
            G = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 2)
            lp = target(G)
            p = np.exp(lp - logsumexp(lp))
            m = p @ G
            sd = np.sqrt(p @ (G - m) ** 2)
            lo, hi = m - 8 * sd, m + 8 * sd
        order = np.argsort(lp)[::-1]
        level = lp[order][np.searchsorted(np.cumsum(p[order]), 0.95)]
        assert target(post[-1][1].mean()[None])[0] >= level


class TestNaiveSmc:
    def test_constant_increment(self):
        s = WeightedSample(np.arange(4.0)[:, None], np.log([0.1, 0.2, 0.3, 0.4]))
        s2 = naive_smc_reweight(s, lambda Z: np.full(len(Z), 7.5))
        assert np.allclose(s2.normalized_weights, s.normalized_weights, rtol=1e-14)
        assert np.array_equal(s2.particles, s.particles)

    def test_sharp_likelihood(self):
        Z = np.linspace(-1, 1, 101)[:, None]
        s = naive_smc_reweight(WeightedSample(Z, np.zeros(101)), lambda Z: -1e6 * (Z[:, 0] - 0.3) ** 2)
        assert s.ess < 1.01

    def test_degeneracy_on_pd(self):
        fam, ds, _ = family("pd", T=100)
        trace = naive_smc_ess_trace(ds[0], fam.gen, None, fam.nu, fam.model, 1000, np.random.default_rng(0))
        assert trace[-1] < 100 and trace[0] <= 1000
        # Decay is monotone up to the occasional uptick; compare smoothed halves.
        assert trace[50:].mean() < trace[:50].mean()


class TestPredictive:
    def test_point_mass_is_simulation(self):
        fam, ds, _ = family("pd", k=2, T=40)
        rec = ds[0]
        mu = np.array([0.4, -0.3])
        q = GaussianMixture([1.0], [mu], [1e-30 * np.eye(2)])
        f = posterior_predictive(q, rec.prefix(30), rec.U[30:], fam.gen, None, fam.nu, fam.model, 50, np.random.default_rng(0))
        sim = fam.model.simulate(fam.gen(mu), rec.U)[30:]
        assert f.t0 == 30 and f.mean.shape == (10, 3) and f.paths.shape == (50, 10, 3)
        assert np.allclose(f.mean, sim, atol=1e-10)
        assert np.all(f.q05 <= f.q95)

    def test_constant_generator_ignores_posterior(self):
        fam, ds, _ = family("pd", k=1, T=40)
        gen = fam.gen.replace(W=np.zeros_like(fam.gen.W))
        rec = ds[0]
        means = []
        for q in (GaussianMixture.standard(1), GaussianMixture([1.0], [[3.0]], [[[0.1]]])):
            f = posterior_predictive(q, rec.prefix(20), rec.U[20:], gen, None, fam.nu, fam.model, 20, np.random.default_rng(1))
            means.append(f.mean)
        assert np.allclose(means[0], means[1], atol=1e-12)

    def test_quadrature_oracle(self):
        fam, ds, _ = family("pd", k=1, T=60)
        rec = ds[0]
        m, s = 0.4, 0.6
        q = GaussianMixture([1.0], [[m]], [[[s * s]]])
        S = 4000
        f = posterior_predictive(q, rec.prefix(40), rec.U[40:], fam.gen, None, fam.nu, fam.model, S, np.random.default_rng(0))
        # Dense grid: the simulation grows fast in the tails, where a
        # 64-point Gauss-Hermite rule is still off by a few hundredths.
        x = np.linspace(-10.0, 10.0, 20001)
        w = np.exp(-0.5 * x**2)
        w = w / w.sum()
        sims = fam.model.simulate(fam.gen((m + s * x)[:, None]), rec.U)[:, 40:]
        expect = np.einsum("g,gtj->tj", w, sims)
        second = np.einsum("g,gtj->tj", w, sims**2)
        se = np.sqrt(np.maximum(second - expect**2, 0.0) / S)
        assert np.all(np.abs(f.mean - expect) <= 3 * se + 1e-12)


def test_zero_length_filter():
    fam, ds, _ = family("pd", T=10)
    post = sequential_filter(ds[0], fam.gen, None, fam.nu, fam.model, AdaIsConfig(), T=0)
    assert len(post) == 1 and post[0][0] == 0


def test_generator_type():
    assert isinstance(family("pd")[0].gen, ParamGenerator)
