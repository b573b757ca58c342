import math

import numpy as np
import pytest

from mtdskit.core import (
    ConstraintSpec,
    ParamGenerator,
    SequenceDataset,
    SequenceRecord,
    VariationalPosterior,
)
from mtdskit.data import generate_synthetic, lds_family, make_inputs, pd_family
from mtdskit.learning import (
    AdamMoments,
    TrainConfig,
    TrainingError,
    TrainState,
    adam_step,
    dataset_elbo,
    elbo_estimate,
    init_state,
    log_marginal_is_estimate,
    segment_dataset,
    train,
    train_step,
    write_training_log,
)
from mtdskit.models import LdsSpec, MtRnnSpec, PdSpec, gaussian_loglik

# Scalar LDS whose dynamics, input gain, emission gain and offset all load
# on one latent. Reference values are 30-digit mpmath quadratures of an
# independent reimplementation of the recursion.
TINY_U = np.array([1.0, 0.5, -0.3, 0.8, 0.0])[:, None]
TINY_Y = np.array([0.9, 1.1, 0.2, 0.7, 0.4])[:, None]
TINY_W = np.array([[0.6], [0.3], [-0.2], [0.25]])
TINY_B = np.array([0.4, 1.0, 0.8, 0.1])
TINY_NU = 2.0
TINY_MU, TINY_SD = 0.3, 0.7
EXPECTED_LOGLIK_UNDER_Q = -3.7719865474654154  # E_q log p(Y|z), q = N(0.3, 0.7^2)
VAR_LOGLIK_UNDER_Q = 0.92564043488569982
LOG_MARGINAL = -3.6978621213146500  # log E_{N(0,1)} p(Y|z)


def tiny_state(mu=TINY_MU, sd=TINY_SD, W=TINY_W):
    model = LdsSpec(1, 1, 1)
    rec = SequenceRecord("tiny", TINY_U, TINY_Y)
    gen = ParamGenerator(W, TINY_B, ConstraintSpec.identity(4))
    post = {"tiny": VariationalPosterior([mu], [math.log(sd)])}
    state = TrainState(model, gen, np.zeros(0), np.array([math.log(TINY_NU)]), post)
    return state, rec


def tiny_loglik(z):
    state, rec = tiny_state()
    return gaussian_loglik(state.model.simulate(state.gen(np.atleast_1d(z)), rec.U), rec.Y, rec.mask, [TINY_NU])


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.n_mc_samples == 1
        assert cfg.warmup == 200
        assert math.isclose(cfg.lr_mt / cfg.lr_main, 30.0)

    @pytest.mark.parametrize(
        "kw", [{"n_iters": 0}, {"batch_size": 0}, {"lr_main": 0.0}, {"lr_mt": -1.0}, {"l2_main": -0.1}, {"kl_warmup_iters": 0}]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_kl_weight_schedule(self):
        cfg = TrainConfig(n_iters=10, kl_warmup_iters=4)
        assert [cfg.kl_weight(i) for i in range(6)] == [0.0, 0.25, 0.5, 0.75, 1.0, 1.0]


class TestElbo:
    def test_zero_eps_no_kl_is_loglik_at_mean(self):
        state, rec = tiny_state()
        v, _ = elbo_estimate(state, rec, 0.0, eps=np.zeros((1, 1)))
        assert math.isclose(v, tiny_loglik(TINY_MU), rel_tol=1e-13)

    def test_prior_with_constant_generator(self):
        state, rec = tiny_state(mu=0.0, sd=1.0, W=np.zeros((4, 1)))
        ref = gaussian_loglik(state.model.simulate(TINY_B, rec.U), rec.Y, rec.mask, [TINY_NU])
        rng = np.random.default_rng(0)
        vals = [elbo_estimate(state, rec, 1.0, n_samples=3, rng=rng)[0] for _ in range(5)]
        assert np.allclose(vals, ref, rtol=1e-13)

    def test_quadrature_oracle(self):
        state, rec = tiny_state()
        n = 10_000
        v, _ = elbo_estimate(state, rec, 0.4, n_samples=n, rng=np.random.default_rng(1))
        kl = 0.5 * (TINY_MU**2 + TINY_SD**2 - 1.0) - math.log(TINY_SD)
        expect = EXPECTED_LOGLIK_UNDER_Q - 0.4 * kl
        assert abs(v - expect) < 3.0 * math.sqrt(VAR_LOGLIK_UNDER_Q / n)

    def test_validation(self):
        state, rec = tiny_state()
        with pytest.raises(ValueError):
            elbo_estimate(state, rec, 1.5)
        with pytest.raises(ValueError):
            elbo_estimate(state, rec, 0.5, n_samples=0)
        with pytest.raises(KeyError):
            elbo_estimate(state, SequenceRecord("other", TINY_U, TINY_Y), 0.5)


class TestLogMarginal:
    def test_constant_generator(self):
        state, rec = tiny_state(W=np.zeros((4, 1)))
        ref = gaussian_loglik(state.model.simulate(TINY_B, rec.U), rec.Y, rec.mask, [TINY_NU])
        for S in (1, 7, 100):
            v = log_marginal_is_estimate(state.model, rec, state.gen, None, [TINY_NU], S, np.random.default_rng(S))
            assert math.isclose(v, ref, rel_tol=1e-12)

    def test_single_sample_is_prior_elbo_sample(self):
        state, rec = tiny_state(mu=0.0, sd=1.0)
        a = log_marginal_is_estimate(state.model, rec, state.gen, None, [TINY_NU], 1, np.random.default_rng(5))
        b, _ = elbo_estimate(state, rec, 1.0, n_samples=1, rng=np.random.default_rng(5))
        assert math.isclose(a, b, rel_tol=1e-13)

    def test_quadrature_oracle(self):
        state, rec = tiny_state()
        v, se = log_marginal_is_estimate(
            state.model, rec, state.gen, None, [TINY_NU], 100_000, np.random.default_rng(2), return_stderr=True
        )
        assert abs(v - LOG_MARGINAL) < 0.01
        assert 0 < se < 0.01

    def test_invalid_sample_count(self):
        state, rec = tiny_state()
        with pytest.raises(ValueError):
            log_marginal_is_estimate(state.model, rec, state.gen, None, [TINY_NU], 0, np.random.default_rng())


class TestAdam:
    def test_zero_gradient_only_shrinks(self):
        p = np.array([1.0, -2.0, 0.5])
        new, mom = adam_step(p, np.zeros(3), AdamMoments.zeros_like(p), lr=0.1, l2=0.01)
        assert np.allclose(new, p * (1 - 0.1 * 0.01), rtol=1e-15)
        assert mom.t == 1
        new, _ = adam_step(p, np.zeros(3), AdamMoments.zeros_like(p), lr=0.1)
        assert np.array_equal(new, p)

    def test_single_step_closed_form(self):
        g = np.array([3.0, -1e-3, 250.0])
        p = np.zeros(3)
        new, _ = adam_step(p, g, AdamMoments.zeros_like(p), lr=0.01)
        assert np.allclose(new, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)

    def test_constant_gradient_step_size(self):
        p = np.zeros(2)
        mom = AdamMoments.zeros_like(p)
        g = np.array([0.7, -40.0])
        for _ in range(500):
            prev = p
            p, mom = adam_step(p, g, mom, lr=1e-3)
        assert np.allclose(np.abs(p - prev), 1e-3, rtol=1e-6)

    def test_explicit_iteration(self):
        p = np.ones(1)
        a, _ = adam_step(p, np.ones(1), AdamMoments.zeros_like(p), lr=0.1, iteration=1)
        b, _ = adam_step(p, np.ones(1), AdamMoments.zeros_like(p), lr=0.1, iteration=1000)
        assert math.isclose(a[0], 1.0 - 0.1 / (1.0 + 1e-8), rel_tol=1e-15)
        mhat = 0.1 / (1 - 0.9**1000)
        vhat = 0.001 / (1 - 0.999**1000)
        assert math.isclose(b[0], 1.0 - 0.1 * mhat / (math.sqrt(vhat) + 1e-8), rel_tol=1e-12)


def small_pd(N=8, T=40, seed=0):
    fam = pd_family(k=2, N=N, T=T, seed=seed)
    ds, Z, _ = generate_synthetic(fam, seed)
    return fam, ds, Z


class TestTrain:
    def test_two_rate_magnitudes(self):
        rng = np.random.default_rng(3)
        model = MtRnnSpec(n_u=1, n_y=2, n1=4, ell=2, n2=3)
        recs = [SequenceRecord(f"r{i}", rng.normal(size=(20, 1)), rng.normal(size=(20, 2))) for i in range(4)]
        ds = SequenceDataset.from_records(recs)
        cfg = TrainConfig(n_iters=1, batch_size=4, lr_main=1e-4, lr_mt=3e-2, seed=0)
        state = init_state(ds, model, 2, cfg)
        before = (state.gen.W.copy(), state.gen.b.copy(), state.shared.copy(), state.log_nu.copy(),
                  {k: np.concatenate([q.mu, q.log_s]) for k, q in state.posteriors.items()})
        train_step(state, list(ds), cfg)
        # First Adam step moves every coordinate with non-zero gradient by lr.
        def moved(a, b):
            d = np.abs(a - b).ravel()
            return d[d > 0]
        for lr, a, b in ((3e-2, state.gen.W, before[0]), (3e-2, state.gen.b, before[1]),
                         (1e-4, state.shared, before[2]), (1e-4, state.log_nu, before[3])):
            d = moved(a, b)
            assert d.size > 0 and np.allclose(d, lr, rtol=1e-4)
        for sid, q in state.posteriors.items():
            d = moved(np.concatenate([q.mu, q.log_s]), before[4][sid])
            assert np.allclose(d, 3e-2, rtol=1e-4)

    def test_log_rows_and_kl_weight(self, tmp_path):
        _, ds, _ = small_pd()
        cfg = TrainConfig(n_iters=30, batch_size=4, kl_warmup_iters=12, seed=1)
        _, rows = train(ds, PdSpec(n_y=3), cfg, k=2, log_path=tmp_path / "log.csv")
        assert [r[0] for r in rows] == list(range(30))
        assert all(r[2] == min(1.0, r[0] / 12) for r in rows)
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "iter,elbo,kl_weight,wallclock_ms" and len(lines) == 31
        it, elbo, w, ms = lines[5].split(",")
        assert int(it) == 4 and float(elbo) == rows[4][1] and float(w) == rows[4][2] and ms == "0"

    def test_determinism(self, tmp_path):
        _, ds, _ = small_pd()
        cfg = TrainConfig(n_iters=40, batch_size=3, seed=7)
        runs = []
        for i in range(2):
            st, _ = train(ds, PdSpec(n_y=3), cfg, k=2, log_path=tmp_path / f"l{i}.csv")
            runs.append(st)
        a, b = runs
        assert (tmp_path / "l0.csv").read_bytes() == (tmp_path / "l1.csv").read_bytes()
        assert np.array_equal(a.gen.W, b.gen.W) and np.array_equal(a.gen.b, b.gen.b)
        assert np.array_equal(a.log_nu, b.log_nu)
        for sid in ds.seq_ids:
            assert np.array_equal(a.posteriors[sid].mu, b.posteriors[sid].mu)
            assert np.array_equal(a.posteriors[sid].log_s, b.posteriors[sid].log_s)

    def test_posteriors_keyed_by_seq_id(self):
        _, ds, _ = small_pd()
        st, _ = train(ds, PdSpec(n_y=3), TrainConfig(n_iters=2, seed=0), k=2)
        assert set(st.posteriors) == set(ds.seq_ids)

    def test_single_sequence_frozen_loadings(self):
        _, ds, _ = small_pd(N=1, T=60)
        cfg = TrainConfig(n_iters=300, batch_size=1, lr_main=1e-2, freeze_W=True, seed=2)
        init = init_state(ds, PdSpec(n_y=3), 2, cfg)
        start = dataset_elbo(init.snapshot(), ds, 64, seed=11)[0]
        st, _ = train(ds, PdSpec(n_y=3), cfg, k=2, init=init)
        assert np.array_equal(st.gen.W, np.zeros_like(st.gen.W))
        assert dataset_elbo(st, ds, 64, seed=11)[0] >= start

    def test_frozen_rows_stay_zero(self):
        _, ds, _ = small_pd()
        cfg = TrainConfig(n_iters=20, batch_size=4, frozen_rows=(0, 5, 13), seed=0)
        st, _ = train(ds, PdSpec(n_y=3), cfg, k=2)
        assert np.all(st.gen.W[[0, 5, 13]] == 0.0)
        assert np.any(st.gen.W[1] != 0.0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_names_sequence(self):
        model = PdSpec(n_y=1)
        recs = [SequenceRecord(f"r{i}", np.ones((10, 1)), np.zeros((10, 1))) for i in range(3)]
        ds = SequenceDataset.from_records(recs)
        cfg = TrainConfig(n_iters=5, batch_size=3, seed=0)
        state = init_state(ds, model, 1, cfg)
        state.posteriors["r1"] = VariationalPosterior([np.inf], [0.0])
        with pytest.raises(TrainingError) as exc:
            train(ds, model, cfg, k=1, init=state)
        assert exc.value.seq_id == "r1" and exc.value.iteration == 0

    def test_segmenting(self):
        _, ds, _ = small_pd(N=2, T=25)
        seg = segment_dataset(ds, 10)
        assert seg.seq_ids == [f"{s}#{o}" for s in ds.seq_ids for o in (0, 10, 20)]
        assert seg[2].T == 5
        st, _ = train(ds, PdSpec(n_y=3), TrainConfig(n_iters=3, segment_len=10, seed=0), k=2)
        assert set(st.posteriors) == set(seg.seq_ids)

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train(SequenceDataset((), 1, 1), PdSpec(n_y=1), TrainConfig())

    def test_two_cluster_elbo_trend(self):
        fam = lds_family(k=2, N=16, T=100, seed=3)
        rng = np.random.default_rng(0)
        recs = []
        for i in range(16):
            z = np.array([2.0 if i % 2 else -2.0, 0.0]) + 0.1 * rng.standard_normal(2)
            U = make_inputs(fam, i, rng)
            Y = fam.model.simulate(fam.gen(z), U) + 0.3 * rng.standard_normal((100, 2))
            recs.append(SequenceRecord(f"s{i:02d}", U, Y))
        ds = SequenceDataset.from_records(recs)
        _, rows = train(ds, fam.model, TrainConfig(n_iters=2000, batch_size=16, seed=0), k=2)
        e = np.array([r[1] for r in rows])
        smooth = np.convolve(e, np.ones(100) / 100, mode="valid")
        assert np.all(np.diff(smooth[1000:]) >= 0)

    def test_write_training_log_repr(self, tmp_path):
        write_training_log([(0, 0.1 + 0.2, 0.0, 0)], tmp_path / "x.csv")
        assert (tmp_path / "x.csv").read_text() == "iter,elbo,kl_weight,wallclock_ms\n0,0.30000000000000004,0.0,0\n"
