"""Variational learning of the generator, shared parameters, noise
precisions and per-sequence diagonal Gaussian posteriors.

The objective is the summed ELBO with reparameterized Monte Carlo draws,
optimized by Adam with two learning-rate groups: ``lr_mt`` for the
generator (W, b) and the variational parameters, ``lr_main`` for shared
base-model parameters and log precisions.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import (
    ParamGenerator,
    SequenceDataset,
    SequenceRecord,
    VariationalPosterior,
    kl_diag_gaussian_to_standard,
)
from .gradients import batch_loglik_grad, pad_batch
from .models import BaseModel, batch_loglik

log = logging.getLogger(__name__)

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8


class TrainingError(FloatingPointError):
    """Non-finite objective or gradient during training."""

    def __init__(self, seq_id: str, iteration: int, what: str = "objective"):
        super().__init__(f"non-finite {what} for seq_id {seq_id!r} at iteration {iteration}")
        self.seq_id = seq_id
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    n_iters: int = 1000
    batch_size: int = 16
    lr_main: float = 1e-3
    lr_mt: float = 3e-2
    kl_warmup_iters: int | None = None  # default: 20% of n_iters
    n_mc_samples: int = 1
    l2_main: float = 0.0
    l2_mt: float = 0.0
    seed: int = 0
    segment_len: int | None = None
    freeze_W: bool = False
    frozen_rows: tuple = ()  # theta dims held constant wrt z (W rows fixed at 0)
    w_init_scale: float = 0.1
    mu_init_scale: float = 0.1
    s_init: float = 0.5
    log_every: int = 100
    log_wallclock: bool = False

    def __post_init__(self):
        for name in ("n_iters", "batch_size", "n_mc_samples", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.kl_warmup_iters is not None and self.kl_warmup_iters < 1:
            raise ValueError("kl_warmup_iters must be >= 1")
        for name in ("lr_main", "lr_mt", "s_init"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("l2_main", "l2_mt", "w_init_scale", "mu_init_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        object.__setattr__(self, "frozen_rows", tuple(int(i) for i in self.frozen_rows))
        if self.segment_len is not None and self.segment_len < 1:
            raise ValueError("segment_len must be >= 1")

    @property
    def warmup(self) -> int:
        if self.kl_warmup_iters is not None:
            return self.kl_warmup_iters
        return max(1, round(0.2 * self.n_iters))

    def kl_weight(self, iteration: int) -> float:
        return min(1.0, iteration / self.warmup)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, p: np.ndarray) -> "AdamMoments":
        return cls(np.zeros_like(p, dtype=float), np.zeros_like(p, dtype=float), 0)


def adam_step(params, grads, moments: AdamMoments, lr: float, l2: float = 0.0, iteration: int | None = None):
    """One Adam descent step on ``grads`` with decoupled L2 shrinkage.

    ``iteration`` is the 1-based step used for bias correction; by default
    the moments' own counter is advanced. Returns ``(params, moments)``.
    """
    p = np.asarray(params, dtype=float)
    g = np.asarray(grads, dtype=float)
    t = moments.t + 1 if iteration is None else int(iteration)
    m = ADAM_B1 * moments.m + (1.0 - ADAM_B1) * g
    v = ADAM_B2 * moments.v + (1.0 - ADAM_B2) * g * g
    mhat = m / (1.0 - ADAM_B1**t)
    vhat = v / (1.0 - ADAM_B2**t)
    new = p - lr * l2 * p - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    return new, AdamMoments(m, v, t)


# --------------------------------------------------------------------------
# State
# --------------------------------------------------------------------------


@dataclass
class TrainState:
    model: BaseModel
    gen: ParamGenerator
    shared: np.ndarray
    log_nu: np.ndarray
    posteriors: dict
    moments: dict = field(default_factory=dict)
    iter: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @property
    def nu(self) -> np.ndarray:
        return np.exp(self.log_nu)

    @property
    def k(self) -> int:
        return self.gen.k

    def snapshot(self) -> "TrainState":
        return TrainState(
            self.model,
            self.gen,
            self.shared.copy(),
            self.log_nu.copy(),
            dict(self.posteriors),
            {},
            self.iter,
            np.random.default_rng(),
        )


@dataclass
class ElboGradients:
    """Gradients of the summed ELBO of a batch of records (ascent direction)."""

    d_W: np.ndarray
    d_b: np.ndarray
    d_shared: np.ndarray
    d_lognu: np.ndarray
    d_mu: np.ndarray  # (B, k)
    d_log_s: np.ndarray  # (B, k)


def segment_dataset(dataset: SequenceDataset, segment_len: int) -> SequenceDataset:
    """Split each record into consecutive segments with ids ``id#offset``."""
    out = []
    for rec in dataset:
        for off in range(0, rec.T, segment_len):
            end = min(off + segment_len, rec.T)
            out.append(SequenceRecord(f"{rec.seq_id}#{off}", rec.U[off:end], rec.Y[off:end], rec.mask[off:end]))
    return SequenceDataset(tuple(out), dataset.n_u, dataset.n_y)


def _batch_elbo(state: TrainState, records, kl_weight: float, eps: np.ndarray):
    """Per-record ELBO values and gradients; ``eps`` has shape (B, S, k)."""
    B, S, k = eps.shape
    qs = [state.posteriors[r.seq_id] for r in records]
    mu = np.array([q.mu for q in qs])
    log_s = np.array([q.log_s for q in qs])
    s = np.exp(log_s)
    Z = (mu[:, None, :] + s[:, None, :] * eps).reshape(B * S, k)
    U, Y, mask = pad_batch(records)
    rep = np.repeat(np.arange(B), S)
    g = batch_loglik_grad(
        state.model,
        state.shared,
        state.gen,
        Z,
        U[rep],
        Y[rep],
        mask[rep],
        state.log_nu,
        row_weights=np.full(B * S, 1.0 / S),
    )
    ll = g.values.reshape(B, S).mean(axis=1)
    kl = np.array([kl_diag_gaussian_to_standard(q) for q in qs])
    values = ll - kl_weight * kl
    dz = g.d_z.reshape(B, S, k)
    d_mu = dz.sum(axis=1) - kl_weight * mu
    d_log_s = np.sum(dz * eps, axis=1) * s - kl_weight * (s * s - 1.0)
    grads = ElboGradients(g.d_W, g.d_b, g.d_shared, g.d_lognu, d_mu, d_log_s)
    return values, g.values.reshape(B, S), grads


def elbo_estimate(
    state: TrainState,
    record: SequenceRecord,
    kl_weight: float,
    n_samples: int = 1,
    rng: np.random.Generator | None = None,
    eps: np.ndarray | None = None,
):
    """Monte Carlo ELBO of one record and its gradients.

    value = mean_s log p(Y | U, h(mu + s*eps_s)) - kl_weight * KL(q || N(0, I)).
    Pass ``eps`` with shape (n_samples, k) to fix the draws.
    """
    if not 0.0 <= kl_weight <= 1.0:
        raise ValueError("kl_weight must lie in [0, 1]")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if record.seq_id not in state.posteriors:
        raise KeyError(f"no variational posterior for seq_id {record.seq_id!r}")
    k = state.k
    if eps is None:
        rng = np.random.default_rng() if rng is None else rng
        eps = rng.standard_normal((n_samples, k))
    eps = np.asarray(eps, dtype=float).reshape(1, -1, k)
    values, _, grads = _batch_elbo(state, [record], kl_weight, eps)
    return float(values[0]), grads


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def _initial_log_nu(model, theta, dataset, shared) -> np.ndarray:
    num = np.zeros(model.n_y)
    den = np.zeros(model.n_y)
    for rec in dataset:
        r = np.where(rec.mask, rec.Y - model.simulate(theta, rec.U, shared), 0.0)
        num += np.sum(r * r, axis=0)
        den += rec.mask.sum(axis=0)
    var = num / np.maximum(den, 1.0)
    return -np.log(np.maximum(var, 1e-6))


def init_state(dataset: SequenceDataset, model: BaseModel, k: int, cfg: TrainConfig) -> TrainState:
    """Random generator loadings, data-matched offsets and noise precisions."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    shared = model.init_shared(rng)
    b = model.init_offset(rng)
    b = model.data_offset(b, dataset, shared)
    constraints = model.constraints()
    W = np.zeros((model.d, k)) if cfg.freeze_W else cfg.w_init_scale * rng.standard_normal((model.d, k))
    W[list(cfg.frozen_rows)] = 0.0
    gen = ParamGenerator(W, b, constraints)
    log_nu = _initial_log_nu(model, constraints.apply(b), dataset, shared)
    posteriors = {
        sid: VariationalPosterior(cfg.mu_init_scale * rng.standard_normal(k), np.full(k, math.log(cfg.s_init)))
        for sid in dataset.seq_ids
    }
    return TrainState(model, gen, shared, log_nu, posteriors, {}, 0, rng)


def _batches(rng: np.random.Generator, N: int, B: int):
    """Endless stream of sorted index batches, reshuffled every epoch."""
    while True:
        perm = rng.permutation(N)
        for i in range(0, N, B):
            yield np.sort(perm[i : i + B])


def _update(state: TrainState, key: str, params, grads, lr, l2):
    mom = state.moments.get(key)
    if mom is None:
        mom = AdamMoments.zeros_like(np.asarray(params, dtype=float))
    new, mom = adam_step(params, -np.asarray(grads), mom, lr, l2)
    state.moments[key] = mom
    return new


def train_step(state: TrainState, records, cfg: TrainConfig) -> float:
    """One minibatch update; returns the mean minibatch ELBO before the step."""
    kl_weight = cfg.kl_weight(state.iter)
    eps = state.rng.standard_normal((len(records), cfg.n_mc_samples, state.k))
    values, ll, grads = _batch_elbo(state, records, kl_weight, eps)
    for i, rec in enumerate(records):
        if not np.all(np.isfinite(ll[i])) or not np.isfinite(values[i]):
            raise TrainingError(rec.seq_id, state.iter)
        if not (np.all(np.isfinite(grads.d_mu[i])) and np.all(np.isfinite(grads.d_log_s[i]))):
            raise TrainingError(rec.seq_id, state.iter, "gradient")
    for name in ("d_W", "d_b", "d_shared", "d_lognu"):
        if not np.all(np.isfinite(getattr(grads, name))):
            raise TrainingError(records[0].seq_id, state.iter, f"gradient {name}")
    B = len(records)
    gen = state.gen
    if cfg.freeze_W:
        W = gen.W
    else:
        dW = grads.d_W / B
        dW[list(cfg.frozen_rows)] = 0.0
        W = _update(state, "W", gen.W, dW, cfg.lr_mt, cfg.l2_mt)
        W[list(cfg.frozen_rows)] = 0.0
    b = _update(state, "b", gen.b, grads.d_b / B, cfg.lr_mt, 0.0)
    state.gen = gen.replace(W=W, b=b)
    if state.shared.size:
        state.shared = _update(state, "shared", state.shared, grads.d_shared / B, cfg.lr_main, cfg.l2_main)
    state.log_nu = _update(state, "log_nu", state.log_nu, grads.d_lognu / B, cfg.lr_main, 0.0)
    for i, rec in enumerate(records):
        q = state.posteriors[rec.seq_id]
        lam = np.concatenate([q.mu, q.log_s])
        g = np.concatenate([grads.d_mu[i], grads.d_log_s[i]])
        lam = _update(state, "q:" + rec.seq_id, lam, g, cfg.lr_mt, 0.0)
        state.posteriors[rec.seq_id] = VariationalPosterior(lam[: state.k], lam[state.k :])
    state.iter += 1
    return float(np.mean(values))


def _log_variance_stats(state: TrainState) -> None:
    var = np.array([q.variance for q in state.posteriors.values()])
    mu = np.array([q.mu for q in state.posteriors.values()])
    log.info(
        "iter %d: posterior variance mean %s, spread of means %s",
        state.iter,
        np.array2string(var.mean(0), precision=3),
        np.array2string(mu.std(0), precision=3),
    )


def train(
    dataset: SequenceDataset,
    model: BaseModel,
    cfg: TrainConfig,
    k: int = 2,
    init: TrainState | None = None,
    log_path=None,
) -> tuple[TrainState, list[tuple[int, float, float, int]]]:
    """Stochastic ELBO maximization; returns ``(state, log_rows)``.

    Each log row is ``(iter, minibatch ELBO, kl_weight, wallclock_ms)``;
    ``wallclock_ms`` is 0 unless ``cfg.log_wallclock`` so that logs are
    reproducible byte for byte.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if cfg.segment_len is not None:
        dataset = segment_dataset(dataset, cfg.segment_len)
    state = init if init is not None else init_state(dataset, model, k, cfg)
    missing = set(dataset.seq_ids) ^ set(state.posteriors)
    if missing:
        raise ValueError(f"posteriors do not match dataset seq_ids: {sorted(missing)[:5]}")
    batches = _batches(state.rng, len(dataset), min(cfg.batch_size, len(dataset)))
    rows = []
    t0 = time.perf_counter()
    for _ in range(cfg.n_iters):
        it = state.iter
        kl_weight = cfg.kl_weight(it)
        idx = next(batches)
        elbo = train_step(state, [dataset[i] for i in idx], cfg)
        ms = int((time.perf_counter() - t0) * 1000) if cfg.log_wallclock else 0
        rows.append((it, elbo, kl_weight, ms))
        if (it + 1) % cfg.log_every == 0:
            _log_variance_stats(state)
    if log_path is not None:
        write_training_log(rows, log_path)
    return state, rows


def write_training_log(rows, path) -> None:
    lines = ["iter,elbo,kl_weight,wallclock_ms"]
    lines += [f"{i},{e!r},{w!r},{ms}" for i, e, w, ms in rows]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def dataset_elbo(state: TrainState, dataset: SequenceDataset, n_samples: int, seed: int = 0) -> np.ndarray:
    """Per-record ELBO (kl_weight = 1) with common random numbers per seed."""
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((len(dataset), n_samples, state.k))
    vals, _, _ = _batch_elbo(state, list(dataset), 1.0, eps)
    return vals


# --------------------------------------------------------------------------
# Importance-sampled log marginal likelihood
# --------------------------------------------------------------------------


def log_marginal_is_estimate(
    model: BaseModel,
    record: SequenceRecord,
    gen: ParamGenerator,
    shared,
    nu,
    S: int,
    rng: np.random.Generator,
    chunk: int = 4000,
    return_stderr: bool = False,
):
    """log (1/S) sum_s p(Y | U, h(z_s)) with z_s drawn from the prior.

    With ``return_stderr`` also returns the delta-method standard error of
    the log-mean-exp estimate.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    log_nu = np.log(np.asarray(nu, dtype=float))
    lls = []
    for start in range(0, S, chunk):
        n = min(chunk, S - start)
        Z = rng.standard_normal((n, gen.k))
        Yhat, _ = model.forward(gen(Z), record.U, shared)
        lls.append(batch_loglik(Yhat, record.Y, record.mask, log_nu))
    ll = np.concatenate(lls)
    value = float(logsumexp(ll) - math.log(S))
    if not return_stderr:
        return value
    if S < 2:
        return value, math.inf
    w = np.exp(ll - ll.max())
    se = float(np.std(w, ddof=1) / math.sqrt(S) / w.mean())
    return value, se


__all__ = [
    "AdamMoments",
    "ElboGradients",
    "TrainConfig",
    "TrainState",
    "TrainingError",
    "adam_step",
    "dataset_elbo",
    "elbo_estimate",
    "init_state",
    "log_marginal_is_estimate",
    "segment_dataset",
    "train",
    "train_step",
    "write_training_log",
]
