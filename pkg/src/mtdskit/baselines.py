"""Comparator models and the forecasting evaluation protocol.

Comparators: a pooled model (one parameter vector for every sequence),
pooled with exact Gaussian filtering of the emission offsets, and a
single-task model inferred per sequence under a wide Gaussian prior on its
raw parameters. Evaluation is RMSE over forecast windows following a
filtering anchor, optionally scaled by an in-sample optimal fit, with a
leave-one-out driver.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .adais import (
    AdaIsConfig,
    AdaIsDiagnostics,
    GaussianMixture,
    adais_fit,
    floor_covariance,
    normalize_log_weights,
    posterior_predictive,
    sequential_filter,
)
from .core import ConstraintSpec, ParamGenerator, SequenceDataset, SequenceRecord
from .data import fmt
from .gradients import batch_loglik_grad
from .learning import TrainConfig, TrainState, train
from .models import BaseModel, batch_loglik

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Pooled and pooled-offset models
# --------------------------------------------------------------------------


@dataclass
class PooledFit:
    state: TrainState

    @property
    def theta0(self) -> np.ndarray:
        return self.state.gen.default_theta()

    @property
    def shared(self) -> np.ndarray:
        return self.state.shared

    @property
    def nu(self) -> np.ndarray:
        return self.state.nu

    def predict(self, model: BaseModel, U) -> np.ndarray:
        return model.simulate(self.theta0, U, self.shared)


def pooled_fit(dataset: SequenceDataset, model: BaseModel, cfg: TrainConfig) -> PooledFit:
    """One parameter vector for all sequences: training with W frozen at 0."""
    state, _ = train(dataset, model, replace(cfg, freeze_W=True), k=1)
    return PooledFit(state)


@dataclass(frozen=True)
class OffsetPrior:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).ravel()
        var = np.asarray(self.var, dtype=float).ravel()
        if mean.shape != var.shape:
            raise ValueError("mean and var must have the same length")
        if np.any(var <= 0):
            raise ValueError("offset prior variances must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)


def _without_offset(model: BaseModel, theta0: np.ndarray) -> np.ndarray:
    theta = np.array(theta0, dtype=float)
    theta[model.offset_index()] = 0.0
    return theta


def offset_residuals(model: BaseModel, theta0, record: SequenceRecord, shared=None) -> np.ndarray:
    """y - yhat with the emission offsets removed; masked entries are 0."""
    Yhat = model.simulate(_without_offset(model, theta0), record.U, shared)
    return np.where(record.mask, record.Y - Yhat, 0.0)


def fit_offset_prior(
    model: BaseModel, theta0, dataset: SequenceDataset, shared=None, var_floor: float = 1e-6
) -> OffsetPrior:
    """Gaussian fitted per channel to each training sequence's best offset."""
    alphas = []
    for rec in dataset:
        r = offset_residuals(model, theta0, rec, shared)
        n = rec.mask.sum(0)
        alphas.append(np.where(n > 0, r.sum(0) / np.maximum(n, 1), np.nan))
    A = np.array(alphas)
    mean = np.nanmean(A, axis=0)
    var = np.nanvar(A, axis=0, ddof=1) if len(A) > 1 else np.ones(A.shape[1])
    return OffsetPrior(mean, np.maximum(np.nan_to_num(var, nan=1.0), var_floor))


@dataclass(frozen=True)
class OffsetPosterior:
    mean: np.ndarray
    var: np.ndarray


def offset_posterior(prior: OffsetPrior, residuals, mask, nu) -> OffsetPosterior:
    """Conjugate per-channel update of the offsets from offset-free residuals."""
    residuals = np.asarray(residuals, dtype=float).reshape(-1, prior.mean.size)
    mask = np.asarray(mask, dtype=bool).reshape(residuals.shape)
    nu = np.asarray(nu, dtype=float)
    n = mask.sum(0)
    prec = 1.0 / prior.var + n * nu
    mean = (prior.mean / prior.var + nu * np.where(mask, residuals, 0.0).sum(0)) / prec
    return OffsetPosterior(mean, 1.0 / prec)


def pooled_alpha_filter(
    model: BaseModel, theta0, prefix: SequenceRecord | None, prior: OffsetPrior, nu, shared=None, U_full=None
):
    """Posterior over the offsets given a record prefix, and the forecast.

    Returns ``(posterior, Yhat)`` where ``Yhat`` is the prediction over
    ``U_full`` (default: the prefix inputs) with the posterior-mean offsets.
    """
    if prefix is None or prefix.T == 0:
        post = OffsetPosterior(prior.mean.copy(), prior.var.copy())
    else:
        r = offset_residuals(model, theta0, prefix, shared)
        post = offset_posterior(prior, r, prefix.mask, nu)
    U = prefix.U if U_full is None else U_full
    theta = _without_offset(model, theta0)
    theta[model.offset_index()] = post.mean
    return post, model.simulate(theta, U, shared)


# --------------------------------------------------------------------------
# Single-task inference
# --------------------------------------------------------------------------


@dataclass
class SingleTaskPosterior:
    mixture: GaussianMixture  # over raw (pre-constraint) parameters
    constraints: ConstraintSpec
    diagnostics: AdaIsDiagnostics | None
    map_raw: np.ndarray | None
    may_not_have_converged: bool
    target: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)

    @property
    def theta_mean(self) -> np.ndarray:
        """Constrained image of the posterior-mean raw parameters."""
        return self.constraints.apply(self.mixture.mean())

    def predict(self, model: BaseModel, U, shared=None, rng=None, M: int = 1000) -> np.ndarray:
        """Posterior mean of the noiseless simulation over ``U``.

        Self-normalized importance sampling with the fitted mixture as
        proposal. Unconverged fits have no target and use the plug-in
        simulation at ``theta_mean`` (the MAP for the Laplace fallback).
        """
        if self.target is None:
            return model.simulate(self.theta_mean, U, shared)
        rng = np.random.default_rng(0) if rng is None else rng
        A = self.mixture.sample(rng, M)
        w = normalize_log_weights(self.target(A) - self.mixture.logpdf(A))
        Yhat, _ = model.forward(self.constraints.apply(A), U, shared)
        return np.einsum("m,mtj->tj", w, Yhat)


def _raw_objective(model, record, shared, log_nu, prior_sd):
    gen = ParamGenerator(np.eye(model.d), np.zeros(model.d), model.constraints())
    U, Y, mask = record.U[None], record.Y[None], record.mask[None]

    def f(a):
        g = batch_loglik_grad(model, shared, gen, a[None], U, Y, mask, log_nu)
        val = g.values[0] - 0.5 * float(a @ a) / prior_sd**2
        grad = g.d_z[0] - a / prior_sd**2
        if not np.isfinite(val):
            return math.inf, np.zeros_like(a)
        return -val, -grad

    return f


def _laplace_cov(obj, a: np.ndarray, prior_sd: float, h: float = 1e-4) -> np.ndarray:
    d = a.size
    H = np.empty((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        H[i] = (obj(a + e)[1] - obj(a - e)[1]) / (2 * h)
    H = 0.5 * (H + H.T)
    vals, vecs = np.linalg.eigh(H)
    vals = np.maximum(vals, 1.0 / prior_sd**2)
    return (vecs / vals) @ vecs.T


def single_task_fit(
    record: SequenceRecord | None,
    model: BaseModel,
    prior_sd: float = 100.0,
    nu=None,
    shared=None,
    cfg: AdaIsConfig | None = None,
    n_starts: int = 4,
    seed: int = 0,
) -> SingleTaskPosterior:
    """Posterior over one sequence's raw parameters under N(0, prior_sd^2 I).

    AdaIS targets the posterior directly; its initial proposal is a Laplace
    approximation at the best of ``n_starts`` L-BFGS MAP runs (a proposal
    built from a prior this wide has no usable importance weights). When
    the ESS threshold is never reached the result is flagged
    ``may_not_have_converged`` and the Laplace approximation is returned.
    """
    d = model.d
    constraints = model.constraints()
    prior = GaussianMixture(np.ones(1), np.zeros((1, d)), (prior_sd**2 * np.eye(d))[None])
    if record is None or record.T == 0:
        return SingleTaskPosterior(prior, constraints, None, None, False)
    cfg = AdaIsConfig(M=1000, M_ess=250, N_adais=5, J=1, seed=seed) if cfg is None else cfg
    rng = np.random.default_rng(seed)
    shared = model.init_shared(rng) if shared is None and model.n_shared else shared
    if nu is None:
        nu = np.ones(model.n_y)
    log_nu = np.log(np.asarray(nu, dtype=float))
    obj = _raw_objective(model, record, shared, log_nu, prior_sd)
    ds = SequenceDataset((record,), model.n_u, model.n_y)
    base = model.data_offset(model.init_offset(rng), ds, shared)
    best = None
    for i in range(n_starts):
        a0 = base if i == 0 else base + 0.5 * rng.standard_normal(d)
        res = minimize(obj, a0, jac=True, method="L-BFGS-B", options={"maxiter": 500})
        if best is None or res.fun < best.fun:
            best = res
    a_map = best.x
    cov, _ = floor_covariance(_laplace_cov(obj, a_map, prior_sd), cfg.cov_floor)
    q0 = GaussianMixture(np.ones(1), a_map[None], cov[None])

    def target(A):
        Yhat, _ = model.forward(constraints.apply(A), record.U, shared)
        ll = batch_loglik(Yhat, record.Y, record.mask, log_nu)
        return np.where(np.isfinite(ll), ll, -np.inf) - 0.5 * np.sum(A * A, axis=1) / prior_sd**2

    mix, diag = adais_fit(target, q0, cfg, rng)
    if not diag.reached_threshold:
        # Degenerate weights: keep the Laplace proposal as the best effort.
        log.warning("single-task fit for %r may not have converged (ESS %s)", record.seq_id, diag.ess_trace)
        return SingleTaskPosterior(q0, constraints, diag, a_map, True, None)
    return SingleTaskPosterior(mix, constraints, diag, a_map, False, target)


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalRow:
    fold: int
    seq_id: str
    anchor: int
    horizon: int
    channel: str  # channel index as text, or "all"
    rmse: float
    srmse: float | None = None


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    skipped: list = field(default_factory=list)  # (seq_id, anchor, horizon)

    def extend(self, other: "EvalReport") -> None:
        self.rows.extend(other.rows)
        self.skipped.extend(other.skipped)

    def aggregate(self, anchor: int, horizon: int, channel: str = "all", srmse: bool = False) -> float:
        """Mean over sequences, each sequence weighted equally."""
        vals = [
            (r.srmse if srmse else r.rmse)
            for r in self.rows
            if r.anchor == anchor and r.horizon == horizon and r.channel == channel
        ]
        vals = [v for v in vals if v is not None and np.isfinite(v)]
        return float(np.mean(vals)) if vals else math.nan

    def to_csv(self) -> str:
        has_s = any(r.srmse is not None for r in self.rows)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "seq_id", "anchor", "horizon", "channel", "rmse"] + (["srmse"] if has_s else []))
        for r in self.rows:
            row = [r.fold, r.seq_id, r.anchor, r.horizon, r.channel, fmt(r.rmse)]
            if has_s:
                row.append("" if r.srmse is None else fmt(r.srmse))
            w.writerow(row)
        return buf.getvalue()


def _rmse(F: np.ndarray, Y: np.ndarray, mask: np.ndarray) -> float:
    n = mask.sum()
    if n == 0:
        return math.nan
    return math.sqrt(float(np.sum(np.where(mask, (F - Y) ** 2, 0.0))) / n)


def windowed_rmse(
    forecasts: dict,
    record: SequenceRecord,
    anchors,
    horizons,
    fold: int = 0,
    optimal: np.ndarray | None = None,
) -> EvalReport:
    """RMSE over steps (anchor, anchor + h] for every anchor and horizon.

    ``forecasts[anchor]`` holds predictions of y at steps anchor+1, anchor+2,
    ... as rows. ``optimal`` is an in-sample fit over the whole record used
    as the SRMSE denominator. Windows running past the record are skipped.
    """
    report = EvalReport()
    n_y = record.Y.shape[1]
    for t0 in anchors:
        F_all = np.asarray(forecasts[t0], dtype=float).reshape(-1, n_y)
        for h in horizons:
            if t0 + h > record.T or F_all.shape[0] < h:
                report.skipped.append((record.seq_id, t0, h))
                continue
            F = F_all[:h]
            Y = record.Y[t0 : t0 + h]
            m = record.mask[t0 : t0 + h]
            O = None if optimal is None else np.asarray(optimal)[t0 : t0 + h]
            for ch in list(range(n_y)) + ["all"]:
                sl = slice(None) if ch == "all" else slice(ch, ch + 1)
                r = _rmse(F[:, sl], Y[:, sl], m[:, sl])
                s = None
                if O is not None:
                    den = _rmse(O[:, sl], Y[:, sl], m[:, sl])
                    s = r / den if den > 0 else math.nan
                report.rows.append(EvalRow(fold, record.seq_id, t0, h, str(ch), r, s))
    return report


# --------------------------------------------------------------------------
# Leave-one-out driver
# --------------------------------------------------------------------------

METHODS = ("mtds", "pooled", "pooled_alpha", "single_task")


@dataclass(frozen=True)
class LooConfig:
    k: int = 2
    anchors: tuple = (30, 60)
    horizons: tuple = (20, 40)
    methods: tuple = ("mtds", "pooled", "pooled_alpha")
    train: TrainConfig = field(default_factory=TrainConfig)
    adais: AdaIsConfig = field(default_factory=lambda: AdaIsConfig(thin=5))
    n_forecast_samples: int = 200
    single_task_prior_sd: float = 100.0
    srmse: bool = False
    seed: int = 0

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; expected a subset of {METHODS}")


class FoldError(RuntimeError):
    """A leave-one-out fold failed; the original error is the cause."""

    def __init__(self, fold: int, error: BaseException):
        super().__init__(f"fold {fold} failed: {type(error).__name__}: {error}")
        self.fold = fold


def run_fold(dataset: SequenceDataset, model: BaseModel, cfg: LooConfig, fold: int) -> dict:
    """Train on every record except ``fold`` and evaluate on it."""
    held = dataset[fold]
    train_ds = dataset.subset([i for i in range(len(dataset)) if i != fold])
    # Common random numbers: every fold uses the same seed, so folds differ
    # only through their data.
    seed = cfg.seed
    tcfg = replace(cfg.train, seed=seed)
    H = max(cfg.horizons)
    out = {}
    pooled = None
    if {"pooled", "pooled_alpha", "single_task"} & set(cfg.methods) or cfg.srmse:
        pooled = pooled_fit(train_ds, model, tcfg)
    optimal = None
    if cfg.srmse:
        st = single_task_fit(held, model, cfg.single_task_prior_sd, pooled.nu, pooled.shared, seed=seed)
        optimal = st.predict(model, held.U, pooled.shared, np.random.default_rng(seed))
    for method in cfg.methods:
        fc = {}
        if method == "mtds":
            state, _ = train(train_ds, model, tcfg, k=cfg.k)
            rng = np.random.default_rng(seed)
            filt = sequential_filter(held, state.gen, state.shared, state.nu, model, cfg.adais, rng, T=max(cfg.anchors))
            for t0 in cfg.anchors:
                U_future = held.U[t0 : t0 + H]
                f = posterior_predictive(
                    filt.at(t0), held.prefix(t0), U_future, state.gen, state.shared, state.nu, model,
                    cfg.n_forecast_samples, rng,
                )
                fc[t0] = f.mean
        elif method == "pooled":
            Yhat = pooled.predict(model, held.U)
            fc = {t0: Yhat[t0 : t0 + H] for t0 in cfg.anchors}
        elif method == "pooled_alpha":
            prior = fit_offset_prior(model, pooled.theta0, train_ds, pooled.shared)
            for t0 in cfg.anchors:
                _, Yhat = pooled_alpha_filter(model, pooled.theta0, held.prefix(t0), prior, pooled.nu, pooled.shared, held.U)
                fc[t0] = Yhat[t0 : t0 + H]
        elif method == "single_task":
            for t0 in cfg.anchors:
                st = single_task_fit(held.prefix(t0), model, cfg.single_task_prior_sd, pooled.nu, pooled.shared, seed=seed)
                fc[t0] = st.predict(model, held.U, pooled.shared, np.random.default_rng(seed))[t0 : t0 + H]
        out[method] = windowed_rmse(fc, held, cfg.anchors, cfg.horizons, fold, optimal)
    return out


def _worker_count(n_workers: int | None) -> int:
    env = os.environ.get("MTDS_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, n_workers if n_workers is not None else cap))


def loo_driver(
    dataset: SequenceDataset, model: BaseModel, cfg: LooConfig, n_workers: int | None = None, folds=None
) -> dict:
    """Leave-one-out evaluation; returns ``{method: EvalReport}`` merged in fold order.

    Every fold is seeded from ``cfg.seed`` alone, so results do not depend
    on execution order or worker count. A failing fold raises
    :class:`FoldError` naming it.
    """
    if len(dataset) < 2:
        raise ValueError("leave-one-out needs at least 2 sequences")
    folds = sorted(set(range(len(dataset)) if folds is None else folds))
    workers = min(_worker_count(n_workers), len(folds))
    results = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futures = [ex.submit(run_fold, dataset, model, cfg, f) for f in folds]
            for f, fut in zip(folds, futures):
                try:
                    results.append(fut.result())
                except Exception as exc:
                    raise FoldError(f, exc) from exc
    else:
        for f in folds:
            try:
                results.append(run_fold(dataset, model, cfg, f))
            except Exception as exc:
                raise FoldError(f, exc) from exc
    merged = {m: EvalReport() for m in cfg.methods}
    for fold, res in zip(folds, results):
        for m, rep in res.items():
            merged[m].extend(rep)
    return merged


__all__ = [
    "EvalReport",
    "EvalRow",
    "FoldError",
    "LooConfig",
    "OffsetPosterior",
    "OffsetPrior",
    "PooledFit",
    "SingleTaskPosterior",
    "fit_offset_prior",
    "loo_driver",
    "offset_posterior",
    "offset_residuals",
    "pooled_alpha_filter",
    "pooled_fit",
    "run_fold",
    "single_task_fit",
    "windowed_rmse",
]
