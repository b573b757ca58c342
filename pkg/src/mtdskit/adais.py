"""Sequential posterior inference over the latent code by iterated adaptive
importance sampling with Gaussian-mixture proposals.

Also contains the naive reweighting particle scheme (kept to show weight
degeneracy) and Monte Carlo posterior-predictive forecasting.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp
from scipy.stats import norm, qmc

from .core import ParamGenerator, SequenceRecord
from .models import BaseModel, batch_loglik


class CovarianceError(ValueError):
    """A mixture component covariance is not positive definite."""

    def __init__(self, component: int, min_eig: float):
        super().__init__(f"covariance of component {component} is not positive definite (min eigenvalue {min_eig:.3g})")
        self.component = component
        self.min_eig = min_eig


class NoSupportError(RuntimeError):
    """Every importance weight is zero."""


def floor_covariance(cov: np.ndarray, cov_floor: float) -> tuple[np.ndarray, bool]:
    """Clamp the eigenvalues of a symmetric matrix at ``cov_floor``."""
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() >= cov_floor:
        return cov, False
    vals = np.maximum(vals, cov_floor)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T), True


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).ravel()
        mu = np.array(self.means, dtype=float, ndmin=2)
        cov = np.array(self.covs, dtype=float)
        if cov.ndim == 2:
            cov = cov[None]
        J, k = mu.shape
        if w.shape != (J,) or cov.shape != (J, k, k):
            raise ValueError(f"inconsistent mixture shapes: weights {w.shape}, means {mu.shape}, covs {cov.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must lie on the simplex")
        w = w / w.sum()
        chol = np.empty_like(cov)
        for j in range(J):
            try:
                chol[j] = np.linalg.cholesky(cov[j])
            except np.linalg.LinAlgError:
                raise CovarianceError(j, float(np.linalg.eigvalsh(0.5 * (cov[j] + cov[j].T)).min())) from None
        for name, arr in (("weights", w), ("means", mu), ("covs", cov)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "chol", chol)

    @classmethod
    def standard(cls, k: int) -> "GaussianMixture":
        return cls(np.ones(1), np.zeros((1, k)), np.eye(k)[None])

    @property
    def J(self) -> int:
        return self.weights.size

    @property
    def k(self) -> int:
        return self.means.shape[1]

    def component_logpdf(self, Z: np.ndarray) -> np.ndarray:
        """(M, J) matrix of log N(z_m | mu_j, Sigma_j)."""
        Z = np.atleast_2d(Z)
        out = np.empty((Z.shape[0], self.J))
        k = self.k
        for j in range(self.J):
            L = self.chol[j]
            sol = solve_triangular(L, (Z - self.means[j]).T, lower=True)
            logdet = 2.0 * np.sum(np.log(np.diag(L)))
            out[:, j] = -0.5 * (np.sum(sol**2, axis=0) + logdet + k * np.log(2 * np.pi))
        return out

    def logpdf(self, Z: np.ndarray) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        single = Z.ndim == 1
        with np.errstate(divide="ignore"):
            lw = np.log(self.weights)
        out = logsumexp(self.component_logpdf(Z) + lw, axis=1)
        return out[0] if single else out

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        diff = self.means - mu
        return np.einsum("j,jab->ab", self.weights, self.covs) + np.einsum("j,ja,jb->ab", self.weights, diff, diff)

    def sample(self, rng: np.random.Generator, M: int, quasi_random: bool = False) -> np.ndarray:
        """Draw M points; component by weight, then mu + L eps."""
        k = self.k
        if quasi_random:
            sobol = qmc.Sobol(d=k + 1, scramble=True, seed=rng)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)
                P = sobol.random(M)
            tiny = 1e-12
            uc = P[:, 0]
            eps = norm.ppf(np.clip(P[:, 1:], tiny, 1 - tiny))
        else:
            uc = rng.random(M)
            eps = rng.standard_normal((M, k))
        cdf = np.cumsum(self.weights)
        comp = np.minimum(np.searchsorted(cdf, uc * cdf[-1], side="right"), self.J - 1)
        return self.means[comp] + np.einsum("mab,mb->ma", self.chol[comp], eps)


def gmm_logpdf(gmm: GaussianMixture, z) -> float | np.ndarray:
    return gmm.logpdf(z)


def gmm_sample(gmm: GaussianMixture, rng: np.random.Generator, M: int | None = None, quasi_random: bool = False):
    """One draw (vector) when M is None, otherwise an (M, k) array."""
    if M is None:
        return gmm.sample(rng, 1, quasi_random)[0]
    return gmm.sample(rng, M, quasi_random)


# --------------------------------------------------------------------------
# Weights
# --------------------------------------------------------------------------


def normalize_log_weights(log_w: np.ndarray) -> np.ndarray:
    log_w = np.where(np.isnan(log_w), -np.inf, log_w)
    top = np.max(log_w)
    if not np.isfinite(top):
        raise NoSupportError("target has no support under proposal")
    w = np.exp(log_w - top)
    return w / w.sum()


def ess(normalized_weights) -> float:
    w = np.asarray(normalized_weights, dtype=float)
    return float(1.0 / np.sum(w**2))


@dataclass(frozen=True, eq=False)
class WeightedSample:
    particles: np.ndarray
    log_weights: np.ndarray
    normalized_weights: np.ndarray = None

    def __post_init__(self):
        lw = np.asarray(self.log_weights, dtype=float)
        object.__setattr__(self, "log_weights", lw)
        object.__setattr__(self, "particles", np.atleast_2d(np.asarray(self.particles, dtype=float)))
        object.__setattr__(self, "normalized_weights", normalize_log_weights(lw))

    @property
    def ess(self) -> float:
        return ess(self.normalized_weights)


def naive_smc_reweight(prev: WeightedSample, incremental_loglik: Callable[[np.ndarray], np.ndarray]) -> WeightedSample:
    """Multiply each particle's weight by the new observation's likelihood.

    The particles never move, so the weights degenerate as data accumulate.
    """
    inc = np.asarray(incremental_loglik(prev.particles), dtype=float)
    return WeightedSample(prev.particles, prev.log_weights + inc)


# --------------------------------------------------------------------------
# Weighted EM
# --------------------------------------------------------------------------


@dataclass
class EmResult:
    mixture: GaussianMixture
    loglik_trace: list = field(default_factory=list)
    fell_back: bool = False
    floored: bool = False


def _split_to(gmm: GaussianMixture, J: int) -> GaussianMixture:
    """Grow to J components by splitting the heaviest along its principal axis."""
    w, mu, cov = list(gmm.weights), list(gmm.means), list(gmm.covs)
    while len(w) < J:
        j = int(np.argmax(w))
        vals, vecs = np.linalg.eigh(cov[j])
        step = 0.5 * np.sqrt(vals[-1]) * vecs[:, -1]
        w[j] /= 2.0
        w.append(w[j])
        mu.append(mu[j] - step)
        mu[j] = mu[j] + step
        cov.append(cov[j].copy())
    return GaussianMixture(np.array(w), np.array(mu), np.array(cov))


def _shrink_to(gmm: GaussianMixture, J: int) -> GaussianMixture:
    keep = np.sort(np.argsort(-gmm.weights, kind="stable")[:J])
    w = gmm.weights[keep]
    return GaussianMixture(w / w.sum(), gmm.means[keep], gmm.covs[keep])


def _resize(gmm: GaussianMixture, J: int) -> GaussianMixture:
    if gmm.J < J:
        return _split_to(gmm, J)
    if gmm.J > J:
        return _shrink_to(gmm, J)
    return gmm


def weighted_em(
    particles,
    normalized_weights,
    J: int,
    init: GaussianMixture,
    n_em_iters: int = 10,
    cov_floor: float = 1e-6,
) -> EmResult:
    """Fit a J-component mixture to a weighted particle set, starting at ``init``."""
    Z = np.atleast_2d(np.asarray(particles, dtype=float))
    w = np.asarray(normalized_weights, dtype=float)
    M, k = Z.shape
    if M < J:
        raise ValueError(f"need at least J={J} particles, got {M}")
    start = _resize(init, J)
    if ess(w) < J:
        return EmResult(GaussianMixture(start.weights, start.means, start.covs * 4.0), fell_back=True)
    alpha, mu, cov = start.weights.copy(), start.means.copy(), start.covs.copy()
    gmm = start
    trace = []
    floored = False
    for _ in range(n_em_iters):
        with np.errstate(divide="ignore"):
            logp = gmm.component_logpdf(Z) + np.log(gmm.weights)
        lse = logsumexp(logp, axis=1)
        trace.append(float(np.dot(w, lse)))
        resp = np.exp(logp - lse[:, None])
        wr = resp * w[:, None]
        Nj = wr.sum(0)
        for j in range(J):
            if Nj[j] <= 1e-300:
                continue
            mu[j] = wr[:, j] @ Z / Nj[j]
            diff = Z - mu[j]
            cj = (diff * wr[:, j, None]).T @ diff / Nj[j]
            cov[j], hit = floor_covariance(cj, cov_floor)
            floored |= hit
        alpha = Nj / Nj.sum()
        gmm = GaussianMixture(alpha, mu, cov)
    with np.errstate(divide="ignore"):
        final = logsumexp(gmm.component_logpdf(Z) + np.log(gmm.weights), axis=1)
    trace.append(float(np.dot(w, final)))
    return EmResult(gmm, trace, False, floored)


# --------------------------------------------------------------------------
# Adaptive importance sampling
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AdaIsConfig:
    M: int = 1000
    M_ess: float = 250
    N_adais: int = 5
    J: int = 4
    cov_floor: float = 1e-6
    thin: int = 1
    use_quasi_random: bool = False
    n_em_iters: int = 10
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.M_ess <= self.M):
            raise ValueError(f"need 1 <= M_ess <= M, got M_ess={self.M_ess}, M={self.M}")
        for name in ("N_adais", "J", "thin", "n_em_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.cov_floor <= 0:
            raise ValueError("cov_floor must be positive")


@dataclass
class AdaIsDiagnostics:
    ess_trace: list = field(default_factory=list)
    reached_threshold: bool = False
    em_fallbacks: int = 0

    @property
    def n_adaptations(self) -> int:
        return len(self.ess_trace)


def adais_fit(
    target_logpdf: Callable[[np.ndarray], np.ndarray],
    q0: GaussianMixture,
    cfg: AdaIsConfig,
    rng: np.random.Generator | None = None,
) -> tuple[GaussianMixture, AdaIsDiagnostics]:
    """Adapt a mixture proposal towards ``target_logpdf``.

    ``target_logpdf`` maps an (M, k) array to M unnormalized log densities.
    Each iteration samples from the current proposal, weights against the
    target and refits by weighted EM; it stops once the sampling-stage ESS
    exceeds ``cfg.M_ess`` or after ``cfg.N_adais`` iterations.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    q = q0
    diag = AdaIsDiagnostics()
    for _ in range(cfg.N_adais):
        Z = q.sample(rng, cfg.M, cfg.use_quasi_random)
        log_w = np.asarray(target_logpdf(Z), dtype=float) - q.logpdf(Z)
        w = normalize_log_weights(log_w)
        e = ess(w)
        diag.ess_trace.append(e)
        fit = weighted_em(Z, w, cfg.J, q, cfg.n_em_iters, cfg.cov_floor)
        diag.em_fallbacks += fit.fell_back
        q = fit.mixture
        if e > cfg.M_ess:
            diag.reached_threshold = True
            break
    return q, diag


def standard_normal_logpdf(Z: np.ndarray) -> np.ndarray:
    Z = np.atleast_2d(Z)
    return -0.5 * np.sum(Z**2, axis=1) - 0.5 * Z.shape[1] * np.log(2 * np.pi)


def particle_loglik(
    model: BaseModel,
    gen: ParamGenerator,
    shared,
    log_nu: np.ndarray,
    record: SequenceRecord,
    Z: np.ndarray,
) -> np.ndarray:
    """log p(Y | U, h(z_m)) for each row of Z."""
    theta = gen(np.atleast_2d(Z))
    Yhat, _ = model.forward(theta, record.U, shared)
    return batch_loglik(Yhat, record.Y, record.mask, log_nu)


def posterior_target(model, gen, shared, nu, record: SequenceRecord) -> Callable[[np.ndarray], np.ndarray]:
    log_nu = np.log(np.asarray(nu, dtype=float))

    def target(Z):
        return particle_loglik(model, gen, shared, log_nu, record, Z) + standard_normal_logpdf(Z)

    return target


class FilteredPosteriors(list):
    """List of ``(t, GaussianMixture)`` with per-step AdaIS diagnostics."""

    def __init__(self, items=(), diagnostics=None):
        super().__init__(items)
        self.diagnostics = {} if diagnostics is None else diagnostics

    def at(self, t: int) -> GaussianMixture:
        """Most recent posterior with time index <= t (prior for t = 0)."""
        best = None
        for s, q in self:
            if s <= t:
                best = q
        if best is None:
            raise KeyError(t)
        return best


def filter_times(T: int, thin: int) -> list[int]:
    times = list(range(thin, T + 1, thin))
    if not times or times[-1] != T:
        times.append(T)
    return times


def sequential_filter(
    record: SequenceRecord,
    gen: ParamGenerator,
    shared,
    nu,
    model: BaseModel,
    cfg: AdaIsConfig,
    rng: np.random.Generator | None = None,
    T: int | None = None,
    q0: GaussianMixture | None = None,
) -> FilteredPosteriors:
    """Filtered posteriors q_t(z) for t = thin, 2*thin, ... (and T).

    Each q_t is fitted by :func:`adais_fit` to the posterior given the first
    t observations, starting from q_{t-1}; q_0 is the standard normal prior.
    When a thinned step misses the ESS threshold the jump is retried through
    its midpoint (recursively, down to single steps), so the proposal is
    adapted through intermediate posteriors as in unthinned filtering.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    T = record.T if T is None else min(T, record.T)
    q = GaussianMixture.standard(gen.k) if q0 is None else q0
    out = FilteredPosteriors([(0, q)])
    if T <= 0:
        return out

    def fit(q_prev, t):
        target = posterior_target(model, gen, shared, nu, record.prefix(t))
        try:
            return adais_fit(target, q_prev, cfg, rng)
        except NoSupportError as exc:
            raise NoSupportError(f"t={t}: {exc}") from exc

    def advance(q_prev, t_prev, t):
        q_new, diag = fit(q_prev, t)
        if diag.reached_threshold or t - t_prev <= 1:
            return q_new, diag
        mid = (t_prev + t) // 2
        q_mid, _ = advance(q_prev, t_prev, mid)
        return advance(q_mid, mid, t)

    t_prev = 0
    for t in filter_times(T, cfg.thin):
        q, diag = advance(q, t_prev, t)
        out.append((t, q))
        out.diagnostics[t] = diag
        t_prev = t
    return out


def naive_smc_ess_trace(
    record: SequenceRecord,
    gen: ParamGenerator,
    shared,
    nu,
    model: BaseModel,
    M: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """ESS after each step of naive reweighting of M prior particles."""
    Z = rng.standard_normal((M, gen.k))
    theta = gen(Z)
    Yhat, _ = model.forward(theta, record.U, shared)
    log_nu = np.log(np.asarray(nu, dtype=float))
    nu_ = np.asarray(nu, dtype=float)
    r2 = np.where(record.mask, (record.Y - Yhat) ** 2, 0.0)
    per_step = np.sum(record.mask * (0.5 * (log_nu - np.log(2 * np.pi))) - 0.5 * nu_ * r2, axis=-1)
    sample = WeightedSample(Z, np.zeros(M))
    trace = []
    for t in range(record.T):
        sample = naive_smc_reweight(sample, lambda _Z, t=t: per_step[:, t])
        trace.append(sample.ess)
    return np.array(trace)


# --------------------------------------------------------------------------
# Posterior predictive
# --------------------------------------------------------------------------


@dataclass
class Forecast:
    t0: int
    mean: np.ndarray  # (H, n_y), over noiseless simulations
    q05: np.ndarray
    q95: np.ndarray
    paths: np.ndarray  # (S, H, n_y), with observation noise


def posterior_predictive(
    q_t: GaussianMixture,
    prefix: SequenceRecord,
    U_future,
    gen: ParamGenerator,
    shared,
    nu,
    model: BaseModel,
    S: int,
    rng: np.random.Generator,
) -> Forecast:
    """Monte Carlo forecast of y_{t+1:t+H} given q_t over z."""
    U_future = np.asarray(U_future, dtype=float).reshape(-1, model.n_u)
    H = U_future.shape[0]
    t0 = prefix.T if prefix is not None else 0
    U = U_future if t0 == 0 else np.concatenate([prefix.U, U_future], axis=0)
    Z = q_t.sample(rng, S)
    Yhat, _ = model.forward(gen(Z), U, shared)
    sims = Yhat[:, t0:]
    sd = 1.0 / np.sqrt(np.asarray(nu, dtype=float))
    paths = sims + rng.standard_normal(sims.shape) * sd
    return Forecast(
        t0=t0,
        mean=sims.mean(0),
        q05=np.quantile(paths, 0.05, axis=0),
        q95=np.quantile(paths, 0.95, axis=0),
        paths=paths,
    )
