"""Kalman filtering for the linear-Gaussian state space model, its
steady-state Riccati solution, and the equivalent deterministic-state
recursion driven by the observations.

Model: x_t = A x_{t-1} + v_t, v_t ~ N(0, R); y_t = C x_t + w_t, w_t ~ N(0, S).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

LOG_2PI = math.log(2.0 * math.pi)


class InnovationError(np.linalg.LinAlgError):
    """Innovation covariance is not positive definite."""

    def __init__(self, t: int):
        super().__init__(f"innovation covariance not positive definite at t={t}")
        self.t = t


class ConvergenceError(RuntimeError):
    def __init__(self, iterations: int, residual: float):
        super().__init__(f"Riccati iteration did not converge in {iterations} iterations (residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


@dataclass(frozen=True, eq=False)
class StochasticLds:
    A: np.ndarray
    C: np.ndarray
    R: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        S = np.atleast_2d(np.asarray(self.S, dtype=float))
        n, p = A.shape[0], C.shape[0]
        if A.shape != (n, n) or C.shape != (p, n) or R.shape != (n, n) or S.shape != (p, p):
            raise ValueError(f"inconsistent shapes A{A.shape} C{C.shape} R{R.shape} S{S.shape}")
        if np.max(np.abs(np.linalg.eigvals(A))) >= 1.0:
            raise ValueError("A must have spectral radius < 1")
        if np.min(np.linalg.eigvalsh(_sym(R))) < -1e-12:
            raise ValueError("R must be positive semi-definite")
        if np.min(np.linalg.eigvalsh(_sym(S))) <= 0.0:
            raise ValueError("S must be positive definite")
        for name, M in (("A", A), ("C", C), ("R", R), ("S", S)):
            object.__setattr__(self, name, M)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    def sample(self, T: int, rng: np.random.Generator, x0=None) -> np.ndarray:
        """Draw y_{1:T} starting from x_0 (zero by default)."""
        x = np.zeros(self.n_x) if x0 is None else np.asarray(x0, dtype=float)
        Lr = np.linalg.cholesky(self.R + 1e-300 * np.eye(self.n_x)) if np.any(self.R) else np.zeros_like(self.R)
        Ls = np.linalg.cholesky(self.S)
        Y = np.empty((T, self.n_y))
        for t in range(T):
            x = self.A @ x + Lr @ rng.standard_normal(self.n_x)
            Y[t] = self.C @ x + Ls @ rng.standard_normal(self.n_y)
        return Y


@dataclass(frozen=True)
class KalmanResult:
    m: np.ndarray  # (T, n_x) filtered means
    P: np.ndarray  # (T, n_x, n_x) filtered covariances
    logliks: np.ndarray  # (T,) one-step predictive log-densities

    @property
    def loglik(self) -> float:
        return math.fsum(self.logliks)


def _gauss_logpdf_chol(r: np.ndarray, cf) -> float:
    L = cf[0]
    sol = cho_solve(cf, r)
    logdet = 2.0 * np.sum(np.log(np.abs(np.diag(L))))
    return -0.5 * (r.size * LOG_2PI + logdet + float(r @ sol))


def kalman_filter(model: StochasticLds, Y, m0=None, P0=None) -> KalmanResult:
    """Exact predict/update recursions from the filtered prior (m0, P0) at t=0."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape[1] != model.n_y:
        raise ValueError(f"Y must have {model.n_y} columns, got {Y.shape[1]}")
    n = model.n_x
    m = np.zeros(n) if m0 is None else np.asarray(m0, dtype=float).copy()
    P = np.zeros((n, n)) if P0 is None else np.asarray(P0, dtype=float).copy()
    if np.min(np.linalg.eigvalsh(_sym(P))) < -1e-10:
        raise ValueError("P0 must be positive semi-definite")
    A, C, R, S = model.A, model.C, model.R, model.S
    T = Y.shape[0]
    ms = np.empty((T, n))
    Ps = np.empty((T, n, n))
    lls = np.empty(T)
    for t in range(T):
        m_pred = A @ m
        P_pred = _sym(A @ P @ A.T + R)
        innov = _sym(C @ P_pred @ C.T + S)
        try:
            cf = cho_factor(innov, lower=True)
        except np.linalg.LinAlgError:
            raise InnovationError(t) from None
        r = Y[t] - C @ m_pred
        lls[t] = _gauss_logpdf_chol(r, cf)
        K = cho_solve(cf, C @ P_pred).T
        m = m_pred + K @ r
        P = _sym(P_pred - K @ C @ P_pred)
        ms[t], Ps[t] = m, P
    return KalmanResult(ms, Ps, lls)


@dataclass(frozen=True)
class SteadyState:
    P_minus: np.ndarray
    K: np.ndarray
    P: np.ndarray
    iterations: int
    residual: float


def _riccati_update(model: StochasticLds, P_minus: np.ndarray):
    C, S = model.C, model.S
    innov = _sym(C @ P_minus @ C.T + S)
    cf = cho_factor(innov, lower=True)
    K = cho_solve(cf, C @ P_minus).T
    P = _sym(P_minus - K @ C @ P_minus)
    return K, P


def riccati_iterates(model: StochasticLds, n: int) -> list[np.ndarray]:
    """First ``n`` predictive covariances of the Riccati map from P0 = 0."""
    P_minus = np.zeros((model.n_x, model.n_x))
    out = [P_minus]
    for _ in range(n):
        _, P = _riccati_update(model, P_minus)
        P_minus = _sym(model.A @ P @ model.A.T + model.R)
        out.append(P_minus)
    return out


def steady_state(model: StochasticLds, tol: float = 1e-12, max_iters: int = 100_000) -> SteadyState:
    """Fixed point of P- = A (P- - K C P-) A^T + R by plain iteration from 0."""
    P_minus = np.zeros((model.n_x, model.n_x))
    residual = math.inf
    for it in range(1, max_iters + 1):
        _, P = _riccati_update(model, P_minus)
        nxt = _sym(model.A @ P @ model.A.T + model.R)
        residual = float(np.max(np.abs(nxt - P_minus)))
        P_minus = nxt
        if residual < tol:
            K, P = _riccati_update(model, P_minus)
            return SteadyState(P_minus, K, P, it, residual)
    raise ConvergenceError(max_iters, residual)


@dataclass(frozen=True)
class DeterministicFilter:
    """m_t = A_d m_{t-1} + K y_t with A_d = A - K C A; y_{t+1} | m_t ~ N(E m_t, Sigma_pred)."""

    A_d: np.ndarray
    K: np.ndarray
    E: np.ndarray
    Sigma_pred: np.ndarray

    def run(self, Y, m0=None):
        """Filtered means and per-step predictive log-densities of y_1..y_T."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        n = self.A_d.shape[0]
        m = np.zeros(n) if m0 is None else np.asarray(m0, dtype=float).copy()
        cf = cho_factor(self.Sigma_pred, lower=True)
        T = Y.shape[0]
        ms = np.empty((T, n))
        lls = np.empty(T)
        for t in range(T):
            lls[t] = _gauss_logpdf_chol(Y[t] - self.E @ m, cf)
            m = self.A_d @ m + self.K @ Y[t]
            ms[t] = m
        return ms, lls


def to_deterministic_lds(model: StochasticLds, ss: SteadyState | None = None) -> DeterministicFilter:
    ss = steady_state(model) if ss is None else ss
    A, C = model.A, model.C
    CA = C @ A
    Sigma = _sym(C @ (A @ ss.P @ A.T + model.R) @ C.T + model.S)
    return DeterministicFilter(A - ss.K @ CA, ss.K, CA, Sigma)


def random_stable_lds(rng: np.random.Generator, n_x: int, n_y: int, max_radius: float = 0.95) -> StochasticLds:
    """Seeded stable model: A rescaled to a random spectral radius below ``max_radius``."""
    A = rng.standard_normal((n_x, n_x))
    A *= rng.uniform(0.2, max_radius) / np.max(np.abs(np.linalg.eigvals(A)))
    C = rng.standard_normal((n_y, n_x))
    Gr = rng.standard_normal((n_x, n_x))
    Gs = rng.standard_normal((n_y, n_y))
    R = 0.5 * Gr @ Gr.T / n_x
    S = Gs @ Gs.T / n_y + 0.1 * np.eye(n_y)
    return StochasticLds(A, C, R, S)


def equivalence_gap(model: StochasticLds, Y, conv_tol: float = 1e-8) -> tuple[np.ndarray, int]:
    """Per-step |log-density gap| between the exact filter from P0 = 0 and the
    steady-state deterministic recursion, from the first step where the exact
    filtered covariance is within ``conv_tol`` of the fixed point.

    Returns ``(gaps, burn)``.
    """
    ss = steady_state(model)
    kf = kalman_filter(model, Y)
    dev = np.max(np.abs(kf.P - ss.P), axis=(1, 2))
    converged = np.flatnonzero(dev < conv_tol)
    if converged.size == 0:
        raise ConvergenceError(len(Y), float(dev[-1]))
    burn = int(converged[0]) + 1
    det = to_deterministic_lds(model, ss)
    # Start the deterministic recursion from the exact filter's mean at burn.
    _, lls = det.run(np.asarray(Y)[burn:], kf.m[burn - 1])
    return np.abs(lls - kf.logliks[burn:]), burn


__all__ = [
    "ConvergenceError",
    "DeterministicFilter",
    "InnovationError",
    "KalmanResult",
    "SteadyState",
    "StochasticLds",
    "equivalence_gap",
    "kalman_filter",
    "random_stable_lds",
    "riccati_iterates",
    "steady_state",
    "to_deterministic_lds",
]
