"""Deterministic-state base dynamical systems.

Every model maps a parameter vector ``theta`` (layout documented on each
spec) and an input sequence ``U`` to per-step predictive means ``Yhat``.
The forward passes are batched over a leading axis so that many parameter
vectors (particles, minibatch rows) run through one time loop; each model
also carries its reverse-mode pass used by :mod:`mtdskit.gradients`.

Initial states are zero for every model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .core import (
    IDENTITY,
    LOGISTIC,
    SOFTPLUS,
    ConstraintSpec,
    DimensionError,
    SequenceDataset,
    logit,
    softplus_inv,
)

STABILITY_MARGIN = 1.0 - 1e-6
LOG_2PI = math.log(2.0 * math.pi)


def _sigmoid_affine(v: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sigmoid(a * (v[..., None] - b)) computed in place on one buffer."""
    x = np.multiply.outer(v, -a)
    x += a * b
    with np.errstate(over="ignore"):
        np.exp(x, out=x)
    x += 1.0
    return np.reciprocal(x, out=x)


def _batch_theta(theta, d: int) -> tuple[np.ndarray, bool]:
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim == 1
    theta = np.atleast_2d(theta)
    if theta.shape[-1] != d:
        raise DimensionError("theta length d", d, theta.shape[-1])
    return theta, single


def _batch_inputs(U, n_u: int) -> np.ndarray:
    """Inputs as (1, T, n_u) (shared across the batch) or (B, T, n_u)."""
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    if U.ndim == 2:
        U = U[None]
    if U.shape[-1] != n_u:
        raise DimensionError("input dimension n_u", n_u, U.shape[-1])
    return U


class BaseModel:
    """Common surface of the base models (see concrete specs below)."""

    kind: str = ""
    n_u: int
    n_y: int

    @property
    def d(self) -> int:
        raise NotImplementedError

    @property
    def n_shared(self) -> int:
        return 0

    def constraints(self) -> ConstraintSpec:
        raise NotImplementedError

    def offset_index(self) -> np.ndarray:
        """theta indices of the additive, unconstrained emission offsets."""
        raise NotImplementedError

    def init_offset(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def init_shared(self, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(0)

    def forward(self, theta: np.ndarray, U: np.ndarray, shared=None, store: bool = False):
        raise NotImplementedError

    def backward(self, cache, dY: np.ndarray):
        raise NotImplementedError

    def simulate(self, theta, U, shared=None) -> np.ndarray:
        """Noiseless predictive means; (d,) -> (T, n_y), (B, d) -> (B, T, n_y)."""
        theta_b, single = _batch_theta(theta, self.d)
        Yhat, _ = self.forward(theta_b, U, shared, store=False)
        return Yhat[0] if single else Yhat

    def spec_dict(self) -> dict:
        raise NotImplementedError

    def data_offset(self, b: np.ndarray, dataset: SequenceDataset, shared=None) -> np.ndarray:
        """Set the emission offsets in ``b`` to the mean residual on ``dataset``."""
        b = np.array(b, dtype=float)
        idx = self.offset_index()
        b[idx] = 0.0
        theta = self.constraints().apply(b)
        num = np.zeros(self.n_y)
        den = np.zeros(self.n_y)
        for rec in dataset:
            Yhat = self.simulate(theta, rec.U, shared)
            num += np.where(rec.mask, rec.Y - Yhat, 0.0).sum(0)
            den += rec.mask.sum(0)
        b[idx] = num / np.maximum(den, 1.0)
        return b


# --------------------------------------------------------------------------
# Stable deterministic LDS
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LdsSpec(BaseModel):
    """x_t = A x_{t-1} + B u_t, yhat_t = C x_t + d.

    theta layout: [dynamics raw (n_x), B (n_x*n_u), C (n_y*n_x), d (n_y)],
    row-major matrices. The dynamics block holds (rho, omega) per 2x2
    damped rotation r*R(omega), r = (1-1e-6)*sigmoid(rho), followed by one
    raw scalar a = (1-1e-6)*tanh(raw) when n_x is odd.
    """

    n_x: int
    n_u: int
    n_y: int
    kind: str = field(default="lds", init=False)

    @property
    def d(self) -> int:
        return self.n_x + self.n_x * self.n_u + self.n_y * self.n_x + self.n_y

    def constraints(self) -> ConstraintSpec:
        return ConstraintSpec.identity(self.d)

    def offset_index(self):
        return np.arange(self.d - self.n_y, self.d)

    def spec_dict(self):
        return {"n_x": self.n_x, "n_u": self.n_u, "n_y": self.n_y}

    def split(self, theta: np.ndarray):
        n, m, p = self.n_x, self.n_u, self.n_y
        B = theta.shape[0]
        i = n
        Bm = theta[:, i : i + n * m].reshape(B, n, m)
        i += n * m
        C = theta[:, i : i + p * n].reshape(B, p, n)
        i += p * n
        return theta[:, :n], Bm, C, theta[:, i : i + p]

    def transition(self, raw: np.ndarray) -> np.ndarray:
        """Realized (B, n_x, n_x) transition matrices from raw dynamics params."""
        raw = np.atleast_2d(raw)
        B = raw.shape[0]
        n = self.n_x
        A = np.zeros((B, n, n))
        for j in range(n // 2):
            r = STABILITY_MARGIN * expit(raw[:, 2 * j])
            w = raw[:, 2 * j + 1]
            c, s = r * np.cos(w), r * np.sin(w)
            i = 2 * j
            A[:, i, i], A[:, i, i + 1] = c, -s
            A[:, i + 1, i], A[:, i + 1, i + 1] = s, c
        if n % 2:
            A[:, n - 1, n - 1] = STABILITY_MARGIN * np.tanh(raw[:, n - 1])
        return A

    def transition_vjp(self, raw: np.ndarray, dA: np.ndarray) -> np.ndarray:
        draw = np.zeros_like(raw)
        n = self.n_x
        for j in range(n // 2):
            sg = expit(raw[:, 2 * j])
            r = STABILITY_MARGIN * sg
            w = raw[:, 2 * j + 1]
            c, s = np.cos(w), np.sin(w)
            i = 2 * j
            g11, g12 = dA[:, i, i], dA[:, i, i + 1]
            g21, g22 = dA[:, i + 1, i], dA[:, i + 1, i + 1]
            # A_blk = r [[c, -s], [s, c]]
            dr = g11 * c - g12 * s + g21 * s + g22 * c
            dw = r * (-g11 * s - g12 * c + g21 * c - g22 * s)
            draw[:, 2 * j] = dr * STABILITY_MARGIN * sg * (1.0 - sg)
            draw[:, 2 * j + 1] = dw
        if n % 2:
            th = np.tanh(raw[:, n - 1])
            draw[:, n - 1] = dA[:, n - 1, n - 1] * STABILITY_MARGIN * (1.0 - th**2)
        return draw

    def raw_for_scalar(self, a: float) -> float:
        """Raw scalar dynamics parameter realizing a = (1-1e-6) tanh(raw)."""
        return float(np.arctanh(a / STABILITY_MARGIN))

    def init_offset(self, rng):
        n, m, p = self.n_x, self.n_u, self.n_y
        parts = []
        dyn = np.zeros(n)
        nb = n // 2
        for j in range(nb):
            dyn[2 * j] = logit(0.9)
            dyn[2 * j + 1] = 0.2 + 0.6 * j / max(nb - 1, 1)
        if n % 2:
            dyn[n - 1] = np.arctanh(0.5)
        parts.append(dyn)
        parts.append(rng.normal(0.0, 1.0 / math.sqrt(max(m, 1)), n * m))
        parts.append(rng.normal(0.0, 1.0 / math.sqrt(n), p * n))
        parts.append(np.zeros(p))
        return np.concatenate(parts)

    def forward(self, theta, U, shared=None, store=False):
        theta = np.atleast_2d(theta)
        U = _batch_inputs(U, self.n_u)
        raw, Bm, C, dvec = self.split(theta)
        A = self.transition(raw)
        Bsz, T = theta.shape[0], U.shape[1]
        drive = np.einsum("bij,btj->bti", Bm, U)
        X = np.zeros((Bsz, T + 1, self.n_x))
        x = X[:, 0]
        for t in range(T):
            x = np.einsum("bij,bj->bi", A, x) + drive[:, t]
            X[:, t + 1] = x
        Yhat = np.einsum("bij,btj->bti", C, X[:, 1:]) + dvec[:, None, :]
        cache = (theta, U, A, X) if store else None
        return Yhat, cache

    def backward(self, cache, dY):
        theta, U, A, X = cache
        raw, Bm, C, _ = self.split(theta)
        Bsz, T = dY.shape[0], dY.shape[1]
        gX = np.einsum("bij,bti->btj", C, dY)
        lam = np.zeros((Bsz, T, self.n_x))
        carry = np.zeros((Bsz, self.n_x))
        At = np.swapaxes(A, 1, 2)
        for t in range(T - 1, -1, -1):
            carry = gX[:, t] + np.einsum("bij,bj->bi", At, carry)
            lam[:, t] = carry
        dA = np.einsum("bti,btj->bij", lam, X[:, :-1])
        dB = np.einsum("bti,btj->bij", lam, np.broadcast_to(U, (Bsz,) + U.shape[1:]))
        dC = np.einsum("bti,btj->bij", dY, X[:, 1:])
        dd = dY.sum(1)
        dtheta = np.concatenate(
            [self.transition_vjp(raw, dA), dB.reshape(Bsz, -1), dC.reshape(Bsz, -1), dd], axis=1
        )
        return dtheta, np.zeros(0)


def lds_simulate(spec: LdsSpec, theta, U) -> np.ndarray:
    return spec.simulate(theta, U)


# --------------------------------------------------------------------------
# Pharmacodynamic model
# --------------------------------------------------------------------------


def pd_default_basis(L: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Fixed sigmoid-basis constants a_r = -0.5*2^(r/2), b_r evenly on [0, 10]."""
    r = np.arange(1, L + 1)
    return -(0.5 * 2.0 ** (r / 2.0)), np.linspace(0.0, 10.0, L)


def pd_rates_to_discrete(k_1e: float, k_e0: float) -> tuple[float, float]:
    """Exact one-step coefficients for dx/dt = k_1e c(t) - k_e0 x(t) with c
    held constant over each unit interval."""
    if not (k_1e > 0 and k_e0 > 0):
        raise ValueError(f"rate constants must be positive, got k_1e={k_1e}, k_e0={k_e0}")
    beta1 = math.exp(-k_e0)
    # (1 - e^{-k}) / k without cancellation as k -> 0
    beta2 = k_1e * (-math.expm1(-k_e0)) / k_e0
    return beta1, beta2


def pd_emission_basis(x, eta, a, b) -> np.ndarray:
    """g(x) = sum_r eta_r sigmoid(a_r (x - b_r)); monotone non-increasing."""
    eta, a, b = (np.asarray(v, dtype=float) for v in (eta, a, b))
    if np.any(a >= 0):
        raise ValueError("basis slopes a_r must be negative")
    if np.any(eta < 0):
        raise ValueError("basis coefficients eta_r must be non-negative")
    x = np.asarray(x, dtype=float)
    return np.sum(eta * expit(a * (x[..., None] - b)), axis=-1)


@dataclass(frozen=True)
class PdSpec(BaseModel):
    """x_t = beta1 * x_{t-1} + beta2 * u_t (per channel),
    yhat_tj = g_{eta_j}(x_tj + beta3_j) + alpha_j.

    theta layout: [alpha (n_y), beta1 (n_y), beta2 (n_y), beta3 (n_y),
    eta_1 (L), ..., eta_{n_y} (L)]; constraints logistic on beta1 and
    softplus on beta2 and eta. The scalar input is the central-compartment
    concentration.
    """

    n_y: int = 3
    L: int = 8
    a: tuple = None
    b: tuple = None
    n_u: int = field(default=1, init=False)
    kind: str = field(default="pd", init=False)

    def __post_init__(self):
        a0, b0 = pd_default_basis(self.L)
        a = a0 if self.a is None else np.asarray(self.a, dtype=float)
        b = b0 if self.b is None else np.asarray(self.b, dtype=float)
        if a.size != self.L or b.size != self.L:
            raise DimensionError("basis size L", self.L, (a.size, b.size))
        if np.any(a >= 0):
            raise ValueError("basis slopes a_r must be negative")
        object.__setattr__(self, "a", tuple(float(v) for v in a))
        object.__setattr__(self, "b", tuple(float(v) for v in b))

    @property
    def d(self) -> int:
        return 4 * self.n_y + self.L * self.n_y

    def constraints(self):
        p = self.n_y
        tags = [IDENTITY] * p + [LOGISTIC] * p + [SOFTPLUS] * p + [IDENTITY] * p
        tags += [SOFTPLUS] * (self.L * p)
        return ConstraintSpec(tuple(tags))

    def offset_index(self):
        return np.arange(self.n_y)

    def spec_dict(self):
        return {"n_y": self.n_y, "L": self.L, "a": list(self.a), "b": list(self.b)}

    def split(self, theta):
        p = self.n_y
        eta = theta[:, 4 * p :].reshape(theta.shape[0], p, self.L)
        return theta[:, :p], theta[:, p : 2 * p], theta[:, 2 * p : 3 * p], theta[:, 3 * p : 4 * p], eta

    def pack(self, alpha, beta1, beta2, beta3, eta) -> np.ndarray:
        """Assemble a (constrained) theta from its named pieces."""
        p = self.n_y
        parts = [np.broadcast_to(np.asarray(v, dtype=float), (p,)) for v in (alpha, beta1, beta2, beta3)]
        eta = np.broadcast_to(np.asarray(eta, dtype=float), (p, self.L))
        return np.concatenate(parts + [eta.ravel()])

    def init_offset(self, rng):
        p = self.n_y
        theta = self.pack(0.0, 0.85, 0.3, 0.0, 1.0)
        raw = self.constraints().inverse(theta)
        raw[4 * p :] += rng.normal(0.0, 0.1, self.L * p)
        return raw

    def forward(self, theta, U, shared=None, store=False):
        theta = np.atleast_2d(theta)
        U = _batch_inputs(U, 1)
        u = U[..., 0]
        alpha, beta1, beta2, beta3, eta = self.split(theta)
        Bsz, T = theta.shape[0], u.shape[1]
        X = np.empty((Bsz, T, self.n_y))
        x = np.zeros((Bsz, self.n_y))
        for t in range(T):
            x = beta1 * x + beta2 * u[:, t, None]
            X[:, t] = x
        a = np.asarray(self.a)
        b = np.asarray(self.b)
        S = _sigmoid_affine(X + beta3[:, None, :], a, b)
        Yhat = np.matmul(S[..., None, :], eta[:, None, :, :, None])[..., 0, 0] + alpha[:, None, :]
        cache = (theta, u, X, S) if store else None
        return Yhat, cache

    def backward(self, cache, dY):
        theta, u, X, S = cache
        _, beta1, _, _, eta = self.split(theta)
        Bsz, T = dY.shape[0], dY.shape[1]
        a = np.asarray(self.a)
        dalpha = dY.sum(1)
        deta = np.einsum("btj,btjr->bjr", dY, S)
        dv = dY * np.einsum("btjr,bjr->btj", S * (1.0 - S), eta * a)
        dbeta3 = dv.sum(1)
        lam = np.empty_like(dv)
        carry = np.zeros((Bsz, self.n_y))
        for t in range(T - 1, -1, -1):
            carry = dv[:, t] + beta1 * carry
            lam[:, t] = carry
        Xprev = np.concatenate([np.zeros((Bsz, 1, self.n_y)), X[:, :-1]], axis=1)
        dbeta1 = np.einsum("btj,btj->bj", lam, Xprev)
        dbeta2 = np.einsum("btj,bt->bj", lam, np.broadcast_to(u, (Bsz, T)))
        dtheta = np.concatenate([dalpha, dbeta1, dbeta2, dbeta3, deta.reshape(Bsz, -1)], axis=1)
        return dtheta, np.zeros(0)


def pd_simulate(spec: PdSpec, theta, u) -> np.ndarray:
    return spec.simulate(theta, np.asarray(u, dtype=float).reshape(-1, 1) if np.ndim(u) == 1 else u)


# --------------------------------------------------------------------------
# Recurrent cells and the two-layer multi-task RNN
# --------------------------------------------------------------------------


def _check_cell(x, u, A, B, bias):
    n = x.shape[-1]
    if A.shape != (n, n):
        raise DimensionError("transition weights", (n, n), A.shape)
    if B.shape != (n, u.shape[-1]):
        raise DimensionError("input weights", (n, u.shape[-1]), B.shape)
    if bias.shape != (n,):
        raise DimensionError("bias", (n,), bias.shape)


def rnn_cell(x, u, psi) -> np.ndarray:
    """tanh(A x + B u + b) with psi = (A, B, b)."""
    A, B, bias = (np.asarray(p, dtype=float) for p in psi)
    x, u = np.asarray(x, dtype=float), np.asarray(u, dtype=float)
    _check_cell(x, u, A, B, bias)
    return np.tanh(x @ A.T + u @ B.T + bias)


@dataclass(frozen=True)
class GruParams:
    Ar: np.ndarray
    As: np.ndarray
    Ax: np.ndarray
    Br: np.ndarray
    Bs: np.ndarray
    Bx: np.ndarray
    br: np.ndarray
    bs: np.ndarray
    bx: np.ndarray

    FIELDS = ("Ar", "As", "Ax", "Br", "Bs", "Bx", "br", "bs", "bx")


def _gru_parts(x, u, p: GruParams):
    gs = expit(x @ p.As.T + u @ p.Bs.T + p.bs)
    gr = expit(x @ p.Ar.T + u @ p.Br.T + p.br)
    xh = np.tanh((gr * x) @ p.Ax.T + u @ p.Bx.T + p.bx)
    return gs, gr, xh, (1.0 - gs) * x + gs * xh


def gru_cell(x, u, psi) -> np.ndarray:
    """GRU update x' = (1-g_s) x + g_s xhat with reset gate g_r."""
    p = psi if isinstance(psi, GruParams) else GruParams(*psi)
    x, u = np.asarray(x, dtype=float), np.asarray(u, dtype=float)
    for A, B, bias in ((p.Ar, p.Br, p.br), (p.As, p.Bs, p.bs), (p.Ax, p.Bx, p.bx)):
        _check_cell(x, u, A, B, bias)
    return _gru_parts(x, u, p)[3]


@dataclass(frozen=True)
class MtRnnSpec(BaseModel):
    """Layer 1: GRU (n1) on u_t with shared weights. Layer 2: tanh RNN (n2)
    driven by H x1_{t-1} with z-dependent weights and a shared bias b2.
    Output yhat_t = C x2_t + d.

    theta layout: [A2 (n2*n2), B2 (n2*ell), C (n_y*n2), d (n_y)].
    shared layout: [Ar, As, Ax (n1*n1 each), Br, Bs, Bx (n1*n_u each),
    br, bs, bx (n1 each), H (ell*n1), b2 (n2)].

    ``checkpoint_every`` controls how many steps apart the reverse pass
    keeps stored states; intermediate states are recomputed.
    """

    n_u: int
    n_y: int
    n1: int = 32
    ell: int = 8
    n2: int = 16
    checkpoint_every: int = 1
    kind: str = field(default="mtrnn", init=False)

    @property
    def d(self) -> int:
        return self.n2 * self.n2 + self.n2 * self.ell + self.n_y * self.n2 + self.n_y

    @property
    def n_shared(self) -> int:
        n1, m = self.n1, self.n_u
        return 3 * n1 * n1 + 3 * n1 * m + 3 * n1 + self.ell * n1 + self.n2

    def constraints(self):
        return ConstraintSpec.identity(self.d)

    def offset_index(self):
        return np.arange(self.d - self.n_y, self.d)

    def spec_dict(self):
        return {
            "n_u": self.n_u,
            "n_y": self.n_y,
            "n1": self.n1,
            "ell": self.ell,
            "n2": self.n2,
            "checkpoint_every": self.checkpoint_every,
        }

    def split(self, theta):
        n2, l, p = self.n2, self.ell, self.n_y
        Bsz = theta.shape[0]
        i = 0
        A2 = theta[:, i : i + n2 * n2].reshape(Bsz, n2, n2)
        i += n2 * n2
        B2 = theta[:, i : i + n2 * l].reshape(Bsz, n2, l)
        i += n2 * l
        C = theta[:, i : i + p * n2].reshape(Bsz, p, n2)
        i += p * n2
        return A2, B2, C, theta[:, i : i + p]

    def split_shared(self, shared):
        shared = np.asarray(shared, dtype=float)
        if shared.size != self.n_shared:
            raise DimensionError("shared parameter count", self.n_shared, shared.size)
        n1, m = self.n1, self.n_u
        shapes = [(n1, n1)] * 3 + [(n1, m)] * 3 + [(n1,)] * 3 + [(self.ell, n1), (self.n2,)]
        out, i = [], 0
        for s in shapes:
            size = int(np.prod(s))
            out.append(shared[i : i + size].reshape(s))
            i += size
        return GruParams(*out[:9]), out[9], out[10]

    def init_shared(self, rng):
        n1, m = self.n1, self.n_u
        parts = [rng.normal(0, 1 / math.sqrt(n1), n1 * n1) for _ in range(3)]
        parts += [rng.normal(0, 1 / math.sqrt(m), n1 * m) for _ in range(3)]
        parts += [np.zeros(n1)] * 3
        parts += [rng.normal(0, 1 / math.sqrt(n1), self.ell * n1), np.zeros(self.n2)]
        return np.concatenate(parts)

    def init_offset(self, rng):
        n2, l, p = self.n2, self.ell, self.n_y
        return np.concatenate(
            [
                rng.normal(0, 0.5 / math.sqrt(n2), n2 * n2),
                rng.normal(0, 1 / math.sqrt(l), n2 * l),
                rng.normal(0, 1 / math.sqrt(n2), p * n2),
                np.zeros(p),
            ]
        )

    def _run(self, gru, H, b2, A2, B2, x1, x2, U):
        """Advance both layers over U; returns per-step states and gates."""
        T = U.shape[1]
        B1, B = x1.shape[0], x2.shape[0]
        X1 = np.empty((B1, T + 1, self.n1))
        X2 = np.empty((B, T + 1, self.n2))
        G = np.empty((3, B1, T, self.n1))
        X1[:, 0], X2[:, 0] = x1, x2
        for t in range(T):
            e = x1 @ H.T
            x2 = np.tanh(np.einsum("bij,bj->bi", A2, x2) + np.einsum("bij,bj->bi", B2, np.broadcast_to(e, (B, self.ell))) + b2)
            gs, gr, xh, x1 = _gru_parts(x1, U[:, t], gru)
            G[0, :, t], G[1, :, t], G[2, :, t] = gs, gr, xh
            X1[:, t + 1], X2[:, t + 1] = x1, x2
        return X1, X2, G

    def forward(self, theta, U, shared=None, store=False):
        theta = np.atleast_2d(theta)
        U = _batch_inputs(U, self.n_u)
        if shared is None:
            shared = np.zeros(self.n_shared)
        gru, H, b2 = self.split_shared(shared)
        A2, B2, C, dvec = self.split(theta)
        Bsz, T = theta.shape[0], U.shape[1]
        # Layer 1 does not depend on theta: one pass serves the whole batch
        # when the inputs are shared.
        B1 = U.shape[0]
        x1 = np.zeros((B1, self.n1))
        x2 = np.zeros((Bsz, self.n2))
        c = max(1, int(self.checkpoint_every)) if store else T
        ckpt = []
        X2all = np.empty((Bsz, T + 1, self.n2))
        X2all[:, 0] = 0.0
        for s in range(0, T, c):
            ckpt.append((x1, x2))
            X1, X2, _ = self._run(gru, H, b2, A2, B2, x1, x2, U[:, s : s + c])
            X2all[:, s + 1 : s + 1 + X2.shape[1] - 1] = X2[:, 1:]
            x1, x2 = X1[:, -1], X2[:, -1]
        Yhat = np.einsum("bij,btj->bti", C, X2all[:, 1:]) + dvec[:, None, :]
        cache = (theta, U, shared, ckpt, c, X2all) if store else None
        return Yhat, cache

    def backward(self, cache, dY):
        theta, U, shared, ckpt, c, X2all = cache
        gru, H, b2 = self.split_shared(shared)
        A2, B2, C, _ = self.split(theta)
        Bsz, T = dY.shape[0], dY.shape[1]
        dC = np.einsum("bti,btj->bij", dY, X2all[:, 1:])
        dd = dY.sum(1)
        gX2 = np.einsum("bij,bti->btj", C, dY)
        dA2 = np.zeros_like(A2)
        dB2 = np.zeros_like(B2)
        g = {f: np.zeros_like(getattr(gru, f)) for f in GruParams.FIELDS}
        dH = np.zeros_like(H)
        db2 = np.zeros_like(b2)
        lam2 = np.zeros((Bsz, self.n2))
        lam1 = np.zeros((Bsz, self.n1))
        A2t = np.swapaxes(A2, 1, 2)
        B2t = np.swapaxes(B2, 1, 2)
        segments = list(range(0, T, c))
        for si in range(len(segments) - 1, -1, -1):
            s = segments[si]
            x1s, x2s = ckpt[si]
            Useg = U[:, s : s + c]
            X1, X2, G = self._run(gru, H, b2, A2, B2, x1s, x2s, Useg)
            X1 = np.broadcast_to(X1, (Bsz,) + X1.shape[1:])
            G = np.broadcast_to(G, (3, Bsz) + G.shape[2:])
            Ub = np.broadcast_to(Useg, (Bsz,) + Useg.shape[1:])
            for j in range(Useg.shape[1] - 1, -1, -1):
                t = s + j
                # layer 2 at step t+1 (1-based): x2_new = X2[:, j+1]
                lam2 = lam2 + gX2[:, t]
                x2n = X2[:, j + 1]
                delta = lam2 * (1.0 - x2n**2)
                x1p, x2p = X1[:, j], X2[:, j]
                e = x1p @ H.T
                dA2 += np.einsum("bi,bj->bij", delta, x2p)
                dB2 += np.einsum("bi,bj->bij", delta, e)
                db2 += delta.sum(0)
                de = np.einsum("bij,bj->bi", B2t, delta)
                dH += de.T @ x1p
                lam2 = np.einsum("bij,bj->bi", A2t, delta)
                # layer 1 GRU at step t+1: x1_new = X1[:, j+1]
                gs, gr, xh = G[0, :, j], G[1, :, j], G[2, :, j]
                u = Ub[:, j]
                dgs = lam1 * (xh - x1p)
                dxh = lam1 * gs
                dx = lam1 * (1.0 - gs)
                dps = dgs * gs * (1.0 - gs)
                dph = dxh * (1.0 - xh**2)
                drx = dph @ gru.Ax
                dpr = drx * x1p * gr * (1.0 - gr)
                dx = dx + dps @ gru.As + drx * gr + dpr @ gru.Ar + de @ H
                for dp, A_, B_, b_, inp in (
                    (dps, "As", "Bs", "bs", x1p),
                    (dph, "Ax", "Bx", "bx", gr * x1p),
                    (dpr, "Ar", "Br", "br", x1p),
                ):
                    g[A_] += dp.T @ inp
                    g[B_] += dp.T @ u
                    g[b_] += dp.sum(0)
                lam1 = dx
        dtheta = np.concatenate(
            [dA2.reshape(Bsz, -1), dB2.reshape(Bsz, -1), dC.reshape(Bsz, -1), dd], axis=1
        )
        dshared = np.concatenate([g[f].ravel() for f in GruParams.FIELDS] + [dH.ravel(), db2])
        return dtheta, dshared


def mtrnn_forward(spec: MtRnnSpec, shared, theta, U) -> np.ndarray:
    return spec.simulate(theta, U, shared)


# --------------------------------------------------------------------------
# Observation model
# --------------------------------------------------------------------------


def gaussian_loglik(Yhat, Y, mask, nu) -> float:
    """Sum over observed entries of log N(y; yhat, 1/nu_j), exactly rounded."""
    Yhat, Y = np.asarray(Yhat, dtype=float), np.asarray(Y, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    nu = np.asarray(nu, dtype=float)
    if np.any(nu <= 0):
        raise ValueError("precisions must be positive")
    nu_b = np.broadcast_to(nu, Y.shape)
    r = np.where(mask, Y - Yhat, 0.0)
    terms = 0.5 * (np.log(nu_b) - LOG_2PI) - 0.5 * nu_b * r**2
    return math.fsum(terms[mask].tolist())


def batch_loglik(Yhat: np.ndarray, Y: np.ndarray, mask: np.ndarray, log_nu: np.ndarray) -> np.ndarray:
    """Vectorized log-likelihood over a leading batch axis of ``Yhat``."""
    nu = np.exp(log_nu)
    r2 = np.where(mask, (Y - Yhat) ** 2, 0.0)
    counts = mask.sum(axis=-2)
    const = 0.5 * np.sum(counts * (log_nu - LOG_2PI), axis=-1)
    return const - 0.5 * np.einsum("...tj,j->...", r2, nu)


def make_model(kind: str, **kwargs) -> BaseModel:
    kinds = {"lds": LdsSpec, "pd": PdSpec, "mtrnn": MtRnnSpec}
    if kind not in kinds:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {sorted(kinds)}")
    return kinds[kind](**kwargs)
