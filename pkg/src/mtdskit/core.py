"""Shared domain types: sequence data, latent codes, the constrained affine
parameter generator and the diagonal Gaussian variational posterior."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

IDENTITY = "identity"
LOGISTIC = "logistic"
SOFTPLUS = "softplus"
CONSTRAINT_TAGS = (IDENTITY, LOGISTIC, SOFTPLUS)


class DimensionError(ValueError):
    """Raised when an array does not have the expected shape."""

    def __init__(self, what: str, expected, actual):
        super().__init__(f"{what}: expected {expected}, got {actual}")
        self.what = what
        self.expected = expected
        self.actual = actual


# --------------------------------------------------------------------------
# Sequence data
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SequenceRecord:
    seq_id: str
    U: np.ndarray
    Y: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        U = np.atleast_2d(np.asarray(self.U, dtype=float))
        Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        if U.shape[0] != Y.shape[0]:
            raise DimensionError(f"record {self.seq_id!r} length", U.shape[0], Y.shape[0])
        if U.shape[0] < 1:
            raise ValueError(f"record {self.seq_id!r} is empty")
        if self.mask is None:
            mask = np.isfinite(Y)
        else:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != Y.shape:
                raise DimensionError(f"record {self.seq_id!r} mask", Y.shape, mask.shape)
        # Masked entries are never read; store zeros so arithmetic stays finite.
        Y = np.where(mask, Y, 0.0)
        if not np.all(np.isfinite(U)):
            raise ValueError(f"record {self.seq_id!r} has non-finite inputs")
        if not np.all(np.isfinite(Y)):
            raise ValueError(f"record {self.seq_id!r} has non-finite observations")
        for name, arr in (("U", U), ("Y", Y), ("mask", mask)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return self.Y.shape[0]

    def prefix(self, t: int) -> "SequenceRecord":
        """First ``t`` steps of the record."""
        return SequenceRecord(self.seq_id, self.U[:t], self.Y[:t], self.mask[:t])


@dataclass(frozen=True, eq=False)
class SequenceDataset:
    sequences: tuple
    n_u: int
    n_y: int

    def __post_init__(self):
        seqs = tuple(self.sequences)
        object.__setattr__(self, "sequences", seqs)
        seen = set()
        for rec in seqs:
            if rec.U.shape[1] != self.n_u:
                raise DimensionError(f"record {rec.seq_id!r} n_u", self.n_u, rec.U.shape[1])
            if rec.Y.shape[1] != self.n_y:
                raise DimensionError(f"record {rec.seq_id!r} n_y", self.n_y, rec.Y.shape[1])
            if rec.seq_id in seen:
                raise ValueError(f"duplicate seq_id {rec.seq_id!r}")
            seen.add(rec.seq_id)

    @classmethod
    def from_records(cls, records: Sequence[SequenceRecord]) -> "SequenceDataset":
        records = list(records)
        if not records:
            raise ValueError("cannot infer dimensions from an empty record list")
        return cls(tuple(records), records[0].U.shape[1], records[0].Y.shape[1])

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    @property
    def seq_ids(self) -> list[str]:
        return [r.seq_id for r in self.sequences]

    def by_id(self, seq_id: str) -> SequenceRecord:
        for r in self.sequences:
            if r.seq_id == seq_id:
                return r
        raise KeyError(seq_id)

    def subset(self, keep: Sequence[int]) -> "SequenceDataset":
        return SequenceDataset(tuple(self.sequences[i] for i in keep), self.n_u, self.n_y)


def as_latent(z, k: int | None = None) -> np.ndarray:
    """Validate a latent code and return it as a float vector."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 1 or z.size < 1:
        raise DimensionError("latent code", "non-empty vector", z.shape)
    if k is not None and z.size != k:
        raise DimensionError("latent code length k", k, z.size)
    if not np.all(np.isfinite(z)):
        raise ValueError("latent code has non-finite entries")
    return z


# --------------------------------------------------------------------------
# Elementwise constraints
# --------------------------------------------------------------------------


def logistic(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_inv(y):
    """Inverse of softplus for y > 0."""
    y = np.asarray(y, dtype=float)
    return np.where(y > 30, y, np.log(np.expm1(np.minimum(y, 30))))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def constrain_elementwise(tag: str, x):
    """Map ``x`` into the range of ``tag``."""
    if tag == IDENTITY:
        return np.asarray(x, dtype=float) * 1.0
    if tag == LOGISTIC:
        return logistic(x)
    if tag == SOFTPLUS:
        return softplus(x)
    raise ValueError(f"unknown constraint tag {tag!r}")


def constrain_derivative(tag: str, x):
    """Analytic derivative of :func:`constrain_elementwise` wrt ``x``."""
    if tag == IDENTITY:
        return np.ones_like(np.asarray(x, dtype=float))
    if tag == LOGISTIC:
        s = logistic(x)
        return s * (1.0 - s)
    if tag == SOFTPLUS:
        return logistic(x)
    raise ValueError(f"unknown constraint tag {tag!r}")


@dataclass(frozen=True)
class ConstraintSpec:
    tags: tuple

    def __post_init__(self):
        tags = tuple(self.tags)
        for t in tags:
            if t not in CONSTRAINT_TAGS:
                raise ValueError(f"unknown constraint tag {t!r}")
        object.__setattr__(self, "tags", tags)
        codes = np.array([CONSTRAINT_TAGS.index(t) for t in tags], dtype=int)
        object.__setattr__(self, "_codes", codes)

    @classmethod
    def identity(cls, d: int) -> "ConstraintSpec":
        return cls((IDENTITY,) * d)

    def __len__(self):
        return len(self.tags)

    def apply(self, a: np.ndarray) -> np.ndarray:
        """Apply the per-dimension constraints along the last axis of ``a``."""
        a = np.asarray(a, dtype=float)
        out = a.copy()
        for code, fn in ((1, logistic), (2, softplus)):
            sel = self._codes == code
            if sel.any():
                out[..., sel] = fn(a[..., sel])
        return out

    def derivative(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        out = np.ones_like(a)
        for code, tag in ((1, LOGISTIC), (2, SOFTPLUS)):
            sel = self._codes == code
            if sel.any():
                out[..., sel] = constrain_derivative(tag, a[..., sel])
        return out

    def inverse(self, theta: np.ndarray) -> np.ndarray:
        """Pre-constraint values that map to ``theta``."""
        theta = np.asarray(theta, dtype=float)
        out = theta.copy()
        sel = self._codes == 1
        out[..., sel] = logit(theta[..., sel])
        sel = self._codes == 2
        out[..., sel] = softplus_inv(theta[..., sel])
        return out


# --------------------------------------------------------------------------
# Parameter generator h(z) = f(W z + b)
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ParamGenerator:
    W: np.ndarray
    b: np.ndarray
    constraints: ConstraintSpec

    def __post_init__(self):
        W = np.array(self.W, dtype=float, ndmin=2)
        b = np.array(self.b, dtype=float).ravel()
        if W.shape[0] != b.size:
            raise DimensionError("loading matrix rows", b.size, W.shape[0])
        if len(self.constraints) != b.size:
            raise DimensionError("constraint count", b.size, len(self.constraints))
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def d(self) -> int:
        return self.b.size

    @property
    def k(self) -> int:
        return self.W.shape[1]

    def preactivation(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.k:
            raise DimensionError("latent code length k", self.k, z.shape[-1])
        return z @ self.W.T + self.b

    def __call__(self, z: np.ndarray) -> np.ndarray:
        """theta = f(W z + b); accepts a single code or a batch (..., k)."""
        return self.constraints.apply(self.preactivation(z))

    def default_theta(self) -> np.ndarray:
        return self(np.zeros(self.k))

    def replace(self, W=None, b=None) -> "ParamGenerator":
        return ParamGenerator(self.W if W is None else W, self.b if b is None else b, self.constraints)


def apply_param_generator(gen: ParamGenerator, z) -> np.ndarray:
    z = as_latent(z, gen.k)
    theta = gen(z)
    if not np.all(np.isfinite(theta)):
        raise FloatingPointError("parameter generator produced non-finite output")
    return theta


# --------------------------------------------------------------------------
# Variational posterior
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VariationalPosterior:
    mu: np.ndarray
    log_s: np.ndarray = field(default=None)

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).ravel()
        log_s = np.zeros_like(mu) if self.log_s is None else np.array(self.log_s, dtype=float).ravel()
        if log_s.shape != mu.shape:
            raise DimensionError("log_s length", mu.size, log_s.size)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_s", log_s)

    @property
    def k(self) -> int:
        return self.mu.size

    @property
    def s(self) -> np.ndarray:
        return np.exp(self.log_s)

    @property
    def variance(self) -> np.ndarray:
        return np.exp(2.0 * self.log_s)

    @classmethod
    def prior(cls, k: int) -> "VariationalPosterior":
        return cls(np.zeros(k), np.zeros(k))


def kl_diag_gaussian_to_standard(q: VariationalPosterior) -> float:
    """KL(N(mu, diag s^2) || N(0, I))."""
    return 0.5 * float(np.sum(q.mu**2 + q.variance - 1.0 - 2.0 * q.log_s))


def kl_grad(q: VariationalPosterior) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the KL term wrt (mu, log_s)."""
    return q.mu.copy(), q.variance - 1.0


def reparameterize(q: VariationalPosterior, eps) -> np.ndarray:
    eps = np.asarray(eps, dtype=float)
    if eps.shape[-1] != q.k:
        raise DimensionError("eps length k", q.k, eps.shape[-1])
    return q.mu + np.exp(q.log_s) * eps
