"""Exact gradients of the sequence log-likelihood through the base model and
the parameter generator, plus a central finite-difference checker."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import ParamGenerator, SequenceRecord, as_latent
from .models import LOG_2PI, BaseModel, LdsSpec, MtRnnSpec, PdSpec, batch_loglik


@dataclass
class GradientBundle:
    value: float
    d_z: np.ndarray
    d_W: np.ndarray
    d_b: np.ndarray
    d_shared: np.ndarray
    d_lognu: np.ndarray


@dataclass
class BatchGradients:
    """Weighted-sum gradients for a batch of (z, sequence) rows."""

    values: np.ndarray  # per-row log-likelihood, unweighted
    d_z: np.ndarray  # (B, k), weighted per row
    d_W: np.ndarray
    d_b: np.ndarray
    d_shared: np.ndarray
    d_lognu: np.ndarray


def pad_batch(records: list[SequenceRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack records into (B, T_max, .) arrays; padding is masked out.

    Causal models make trailing padding harmless: it never influences the
    outputs at observed steps.
    """
    T = max(r.T for r in records)
    n_u, n_y = records[0].U.shape[1], records[0].Y.shape[1]
    B = len(records)
    U = np.zeros((B, T, n_u))
    Y = np.zeros((B, T, n_y))
    mask = np.zeros((B, T, n_y), dtype=bool)
    for i, r in enumerate(records):
        U[i, : r.T] = r.U
        Y[i, : r.T] = r.Y
        mask[i, : r.T] = r.mask
    return U, Y, mask


def batch_loglik_grad(
    model: BaseModel,
    shared: np.ndarray,
    gen: ParamGenerator,
    Z: np.ndarray,
    U: np.ndarray,
    Y: np.ndarray,
    mask: np.ndarray,
    log_nu: np.ndarray,
    row_weights: np.ndarray | None = None,
) -> BatchGradients:
    """Log-likelihood of each row and gradients of sum_b w_b * loglik_b."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    B = Z.shape[0]
    w = np.ones(B) if row_weights is None else np.asarray(row_weights, dtype=float)
    pre = gen.preactivation(Z)
    theta = gen.constraints.apply(pre)
    Yhat, cache = model.forward(theta, U, shared, store=True)
    values = batch_loglik(Yhat, Y, mask, log_nu)
    nu = np.exp(log_nu)
    resid = np.where(mask, Y - Yhat, 0.0)
    dY = resid * nu * w[:, None, None]
    dtheta, dshared = model.backward(cache, dY)
    dpre = dtheta * gen.constraints.derivative(pre)
    # d/dlog(nu_j) of [0.5 log nu - 0.5 nu r^2] = 0.5 - 0.5 nu r^2
    counts = mask.sum(axis=1)
    dlognu = np.einsum("b,bj->j", w, 0.5 * counts - 0.5 * nu * np.sum(resid**2, axis=1))
    return BatchGradients(
        values=values,
        d_z=dpre @ gen.W,
        d_W=dpre.T @ Z,
        d_b=dpre.sum(0),
        d_shared=dshared,
        d_lognu=dlognu,
    )


def loglik_and_grad(
    model: BaseModel,
    shared,
    gen: ParamGenerator,
    z,
    record: SequenceRecord,
    nu,
) -> GradientBundle:
    """log p(Y | U, h(z)) and its gradient wrt z, W, b, shared params and log nu."""
    z = as_latent(z, gen.k)
    nu = np.asarray(nu, dtype=float)
    if nu.shape != (model.n_y,):
        raise ValueError(f"expected {model.n_y} precisions, got shape {nu.shape}")
    shared = np.zeros(model.n_shared) if shared is None else np.asarray(shared, dtype=float)
    g = batch_loglik_grad(
        model, shared, gen, z[None], record.U[None], record.Y[None], record.mask[None], np.log(nu)
    )
    return GradientBundle(
        value=float(g.values[0]),
        d_z=g.d_z[0],
        d_W=g.d_W,
        d_b=g.d_b,
        d_shared=g.d_shared,
        d_lognu=g.d_lognu,
    )


def flat_loglik(model: BaseModel, gen: ParamGenerator, record: SequenceRecord):
    """Pack (z, W, b, shared, log nu) into one vector for gradient checking.

    Returns ``(f, grad, pack)`` where ``f(x)`` is the log-likelihood,
    ``grad(x)`` its analytic gradient and ``pack(z, shared, log_nu)`` builds
    ``x`` using the generator's current W and b.
    """
    k, d, ns, p = gen.k, gen.d, model.n_shared, model.n_y
    sizes = [k, d * k, d, ns, p]
    cuts = np.cumsum(sizes)[:-1]

    def unpack(x):
        z, W, b, sh, ln = np.split(np.asarray(x, dtype=float), cuts)
        return z, gen.replace(W=W.reshape(d, k), b=b), sh, ln

    def f(x):
        z, g, sh, ln = unpack(x)
        Yhat, _ = model.forward(g(z)[None], record.U, sh)
        return float(batch_loglik(Yhat, record.Y[None], record.mask[None], ln)[0])

    def grad(x):
        z, g, sh, ln = unpack(x)
        gb = loglik_and_grad(model, sh, g, z, record, np.exp(ln))
        return np.concatenate([gb.d_z, gb.d_W.ravel(), gb.d_b, gb.d_shared, gb.d_lognu])

    def pack(z, shared, log_nu):
        return np.concatenate([z, gen.W.ravel(), gen.b, shared, log_nu])

    return f, grad, pack


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    x0,
    h: float = 1e-5,
    grad: Callable[[np.ndarray], np.ndarray] | np.ndarray | None = None,
) -> float:
    """Max over coordinates of |analytic - central| / max(|analytic|, |central|, 1e-8).

    ``grad`` is either a callable returning the analytic gradient at ``x0``
    or the gradient itself. Without it, ``f`` must return ``(value, grad)``.
    """
    x0 = np.asarray(x0, dtype=float)
    if grad is None:
        analytic = np.asarray(f(x0)[1], dtype=float)

        def value(x):
            return f(x)[0]

    else:
        analytic = np.asarray(grad(x0) if callable(grad) else grad, dtype=float)
        value = f
    worst = 0.0
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e[i] = h
        central = (value(x0 + e) - value(x0 - e)) / (2.0 * h)
        denom = max(abs(analytic[i]), abs(central), 1e-8)
        worst = max(worst, abs(analytic[i] - central) / denom)
    return worst


@dataclass
class GradCheckInstance:
    model: BaseModel
    gen: ParamGenerator
    record: SequenceRecord
    x0: np.ndarray  # packed (z, W, b, shared, log nu)


def random_instance(kind: str, rng: np.random.Generator, T: int = 30, k: int = 2) -> GradCheckInstance:
    """Small seeded model, generator, noisy partially masked record and point."""
    if kind == "lds":
        model = LdsSpec(int(rng.integers(2, 5)), int(rng.integers(1, 3)), int(rng.integers(1, 3)))
    elif kind == "pd":
        model = PdSpec(n_y=int(rng.integers(1, 4)))
    elif kind == "mtrnn":
        model = MtRnnSpec(n_u=2, n_y=2, n1=4, ell=3, n2=3, checkpoint_every=int(rng.integers(1, 5)))
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    d = model.d
    gen = ParamGenerator(rng.normal(0.0, 0.3, (d, k)), model.init_offset(rng), model.constraints())
    U = np.abs(rng.normal(size=(T, model.n_u)))
    shared = model.init_shared(rng)
    Y = model.simulate(gen(rng.normal(size=k)), U, shared) + rng.normal(0.0, 0.5, (T, model.n_y))
    mask = rng.random(Y.shape) > 0.1
    record = SequenceRecord("check", U, Y, mask)
    _, _, pack = flat_loglik(model, gen, record)
    x0 = pack(rng.normal(size=k), shared, rng.normal(0.0, 0.3, model.n_y))
    return GradCheckInstance(model, gen, record, x0)


def check_instance(inst: GradCheckInstance, h: float = 1e-5) -> float:
    f, grad, _ = flat_loglik(inst.model, inst.gen, inst.record)
    return finite_diff_check(f, inst.x0, h=h, grad=grad)


GRAD_THRESHOLDS = {"lds": 1e-4, "pd": 1e-4, "mtrnn": 1e-3}


__all__ = [
    "GRAD_THRESHOLDS",
    "GradCheckInstance",
    "check_instance",
    "random_instance",
    "GradientBundle",
    "BatchGradients",
    "batch_loglik_grad",
    "finite_diff_check",
    "flat_loglik",
    "loglik_and_grad",
    "pad_batch",
    "LOG_2PI",
]
