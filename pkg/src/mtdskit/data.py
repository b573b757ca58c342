"""Sequence CSV ingestion/serialization and synthetic sequence families."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ConstraintSpec, ParamGenerator, SequenceDataset, SequenceRecord, logit
from .models import BaseModel, LdsSpec, MtRnnSpec, PdSpec


class DataFormatError(ValueError):
    """Malformed sequence file; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def fmt(x: float) -> str:
    """Shortest decimal that round-trips the float exactly."""
    return repr(float(x))


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------


def _parse_header(header: list[str]) -> tuple[int, int]:
    if len(header) < 2 or header[0] != "seq_id" or header[1] != "t":
        raise DataFormatError(1, "header must start with 'seq_id,t'")
    n_u = n_y = 0
    for col in header[2:]:
        if col == f"u{n_u}" and n_y == 0:
            n_u += 1
        elif col == f"y{n_y}":
            n_y += 1
        else:
            raise DataFormatError(1, f"unexpected column {col!r}")
    if n_y == 0:
        raise DataFormatError(1, "no output columns y0..")
    return n_u, n_y


def parse_sequences(text: str) -> SequenceDataset:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataFormatError(1, "empty file") from None
    n_u, n_y = _parse_header([h.strip() for h in header])
    width = 2 + n_u + n_y
    rows: dict[str, dict[int, tuple]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != width:
            raise DataFormatError(lineno, f"expected {width} fields, got {len(row)}")
        sid = row[0]
        try:
            t = int(row[1])
        except ValueError:
            raise DataFormatError(lineno, f"non-integer t {row[1]!r}") from None
        try:
            u = [float(v) for v in row[2 : 2 + n_u]]
            y = [float(v) if v.strip() != "" else math.nan for v in row[2 + n_u :]]
        except ValueError as exc:
            raise DataFormatError(lineno, f"non-numeric field ({exc})") from None
        if not all(math.isfinite(v) for v in u):
            raise DataFormatError(lineno, "non-finite input value")
        if any(math.isinf(v) for v in y):
            raise DataFormatError(lineno, "non-finite output value")
        seq = rows.setdefault(sid, {})
        if t in seq:
            raise DataFormatError(lineno, f"duplicate t={t} for seq_id {sid!r}")
        seq[t] = (u, y, lineno)
    records = []
    for sid, seq in rows.items():
        T = len(seq)
        if sorted(seq) != list(range(T)):
            missing = sorted(set(range(max(seq) + 1)) - set(seq))
            line = max(v[2] for v in seq.values())
            raise DataFormatError(line, f"seq_id {sid!r}: t must be contiguous from 0, missing {missing[:5]}")
        U = np.array([seq[t][0] for t in range(T)], dtype=float).reshape(T, n_u)
        Y = np.array([seq[t][1] for t in range(T)], dtype=float).reshape(T, n_y)
        mask = ~np.isnan(Y)
        records.append(SequenceRecord(sid, U, np.where(mask, Y, 0.0), mask))
    if not records:
        raise DataFormatError(2, "no data rows")
    return SequenceDataset(tuple(records), n_u, n_y)


def load_sequences_csv(path) -> SequenceDataset:
    return parse_sequences(Path(path).read_text(encoding="utf-8"))


def format_sequences(dataset: SequenceDataset) -> str:
    cols = ["seq_id", "t"] + [f"u{i}" for i in range(dataset.n_u)] + [f"y{j}" for j in range(dataset.n_y)]
    lines = [",".join(cols)]
    for rec in dataset:
        for t in range(rec.T):
            ys = [fmt(rec.Y[t, j]) if rec.mask[t, j] else "" for j in range(dataset.n_y)]
            lines.append(",".join([rec.seq_id, str(t)] + [fmt(v) for v in rec.U[t]] + ys))
    return "\n".join(lines) + "\n"


def write_sequences_csv(dataset: SequenceDataset, path) -> None:
    Path(path).write_text(format_sequences(dataset), encoding="utf-8")


def write_truth_csv(path, seq_ids, Z: np.ndarray, Theta: np.ndarray) -> None:
    k, d = Z.shape[1], Theta.shape[1]
    lines = [",".join(["seq_id"] + [f"z_{i}" for i in range(k)] + [f"theta_{i}" for i in range(d)])]
    for sid, z, th in zip(seq_ids, Z, Theta):
        lines.append(",".join([sid] + [fmt(v) for v in z] + [fmt(v) for v in th]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_truth_csv(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    k = sum(1 for h in header if h.startswith("z_"))
    ids = [r[0] for r in rows[1:]]
    vals = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=float)
    return ids, vals[:, :k], vals[:, k:]


# --------------------------------------------------------------------------
# Synthetic families
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SyntheticFamilySpec:
    """A ground-truth sequence family: model, generator h*, noise and inputs.

    ``input_kind`` is one of ``schedule`` (alternating high-low-high /
    low-high-low thirds), ``pulses`` (piecewise-constant Gaussian levels held
    for ``input_period`` steps), ``impulse`` or ``noise``.
    """

    model: BaseModel
    gen: ParamGenerator
    nu: np.ndarray
    N: int
    T: int
    input_kind: str = "pulses"
    input_period: int = 10
    input_low: float = 1.5
    input_high: float = 3.5
    missing_prob: float = 0.0
    shared: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.gen.k


def make_inputs(spec: SyntheticFamilySpec, i: int, rng: np.random.Generator) -> np.ndarray:
    T, n_u = spec.T, spec.model.n_u
    kind = spec.input_kind
    if kind == "schedule":
        hi, lo = spec.input_high, spec.input_low
        levels = (hi, lo, hi) if i % 2 == 0 else (lo, hi, lo)
        edges = np.linspace(0, T, 4).round().astype(int)
        u = np.empty(T)
        for s in range(3):
            u[edges[s] : edges[s + 1]] = levels[s]
        return np.repeat(u[:, None], n_u, axis=1)
    if kind == "pulses":
        n_seg = -(-T // spec.input_period)
        levels = rng.standard_normal((n_seg, n_u))
        return np.repeat(levels, spec.input_period, axis=0)[:T]
    if kind == "impulse":
        U = np.zeros((T, n_u))
        U[0] = 1.0
        return U
    if kind == "noise":
        return rng.standard_normal((T, n_u))
    raise ValueError(f"unknown input kind {kind!r}")


def generate_synthetic(spec: SyntheticFamilySpec, seed: int):
    """Draw N sequences: z* ~ N(0, I), theta* = h*(z*), Y = simulation + noise.

    Returns ``(dataset, Z*, Theta*)``.
    """
    rng = np.random.default_rng(seed)
    nu = np.asarray(spec.nu, dtype=float)
    sd = 1.0 / np.sqrt(nu)
    records, Zs, Thetas = [], [], []
    width = len(str(max(spec.N - 1, 1)))
    for i in range(spec.N):
        z = rng.standard_normal(spec.k)
        theta = spec.gen(z)
        U = make_inputs(spec, i, rng)
        Yhat = spec.model.simulate(theta, U, spec.shared)
        Y = Yhat + rng.standard_normal(Yhat.shape) * sd
        mask = rng.random(Y.shape) >= spec.missing_prob if spec.missing_prob > 0 else np.ones(Y.shape, bool)
        records.append(SequenceRecord(f"s{i:0{width}d}", U, Y, mask))
        Zs.append(z)
        Thetas.append(theta)
    ds = SequenceDataset(tuple(records), spec.model.n_u, spec.model.n_y)
    return ds, np.array(Zs), np.array(Thetas)


def _random_loadings(rng, scales: np.ndarray, k: int) -> np.ndarray:
    dirs = rng.standard_normal((scales.size, k))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs * scales[:, None]


def pd_family(k: int = 2, N: int = 32, T: int = 100, n_y: int = 3, noise_sd: float = 0.3, seed: int = 0, **kw):
    """PD family: inter-sequence variation in offsets, dynamics and curve shape."""
    model = PdSpec(n_y=n_y)
    rng = np.random.default_rng(seed)
    p, L = n_y, model.L
    theta0 = model.pack(0.0, 0.85, 0.3, 0.0, 1.0)
    b = model.constraints().inverse(theta0)
    scales = np.concatenate([np.full(p, 1.0), np.full(p, 0.5), np.full(p, 0.4), np.full(p, 0.8), np.full(L * p, 0.25)])
    W = _random_loadings(rng, scales, k)
    gen = ParamGenerator(W, b, model.constraints())
    kw.setdefault("input_kind", "schedule")
    return SyntheticFamilySpec(model, gen, np.full(p, noise_sd**-2), N, T, **kw)


def lds_family(k: int = 2, N: int = 32, T: int = 100, n_x: int = 2, n_u: int = 1, n_y: int = 2,
               noise_sd: float = 0.3, seed: int = 0, **kw):
    """LDS family: inter-sequence variation in damping, frequency and emission."""
    model = LdsSpec(n_x, n_u, n_y)
    rng = np.random.default_rng(seed)
    b = model.init_offset(rng)
    scales = np.concatenate(
        [
            np.tile([0.4, 0.3], n_x // 2),
            np.full(n_x % 2, 0.4),
            np.full(n_x * n_u, 0.3),
            np.full(n_y * n_x, 0.3),
            np.full(n_y, 0.5),
        ]
    )
    W = _random_loadings(rng, scales, k)
    gen = ParamGenerator(W, b, model.constraints())
    kw.setdefault("input_kind", "pulses")
    return SyntheticFamilySpec(model, gen, np.full(n_y, noise_sd**-2), N, T, **kw)


def mtrnn_family(k: int = 2, N: int = 16, T: int = 64, n_u: int = 2, n_y: int = 2, n1: int = 32, ell: int = 8,
                 n2: int = 16, noise_sd: float = 0.1, seed: int = 0, **kw):
    model = MtRnnSpec(n_u=n_u, n_y=n_y, n1=n1, ell=ell, n2=n2)
    rng = np.random.default_rng(seed)
    b = model.init_offset(rng)
    W = 0.1 * rng.standard_normal((model.d, k))
    gen = ParamGenerator(W, b, model.constraints())
    kw.setdefault("input_kind", "pulses")
    return SyntheticFamilySpec(model, gen, np.full(n_y, noise_sd**-2), N, T, shared=model.init_shared(rng), **kw)


FAMILIES = {"pd": pd_family, "lds": lds_family, "mtrnn": mtrnn_family}


def frequency_family(w_scale: float = 0.2, omega0: float = 0.8, radius: float = 0.98, N: int = 8, T: int = 512):
    """Scalar-output 2-state LDS whose rotation frequency is omega0 + w_scale*z."""
    model = LdsSpec(2, 1, 1)
    b = np.array([logit(radius / (1 - 1e-6)), omega0, 1.0, 0.0, 1.0, 0.0, 0.0])
    W = np.zeros((model.d, 1))
    W[1, 0] = w_scale
    gen = ParamGenerator(W, b, ConstraintSpec.identity(model.d))
    return SyntheticFamilySpec(model, gen, np.array([1e9]), N, T, input_kind="impulse")


# --------------------------------------------------------------------------
# Filtered posterior and forecast CSVs
# --------------------------------------------------------------------------


def format_posteriors(posteriors) -> str:
    """Rows ``t,component,weight,mu_*,chol_*`` (row-major lower Cholesky factor)."""
    items = list(posteriors)
    k = items[0][1].k
    cols = ["t", "component", "weight"] + [f"mu_{i}" for i in range(k)] + [f"chol_{i}" for i in range(k * k)]
    lines = [",".join(cols)]
    for t, q in items:
        for j in range(q.J):
            L = np.linalg.cholesky(q.covs[j])
            vals = [q.weights[j], *q.means[j], *L.ravel()]
            lines.append(",".join([str(t), str(j)] + [fmt(v) for v in vals]))
    return "\n".join(lines) + "\n"


def write_posteriors_csv(posteriors, path) -> None:
    Path(path).write_text(format_posteriors(posteriors), encoding="utf-8")


def load_posteriors_csv(path):
    """Inverse of :func:`write_posteriors_csv`: list of ``(t, GaussianMixture)``."""
    from .adais import GaussianMixture

    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["t", "component", "weight"]:
        raise DataFormatError(1, "header must start with 't,component,weight'")
    k = sum(1 for h in rows[0] if h.startswith("mu_"))
    if len(rows[0]) != 3 + k + k * k:
        raise DataFormatError(1, "expected mu_0.. and chol_0.. columns for a square factor")
    groups: dict[int, list] = {}
    for lineno, r in enumerate(rows[1:], start=2):
        if len(r) != len(rows[0]):
            raise DataFormatError(lineno, f"expected {len(rows[0])} fields, got {len(r)}")
        try:
            t = int(r[0])
            vals = [float(v) for v in r[2:]]
        except ValueError:
            raise DataFormatError(lineno, "non-numeric field") from None
        groups.setdefault(t, []).append(vals)
    out = []
    for t in sorted(groups):
        V = np.array(groups[t])
        L = V[:, 1 + k :].reshape(-1, k, k)
        covs = L @ np.transpose(L, (0, 2, 1))
        out.append((t, GaussianMixture(V[:, 0], V[:, 1 : 1 + k], covs)))
    return out


def write_forecast_csv(path, seq_id: str, t0: int, forecast) -> None:
    """Rows ``seq_id,t,channel,mean,q05,q95`` with t the 0-based data row."""
    lines = ["seq_id,t,channel,mean,q05,q95"]
    H, n_y = forecast.mean.shape
    for h in range(H):
        for j in range(n_y):
            vals = (forecast.mean[h, j], forecast.q05[h, j], forecast.q95[h, j])
            lines.append(",".join([seq_id, str(t0 + h), str(j)] + [fmt(v) for v in vals]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_forecast_csv(path) -> list[tuple[str, int, int, float, float, float]]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["seq_id", "t", "channel", "mean", "q05", "q95"]:
        raise DataFormatError(1, "header must be 'seq_id,t,channel,mean,q05,q95'")
    out = []
    for lineno, r in enumerate(rows[1:], start=2):
        try:
            out.append((r[0], int(r[1]), int(r[2]), float(r[3]), float(r[4]), float(r[5])))
        except (ValueError, IndexError):
            raise DataFormatError(lineno, "malformed forecast row") from None
    return out


def load_report_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
