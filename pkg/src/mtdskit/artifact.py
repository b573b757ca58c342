"""Single-file text serialization of a fitted model.

Layout::

    mtdskit-v1 <kind> k=<k> d=<d>
    spec <key>=<value> ...
    constraints <tag> ... (d tags)
    matrix W <rows> <cols>
    <row of shortest round-trip decimals>
    ...
    matrix b 1 <d>
    matrix shared 1 <n>
    matrix log_nu 1 <n_y>
    posterior <seq_id> <k>           (optional, repeated)
    <mu row>
    <log_s row>

Floats are written with ``repr`` so reading back is bitwise exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ConstraintSpec, ParamGenerator, VariationalPosterior
from .models import BaseModel, make_model

MAGIC = "mtdskit-v1"


class ArtifactError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"artifact line {line}: {message}")
        self.line = line


@dataclass(eq=False)
class ModelArtifact:
    model: BaseModel
    gen: ParamGenerator
    shared: np.ndarray
    log_nu: np.ndarray
    posteriors: dict = field(default_factory=dict)

    @property
    def nu(self) -> np.ndarray:
        return np.exp(self.log_nu)

    @classmethod
    def from_state(cls, state) -> "ModelArtifact":
        return cls(state.model, state.gen, np.asarray(state.shared), np.asarray(state.log_nu), dict(state.posteriors))


def _spec_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(repr(float(x)) for x in v)
    return str(v)


def _row(v) -> str:
    return " ".join(repr(float(x)) for x in np.asarray(v, dtype=float).ravel())


def format_artifact(art: ModelArtifact) -> str:
    m, g = art.model, art.gen
    lines = [f"{MAGIC} {m.kind} k={g.k} d={g.d}"]
    lines.append("spec " + " ".join(f"{k}={_spec_value(v)}" for k, v in m.spec_dict().items()))
    lines.append("constraints " + " ".join(g.constraints.tags))
    for name, M in (("W", g.W), ("b", g.b[None]), ("shared", np.asarray(art.shared)[None]), ("log_nu", art.log_nu[None])):
        M = np.asarray(M, dtype=float)
        lines.append(f"matrix {name} {M.shape[0]} {M.shape[1]}")
        lines.extend(_row(r) for r in M)
    for sid in sorted(art.posteriors):
        if not sid or any(c.isspace() for c in sid):
            raise ValueError(f"seq_id {sid!r} cannot be stored in an artifact")
        q = art.posteriors[sid]
        lines.append(f"posterior {sid} {q.k}")
        lines.append(_row(q.mu))
        lines.append(_row(q.log_s))
    return "\n".join(lines) + "\n"


def _parse_spec_value(key: str, raw: str):
    if key in ("a", "b"):
        return tuple(float(x) for x in raw.split(","))
    return int(raw)


def parse_artifact(text: str) -> ModelArtifact:
    lines = text.splitlines()
    if not lines:
        raise ArtifactError(1, "empty artifact")
    head = lines[0].split()
    if len(head) != 4 or head[0] != MAGIC or not head[2].startswith("k=") or not head[3].startswith("d="):
        raise ArtifactError(1, f"expected header '{MAGIC} <kind> k=<k> d=<d>'")
    kind = head[1]
    try:
        k, d = int(head[2][2:]), int(head[3][2:])
    except ValueError:
        raise ArtifactError(1, "non-integer k or d") from None
    i = 1

    def need(prefix: str) -> list[str]:
        nonlocal i
        if i >= len(lines) or not lines[i].startswith(prefix):
            raise ArtifactError(i + 1, f"expected '{prefix}' section")
        parts = lines[i].split()
        i += 1
        return parts

    def floats(n_expected: int) -> np.ndarray:
        nonlocal i
        if i >= len(lines):
            raise ArtifactError(i + 1, "unexpected end of artifact")
        try:
            row = np.array([float(x) for x in lines[i].split()], dtype=float)
        except ValueError:
            raise ArtifactError(i + 1, "non-numeric matrix entry") from None
        if row.size != n_expected:
            raise ArtifactError(i + 1, f"expected {n_expected} values, got {row.size}")
        i += 1
        return row

    spec = {}
    for item in need("spec")[1:]:
        key, _, raw = item.partition("=")
        try:
            spec[key] = _parse_spec_value(key, raw)
        except ValueError:
            raise ArtifactError(i, f"bad spec entry {item!r}") from None
    try:
        model = make_model(kind, **spec)
    except (TypeError, ValueError) as exc:
        raise ArtifactError(i, f"cannot build model: {exc}") from None
    if model.d != d:
        raise ArtifactError(1, f"header d={d} but model has d={model.d}")
    tags = need("constraints")[1:]
    if len(tags) != d:
        raise ArtifactError(i, f"expected {d} constraint tags, got {len(tags)}")
    mats = {}
    for name in ("W", "b", "shared", "log_nu"):
        parts = need("matrix " + name)
        try:
            r, c = int(parts[2]), int(parts[3])
        except (IndexError, ValueError):
            raise ArtifactError(i, f"bad matrix header for {name}") from None
        mats[name] = np.array([floats(c) for _ in range(r)]).reshape(r, c)
    if mats["W"].shape != (d, k):
        raise ArtifactError(i, f"W has shape {mats['W'].shape}, expected {(d, k)}")
    try:
        gen = ParamGenerator(mats["W"], mats["b"].ravel(), ConstraintSpec(tuple(tags)))
    except ValueError as exc:
        raise ArtifactError(i, f"invalid generator: {exc}") from None
    posteriors = {}
    while i < len(lines) and lines[i].strip():
        parts = need("posterior ")
        if len(parts) != 3:
            raise ArtifactError(i, "expected 'posterior <seq_id> <k>'")
        mu = floats(k)
        log_s = floats(k)
        posteriors[parts[1]] = VariationalPosterior(mu, log_s)
    return ModelArtifact(model, gen, mats["shared"].ravel(), mats["log_nu"].ravel(), posteriors)


def save_artifact(art: ModelArtifact, path) -> None:
    Path(path).write_text(format_artifact(art), encoding="utf-8")


def load_artifact(path) -> ModelArtifact:
    return parse_artifact(Path(path).read_text(encoding="utf-8"))


__all__ = ["ArtifactError", "MAGIC", "ModelArtifact", "format_artifact", "load_artifact", "parse_artifact", "save_artifact"]
