"""Command-line entry point: ``mtdskit <subcommand> [--config f] [--set k=v] [--out dir]``.

Exit status is 0 on success, 1 on usage or input errors and 2 on
numerical failures (non-finite objectives, failed checks, linear algebra).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .adais import FilteredPosteriors, NoSupportError, posterior_predictive, sequential_filter
from .artifact import ArtifactError, ModelArtifact, load_artifact, save_artifact
from .baselines import EvalReport, FoldError, LooConfig, loo_driver, windowed_rmse
from .config import ConfigError, RunConfig, load_config
from .core import DimensionError
from .data import (
    FAMILIES,
    DataFormatError,
    generate_synthetic,
    load_posteriors_csv,
    load_sequences_csv,
    write_forecast_csv,
    write_posteriors_csv,
    write_sequences_csv,
    write_truth_csv,
)
from .gradients import GRAD_THRESHOLDS, check_instance, random_instance
from .kalman import ConvergenceError, InnovationError, equivalence_gap, random_stable_lds
from .learning import TrainingError, train
from .models import make_model

log = logging.getLogger("mtdskit")

SUBCOMMANDS = ("synth", "train", "filter", "forecast", "eval", "loo", "kalman-check", "grad-check")


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


def _model_from_config(cfg: RunConfig, n_u: int | None = None, n_y: int | None = None):
    kind = cfg["model.kind"]
    n_u = cfg["model.n_u"] if n_u is None else n_u
    n_y = cfg["model.n_y"] if n_y is None else n_y
    if kind == "lds":
        return make_model("lds", n_x=cfg["model.n_x"], n_u=n_u, n_y=n_y)
    if kind == "pd":
        if n_u != 1:
            raise UsageError(f"the pd model takes one input column, data has {n_u}")
        return make_model("pd", n_y=n_y, L=cfg["model.L"])
    if kind == "mtrnn":
        return make_model(
            "mtrnn", n_u=n_u, n_y=n_y, n1=cfg["model.n1"], ell=cfg["model.ell"], n2=cfg["model.n2"],
            checkpoint_every=cfg["model.checkpoint_every"],
        )
    raise UsageError(f"unknown model.kind {kind!r}; expected lds, pd or mtrnn")


def _load_data(cfg: RunConfig):
    path = Path(cfg["data.path"])
    if not path.exists():
        raise UsageError(f"data file not found: {path}")
    return load_sequences_csv(path)


def _load_model(cfg: RunConfig) -> ModelArtifact:
    path = Path(cfg["artifact.path"])
    if not path.exists():
        raise UsageError(f"model artifact not found: {path}")
    return load_artifact(path)


def _pick_record(cfg: RunConfig, ds):
    sid = cfg["filter.seq_id"]
    if not sid:
        return ds[0]
    try:
        return ds.by_id(sid)
    except KeyError:
        raise UsageError(f"seq_id {sid!r} not in data") from None


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, out: Path) -> None:
    kind = cfg["model.kind"]
    if kind not in FAMILIES:
        raise UsageError(f"unknown model.kind {kind!r}")
    kw = dict(k=cfg["synth.k"], N=cfg["synth.N"], T=cfg["synth.T"], noise_sd=cfg["synth.noise_sd"],
              seed=cfg["synth.family_seed"], missing_prob=cfg["synth.missing_prob"])
    if cfg["synth.input_kind"]:
        kw["input_kind"] = cfg["synth.input_kind"]
    if kind == "lds":
        kw.update(n_x=cfg["model.n_x"], n_u=cfg["model.n_u"], n_y=cfg["model.n_y"])
    elif kind == "pd":
        kw.update(n_y=cfg["model.n_y"])
    else:
        kw.update(n_u=cfg["model.n_u"], n_y=cfg["model.n_y"], n1=cfg["model.n1"], ell=cfg["model.ell"], n2=cfg["model.n2"])
    try:
        fam = FAMILIES[kind](**kw)
        ds, Z, Theta = generate_synthetic(fam, cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_sequences_csv(ds, out / "data.csv")
    write_truth_csv(out / "truth.csv", ds.seq_ids, Z, Theta)
    print(f"wrote {len(ds)} sequences to {out / 'data.csv'}")


def cmd_train(cfg: RunConfig, out: Path) -> None:
    ds = _load_data(cfg)
    model = _model_from_config(cfg, ds.n_u, ds.n_y)
    tcfg = cfg.train_config()
    state, rows = train(ds, model, tcfg, k=cfg["train.k"], log_path=out / cfg["train.log_path"])
    save_artifact(ModelArtifact.from_state(state), out / "model.mtds")
    print(f"trained {model.kind} (k={state.k}) for {tcfg.n_iters} iterations; final minibatch ELBO {rows[-1][1]:.4f}")


def cmd_filter(cfg: RunConfig, out: Path) -> None:
    ds = _load_data(cfg)
    art = _load_model(cfg)
    rec = _pick_record(cfg, ds)
    acfg = cfg.adais_config()
    post = sequential_filter(rec, art.gen, art.shared, art.nu, art.model, acfg, T=cfg["filter.T"])
    write_posteriors_csv(post, out / "posteriors.csv")
    unreached = [t for t, d in post.diagnostics.items() if not d.reached_threshold]
    print(f"filtered {rec.seq_id!r} at {len(post) - 1} steps; ESS threshold missed at {len(unreached)} steps")


def cmd_forecast(cfg: RunConfig, out: Path) -> None:
    ds = _load_data(cfg)
    art = _load_model(cfg)
    rec = _pick_record(cfg, ds)
    ppath = Path(cfg["forecast.posteriors"])
    if not ppath.exists() and (out / ppath).exists():
        ppath = out / ppath
    if not ppath.exists():
        raise UsageError(f"posteriors file not found: {ppath}")
    post = FilteredPosteriors(load_posteriors_csv(ppath))
    H = cfg["forecast.horizon"]
    t0 = cfg["forecast.anchor"]
    if t0 is None:
        t0 = max(0, rec.T - H)
    if not 0 <= t0 < rec.T:
        raise UsageError(f"forecast.anchor must lie in [0, {rec.T - 1}]")
    H = min(H, rec.T - t0)
    rng = np.random.default_rng(cfg["seed"])
    q = post.at(t0)
    fc = posterior_predictive(
        q, rec.prefix(t0) if t0 > 0 else None, rec.U[t0 : t0 + H], art.gen, art.shared, art.nu, art.model,
        cfg["forecast.samples"], rng,
    )
    write_forecast_csv(out / "forecast.csv", rec.seq_id, t0, fc)
    print(f"forecast {H} steps of {rec.seq_id!r} from t={t0}")


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    """Filter and forecast every sequence with the trained model; report RMSE."""
    ds = _load_data(cfg)
    art = _load_model(cfg)
    anchors, horizons = cfg["eval.anchors"], cfg["eval.horizons"]
    if not anchors or not horizons:
        raise UsageError("eval.anchors and eval.horizons must be non-empty")
    acfg = cfg.adais_config()
    H = max(horizons)
    report = EvalReport()
    for i, rec in enumerate(ds):
        rng = np.random.default_rng([cfg["seed"], i])
        post = sequential_filter(rec, art.gen, art.shared, art.nu, art.model, acfg, rng, T=max(anchors))
        fc = {}
        for t0 in anchors:
            if t0 >= rec.T:
                fc[t0] = np.zeros((0, ds.n_y))
                continue
            f = posterior_predictive(
                post.at(t0), rec.prefix(t0) if t0 > 0 else None, rec.U[t0 : t0 + H], art.gen, art.shared,
                art.nu, art.model, cfg["eval.forecast_samples"], rng,
            )
            fc[t0] = f.mean
        report.extend(windowed_rmse(fc, rec, anchors, horizons, fold=i))
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    for a in anchors:
        for h in horizons:
            print(f"anchor {a} horizon {h}: mean RMSE {report.aggregate(a, h):.4f}")


def cmd_loo(cfg: RunConfig, out: Path) -> None:
    ds = _load_data(cfg)
    model = _model_from_config(cfg, ds.n_u, ds.n_y)
    try:
        lcfg = LooConfig(
            k=cfg["train.k"], anchors=cfg["eval.anchors"], horizons=cfg["eval.horizons"], methods=cfg["eval.methods"],
            train=cfg.train_config(), adais=cfg.adais_config(), n_forecast_samples=cfg["eval.forecast_samples"],
            single_task_prior_sd=cfg["eval.single_task_prior_sd"], srmse=cfg["eval.srmse"], seed=cfg["seed"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    reports = loo_driver(ds, model, lcfg)
    for method, rep in reports.items():
        (out / f"report_{method}.csv").write_text(rep.to_csv(), encoding="utf-8")
        parts = [f"a{a}/h{h}={rep.aggregate(a, h):.4f}" for a in lcfg.anchors for h in lcfg.horizons]
        print(f"{method}: " + " ".join(parts))


def cmd_kalman_check(cfg: RunConfig, out: Path) -> None:
    rng = np.random.default_rng(cfg["seed"])
    lines = ["model,n_x,n_y,burn,max_gap"]
    worst = 0.0
    for i in range(cfg["kalman.n_models"]):
        n_x = 1 + i % cfg["kalman.max_n_x"]
        n_y = 1 + i % 3
        m = random_stable_lds(rng, n_x, n_y)
        Y = m.sample(cfg["kalman.T"], rng)
        gaps, burn = equivalence_gap(m, Y)
        g = float(gaps.max()) if gaps.size else 0.0
        worst = max(worst, g)
        lines.append(f"{i},{n_x},{n_y},{burn},{g!r}")
    (out / "kalman_check.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"max per-step log-density gap {worst:.3e} over {cfg['kalman.n_models']} models")
    if worst >= cfg["kalman.threshold"]:
        raise CheckFailed(f"gap {worst:.3e} exceeds {cfg['kalman.threshold']:.1e}")


def cmd_grad_check(cfg: RunConfig, out: Path) -> None:
    lines = ["model,instance,max_rel_err"]
    failed = []
    for kind in cfg["grad.models"]:
        if kind not in GRAD_THRESHOLDS:
            raise UsageError(f"unknown model {kind!r} in grad.models")
        rng = np.random.default_rng([cfg["seed"], list(GRAD_THRESHOLDS).index(kind)])
        errs = []
        for i in range(cfg["grad.instances"]):
            e = check_instance(random_instance(kind, rng, T=cfg["grad.T"]))
            errs.append(e)
            lines.append(f"{kind},{i},{e!r}")
        worst = max(errs) if errs else 0.0
        print(f"{kind}: max relative error {worst:.3e} (threshold {GRAD_THRESHOLDS[kind]:.0e})")
        if worst >= GRAD_THRESHOLDS[kind]:
            failed.append(kind)
    (out / "grad_check.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if failed:
        raise CheckFailed(f"gradient check failed for {', '.join(failed)}")


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "filter": cmd_filter,
    "forecast": cmd_forecast,
    "eval": cmd_eval,
    "loo": cmd_loo,
    "kalman-check": cmd_kalman_check,
    "grad-check": cmd_grad_check,
}


# Keys that must be set explicitly (file or --set); everything else has a default.
REQUIRED = {
    "synth": (),
    "train": ("data.path",),
    "filter": ("data.path", "artifact.path"),
    "forecast": ("data.path", "artifact.path"),
    "eval": ("data.path", "artifact.path"),
    "loo": ("data.path",),
    "kalman-check": (),
    "grad-check": (),
}

NUMERICAL_ERRORS = (CheckFailed, TrainingError, NoSupportError, InnovationError, ConvergenceError,
                    FloatingPointError, np.linalg.LinAlgError)
USAGE_ERRORS = (UsageError, ConfigError, DataFormatError, ArtifactError, DimensionError, OSError)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtdskit", description="Multi-task dynamical systems toolkit")
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", default=".", help="output directory (created if missing)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        cfg.require(*REQUIRED[args.command])
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out)
    except FoldError as exc:
        numerical = isinstance(exc.__cause__, NUMERICAL_ERRORS)
        print(f"{'numerical failure' if numerical else 'error'}: {exc}", file=sys.stderr)
        return 2 if numerical else 1
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
