"""Command-line entry point: ``socnn <subcommand>``.

Every subcommand writes its outputs plus ``manifest.json`` into ``--out``
(default: ``$SOCNN_OUTPUT_ROOT/<subcommand>``, root ``runs``). The manifest
is written before work starts and finalized with a status on exit; it is the
only file holding timestamps. Logs go to stderr, and stdout gets a single
``key=value`` summary line.

Config files for ``train`` and ``alpha-grid`` are flat ``key=value`` text,
one pair per line (``#`` starts a comment), or the same pairs inline,
comma-separated. Recognized keys:

* windowing: ``M``, ``train_fraction``, ``val_ratio``
* training: any ``TrainConfig`` field except ``seed``
* model: any field of the selected model's config except the data-derived
  ``d``, ``d_I`` and ``target_index``
"""

from __future__ import annotations

import json
import logging
import os
import re
import sys
import time
from dataclasses import asdict, fields
from datetime import datetime, timezone

import click
import numpy as np

from . import __version__
from . import datagen, evaluation, ingest as ingest_mod
from .models import (
    CNNConfig,
    CNNModel,
    SOCNNConfig,
    SOCNNModel,
    checkpoint_load,
    checkpoint_save,
    read_checkpoint_header,
    var_fit,
)
from .train import TrainConfig, run_training

log = logging.getLogger("socnn")

WINDOW_KEYS = {"M": int, "train_fraction": float, "val_ratio": float}
_TYPES = {"int": int, "float": float, "str": str, "bool": None}


# ----------------------------------------------------------------------------
# manifest and output plumbing
# ----------------------------------------------------------------------------

def _now():
    return datetime.now(timezone.utc).isoformat()


class RunManifest:
    """``manifest.json``: written first, finalized with a status on exit."""

    def __init__(self, out_dir, subcommand, config, inputs, seed):
        self.path = os.path.join(out_dir, "manifest.json")
        self.data = {
            "subcommand": subcommand,
            "config": config,
            "inputs": inputs,
            "outputs": [],
            "seed": seed,
            "tool_version": __version__,
            "started": _now(),
            "finished": None,
            "status": "running",
        }
        self.t0 = time.perf_counter()
        self._write()

    def _write(self):
        with open(self.path, "w") as fh:
            json.dump(self.data, fh, sort_keys=True, indent=1, default=str)
            fh.write("\n")

    def add_output(self, path):
        self.data["outputs"].append(os.path.basename(path))

    def finalize(self, status, **extra):
        missing = [p for p in self.data["outputs"]
                   if not os.path.exists(os.path.join(os.path.dirname(self.path), p))]
        if status == "ok" and missing:
            status = "error"
            extra["error"] = f"declared outputs missing: {missing}"
        self.data.update(status=status, finished=_now(),
                         wall_clock_s=round(time.perf_counter() - self.t0, 3), **extra)
        self._write()
        return status


def _out_dir(out, subcommand):
    if out is None:
        out = os.path.join(os.environ.get("SOCNN_OUTPUT_ROOT", "runs"), subcommand)
    os.makedirs(out, exist_ok=True)
    return out


def _summary(**kv):
    parts = []
    for k, v in kv.items():
        if isinstance(v, (float, np.floating)):
            v = repr(float(v))
        elif isinstance(v, np.bool_):
            v = bool(v)
        parts.append(f"{k}={v}")
    click.echo(" ".join(parts))


class _Run:
    """Context manager tying a manifest to the command's success or failure."""

    def __init__(self, out, subcommand, config, inputs, seed):
        self.out = _out_dir(out, subcommand)
        self.manifest = RunManifest(self.out, subcommand, config, inputs, seed)

    def path(self, name):
        p = os.path.join(self.out, name)
        self.manifest.add_output(p)
        return p

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None:
            if self.manifest.finalize("ok") != "ok":
                raise click.ClickException(self.manifest.data["error"])
            return False
        self.manifest.finalize("error", error=f"{exc_type.__name__}: {exc}")
        if isinstance(exc, click.ClickException):
            return False
        raise click.ClickException(f"{exc_type.__name__}: {exc}") from exc


# ----------------------------------------------------------------------------
# config parsing
# ----------------------------------------------------------------------------

def parse_config(text):
    """Flat ``key=value`` pairs from a file path or an inline comma list."""
    if text is None:
        return {}
    if os.path.isfile(text):
        with open(text) as fh:
            lines = [ln.split("#", 1)[0].strip() for ln in fh]
        items = [ln for ln in lines if ln]
    else:
        # split on commas that start a new key, so "kernels=3,1" survives
        items = [s.strip() for s in re.split(r",(?=\s*[A-Za-z_]\w*\s*=)", text) if s.strip()]
    out = {}
    for item in items:
        if "=" not in item:
            raise click.BadParameter(f"expected key=value, got {item!r}", param_hint="--config")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(value, typ, key):
    if typ is None:
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise click.BadParameter(f"{key}: expected a boolean, got {value!r}", param_hint="--config")
    try:
        return typ(value)
    except ValueError as exc:
        raise click.BadParameter(f"{key}: {exc}", param_hint="--config") from exc


def _field_types(cls, skip):
    def name(t):
        return t if isinstance(t, str) else t.__name__
    return {f.name: _TYPES.get(name(f.type), str) for f in fields(cls) if f.name not in skip}


def resolve_config(model_kind, raw):
    """Split raw pairs into (window, train, model) dicts with defaults materialized."""
    model_cls = {"socnn": SOCNNConfig, "cnn": CNNConfig, "var": None}[model_kind]
    model_types = {"ridge": float} if model_cls is None else \
        _field_types(model_cls, {"d", "d_I", "target_index", "M"})
    train_types = _field_types(TrainConfig, {"seed"})
    window, train, model = {"M": 60, "train_fraction": 0.8, "val_ratio": 0.25}, {}, {}
    unknown = []
    for k, v in raw.items():
        if k in WINDOW_KEYS:
            window[k] = _coerce(v, WINDOW_KEYS[k], k)
        elif k in train_types:
            train[k] = _coerce(v, train_types[k], k)
        elif k in model_types:
            model[k] = _coerce(v, model_types[k], k)
        else:
            unknown.append(k)
    if unknown:
        raise click.BadParameter(f"unknown config keys for --model {model_kind}: {unknown}",
                                 param_hint="--config")
    return window, train, model


# ----------------------------------------------------------------------------
# data helpers
# ----------------------------------------------------------------------------

def _load_frame(data_dir):
    try:
        return datagen.read_frame(data_dir)
    except OSError as exc:
        raise click.ClickException(f"cannot read frame in {data_dir}: {exc}") from exc


def _windows(frame, window, seed):
    return datagen.make_windows(frame, M=window["M"], seed=seed,
                                train_fraction=window["train_fraction"],
                                val_ratio=window["val_ratio"])


def _target_index(frame, windows):
    """Window channel holding each target's own value (x^I)."""
    _, proj = datagen.default_targets(frame)
    return [windows.input_columns.index(c) for c in proj]


def _value_channel(frame, windows):
    cols = frame.columns("value")
    return windows.input_columns.index(cols[0]) if cols else None


def _build(model_kind, frame, windows, window, model_cfg, seed):
    d = len(windows.input_columns)
    d_I = windows.Y.shape[1]
    rng = np.random.default_rng(seed)
    if model_kind == "socnn":
        cfg = SOCNNConfig(d=d, target_index=_target_index(frame, windows), M=window["M"], **model_cfg)
        return SOCNNModel(cfg, rng)
    if model_kind == "cnn":
        return CNNModel(CNNConfig(d=d, d_I=d_I, M=window["M"], **model_cfg), rng)
    raise ValueError(model_kind)


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

@click.group()
@click.option("--log-level", default="INFO", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"]))
def main(log_level):
    """SOCNN experiments: data generation, training and evaluation."""
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, log_level),
                        format="%(levelname)s %(name)s: %(message)s", force=True)


@main.command()
@click.option("--kind", type=click.Choice(["sync", "async"]), required=True)
@click.option("--k", "K", type=int, default=16, show_default=True, help="Number of noisy sources.")
@click.option("--allow-any-k", is_flag=True, help="Accept K outside {16, 64}.")
@click.option("--n", "N", type=click.IntRange(min=2), default=10_000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def generate(kind, K, allow_any_k, N, seed, out):
    """Simulate an artificial noisy-AR dataset."""
    if K not in (16, 64) and not allow_any_k:
        raise click.BadParameter(f"K must be 16 or 64 (got {K}); pass --allow-any-k to override",
                                 param_hint="--k")
    if K < 1:
        raise click.BadParameter("K must be positive", param_hint="--k")
    spec = datagen.GeneratorSpec(K=K, N=N, seed=seed)
    with _Run(out, "generate", {"kind": kind, **asdict(spec)}, {}, seed) as run:
        frame = (datagen.gen_asynchronous if kind == "async" else datagen.gen_synchronous)(spec)
        run.path("frame.csv")
        run.path("frame.json")
        datagen.write_frame(frame, run.out)
    _summary(rows=len(frame), width=frame.values.shape[1], name=frame.name, out=run.out)


@main.command("ingest")
@click.option("--uci", type=click.Path(exists=True, dir_okay=False), required=True,
              help="household_power_consumption.txt")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--error-budget", type=click.IntRange(min=0), default=100, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def ingest_cmd(uci, seed, error_budget, out):
    """Asynchronize the UCI household electricity file."""
    cfg = {"error_budget": error_budget}
    with _Run(out, "ingest", cfg, {"uci": os.path.abspath(uci)}, seed) as run:
        try:
            result = ingest_mod.ingest(uci, seed, error_budget)
        except ingest_mod.IngestError as exc:
            raise click.ClickException(str(exc)) from exc
        run.path("frame.csv")
        run.path("frame.json")
        datagen.write_frame(result.frame, run.out)
    _summary(rows=len(result.frame), kept_fraction=result.kept_fraction,
             permutation=",".join(map(str, result.permutation)), out=run.out)


@main.command()
@click.option("--model", "model_kind", type=click.Choice(["socnn", "cnn", "var"]), required=True)
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--config", "config_text", default=None, help="key=value file or inline list.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def train(model_kind, data, config_text, seed, out):
    """Train a model and save a checkpoint plus a run report."""
    window, train_cfg, model_cfg = resolve_config(model_kind, parse_config(config_text))
    frame = _load_frame(data)
    windows = _windows(frame, window, seed)
    tc = TrainConfig(**{**train_cfg, "seed": seed})
    if model_kind == "var":
        model_cfg = {"ridge": 1e-6, **model_cfg}
        model = None
    else:
        try:
            model = _build(model_kind, frame, windows, window, model_cfg, seed)
        except (TypeError, ValueError) as exc:
            raise click.ClickException(f"config/data mismatch: {exc}") from exc
        model_cfg = asdict(model.config)
    resolved = {"model": model_kind, "window": window, "train": asdict(tc), "model_config": model_cfg}
    extra = {"window": {**window, "seed": seed}, "frame": frame.name,
             "input_columns": windows.input_columns, "target_columns": windows.target_columns}

    with _Run(out, "train", resolved, {"data": os.path.abspath(data)}, seed) as run:
        ckpt = run.path("model.ckpt")
        report_path = run.path("report.json")
        if model_kind == "var":
            X, Y = windows.split("train")
            model = var_fit(X, Y, model_cfg["ridge"])
            report = {"model_kind": "var", "model_config": asdict(model.config), "seed": seed,
                      "test_mse": model.evaluate(*windows.split("test")).l2,
                      "val_loss": model.evaluate(*windows.split("val")).l2, "epochs": []}
        else:
            rep = run_training(model, windows, tc)
            run.manifest.data["train_wall_clock_s"] = rep.wall_clock_s
            report = rep.to_dict(include_timing=False)
        report["resolved_config"] = resolved
        report["checkpoint_path"] = "model.ckpt"
        checkpoint_save(model, ckpt, extra)
        with open(report_path, "w") as fh:
            json.dump(report, fh, sort_keys=True, indent=1)
            fh.write("\n")
    _summary(model=model_kind, test_mse=float(report["test_mse"]), epochs=len(report["epochs"]), out=run.out)


def _load_for_eval(checkpoint, data, seed):
    try:
        header, _ = read_checkpoint_header(checkpoint)
        model = checkpoint_load(checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise click.ClickException(f"cannot load checkpoint {checkpoint}: {exc}") from exc
    window = {"M": 60, "train_fraction": 0.8, "val_ratio": 0.25, "seed": 0, **header.get("extra", {}).get("window", {})}
    if seed is not None:
        window["seed"] = seed
    frame = _load_frame(data)
    windows = _windows(frame, window, window["seed"])
    expected = header.get("extra", {}).get("input_columns")
    if expected is not None and expected != windows.input_columns:
        raise click.ClickException("checkpoint was trained on a frame with different columns")
    d = getattr(model.config, "d", None)
    if d is not None and d != len(windows.input_columns):
        raise click.ClickException(f"checkpoint expects d={d}, data has {len(windows.input_columns)} inputs")
    return model, frame, windows, window


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--seed", type=int, default=None, help="Split seed (default: the training seed).")
@click.option("--activations", type=click.IntRange(min=0), default=0,
              help="Export significance/offset activations for this many test samples.")
@click.option("--out", type=click.Path(file_okay=False), default=None)
def eval_cmd(checkpoint, data, seed, activations, out):
    """Evaluate a checkpoint on the test split."""
    model, frame, windows, window = _load_for_eval(checkpoint, data, seed)
    inputs = {"checkpoint": os.path.abspath(checkpoint), "data": os.path.abspath(data)}
    with _Run(out, "eval", {"window": window, "activations": activations}, inputs, window["seed"]) as run:
        metrics = {}
        for tag in ("train", "val", "test"):
            X, Y = windows.split(tag)
            if len(X):
                mean, sem = evaluation.test_mse(model, X, Y)
                metrics[tag] = {"mse": mean, "sem": sem, "n": int(len(X))}
        with open(run.path("metrics.json"), "w") as fh:
            json.dump(metrics, fh, sort_keys=True, indent=1)
            fh.write("\n")
        if activations:
            if not isinstance(model, SOCNNModel):
                raise click.ClickException("--activations needs a SOCNN checkpoint")
            X, _ = windows.split("test")
            ids = np.flatnonzero(windows.tags == "test")[:activations]
            evaluation.export_activations(model, X[:activations], run.path("activations.csv"), ids)
    _summary(test_mse=metrics["test"]["mse"], test_sem=metrics["test"]["sem"], out=run.out)


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for window selection and noise.")
@click.option("--split-seed", type=int, default=None, help="Split seed (default: the training seed).")
@click.option("--n-obs", type=click.IntRange(min=2), default=6000, show_default=True)
@click.option("--n-gammas", type=click.IntRange(min=2), default=128, show_default=True)
@click.option("--noise-column", type=int, default=None, help="Window channel to perturb (default: value).")
@click.option("--out", type=click.Path(file_okay=False), default=None)
def robustness(checkpoint, data, seed, split_seed, n_obs, n_gammas, noise_column, out):
    """Sweep additive noise over selected past values and record the test MSE."""
    model, frame, windows, window = _load_for_eval(checkpoint, data, split_seed)
    column = noise_column if noise_column is not None else _value_channel(frame, windows)
    if column is None:
        raise click.ClickException("frame has no value column; pass --noise-column")
    spec = evaluation.RobustnessSpec(n_obs=n_obs, n_gammas=n_gammas, noise_column=column, seed=seed)
    inputs = {"checkpoint": os.path.abspath(checkpoint), "data": os.path.abspath(data)}
    with _Run(out, "robustness", {"window": window, **asdict(spec)}, inputs, seed) as run:
        res = evaluation.robustness_curve(model, windows, spec)
        side = {"spec": res.spec, "sigma": res.sigma, "n_train_origin": res.n_train_origin,
                "n_test_origin": res.n_test_origin, "fallback_all_available": res.fallback,
                "model": model.kind, "split_seed": window["seed"]}
        run.path("robustness.csv")
        run.path("robustness.json")
        evaluation.write_table(os.path.join(run.out, "robustness.csv"), res.columns, res.rows, side)
    _summary(rows=len(res.rows), sigma=res.sigma, fallback=res.fallback, out=run.out)


@main.command()
@click.option("--a", type=float, required=True)
@click.option("--b", type=float, required=True)
@click.option("--kmax", type=click.IntRange(min=2), default=10, show_default=True)
@click.option("--n", "n_samples", type=click.IntRange(min=100), default=1_000_000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--intercept", is_flag=True, help="Include an intercept in the OLS fit.")
@click.option("--tol", type=float, default=0.02, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def lemma(a, b, kmax, n_samples, seed, intercept, tol, out):
    """Compare the AR(2) lemma recursion against Monte-Carlo OLS."""
    if not evaluation.ar2_stationary(a, b):
        raise click.BadParameter(f"(a, b) = ({a}, {b}) is not a stationary AR(2)", param_hint="--a/--b")
    cfg = {"a": a, "b": b, "kmax": kmax, "n": n_samples, "intercept": intercept, "tol": tol}
    with _Run(out, "lemma", cfg, {}, seed) as run:
        try:
            rows = evaluation.lemma_verify(a, b, kmax, n_samples, np.random.default_rng(seed), intercept)
        except evaluation.DegenerateLemmaError as exc:
            raise click.ClickException(str(exc)) from exc
        max_a = max(r["abs_err_a"] for r in rows)
        max_b = max(r["abs_err_b"] for r in rows)
        run.path("lemma.csv")
        run.path("lemma.json")
        evaluation.write_table(os.path.join(run.out, "lemma.csv"), evaluation.LEMMA_COLUMNS, rows,
                               {**cfg, "seed": seed, "max_abs_err_a": max_a, "max_abs_err_b": max_b,
                                "within_tol": max(max_a, max_b) <= tol})
    _summary(max_abs_err_a=max_a, max_abs_err_b=max_b, within_tol=max(max_a, max_b) <= tol, out=run.out)


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from exc


@main.command("alpha-grid")
@click.option("--data", type=click.Path(exists=True, file_okay=False), multiple=True, required=True,
              help="Frame directory; repeat for several datasets.")
@click.option("--alphas", default="0,0.01,0.1", show_default=True)
@click.option("--seeds", default="0", show_default=True, help="Comma-separated training seeds.")
@click.option("--config", "config_text", default=None, help="key=value file or inline list.")
@click.option("--split-seed", type=int, default=0, show_default=True)
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def alpha_grid_cmd(data, alphas, seeds, config_text, split_seed, jobs, out):
    """Train one SOCNN per (alpha, seed) and tabulate the test MSE."""
    alphas = _float_list(alphas)
    seeds = [int(s) for s in _float_list(seeds)]
    window, train_cfg, model_cfg = resolve_config("socnn", parse_config(config_text))
    model_cfg.pop("alpha", None)
    datasets = {}
    for d in data:
        frame = _load_frame(d)
        windows = _windows(frame, window, split_seed)
        name = frame.name or os.path.basename(os.path.normpath(d))
        datasets[name] = (windows, {"d": len(windows.input_columns), "M": window["M"],
                                    "target_index": _target_index(frame, windows)})
    tc = TrainConfig(**train_cfg)
    resolved = {"alphas": alphas, "seeds": seeds, "window": window, "split_seed": split_seed,
                "train": asdict(tc), "model_config": model_cfg, "jobs": jobs}
    with _Run(out, "alpha-grid", resolved, {"data": [os.path.abspath(d) for d in data]}, split_seed) as run:
        res = evaluation.alpha_grid(datasets, alphas, seeds, model_cfg, tc, jobs=jobs)
        table = run.path("alpha_grid.csv")
        run.path("alpha_grid.json")
        evaluation.write_table(table, res.columns, res.rows,
                               {"reference": {n: {str(a): v for a, v in r.items()} for n, r in res.reference.items()},
                                "ordering_reproduced": res.ordering_reproduced, **resolved})
        evaluation.write_table(run.path("alpha_grid_detail.csv"),
                               ["dataset", "alpha", "seed", "test_mse", "status"], res.detail)
    failed = sum(d["status"] != "ok" for d in res.detail)
    _summary(rows=len(res.rows), cells=len(res.detail), failed=failed,
             ordering_reproduced=json.dumps(res.ordering_reproduced, separators=(",", ":")), out=run.out)
    if failed:
        sys.exit(1)


if __name__ == "__main__":
    main()
