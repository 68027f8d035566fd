"""Test metrics, the robustness sweep, the AR(2) lemma check, the alpha grid
and activation export."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import lfilter

from .models import SOCNNConfig, SOCNNModel
from .train import TrainConfig, run_training

log = logging.getLogger(__name__)

# published alpha-grid test MSEs, keyed by dataset then alpha
REFERENCE_ALPHA_GRID = {
    "async16": {0.0: 0.0284, 0.01: 0.0253, 0.1: 0.0172},
    "async64": {0.0: 0.0624, 0.01: 0.0434, 0.1: 0.0323},
}


# ----------------------------------------------------------------------------
# tables
# ----------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def write_table(path, columns, rows, sidecar=None):
    """CSV with full-precision floats; ``sidecar`` goes to the ``.json`` twin."""
    path = os.fspath(path)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            vals = [row[c] for c in columns] if isinstance(row, dict) else row
            w.writerow([_fmt(v) for v in vals])
    if sidecar is not None:
        with open(os.path.splitext(path)[0] + ".json", "w") as fh:
            json.dump(sidecar, fh, sort_keys=True, indent=1, default=_json_default)
            fh.write("\n")
    return path


def read_table(path):
    """Read a table written by ``write_table``; numeric cells become floats."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        columns = next(reader)
        rows = []
        for raw in reader:
            row = {}
            for c, v in zip(columns, raw):
                try:
                    row[c] = float(v)
                except ValueError:
                    row[c] = v
            rows.append(row)
    return columns, rows


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# ----------------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------------

def predict(model, X, batch_size=1024):
    out = [model.predict(X[lo:lo + batch_size]) for lo in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros((0,))


def test_mse(model, X, Y):
    """Mean over samples of the squared error summed over outputs, with its standard error."""
    if len(X) == 0:
        raise ValueError("empty test set")
    err = ((predict(model, X) - Y) ** 2).sum(axis=1)
    sem = float(err.std(ddof=1) / math.sqrt(len(err))) if len(err) > 1 else 0.0
    return float(err.mean()), sem


def aggregate_seeds(values):
    """Mean and standard error of per-seed MSEs."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("no values to aggregate")
    sem = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), sem


# ----------------------------------------------------------------------------
# robustness sweep
# ----------------------------------------------------------------------------

@dataclass
class RobustnessSpec:
    n_obs: int = 6000
    n_gammas: int = 128
    gamma_range_sigmas: float = 6.0
    noise_lags: tuple | None = None  # counted back from the newest step; None: every 5th lag
    noise_column: int | None = None  # window channel; None: the value column
    seed: int = 0

    def lags(self, M):
        return tuple(self.noise_lags) if self.noise_lags is not None else tuple(range(0, M, 5))

    def gammas(self, sigma):
        r = self.gamma_range_sigmas * sigma
        return np.linspace(-r, r, self.n_gammas)


def noise_mask(M, d, column, lags):
    """Boolean (d, M) mask of the perturbed window entries."""
    lags = np.asarray(lags)
    if np.any(lags < 0) or np.any(lags >= M):
        raise ValueError(f"noise lags must lie in 0..{M - 1}")
    mask = np.zeros((d, M), dtype=bool)
    mask[column, M - 1 - lags] = True
    return mask


def target_diff_sigma(windows):
    """Std of first differences of the target series over the training portion."""
    pre = windows.tags != "test"
    order = np.argsort(windows.origin[pre])
    series = windows.Y[pre][order]
    if len(series) < 3:
        raise ValueError("training portion too short to estimate sigma")
    return float(np.diff(series, axis=0).std(axis=0).mean())


@dataclass
class RobustnessResult:
    rows: list
    columns: list
    sigma: float
    n_train_origin: int
    n_test_origin: int
    fallback: bool
    spec: dict


def robustness_curve(model, windows, spec: RobustnessSpec, value_channel=None, batch_size=1024):
    """Sweep additive noise ``gamma * xi_n`` on selected value-column lags.

    ``value_channel`` locates the value column inside the window (defaults
    to ``spec.noise_column``). Targets are never perturbed.
    """
    column = spec.noise_column if spec.noise_column is not None else value_channel
    if column is None:
        raise ValueError("noise column is not set")
    rng = np.random.default_rng(spec.seed)
    half = spec.n_obs // 2
    picks, fallback = {}, False
    for tag in ("train", "test"):
        pool = np.flatnonzero(windows.tags == tag)
        if len(pool) < half:
            fallback = True
            log.warning("robustness: only %d %s-origin windows (< %d); using all", len(pool), tag, half)
            picks[tag] = pool
        else:
            picks[tag] = np.sort(rng.choice(pool, size=half, replace=False))
    sel = np.concatenate([picks["train"], picks["test"]])
    is_test = np.concatenate([np.zeros(len(picks["train"]), bool), np.ones(len(picks["test"]), bool)])
    X, Y = windows.X[sel], windows.Y[sel]
    n, d, M = X.shape
    lags = spec.lags(M)
    mask = noise_mask(M, d, column, lags)
    xi = rng.uniform(0.0, 1.0, size=n)
    sigma = target_diff_sigma(windows)
    is_socnn = isinstance(model, SOCNNModel)
    lag_pos = M - 1 - np.asarray(lags)

    columns = ["gamma", "mse_train_origin", "mse_test_origin"]
    if is_socnn:
        columns += ["significance_noised", "abs_offset_noised"]
    rows = []
    for gamma in spec.gammas(sigma):
        Xn = X + (xi[:, None, None] * gamma) * mask[None]
        sq = np.empty(n)
        sig_tot = off_abs = 0.0
        for lo in range(0, n, batch_size):
            xb = Xn[lo:lo + batch_size]
            if is_socnn:
                y_hat, s, off = model.forward(xb)
                sig_tot += s[:, :, lag_pos].sum()
                off_abs += np.abs(off[:, :, lag_pos]).sum()
            else:
                y_hat = model.predict(xb)
            sq[lo:lo + batch_size] = ((y_hat - Y[lo:lo + batch_size]) ** 2).sum(axis=1)
        row = {
            "gamma": float(gamma),
            "mse_train_origin": float(sq[~is_test].mean()) if (~is_test).any() else float("nan"),
            "mse_test_origin": float(sq[is_test].mean()) if is_test.any() else float("nan"),
        }
        if is_socnn:
            d_I = Y.shape[1]
            row["significance_noised"] = float(sig_tot / (n * d_I))
            row["abs_offset_noised"] = float(off_abs / (n * d_I * len(lag_pos)))
        rows.append(row)
    spec_d = asdict(spec)
    spec_d["noise_column"] = int(column)
    spec_d["noise_lags"] = list(lags)
    return RobustnessResult(rows, columns, sigma, len(picks["train"]), len(picks["test"]), fallback, spec_d)


# ----------------------------------------------------------------------------
# AR(2) lemma
# ----------------------------------------------------------------------------

class DegenerateLemmaError(ValueError):
    pass


@dataclass
class LemmaCoefficients:
    a: float
    b: float
    k: int
    w_k: float
    v_k: float
    a_k: float
    b_k: float


def lemma_coeffs(a, b, k):
    """Coefficients of X(t-1) and X(t-k) from the (w, v) recursion."""
    if k < 2:
        raise ValueError("k must be >= 2")
    w, v = 1.0, float(a)
    for _ in range(k - 2):
        w, v = -v, -(b * w + a * v)
    if w == 0.0:
        raise DegenerateLemmaError(f"w_{k} = 0 at (a, b) = ({a}, {b})")
    return LemmaCoefficients(float(a), float(b), k, w, v, v / w, b ** (k - 1) / w)


def ar2_stationary(a, b):
    return abs(b) < 1 and a + b < 1 and b - a < 1


def simulate_ar2(a, b, n, rng, burn=1000):
    """Zero-mean AR(2) with N(0,1) innovations; returns ``(x, eps)``."""
    if not ar2_stationary(a, b):
        raise ValueError(f"AR(2) weights ({a}, {b}) are not stationary")
    eps = rng.standard_normal(n + burn)
    x = lfilter([1.0], [1.0, -a, -b], eps)
    return x[burn:], eps[burn:]


def ar2_autocorr(a, b, max_lag):
    rho = np.empty(max_lag + 1)
    rho[0] = 1.0
    if max_lag >= 1:
        rho[1] = a / (1.0 - b)
    for h in range(2, max_lag + 1):
        rho[h] = a * rho[h - 1] + b * rho[h - 2]
    return rho


def projection_coeffs(a, b, k):
    """Population least-squares coefficients of X(t) on (X(t-1), X(t-k))."""
    rho = ar2_autocorr(a, b, k)
    G = np.array([[1.0, rho[k - 1]], [rho[k - 1], 1.0]])
    return np.linalg.solve(G, np.array([rho[1], rho[k]]))


def ols_pair(x, k, intercept=False):
    """OLS of X(t) on (X(t-1), X(t-k)); returns coefficients and standard errors."""
    y = x[k:]
    cols = [x[k - 1:-1], x[:-k]]
    if intercept:
        cols.append(np.ones_like(y))
    F = np.column_stack(cols)
    coef, *_ = np.linalg.lstsq(F, y, rcond=None)
    resid = y - F @ coef
    s2 = resid @ resid / (len(y) - F.shape[1])
    se = np.sqrt(np.diag(s2 * np.linalg.inv(F.T @ F)))
    return coef[:2], se[:2]


def lemma_verify(a, b, k_max, n_samples, rng, intercept=False):
    """Compare the recursion against OLS (and the exact projection) for k = 2..k_max."""
    x, _ = simulate_ar2(a, b, n_samples, rng)
    rows = []
    for k in range(2, k_max + 1):
        c = lemma_coeffs(a, b, k)
        (oa, ob), (sa, sb) = ols_pair(x, k, intercept)
        pa, pb = projection_coeffs(a, b, k)
        rows.append({
            "k": k, "a_k": c.a_k, "b_k": c.b_k,
            "ols_a_k": float(oa), "ols_b_k": float(ob),
            "abs_err_a": float(abs(c.a_k - oa)), "abs_err_b": float(abs(c.b_k - ob)),
            "se_a": float(sa), "se_b": float(sb),
            "proj_a_k": float(pa), "proj_b_k": float(pb),
        })
    return rows


LEMMA_COLUMNS = ["k", "a_k", "b_k", "ols_a_k", "ols_b_k", "abs_err_a", "abs_err_b",
                 "se_a", "se_b", "proj_a_k", "proj_b_k"]


# ----------------------------------------------------------------------------
# alpha grid
# ----------------------------------------------------------------------------

def socnn_trainer(windows, alpha, seed, base_config, train_config):
    """Train one SOCNN and return its test MSE."""
    cfg = SOCNNConfig(**{**base_config, "alpha": alpha})
    model = SOCNNModel(cfg, np.random.default_rng(seed))
    tc = TrainConfig(**{**asdict(train_config), "seed": seed})
    return run_training(model, windows, tc).test_mse


def _grid_cell(args):
    trainer, name, windows, alpha, seed, base_config, train_config = args
    try:
        return name, alpha, seed, float(trainer(windows, alpha, seed, base_config, train_config)), "ok"
    except Exception as exc:  # a failed cell is reported, the grid continues
        log.error("alpha grid cell %s alpha=%s seed=%s failed: %s", name, alpha, seed, exc)
        return name, alpha, seed, float("nan"), f"error: {type(exc).__name__}: {exc}"


@dataclass
class AlphaGridResult:
    columns: list
    rows: list
    detail: list
    reference: dict
    ordering_reproduced: dict = field(default_factory=dict)


def alpha_grid(datasets, alphas=(0.0, 0.01, 0.1), seeds=(0,), base_config=None,
               train_config=None, trainer=None, jobs=1):
    """Train one SOCNN per (dataset, alpha, seed) and tabulate mean test MSE.

    ``datasets`` maps a name (e.g. ``async16``) to a WindowSet and the
    SOCNN config fields it needs (``d``, ``target_index``, ``M``).
    """
    trainer = trainer or socnn_trainer
    train_config = train_config or TrainConfig()
    alphas = [float(a) for a in alphas]
    cells = []
    for name, (windows, ds_config) in datasets.items():
        cfg = {**(base_config or {}), **ds_config}
        cells += [(trainer, name, windows, a, int(s), cfg, train_config) for a in alphas for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_grid_cell, cells))
    else:
        results = [_grid_cell(c) for c in cells]

    detail = [{"dataset": n, "alpha": a, "seed": s, "test_mse": m, "status": st}
              for n, a, s, m, st in results]
    names = list(datasets)
    rows = []
    for a in alphas:
        row = {"alpha": a}
        for n in names:
            ok = [d["test_mse"] for d in detail
                  if d["dataset"] == n and d["alpha"] == a and d["status"] == "ok"]
            row[n] = float(np.mean(ok)) if ok else float("nan")
            row[f"{n}_seeds"] = len(ok)
        rows.append(row)
    columns = ["alpha"] + [c for n in names for c in (n, f"{n}_seeds")]

    reference = {n: REFERENCE_ALPHA_GRID[n] for n in names if n in REFERENCE_ALPHA_GRID}
    ordering = {}
    for n in names:
        ref = reference.get(n)
        ours = [r[n] for r in rows]
        if ref is None or any(a not in ref for a in alphas):
            ordering[n] = None
            continue
        ref_order = np.argsort([ref[a] for a in alphas], kind="stable").tolist()
        ordering[n] = bool(np.all(np.isfinite(ours))) and np.argsort(ours, kind="stable").tolist() == ref_order
    return AlphaGridResult(columns, rows, detail, reference, ordering)


# ----------------------------------------------------------------------------
# activations
# ----------------------------------------------------------------------------

ACTIVATION_COLUMNS = ["sample_id", "output_row", "lag_m", "significance", "offset"]


def activation_rows(model, X, sample_ids=None):
    if not isinstance(model, SOCNNModel):
        raise TypeError(f"activation export needs a SOCNN model, got {type(model).__name__}")
    _, sig, off = model.forward(X)
    ids = range(len(X)) if sample_ids is None else sample_ids
    M = X.shape[2]
    rows = []
    for b, sid in enumerate(ids):
        for i in range(sig.shape[1]):
            for m in range(1, M + 1):
                rows.append({"sample_id": int(sid), "output_row": i, "lag_m": m,
                             "significance": float(sig[b, i, M - m]),
                             "offset": float(off[b, i, M - m])})
    return rows


def export_activations(model, X, path, sample_ids=None):
    """Write per-lag significance and offset for each sample (lag 1 = newest)."""
    rows = activation_rows(model, X, sample_ids)
    return write_table(path, ACTIVATION_COLUMNS, rows)
