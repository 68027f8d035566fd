"""Artificial noisy-AR datasets, frame I/O and supervised windowing."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import lfilter

ROLES = ("source-value", "value", "duration", "indicator", "time", "date", "target")
STATIONARITY_MARGIN = 1e-6


class GenerationError(RuntimeError):
    pass


@dataclass
class GeneratorSpec:
    K: int = 16
    N: int = 10_000
    ar_order: int = 10
    ar_weights: list | None = None  # None: drawn from the seed
    bernoulli_params: list | None = None  # None: U[0.1, 0.9] per source
    duration_rate: float = 1.0
    source_decay: float | None = None  # None: 0.9 for K <= 16, else 0.97
    seed: int = 0

    def __post_init__(self):
        if self.K < 1 or self.N < 1 or self.ar_order < 1:
            raise ValueError("K, N and ar_order must be positive")
        if self.source_decay is None:
            self.source_decay = 0.9 if self.K <= 16 else 0.97
        if self.source_decay <= 0 or self.duration_rate <= 0:
            raise ValueError("source_decay and duration_rate must be positive")

    def noise_scales(self):
        k = np.arange(1, self.K + 1)
        return 2.0 ** -(k // 8)

    def noise_kinds(self):
        return np.arange(1, self.K + 1) % 4

    def source_probs(self):
        w = self.source_decay ** np.arange(1, self.K + 1, dtype=float)
        return w / w.sum()

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=1)


@dataclass
class SeriesFrame:
    values: np.ndarray  # (N, D)
    column_roles: list
    column_names: list
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.column_roles):
            raise ValueError("values must be (N, D) with one role per column")
        bad = [r for r in self.column_roles if r not in ROLES]
        if bad:
            raise ValueError(f"unknown column roles {bad}")

    def columns(self, role):
        return [i for i, r in enumerate(self.column_roles) if r == role]

    def input_columns(self):
        return [i for i, r in enumerate(self.column_roles) if r != "target"]

    def __len__(self):
        return len(self.values)


# ----------------------------------------------------------------------------
# base process and noise
# ----------------------------------------------------------------------------

def companion_radius(phi):
    phi = np.asarray(phi, dtype=float)
    p = len(phi)
    C = np.zeros((p, p))
    C[0] = phi
    C[1:, :-1] = np.eye(p - 1)
    return float(np.abs(np.linalg.eigvals(C)).max())


def draw_ar_weights(order, rng, max_attempts=100):
    """Uniform(-1, 1) weights shrunk by 0.95 per attempt until stationary."""
    phi = rng.uniform(-1.0, 1.0, size=order)
    for _ in range(max_attempts):
        if companion_radius(phi) < 1.0 - STATIONARITY_MARGIN:
            return phi
        phi = phi * 0.95
    raise GenerationError(f"could not reach stationarity in {max_attempts} rescalings")


def gen_base_ar(spec: GeneratorSpec, rng, length=None):
    """Stationary AR(nu) path with N(0,1) innovations after a 10*nu burn-in.

    Returns ``(x, phi)``.
    """
    phi = np.asarray(spec.ar_weights, dtype=float) if spec.ar_weights is not None \
        else draw_ar_weights(spec.ar_order, rng)
    if len(phi) != spec.ar_order:
        raise ValueError("ar_weights length must equal ar_order")
    if companion_radius(phi) >= 1.0 - STATIONARITY_MARGIN:
        raise GenerationError("AR weights are not stationary")
    length = spec.N if length is None else length
    burn = 10 * spec.ar_order
    eta = rng.standard_normal(length + burn)
    x = lfilter([1.0], np.concatenate([[1.0], -phi]), eta)
    return x[burn:], phi


def apply_noise(x, kind, c, p, rng):
    """Noise function eps_kind(x, c, p); works elementwise on arrays."""
    x = np.asarray(x, dtype=float)
    if kind == 0:
        return x + c * (2.0 * (rng.random(x.shape) < p) - 1.0)
    if kind == 1:
        return x * (1.0 + c * (2.0 * (rng.random(x.shape) < p) - 1.0))
    if kind == 2:
        return x + c * rng.standard_normal(x.shape)
    if kind == 3:
        return x * (1.0 + c * rng.standard_normal(x.shape))
    raise ValueError(f"noise kind must be 0..3, got {kind}")


def event_times(spec, rng):
    """T(t) = sum_{s<=t} ceil(N_s + 1), N_s ~ Exp(rate)."""
    gaps = np.ceil(rng.exponential(1.0 / spec.duration_rate, size=spec.N) + 1.0).astype(np.int64)
    return np.cumsum(gaps)


@dataclass
class _Simulation:
    phi: np.ndarray
    times: np.ndarray
    signal: np.ndarray  # x at T(t)
    copies: np.ndarray  # (N, K) noisy copies
    sources: np.ndarray  # I(t), 1-based
    p: np.ndarray


def _simulate(spec: GeneratorSpec) -> _Simulation:
    ss = np.random.SeedSequence(spec.seed)
    r_ar, r_p, r_t, r_src, r_noise = (np.random.default_rng(s) for s in ss.spawn(5))
    times = event_times(spec, r_t)
    x, phi = gen_base_ar(spec, r_ar, length=int(times[-1]) + 1)
    signal = x[times]
    p = np.asarray(spec.bernoulli_params, dtype=float) if spec.bernoulli_params is not None \
        else r_p.uniform(0.1, 0.9, size=spec.K)
    if len(p) != spec.K or np.any((p <= 0) | (p >= 1)):
        raise ValueError("bernoulli_params must hold K values in (0, 1)")
    scales, kinds = spec.noise_scales(), spec.noise_kinds()
    copies = np.empty((spec.N, spec.K))
    for j in range(spec.K):
        copies[:, j] = apply_noise(signal, kinds[j], scales[j], p[j], r_noise)
    sources = r_src.choice(spec.K, size=spec.N, p=spec.source_probs()) + 1
    return _Simulation(phi, times, signal, copies, sources, p)


def _durations(times):
    dur = np.zeros(len(times))
    dur[1:] = np.diff(times)
    return dur


def _meta(spec, sim, kind):
    return {"kind": kind, "spec": asdict(spec), "ar_weights": sim.phi.tolist(),
            "bernoulli_params": sim.p.tolist()}


def gen_synchronous(spec: GeneratorSpec) -> SeriesFrame:
    """K noisy copies observed at the event times, plus the duration column."""
    sim = _simulate(spec)
    values = np.column_stack([sim.copies, _durations(sim.times)])
    roles = ["source-value"] * spec.K + ["duration"]
    names = [f"source_{k}" for k in range(1, spec.K + 1)] + ["duration"]
    return SeriesFrame(values, roles, names, f"sync{spec.K}", _meta(spec, sim, "sync"))


def gen_asynchronous(spec: GeneratorSpec) -> SeriesFrame:
    """One-hot source indicator, the chosen source's value, and the duration."""
    sim = _simulate(spec)
    onehot = np.zeros((spec.N, spec.K))
    onehot[np.arange(spec.N), sim.sources - 1] = 1.0
    value = sim.copies[np.arange(spec.N), sim.sources - 1]
    values = np.column_stack([onehot, value, _durations(sim.times)])
    roles = ["indicator"] * spec.K + ["value", "duration"]
    names = [f"is_source_{k}" for k in range(1, spec.K + 1)] + ["value", "duration"]
    return SeriesFrame(values, roles, names, f"async{spec.K}", _meta(spec, sim, "async"))


# ----------------------------------------------------------------------------
# frame I/O
# ----------------------------------------------------------------------------

def write_frame(frame: SeriesFrame, directory, stem="frame"):
    """Write ``<stem>.csv`` (header ``role:name``) and a ``<stem>.json`` sidecar."""
    os.makedirs(directory, exist_ok=True)
    csv_path = os.path.join(directory, f"{stem}.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"{r}:{n}" for r, n in zip(frame.column_roles, frame.column_names)])
        for row in frame.values:
            w.writerow([repr(float(v)) for v in row])
    side = {"name": frame.name, **frame.meta}
    with open(os.path.join(directory, f"{stem}.json"), "w") as fh:
        json.dump(side, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return csv_path


def read_frame(directory, stem="frame") -> SeriesFrame:
    csv_path = os.path.join(directory, f"{stem}.csv")
    with open(csv_path, newline="") as fh:
        header = next(csv.reader(fh))
    roles, names = zip(*(h.split(":", 1) for h in header))
    values = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    side_path = os.path.join(directory, f"{stem}.json")
    meta = {}
    if os.path.exists(side_path):
        with open(side_path) as fh:
            meta = json.load(fh)
    name = meta.pop("name", "")
    return SeriesFrame(values, list(roles), list(names), name, meta)


# ----------------------------------------------------------------------------
# windowing
# ----------------------------------------------------------------------------

@dataclass
class WindowSample:
    window: np.ndarray  # (M, D)
    target: np.ndarray
    origin_index: int
    split_tag: str


@dataclass
class WindowSet:
    """Stacked supervised windows, channels-first: X is (n, D, M)."""

    X: np.ndarray
    Y: np.ndarray
    origin: np.ndarray
    tags: np.ndarray
    input_columns: list
    target_columns: list
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None
    target_mean: np.ndarray | None = None
    target_std: np.ndarray | None = None

    def __len__(self):
        return len(self.X)

    def split(self, tag):
        m = self.tags == tag
        return self.X[m], self.Y[m]

    def samples(self):
        for i in range(len(self.X)):
            yield WindowSample(self.X[i].T, self.Y[i], int(self.origin[i]), str(self.tags[i]))


def default_targets(frame: SeriesFrame):
    """Target columns and, per target, the input column carrying its own value."""
    if frame.columns("target"):
        tgt = frame.columns("target")
        proj = frame.columns("value") * len(tgt)
        return tgt, proj
    if frame.columns("indicator"):
        v = frame.columns("value")
        return v, v
    src = frame.columns("source-value")
    return src, src


def make_windows(frame: SeriesFrame, M=60, target_columns=None, seed=0,
                 train_fraction=0.8, val_ratio=0.25, standardize=True) -> WindowSet:
    """One sample per admissible target row ``n``; its window is rows ``n-M .. n-1``.

    Row 0 is never part of a window (its duration has no predecessor), so the
    first target row is ``M + 1``. Target rows below ``floor(train_fraction*N)``
    are shuffled into train/val (val share ``val_ratio``); the rest are test.
    """
    N = len(frame)
    if N <= M + 1:
        raise ValueError(f"frame of length {N} too short for M={M}")
    if target_columns is None:
        target_columns, _ = default_targets(frame)
    inputs = frame.input_columns()
    values = frame.values
    rows = np.arange(M + 1, N)
    boundary = int(math.floor(train_fraction * N))
    tags = np.where(rows < boundary, "val", "test").astype("<U5")
    pre = np.flatnonzero(rows < boundary)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pre))
    n_train = int(round(len(pre) * (1.0 - val_ratio)))
    tags[pre[order[:n_train]]] = "train"

    feat = values[:, inputs].copy()
    targ = values[:, target_columns].copy()
    f_mean = f_std = t_mean = t_std = None
    if standardize:
        train_rows = rows[tags == "train"]
        scale_cols = [j for j, c in enumerate(inputs)
                      if frame.column_roles[c] not in ("indicator",)]
        f_mean = np.zeros(len(inputs))
        f_std = np.ones(len(inputs))
        ref = feat[train_rows] if len(train_rows) else feat
        f_mean[scale_cols] = ref[:, scale_cols].mean(axis=0)
        sd = ref[:, scale_cols].std(axis=0)
        f_std[scale_cols] = np.where(sd > 0, sd, 1.0)
        feat = (feat - f_mean) / f_std
        # a target shared with an input column uses that column's statistics
        t_mean = np.empty(len(target_columns))
        t_std = np.empty(len(target_columns))
        tref = targ[train_rows] if len(train_rows) else targ
        for j, c in enumerate(target_columns):
            if c in inputs:
                t_mean[j], t_std[j] = f_mean[inputs.index(c)], f_std[inputs.index(c)]
            else:
                t_mean[j] = tref[:, j].mean()
                s = tref[:, j].std()
                t_std[j] = s if s > 0 else 1.0
        targ = (targ - t_mean) / t_std

    idx = rows[:, None] - M + np.arange(M)[None, :]  # (n, M), oldest first
    X = np.ascontiguousarray(feat[idx].transpose(0, 2, 1))
    Y = np.ascontiguousarray(targ[rows])
    return WindowSet(X, Y, rows, tags, list(inputs), list(target_columns),
                     f_mean, f_std, t_mean, t_std)
