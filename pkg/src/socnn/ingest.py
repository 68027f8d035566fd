"""UCI household electricity parsing and asynchronization.

The raw file is one row per minute with seven measurements. Asynchronization
keeps a fixed 10-of-25 minute schedule and, at each kept minute, reveals a
single randomly chosen feature.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from .datagen import SeriesFrame

log = logging.getLogger(__name__)

FEATURES = (
    "global_active_power",
    "global_reactive_power",
    "voltage",
    "global_intensity",
    "sub_metering_1",
    "sub_metering_2",
    "sub_metering_3",
)
N_FEATURES = len(FEATURES)
KEEP_RESIDUES = (0, 1, 3, 6, 13, 15, 17, 21, 22, 24)
CYCLE = 25
WEIGHT_BASE = 1.5


class IngestError(ValueError):
    pass


@dataclass
class ParseStats:
    rows_read: int = 0
    values_repaired: int = 0
    rows_dropped_leading: int = 0
    gap_minutes_filled: int = 0
    malformed_lines: list = field(default_factory=list)

    def to_dict(self):
        return {
            "rows_read": self.rows_read,
            "values_repaired": self.values_repaired,
            "rows_dropped_leading": self.rows_dropped_leading,
            "gap_minutes_filled": self.gap_minutes_filled,
            "malformed_lines": len(self.malformed_lines),
            "first_malformed": self.malformed_lines[:10],
        }


@dataclass
class ElectricityData:
    """Repaired minute grid: row ``n`` is ``n`` minutes after ``start``."""

    start: datetime
    features: np.ndarray  # (n_minutes, 7)
    filled: np.ndarray  # bool, True where the minute was absent from the file

    @property
    def minutes(self):
        return np.arange(len(self.features))

    def __len__(self):
        return len(self.features)


def _parse_line(line):
    parts = line.rstrip("\r\n").split(";")
    if len(parts) != 2 + N_FEATURES:
        raise ValueError(f"expected {2 + N_FEATURES} fields, got {len(parts)}")
    stamp = datetime.strptime(f"{parts[0]} {parts[1]}", "%d/%m/%Y %H:%M:%S")
    vals = [np.nan if p.strip() in ("?", "") else float(p) for p in parts[2:]]
    return stamp, vals


def parse_uci(path, error_budget=100):
    """Parse the semicolon-separated UCI file into a gap-free minute grid.

    ``?`` fields are forward-filled from the previous row, rows before the
    first complete observation are dropped, and minutes missing from the
    file are filled with the preceding row. Returns ``(data, stats)``.
    Malformed lines are skipped and reported; more than ``error_budget`` of
    them raises ``IngestError``.
    """
    stats = ParseStats()
    stamps, rows = [], []
    try:
        fh = open(path, encoding="utf-8", errors="replace")
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    with fh:
        header = fh.readline()
        if not header:
            raise IngestError(f"{path}: empty file")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                stamp, vals = _parse_line(line)
                if stamps and stamp <= stamps[-1]:
                    raise ValueError("timestamp not after previous row")
            except ValueError as exc:
                stats.malformed_lines.append(lineno)
                log.warning("%s:%d: skipped malformed line (%s)", path, lineno, exc)
                if len(stats.malformed_lines) > error_budget:
                    raise IngestError(
                        f"{path}: more than {error_budget} malformed lines (last at line {lineno})"
                    ) from exc
                continue
            stamps.append(stamp)
            rows.append(vals)
    stats.rows_read = len(rows)
    if not rows:
        raise IngestError(f"{path}: no data rows")

    raw = np.asarray(rows, dtype=np.float64)
    complete = np.flatnonzero(~np.isnan(raw).any(axis=1))
    if len(complete) == 0:
        raise IngestError(f"{path}: no row has all {N_FEATURES} features")
    first = int(complete[0])
    stats.rows_dropped_leading = first
    raw, stamps = raw[first:], stamps[first:]
    stats.values_repaired = int(np.isnan(raw).sum())
    raw = _forward_fill(raw)

    start = stamps[0]
    offsets = np.array([(s - start) // timedelta(minutes=1) for s in stamps], dtype=np.int64)
    n = int(offsets[-1]) + 1
    # each grid minute takes the latest file row at or before it
    src = np.searchsorted(offsets, np.arange(n), side="right") - 1
    filled = np.ones(n, dtype=bool)
    filled[offsets] = False
    stats.gap_minutes_filled = int(filled.sum())
    return ElectricityData(start, raw[src], filled), stats


def _forward_fill(a):
    idx = np.where(np.isnan(a), 0, np.arange(len(a))[:, None])
    np.maximum.accumulate(idx, axis=0, out=idx)
    return a[idx, np.arange(a.shape[1])]


def subsample_schedule(n_rows):
    """Indices ``n < n_rows`` with ``n mod 25`` in the fixed keep set."""
    n_rows = n_rows if isinstance(n_rows, (int, np.integer)) else len(n_rows)
    idx = np.arange(n_rows)
    return idx[np.isin(idx % CYCLE, KEEP_RESIDUES)]


def schedule_durations(kept):
    """Minutes since the previous kept index; the first row continues the cycle."""
    kept = np.asarray(kept)
    dur = np.empty(len(kept), dtype=np.int64)
    if len(kept):
        dur[1:] = np.diff(kept)
        # the kept index preceding the first one, one cycle back
        prev = max(k for k in KEEP_RESIDUES if k < kept[0] % CYCLE) if kept[0] % CYCLE else KEEP_RESIDUES[-1] - CYCLE
        dur[0] = kept[0] % CYCLE - prev
    return dur


def feature_weights(permutation):
    """Sampling probability per feature: feature ``j`` gets ``1.5**permutation[j]``."""
    perm = np.asarray(permutation)
    if sorted(perm.tolist()) != list(range(N_FEATURES)):
        raise ValueError(f"permutation must reorder 0..{N_FEATURES - 1}, got {perm.tolist()}")
    w = WEIGHT_BASE ** perm.astype(float)
    return w / w.sum()


@dataclass
class AsyncElectricity:
    frame: SeriesFrame
    permutation: list
    kept_fraction: float
    stats: dict


def sample_features(data: ElectricityData, rng, permutation=None):
    """Asynchronize the kept rows of ``data``.

    The weight permutation is drawn once from ``rng`` unless ``permutation``
    forces it. Output columns: minute-of-day/1440, weekday/7, seven feature
    indicators, the revealed value, the duration, and the seven raw features
    of the kept row as targets.
    """
    kept = subsample_schedule(len(data))
    if permutation is None:
        permutation = rng.permutation(N_FEATURES)
    probs = feature_weights(permutation)
    chosen = rng.choice(N_FEATURES, size=len(kept), p=probs)

    feats = data.features[kept]
    stamps = [data.start + timedelta(minutes=int(m)) for m in kept]
    tod = np.array([(s.hour * 60 + s.minute) / 1440.0 for s in stamps])
    dow = np.array([s.weekday() / 7.0 for s in stamps])
    onehot = np.zeros((len(kept), N_FEATURES))
    onehot[np.arange(len(kept)), chosen] = 1.0
    value = feats[np.arange(len(kept)), chosen]
    dur = schedule_durations(kept).astype(float)

    values = np.column_stack([tod, dow, onehot, value, dur, feats])
    roles = ["time", "date"] + ["indicator"] * N_FEATURES + ["value", "duration"] + ["target"] * N_FEATURES
    names = (["minute_of_day", "weekday"] + [f"is_{f}" for f in FEATURES]
             + ["value", "duration"] + [f"target_{f}" for f in FEATURES])
    across_gaps = int(data.filled[kept].sum())
    meta = {
        "kind": "electricity",
        "permutation": [int(p) for p in permutation],
        "feature_probs": probs.tolist(),
        "start": data.start.isoformat(),
        "kept_rows": int(len(kept)),
        "kept_rows_in_filled_gaps": across_gaps,
    }
    frame = SeriesFrame(values, roles, names, "electricity", meta)
    frac = len(kept) / len(data) if len(data) else 0.0
    return AsyncElectricity(frame, meta["permutation"], frac, meta)


def ingest(path, seed, error_budget=100, permutation=None):
    """Parse, subsample and sample features; the frame meta carries the parse stats."""
    data, stats = parse_uci(path, error_budget)
    out = sample_features(data, np.random.default_rng(seed), permutation)
    out.frame.meta.update({"seed": int(seed), "parse": stats.to_dict(), "kept_fraction": out.kept_fraction})
    log.info("ingest: %s", json.dumps(stats.to_dict()))
    return out
