"""Percentile bounds and histogram time-in-bin feature extraction.

Features are cumulative from beginning-of-life: each value is the total
time (hours) the signal spent inside a percentile-bounded bin over
[0, window_end]. Sample i holds its value over [t_i, t_{i+1}); the first
sample is back-extended to t=0 and the last sample holds zero time, the
zero-order-hold reading of a BMS log.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import TelemetryLog, RptRecord, fmt_float, _read_csv
from .errors import (
    InsufficientData,
    InvalidSpec,
    UncoveredLabelPoint,
    WindowBeyondData,
)

BIN_LABELS = ("01", "12", "23", "34")

FEATURE_SETS: dict[str, list[str]] = {
    "V3": ["V12", "V23", "t"],
    "V5": ["V01", "V12", "V23", "V34", "t"],
    "I3": ["I12", "I23", "t"],
    "I5": ["I01", "I12", "I23", "I34", "t"],
    "IV17": [f"I{a}V{b}" for a in BIN_LABELS for b in BIN_LABELS] + ["t"],
}

SET_KINDS = tuple(FEATURE_SETS)


@dataclass(frozen=True)
class VariableBounds:
    """1st/33rd/67th/99th percentiles of one telemetry variable."""

    variable: str  # "voltage" | "current"
    p01: float
    p33: float
    p67: float
    p99: float

    def __post_init__(self):
        if self.variable not in ("voltage", "current"):
            raise InvalidSpec(f"unknown variable {self.variable!r}")
        if not (self.p01 <= self.p33 <= self.p67 <= self.p99):
            raise InvalidSpec("percentile bounds must be nondecreasing")

    def thresholds(self) -> np.ndarray:
        # binning uses p01/p33/p67; p99 is reported for reference only
        return np.array([self.p01, self.p33, self.p67], dtype=np.float64)

    def to_dict(self) -> dict:
        return {"variable": self.variable, "p01": self.p01, "p33": self.p33,
                "p67": self.p67, "p99": self.p99}

    @classmethod
    def from_dict(cls, d: dict) -> "VariableBounds":
        return cls(variable=d["variable"], p01=d["p01"], p33=d["p33"],
                   p67=d["p67"], p99=d["p99"])


@dataclass(frozen=True)
class FeatureVector:
    set_kind: str
    values: dict  # feature name -> hours, ordered per FEATURE_SETS
    calendar_time: float

    def __post_init__(self):
        if self.set_kind not in FEATURE_SETS:
            raise InvalidSpec(f"unknown set_kind {self.set_kind!r}")
        names = FEATURE_SETS[self.set_kind]
        if list(self.values) != names:
            raise InvalidSpec(f"feature names must be exactly {names}")
        if any(v < 0 for v in self.values.values()):
            raise InvalidSpec("time-spent features must be nonnegative")
        if self.values["t"] != self.calendar_time:
            raise InvalidSpec("calendar_time must equal the 't' entry")

    def as_array(self) -> np.ndarray:
        return np.array(list(self.values.values()), dtype=np.float64)


def _held_intervals(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ownership windows [start, end) per sample; first extends back to 0."""
    start = t.copy()
    start[0] = 0.0
    end = np.empty_like(t)
    end[:-1] = t[1:]
    end[-1] = t[-1]  # last sample owns zero time
    return start, end


def compute_bounds(logs: list[TelemetryLog], variable: str) -> VariableBounds:
    """Pooled time-weighted 1/33/67/99th percentiles of one variable.

    Each sample is weighted by its held interval so irregular sampling does
    not bias the bounds.
    """
    if variable not in ("voltage", "current"):
        raise InvalidSpec(f"unknown variable {variable!r}")
    if not logs:
        raise InsufficientData("no telemetry logs")
    total = sum(len(lg) for lg in logs)
    if total < 100:
        raise InsufficientData(f"need >= 100 pooled samples, got {total}")
    values = np.concatenate([getattr(lg, variable) for lg in logs])
    durations = []
    for lg in logs:
        start, end = _held_intervals(lg.t)
        durations.append(end - start)
    weights = np.concatenate(durations)
    order = np.argsort(values, kind="stable")
    values = values[order]
    weights = weights[order]
    cumw = np.cumsum(weights)
    total_w = cumw[-1]
    if total_w <= 0:
        raise InsufficientData("telemetry logs span zero time")
    out = []
    for p in (0.01, 0.33, 0.67, 0.99):
        idx = int(np.searchsorted(cumw, p * total_w, side="left"))
        out.append(float(values[min(idx, values.size - 1)]))
    return VariableBounds(variable=variable, p01=out[0], p33=out[1], p67=out[2], p99=out[3])


def _bin_indices(x: np.ndarray, bounds: VariableBounds) -> np.ndarray:
    # left-closed: bin 0 is x < p01, bin 1 is p01 <= x < p33, bin 2 is
    # p33 <= x < p67, bin 3 is x >= p67
    return np.digitize(x, bounds.thresholds(), right=False)


def _cell_times(tlog: TelemetryLog, v_bounds: VariableBounds, i_bounds: VariableBounds,
                window_end: float) -> np.ndarray:
    """4x4 (current-bin, voltage-bin) time totals over [0, window_end]."""
    start, end = _held_intervals(tlog.t)
    dt = np.clip(np.minimum(end, window_end) - np.minimum(start, window_end), 0.0, None)
    vbin = _bin_indices(tlog.voltage, v_bounds)
    ibin = _bin_indices(tlog.current, i_bounds)
    cells = np.bincount(ibin * 4 + vbin, weights=dt, minlength=16)
    return cells.reshape(4, 4)


def extract_features(tlog: TelemetryLog, v_bounds: VariableBounds,
                     i_bounds: VariableBounds, set_kind: str,
                     window_end: float) -> FeatureVector:
    """Cumulative time-in-bin features of one cell up to window_end hours.

    All five set kinds are marginals of one 4x4 (current, voltage) table,
    which makes the 1D bins exact row/column sums of the 2D ones.
    """
    if set_kind not in FEATURE_SETS:
        raise InvalidSpec(f"unknown set_kind {set_kind!r}")
    if window_end < 0 or window_end > tlog.t[-1]:
        raise WindowBeyondData(
            f"window_end={window_end} outside [0, {tlog.t[-1]}] for {tlog.cell_id}")
    cells = _cell_times(tlog, v_bounds, i_bounds, window_end)
    v_marg = cells.sum(axis=0)  # over current bins
    i_marg = cells.sum(axis=1)  # over voltage bins
    if set_kind == "V3":
        vals = [v_marg[1], v_marg[2]]
    elif set_kind == "V5":
        vals = list(v_marg)
    elif set_kind == "I3":
        vals = [i_marg[1], i_marg[2]]
    elif set_kind == "I5":
        vals = list(i_marg)
    else:
        vals = list(cells.reshape(-1))
    names = FEATURE_SETS[set_kind]
    values = {n: float(v) for n, v in zip(names, vals)}
    values["t"] = float(window_end)
    return FeatureVector(set_kind=set_kind, values=values, calendar_time=float(window_end))


# ---------------------------------------------------------------------------
# Normalization statistics and the design matrix
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    """Per-feature min-max statistics, frozen on the source scenario."""

    feature_names: tuple
    mins: np.ndarray
    maxs: np.ndarray
    provenance: tuple = ()  # scenarios the statistics were computed from

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Min-max map to [0,1] on the fit range; out-of-range values are
        NOT clipped, constant columns map to 0."""
        span = self.maxs - self.mins
        out = np.zeros_like(X, dtype=np.float64)
        nz = span > 0
        out[:, nz] = (X[:, nz] - self.mins[nz]) / span[nz]
        return out

    def to_dict(self) -> dict:
        return {"feature_names": list(self.feature_names),
                "mins": [float(v) for v in self.mins],
                "maxs": [float(v) for v in self.maxs],
                "provenance": list(self.provenance)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(feature_names=tuple(d["feature_names"]),
                   mins=np.asarray(d["mins"], dtype=np.float64),
                   maxs=np.asarray(d["maxs"], dtype=np.float64),
                   provenance=tuple(d.get("provenance", ())))

    @classmethod
    def fit(cls, X: np.ndarray, feature_names, provenance=()) -> "NormStats":
        return cls(feature_names=tuple(feature_names),
                   mins=X.min(axis=0).astype(np.float64),
                   maxs=X.max(axis=0).astype(np.float64),
                   provenance=tuple(provenance))


@dataclass(frozen=True)
class FeatureMatrix:
    """Design matrix: one row per (cell, RPT), plus mode targets.

    X is normalized with `stats`; X_raw keeps the unnormalized hours.
    Y columns are (lli, lam_ne, lam_pe); NaN where labels are absent.
    """

    set_kind: str
    feature_names: tuple
    cell_ids: tuple
    X_raw: np.ndarray
    Y: np.ndarray
    stats: NormStats
    v_bounds: VariableBounds
    i_bounds: VariableBounds

    @property
    def X(self) -> np.ndarray:
        return self.stats.apply(self.X_raw)

    @property
    def t_hours(self) -> np.ndarray:
        return self.X_raw[:, list(self.feature_names).index("t")]


def feature_matrix(logs: list[TelemetryLog], rpts_per_cell: list[list[RptRecord]],
                   set_kind: str, v_bounds: VariableBounds, i_bounds: VariableBounds,
                   stats: NormStats | None = None,
                   provenance=()) -> FeatureMatrix:
    """Assemble the (features, modes) training pairs for a group of cells.

    When `stats` is None the min-max statistics are fit on this matrix
    (source usage); pass frozen source stats for target-scenario rows.
    """
    if len(logs) != len(rpts_per_cell):
        raise InvalidSpec("logs and rpts_per_cell must align")
    names = FEATURE_SETS[set_kind]
    rows, targets, ids = [], [], []
    for tlog, rpts in zip(logs, rpts_per_cell):
        for rpt in rpts:
            if rpt.t > tlog.t[-1]:
                raise UncoveredLabelPoint(
                    f"{tlog.cell_id}: RPT at t={rpt.t} beyond telemetry end {tlog.t[-1]}")
            fv = extract_features(tlog, v_bounds, i_bounds, set_kind, rpt.t)
            rows.append(fv.as_array())
            if rpt.modes is None:
                targets.append(np.full(3, np.nan))
            else:
                targets.append(rpt.modes.as_array())
            ids.append(tlog.cell_id)
    X_raw = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(names))
    Y = np.asarray(targets, dtype=np.float64).reshape(len(rows), 3)
    if stats is None:
        stats = NormStats.fit(X_raw, names, provenance=provenance)
    return FeatureMatrix(set_kind=set_kind, feature_names=tuple(names),
                         cell_ids=tuple(ids), X_raw=X_raw, Y=Y, stats=stats,
                         v_bounds=v_bounds, i_bounds=i_bounds)


FEATURES_SCHEMA = "kneedeep-features-v1"


def save_feature_matrix(fm: FeatureMatrix, csv_path) -> None:
    """CSV of normalized features + targets, with a sidecar .meta.json
    holding set_kind, bounds and normalization statistics."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    X = fm.X
    header = ["cell_id"] + [f"x_{n}" for n in fm.feature_names] + \
        ["raw_t_hours", "lli", "lam_ne", "lam_pe"]
    with open(csv_path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(X.shape[0]):
            vals = [fm.cell_ids[k]] + [fmt_float(v) for v in X[k]] + \
                [fmt_float(fm.t_hours[k])] + \
                ["" if math.isnan(v) else fmt_float(v) for v in fm.Y[k]]
            fh.write(",".join(vals) + "\n")
    meta = {
        "schema": FEATURES_SCHEMA,
        "set_kind": fm.set_kind,
        "feature_names": list(fm.feature_names),
        "v_bounds": fm.v_bounds.to_dict(),
        "i_bounds": fm.i_bounds.to_dict(),
        "stats": fm.stats.to_dict(),
    }
    Path(str(csv_path) + ".meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_feature_matrix(csv_path) -> FeatureMatrix:
    csv_path = Path(csv_path)
    meta = json.loads(Path(str(csv_path) + ".meta.json").read_text())
    if meta.get("schema") != FEATURES_SCHEMA:
        raise InvalidSpec(f"unknown features schema {meta.get('schema')!r}")
    df = _read_csv(csv_path)
    stats = NormStats.from_dict(meta["stats"])
    names = meta["feature_names"]
    Xn = df[[f"x_{n}" for n in names]].to_numpy(dtype=np.float64)
    # invert the min-max map to recover raw hours
    span = stats.maxs - stats.mins
    X_raw = Xn * span + stats.mins
    Y = df[["lli", "lam_ne", "lam_pe"]].to_numpy(dtype=np.float64)
    return FeatureMatrix(set_kind=meta["set_kind"], feature_names=tuple(names),
                         cell_ids=tuple(str(c) for c in df["cell_id"]),
                         X_raw=X_raw, Y=Y, stats=stats,
                         v_bounds=VariableBounds.from_dict(meta["v_bounds"]),
                         i_bounds=VariableBounds.from_dict(meta["i_bounds"]))
