"""Domain types, CSV ingestion and the dataset manifest.

All numeric payloads are float64 numpy arrays, frozen after construction
so instances can be shared freely between threads/processes. Time is in
hours since beginning-of-life everywhere; ingestion converts when a
format declares a different unit (icl_csv declares seconds).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import (
    EmptyFile,
    InvalidSpec,
    MissingColumn,
    NonMonotonicTime,
    ValueOutOfRange,
)

log = logging.getLogger(__name__)

SCENARIOS = ("source_A", "source_B", "target")
TEMP_CLASSES = ("low", "medium", "high")

GENERIC_TELEMETRY_HEADER = ["t_hours", "voltage_v", "current_a"]
LABELS_HEADER = ["cell_id", "t_hours", "cum_charge_ah", "capacity_norm",
                 "lli", "lam_ne", "lam_pe"]

# Column aliases for the ICL (Imperial College London / Faraday) CSV export.
# Times are in seconds, currents in mA in that layout; both are converted
# onto the generic schema (hours, amperes) here.
ICL_TIME_COLUMNS = ["Time [s]", "Time(s)", "Test Time (s)", "time/s"]
ICL_VOLTAGE_COLUMNS = ["Voltage [V]", "Voltage(V)", "Ecell/V"]
ICL_CURRENT_MA_COLUMNS = ["Current [mA]", "Current(mA)", "I/mA"]
ICL_CURRENT_A_COLUMNS = ["Current [A]", "Current(A)", "I/A"]


def fmt_float(x) -> str:
    """Shortest decimal string that round-trips a 64-bit float exactly."""
    return repr(float(x))


def _read_csv(path) -> pd.DataFrame:
    # round_trip parsing so repr-written floats come back bit-identical
    try:
        return pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise EmptyFile(str(path))


@dataclass(frozen=True)
class DegradationState:
    """Fractions of the three degradation modes at one label point."""

    lli: float
    lam_ne: float
    lam_pe: float

    def __post_init__(self):
        for name in ("lli", "lam_ne", "lam_pe"):
            v = getattr(self, name)
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise ValueOutOfRange(f"{name}={v} outside [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.lli, self.lam_ne, self.lam_pe], dtype=np.float64)


MODE_NAMES = ("lli", "lam_ne", "lam_pe")


@dataclass(frozen=True)
class TelemetryLog:
    """Timestamped voltage/current samples for one cell.

    current is signed, negative on discharge. Timestamps are strictly
    increasing hours; all values finite.
    """

    cell_id: str
    t: np.ndarray
    voltage: np.ndarray
    current: np.ndarray
    n_rejected: int = 0  # rows dropped at ingestion (non-finite values)

    def __post_init__(self):
        t = np.ascontiguousarray(self.t, dtype=np.float64)
        v = np.ascontiguousarray(self.voltage, dtype=np.float64)
        i = np.ascontiguousarray(self.current, dtype=np.float64)
        if t.ndim != 1 or t.shape != v.shape or t.shape != i.shape:
            raise InvalidSpec("t, voltage, current must be equal-length 1-D arrays")
        if t.size == 0:
            raise EmptyFile("telemetry log has no samples")
        for arr, name in ((t, "t"), (v, "voltage"), (i, "current")):
            if not np.all(np.isfinite(arr)):
                raise ValueOutOfRange(f"non-finite {name} value in telemetry")
        bad = np.nonzero(np.diff(t) <= 0)[0]
        if bad.size:
            raise NonMonotonicTime(int(bad[0]) + 1)
        for arr in (t, v, i):
            arr.flags.writeable = False
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "voltage", v)
        object.__setattr__(self, "current", i)

    def __len__(self) -> int:
        return int(self.t.size)


@dataclass(frozen=True)
class RptRecord:
    """One reference performance test: capacity and (optionally) mode labels."""

    cell_id: str
    t: float
    cumulative_charge: float
    normalized_capacity: float
    modes: DegradationState | None = None

    def __post_init__(self):
        if not (math.isfinite(self.normalized_capacity) and 0.0 < self.normalized_capacity <= 1.2):
            raise ValueOutOfRange(
                f"normalized_capacity={self.normalized_capacity} outside (0, 1.2]")
        if not math.isfinite(self.t):
            raise ValueOutOfRange("non-finite RPT time")


@dataclass(frozen=True)
class CellMeta:
    cell_id: str
    scenario: str
    ambient_temp_class: str
    knee_occurred: bool | None = None  # None = unknown until the knee module runs

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise InvalidSpec(f"scenario {self.scenario!r} not in {SCENARIOS}")
        if self.ambient_temp_class not in TEMP_CLASSES:
            raise InvalidSpec(
                f"ambient_temp_class {self.ambient_temp_class!r} not in {TEMP_CLASSES}")


@dataclass(frozen=True)
class ManifestEntry:
    meta: CellMeta
    telemetry_path: str
    labels_path: str
    truth_path: str | None = None  # synthetic planted truth, tests only


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def _pick_column(df: pd.DataFrame, candidates, path: str) -> str:
    for c in candidates:
        if c in df.columns:
            return c
    raise MissingColumn(candidates[0], path)


def ingest_telemetry(path, format: str = "generic_csv", cell_id: str | None = None) -> TelemetryLog:
    """Read one telemetry CSV into a validated TelemetryLog.

    format "generic_csv" expects the header t_hours,voltage_v,current_a.
    format "icl_csv" maps the ICL dataset column names onto that schema,
    converting seconds to hours and mA to A. Rows containing non-finite
    values are dropped; the count is reported on the returned log.
    """
    path = Path(path)
    df = _read_csv(path)
    if format == "generic_csv":
        for col in GENERIC_TELEMETRY_HEADER:
            if col not in df.columns:
                raise MissingColumn(col, str(path))
        t = df["t_hours"].to_numpy(dtype=np.float64)
        v = df["voltage_v"].to_numpy(dtype=np.float64)
        i = df["current_a"].to_numpy(dtype=np.float64)
    elif format == "icl_csv":
        tcol = _pick_column(df, ICL_TIME_COLUMNS, str(path))
        vcol = _pick_column(df, ICL_VOLTAGE_COLUMNS, str(path))
        t = df[tcol].to_numpy(dtype=np.float64) / 3600.0
        v = df[vcol].to_numpy(dtype=np.float64)
        ma = [c for c in ICL_CURRENT_MA_COLUMNS if c in df.columns]
        if ma:
            i = df[ma[0]].to_numpy(dtype=np.float64) / 1000.0
        else:
            acol = _pick_column(df, ICL_CURRENT_A_COLUMNS, str(path))
            i = df[acol].to_numpy(dtype=np.float64)
    else:
        raise InvalidSpec(f"unknown telemetry format {format!r}")

    if t.size == 0:
        raise EmptyFile(str(path))
    keep = np.isfinite(t) & np.isfinite(v) & np.isfinite(i)
    n_rejected = int((~keep).sum())
    if n_rejected:
        log.warning("%s: rejected %d non-finite rows of %d", path, n_rejected, t.size)
        t, v, i = t[keep], v[keep], i[keep]
    if t.size == 0:
        raise EmptyFile(f"{path}: all rows rejected")
    bad = np.nonzero(np.diff(t) <= 0)[0]
    if bad.size:
        raise NonMonotonicTime(int(bad[0]) + 1)
    return TelemetryLog(cell_id=cell_id or path.stem, t=t, voltage=v, current=i,
                        n_rejected=n_rejected)


def write_telemetry(tlog: TelemetryLog, path) -> None:
    """Write a telemetry log as generic_csv with lossless float literals."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(GENERIC_TELEMETRY_HEADER) + "\n")
        for k in range(len(tlog)):
            fh.write(f"{fmt_float(tlog.t[k])},{fmt_float(tlog.voltage[k])},"
                     f"{fmt_float(tlog.current[k])}\n")


def _mode_scale(values: np.ndarray) -> float:
    # Labels above 1.5 cannot be fractions, so the file must be in percent.
    finite = values[np.isfinite(values)]
    if finite.size and np.nanmax(finite) > 1.5:
        log.info("degradation-mode labels read as percent (max=%.3g), dividing by 100",
                 float(np.nanmax(finite)))
        return 0.01
    return 1.0


def ingest_labels(path) -> list[RptRecord]:
    """Read an RPT label CSV into RptRecords; mode columns are optional."""
    path = Path(path)
    df = _read_csv(path)
    for col in LABELS_HEADER[:4]:
        if col not in df.columns:
            raise MissingColumn(col, str(path))
    has_modes = all(c in df.columns for c in MODE_NAMES)
    scale = 1.0
    if has_modes:
        scale = _mode_scale(df[list(MODE_NAMES)].to_numpy(dtype=np.float64))
    records: list[RptRecord] = []
    for _, row in df.iterrows():
        modes = None
        if has_modes and all(math.isfinite(float(row[c])) for c in MODE_NAMES):
            modes = DegradationState(lli=float(row["lli"]) * scale,
                                     lam_ne=float(row["lam_ne"]) * scale,
                                     lam_pe=float(row["lam_pe"]) * scale)
        records.append(RptRecord(cell_id=str(row["cell_id"]), t=float(row["t_hours"]),
                                 cumulative_charge=float(row["cum_charge_ah"]),
                                 normalized_capacity=float(row["capacity_norm"]),
                                 modes=modes))
    if not records:
        raise EmptyFile(str(path))
    by_cell: dict[str, float] = {}
    for k, r in enumerate(records):
        if r.cell_id in by_cell and r.t < by_cell[r.cell_id]:
            raise NonMonotonicTime(k)
        by_cell[r.cell_id] = r.t
    return records


def write_labels(records: list[RptRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(LABELS_HEADER) + "\n")
        for r in records:
            modes = (["", "", ""] if r.modes is None else
                     [fmt_float(r.modes.lli), fmt_float(r.modes.lam_ne),
                      fmt_float(r.modes.lam_pe)])
            fh.write(",".join([r.cell_id, fmt_float(r.t), fmt_float(r.cumulative_charge),
                               fmt_float(r.normalized_capacity)] + modes) + "\n")


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------

MANIFEST_SCHEMA = "kneedeep-manifest-v1"


def save_manifest(entries: list[ManifestEntry], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"schema": MANIFEST_SCHEMA, "cells": []}
    for e in entries:
        payload["cells"].append({
            "cell_id": e.meta.cell_id,
            "scenario": e.meta.scenario,
            "ambient_temp_class": e.meta.ambient_temp_class,
            "knee_occurred": e.meta.knee_occurred,
            "telemetry": e.telemetry_path,
            "labels": e.labels_path,
            "truth": e.truth_path,
        })
    path.write_text(json.dumps(payload, indent=2) + "\n")


def load_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    payload = json.loads(path.read_text())
    if payload.get("schema") != MANIFEST_SCHEMA:
        raise InvalidSpec(f"unknown manifest schema {payload.get('schema')!r}")
    entries = []
    for c in payload["cells"]:
        meta = CellMeta(cell_id=c["cell_id"], scenario=c["scenario"],
                        ambient_temp_class=c["ambient_temp_class"],
                        knee_occurred=c["knee_occurred"])
        entries.append(ManifestEntry(meta=meta, telemetry_path=c["telemetry"],
                                     labels_path=c["labels"], truth_path=c.get("truth")))
    return entries


def resolve_path(manifest_path, rel: str) -> Path:
    """Manifest file paths are relative to the manifest's directory."""
    p = Path(rel)
    return p if p.is_absolute() else Path(manifest_path).parent / p
