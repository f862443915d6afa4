"""Synthetic cells with planted ground truth.

Mode trajectories follow a square-root-plus-exponential family

    u(t) = a sqrt(t) + b max(0, exp(c (t - t0)) - 1),

capacity is linked to the modes by a fixed convention (LLI dominates the
early fade, LAM can trigger knees), and telemetry comes from a toy
equivalent circuit (OCV affine in state of charge, plus an ohmic drop)
cycled per the cycle spec. Planted knee/onset locations are computed on
the noiseless capacity by dense finite-difference curvature in normalized
coordinates -- deliberately sharing no code with the knee module so tests
can use them as an independent oracle. None of this aims at
electrochemical fidelity; it exists to make invariants and transfer
behavior testable.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import (
    CellMeta,
    DegradationState,
    ManifestEntry,
    RptRecord,
    TelemetryLog,
    save_manifest,
    write_labels,
    write_telemetry,
)
from .errors import InvalidSpec

MODE_NAMES = ("lli", "lam_ne", "lam_pe")

CAPACITY_FLOOR = 0.01  # capacity link clamps to (0, 1]


@dataclass(frozen=True)
class ModeSpec:
    """One mode's trajectory: u(t) = a sqrt(t) + b max(0, exp(c(t-t0)) - 1)."""

    a: float
    b: float = 0.0
    c: float = 1e-3
    t0: float = 0.0

    def __post_init__(self):
        if self.a <= 0 or self.c <= 0 or self.b < 0:
            raise InvalidSpec("need a > 0, c > 0, b >= 0")

    def eval(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        u = self.a * np.sqrt(t)
        if self.b > 0:
            u = u + self.b * np.maximum(0.0, np.exp(self.c * (t - self.t0)) - 1.0)
        return u


@dataclass(frozen=True)
class CycleSpec:
    charge_c_rate: float = 0.3
    discharge_profile: str = "constant_current"  # | "pulse_dynamic"
    discharge_c_rate: float = 1.0
    pulse_c_rates: tuple = (0.5, 2.0)
    pulse_period_s: float = 120.0
    v_min: float = 2.5
    v_max: float = 4.2
    rest_minutes: float = 10.0
    sample_period_s: float = 10.0  # matches lab discharge-charge sampling
    nominal_capacity_ah: float = 5.0
    internal_resistance_ohm: float = 0.03

    def __post_init__(self):
        if self.discharge_profile not in ("constant_current", "pulse_dynamic"):
            raise InvalidSpec(f"unknown discharge profile {self.discharge_profile!r}")
        if self.v_min >= self.v_max:
            raise InvalidSpec("v_min must be below v_max")
        if self.charge_c_rate <= 0 or self.discharge_c_rate <= 0:
            raise InvalidSpec("C-rates must be positive")


@dataclass(frozen=True)
class SynthCellSpec:
    cell_id: str
    seed: int
    modes: dict  # mode name -> ModeSpec
    cycle: CycleSpec = CycleSpec()
    horizon_hours: float = 1500.0
    rpt_interval_hours: float = 30.0
    label_noise_capacity: float = 0.002
    label_noise_modes: float = 0.005

    def __post_init__(self):
        if set(self.modes) != set(MODE_NAMES):
            raise InvalidSpec(f"modes must be exactly {MODE_NAMES}")
        if self.horizon_hours <= self.rpt_interval_hours:
            raise InvalidSpec("horizon must cover at least one RPT interval")
        for name, ms in self.modes.items():
            if ms.b > 0 and not (0.0 < ms.t0 < self.horizon_hours):
                raise InvalidSpec(f"{name}: t0 must lie inside the horizon when b > 0")

    @property
    def has_knee(self) -> bool:
        return any(ms.b > 0 for ms in self.modes.values())


@dataclass(frozen=True)
class PlantedTruth:
    """Noiseless trajectories and analytic knee locations, for tests only."""

    t_rpt: np.ndarray
    modes_true: dict  # mode name -> np.ndarray over t_rpt
    capacity_true: np.ndarray
    b1_star: float | None
    b2_star: float | None

    def to_dict(self) -> dict:
        return {"schema": "kneedeep-truth-v1",
                "t_rpt": [float(v) for v in self.t_rpt],
                "modes_true": {k: [float(x) for x in v] for k, v in self.modes_true.items()},
                "capacity_true": [float(v) for v in self.capacity_true],
                "b1_star": self.b1_star, "b2_star": self.b2_star}

    @classmethod
    def from_dict(cls, d: dict) -> "PlantedTruth":
        return cls(t_rpt=np.asarray(d["t_rpt"], dtype=np.float64),
                   modes_true={k: np.asarray(v, dtype=np.float64)
                               for k, v in d["modes_true"].items()},
                   capacity_true=np.asarray(d["capacity_true"], dtype=np.float64),
                   b1_star=d["b1_star"], b2_star=d["b2_star"])


def capacity_link(lli, lam_ne, lam_pe):
    """Normalized capacity from mode fractions.

    LLI sets the early fade; the electrode losses combine so the weaker
    electrode dominates with a 20% contribution from the stronger one.
    A synthetic convention, clamped to (0, 1].
    """
    lam = np.minimum(lam_ne, lam_pe) + 0.2 * np.maximum(lam_ne, lam_pe)
    return np.clip(1.0 - np.maximum(lli, lam), CAPACITY_FLOOR, 1.0)


def planted_knees(spec: SynthCellSpec, n_grid: int = 20001):
    """Knee/onset of the noiseless capacity by dense FD curvature.

    Same normalized-curvature definition as the detector, different route:
    a dense grid over the RPT abscissa range and np.gradient derivatives,
    no splines.
    """
    t_lo = spec.rpt_interval_hours
    t_hi = rpt_times(spec)[-1]
    t = np.linspace(t_lo, t_hi, n_grid)
    cap = capacity_link(*(spec.modes[m].eval(t) for m in MODE_NAMES))
    qn = (t - t_lo) / (t_hi - t_lo)
    span = cap.max() - cap.min()
    if span <= 0:
        return None, None
    yn = (cap - cap.min()) / span
    y1 = np.gradient(yn, qn)
    y2 = np.gradient(y1, qn)
    kappa = y2 / np.power(1.0 + y1 * y1, 1.5)
    dkappa = np.gradient(kappa, qn)
    i2 = int(np.argmin(kappa))
    if kappa[i2] > -5.0:
        return None, None
    b2 = float(t[i2])
    b1 = None
    if i2 > 0:
        i1 = int(np.argmin(dkappa[:i2]))
        b1 = float(t[i1])
    return b1, b2


def rpt_times(spec: SynthCellSpec) -> np.ndarray:
    n = int(np.floor(spec.horizon_hours / spec.rpt_interval_hours))
    return spec.rpt_interval_hours * np.arange(1, n + 1)


def _cycle_template(cy: CycleSpec):
    """One cycle's (t_hours, voltage, current) sampled at the cycle period."""
    dt_h = cy.sample_period_s / 3600.0
    cap = cy.nominal_capacity_ah
    segs = []  # (duration_h, current_fn(t_rel_h) -> A)
    charge_h = 1.0 / cy.charge_c_rate
    i_chg = cy.charge_c_rate * cap
    segs.append((charge_h, lambda tr: np.full_like(tr, i_chg)))
    rest_h = cy.rest_minutes / 60.0
    segs.append((rest_h, lambda tr: np.zeros_like(tr)))
    if cy.discharge_profile == "constant_current":
        dis_h = 1.0 / cy.discharge_c_rate
        i_dis = -cy.discharge_c_rate * cap
        segs.append((dis_h, lambda tr: np.full_like(tr, i_dis)))
    else:
        lo, hi = cy.pulse_c_rates
        mean_rate = 0.5 * (lo + hi)
        dis_h = 1.0 / mean_rate
        period_h = cy.pulse_period_s / 3600.0

        def pulses(tr, lo=lo, hi=hi, period_h=period_h):
            phase = np.floor(tr / (0.5 * period_h)).astype(np.int64) % 2
            return -np.where(phase == 0, lo, hi) * cap

        segs.append((dis_h, pulses))
    segs.append((rest_h, lambda tr: np.zeros_like(tr)))

    t_parts, i_parts = [], []
    t_off = 0.0
    for dur, fn in segs:
        n = max(1, int(round(dur / dt_h)))
        tr = dt_h * np.arange(n)
        t_parts.append(t_off + tr)
        i_parts.append(fn(tr))
        t_off += n * dt_h
    t = np.concatenate(t_parts)
    cur = np.concatenate(i_parts)
    soc = np.clip(np.concatenate([[0.0], np.cumsum(cur[:-1]) * dt_h / cap]), 0.0, 1.0)
    ocv = cy.v_min + (cy.v_max - cy.v_min) * soc
    volt = ocv + cur * cy.internal_resistance_ohm
    return t, volt, cur, t_off


def generate_telemetry(spec: SynthCellSpec) -> TelemetryLog:
    t1, v1, i1, cycle_h = _cycle_template(spec.cycle)
    n_cycles = int(np.ceil(spec.horizon_hours / cycle_h))
    t = (t1[None, :] + cycle_h * np.arange(n_cycles)[:, None]).reshape(-1)
    v = np.tile(v1, n_cycles)
    i = np.tile(i1, n_cycles)
    keep = t <= spec.horizon_hours
    return TelemetryLog(cell_id=spec.cell_id, t=t[keep], voltage=v[keep], current=i[keep])


def generate_cell(spec: SynthCellSpec):
    """-> (TelemetryLog, RPT records with noisy labels, PlantedTruth)."""
    tlog = generate_telemetry(spec)
    t_rpt = rpt_times(spec)
    modes_true = {m: spec.modes[m].eval(t_rpt) for m in MODE_NAMES}
    cap_true = capacity_link(*(modes_true[m] for m in MODE_NAMES))
    if np.any(np.concatenate(list(modes_true.values())) > 1.0):
        raise InvalidSpec(f"{spec.cell_id}: mode trajectory leaves [0, 1]; rescale the spec")
    rng = np.random.default_rng(spec.seed)
    cap_noisy = np.clip(cap_true + rng.normal(0.0, spec.label_noise_capacity, cap_true.shape),
                        CAPACITY_FLOOR, 1.2)
    modes_noisy = {m: np.clip(v + rng.normal(0.0, spec.label_noise_modes, v.shape), 0.0, 1.0)
                   for m, v in modes_true.items()}
    throughput_per_h = _throughput_rate(spec.cycle)
    records = []
    for k, t in enumerate(t_rpt):
        records.append(RptRecord(
            cell_id=spec.cell_id, t=float(t),
            cumulative_charge=float(throughput_per_h * t),
            normalized_capacity=float(cap_noisy[k]),
            modes=DegradationState(lli=float(modes_noisy["lli"][k]),
                                   lam_ne=float(modes_noisy["lam_ne"][k]),
                                   lam_pe=float(modes_noisy["lam_pe"][k]))))
    b1, b2 = planted_knees(spec)
    truth = PlantedTruth(t_rpt=t_rpt, modes_true=modes_true, capacity_true=cap_true,
                         b1_star=b1, b2_star=b2)
    return tlog, records, truth


def _throughput_rate(cy: CycleSpec) -> float:
    t, _, cur, cycle_h = _cycle_template(cy)
    dt_h = cy.sample_period_s / 3600.0
    return float(np.sum(np.abs(cur)) * dt_h / cycle_h)


# ---------------------------------------------------------------------------
# Fleets
# ---------------------------------------------------------------------------

TEMP_CLASSES = ("low", "medium", "high")

# Baseline trajectory coefficients; sqrt growth differs slightly by
# temperature class so stratification has something to stratify on.
BASE_A = {"lli": 5.2e-3, "lam_ne": 3.6e-3, "lam_pe": 3.0e-3}
TEMP_FACTOR = {"low": 1.15, "medium": 1.0, "high": 0.88}
# Exponential-mode sizing: amplitude at the horizon per mode, normalized
# rate gamma = c * abscissa span (kappa at the knee ~ -0.385 gamma), and
# the knee's position as a fraction of the span. The hinge t0 sits 4.5
# e-folds before the visible knee so the planted trajectory is smooth
# where the curvature concentrates.
KNEE_TAIL = {"lli": 0.25, "lam_ne": 0.15, "lam_pe": 0.12}
KNEE_GAMMA_RANGE = (19.0, 24.0)
KNEE_POS_RANGE = (0.78, 0.86)
HINGE_EFOLDS = 4.5


def kneed_mode_params(a: float, tail: float, gamma: float, knee_pos: float,
                      horizon: float, first_rpt: float):
    """(b, c, t0) placing an exp knee of the given size on one trajectory."""
    span = horizon - first_rpt
    c = gamma / span
    t_knee = first_rpt + knee_pos * span
    t0 = t_knee - HINGE_EFOLDS / c
    b = tail / (np.exp(c * (horizon - t0)) - 1.0)
    return float(b), float(c), float(t0)


def make_cell_spec(cell_id: str, seed: int, scenario: str, temp_class: str,
                   kneed: bool, horizon_hours: float = 1500.0,
                   rpt_interval_hours: float = 25.0,
                   sample_period_s: float = 60.0,
                   label_noise_capacity: float = 0.002,
                   label_noise_modes: float = 0.005,
                   knee_pos: float | None = None) -> SynthCellSpec:
    """Randomized-but-deterministic cell spec for one fleet slot.

    Source and target share the trajectory family (the transfer
    assumption); the target scenario differs only by its pulsed discharge.
    Kneed cells put a shared-timing exponential on all three modes.
    """
    rng = np.random.default_rng(seed)
    gamma = rng.uniform(*KNEE_GAMMA_RANGE)
    if knee_pos is None:
        knee_pos = rng.uniform(*KNEE_POS_RANGE)
    modes = {}
    for m in MODE_NAMES:
        a = BASE_A[m] * TEMP_FACTOR[temp_class] * rng.uniform(0.9, 1.1)
        if kneed:
            tail = KNEE_TAIL[m] * rng.uniform(0.9, 1.1)
            b, c, t0 = kneed_mode_params(a, tail, gamma, knee_pos, horizon_hours,
                                         rpt_interval_hours)
            modes[m] = ModeSpec(a=a, b=b, c=c, t0=t0)
        else:
            modes[m] = ModeSpec(a=a)
    profile = "pulse_dynamic" if scenario == "target" else "constant_current"
    cycle = CycleSpec(discharge_profile=profile, sample_period_s=sample_period_s)
    return SynthCellSpec(cell_id=cell_id, seed=seed, modes=modes, cycle=cycle,
                         horizon_hours=horizon_hours,
                         rpt_interval_hours=rpt_interval_hours,
                         label_noise_capacity=label_noise_capacity,
                         label_noise_modes=label_noise_modes)


def generate_fleet(out_dir, scenario: str, n_cells: int = 6,
                   knee_fraction: float = 0.0, seed: int = 0,
                   **spec_kwargs) -> list[ManifestEntry]:
    """Write one scenario's cells (telemetry, labels, truth) under out_dir.

    Deterministic in `seed`. Kneed slots are assigned from the coldest
    temperature class up, mirroring the lab fleet's low-temperature knees.
    """
    if scenario not in ("source_A", "source_B", "target"):
        raise InvalidSpec(f"unknown scenario {scenario!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_kneed = int(round(knee_fraction * n_cells))
    seeds = np.random.SeedSequence(seed).generate_state(n_cells)
    entries = []
    for k in range(n_cells):
        temp = TEMP_CLASSES[(k * len(TEMP_CLASSES)) // n_cells]
        kneed = k < n_kneed
        cell_id = f"{scenario}_{k:02d}"
        spec = make_cell_spec(cell_id, int(seeds[k]), scenario, temp, kneed,
                              **spec_kwargs)
        tlog, records, truth = generate_cell(spec)
        tele_path = out_dir / f"{cell_id}_telemetry.csv"
        label_path = out_dir / f"{cell_id}_labels.csv"
        truth_path = out_dir / f"{cell_id}_truth.json"
        write_telemetry(tlog, tele_path)
        write_labels(records, label_path)
        truth_path.write_text(json.dumps(truth.to_dict()) + "\n")
        meta = CellMeta(cell_id=cell_id, scenario=scenario, ambient_temp_class=temp,
                        knee_occurred=kneed)
        entries.append(ManifestEntry(meta=meta, telemetry_path=tele_path.name,
                                     labels_path=label_path.name,
                                     truth_path=truth_path.name))
    return entries


def generate_default_fleet(out_dir, seed: int = 0, cells_per_scenario: int = 6,
                           **spec_kwargs) -> Path:
    """Full three-scenario fleet + manifest, mirroring the lab layout:
    protocol-A source cells carry the knees, protocol-B none, and the
    dynamic-discharge target has a knee-occurrence mix."""
    out_dir = Path(out_dir)
    entries = []
    entries += generate_fleet(out_dir, "source_A", cells_per_scenario,
                              knee_fraction=2 / 3, seed=seed, **spec_kwargs)
    entries += generate_fleet(out_dir, "source_B", cells_per_scenario,
                              knee_fraction=0.0, seed=seed + 1, **spec_kwargs)
    entries += generate_fleet(out_dir, "target", cells_per_scenario,
                              knee_fraction=1 / 3, seed=seed + 2, **spec_kwargs)
    manifest_path = out_dir / "manifest.json"
    save_manifest(entries, manifest_path)
    return manifest_path
