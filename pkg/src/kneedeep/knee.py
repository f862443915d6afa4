"""Curvature-based knee / knee-onset identification and the knee predictor.

Both axes of the fade curve are min-max normalized to [0,1] before any
curvature is computed, so the signed curvature

    kappa(q) = y'' / (1 + y'^2)^(3/2)

is unit-free and its thresholds carry across datasets. The knee b2 is the
dense-grid argmin of kappa (most negative curvature = accelerating fade);
the knee-onset b1 is the steepest curvature descent preceding it. A cell
can show an onset without a knee (Phase-2-only cells): the onset fires
whenever the curvature is genuinely heading negative even if it never
crosses the knee threshold.
"""
from __future__ import annotations

import numpy as np
from dataclasses import dataclass, field
from scipy.interpolate import CubicSpline, make_smoothing_spline

from .errors import InvalidSpec, TooFewPairs, TooFewPoints

ABSCISSA_KINDS = ("cycles", "cumulative_charge_ah", "hours")

KAPPA_THRESHOLD = 5.0        # |kappa| at the knee, normalized units
ONSET_SLOPE_THRESHOLD = 25.0  # |d kappa/dq| at the onset, normalized units
ONSET_CURVATURE_FLOOR = 0.5  # most-negative kappa needed for any onset call
GRID_POINTS = 2001


@dataclass(frozen=True)
class CapacityCurve:
    abscissa_kind: str
    q: np.ndarray
    capacity: np.ndarray

    def __post_init__(self):
        if self.abscissa_kind not in ABSCISSA_KINDS:
            raise InvalidSpec(f"abscissa_kind {self.abscissa_kind!r} not in {ABSCISSA_KINDS}")
        q = np.ascontiguousarray(self.q, dtype=np.float64)
        y = np.ascontiguousarray(self.capacity, dtype=np.float64)
        if q.ndim != 1 or q.shape != y.shape:
            raise InvalidSpec("q and capacity must be equal-length 1-D arrays")
        if q.size < 8:
            raise TooFewPoints(f"need >= 8 points, got {q.size}")
        if np.any(np.diff(q) <= 0):
            raise InvalidSpec("q must be strictly increasing")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(y))):
            raise InvalidSpec("non-finite curve values")
        q.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "capacity", y)


@dataclass(frozen=True)
class PhaseTimeline:
    """Boundaries b1 (knee-onset) and b2 (knee) plus per-point phases."""

    b1: float | None
    b2: float | None
    labels: np.ndarray

    def __post_init__(self):
        if self.b1 is not None and self.b2 is not None and not self.b1 < self.b2:
            raise InvalidSpec(f"b1={self.b1} must precede b2={self.b2}")


@dataclass(frozen=True)
class KneeCorrelationModel:
    slope: float
    intercept: float
    pearson_rho: float
    n_fit: int
    b1_min: float = float("nan")
    b1_max: float = float("nan")
    abscissa_kind: str = "hours"

    def __post_init__(self):
        if self.n_fit < 2:
            raise TooFewPairs("regression needs >= 2 (onset, knee) pairs")
        if not -1.0 <= self.pearson_rho <= 1.0 + 1e-12:
            raise InvalidSpec(f"pearson rho {self.pearson_rho} outside [-1, 1]")

    def to_dict(self) -> dict:
        return {"schema": "kneedeep-kneefit-v1", "slope": self.slope,
                "intercept": self.intercept, "pearson_rho": self.pearson_rho,
                "n_fit": self.n_fit, "b1_min": self.b1_min, "b1_max": self.b1_max,
                "abscissa_kind": self.abscissa_kind}

    @classmethod
    def from_dict(cls, d: dict) -> "KneeCorrelationModel":
        if d.get("schema") != "kneedeep-kneefit-v1":
            raise InvalidSpec(f"unknown knee-fit schema {d.get('schema')!r}")
        return cls(slope=d["slope"], intercept=d["intercept"],
                   pearson_rho=d["pearson_rho"], n_fit=d["n_fit"],
                   b1_min=d["b1_min"], b1_max=d["b1_max"],
                   abscissa_kind=d["abscissa_kind"])


@dataclass(frozen=True)
class KneePrediction:
    value: float
    extrapolated: bool


class SmoothCurve:
    """C2 evaluator (value, first, second derivative) over a fitted spline."""

    def __init__(self, spline):
        self._s = spline
        self._d1 = spline.derivative(1)
        self._d2 = spline.derivative(2)

    def value(self, q):
        return self._s(q)

    def first(self, q):
        return self._d1(q)

    def second(self, q):
        return self._d2(q)


def smooth_curve(curve: CapacityCurve, smoothing: float | None = None) -> SmoothCurve:
    """Cubic smoothing spline through the fade curve.

    smoothing=None selects the penalty by generalized cross-validation;
    smoothing=0 interpolates (not-a-knot ends, so polynomials up to cubic
    are reproduced exactly); smoothing>0 is used as the penalty directly.
    """
    if smoothing is not None and smoothing < 0:
        raise InvalidSpec("smoothing must be None or >= 0")
    if smoothing == 0:
        return SmoothCurve(CubicSpline(curve.q, curve.capacity))
    return SmoothCurve(make_smoothing_spline(curve.q, curve.capacity, lam=smoothing))


def _normalized(curve: CapacityCurve):
    q0, q1 = float(curve.q[0]), float(curve.q[-1])
    y0, y1 = float(curve.capacity.min()), float(curve.capacity.max())
    qn = (curve.q - q0) / (q1 - q0)
    yspan = y1 - y0
    yn = (curve.capacity - y0) / yspan if yspan > 0 else np.zeros_like(curve.capacity)
    return qn, yn, q0, q1 - q0


def identify_knees(curve: CapacityCurve, smoothing: float | None = None,
                   kappa_threshold: float = KAPPA_THRESHOLD,
                   onset_slope_threshold: float = ONSET_SLOPE_THRESHOLD,
                   onset_curvature_floor: float = ONSET_CURVATURE_FLOOR,
                   grid_points: int = GRID_POINTS) -> PhaseTimeline:
    """Locate knee and knee-onset on one capacity fade curve.

    A knee is reported when the grid minimum of the normalized curvature
    reaches -kappa_threshold. The onset is the steepest curvature descent
    before the knee; without a knee it is still reported when the descent
    is steep enough and the curvature genuinely turns negative.
    """
    qn, yn, q_off, q_span = _normalized(curve)
    norm = CapacityCurve(abscissa_kind=curve.abscissa_kind, q=qn, capacity=yn)
    sm = smooth_curve(norm, smoothing)
    grid = np.linspace(0.0, 1.0, grid_points)
    y1 = sm.first(grid)
    y2 = sm.second(grid)
    kappa = y2 / np.power(1.0 + y1 * y1, 1.5)
    dkappa = np.gradient(kappa, grid)

    i2 = int(np.argmin(kappa))
    has_knee = kappa[i2] <= -kappa_threshold
    b1 = b2 = None
    if has_knee:
        b2 = q_off + grid[i2] * q_span
        if i2 > 0:
            i1 = int(np.argmin(dkappa[:i2]))
            if dkappa[i1] <= -onset_slope_threshold:
                b1 = q_off + grid[i1] * q_span
    elif kappa[i2] <= -onset_curvature_floor:
        # Phase-2-only cells: curvature heading down but no knee yet
        i1 = int(np.argmin(dkappa[:i2])) if i2 > 0 else None
        if i1 is not None and dkappa[i1] <= -onset_slope_threshold:
            b1 = q_off + grid[i1] * q_span
    timeline_labels = _phase_labels(curve.q, b1, b2)
    return PhaseTimeline(b1=b1, b2=b2, labels=timeline_labels)


def _phase_labels(q: np.ndarray, b1: float | None, b2: float | None) -> np.ndarray:
    labels = np.ones(q.shape[0], dtype=np.int64)
    if b1 is not None:
        labels[q >= b1] = 2
    if b2 is not None:
        labels[q >= b2] = 3
    return labels


def label_phases(q, timeline: PhaseTimeline) -> np.ndarray:
    """Phase in {1,2,3} per abscissa value; absent boundaries extend the
    preceding phase."""
    return _phase_labels(np.asarray(q, dtype=np.float64), timeline.b1, timeline.b2)


def fit_knee_regression(pairs, abscissa_kind: str = "hours") -> KneeCorrelationModel:
    """Ordinary least squares knee = slope * onset + intercept, with Pearson rho."""
    pairs = np.asarray(pairs, dtype=np.float64)
    if pairs.ndim != 2 or pairs.shape[1] != 2 or pairs.shape[0] < 2:
        raise TooFewPairs(f"need (n>=2, 2) onset/knee pairs, got {pairs.shape}")
    b1 = pairs[:, 0]
    b2 = pairs[:, 1]
    b1c = b1 - b1.mean()
    b2c = b2 - b2.mean()
    sxx = float(b1c @ b1c)
    if sxx == 0.0:
        raise InvalidSpec("all onset values identical; slope undefined")
    slope = float(b1c @ b2c) / sxx
    intercept = float(b2.mean() - slope * b1.mean())
    syy = float(b2c @ b2c)
    rho = float(b1c @ b2c) / np.sqrt(sxx * syy) if syy > 0 else 0.0
    return KneeCorrelationModel(slope=slope, intercept=intercept, pearson_rho=rho,
                                n_fit=int(pairs.shape[0]), b1_min=float(b1.min()),
                                b1_max=float(b1.max()), abscissa_kind=abscissa_kind)


def predict_knee(model: KneeCorrelationModel, detected_onset: float) -> KneePrediction:
    """Affine knee prediction from a detected onset; flags extrapolation."""
    value = model.slope * detected_onset + model.intercept
    extrapolated = not (model.b1_min <= detected_onset <= model.b1_max)
    return KneePrediction(value=float(value), extrapolated=bool(extrapolated))
