"""Simplified cardiovascular model linking oxygen uptake to heart rate.

Hemodynamic algebra: cardiac output CO = HR * SV and mean arterial pressure
MAP = CO * TPR, with stroke volume and peripheral resistance logarithmic in
vo2 (slopes/intercepts l1..l4). Heart-rate dynamics: dHR/dt = l5 * dMAP/dt
+ l6. Substituting MAP = HR * g(vo2), where g = SV * TPR, and integrating
shows that the quantity HR * (1 - l5 * g(vo2)) grows linearly in time at
rate l6, which is what the simulator steps exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    BadBounds,
    InvertedPressures,
    LengthMismatch,
    NonPositiveVo2,
    OutOfBounds,
    SegmentTooShort,
    Singularity,
)
from .signal_pipeline import UniformSeries

#: denominator guard: |1 - l5*g| below this counts as singular
EPS_DEN = 1e-6

SECONDS_PER_MINUTE = 60.0


@dataclass(frozen=True)
class LambdaParams:
    """The six physiological parameters.

    l1, l2: stroke-volume log-law slope/intercept (L/min as tabulated);
    l3, l4: peripheral-resistance log-law slope/intercept (mmHg/L/min);
    l5: HR-vs-MAP slope (bpm/mmHg); l6: HR drift (bpm/min).
    """

    l1: float
    l2: float
    l3: float
    l4: float
    l5: float
    l6: float

    def as_array(self) -> np.ndarray:
        return np.array([self.l1, self.l2, self.l3, self.l4, self.l5, self.l6])

    @classmethod
    def from_array(cls, arr) -> "LambdaParams":
        if len(arr) != 6:
            raise LengthMismatch("lambda vector must have 6 entries")
        return cls(*(float(x) for x in arr))


#: default initial values for l1..l6 (healthy-adult reference fit)
DEFAULT_INITIAL = LambdaParams(0.02, 0.1, -5.3, 10.5, 0.44, 0.3)


@dataclass(frozen=True)
class LambdaBounds:
    """Per-parameter (lo, hi) boxes for l1..l6."""

    l1: tuple[float, float] = (0.01, 0.03)
    l2: tuple[float, float] = (0.06, 0.15)
    l3: tuple[float, float] = (-6.0, -2.0)
    l4: tuple[float, float] = (7.0, 20.0)
    l5: tuple[float, float] = (0.1, 0.6)
    l6: tuple[float, float] = (-0.5, 0.5)

    def __post_init__(self):
        for name, (lo, hi) in self.items():
            if not lo < hi:
                raise BadBounds(f"{name}: lo {lo} must be < hi {hi}")

    def items(self):
        return [(k, getattr(self, k)) for k in ("l1", "l2", "l3", "l4", "l5", "l6")]

    def lo_hi_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        pairs = [v for _, v in self.items()]
        return (np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs]))

    def contains(self, lam: LambdaParams, strict: bool = True) -> bool:
        lo, hi = self.lo_hi_arrays()
        arr = lam.as_array()
        if strict:
            return bool(np.all(arr > lo) and np.all(arr < hi))
        return bool(np.all(arr >= lo) and np.all(arr <= hi))

    def require_inside(self, lam: LambdaParams) -> None:
        if not self.contains(lam, strict=True):
            raise OutOfBounds(f"{lam} outside bounds {self}")


@dataclass(frozen=True)
class HemoState:
    """Instantaneous hemodynamic state."""

    sv: float    # L/beat
    tpr: float   # mmHg/L/min
    co: float    # L/min
    map: float   # mmHg


def _check_positive_vo2(vo2) -> np.ndarray:
    v = np.asarray(vo2, dtype=float)
    if np.any(v <= 0):
        raise NonPositiveVo2("vo2 must be strictly positive (L/min)")
    return v


def stroke_volume(lam: LambdaParams, vo2):
    """SV = l1 * ln(vo2) + l2, vo2 in L/min."""
    v = _check_positive_vo2(vo2)
    return lam.l1 * np.log(v) + lam.l2


def peripheral_resistance(lam: LambdaParams, vo2):
    """TPR = l3 * ln(vo2) + l4, vo2 in L/min."""
    v = _check_positive_vo2(vo2)
    return lam.l3 * np.log(v) + lam.l4


def coupling_g(lam: LambdaParams, vo2):
    """g = SV * TPR, the HR-to-MAP coupling factor."""
    return stroke_volume(lam, vo2) * peripheral_resistance(lam, vo2)


def coupling_g_dv(lam: LambdaParams, vo2):
    """dg/dvo2 = (2*l1*l3*ln v + l1*l4 + l2*l3) / v."""
    v = _check_positive_vo2(vo2)
    return (2.0 * lam.l1 * lam.l3 * np.log(v) + lam.l1 * lam.l4 + lam.l2 * lam.l3) / v


def coupling_g_lambda_partials(lam: LambdaParams, vo2):
    """Partials of g with respect to l1..l4, each shaped like vo2."""
    v = _check_positive_vo2(vo2)
    logv = np.log(v)
    sv = lam.l1 * logv + lam.l2
    tpr = lam.l3 * logv + lam.l4
    return logv * tpr, tpr, sv * logv, sv


def mean_arterial_pressure(hr: float, lam: LambdaParams, vo2: float) -> HemoState:
    """Full hemodynamic state from HR and vo2: CO = HR*SV, MAP = CO*TPR."""
    if hr < 0:
        raise NonPositiveVo2(f"hr must be non-negative, got {hr}")
    sv = float(stroke_volume(lam, vo2))
    tpr = float(peripheral_resistance(lam, vo2))
    co = hr * sv
    return HemoState(sv=sv, tpr=tpr, co=co, map=co * tpr)


def map_from_sbp_dbp(sbp: float, dbp: float) -> float:
    """Cuff-pressure MAP estimate: SBP/3 + 2*DBP/3."""
    if dbp <= 0 or sbp < dbp:
        raise InvertedPressures(f"need sbp >= dbp > 0, got sbp={sbp}, dbp={dbp}")
    return sbp / 3.0 + 2.0 * dbp / 3.0


def ode_rhs(hr: float, vo2: float, dvo2_dt: float, lam: LambdaParams) -> float:
    """Explicit dHR/dt in bpm/min.

    Obtained by expanding d(HR*g)/dt in the dynamics and solving for dHR/dt:
    dHR/dt = (l5 * HR * g'(v) * dv/dt + l6) / (1 - l5 * g(v)).
    ``dvo2_dt`` is in L/min per minute.
    """
    g = float(coupling_g(lam, vo2))
    den = 1.0 - lam.l5 * g
    if abs(den) <= EPS_DEN:
        raise Singularity(f"1 - l5*g = {den} at vo2={vo2}")
    gdot = float(coupling_g_dv(lam, vo2)) * dvo2_dt
    return (lam.l5 * hr * gdot + lam.l6) / den


def _denominator(lam: LambdaParams, v: np.ndarray) -> np.ndarray:
    logv = np.log(v)
    g = (lam.l1 * logv + lam.l2) * (lam.l3 * logv + lam.l4)
    den = 1.0 - lam.l5 * g
    if np.any(np.abs(den) <= EPS_DEN):
        bad = float(v[np.argmin(np.abs(den))])
        raise Singularity(f"1 - l5*g within {EPS_DEN} of zero at vo2={bad}")
    # a sign change inside one segment means the continuous trajectory
    # passes through the pole even if no sample lands on it
    if np.any(den > 0) and np.any(den < 0):
        raise Singularity("1 - l5*g changes sign within a segment")
    return den


def simulate_hr(
    vo2: UniformSeries, lam: LambdaParams, hr0_per_segment
) -> UniformSeries:
    """Forward-simulate heart rate over a vo2 series, per segment.

    The dynamics conserve Q = HR * (1 - l5 * g(vo2)) up to the linear
    drift l6 * t, so each segment is integrated exactly on the sample
    grid: Q_i = Q_0 + l6 * i * dt, HR_i = Q_i / (1 - l5 * g_i). This
    discretization satisfies the central-difference collocation residual
    to round-off by construction.
    """
    hr0 = list(hr0_per_segment)
    if len(hr0) != len(vo2.segment_bounds):
        raise LengthMismatch(
            f"{len(hr0)} initial HR values for {len(vo2.segment_bounds)} segments"
        )
    dt_min = vo2.dt / SECONDS_PER_MINUTE
    out = np.empty(len(vo2))
    for (a, b), h0 in zip(vo2.segment_bounds, hr0):
        v = _check_positive_vo2(vo2.values[a:b])
        den = _denominator(lam, v)
        q = h0 * den[0] + lam.l6 * dt_min * np.arange(b - a)
        out[a:b] = q / den
    return UniformSeries(
        t0=vo2.t0, dt=vo2.dt, values=out,
        segment_bounds=vo2.segment_bounds, unit="bpm",
    )


def de_residual_raw(
    hr: np.ndarray,
    vo2: np.ndarray,
    segment_bounds,
    dt_seconds: float,
    lam: LambdaParams,
) -> list[np.ndarray]:
    """Collocation residuals F per segment, interior samples only.

    F_i = dHR_i - l6 - l5 * dP_i with P = HR * g(vo2) and d the central
    difference in per-minute units. Each segment contributes len-2 values.
    """
    if len(hr) != len(vo2):
        raise LengthMismatch("hr and vo2 must be aligned")
    dt_min = dt_seconds / SECONDS_PER_MINUTE
    residuals = []
    for a, b in segment_bounds:
        if b - a < 3:
            raise SegmentTooShort(f"segment [{a},{b}) needs >= 3 samples")
        v = _check_positive_vo2(vo2[a:b])
        h = hr[a:b]
        p = h * coupling_g(lam, v)
        hdot = (h[2:] - h[:-2]) / (2.0 * dt_min)
        pdot = (p[2:] - p[:-2]) / (2.0 * dt_min)
        residuals.append(hdot - lam.l6 - lam.l5 * pdot)
    return residuals


def de_residual_series(
    hr: UniformSeries, vo2: UniformSeries, lam: LambdaParams
) -> np.ndarray:
    """Concatenated collocation residuals (bpm/min), edges excluded.

    The result is shorter than the input by 2 samples per segment.
    """
    if (len(hr) != len(vo2)) or hr.segment_bounds != vo2.segment_bounds:
        raise LengthMismatch("hr and vo2 must share grid and segments")
    parts = de_residual_raw(hr.values, vo2.values, vo2.segment_bounds, vo2.dt, lam)
    return np.concatenate(parts) if parts else np.empty(0)
