"""Waveform features and their distance models.

Six per-waveform statistics are computed from the sampled envelope |r(t)|:
peak amplitude, mean excess delay, delay spread, energy, rise time and
kurtosis. Time integrals use the trapezoidal rule on the uniform sample
grid (offset by the record's t0), so every statistic is a deterministic
function of the samples.

Note on units: the delay spread is stored as the energy-weighted second
central moment of time, i.e. in seconds squared, exactly as defined; no
square root is taken anywhere in the pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import linregress

from .corpus import WaveformRecord
from .errors import DegenerateSignalError


@dataclass(frozen=True)
class FeatureVector:
    """The six waveform features, indexed x0..x5 in file schemas."""

    r_max: float  # x0, peak |r|
    tau_m: float  # x1, s, mean excess delay
    tau_ds: float  # x2, s^2, delay spread (second central moment)
    energy: float  # x3, amplitude^2 * s
    t_rise: float  # x4, s
    kurtosis: float  # x5, unitless

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.r_max, self.tau_m, self.tau_ds, self.energy, self.t_rise, self.kurtosis]
        )

    @property
    def reduced(self) -> np.ndarray:
        """The (r_max, tau_m, tau_ds) triple used by the joint densities."""
        return np.array([self.r_max, self.tau_m, self.tau_ds])


@dataclass(frozen=True)
class FeatureModelParams:
    """Deterministic constants of the linear-in-distance feature models.

    The peak amplitude is modeled as ``r_max0 - r_max_slope * d`` and the
    delay spread as ``tau_ds_offset + tau_ds_slope * d``; only the two
    constants needed to invert those models are kept here.
    """

    r_max_slope: float  # amplitude per meter, >= 0
    tau_ds_offset: float  # s^2

    def __post_init__(self) -> None:
        if self.r_max_slope < 0:
            raise ValueError("r_max_slope must be nonnegative")


@dataclass(frozen=True)
class DistanceFreeFeatures:
    """Distance-independent reparameterization of the reduced triple."""

    r_max0: float  # amplitude
    tau_m_slope: float  # s / m
    tau_ds_slope: float  # s^2 / m

    def as_array(self) -> np.ndarray:
        return np.array([self.r_max0, self.tau_m_slope, self.tau_ds_slope])


@dataclass(frozen=True)
class LineFit:
    """One least-squares line with residual statistics."""

    slope: float
    intercept: float
    stderr_slope: float
    stderr_intercept: float
    residual_rms: float


@dataclass(frozen=True)
class FeatureModelFit:
    """Fitted feature-vs-distance lines plus the derived model constants."""

    r_max_line: LineFit
    tau_ds_line: LineFit
    params: FeatureModelParams


def _envelope_and_times(w: WaveformRecord) -> tuple[np.ndarray, np.ndarray]:
    if w.samples.size == 0:
        raise ValueError("empty waveform")
    return np.abs(w.samples), w.times


def max_amplitude(w: WaveformRecord) -> float:
    """Peak of |r(t)|."""
    env, _ = _envelope_and_times(w)
    return float(env.max())


def energy(w: WaveformRecord) -> float:
    """Trapezoidal integral of |r(t)|^2 over the record."""
    env, t = _envelope_and_times(w)
    return float(np.trapezoid(env * env, t))


def mean_excess_delay(w: WaveformRecord) -> float:
    """Energy-weighted mean time of the power profile."""
    env, t = _envelope_and_times(w)
    p = env * env
    eps = np.trapezoid(p, t)
    if eps <= 0.0:
        raise ValueError("zero-energy waveform: mean excess delay undefined")
    return float(np.trapezoid(t * p, t) / eps)


def delay_spread(w: WaveformRecord) -> float:
    """Energy-weighted second central moment of time, in seconds squared."""
    env, t = _envelope_and_times(w)
    p = env * env
    eps = np.trapezoid(p, t)
    if eps <= 0.0:
        raise ValueError("zero-energy waveform: delay spread undefined")
    tm = np.trapezoid(t * p, t) / eps
    dt = t - tm
    return float(np.trapezoid(dt * dt * p, t) / eps)


def _first_crossing(env: np.ndarray, t: np.ndarray, threshold: float) -> tuple[int, float]:
    """First time |r| exceeds ``threshold``; sub-sample by linear interpolation.

    Returns (segment index, crossing time). The segment index identifies the
    inter-sample interval containing the crossing (0 when the first sample
    already exceeds the threshold).
    """
    above = env > threshold
    if not above.any():
        raise ValueError("threshold never exceeded")
    i = int(np.argmax(above))
    if i == 0:
        return 0, float(t[0])
    frac = (threshold - env[i - 1]) / (env[i] - env[i - 1])
    return i, float(t[i - 1] + frac * (t[i] - t[i - 1]))


def rise_time(w: WaveformRecord) -> float:
    """Time between the first 10% and first 90% crossings of the peak.

    Crossings are located with linear interpolation between bracketing
    samples. A jump that traverses both thresholds within one sample
    interval is treated as instantaneous (rise time 0): at the sampling
    resolution the two crossings are simultaneous.
    """
    env, t = _envelope_and_times(w)
    peak = env.max()
    if peak <= 0.0:
        raise ValueError("zero waveform: rise time undefined")
    seg10, t10 = _first_crossing(env, t, 0.1 * peak)
    seg90, t90 = _first_crossing(env, t, 0.9 * peak)
    if seg10 == seg90:
        return 0.0
    return t90 - t10


def kurtosis(w: WaveformRecord, t_window: tuple[float, float] | None = None) -> float:
    """Fourth standardized moment of |r(t)| over the observation window.

    ``t_window`` is (start, end) in the record's time frame; the default is
    the full record. Time averages use trapezoidal integrals divided by the
    window length.
    """
    env, t = _envelope_and_times(w)
    if t_window is not None:
        lo, hi = t_window
        keep = (t >= lo) & (t <= hi)
        env, t = env[keep], t[keep]
        if env.size < 2:
            raise ValueError("observation window contains fewer than two samples")
    span = t[-1] - t[0]
    if span <= 0.0:
        raise ValueError("observation window has zero duration")
    mu = np.trapezoid(env, t) / span
    dev = env - mu
    sigma2 = np.trapezoid(dev * dev, t) / span
    if sigma2 <= 1e-20 * max(mu * mu, np.finfo(float).tiny):
        raise DegenerateSignalError("constant |r(t)| over the window: kurtosis undefined")
    fourth = np.trapezoid(dev**4, t) / span
    return float(fourth / (sigma2 * sigma2))


def extract_all(w: WaveformRecord) -> FeatureVector:
    """All six features of one record."""
    return FeatureVector(
        r_max=max_amplitude(w),
        tau_m=mean_excess_delay(w),
        tau_ds=delay_spread(w),
        energy=energy(w),
        t_rise=rise_time(w),
        kurtosis=kurtosis(w),
    )


def correlation_coefficient(a, b) -> float:
    """Pearson correlation of two equal-length samples."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be 1-D arrays of equal length")
    if a.size < 2:
        raise ValueError("need at least two samples")
    da = a - a.mean()
    db = b - b.mean()
    va = float(da @ da)
    vb = float(db @ db)
    if va == 0.0 or vb == 0.0:
        raise ValueError("zero-variance input: correlation undefined")
    return float(np.clip((da @ db) / np.sqrt(va * vb), -1.0, 1.0))


def fit_feature_models(features, distances) -> FeatureModelFit:
    """Least-squares lines of r_max and tau_ds against distance.

    ``features`` is a sequence of :class:`FeatureVector`; ``distances`` the
    matching link distances in meters (at least two distinct values). The
    negated r_max slope and the tau_ds intercept become the deterministic
    model constants used by the distance-free transform.
    """
    d = np.asarray(distances, dtype=float)
    if d.size != len(features):
        raise ValueError("features and distances length mismatch")
    if np.unique(d).size < 2:
        raise ValueError("need at least two distinct distances to fit a line")

    def fit(values: np.ndarray) -> LineFit:
        res = linregress(d, values)
        resid = values - (res.intercept + res.slope * d)
        return LineFit(
            slope=float(res.slope),
            intercept=float(res.intercept),
            stderr_slope=float(res.stderr),
            stderr_intercept=float(res.intercept_stderr),
            residual_rms=float(np.sqrt(np.mean(resid * resid))),
        )

    rmax_line = fit(np.array([f.r_max for f in features]))
    tauds_line = fit(np.array([f.tau_ds for f in features]))
    params = FeatureModelParams(
        r_max_slope=-rmax_line.slope,
        tau_ds_offset=tauds_line.intercept,
    )
    return FeatureModelFit(r_max_line=rmax_line, tau_ds_line=tauds_line, params=params)


def to_distance_free(
    x: FeatureVector, d: float, params: FeatureModelParams
) -> DistanceFreeFeatures:
    """Invert the linear distance models at link distance ``d``."""
    if d <= 0.0:
        raise ValueError("distance must be positive")
    return DistanceFreeFeatures(
        r_max0=x.r_max + params.r_max_slope * d,
        tau_m_slope=x.tau_m / d,
        tau_ds_slope=(x.tau_ds - params.tau_ds_offset) / d,
    )
