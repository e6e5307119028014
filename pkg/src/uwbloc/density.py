"""Joint densities of (bias, features) and their measurement-noise kernels.

Per channel state the pipeline learns a joint density over the TOA bias b
and a feature set x, in one of three forms:

* raw multidimensional histogram;
* interpolated histogram (multilinear refinement + separable low-pass);
* fitted analytic family (shifted-exponential bias marginal with a
  conditionally Gaussian, affine-in-bias feature law; plain Gaussian for
  the clear-path state, whose bias is a point mass at zero).

The likelihood of a TOA residual u given features is the mixture over
channel states of the bias density convolved with the Gaussian measurement
noise along the bias axis only. For histograms the convolution is an exact
sum of Gaussian CDF differences over the bias cells; for the fitted family
it has a closed form (exponentially modified Gaussian times a Gaussian
feature factor). No sampling or gridding error enters the likelihood.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.ndimage import uniform_filter1d, zoom
from scipy.special import log_ndtr, ndtr

from .features import FeatureModelParams

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

DENSITY_FLOOR = 1e-12

# feature-axis name sets, by parameterization
FEATURES_4D = ("r_max", "tau_m", "tau_ds")
FEATURES_4D_FREE = ("r_max0", "tau_m_slope", "tau_ds_slope")
FEATURES_2D = ("tau_ds",)
FEATURES_2D_FREE = ("tau_ds_slope",)


@dataclass(frozen=True)
class Axis:
    """Uniform binning of one coordinate: ``count`` bins of ``width`` from ``lower``."""

    lower: float
    width: float
    count: int

    def __post_init__(self) -> None:
        if self.width <= 0 or self.count < 1:
            raise ValueError("axis needs positive width and at least one bin")

    @property
    def upper(self) -> float:
        return self.lower + self.width * self.count

    def edges(self) -> np.ndarray:
        return self.lower + self.width * np.arange(self.count + 1)

    def centers(self) -> np.ndarray:
        return self.lower + self.width * (np.arange(self.count) + 0.5)

    @staticmethod
    def from_samples(values: np.ndarray, count: int) -> "Axis":
        """Axis spanning [min, max] of the samples (degenerate spans get a
        nominal width so single-valued features still bin)."""
        lo = float(np.min(values))
        hi = float(np.max(values))
        if hi <= lo:
            hi = lo + max(abs(lo) * 1e-9, 1e-30)
        return Axis(lower=lo, width=(hi - lo) / count, count=count)


@dataclass(frozen=True)
class HistogramGrid:
    """Multidimensional histogram normalized to a probability density.

    ``density`` has one axis per :class:`Axis` in ``axes`` (bias first, by
    convention) and integrates to 1 over the grid. ``n_clamped`` counts the
    build samples that fell outside the axis ranges and were counted in the
    nearest edge bin.
    """

    axes: tuple[Axis, ...]
    density: np.ndarray
    n_clamped: int = 0

    def __post_init__(self) -> None:
        if self.density.shape != tuple(a.count for a in self.axes):
            raise ValueError("density shape does not match axes")
        if np.any(self.density < 0):
            raise ValueError("densities must be nonnegative")

    @property
    def cell_volume(self) -> float:
        return float(np.prod([a.width for a in self.axes]))

    def total_mass(self) -> float:
        return float(self.density.sum() * self.cell_volume)

    def locate(self, values) -> tuple[int, ...] | None:
        """Cell index containing ``values`` (one per axis), or None if outside."""
        values = np.atleast_1d(np.asarray(values, dtype=float))
        if values.size != len(self.axes):
            raise ValueError("value count does not match axis count")
        idx = []
        for v, ax in zip(values, self.axes):
            if not (ax.lower <= v <= ax.upper):
                return None
            i = min(int((v - ax.lower) / ax.width), ax.count - 1)
            idx.append(i)
        return tuple(idx)


def build_histogram(samples, axes) -> HistogramGrid:
    """Bin samples (N, k) onto ``axes`` and normalize to a density.

    Samples outside an axis range are clamped to the edge bin and counted
    in ``n_clamped``; every sample contributes, so the result integrates to
    exactly 1.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    n, k = samples.shape
    if n == 0:
        raise ValueError("cannot build a histogram from zero samples")
    axes = tuple(axes)
    if k != len(axes):
        raise ValueError("sample dimensionality does not match axis count")

    counts = np.zeros(tuple(a.count for a in axes), dtype=float)
    idx = np.empty((n, k), dtype=np.int64)
    clamped = np.zeros(n, dtype=bool)
    for j, ax in enumerate(axes):
        v = samples[:, j]
        raw = np.floor((v - ax.lower) / ax.width).astype(np.int64)
        inside = (v >= ax.lower) & (v <= ax.upper)
        clamped |= ~inside
        idx[:, j] = np.clip(raw, 0, ax.count - 1)
    np.add.at(counts, tuple(idx.T), 1.0)
    volume = float(np.prod([a.width for a in axes]))
    return HistogramGrid(
        axes=axes,
        density=counts / (n * volume),
        n_clamped=int(clamped.sum()),
    )


def interpolate_smooth(
    h: HistogramGrid,
    upsample_factor: int = 4,
    cutoff: float = 1.0 / 3.0,
    passes: int = 2,
) -> HistogramGrid:
    """Refine a histogram by multilinear interpolation, then low-pass it.

    Each axis is split into ``upsample_factor`` sub-bins; cell-center
    values are interpolated multilinearly (edge cells extend flat). The
    refined grid is smoothed with a separable moving average whose window
    is ``round(1/cutoff)`` refined bins (minimum 3), applied ``passes``
    times per axis, then clipped to be nonnegative and renormalized.
    """
    if upsample_factor < 2:
        raise ValueError("upsample_factor must be at least 2")
    if not (0.0 < cutoff <= 1.0):
        raise ValueError("cutoff must be a normalized frequency in (0, 1]")

    new_axes = tuple(
        Axis(a.lower, a.width / upsample_factor, a.count * upsample_factor) for a in h.axes
    )
    # multilinear interpolation of cell-center values onto the refined cell
    # centers; grid_mode aligns cell centers, edge cells extend flat
    dens = zoom(h.density, upsample_factor, order=1, mode="nearest", grid_mode=True)

    window = max(3, int(round(1.0 / cutoff)))
    for axis in range(dens.ndim):
        for _ in range(passes):
            dens = uniform_filter1d(dens, size=window, axis=axis, mode="nearest")

    dens = np.clip(dens, 0.0, None)
    volume = float(np.prod([a.width for a in new_axes]))
    total = dens.sum() * volume
    if total <= 0.0:
        raise ValueError("smoothing produced an empty density")
    return HistogramGrid(axes=new_axes, density=dens / total, n_clamped=h.n_clamped)


def bias_marginal(h: HistogramGrid) -> HistogramGrid:
    """Integrate the feature axes away, leaving the 1-D bias density."""
    if len(h.axes) == 1:
        return h
    feat_volume = float(np.prod([a.width for a in h.axes[1:]]))
    dens = h.density.reshape(h.axes[0].count, -1).sum(axis=1) * feat_volume
    return HistogramGrid(axes=(h.axes[0],), density=dens, n_clamped=h.n_clamped)


# ---------------------------------------------------------------------------
# Gaussian convolution along the bias axis
# ---------------------------------------------------------------------------


def _gauss_cdf_antideriv(z: np.ndarray) -> np.ndarray:
    """Antiderivative of the standard normal CDF: z*Phi(z) + phi(z)."""
    return z * ndtr(z) + np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def _cdf_diff(z_hi: np.ndarray, z_lo: np.ndarray) -> np.ndarray:
    """Phi(z_hi) - Phi(z_lo) for z_hi >= z_lo, evaluated on the survival side
    when both arguments sit in the upper tail (cancellation-safe)."""
    flip = (z_hi + z_lo) > 0
    a = np.where(flip, -z_lo, z_hi)
    b = np.where(flip, -z_hi, z_lo)
    return ndtr(a) - ndtr(b)


def convolve_bias_axis(
    h: HistogramGrid,
    sigma_w: float,
    pad_sigmas: float = 8.0,
    refine: int = 1,
) -> HistogramGrid:
    """Convolve the bias axis (axis 0) with a zero-mean Gaussian.

    Cell masses are transferred exactly: the mass moved from source bias
    bin [a0, a1] to output bin [c0, c1] is the double integral of the
    Gaussian kernel over both intervals, evaluated with the closed-form
    antiderivative of the normal CDF. Summing over output bins telescopes,
    so total mass is conserved up to the Gaussian tail beyond the output
    axis padding (``pad_sigmas`` standard deviations, ~1e-15 at 8 sigma).

    The output bias axis is widened by the padding and optionally refined
    ``refine``-fold; feature axes are untouched.
    """
    if sigma_w <= 0.0:
        raise ValueError("sigma_w must be positive")
    if refine < 1:
        raise ValueError("refine must be at least 1")

    src = h.axes[0]
    width_out = src.width / refine
    pad_bins = int(np.ceil(pad_sigmas * sigma_w / width_out))
    out = Axis(
        lower=src.lower - pad_bins * width_out,
        width=width_out,
        count=src.count * refine + 2 * pad_bins,
    )

    a = src.edges()  # (J+1,)
    c = out.edges()  # (K+1,)
    # I[j, k] = integral over source bin j of Phi((c_k - b)/sigma) db
    z = (c[None, :] - a[:, None]) / sigma_w  # (J+1, K+1)
    psi = _gauss_cdf_antideriv(z)
    integ = sigma_w * (psi[:-1, :] - psi[1:, :])  # (J, K+1)
    transfer = (integ[:, 1:] - integ[:, :-1]) / src.width  # (J, K), rows sum to ~1

    out_density = np.tensordot(transfer.T, h.density, axes=1) * (src.width / out.width)
    out_density = np.clip(out_density, 0.0, None)
    return HistogramGrid(axes=(out,) + h.axes[1:], density=out_density, n_clamped=h.n_clamped)


def smeared_bias_density(
    h: HistogramGrid, u, sigma_w, feature_cell: tuple[int, ...] = ()
) -> np.ndarray | float:
    """Pointwise (f (*) f_w)(u, x): bias density at ``feature_cell`` smeared
    by a Gaussian of std dev ``sigma_w`` and evaluated at residual ``u``.

    Exact: each bias cell contributes its density times the Gaussian CDF
    difference across the cell's bias extent. ``u`` and ``sigma_w`` may be
    arrays of equal shape.
    """
    u = np.asarray(u, dtype=float)
    sigma = np.broadcast_to(np.asarray(sigma_w, dtype=float), u.shape)
    if np.any(sigma <= 0.0):
        raise ValueError("sigma_w must be positive")
    col = h.density[(slice(None),) + tuple(feature_cell)]
    edges = h.axes[0].edges()
    z = (u[..., None] - edges) / sigma[..., None]
    out = np.einsum("...j,j->...", _cdf_diff(z[..., :-1], z[..., 1:]), col)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Fitted analytic densities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FittedLos:
    """Clear-path fitted density: point mass at b = 0 times a Gaussian over
    the features."""

    family: str
    mean: np.ndarray  # (k,)
    cov: np.ndarray  # (k, k)
    holdout_loglik: float

    def _chol(self):
        return cho_factor(self.cov, lower=True)

    def feature_logpdf(self, x) -> np.ndarray | float:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = x - self.mean
        chol, lower = self._chol()
        solved = cho_solve((chol, lower), r.T)
        maha = np.einsum("kv,kv->v", r.T, solved)
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        out = -0.5 * maha - 0.5 * logdet - self.mean.size * _LOG_SQRT_2PI
        return float(out[0]) if out.size == 1 else out

    def feature_pdf(self, x):
        return np.exp(self.feature_logpdf(x))


@dataclass(frozen=True)
class FittedNlos:
    """Obstructed-path fitted density.

    Bias marginal: exponential with scale ``bias_scale`` shifted to start
    at ``bias_shift``. Features given bias: Gaussian with mean affine in
    the excess bias, ``mean_base + mean_slope * (b - bias_shift)``, and
    constant covariance. The Gaussian-noise convolution and the
    feature-conditional bias mean both have closed forms.
    """

    family: str
    bias_shift: float
    bias_scale: float
    mean_base: np.ndarray  # (k,)
    mean_slope: np.ndarray  # (k,)
    cov: np.ndarray  # (k, k)
    holdout_loglik: float
    _cov_inv: np.ndarray = field(init=False, repr=False, compare=False)
    _logdet: float = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.bias_scale <= 0:
            raise ValueError("bias_scale must be positive")
        chol, lower = cho_factor(self.cov, lower=True)
        inv = cho_solve((chol, lower), np.eye(self.cov.shape[0]))
        object.__setattr__(self, "_cov_inv", inv)
        object.__setattr__(self, "_logdet", 2.0 * float(np.log(np.diag(chol)).sum()))

    @property
    def k(self) -> int:
        return self.mean_base.size

    def logpdf(self, b, x) -> np.ndarray | float:
        """log f(b, x); -inf below the bias support."""
        b = np.atleast_1d(np.asarray(b, dtype=float))
        x = np.atleast_2d(np.asarray(x, dtype=float))
        beta = b - self.bias_shift
        r = x - self.mean_base - np.outer(beta, self.mean_slope)
        maha = np.einsum("vk,kl,vl->v", r, self._cov_inv, r)
        out = (
            -np.log(self.bias_scale)
            - beta / self.bias_scale
            - 0.5 * maha
            - 0.5 * self._logdet
            - self.k * _LOG_SQRT_2PI
        )
        out = np.where(beta < 0, -np.inf, out)
        return float(out[0]) if out.size == 1 else out

    def pdf(self, b, x):
        return np.exp(self.logpdf(b, x))

    def _feature_quadratic(self, x: np.ndarray):
        """Decompose N(x; mean(b), cov) as C1 * exp(-(beta-beta1)^2/(2 s1^2)).

        Returns (log C1, beta1, s1_sq); s1_sq is +inf when the mean does
        not depend on the bias.
        """
        r = x - self.mean_base  # (V, k)
        m = self.mean_slope
        q = float(m @ self._cov_inv @ m)
        base = -0.5 * self._logdet - self.k * _LOG_SQRT_2PI
        rs = r @ self._cov_inv  # (V, k)
        rr = np.einsum("vk,vk->v", rs, r)
        if q <= 0.0:
            return base - 0.5 * rr, np.zeros(r.shape[0]), np.inf
        beta1 = (rs @ m) / q
        logc1 = base - 0.5 * (rr - q * beta1 * beta1)
        return logc1, beta1, 1.0 / q

    def log_noise_kernel(self, u, x, sigma_w) -> np.ndarray:
        """log of (f (*) f_w)(u, x) for Gaussian noise std dev ``sigma_w``.

        Closed form: the feature Gaussian, viewed as a function of the
        bias, is itself Gaussian; its product with the noise Gaussian
        combines analytically, and the remaining exponential-times-Gaussian
        integral over the bias support is an exponentially modified
        Gaussian expressed with the normal CDF.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = np.atleast_1d(np.asarray(u, dtype=float))
        sigma = np.broadcast_to(np.asarray(sigma_w, dtype=float), u.shape)
        s = self.bias_scale
        uprime = u - self.bias_shift
        logc1, beta1, s1_sq = self._feature_quadratic(x)

        if np.isinf(s1_sq):
            # no bias/feature coupling: plain exGaussian times feature factor
            out = (
                logc1
                - math.log(s)
                + 0.5 * (sigma / s) ** 2
                - uprime / s
                + log_ndtr(uprime / sigma - sigma / s)
            )
            return out

        var_sum = s1_sq + sigma**2
        s2_sq = s1_sq * sigma**2 / var_sum
        beta2 = s2_sq * (beta1 / s1_sq + uprime / sigma**2)
        s2 = np.sqrt(s2_sq)
        out = (
            logc1
            - np.log(sigma)
            - _LOG_SQRT_2PI
            - 0.5 * (beta1 - uprime) ** 2 / var_sum
            - math.log(s)
            + s2_sq / (2.0 * s * s)
            - beta2 / s
            + 0.5 * np.log(2.0 * math.pi * s2_sq)
            + log_ndtr(beta2 / s2 - s2 / s)
        )
        return out

    def conditional_bias_mean(self, x) -> float:
        """E[b | x]: mean of the bias posterior given features only.

        The posterior of the excess bias is a Gaussian (from the feature
        factor) tilted by the exponential prior and truncated at zero; its
        mean is the standard truncated-normal expression.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        _, beta1, s1_sq = self._feature_quadratic(x)
        if np.isinf(s1_sq):
            return self.bias_shift + self.bias_scale
        s1 = math.sqrt(s1_sq)
        mu = float(beta1[0]) - s1_sq / self.bias_scale
        z = mu / s1
        log_ratio = -0.5 * z * z - _LOG_SQRT_2PI - log_ndtr(z)
        return self.bias_shift + mu + s1 * math.exp(log_ratio)

    def normalization(self, n_bias: int = 20001, span_scales: float = 40.0) -> float:
        """Quadrature check of the total mass (feature factor integrates to
        1 analytically for every bias, verified separately in tests)."""
        b = np.linspace(self.bias_shift, self.bias_shift + span_scales * self.bias_scale, n_bias)
        f = np.exp(-(b - self.bias_shift) / self.bias_scale) / self.bias_scale
        return float(np.trapezoid(f, b))


def fit_analytic(
    bias,
    feats,
    nlos: bool,
    bias_support_min: float = 0.0,
    holdout_frac: float = 0.2,
) -> FittedNlos | FittedLos:
    """Moment-matched analytic fit of one channel state's joint density.

    For the obstructed state the bias marginal is a shifted exponential
    starting at ``bias_support_min`` and the features are regressed
    linearly on the excess bias; the residual covariance becomes the
    constant conditional covariance. For the clear state the bias is a
    point mass at zero and the features a plain Gaussian. A deterministic
    20% of samples (every fifth) is held out and its mean log-density
    reported as a goodness-of-fit score.
    """
    feats = np.atleast_2d(np.asarray(feats, dtype=float))
    if feats.shape[0] == 1 and feats.shape[1] > 1 and np.asarray(bias).size > 1:
        feats = feats.T
    bias = np.asarray(bias, dtype=float)
    n, k = feats.shape
    if n < 10:
        raise ValueError("need at least 10 samples to fit an analytic density")

    stride = max(2, int(round(1.0 / holdout_frac))) if holdout_frac > 0 else n + 1
    holdout = np.arange(n) % stride == stride - 1
    train = ~holdout

    def regularize(cov: np.ndarray, values: np.ndarray) -> np.ndarray:
        # conditioning is judged in correlation space so that wildly different
        # feature units (amplitudes vs seconds squared) do not masquerade as
        # singularity; a variance collapsed relative to the feature's own
        # magnitude (constant column) is caught separately
        cov = np.atleast_2d(cov)
        scale = np.abs(values).mean(axis=0) + values.std(axis=0) + 1e-300
        sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        collapsed = sd <= 1e-9 * scale
        if collapsed.any():
            warnings.warn(
                "singular feature covariance; applying diagonal loading", RuntimeWarning
            )
            load = np.where(collapsed, (1e-6 * scale) ** 2, 0.0)
            cov = cov + np.diag(load)
            sd = np.sqrt(np.diag(cov))
        corr = cov / np.outer(sd, sd)
        evals = np.linalg.eigvalsh(corr)
        if evals.min() <= 1e-10:
            warnings.warn(
                "singular feature covariance; applying diagonal loading", RuntimeWarning
            )
            corr = corr + 1e-6 * np.eye(corr.shape[0])
            cov = corr * np.outer(sd, sd)
        return cov

    if not nlos:
        mean = feats[train].mean(axis=0)
        cov = regularize(np.cov(feats[train], rowvar=False, ddof=1), feats[train])
        model = FittedLos(family="delta-bias gaussian-features", mean=mean, cov=cov, holdout_loglik=math.nan)
        score = model.feature_logpdf(feats[holdout]) if holdout.any() else math.nan
        return FittedLos(
            family=model.family, mean=mean, cov=cov, holdout_loglik=float(np.mean(score))
        )

    beta = bias[train] - bias_support_min
    if np.any(beta < 0):
        raise ValueError("bias samples below the declared support bound")
    scale = float(beta.mean())
    if scale <= 0:
        raise ValueError("degenerate bias samples: zero scale")
    # least-squares line per feature: x = base + slope * beta + resid
    design = np.column_stack([np.ones_like(beta), beta])
    coef, *_ = np.linalg.lstsq(design, feats[train], rcond=None)
    base, slope = coef[0], coef[1]
    resid = feats[train] - design @ coef
    cov = regularize(np.cov(resid, rowvar=False, ddof=2), feats[train])
    model = FittedNlos(
        family="shifted-exp bias, affine gaussian features",
        bias_shift=bias_support_min,
        bias_scale=scale,
        mean_base=base,
        mean_slope=slope,
        cov=cov,
        holdout_loglik=math.nan,
    )
    score = model.logpdf(bias[holdout], feats[holdout]) if holdout.any() else math.nan
    return FittedNlos(
        family=model.family,
        bias_shift=bias_support_min,
        bias_scale=scale,
        mean_base=base,
        mean_slope=slope,
        cov=cov,
        holdout_loglik=float(np.mean(score)),
    )


# ---------------------------------------------------------------------------
# Mixture model and likelihood evaluation
# ---------------------------------------------------------------------------

PARAM_DISTANCE_DEPENDENT = "dist"
PARAM_DISTANCE_FREE = "distfree"
SMOOTH_RAW = "raw"
SMOOTH_INTERP = "interp"
SMOOTH_FITTED = "fitted"


@dataclass(frozen=True)
class DensityModel:
    """LOS/NLOS mixture over (bias, features).

    The clear-path component is degenerate in bias (point mass at 0), so
    only its feature marginal is stored; its noise kernel is the plain
    Gaussian density of the residual. The obstructed component is a joint
    histogram or fitted density whose first axis is the bias.
    """

    nlos: HistogramGrid | FittedNlos
    los_features: HistogramGrid | FittedLos
    p_los: float
    parameterization: str
    smoothing: str
    feature_names: tuple[str, ...]
    transform: FeatureModelParams | None = None
    floor: float = DENSITY_FLOOR

    def __post_init__(self) -> None:
        if not (0.0 <= self.p_los <= 1.0):
            raise ValueError("p_los must lie in [0, 1]")
        if self.parameterization not in (PARAM_DISTANCE_DEPENDENT, PARAM_DISTANCE_FREE):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        if self.smoothing not in (SMOOTH_RAW, SMOOTH_INTERP, SMOOTH_FITTED):
            raise ValueError(f"unknown smoothing {self.smoothing!r}")
        if self.parameterization == PARAM_DISTANCE_FREE and self.transform is None:
            raise ValueError("distance-free models must carry the feature transform")
        if self.n_features != len(self.feature_names):
            raise ValueError("feature_names does not match model dimensionality")

    @property
    def n_features(self) -> int:
        if isinstance(self.nlos, HistogramGrid):
            return len(self.nlos.axes) - 1
        return self.nlos.k

    @property
    def dims(self) -> int:
        """Joint dimensionality: bias axis plus feature axes (2 or 4)."""
        return 1 + self.n_features


def _los_feature_density(model: DensityModel, feats: np.ndarray) -> np.ndarray:
    """Clear-path feature density at each row of ``feats`` (0 outside grid)."""
    los = model.los_features
    if isinstance(los, FittedLos):
        out = np.exp(np.atleast_1d(los.feature_logpdf(feats)))
        return out
    flat = _locate_flat(los.axes, feats)
    dens = los.density.reshape(-1)
    out = np.where(flat >= 0, dens[np.clip(flat, 0, dens.size - 1)], 0.0)
    return out


def _locate_flat(axes: tuple[Axis, ...], values: np.ndarray) -> np.ndarray:
    """Row-major flat cell index per row of ``values``; -1 when outside."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    flat = np.zeros(values.shape[0], dtype=np.int64)
    ok = np.ones(values.shape[0], dtype=bool)
    for j, ax in enumerate(axes):
        v = values[:, j]
        ok &= (v >= ax.lower) & (v <= ax.upper)
        i = np.clip(np.floor((v - ax.lower) / ax.width).astype(np.int64), 0, ax.count - 1)
        flat = flat * ax.count + i
    return np.where(ok, flat, -1)


_KERNEL_CHUNK = 16384


def _nlos_kernel_hist(
    grid: HistogramGrid, u: np.ndarray, sigma: np.ndarray, feats: np.ndarray
) -> np.ndarray:
    """(f_NLOS (*) f_w)(u, x) for a histogram model, vectorized over rows."""
    edges = grid.axes[0].edges()
    dens2d = grid.density.reshape(grid.axes[0].count, -1)
    flat = _locate_flat(grid.axes[1:], feats)
    out = np.zeros(u.shape[0])
    (inside,) = np.nonzero(flat >= 0)
    for lo in range(0, inside.size, _KERNEL_CHUNK):
        sel = inside[lo : lo + _KERNEL_CHUNK]
        z = (u[sel, None] - edges[None, :]) / sigma[sel, None]
        weights = _cdf_diff(z[:, :-1], z[:, 1:])
        cols = dens2d[:, flat[sel]].T  # (chunk, B)
        out[sel] = np.einsum("vb,vb->v", weights, cols)
    return out


def likelihood_batch(
    model: DensityModel,
    u,
    feats,
    sigma_w,
) -> np.ndarray:
    """Mixture likelihood p_los * LOS + (1 - p_los) * NLOS, floored.

    ``u`` and ``sigma_w`` broadcast to shape (V,); ``feats`` is one feature
    row shared by all evaluations or a (V, k) array. Values never fall
    below ``model.floor`` so downstream log-likelihoods stay finite.
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    sigma = np.broadcast_to(np.asarray(sigma_w, dtype=float), u.shape).astype(float)
    if np.any(sigma <= 0.0):
        raise ValueError("sigma_w must be positive")
    feats = np.asarray(feats, dtype=float)
    if feats.ndim <= 1:
        feats = np.broadcast_to(np.atleast_1d(feats), (u.shape[0], max(feats.size, 1)))
    if feats.shape[1] != model.n_features:
        raise ValueError(
            f"model expects {model.n_features} feature(s), got {feats.shape[1]}"
        )

    val = np.zeros(u.shape[0])
    if model.p_los > 0.0:
        f_feat = _los_feature_density(model, feats)
        gauss = np.exp(-0.5 * (u / sigma) ** 2) / (np.sqrt(2.0 * math.pi) * sigma)
        val += model.p_los * gauss * f_feat
    if model.p_los < 1.0:
        if isinstance(model.nlos, FittedNlos):
            kern = np.exp(model.nlos.log_noise_kernel(u, feats, sigma))
        else:
            kern = _nlos_kernel_hist(model.nlos, u, sigma, feats)
        val += (1.0 - model.p_los) * kern
    return np.maximum(val, model.floor)


def evaluate_likelihood(model: DensityModel, u: float, features, sigma_w: float) -> float:
    """Scalar mixture likelihood of residual ``u`` given ``features``.

    For distance-free models the caller passes the transformed features
    evaluated at the trial distance.
    """
    return float(likelihood_batch(model, [u], features, sigma_w)[0])


# ---------------------------------------------------------------------------
# Model construction from per-state samples
# ---------------------------------------------------------------------------


def estimate_density_model(
    nlos_bias,
    nlos_feats,
    los_feats,
    bias_lower: float,
    bias_upper: float,
    smoothing: str = SMOOTH_INTERP,
    parameterization: str = PARAM_DISTANCE_DEPENDENT,
    feature_names: tuple[str, ...] | None = None,
    p_los: float = 0.5,
    bias_bins: int | None = None,
    feature_bins: int | None = None,
    upsample_factor: int = 4,
    transform: FeatureModelParams | None = None,
) -> DensityModel:
    """Build a density model from per-state training samples.

    The bias axis spans [bias_lower, bias_upper] (the known support); the
    feature axes span the sample ranges per state. Default bin counts are
    25 per axis for the 2-D model and 5 for the 4-D one: a 4-D lattice much
    finer than that isolates individual training records in their own
    cells at desk-scale corpus sizes, which turns the histogram into a
    lookup table of the training set instead of a density estimate.
    """
    nlos_feats = np.atleast_2d(np.asarray(nlos_feats, dtype=float))
    if nlos_feats.shape[0] == 1 and np.asarray(nlos_bias).size > 1:
        nlos_feats = nlos_feats.T
    los_feats = np.atleast_2d(np.asarray(los_feats, dtype=float))
    if los_feats.shape[0] == 1 and los_feats.shape[1] > 1 and nlos_feats.shape[1] == 1:
        los_feats = los_feats.T
    nlos_bias = np.asarray(nlos_bias, dtype=float)
    k = nlos_feats.shape[1]
    if feature_names is None:
        if parameterization == PARAM_DISTANCE_DEPENDENT:
            feature_names = FEATURES_2D if k == 1 else FEATURES_4D
        else:
            feature_names = FEATURES_2D_FREE if k == 1 else FEATURES_4D_FREE

    if smoothing == SMOOTH_FITTED:
        nlos = fit_analytic(nlos_bias, nlos_feats, nlos=True, bias_support_min=bias_lower)
        los = fit_analytic(np.zeros(los_feats.shape[0]), los_feats, nlos=False)
        return DensityModel(
            nlos=nlos,
            los_features=los,
            p_los=p_los,
            parameterization=parameterization,
            smoothing=smoothing,
            feature_names=tuple(feature_names),
            transform=transform,
        )

    if bias_bins is None:
        bias_bins = 25 if k == 1 else 5
    if feature_bins is None:
        feature_bins = 25 if k == 1 else 5
    bias_axis = Axis(bias_lower, (bias_upper - bias_lower) / bias_bins, bias_bins)
    nlos_axes = (bias_axis,) + tuple(
        Axis.from_samples(nlos_feats[:, j], feature_bins) for j in range(k)
    )
    los_axes = tuple(Axis.from_samples(los_feats[:, j], feature_bins) for j in range(k))

    nlos_grid = build_histogram(np.column_stack([nlos_bias, nlos_feats]), nlos_axes)
    los_grid = build_histogram(los_feats, los_axes)
    if smoothing == SMOOTH_INTERP:
        nlos_grid = interpolate_smooth(nlos_grid, upsample_factor=upsample_factor)
        los_grid = interpolate_smooth(los_grid, upsample_factor=upsample_factor)
    return DensityModel(
        nlos=nlos_grid,
        los_features=los_grid,
        p_los=p_los,
        parameterization=parameterization,
        smoothing=smoothing,
        feature_names=tuple(feature_names),
        transform=transform,
    )
