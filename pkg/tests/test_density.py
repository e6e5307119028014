import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal, norm

from uwbloc.density import (
    Axis,
    DensityModel,
    FittedLos,
    FittedNlos,
    HistogramGrid,
    PARAM_DISTANCE_DEPENDENT,
    PARAM_DISTANCE_FREE,
    SMOOTH_FITTED,
    SMOOTH_INTERP,
    SMOOTH_RAW,
    bias_marginal,
    build_histogram,
    convolve_bias_axis,
    estimate_density_model,
    evaluate_likelihood,
    fit_analytic,
    interpolate_smooth,
    likelihood_batch,
    smeared_bias_density,
)
from uwbloc.modelio import load_density_model, save_density_model


class TestBuildHistogram:
    def test_two_bin_split(self):
        axes = [Axis(0.0, 1.0, 2)]
        h = build_histogram(np.array([0.2, 0.4, 1.2, 1.9]), axes)
        assert h.density == pytest.approx([0.5, 0.5])
        assert h.total_mass() == pytest.approx(1.0, abs=1e-12)

    def test_single_occupied_bin(self):
        axes = [Axis(0.0, 0.5, 4)]
        h = build_histogram(np.array([0.6, 0.7, 0.9]), axes)
        assert h.density[1] == pytest.approx(1.0 / 0.5)
        assert h.density[0] == h.density[2] == h.density[3] == 0.0

    def test_clamping_counted(self):
        axes = [Axis(0.0, 1.0, 2)]
        h = build_histogram(np.array([-1.0, 0.5, 3.0]), axes)
        assert h.n_clamped == 2
        assert h.total_mass() == pytest.approx(1.0, abs=1e-12)
        assert h.density[0] > 0 and h.density[1] > 0  # clamped into edge bins

    def test_zero_samples_error(self):
        with pytest.raises(ValueError):
            build_histogram(np.empty((0, 1)), [Axis(0.0, 1.0, 2)])

    @given(st.integers(1, 200), st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_normalization_property(self, n, seed):
        rng = np.random.default_rng(seed)
        samples = rng.normal(size=(n, 2)) * [2.0, 0.5]
        axes = [Axis(-4.0, 0.5, 16), Axis(-2.0, 0.25, 16)]
        h = build_histogram(samples, axes)
        assert h.total_mass() == pytest.approx(1.0, abs=1e-9)
        assert np.all(h.density >= 0.0)


class TestInterpolateSmooth:
    def test_uniform_unchanged(self):
        h = build_histogram(np.arange(16) + 0.5, [Axis(0.0, 1.0, 16)])
        s = interpolate_smooth(h, upsample_factor=4)
        assert np.allclose(s.density, s.density.flat[0])
        assert s.total_mass() == pytest.approx(1.0, abs=1e-9)

    def test_spike_conserves_mass(self):
        h = build_histogram(np.full(10, 5.2), [Axis(0.0, 1.0, 10)])
        s = interpolate_smooth(h, upsample_factor=4)
        assert s.total_mass() == pytest.approx(1.0, abs=1e-9)
        assert (s.density > 0).sum() > 1  # mass has spread

    def test_shape_contract(self):
        h = build_histogram(np.random.default_rng(0).uniform(0, 2, (50, 2)),
                            [Axis(0.0, 0.5, 4), Axis(0.0, 0.25, 8)])
        s = interpolate_smooth(h, upsample_factor=3)
        assert s.density.shape == (12, 24)
        assert s.axes[0].width == pytest.approx(0.5 / 3)

    def test_means_within_one_original_bin(self):
        rng = np.random.default_rng(4)
        samples = rng.normal(2.0, 0.7, 4000)
        ax = Axis(-1.0, 0.25, 24)
        h = build_histogram(samples, [ax])
        s = interpolate_smooth(h, upsample_factor=4)

        def grid_mean(g):
            c = g.axes[0].centers()
            w = g.density * g.axes[0].width
            return float((c * w).sum() / w.sum())

        assert abs(grid_mean(s) - grid_mean(h)) <= ax.width
        assert s.total_mass() == pytest.approx(h.total_mass(), abs=1e-9)

    def test_rejects_small_factor(self):
        h = build_histogram(np.array([0.5]), [Axis(0.0, 1.0, 1)])
        with pytest.raises(ValueError):
            interpolate_smooth(h, upsample_factor=1)


class TestConvolveBias:
    def _hist(self):
        # O(1)-unit two-bin bias histogram: density 0.7 and 0.3 over unit bins
        axes = (Axis(0.0, 1.0, 2),)
        dens = np.array([0.7, 0.3])
        return HistogramGrid(axes=axes, density=dens)

    def test_mass_conserved(self):
        h = self._hist()
        for sigma in (0.05, 0.3, 2.0):
            out = convolve_bias_axis(h, sigma)
            assert out.total_mass() == pytest.approx(1.0, abs=1e-9)

    def test_multidim_mass_conserved(self):
        rng = np.random.default_rng(8)
        samples = np.column_stack([rng.uniform(0, 2, 300), rng.normal(size=300)])
        h = build_histogram(samples, [Axis(0.0, 0.25, 8), Axis(-3.0, 0.5, 12)])
        out = convolve_bias_axis(h, 0.17)
        assert out.total_mass() == pytest.approx(1.0, abs=1e-9)
        assert out.density.shape[1] == 12  # feature axis untouched

    def test_sigma_to_zero_recovers_histogram(self):
        h = self._hist()
        out = convolve_bias_axis(h, 1e-12)
        centers = h.axes[0].centers()
        got = np.array([smeared_bias_density(out, c, 1e-12) for c in centers])
        # evaluating the convolved grid at original bin centers recovers it
        idx = [out.locate([c])[0] for c in centers]
        assert out.density[idx[0]] == pytest.approx(0.7, rel=1e-9)
        assert out.density[idx[1]] == pytest.approx(0.3, rel=1e-9)
        assert got == pytest.approx([0.7, 0.3], rel=1e-6)

    def test_point_mass_becomes_gaussian(self):
        w = 1e-5
        axes = (Axis(-w / 2, w, 1),)
        h = HistogramGrid(axes=axes, density=np.array([1.0 / w]))
        sigma = 0.25
        for u in (-0.7, -0.1, 0.0, 0.4, 1.3):
            assert smeared_bias_density(h, u, sigma) == pytest.approx(
                norm.pdf(u, 0.0, sigma), rel=1e-6
            )

    def test_matches_riemann_quadrature(self):
        h = self._hist()
        sigma = 0.31
        b = np.linspace(-0.5, 2.5, 10_000)
        db = b[1] - b[0]
        dens = np.where((b >= 0) & (b < 1), 0.7, np.where((b >= 1) & (b <= 2), 0.3, 0.0))
        for u in (-0.4, 0.2, 0.9, 1.5, 2.8):
            oracle = float(np.sum(dens * norm.pdf(u - b, 0.0, sigma)) * db)
            assert abs(smeared_bias_density(h, u, sigma) - oracle) <= 1e-6

    def test_grid_cell_mass_equals_pointwise_integral(self):
        h = self._hist()
        sigma = 0.2
        out = convolve_bias_axis(h, sigma, refine=4)
        edges = out.axes[0].edges()
        sig = np.full(1025, sigma)
        for k in range(0, out.axes[0].count, 5):
            u = np.linspace(edges[k], edges[k + 1], 1025)
            mass = float(np.trapezoid(smeared_bias_density(h, u, sig), u))
            assert out.density[k] * out.axes[0].width == pytest.approx(mass, abs=1e-8)

    def test_sigma_domain_error(self):
        with pytest.raises(ValueError):
            convolve_bias_axis(self._hist(), 0.0)


class TestFitAnalytic:
    def _draw(self, rng, n, shift=1.0, scale=0.5, base=(2.0, -1.0), slope=(3.0, 0.5)):
        beta = rng.exponential(scale, n)
        cov = np.array([[0.04, 0.01], [0.01, 0.09]])
        chol = np.linalg.cholesky(cov)
        x = np.array(base) + np.outer(beta, slope) + rng.standard_normal((n, 2)) @ chol.T
        return shift + beta, x, cov

    def test_self_consistency_within_five_percent(self):
        rng = np.random.default_rng(42)
        b, x, cov = self._draw(rng, 10_000)
        m = fit_analytic(b, x, nlos=True, bias_support_min=1.0)
        assert m.bias_scale == pytest.approx(0.5, rel=0.05)
        assert m.mean_base == pytest.approx([2.0, -1.0], rel=0.05, abs=0.05)
        assert m.mean_slope == pytest.approx([3.0, 0.5], rel=0.05)
        assert np.diag(m.cov) == pytest.approx(np.diag(cov), rel=0.05)

    def test_los_fit_is_point_mass_times_gaussian(self):
        rng = np.random.default_rng(3)
        x = rng.normal([1.0, 2.0], [0.1, 0.2], size=(500, 2))
        m = fit_analytic(np.zeros(500), x, nlos=False)
        assert isinstance(m, FittedLos)  # bias support is exactly {0}
        assert m.mean == pytest.approx([1.0, 2.0], abs=0.05)
        ref = multivariate_normal(mean=m.mean, cov=m.cov)
        assert m.feature_pdf([1.05, 1.9]) == pytest.approx(ref.pdf([1.05, 1.9]), rel=1e-9)

    def test_normalization_by_quadrature(self):
        rng = np.random.default_rng(5)
        b, x, _ = self._draw(rng, 2000)
        m = fit_analytic(b, x, nlos=True, bias_support_min=1.0)
        assert m.normalization(n_bias=40_001) == pytest.approx(1.0, abs=1e-6)

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            fit_analytic(np.ones(5), np.ones((5, 1)), nlos=True, bias_support_min=0.5)

    def test_singular_covariance_warns_and_loads(self):
        rng = np.random.default_rng(6)
        beta = rng.exponential(1.0, 200)
        x = np.column_stack([1.0 + 2.0 * beta, np.full(200, 3.33)])  # constant column
        with pytest.warns(RuntimeWarning, match="diagonal loading"):
            m = fit_analytic(1.0 + beta, x, nlos=True, bias_support_min=1.0)
        assert np.all(np.isfinite(m.logpdf(2.0, [[3.0, 3.33]])))

    def test_noise_kernel_matches_quadrature(self):
        rng = np.random.default_rng(7)
        b, x, _ = self._draw(rng, 3000)
        m = fit_analytic(b, x, nlos=True, bias_support_min=1.0)
        sigma = 0.21
        bq = np.linspace(1.0, 12.0, 200_001)
        xq = np.array([2.8, -0.6])
        f = m.pdf(bq, np.tile(xq, (bq.size, 1)))
        for u in (0.5, 1.2, 2.0, 3.5):
            oracle = float(np.trapezoid(f * norm.pdf(u - bq, 0.0, sigma), bq))
            got = float(np.exp(m.log_noise_kernel([u], xq[None, :], [sigma])[0]))
            assert got == pytest.approx(oracle, rel=1e-6)

    def test_conditional_bias_mean_matches_quadrature(self):
        rng = np.random.default_rng(8)
        b, x, _ = self._draw(rng, 3000)
        m = fit_analytic(b, x, nlos=True, bias_support_min=1.0)
        bq = np.linspace(1.0, 15.0, 400_001)
        for xq in ([2.5, -0.8], [4.0, 0.2]):
            f = m.pdf(bq, np.tile(xq, (bq.size, 1)))
            oracle = float(np.trapezoid(bq * f, bq) / np.trapezoid(f, bq))
            assert m.conditional_bias_mean(np.array(xq)[None, :]) == pytest.approx(oracle, rel=1e-6)


def _toy_model(p_los=0.5, floor=1e-12):
    """2-D histogram mixture in O(1) units: bias on [1, 3], feature on [0, 10]."""
    rng = np.random.default_rng(12)
    b = 1.0 + rng.exponential(0.5, 400).clip(max=1.99)
    x = 2.0 + 2.0 * b + rng.normal(0, 0.5, 400)
    nlos = build_histogram(np.column_stack([b, x]), [Axis(1.0, 0.1, 20), Axis(0.0, 0.5, 20)])
    los_x = rng.normal(2.0, 0.4, 300)
    los = build_histogram(los_x, [Axis(0.0, 0.25, 16)])
    return DensityModel(
        nlos=nlos, los_features=los, p_los=p_los,
        parameterization=PARAM_DISTANCE_DEPENDENT, smoothing=SMOOTH_RAW,
        feature_names=("tau_ds",), floor=floor,
    )


class TestEvaluateLikelihood:
    def test_pure_los_is_gaussian_times_feature_density(self):
        m = _toy_model(p_los=1.0)
        sigma = 0.2
        x = 2.1
        cell = m.los_features.locate([x])
        expected = norm.pdf(0.0, 0.0, sigma) * m.los_features.density[cell]
        assert evaluate_likelihood(m, 0.0, [x], sigma) == pytest.approx(expected, rel=1e-12)
        assert evaluate_likelihood(m, 0.0, [x], sigma) > 0

    def test_mixture_linearity(self):
        u, x, sigma = 1.4, 5.0, 0.3
        v0 = evaluate_likelihood(_toy_model(0.0), u, [x], sigma)
        v1 = evaluate_likelihood(_toy_model(1.0), u, [x], sigma)
        vh = evaluate_likelihood(_toy_model(0.5), u, [x], sigma)
        assert vh == pytest.approx(0.5 * (v0 + v1), rel=1e-9)

    def test_null_region_hits_floor(self):
        m = _toy_model(p_los=0.0)
        sigma = 0.05
        # far enough below the support that the Gaussian tail drops under
        # the absolute floor
        u = 1.0 - 14.0 * sigma
        assert evaluate_likelihood(m, u, [5.0], sigma) == m.floor

    def test_out_of_grid_features_floored(self):
        m = _toy_model(p_los=0.5)
        assert evaluate_likelihood(m, 1.5, [999.0], 0.2) == m.floor

    def test_monotone_in_p_los(self):
        # at u = 0 with LOS-typical features the LOS kernel dominates
        u, x, sigma = 0.0, 2.1, 0.2
        vals = [evaluate_likelihood(_toy_model(p), u, [x], sigma) for p in (0.1, 0.4, 0.7, 1.0)]
        assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_dimension_mismatch(self):
        m = _toy_model()
        with pytest.raises(ValueError):
            evaluate_likelihood(m, 0.0, [1.0, 2.0], 0.2)

    def test_sigma_domain_error(self):
        with pytest.raises(ValueError):
            evaluate_likelihood(_toy_model(), 0.0, [2.0], 0.0)

    def test_batch_matches_scalar(self):
        m = _toy_model()
        u = np.array([0.0, 0.9, 1.7, 2.5])
        sigma = np.array([0.2, 0.25, 0.3, 0.2])
        batch = likelihood_batch(m, u, [2.1], sigma)
        for i in range(u.size):
            assert batch[i] == pytest.approx(
                evaluate_likelihood(m, u[i], [2.1], sigma[i]), rel=1e-12
            )


class TestModelConstruction:
    def test_distance_free_requires_transform(self):
        m = _toy_model()
        with pytest.raises(ValueError):
            DensityModel(
                nlos=m.nlos, los_features=m.los_features, p_los=0.5,
                parameterization=PARAM_DISTANCE_FREE, smoothing=SMOOTH_RAW,
                feature_names=("tau_ds_slope",),
            )

    def test_p_los_range(self):
        m = _toy_model()
        with pytest.raises(ValueError):
            DensityModel(
                nlos=m.nlos, los_features=m.los_features, p_los=1.5,
                parameterization=PARAM_DISTANCE_DEPENDENT, smoothing=SMOOTH_RAW,
                feature_names=("tau_ds",),
            )

    @staticmethod
    def gaussian_norm_by_quadrature(cov: np.ndarray) -> float:
        """Integral of a centered Gaussian via quadrature along its principal
        axes (exact orthogonal change of variables)."""
        evals = np.linalg.eigvalsh(np.atleast_2d(cov))
        total = 1.0
        for lam in evals:
            sd = math.sqrt(lam)
            y = np.linspace(-10 * sd, 10 * sd, 20_001)
            total *= float(np.trapezoid(norm.pdf(y, 0.0, sd), y))
        return total

    @pytest.mark.parametrize("smoothing", [SMOOTH_RAW, SMOOTH_INTERP, SMOOTH_FITTED])
    @pytest.mark.parametrize("k", [1, 3])
    def test_every_variant_normalized(self, smoothing, k, default_split, default_features):
        _, nlos, config = default_split
        los_f, nlos_f = default_features
        b = np.array([r.true_bias for r in nlos])
        x = np.array([f.reduced for f in nlos_f])[:, 3 - k:]
        lx = np.array([f.reduced for f in los_f])[:, 3 - k:]
        model = estimate_density_model(
            b, x, lx, config.wall_delay, config.bias_max, smoothing=smoothing,
        )
        if smoothing == SMOOTH_FITTED:
            # joint = (bias marginal) x (feature Gaussian, same normalizer
            # for every bias because the covariance is constant)
            bias_mass = model.nlos.normalization(n_bias=40_001)
            feat_mass = self.gaussian_norm_by_quadrature(model.nlos.cov)
            assert bias_mass * feat_mass == pytest.approx(1.0, abs=1e-6)
            los_mass = self.gaussian_norm_by_quadrature(model.los_features.cov)
            assert los_mass == pytest.approx(1.0, abs=1e-6)
        else:
            assert model.nlos.total_mass() == pytest.approx(1.0, abs=1e-6)
            assert model.los_features.total_mass() == pytest.approx(1.0, abs=1e-6)

    def test_interp_and_raw_same_mass_and_mean(self, nlos_arrays, default_split):
        b, x = nlos_arrays
        _, _, config = default_split
        raw = estimate_density_model(
            b, x[:, 2:3], x[:, 2:3], config.wall_delay, config.bias_max, smoothing=SMOOTH_RAW
        )
        interp = estimate_density_model(
            b, x[:, 2:3], x[:, 2:3], config.wall_delay, config.bias_max, smoothing=SMOOTH_INTERP
        )
        assert raw.nlos.total_mass() == pytest.approx(interp.nlos.total_mass(), abs=1e-9)
        for axis in (0, 1):
            def axis_mean(g, a):
                mass = g.density * g.cell_volume
                c = g.axes[a].centers()
                shape = [1, 1]
                shape[a] = -1
                return float((mass * c.reshape(shape)).sum())
            assert abs(axis_mean(raw.nlos, axis) - axis_mean(interp.nlos, axis)) \
                <= raw.nlos.axes[axis].width


class TestBiasMarginal:
    def test_marginal_integrates_to_one(self):
        m = _toy_model()
        marg = bias_marginal(m.nlos)
        assert marg.total_mass() == pytest.approx(1.0, abs=1e-9)
        assert len(marg.axes) == 1


class TestModelIO:
    def test_histogram_model_round_trip(self, tmp_path, nlos_arrays, default_split):
        b, x = nlos_arrays
        _, _, config = default_split
        model = estimate_density_model(
            b, x, x, config.wall_delay, config.bias_max, smoothing=SMOOTH_INTERP
        )
        path = tmp_path / "model.dm"
        save_density_model(model, path)
        loaded = load_density_model(path)
        assert loaded.p_los == model.p_los
        assert loaded.smoothing == model.smoothing
        assert loaded.feature_names == model.feature_names
        assert np.array_equal(loaded.nlos.density, model.nlos.density)
        assert loaded.nlos.axes == model.nlos.axes
        assert np.array_equal(loaded.los_features.density, model.los_features.density)

    def test_fitted_model_round_trip(self, tmp_path, nlos_arrays, default_split):
        b, x = nlos_arrays
        _, _, config = default_split
        model = estimate_density_model(
            b, x, x, config.wall_delay, config.bias_max, smoothing=SMOOTH_FITTED
        )
        path = tmp_path / "model.dm"
        save_density_model(model, path)
        loaded = load_density_model(path)
        assert isinstance(loaded.nlos, FittedNlos)
        assert loaded.nlos.bias_scale == model.nlos.bias_scale
        assert np.array_equal(loaded.nlos.cov, model.nlos.cov)
        assert np.array_equal(loaded.nlos.mean_slope, model.nlos.mean_slope)
        assert isinstance(loaded.los_features, FittedLos)
        assert np.array_equal(loaded.los_features.mean, model.los_features.mean)

    def test_distance_free_transform_round_trip(self, tmp_path, nlos_arrays, default_split):
        from uwbloc.features import FeatureModelParams

        b, x = nlos_arrays
        _, _, config = default_split
        params = FeatureModelParams(r_max_slope=0.07, tau_ds_offset=3.1e-17)
        model = estimate_density_model(
            b, x[:, 2:3], x[:, 2:3], config.wall_delay, config.bias_max,
            parameterization=PARAM_DISTANCE_FREE, transform=params,
        )
        path = tmp_path / "model.dm"
        save_density_model(model, path)
        loaded = load_density_model(path)
        assert loaded.transform == params
