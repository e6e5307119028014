"""Monte-Carlo RMSE benchmark over the LOS probability.

Protocol per trial: the mobile station sits at the origin; for each of the
``n_anchors`` links a corpus record is drawn (LOS with probability p_los),
the anchor is placed at that record's measured distance on a fixed angular
fan, a TOA is synthesized from the record's ground truth plus ranging
noise, and the record's waveform features are attached. Every configured
algorithm then runs on the identical scenario. Aggregating squared errors
over trials yields one RMSE point per (algorithm, p_los).

Density models are built once from the corpora (the same data the trials
draw from) and shared across the sweep. Trials are independent given their
seed-derived rng streams, so they may be distributed over processes; the
reduction is order-independent.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .constants import SPEED_OF_LIGHT
from .corpus import ChannelState, CorpusConfig, WaveformRecord
from .density import (
    DensityModel,
    PARAM_DISTANCE_DEPENDENT,
    PARAM_DISTANCE_FREE,
    SMOOTH_FITTED,
    SMOOTH_INTERP,
    estimate_density_model,
)
from .features import FeatureVector, extract_all, fit_feature_models
from .localize import (
    GridSpec,
    PositionEstimate,
    Scenario,
    ls_localize,
    ml_it_localize,
    ml_localize,
    ve_localize,
)
from .ranging import NoiseModel, RangingObservation, simulate_toa

ALGORITHM_IDS = ("ls", "ve", "ml4d", "ml2d", "ml2did", "ml4df", "ml4dit", "ml2dit")

# density model each algorithm consumes (None: no model needed)
_ALGO_MODEL = {
    "ls": None,
    "ve": "interp2d",
    "ml4d": "interp4d",
    "ml2d": "interp2d",
    "ml2did": "interp2d_free",
    "ml4df": "fitted4d",
    "ml4dit": "interp4d",
    "ml2dit": "interp2d",
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Benchmark settings; corpora and models are bound separately."""

    n_anchors: int = 3
    p_los_values: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    trials: int = 1000
    seed: int = 424242
    grid_step: float = 0.010
    grid_half_extent: float = 2.5
    noise: NoiseModel = field(default_factory=NoiseModel)
    algorithms: tuple[str, ...] = ALGORITHM_IDS
    model_p_los: float = 0.5
    eval_mode: str = "profile"
    noise_free: bool = False  # skip the TOA noise draw (validation runs)

    def __post_init__(self) -> None:
        if self.n_anchors < 3:
            raise ValueError("need at least 3 anchors")
        if self.trials < 1:
            raise ValueError("need at least one trial per sweep point")
        if any(not (0.0 <= p <= 1.0) for p in self.p_los_values):
            raise ValueError("p_los values must lie in [0, 1]")
        unknown = set(self.algorithms) - set(ALGORITHM_IDS)
        if unknown:
            raise ValueError(f"unknown algorithm ids: {sorted(unknown)}")


@dataclass(frozen=True)
class TrialResult:
    algorithm: str
    p_los: float
    trial: int
    theta_hat: np.ndarray  # (2,) m
    squared_error: float  # m^2


@dataclass(frozen=True)
class SweepRow:
    algorithm: str
    p_los: float
    trials: int
    rmse: float  # m
    rmse_stderr: float  # m


@dataclass
class Experiment:
    """Loaded corpora, precomputed features, and shared density models."""

    config: ExperimentConfig
    los_records: list[WaveformRecord]
    nlos_records: list[WaveformRecord]
    los_features: list[FeatureVector]
    nlos_features: list[FeatureVector]
    models: dict[str, DensityModel]
    estimators: dict | None = None  # test hook: algorithm id -> callable(scenario, grid)


def place_anchor(i: int, n_anchors: int, d: float) -> np.ndarray:
    """Anchor i (1-based) on the angular fan at distance d from the origin:
    (d sin(2 pi (i-1)/Na), d cos(2 pi (i-1)/Na))."""
    if not (1 <= i <= n_anchors):
        raise ValueError("anchor index out of range")
    if d <= 0:
        raise ValueError("anchor distance must be positive")
    ang = 2.0 * math.pi * (i - 1) / n_anchors
    return np.array([d * math.sin(ang), d * math.cos(ang)])


def build_models(
    los_records,
    nlos_records,
    corpus_config: CorpusConfig,
    p_los: float = 0.5,
    los_features=None,
    nlos_features=None,
) -> tuple[dict[str, DensityModel], list[FeatureVector], list[FeatureVector]]:
    """Estimate the density-model suite the algorithm roster consumes.

    Returns the model dictionary plus the per-record feature vectors (which
    the caller will want again when drawing trial observations).
    """
    if los_features is None:
        los_features = [extract_all(r) for r in los_records]
    if nlos_features is None:
        nlos_features = [extract_all(r) for r in nlos_records]

    fit = fit_feature_models(
        los_features + nlos_features,
        [r.true_distance for r in los_records] + [r.true_distance for r in nlos_records],
    )
    b0 = corpus_config.wall_delay
    b_hi = corpus_config.bias_max
    nlos_bias = np.array([r.true_bias for r in nlos_records])
    nlos_x = np.array([f.reduced for f in nlos_features])
    los_x = np.array([f.reduced for f in los_features])
    nlos_d = np.array([r.true_distance for r in nlos_records])
    los_d = np.array([r.true_distance for r in los_records])

    def free(x, d):
        p = fit.params
        return np.column_stack(
            [x[:, 0] + p.r_max_slope * d, x[:, 1] / d, (x[:, 2] - p.tau_ds_offset) / d]
        )

    nlos_xf = free(nlos_x, nlos_d)
    los_xf = free(los_x, los_d)

    models = {
        "interp2d": estimate_density_model(
            nlos_bias, nlos_x[:, 2:3], los_x[:, 2:3], b0, b_hi,
            smoothing=SMOOTH_INTERP, parameterization=PARAM_DISTANCE_DEPENDENT, p_los=p_los,
        ),
        "interp4d": estimate_density_model(
            nlos_bias, nlos_x, los_x, b0, b_hi,
            smoothing=SMOOTH_INTERP, parameterization=PARAM_DISTANCE_DEPENDENT, p_los=p_los,
        ),
        "interp2d_free": estimate_density_model(
            nlos_bias, nlos_xf[:, 2:3], los_xf[:, 2:3], b0, b_hi,
            smoothing=SMOOTH_INTERP, parameterization=PARAM_DISTANCE_FREE, p_los=p_los,
            transform=fit.params,
        ),
        "fitted4d": estimate_density_model(
            nlos_bias, nlos_x, los_x, b0, b_hi,
            smoothing=SMOOTH_FITTED, parameterization=PARAM_DISTANCE_DEPENDENT, p_los=p_los,
        ),
    }
    return models, los_features, nlos_features


def build_experiment(
    config: ExperimentConfig,
    los_records,
    nlos_records,
    corpus_config: CorpusConfig,
) -> Experiment:
    """Precompute features and density models for a sweep."""
    needed = any(_ALGO_MODEL[a] is not None for a in config.algorithms)
    los_feats = [extract_all(r) for r in los_records]
    nlos_feats = [extract_all(r) for r in nlos_records]
    models: dict[str, DensityModel] = {}
    if needed:
        models, _, _ = build_models(
            los_records,
            nlos_records,
            corpus_config,
            p_los=config.model_p_los,
            los_features=los_feats,
            nlos_features=nlos_feats,
        )
    return Experiment(
        config=config,
        los_records=list(los_records),
        nlos_records=list(nlos_records),
        los_features=los_feats,
        nlos_features=nlos_feats,
        models=models,
    )


def _run_algorithm(
    exp: Experiment, algo: str, scenario: Scenario, grid: GridSpec
) -> PositionEstimate:
    if exp.estimators is not None and algo in exp.estimators:
        return exp.estimators[algo](scenario, grid)
    cfg = exp.config
    model = exp.models.get(_ALGO_MODEL[algo]) if _ALGO_MODEL[algo] else None
    if algo == "ls":
        return ls_localize(scenario, grid)
    if algo == "ve":
        return ve_localize(scenario, model, grid)
    if algo in ("ml4dit", "ml2dit"):
        return ml_it_localize(scenario, model, grid, algorithm=algo)
    return ml_localize(scenario, model, grid, eval_mode=cfg.eval_mode, algorithm=algo)


def run_trial(exp: Experiment, p_los: float, rng: np.random.Generator, trial: int = 0) -> list[TrialResult]:
    """One Monte-Carlo draw: build a shared scenario, run every algorithm."""
    cfg = exp.config
    if p_los > 0.0 and not exp.los_records:
        raise ValueError("p_los > 0 requires a LOS corpus")
    if p_los < 1.0 and not exp.nlos_records:
        raise ValueError("p_los < 1 requires an NLOS corpus")

    anchors = np.empty((cfg.n_anchors, 2))
    observations = []
    for i in range(1, cfg.n_anchors + 1):
        is_los = rng.random() < p_los
        records = exp.los_records if is_los else exp.nlos_records
        feats = exp.los_features if is_los else exp.nlos_features
        j = int(rng.integers(len(records)))
        rec = records[j]
        d = rec.true_distance
        anchors[i - 1] = place_anchor(i, cfg.n_anchors, d)
        if cfg.noise_free:
            tau = d / SPEED_OF_LIGHT + rec.true_bias
        else:
            tau = simulate_toa(rec, cfg.noise, rng)
        observations.append(
            RangingObservation(
                tau=tau, features=feats[j], anchor_position=anchors[i - 1], truth=rec
            )
        )

    scenario = Scenario(
        anchors=anchors, observations=tuple(observations), noise=cfg.noise
    )
    grid = GridSpec.for_anchors(anchors, half_extent=cfg.grid_half_extent, step=cfg.grid_step)
    out = []
    for algo in cfg.algorithms:
        est = _run_algorithm(exp, algo, scenario, grid)
        err2 = float(est.theta_hat @ est.theta_hat)  # true position is the origin
        out.append(
            TrialResult(
                algorithm=algo, p_los=p_los, trial=trial, theta_hat=est.theta_hat,
                squared_error=err2,
            )
        )
    return out


def _trial_rng(seed: int, p_index: int, trial: int) -> np.random.Generator:
    """Per-trial stream addressed by (sweep point, trial); execution-order free."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(p_index, trial)))


def _run_point(exp: Experiment, p_index: int, p_los: float, trials: range) -> list[TrialResult]:
    out = []
    for t in trials:
        out.extend(run_trial(exp, p_los, _trial_rng(exp.config.seed, p_index, t), trial=t))
    return out


def rmse_of(results: list[TrialResult]) -> tuple[float, float]:
    """RMSE and its delta-method standard error from per-trial squared errors."""
    se = np.array([r.squared_error for r in results])
    mse = float(se.mean())
    rmse = math.sqrt(mse)
    if se.size < 2 or rmse == 0.0:
        return rmse, 0.0
    stderr_mse = float(se.std(ddof=1)) / math.sqrt(se.size)
    return rmse, stderr_mse / (2.0 * rmse)


def sweep(exp: Experiment, n_jobs: int = 1) -> tuple[list[SweepRow], list[TrialResult]]:
    """Run the full benchmark; returns aggregate rows plus raw trial results.

    ``n_jobs > 1`` distributes whole trials over processes; per-trial rng
    streams are addressed by (sweep point, trial index), so results are
    identical to a serial run.
    """
    cfg = exp.config
    all_results: list[TrialResult] = []
    if n_jobs <= 1:
        for ip, p in enumerate(cfg.p_los_values):
            all_results.extend(_run_point(exp, ip, p, range(cfg.trials)))
    else:
        jobs = []
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            for ip, p in enumerate(cfg.p_los_values):
                chunk = max(1, math.ceil(cfg.trials / n_jobs))
                for lo in range(0, cfg.trials, chunk):
                    jobs.append(
                        pool.submit(_run_point, exp, ip, p, range(lo, min(lo + chunk, cfg.trials)))
                    )
            for job in jobs:  # submission order keeps the reduction deterministic
                all_results.extend(job.result())

    rows = []
    for ip, p in enumerate(cfg.p_los_values):
        for algo in cfg.algorithms:
            sel = [r for r in all_results if r.p_los == p and r.algorithm == algo]
            rmse, stderr = rmse_of(sel)
            rows.append(
                SweepRow(algorithm=algo, p_los=p, trials=len(sel), rmse=rmse, rmse_stderr=stderr)
            )
    return rows, all_results


def write_results_csv(rows: list[SweepRow], path) -> None:
    """Long-format sweep results: algorithm,p_los,trials,rmse_m,rmse_stderr_m."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("algorithm,p_los,trials,rmse_m,rmse_stderr_m\n")
        for r in rows:
            fh.write(f"{r.algorithm},{r.p_los:.6g},{r.trials},{r.rmse:.9e},{r.rmse_stderr:.9e}\n")


def write_plot_data(rows: list[SweepRow], path) -> None:
    """Wide-format TSV: one p_los per row, one RMSE column per algorithm."""
    algos = sorted({r.algorithm for r in rows})
    ps = sorted({r.p_los for r in rows})
    table = {(r.algorithm, r.p_los): r.rmse for r in rows}
    with open(path, "w", encoding="ascii") as fh:
        fh.write("p_los\t" + "\t".join(algos) + "\n")
        for p in ps:
            cells = [f"{table.get((a, p), math.nan):.9e}" for a in algos]
            fh.write(f"{p:.6g}\t" + "\t".join(cells) + "\n")
