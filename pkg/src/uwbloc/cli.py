"""Command-line entry points for the pipeline stages.

Each stage is its own console script so runs can be scripted and cached:

    gen-corpus  --config corpus.cfg --out corpus.uwb
    extract     --corpus corpus.uwb --out features.csv [--params models.cfg]
    correlate   --features features.csv
    simulate    --corpus corpus.uwb --noise noise.cfg --seed 7 --out obs.csv
    fit-density --features features.csv --mode interp --dims 2 --param dist --out model.dm
    localize    --scenario scenario.csv --algo ml2d --model model.dm
    sweep       --config sweep.cfg --out results.csv [--plot-data plot.tsv]

Config files are flat key=value text; see README for the key lists.
"""

from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from .constants import SPEED_OF_LIGHT
from .corpus import ChannelState, CorpusConfig, generate_corpus, load_corpus, save_corpus
from .density import (
    PARAM_DISTANCE_DEPENDENT,
    PARAM_DISTANCE_FREE,
    SMOOTH_FITTED,
    SMOOTH_INTERP,
    SMOOTH_RAW,
    estimate_density_model,
)
from .features import (
    FeatureModelParams,
    FeatureVector,
    correlation_coefficient,
    extract_all,
    fit_feature_models,
    to_distance_free,
)
from .harness import (
    ALGORITHM_IDS,
    ExperimentConfig,
    build_experiment,
    sweep,
    write_plot_data,
    write_results_csv,
)
from .kvconfig import coerce_dataclass_kwargs, parse_kv_file
from .localize import (
    GridSpec,
    Scenario,
    ls_localize,
    ml_it_localize,
    ml_localize,
    ve_localize,
)
from .modelio import load_density_model, save_density_model
from .ranging import NoiseModel, RangingObservation, simulate_toa


def _fail(msg: str):
    print(f"error: {msg}", file=sys.stderr)
    sys.exit(1)


def _load_corpus_config(path) -> CorpusConfig:
    items = parse_kv_file(path)
    return CorpusConfig(**coerce_dataclass_kwargs(CorpusConfig, items))


def _load_noise_config(path) -> NoiseModel:
    items = parse_kv_file(path)
    return NoiseModel(**coerce_dataclass_kwargs(NoiseModel, items))


def main_gen_corpus(argv=None) -> None:
    ap = argparse.ArgumentParser(prog="gen-corpus", description="Generate a synthetic waveform corpus.")
    ap.add_argument("--config", help="corpus config file (key=value); defaults used when omitted")
    ap.add_argument("--out", required=True, help="output corpus path")
    args = ap.parse_args(argv)
    try:
        config = _load_corpus_config(args.config) if args.config else CorpusConfig()
    except (OSError, ValueError) as exc:
        _fail(str(exc))
    records = generate_corpus(config)
    save_corpus(args.out, records, config)
    n_los = sum(r.channel_state is ChannelState.LOS for r in records)
    print(f"wrote {len(records)} records ({n_los} LOS, {len(records) - n_los} NLOS) to {args.out}")


_FEATURE_COLS = ["x0", "x1", "x2", "x3", "x4", "x5"]


def main_extract(argv=None) -> None:
    ap = argparse.ArgumentParser(prog="extract", description="Extract waveform features to CSV.")
    ap.add_argument("--corpus", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--params", help="feature-model constants (r_max_slope, tau_ds_offset); "
                                     "adds the distance-free triple")
    args = ap.parse_args(argv)
    try:
        records, _ = load_corpus(args.corpus)
        params = None
        if args.params:
            items = parse_kv_file(args.params)
            params = FeatureModelParams(
                r_max_slope=float(items["r_max_slope"]),
                tau_ds_offset=float(items["tau_ds_offset"]),
            )
    except (OSError, ValueError, KeyError) as exc:
        _fail(str(exc))
    header = ["record_id", "state", "d", "b"] + _FEATURE_COLS
    if params is not None:
        header += ["r_max0", "tau_m_slope", "tau_ds_slope"]
    with open(args.out, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, rec in enumerate(records):
            fv = extract_all(rec)
            row = [i, rec.channel_state.value, repr(rec.true_distance), repr(rec.true_bias)]
            row += [repr(float(v)) for v in fv.as_array()]
            if params is not None:
                row += [
                    repr(float(v))
                    for v in to_distance_free(fv, rec.true_distance, params).as_array()
                ]
            w.writerow(row)
    print(f"wrote features for {len(records)} records to {args.out}")


def _read_features_csv(path):
    rows = []
    with open(path, "r", newline="", encoding="ascii") as fh:
        for row in csv.DictReader(fh):
            rows.append(row)
    if not rows:
        raise ValueError(f"{path}: no feature rows")
    state = np.array([r["state"] for r in rows])
    d = np.array([float(r["d"]) for r in rows])
    b = np.array([float(r["b"]) for r in rows])
    x = np.array([[float(r[c]) for c in _FEATURE_COLS] for r in rows])
    return state, d, b, x


def main_correlate(argv=None) -> None:
    ap = argparse.ArgumentParser(prog="correlate",
                                 description="Absolute bias/feature correlations per channel state.")
    ap.add_argument("--features", required=True)
    ap.add_argument("--out", help="output CSV (default: stdout)")
    args = ap.parse_args(argv)
    try:
        state, d, b, x = _read_features_csv(args.features)
    except (OSError, ValueError, KeyError) as exc:
        _fail(str(exc))

    lines = ["state," + ",".join(_FEATURE_COLS) + ",d"]
    for st in ("NLOS", "LOS"):
        sel = state == st
        cells = []
        for col in list(x.T) + [d]:
            try:
                cells.append(f"{abs(correlation_coefficient(b[sel], col[sel])):.3f}")
            except ValueError:
                cells.append("nan")  # e.g. LOS bias is identically zero
        lines.append(f"{st}," + ",".join(cells))
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="ascii") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def main_simulate(argv=None) -> None:
    ap = argparse.ArgumentParser(prog="simulate", description="Synthesize TOA observations from a corpus.")
    ap.add_argument("--corpus", required=True)
    ap.add_argument("--noise", help="noise config file (gamma, sigma_n2, beta)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)
    try:
        records, _ = load_corpus(args.corpus)
        noise = _load_noise_config(args.noise) if args.noise else NoiseModel()
    except (OSError, ValueError) as exc:
        _fail(str(exc))
    rng = np.random.default_rng(args.seed)
    with open(args.out, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow(["record_id", "state", "d", "b", "tau"])
        for i, rec in enumerate(records):
            tau = simulate_toa(rec, noise, rng)
            w.writerow([i, rec.channel_state.value, repr(rec.true_distance),
                        repr(rec.true_bias), repr(float(tau))])
    print(f"wrote {len(records)} observations to {args.out}")


def main_fit_density(argv=None) -> None:
    ap = argparse.ArgumentParser(prog="fit-density", description="Fit a LOS/NLOS density model.")
    ap.add_argument("--features", required=True)
    ap.add_argument("--mode", choices=[SMOOTH_RAW, SMOOTH_INTERP, SMOOTH_FITTED], default=SMOOTH_INTERP)
    ap.add_argument("--dims", type=int, choices=[2, 4], default=2)
    ap.add_argument("--param", choices=[PARAM_DISTANCE_DEPENDENT, PARAM_DISTANCE_FREE],
                    default=PARAM_DISTANCE_DEPENDENT)
    ap.add_argument("--p-los", type=float, default=0.5)
    ap.add_argument("--wall-thickness", type=float, default=0.32,
                    help="obstruction thickness in meters; sets the bias support")
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)
    try:
        state, d, b, x = _read_features_csv(args.features)
        nlos = state == "NLOS"
        los = state == "LOS"
        if not nlos.any() or not los.any():
            raise ValueError("need both NLOS and LOS rows to fit the mixture")
        reduced = x[:, :3]
        transform = None
        if args.param == PARAM_DISTANCE_FREE:
            fvs = [FeatureVector(*row, 0.0, 0.0, 0.0) for row in reduced]
            transform = fit_feature_models(fvs, d).params
            reduced = np.column_stack([
                reduced[:, 0] + transform.r_max_slope * d,
                reduced[:, 1] / d,
                (reduced[:, 2] - transform.tau_ds_offset) / d,
            ])
        cols = slice(2, 3) if args.dims == 2 else slice(0, 3)
        b0 = args.wall_thickness / SPEED_OF_LIGHT
        model = estimate_density_model(
            b[nlos], reduced[nlos, cols], reduced[los, cols],
            bias_lower=b0, bias_upper=5.0 * b0,
            smoothing=args.mode, parameterization=args.param,
            p_los=args.p_los, transform=transform,
        )
    except (OSError, ValueError, KeyError) as exc:
        _fail(str(exc))
    save_density_model(model, args.out)
    print(f"wrote {args.mode} {model.dims}-D ({args.param}) model to {args.out}")


def _read_scenario_csv(path, noise: NoiseModel) -> Scenario:
    anchors = []
    observations = []
    with open(path, "r", newline="", encoding="ascii") as fh:
        for row in csv.DictReader(fh):
            pos = np.array([float(row["anchor_x"]), float(row["anchor_y"])])
            fv = FeatureVector(*(float(row[c]) for c in _FEATURE_COLS))
            anchors.append(pos)
            observations.append(
                RangingObservation(tau=float(row["tau"]), features=fv, anchor_position=pos)
            )
    if not anchors:
        raise ValueError(f"{path}: no scenario rows")
    return Scenario(anchors=np.array(anchors), observations=tuple(observations), noise=noise)


def main_localize(argv=None) -> None:
    ap = argparse.ArgumentParser(prog="localize", description="Run one estimator on a scenario.")
    ap.add_argument("--scenario", required=True,
                    help="CSV with anchor_x,anchor_y,tau,x0..x5 (one row per link)")
    ap.add_argument("--algo", required=True, choices=ALGORITHM_IDS)
    ap.add_argument("--model", help="density model file (.dm); required except for ls")
    ap.add_argument("--noise", help="noise config file")
    ap.add_argument("--grid-step", type=float, default=0.010)
    ap.add_argument("--grid-half-extent", type=float, default=6.0)
    args = ap.parse_args(argv)
    try:
        noise = _load_noise_config(args.noise) if args.noise else NoiseModel()
        scenario = _read_scenario_csv(args.scenario, noise)
        model = None
        if args.algo != "ls":
            if not args.model:
                raise ValueError(f"algorithm {args.algo!r} requires --model")
            model = load_density_model(args.model)
    except (OSError, ValueError, KeyError) as exc:
        _fail(str(exc))

    grid = GridSpec.for_anchors(scenario.anchors, half_extent=args.grid_half_extent,
                                step=args.grid_step)
    if args.algo == "ls":
        est = ls_localize(scenario, grid)
    elif args.algo == "ve":
        est = ve_localize(scenario, model, grid)
    elif args.algo in ("ml4dit", "ml2dit"):
        est = ml_it_localize(scenario, model, grid, algorithm=args.algo)
    else:
        est = ml_localize(scenario, model, grid, eval_mode="profile", algorithm=args.algo)

    print(f"algorithm: {est.algorithm}")
    print(f"theta_hat_m: {est.theta_hat[0]:.6f} {est.theta_hat[1]:.6f}")
    print(f"score: {est.score:.9e}")
    if est.per_link:
        for i, c in enumerate(est.per_link):
            print(f"link {i}: bias_hat_ns={c.bias_hat * 1e9:.4f} "
                  f"p_los={c.p_los:.4f} iters={c.n_iters} converged={c.converged}")


_SWEEP_KEYS = """n_anchors p_los_values trials seed grid_step grid_half_extent
gamma sigma_n2 beta algorithms model_p_los eval_mode los_corpus nlos_corpus""".split()


def main_sweep(argv=None) -> None:
    ap = argparse.ArgumentParser(prog="sweep", description="Monte-Carlo RMSE benchmark vs p_los.")
    ap.add_argument("--config", required=True)
    ap.add_argument("--out", required=True, help="results CSV")
    ap.add_argument("--plot-data", help="wide-format TSV for plotting")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args(argv)
    try:
        items = parse_kv_file(args.config)
        unknown = set(items) - set(_SWEEP_KEYS)
        if unknown:
            raise ValueError(f"unknown sweep config keys: {sorted(unknown)}")
        for key in ("los_corpus", "nlos_corpus"):
            if key not in items:
                raise ValueError(f"sweep config missing {key!r}")
        noise_kw = {}
        for key in ("gamma", "sigma_n2", "beta"):
            if key in items:
                noise_kw[key] = float(items[key])
        cfg_kw: dict = {"noise": NoiseModel(**noise_kw)}
        if "p_los_values" in items:
            cfg_kw["p_los_values"] = tuple(float(v) for v in items["p_los_values"].split(","))
        if "algorithms" in items:
            cfg_kw["algorithms"] = tuple(v.strip() for v in items["algorithms"].split(","))
        for key, conv in (("n_anchors", int), ("trials", int), ("seed", int),
                          ("grid_step", float), ("grid_half_extent", float),
                          ("model_p_los", float)):
            if key in items:
                cfg_kw[key] = conv(items[key])
        if "eval_mode" in items:
            cfg_kw["eval_mode"] = items["eval_mode"]
        config = ExperimentConfig(**cfg_kw)

        los_records, los_cc = load_corpus(items["los_corpus"])
        nlos_records, nlos_cc = load_corpus(items["nlos_corpus"])
        los_records = [r for r in los_records if r.channel_state is ChannelState.LOS]
        nlos_records = [r for r in nlos_records if r.channel_state is ChannelState.NLOS]
        if not nlos_records:
            raise ValueError("NLOS corpus contains no NLOS records")
        exp = build_experiment(config, los_records, nlos_records, nlos_cc)
    except (OSError, ValueError, KeyError) as exc:
        _fail(str(exc))

    rows, _ = sweep(exp, n_jobs=args.jobs)
    write_results_csv(rows, args.out)
    if args.plot_data:
        write_plot_data(rows, args.plot_data)
    print(f"wrote {len(rows)} sweep rows to {args.out}")
