"""Textual serialization of density models (the ``.dm`` format).

Layout: a key=value header (smoothing mode, dimensionality,
parameterization, mixture weight, optional feature transform), then one
section per mixture component. Histogram sections carry their axis specs
followed by one fixed-width decimal cell density per line in row-major
axis order; fitted sections carry the family parameters. All floats are
written with 17 significant digits, so load(save(m)) reproduces every
value bit for bit.
"""

from __future__ import annotations

import numpy as np

from .density import (
    Axis,
    DensityModel,
    FittedLos,
    FittedNlos,
    HistogramGrid,
)
from .features import FeatureModelParams

_MAGIC = "#uwb-density v1"


def _fmt(x: float) -> str:
    return f"{x:.17e}"


def _write_grid(lines: list[str], name: str, grid: HistogramGrid) -> None:
    lines.append(f"[{name}]")
    lines.append(f"kind=histogram")
    lines.append(f"naxes={len(grid.axes)}")
    for i, ax in enumerate(grid.axes):
        lines.append(f"axis{i}={_fmt(ax.lower)},{_fmt(ax.width)},{ax.count}")
    lines.append(f"cells={grid.density.size}")
    lines.extend(_fmt(v) for v in grid.density.ravel())


def _write_fitted_nlos(lines: list[str], name: str, m: FittedNlos) -> None:
    lines.append(f"[{name}]")
    lines.append("kind=fitted-nlos")
    lines.append(f"family={m.family}")
    lines.append(f"bias_shift={_fmt(m.bias_shift)}")
    lines.append(f"bias_scale={_fmt(m.bias_scale)}")
    lines.append("mean_base=" + ",".join(_fmt(v) for v in m.mean_base))
    lines.append("mean_slope=" + ",".join(_fmt(v) for v in m.mean_slope))
    lines.append("cov=" + ";".join(",".join(_fmt(v) for v in row) for row in m.cov))
    lines.append(f"holdout_loglik={_fmt(m.holdout_loglik)}")


def _write_fitted_los(lines: list[str], name: str, m: FittedLos) -> None:
    lines.append(f"[{name}]")
    lines.append("kind=fitted-los")
    lines.append(f"family={m.family}")
    lines.append("mean=" + ",".join(_fmt(v) for v in m.mean))
    lines.append("cov=" + ";".join(",".join(_fmt(v) for v in row) for row in m.cov))
    lines.append(f"holdout_loglik={_fmt(m.holdout_loglik)}")


def save_density_model(model: DensityModel, path) -> None:
    lines = [_MAGIC]
    lines.append(f"smoothing={model.smoothing}")
    lines.append(f"dims={model.dims}")
    lines.append(f"parameterization={model.parameterization}")
    lines.append(f"p_los={_fmt(model.p_los)}")
    lines.append(f"floor={_fmt(model.floor)}")
    lines.append("feature_names=" + ",".join(model.feature_names))
    if model.transform is not None:
        lines.append(f"transform_r_max_slope={_fmt(model.transform.r_max_slope)}")
        lines.append(f"transform_tau_ds_offset={_fmt(model.transform.tau_ds_offset)}")
    if isinstance(model.nlos, FittedNlos):
        _write_fitted_nlos(lines, "nlos", model.nlos)
        _write_fitted_los(lines, "los-features", model.los_features)
    else:
        _write_grid(lines, "nlos", model.nlos)
        _write_grid(lines, "los-features", model.los_features)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


class _Reader:
    def __init__(self, lines: list[str]):
        self.lines = lines
        self.pos = 0

    def next(self) -> str:
        if self.pos >= len(self.lines):
            raise ValueError("unexpected end of density-model file")
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def expect_kv(self, key: str) -> str:
        line = self.next()
        k, _, v = line.partition("=")
        if k != key:
            raise ValueError(f"expected key {key!r}, found {k!r}")
        return v


def _read_section(r: _Reader, name: str):
    head = r.next()
    if head != f"[{name}]":
        raise ValueError(f"expected section [{name}], found {head!r}")
    kind = r.expect_kv("kind")
    if kind == "histogram":
        naxes = int(r.expect_kv("naxes"))
        axes = []
        for i in range(naxes):
            lo, width, count = r.expect_kv(f"axis{i}").split(",")
            axes.append(Axis(float(lo), float(width), int(count)))
        ncells = int(r.expect_kv("cells"))
        vals = np.array([float(r.next()) for _ in range(ncells)])
        shape = tuple(a.count for a in axes)
        return HistogramGrid(axes=tuple(axes), density=vals.reshape(shape))
    if kind == "fitted-nlos":
        family = r.expect_kv("family")
        shift = float(r.expect_kv("bias_shift"))
        scale = float(r.expect_kv("bias_scale"))
        base = np.array([float(v) for v in r.expect_kv("mean_base").split(",")])
        slope = np.array([float(v) for v in r.expect_kv("mean_slope").split(",")])
        cov = np.array(
            [[float(v) for v in row.split(",")] for row in r.expect_kv("cov").split(";")]
        )
        hold = float(r.expect_kv("holdout_loglik"))
        return FittedNlos(
            family=family, bias_shift=shift, bias_scale=scale, mean_base=base,
            mean_slope=slope, cov=cov, holdout_loglik=hold,
        )
    if kind == "fitted-los":
        family = r.expect_kv("family")
        mean = np.array([float(v) for v in r.expect_kv("mean").split(",")])
        cov = np.array(
            [[float(v) for v in row.split(",")] for row in r.expect_kv("cov").split(";")]
        )
        hold = float(r.expect_kv("holdout_loglik"))
        return FittedLos(family=family, mean=mean, cov=cov, holdout_loglik=hold)
    raise ValueError(f"unknown section kind {kind!r}")


def load_density_model(path) -> DensityModel:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    r = _Reader(lines)
    if r.next() != _MAGIC:
        raise ValueError("not a density-model file")
    smoothing = r.expect_kv("smoothing")
    r.expect_kv("dims")  # informational; dimensionality is implied by the sections
    parameterization = r.expect_kv("parameterization")
    p_los = float(r.expect_kv("p_los"))
    floor = float(r.expect_kv("floor"))
    feature_names = tuple(r.expect_kv("feature_names").split(","))
    transform = None
    if r.lines[r.pos].startswith("transform_r_max_slope="):
        slope = float(r.expect_kv("transform_r_max_slope"))
        offset = float(r.expect_kv("transform_tau_ds_offset"))
        transform = FeatureModelParams(r_max_slope=slope, tau_ds_offset=offset)
    nlos = _read_section(r, "nlos")
    los = _read_section(r, "los-features")
    return DensityModel(
        nlos=nlos,
        los_features=los,
        p_los=p_los,
        parameterization=parameterization,
        smoothing=smoothing,
        feature_names=feature_names,
        transform=transform,
        floor=floor,
    )
