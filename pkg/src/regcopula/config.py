"""Run configuration and CSV data ingestion.

Configuration lives in a flat key=value text file, overridable from the
command line. Defaults: the spline models use p1 = 22 and p2 = 12 basis
functions with AR(2) priors; the radial-basis model uses 240 mean and 96
variance knots with horseshoe priors; the HMC target acceptance is 0.75
with unit trajectory length; VB runs 10,000 steps with K = 5 factors.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigurationError, DataError
from .margins import PreTransform


@dataclass
class RunConfig:
    model: str = "hpsc"      # psc | hpsc | hrbfc
    estimator: str = "vb"    # mcmc | vb
    prior: str | None = None  # ar2 | horseshoe; default derived from model
    p1: int = 22
    p2: int | None = None    # derived: hpsc -> 12, hrbfc -> knots_var, psc -> 0
    seed: int = 0
    # margin
    margin_grid_size: int = 2048
    pre_transform: str = "identity"
    # mcmc
    burn_in: int = 40_000
    draws: int = 50_000
    thin: int = 1
    m_adapt: int | None = None
    delta: float = 0.75
    iota: float = 1.0
    b_tau2: float = 10.0
    # vb
    vb_steps: int = 10_000
    vb_factors: int = 5
    # radial bases
    knots_mean: int = 240
    knots_var: int = 96
    stratum_dim: int = 1        # 1-based covariate index used for stratification
    periodic_dims: tuple[int, ...] = ()  # 1-based covariate indices
    knot_strata: int | None = None
    # data mapping
    response: str = "y"
    x_columns: tuple[str, ...] = ()
    w_columns: tuple[str, ...] | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.model not in ("psc", "hpsc", "hrbfc"):
            raise ConfigurationError(f"unknown model {self.model!r}")
        if self.estimator not in ("mcmc", "vb"):
            raise ConfigurationError(f"unknown estimator {self.estimator!r}")
        derived_prior = "horseshoe" if self.model == "hrbfc" else "ar2"
        if self.prior is None:
            self.prior = derived_prior
        if self.prior != derived_prior:
            raise ConfigurationError(
                f"model {self.model} requires the {derived_prior} prior, got {self.prior}"
            )
        if self.model == "hrbfc":
            if self.estimator == "mcmc":
                raise ConfigurationError("hrbfc is fit with vb; the exact sampler covers psc/hpsc")
            self.p1 = self.knots_mean
            if self.p2 is None:
                self.p2 = self.knots_var
            elif self.p2 != self.knots_var:
                raise ConfigurationError("for hrbfc, p2 is the variance knot count")
        elif self.model == "psc":
            if self.p2 not in (None, 0):
                raise ConfigurationError("psc has no variance basis; leave p2 unset")
            if self.w_columns is not None:
                raise ConfigurationError("psc has no variance covariates; leave w_columns unset")
            self.p2 = 0
        else:
            if self.p2 is None:
                self.p2 = 12
        valid_dims = range(1, max(len(self.x_columns), 1) + 1)
        if self.periodic_dims and not set(self.periodic_dims) <= set(valid_dims) and self.x_columns:
            raise ConfigurationError(f"periodic_dims {self.periodic_dims} out of range")

    def pre(self) -> PreTransform:
        return PreTransform.parse(self.pre_transform)


_TUPLE_KEYS = {"x_columns", "w_columns", "periodic_dims"}
_OPTIONAL_INT_KEYS = {"p2", "m_adapt", "knot_strata"}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _TUPLE_KEYS:
        if raw.lower() == "none":
            return None
        if not raw:
            return ()
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if key == "periodic_dims":
            return tuple(int(s) for s in items)
        return tuple(items)
    if raw.lower() in ("none", ""):
        return None
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            continue
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    return raw


def parse_config_file(path) -> dict:
    values: dict = {}
    names = {f.name for f in fields(RunConfig)}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = line.split("=", 1)
            key = key.strip()
            if key not in names:
                raise ConfigurationError(f"{path}:{lineno}: unknown configuration key {key!r}")
            values[key] = _parse_value(key, raw)
    return values


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**merged)


def config_echo(config: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


@dataclass
class Dataset:
    y: np.ndarray
    X: np.ndarray
    W: np.ndarray
    response_name: str
    x_names: list[str]
    w_names: list[str]
    n_rejected: int = 0

    @property
    def n(self) -> int:
        return self.y.size

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.y[idx], self.X[idx], self.W[idx],
                       self.response_name, self.x_names, self.w_names)


def ingest_csv(path, config: RunConfig) -> Dataset:
    """Read a headered CSV into a typed dataset.

    Rows with an empty mapped field are rejected (counted); a non-empty but
    non-numeric cell is an error naming the row and column. When w_columns
    is unset the variance covariates alias the mean covariates.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        x_cols = list(config.x_columns) or [h for h in header if h != config.response]
        w_cols = list(config.w_columns) if config.w_columns is not None else list(x_cols)
        needed = [config.response] + x_cols + (w_cols if config.w_columns is not None else [])
        missing = [c for c in needed if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}; header has {header}")
        pos = {c: header.index(c) for c in set(needed) | set(w_cols)}

        ys, xs, ws = [], [], []
        rejected = 0
        for rownum, row in enumerate(reader, start=2):
            if not any(cell.strip() for cell in row):
                continue
            cells = {}
            skip = False
            for c in set([config.response] + x_cols + w_cols):
                raw = row[pos[c]].strip() if pos[c] < len(row) else ""
                if raw == "":
                    skip = True
                    break
                try:
                    cells[c] = float(raw)
                except ValueError:
                    raise DataError(
                        f"{path}: non-numeric value {raw!r} at row {rownum}, column {c!r}"
                    ) from None
            if skip:
                rejected += 1
                continue
            ys.append(cells[config.response])
            xs.append([cells[c] for c in x_cols])
            ws.append([cells[c] for c in w_cols])
    if not ys:
        raise DataError(f"{path}: no usable rows")
    y = config.pre().apply(np.array(ys))
    ds = Dataset(y, np.array(xs), np.array(ws), config.response, x_cols, w_cols, rejected)
    if ds.n < 10:
        raise DataError(f"{path}: need at least 10 rows, got {ds.n}")
    return ds
