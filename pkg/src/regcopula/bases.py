"""Basis-function design matrices for the mean and log-variance functions.

Two basis families are supported: cubic B-splines on equally spaced knots
for a scalar covariate, and thin-plate radial bases (optionally periodic in
selected dimensions) for multivariate covariates on the unit cube.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .errors import ConfigurationError, DataError, ExtrapolationError

BSPLINE_DEGREE = 3


@dataclass(frozen=True)
class KnotGrid:
    """Knot locations plus the metadata needed to re-evaluate a basis.

    For ``kind == "bspline_uniform"``, ``knots`` holds the strictly
    increasing breakpoints (boundary knots are repeated internally when the
    basis is evaluated). For ``kind == "rbf_sampled"``, ``knots`` is a
    ``(p, covariate_dim)`` array of distinct knot points.
    """

    knots: np.ndarray
    kind: str  # "bspline_uniform" | "rbf_sampled"
    covariate_dim: int
    periodic_dims: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", knots)
        if self.kind == "bspline_uniform":
            if knots.ndim != 1 or np.any(np.diff(knots) <= 0):
                raise ConfigurationError("B-spline breakpoints must be strictly increasing")
            if self.covariate_dim != 1:
                raise ConfigurationError("B-spline bases are univariate")
        elif self.kind == "rbf_sampled":
            if knots.ndim != 2 or knots.shape[1] != self.covariate_dim:
                raise ConfigurationError("RBF knots must be (p, covariate_dim)")
            if len(np.unique(knots, axis=0)) != knots.shape[0]:
                raise ConfigurationError("RBF knots must be distinct points")
            if not all(1 <= d <= self.covariate_dim for d in self.periodic_dims):
                raise ConfigurationError("periodic_dims out of range")
        else:
            raise ConfigurationError(f"unknown knot kind {self.kind!r}")

    @property
    def basis_size(self) -> int:
        if self.kind == "bspline_uniform":
            return len(self.knots) + BSPLINE_DEGREE - 1
        return self.knots.shape[0]


def bspline_knots(x: np.ndarray, p: int) -> KnotGrid:
    """Equally spaced breakpoints spanning the covariate range for p basis functions.

    Cubic clamped splines with p basis functions have p - 3 interior
    intervals, hence p - 2 breakpoints including both boundaries.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 1:
        raise ConfigurationError("x must be a non-empty 1-d array")
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite covariate values")
    if p < 4:
        raise ConfigurationError(f"cubic B-spline basis needs p >= 4, got {p}")
    lo, hi = float(np.min(x)), float(np.max(x))
    if hi <= lo:
        raise DataError("degenerate covariate range: all values equal")
    return KnotGrid(np.linspace(lo, hi, p - 2), "bspline_uniform", 1)


def bspline_design_from_knots(x: np.ndarray, grid: KnotGrid) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite covariate values")
    bp = grid.knots
    t = np.r_[[bp[0]] * (BSPLINE_DEGREE + 1), bp[1:-1], [bp[-1]] * (BSPLINE_DEGREE + 1)]
    lo, hi = bp[0], bp[-1]
    if np.any(x < lo) or np.any(x > hi):
        bad = int(np.argmax((x < lo) | (x > hi)))
        raise ExtrapolationError(
            f"covariate value {x[bad]} at row {bad} outside basis range [{lo}, {hi}]"
        )
    return BSpline.design_matrix(x, t, BSPLINE_DEGREE).toarray()


def build_bspline_design(x: np.ndarray, p: int) -> tuple[np.ndarray, KnotGrid]:
    """Cubic B-spline design on equally spaced clamped knots over the data range.

    Rows sum to one everywhere on the covariate range (partition of unity).
    """
    grid = bspline_knots(x, p)
    return bspline_design_from_knots(x, grid), grid


def _rbf_transform(X: np.ndarray, periodic_dims: frozenset[int]) -> np.ndarray:
    # Periodic dimensions are handled in the distance, not here; this only validates.
    if X.ndim != 2:
        raise ConfigurationError("covariates must be a 2-d array")
    if np.any(X < -1e-12) or np.any(X > 1 + 1e-12):
        bad = int(np.argmax(np.any((X < -1e-12) | (X > 1 + 1e-12), axis=1)))
        raise DataError(f"covariate row {bad} outside [0, 1]: scaling contract violated")
    return X


def build_rbf_design(X: np.ndarray, knots: KnotGrid) -> np.ndarray:
    """Thin-plate radial basis b_j(x) = r^2 log(r) at distance r to knot j.

    Distances are Euclidean after mapping each periodic coordinate
    difference t to sin(pi * t), which makes the basis periodic with
    period 1 in that coordinate. Entries with r = 0 are 0 (the r^2 log r
    limit). Covariates must be scaled to [0, 1] per dimension.
    """
    if knots.kind != "rbf_sampled":
        raise ConfigurationError("build_rbf_design needs an rbf_sampled KnotGrid")
    X = _rbf_transform(np.asarray(X, dtype=float), knots.periodic_dims)
    if X.shape[1] != knots.covariate_dim:
        raise ConfigurationError("covariate dimension does not match knot grid")
    diff = X[:, None, :] - knots.knots[None, :, :]
    for d in knots.periodic_dims:
        diff[:, :, d - 1] = np.sin(np.pi * diff[:, :, d - 1])
    r2 = np.sum(diff * diff, axis=2)
    out = np.zeros_like(r2)
    pos = r2 > 0.0
    out[pos] = 0.5 * r2[pos] * np.log(r2[pos])  # r^2 log r = (1/2) r^2 log r^2
    return out


def sample_knots_stratified(
    X: np.ndarray,
    p: int,
    stratum_dim: int,
    seed: int,
    n_strata: int | None = None,
    periodic_dims: frozenset[int] | set[int] = frozenset(),
) -> KnotGrid:
    """Sample p distinct covariate rows, allocated equally across equal-width
    strata of one covariate dimension.

    The remainder of p modulo the stratum count goes to the earliest strata;
    strata with too few points spill their shortfall into later ones. The
    result is deterministic given the seed.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ConfigurationError("covariates must be a 2-d array")
    if not (0 <= stratum_dim < X.shape[1]):
        raise ConfigurationError(f"stratum_dim {stratum_dim} out of range")
    rows = np.unique(X, axis=0)
    if p > rows.shape[0]:
        raise ConfigurationError(f"cannot sample {p} knots from {rows.shape[0]} distinct rows")
    if p == rows.shape[0]:
        chosen = rows
    else:
        rng = np.random.default_rng(seed)
        col = rows[:, stratum_dim]
        m = n_strata if n_strata is not None else min(p, 48)
        edges = np.linspace(col.min(), col.max(), m + 1)
        which = np.clip(np.searchsorted(edges, col, side="right") - 1, 0, m - 1)
        quota = np.full(m, p // m)
        quota[: p % m] += 1
        members = [np.flatnonzero(which == s) for s in range(m)]
        picked: list[np.ndarray] = []
        shortfall = 0
        for s in range(m):
            want = int(quota[s]) + shortfall
            take = min(want, members[s].size)
            shortfall = want - take
            if take:
                picked.append(rng.choice(members[s], size=take, replace=False))
        if shortfall:  # late strata were empty; sweep remaining capacity
            used = np.concatenate(picked) if picked else np.empty(0, dtype=int)
            free = np.setdiff1d(np.arange(rows.shape[0]), used)
            picked.append(rng.choice(free, size=shortfall, replace=False))
        idx = np.sort(np.concatenate(picked))
        chosen = rows[idx]
    order = np.lexsort(chosen.T[::-1])
    return KnotGrid(chosen[order], "rbf_sampled", X.shape[1], frozenset(periodic_dims))


def evaluate_basis(grid: KnotGrid, X: np.ndarray) -> np.ndarray:
    """Evaluate the basis described by a KnotGrid at new covariate values."""
    if grid.kind == "bspline_uniform":
        return bspline_design_from_knots(np.asarray(X, dtype=float).reshape(-1), grid)
    return build_rbf_design(np.atleast_2d(np.asarray(X, dtype=float)), grid)


@dataclass(frozen=True)
class DesignMatrices:
    """Mean (B) and log-variance (V) design matrices with a dedup cache.

    ``unique_b``/``unique_v`` hold the distinct rows and ``b_index``/
    ``v_index`` map each observation to its unique row, so per-row work
    (prior solves in particular) is done once per distinct covariate value.
    """

    B: np.ndarray
    V: np.ndarray
    unique_b: np.ndarray
    b_index: np.ndarray
    unique_v: np.ndarray
    v_index: np.ndarray

    def __post_init__(self):
        for name in ("B", "V"):
            m = getattr(self, name)
            if not np.all(np.isfinite(m)):
                raise DataError(f"non-finite entries in design matrix {name}")
        if self.B.shape[0] != self.V.shape[0]:
            raise ConfigurationError("B and V must have the same number of rows")

    @property
    def n(self) -> int:
        return self.B.shape[0]

    @property
    def p1(self) -> int:
        return self.B.shape[1]

    @property
    def p2(self) -> int:
        return self.V.shape[1]

    def b_row(self, i: int) -> np.ndarray:
        return self.B[i]

    def v_row(self, i: int) -> np.ndarray:
        return self.V[i]


def make_design(B: np.ndarray, V: np.ndarray) -> DesignMatrices:
    B = np.asarray(B, dtype=float)
    V = np.asarray(V, dtype=float)
    ub, bi = np.unique(B, axis=0, return_inverse=True)
    uv, vi = np.unique(V, axis=0, return_inverse=True)
    return DesignMatrices(B, V, ub, bi.ravel(), uv, vi.ravel())


def append_points(design: DesignMatrices, b_rows: np.ndarray, v_rows: np.ndarray) -> DesignMatrices:
    """Design with extra evaluation points appended (for pairwise dependence)."""
    B = np.vstack([design.B, np.atleast_2d(b_rows)])
    V = np.vstack([design.V, np.atleast_2d(v_rows)])
    return make_design(B, V)


KNOTS_FORMAT_VERSION = 1


def save_knot_grid(path, grid: KnotGrid) -> None:
    with open(path, "w") as fh:
        fh.write(f"knots-v{KNOTS_FORMAT_VERSION}\n")
        fh.write(f"kind={grid.kind}\n")
        fh.write(f"covariate_dim={grid.covariate_dim}\n")
        fh.write("periodic_dims=" + ",".join(str(d) for d in sorted(grid.periodic_dims)) + "\n")
        rows = np.atleast_2d(grid.knots) if grid.kind == "rbf_sampled" else grid.knots[:, None]
        for row in rows:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_knot_grid(path) -> KnotGrid:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != f"knots-v{KNOTS_FORMAT_VERSION}":
            raise DataError(f"unsupported knots header {header!r}")
        kind = fh.readline().strip().split("=", 1)[1]
        dim = int(fh.readline().strip().split("=", 1)[1])
        pd_raw = fh.readline().strip().split("=", 1)[1]
        periodic = frozenset(int(s) for s in pd_raw.split(",") if s)
        body = np.loadtxt(fh, ndmin=2)
    knots = body[:, 0] if kind == "bspline_uniform" else body
    return KnotGrid(knots, kind, dim, periodic)
