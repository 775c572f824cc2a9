"""Non-parametric response margin and the y <-> u <-> z transforms.

The margin is a grid-based kernel density estimate with an adaptive
bandwidth: a global bandwidth is picked by minimizing a leave-one-out
squared-error cost over a geometric bandwidth grid, then per-point
bandwidths are scaled by pilot-density^(-1/2). The fitted object is
immutable and carries density, cdf and their monotone-interpolated
inverses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import DataError, ExtrapolationError

U_CLAMP = 1e-6
GRID_SIZE_DEFAULT = 2048
_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class PreTransform:
    """Records a monotone response transform applied before the margin fit."""

    kind: str = "identity"  # "identity" | "log_shift"
    shift: float = 0.0

    def apply(self, y: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return np.asarray(y, dtype=float)
        if self.kind == "log_shift":
            y = np.asarray(y, dtype=float)
            if np.any(y + self.shift <= 0):
                raise DataError(f"log_shift({self.shift}) applied to values <= {-self.shift}")
            return np.log(y + self.shift)
        raise DataError(f"unknown pre_transform {self.kind!r}")

    def label(self) -> str:
        return "identity" if self.kind == "identity" else f"log_shift:{self.shift!r}"

    @staticmethod
    def parse(label: str) -> "PreTransform":
        if label == "identity":
            return PreTransform()
        if label.startswith("log_shift:"):
            return PreTransform("log_shift", float(label.split(":", 1)[1]))
        raise DataError(f"unknown pre_transform label {label!r}")


@dataclass(frozen=True)
class MarginModel:
    grid: np.ndarray       # strictly increasing y values
    density: np.ndarray    # p_Y on the grid, >= 0
    cdf: np.ndarray        # F_Y on the grid, non-decreasing in [0, 1]
    pre_transform: PreTransform = PreTransform()

    def __post_init__(self):
        for name in ("grid", "density", "cdf"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(np.diff(self.grid) <= 0):
            raise DataError("margin grid must be strictly increasing")
        if self.cdf[0] > 1e-4 or self.cdf[-1] < 1 - 1e-4:
            raise DataError("margin cdf does not span [0, 1]")

    def density_at(self, y: np.ndarray) -> np.ndarray:
        return np.interp(np.asarray(y, dtype=float), self.grid, self.density)

    def cdf_at(self, y: np.ndarray) -> np.ndarray:
        return np.interp(np.asarray(y, dtype=float), self.grid, self.cdf)

    def quantile(self, u: np.ndarray) -> np.ndarray:
        return np.interp(np.asarray(u, dtype=float), self.cdf, self.grid)


def _binned_counts(y, grid):
    idx = np.clip(np.searchsorted(grid, y) - 1, 0, len(grid) - 2)
    # linear binning preserves pairwise-distance statistics well enough here
    frac = (y - grid[idx]) / (grid[idx + 1] - grid[idx])
    counts = np.zeros(len(grid))
    np.add.at(counts, idx, 1.0 - frac)
    np.add.at(counts, idx + 1, frac)
    return counts


def _pair_kernel_sum(counts, dx, w):
    """sum_{i,j} phi_w(y_i - y_j) approximated on the binning grid via FFT."""
    g = len(counts)
    lags = np.arange(g) * dx
    ker = np.exp(-0.5 * (lags / w) ** 2) / (w * _SQRT_2PI)
    m = 2 * g
    fc = np.fft.rfft(counts, m)
    fk = np.fft.rfft(np.r_[ker, np.zeros(m - 2 * g + 1), ker[:0:-1][: g - 1]], m)
    conv = np.fft.irfft(fc * fk, m)[:g]
    return float(np.dot(counts, conv))


def _global_bandwidth(y: np.ndarray) -> float:
    """Least-squares leave-one-out cost minimized over a geometric grid."""
    n = y.size
    sd = np.std(y)
    iqr = np.subtract(*np.percentile(y, [75, 25]))
    scale = min(sd, iqr / 1.349) if iqr > 0 else sd
    w0 = 0.9 * scale * n ** (-0.2)
    grid = np.linspace(y.min() - 1e-9, y.max() + 1e-9, 4096)
    counts = _binned_counts(y, grid)
    dx = grid[1] - grid[0]
    best_w, best_c = w0, np.inf
    for w in w0 * np.geomspace(1 / 8, 8, 33):
        if w < 2 * dx:  # binned approximation breaks down below the bin width
            continue
        s_conv = _pair_kernel_sum(counts, dx, np.sqrt(2.0) * w)
        s_ker = _pair_kernel_sum(counts, dx, w)
        cost = s_conv / n**2 - 2.0 * (s_ker - n / (w * _SQRT_2PI)) / (n * (n - 1))
        if cost < best_c:
            best_c, best_w = cost, w
    return best_w


def _kde_on_grid(grid, y, widths):
    out = np.zeros_like(grid)
    step = max(1, 2_000_000 // grid.size)
    for k in range(0, y.size, step):
        z = (grid[None, :] - y[k : k + step, None]) / widths[k : k + step, None]
        out += np.sum(np.exp(-0.5 * z * z) / (widths[k : k + step, None] * _SQRT_2PI), axis=0)
    return out / y.size


def fit_kde_margin(
    y: np.ndarray,
    grid_size: int = GRID_SIZE_DEFAULT,
    pre_transform: PreTransform = PreTransform(),
) -> MarginModel:
    """Fit the response margin by adaptive Gaussian KDE on a regular grid.

    Parameters
    ----------
    y : array
        Response sample, already on the modelling scale (any pre-transform
        has been applied by the caller; it is recorded for provenance only).
    grid_size : int
        Number of grid points; the grid spans the data range extended by
        four pilot bandwidths on each side.
    """
    y = np.asarray(y, dtype=float).ravel()
    if y.size < 10:
        raise DataError("margin fit needs at least 10 observations")
    if not np.all(np.isfinite(y)):
        raise DataError("non-finite response values")
    if np.ptp(y) == 0:
        raise DataError("degenerate margin: response is constant")

    w = _global_bandwidth(y)
    grid = np.linspace(y.min() - 4 * w, y.max() + 4 * w, grid_size)

    pilot = np.maximum(_kde_on_grid(grid, y, np.full(y.size, w)), 1e-300)
    pilot_at_y = np.interp(y, grid, pilot)
    gmean = np.exp(np.mean(np.log(pilot_at_y)))
    widths = w * np.sqrt(gmean / pilot_at_y)

    density = _kde_on_grid(grid, y, widths)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (density[1:] + density[:-1]) * np.diff(grid))])
    total = cdf[-1]
    density = density / total
    cdf = cdf / total
    return MarginModel(grid, density, cdf, pre_transform)


def to_copula_scale(m: MarginModel, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map responses to copula data u = F_Y(y) and pseudo-responses z = ndtri(u)."""
    y = np.asarray(y, dtype=float)
    out = (y < m.grid[0]) | (y > m.grid[-1])
    if np.any(out):
        bad = int(np.argmax(out))
        raise ExtrapolationError(f"response {y.flat[bad]} at index {bad} outside margin grid")
    u = np.clip(m.cdf_at(y), U_CLAMP, 1.0 - U_CLAMP)
    return u, ndtri(u)


def from_copula_scale(m: MarginModel, z: np.ndarray) -> np.ndarray:
    """Inverse map y = F_Y^{-1}(Phi(z)); clamps to the grid ends."""
    return m.quantile(ndtr(np.asarray(z, dtype=float)))


def margin_log_jacobian(m: MarginModel, y: np.ndarray, z: np.ndarray) -> float:
    """sum_i log p_Y(y_i) - log phi(z_i), the constant likelihood factor."""
    dens = np.maximum(m.density_at(y), 1e-300)
    return float(np.sum(np.log(dens)) + 0.5 * np.sum(z * z) + 0.5 * z.size * np.log(2 * np.pi))


MARGIN_FORMAT_VERSION = 1


def save_margin(path, m: MarginModel) -> None:
    with open(path, "w") as fh:
        fh.write(f"margin-v{MARGIN_FORMAT_VERSION}\n")
        fh.write(f"grid_size={m.grid.size}\n")
        fh.write(f"pre_transform={m.pre_transform.label()}\n")
        for y, d, c in zip(m.grid, m.density, m.cdf):
            fh.write(f"{y:.17g} {d:.17g} {c:.17g}\n")


def load_margin(path) -> MarginModel:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != f"margin-v{MARGIN_FORMAT_VERSION}":
            raise DataError(f"unsupported margin file header {header!r}")
        size = int(fh.readline().strip().split("=", 1)[1])
        pre = PreTransform.parse(fh.readline().strip().split("=", 1)[1])
        rows = np.loadtxt(fh)
    if rows.shape != (size, 3):
        raise DataError("margin file body does not match declared grid_size")
    return MarginModel(rows[:, 0], rows[:, 1], rows[:, 2], pre)
