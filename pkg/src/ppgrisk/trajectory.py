"""Latent health-trajectory export: 2-D projection of per-30 s embedding
sequences, Savitzky-Golay smoothing, and plot-ready files.

The built-in projection is a deterministic top-2 principal-component map
(sign convention: first nonzero loading positive). Precomputed coordinates
from any external embedder can be substituted through a two-column file.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericError


@dataclass
class TrajectoryPath:
    points: np.ndarray      # (n, 2) raw projected coordinates
    smoothed: np.ndarray    # (n, 2) after smoothing
    window_length: int
    poly_order: int

    def __post_init__(self):
        if self.smoothed.shape != self.points.shape:
            raise DataError("smoothed and raw point lists must have equal length")
        if self.window_length % 2 == 0 or self.poly_order >= self.window_length:
            raise ConfigError("window_length must be odd and exceed poly_order")


@dataclass
class Projection:
    points: np.ndarray              # (n, 2)
    explained_variance: np.ndarray  # (2,)


def pca_project(seq: np.ndarray) -> Projection:
    """Center and project onto the top-2 principal directions."""
    X = np.asarray(seq, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise DataError("need at least 3 embedding rows to project")
    Xc = X - X.mean(axis=0)
    U, S, Vt = np.linalg.svd(Xc, full_matrices=False)
    scale = max(1.0, float(np.abs(Xc).max()))
    if S[0] <= 1e-12 * scale:
        raise NumericError("degenerate projection: all rows identical")
    k = min(2, len(S))
    comps = Vt[:k]
    # sign convention: first nonzero loading of each component positive
    for i in range(k):
        nz = np.flatnonzero(np.abs(comps[i]) > 1e-12 * scale)
        if len(nz) and comps[i, nz[0]] < 0:
            comps[i] = -comps[i]
    points = Xc @ comps.T
    var = S[:k] ** 2 / (X.shape[0] - 1)
    if k < 2:
        points = np.column_stack([points, np.zeros(len(points))])
        var = np.append(var, 0.0)
    return Projection(points=points, explained_variance=var)


def load_external_projection(coords_path) -> np.ndarray:
    """Two coordinates per row (time order), comma or whitespace separated."""
    rows = []
    with open(coords_path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 2:
                raise DataError(f"expected two coordinates per row, got {line!r}")
            rows.append([float(parts[0]), float(parts[1])])
    if not rows:
        raise DataError(f"no coordinates in {coords_path}")
    return np.asarray(rows, dtype=np.float64)


def project_2d(seq: np.ndarray, method: str = "linear-pca",
               coords_path=None) -> np.ndarray:
    """2-D points for an embedding sequence, one per 30 s segment."""
    if method == "linear-pca":
        return pca_project(seq).points
    if method == "external":
        if coords_path is None:
            raise ConfigError("external projection requires coords_path")
        coords = load_external_projection(coords_path)
        if len(coords) != len(seq):
            raise DataError(f"external projection has {len(coords)} rows "
                            f"for {len(seq)} segments")
        return coords
    raise ConfigError(f"unknown projection method {method!r}")


# ---------------------------------------------------------------------------
# Savitzky-Golay smoothing
# ---------------------------------------------------------------------------

def savgol_coefficients(window_length: int, poly_order: int) -> np.ndarray:
    """Interior filter weights: the center row of the local least-squares
    polynomial fit over a symmetric window."""
    _check_savgol(window_length, poly_order)
    half = window_length // 2
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    A = np.vander(offsets, poly_order + 1, increasing=True)
    # fitted value at offset 0 is coefficient 0 of the LS fit
    return np.linalg.pinv(A)[0]


def _check_savgol(window_length: int, poly_order: int):
    if window_length % 2 == 0 or window_length < 1:
        raise ConfigError("window_length must be odd and positive")
    if poly_order < 0 or poly_order >= window_length:
        raise ConfigError("poly_order must be in [0, window_length)")


def _edge_fit(x: np.ndarray, i: int, half: int, poly_order: int) -> float:
    lo = max(0, i - half)
    hi = min(len(x), i + half + 1)
    offsets = np.arange(lo, hi, dtype=np.float64) - i
    order = min(poly_order, hi - lo - 1)
    A = np.vander(offsets, order + 1, increasing=True)
    coef, *_ = np.linalg.lstsq(A, x[lo:hi], rcond=None)
    return float(coef[0])


def savgol_smooth(series: np.ndarray, window_length: int, poly_order: int) -> np.ndarray:
    """Local least-squares polynomial smoothing.

    Interior points use the symmetric window; edges refit on the window
    truncated at the boundary.
    """
    _check_savgol(window_length, poly_order)
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    if window_length > n:
        raise ConfigError(f"window_length {window_length} exceeds series length {n}")
    half = window_length // 2
    out = np.empty(n)
    weights = savgol_coefficients(window_length, poly_order)
    windows = np.lib.stride_tricks.sliding_window_view(x, window_length)
    out[half:n - half] = windows @ weights
    for i in range(half):
        out[i] = _edge_fit(x, i, half, poly_order)
    for i in range(n - half, n):
        out[i] = _edge_fit(x, i, half, poly_order)
    return out


def build_trajectory(seq: np.ndarray, window_length: int = 11, poly_order: int = 2,
                     method: str = "linear-pca", coords_path=None,
                     smooth_before_projection: bool = False) -> TrajectoryPath:
    """Project an embedding sequence and smooth per coordinate.

    Default smooths the projected coordinates; smooth_before_projection
    instead smooths each embedding dimension and projects the result.
    """
    seq = np.asarray(seq, dtype=np.float64)
    if smooth_before_projection and method == "linear-pca":
        smoothed_seq = np.column_stack(
            [savgol_smooth(seq[:, j], window_length, poly_order)
             for j in range(seq.shape[1])])
        points = project_2d(seq, method)
        smoothed = project_2d(smoothed_seq, method)
    else:
        points = project_2d(seq, method, coords_path=coords_path)
        smoothed = np.column_stack(
            [savgol_smooth(points[:, j], window_length, poly_order) for j in range(2)])
    return TrajectoryPath(points=points, smoothed=smoothed,
                          window_length=window_length, poly_order=poly_order)


def export_trajectory(path: TrajectoryPath, out_base) -> tuple[Path, Path]:
    """Write the point table and a time-graded plot.

    Returns (table_path, image_path). The table is byte-deterministic for a
    fixed trajectory.
    """
    out_base = Path(out_base)
    out_base.parent.mkdir(parents=True, exist_ok=True)
    table_path = out_base.with_suffix(".csv")
    with open(table_path, "w") as f:
        f.write("time_index,raw_x,raw_y,smooth_x,smooth_y\n")
        for t in range(len(path.points)):
            rx, ry = (float(v) for v in path.points[t])
            sx, sy = (float(v) for v in path.smoothed[t])
            f.write(f"{t},{rx!r},{ry!r},{sx!r},{sy!r}\n")

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    image_path = out_base.with_suffix(".png")
    fig, ax = plt.subplots(figsize=(6, 5))
    t = np.arange(len(path.points))
    ax.plot(path.smoothed[:, 0], path.smoothed[:, 1], color="0.8", lw=1, zorder=1)
    sc = ax.scatter(path.smoothed[:, 0], path.smoothed[:, 1], c=t, cmap="viridis",
                    s=14, zorder=2)
    fig.colorbar(sc, ax=ax, label="segment index (30 s each)")
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.set_title("latent trajectory")
    fig.tight_layout()
    fig.savefig(image_path, dpi=120)
    plt.close(fig)
    return table_path, image_path


def parse_trajectory_table(path) -> np.ndarray:
    """(n, 5) array of the exported columns."""
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != "time_index,raw_x,raw_y,smooth_x,smooth_y":
            raise DataError(f"unexpected trajectory header {header!r}")
        for line in f:
            rows.append([float(v) for v in line.strip().split(",")])
    return np.asarray(rows)
