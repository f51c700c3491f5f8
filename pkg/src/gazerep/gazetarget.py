"""Training targets from gaze: Gaussian saliency maps and geometric medians."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .dataio.pgm import write_pgm

SALF_MAGIC = b"SALF"
SALF_VERSION = 1


@dataclass(frozen=True)
class SaliencyConfig:
    sigma: float = 8.0  # pixels at the resolution the map is drawn
    truncation: float = 4.0  # radius as a multiple of sigma

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.truncation < 2:
            raise ValueError("truncation must be at least 2 sigma")


def make_saliency_map(points, H: int, W: int, cfg: SaliencyConfig = SaliencyConfig()) -> np.ndarray:
    """Sum of truncated Gaussians at pixel centers, normalized to unit mass.

    ``points`` are (x, y) in pixels with x rightward and y downward; pixel
    (i, j) has its center at (j + 0.5, i + 0.5).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("make_saliency_map needs at least one gaze point")
    xs = np.arange(W) + 0.5
    ys = np.arange(H) + 0.5
    radius2 = (cfg.truncation * cfg.sigma) ** 2
    S = np.zeros((H, W))
    for px, py in pts:
        dx2 = (xs - px) ** 2
        dy2 = (ys - py) ** 2
        d2 = dy2[:, None] + dx2[None, :]
        S += np.where(d2 <= radius2, np.exp(-d2 / (2 * cfg.sigma ** 2)), 0.0)
    total = S.sum()
    if total <= 0:
        raise ValueError("gaze points lie outside the truncated support of the grid")
    return S / total


def downscale_saliency(S: np.ndarray, factor: int) -> np.ndarray:
    """Mass-preserving block sum by ``factor`` in both axes, renormalized."""
    H, W = S.shape
    if factor < 1 or H % factor or W % factor:
        raise ValueError(f"extents {H}x{W} not divisible by factor {factor}")
    if factor == 1:
        return np.array(S, dtype=np.float64)
    out = np.asarray(S, np.float64).reshape(H // factor, factor, W // factor, factor).sum(axis=(1, 3))
    return out / out.sum()


def saliency_target(points, H: int, W: int, factor: int, cfg: SaliencyConfig = SaliencyConfig()) -> np.ndarray:
    """Full-resolution map for ``points`` block-summed to the prediction grid."""
    return downscale_saliency(make_saliency_map(points, H, W, cfg), factor)


def fixation_cells(points, H: int, W: int, Hd: int, Wd: int) -> np.ndarray:
    """(row, col) of the grid cell containing each point; the far image edge belongs to the last cell."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    cols = np.minimum(np.floor(pts[:, 0] * Wd / W).astype(np.int64), Wd - 1)
    rows = np.minimum(np.floor(pts[:, 1] * Hd / H).astype(np.int64), Hd - 1)
    return np.stack([rows, cols], axis=1)


class MedianResult(NamedTuple):
    point: np.ndarray
    converged: bool
    iterations: int
    objective: list


def median_objective(points: np.ndarray, p: np.ndarray) -> float:
    return float(np.sqrt(((np.asarray(points, np.float64) - p) ** 2).sum(axis=1)).sum())


def _optimal_data_point(X: np.ndarray) -> int | None:
    """Index of a data point minimizing the summed distance, if one does."""
    for k in range(len(X)):
        d = np.sqrt(((X - X[k]) ** 2).sum(axis=1))
        same = d == 0
        R = ((X[~same] - X[k]) / d[~same, None]).sum(axis=0)
        if np.linalg.norm(R) <= same.sum():
            return k
    return None


def geometric_median(points, tol: float = 1e-6, max_iter: int = 200) -> MedianResult:
    """Weiszfeld iteration started at the centroid.

    Stops once the objective's gradient norm drops below ``tol``. An iterate
    landing within ``tol`` of a data point returns that point if it satisfies
    the subgradient optimality condition, otherwise it is nudged by ``tol``
    along the descent direction. Two points return their midpoint.
    """
    X = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(X)
    if n == 0:
        raise ValueError("geometric_median needs at least one point")
    if n == 1:
        return MedianResult(X[0].copy(), True, 0, [0.0])
    if n == 2:
        mid = X.mean(axis=0)
        return MedianResult(mid, True, 0, [median_objective(X, mid)])

    y = X.mean(axis=0)
    trace = [median_objective(X, y)]
    # Weiszfeld approaches an optimal data point only sublinearly, so test the
    # data points' subgradient condition exactly before iterating.
    k = _optimal_data_point(X)
    if k is not None:
        trace.append(median_objective(X, X[k]))
        return MedianResult(X[k].copy(), True, 1, trace)
    best, best_obj = y.copy(), trace[0]
    for it in range(1, max_iter + 1):
        diff = y - X
        d = np.sqrt((diff ** 2).sum(axis=1))
        near = d < tol
        if near.any():
            k = int(np.argmax(near))
            others = ~near
            R = ((X[others] - X[k]) / d[others, None]).sum(axis=0)
            # points coinciding with x_k contribute their count to the subgradient ball
            if np.linalg.norm(R) <= near.sum():
                y = X[k].copy()
                obj = median_objective(X, y)
                trace.append(obj)
                return MedianResult(y, True, it, trace)
            y = X[k] + tol * R / np.linalg.norm(R)
            trace.append(median_objective(X, y))
            continue
        grad = (diff / d[:, None]).sum(axis=0)
        if np.linalg.norm(grad) < tol:
            return MedianResult(y, True, it - 1, trace)
        w = 1.0 / d
        y = (w[:, None] * X).sum(axis=0) / w.sum()
        obj = median_objective(X, y)
        trace.append(obj)
        if obj <= best_obj:
            best, best_obj = y.copy(), obj
    return MedianResult(best, False, max_iter, trace)


# -- SALF export --------------------------------------------------------------

def write_salf(path, S: np.ndarray, preview: bool = True) -> None:
    """Write a saliency grid as SALF (little-endian) plus an optional PGM preview."""
    S = np.asarray(S, dtype="<f4")
    H, W = S.shape
    with open(path, "wb") as fh:
        fh.write(SALF_MAGIC)
        fh.write(struct.pack("<III", SALF_VERSION, H, W))
        fh.write(S.tobytes(order="C"))
    if preview:
        peak = float(S.max())
        write_pgm(Path(path).with_suffix(".pgm"), S / peak if peak > 0 else S)


def read_salf(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != SALF_MAGIC:
        raise ValueError(f"{path}: bad SALF magic")
    if len(buf) < 16:
        raise ValueError(f"{path}: truncated SALF header")
    version, H, W = struct.unpack("<III", buf[4:16])
    if version != SALF_VERSION:
        raise ValueError(f"{path}: unsupported SALF version {version}")
    body = buf[16:]
    if len(body) != 4 * H * W:
        raise ValueError(f"{path}: expected {H * W} values, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(H, W).astype(np.float32)
