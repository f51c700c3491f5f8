"""Geometric and photometric augmentation.

Order: geometric warp (crop, aspect, rotation, flip) at source scale, then
gamma, then brightness on raw [0, 1] intensities, then bilinear resize to
the model resolution, then per-image normalization. Gaze points follow the
geometric part exactly.

Coordinates are continuous pixels: pixel (i, j) covers [j, j+1) x [i, i+1),
its center is (j + 0.5, i + 0.5).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .dataset import FrameSample
from .preprocess import normalize_image


@dataclass(frozen=True)
class AugmentConfig:
    crop: tuple[float, float] = (1.0, 1.0)  # side-length fraction range
    flip_prob: float = 0.0
    rotation: float = 0.0  # max |angle| in degrees
    aspect: float = 0.0  # max relative aspect change
    gamma: tuple[float, float] = (1.0, 1.0)
    brightness: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        lo, hi = self.crop
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"crop fraction range {self.crop} must lie in (0, 1]")
        for name in ("gamma", "brightness"):
            a, b = getattr(self, name)
            if not (0 < a <= b):
                raise ValueError(f"{name} range {(a, b)} invalid")
        if not (0 <= self.flip_prob <= 1):
            raise ValueError("flip_prob must lie in [0, 1]")
        if self.rotation < 0 or not (0 <= self.aspect < 1):
            raise ValueError("rotation must be >= 0 and aspect in [0, 1)")


IDENTITY = AugmentConfig()
ATTENTION = AugmentConfig(crop=(0.7, 0.9), flip_prob=0.5, gamma=(0.75, 1.25), brightness=(0.75, 1.25))
CLASSIFICATION = AugmentConfig(crop=(0.95, 1.0), flip_prob=0.5, rotation=10.0, aspect=0.1,
                               gamma=(0.75, 1.25), brightness=(0.75, 1.25))


# -- resampling ----------------------------------------------------------------

def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Sample a [H, W] image at continuous pixel coordinates.

    Points inside the image area [0, W] x [0, H] interpolate between pixel
    centers (edge values replicated within the outer half pixel); points
    outside take ``fill``.
    """
    H, W = img.shape
    inside = (xs >= 0) & (xs <= W) & (ys >= 0) & (ys <= H)
    u = np.clip(xs - 0.5, 0, W - 1)
    v = np.clip(ys - 0.5, 0, H - 1)
    j0 = np.minimum(np.floor(u).astype(np.int64), W - 1)
    i0 = np.minimum(np.floor(v).astype(np.int64), H - 1)
    j1 = np.minimum(j0 + 1, W - 1)
    i1 = np.minimum(i0 + 1, H - 1)
    fu = u - j0
    fv = v - i0
    top = img[i0, j0] * (1 - fu) + img[i0, j1] * fu
    bot = img[i1, j0] * (1 - fu) + img[i1, j1] * fu
    out = top * (1 - fv) + bot * fv
    return np.where(inside, out, fill)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize [H, W] (or [1, H, W]) with pixel-center alignment."""
    squeeze = img.ndim == 3
    src = img[0] if squeeze else img
    H, W = src.shape
    if (H, W) == (out_h, out_w):
        out = np.array(src, dtype=np.float64)
    else:
        xs = (np.arange(out_w) + 0.5) * (W / out_w)
        ys = (np.arange(out_h) + 0.5) * (H / out_h)
        out = bilinear_sample(np.asarray(src, np.float64), xs[None, :], ys[:, None])
    return out[None] if squeeze else out


def warp_affine(img: np.ndarray, M: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Inverse-map warp: output point (u, v) samples the source at M @ (u, v, 1)."""
    us = np.arange(out_w) + 0.5
    vs = np.arange(out_h) + 0.5
    U, V = np.meshgrid(us, vs)
    xs = M[0, 0] * U + M[0, 1] * V + M[0, 2]
    ys = M[1, 0] * U + M[1, 1] * V + M[1, 2]
    return bilinear_sample(np.asarray(img, np.float64), xs, ys)


def rotate_image(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate [H, W] about its center (positive = counter-clockwise on screen), zero fill."""
    H, W = img.shape
    M = _rotation_about(W / 2, H / 2, degrees)
    return warp_affine(img, M, H, W)


def _rotation_about(cx: float, cy: float, degrees: float) -> np.ndarray:
    # inverse map for a counter-clockwise (on screen, y down) rotation
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    R = np.array([[c, -s], [s, c]])
    M = np.zeros((2, 3))
    M[:, :2] = R
    M[:, 2] = np.array([cx, cy]) - R @ np.array([cx, cy])
    return M


def _apply_forward(M: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Map source points to output coordinates (inverse of the sampling map)."""
    A = M[:, :2]
    return np.linalg.solve(A, (pts - M[:, 2]).T).T


# -- crop selection -------------------------------------------------------------

def sample_gaze_crop(rng: np.random.Generator, gaze: np.ndarray, H: int, W: int,
                     crop: tuple[float, float]) -> tuple[float, float, float, float]:
    """Crop rectangle (x0, y0, w, h) at a sampled side fraction containing all gaze.

    Falls back to the smallest fraction that fits the gaze spread, or to the
    full frame when even the largest admissible fraction cannot contain it.
    """
    lo, hi = crop
    f = rng.uniform(lo, hi) if hi > lo else lo
    xmin, ymin = gaze.min(axis=0)
    xmax, ymax = gaze.max(axis=0)
    need = max((xmax - xmin) / W, (ymax - ymin) / H)
    if need > f:
        if need > hi:
            return 0.0, 0.0, float(W), float(H)
        f = need
    cw, ch = f * W, f * H
    x_lo, x_hi = max(0.0, xmax - cw), min(W - cw, xmin)
    y_lo, y_hi = max(0.0, ymax - ch), min(H - ch, ymin)
    x0 = rng.uniform(x_lo, x_hi) if x_hi > x_lo else min(x_lo, x_hi)
    y0 = rng.uniform(y_lo, y_hi) if y_hi > y_lo else min(y_lo, y_hi)
    # absorb float rounding so (x - x0) <= w holds exactly for every gaze point
    cw = max(cw, xmax - x0)
    ch = max(ch, ymax - y0)
    return float(x0), float(y0), float(cw), float(ch)


# -- pipelines -------------------------------------------------------------------

def _photometric(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    g = rng.uniform(*cfg.gamma) if cfg.gamma[1] > cfg.gamma[0] else cfg.gamma[0]
    b = rng.uniform(*cfg.brightness) if cfg.brightness[1] > cfg.brightness[0] else cfg.brightness[0]
    out = np.clip(img, 0.0, 1.0)
    if g != 1.0:
        out = out ** g
    if b != 1.0:
        out = np.clip(out * b, 0.0, 1.0)
    return out


def _finish(sample: FrameSample, img: np.ndarray, gaze_ratio, out_size) -> FrameSample:
    """Resize and normalize; gaze arrives as fractions of the warped frame."""
    Ho, Wo = out_size
    img = resize_bilinear(img, Ho, Wo)
    gaze = None if gaze_ratio is None else gaze_ratio * np.array([Wo, Ho], dtype=np.float64)
    return replace(sample, image=normalize_image(img)[None], gaze=gaze)


def _crop_flip_map(x0, y0, cw, ch, wi, hi, flip) -> np.ndarray:
    sx, sy = cw / wi, ch / hi
    if flip:
        # u -> wi - u before scaling into the crop
        return np.array([[-sx, 0.0, x0 + sx * wi], [0.0, sy, y0]])
    return np.array([[sx, 0.0, x0], [0.0, sy, y0]])


def augment_attention(sample: FrameSample, rng: np.random.Generator, cfg: AugmentConfig,
                      out_size: tuple[int, int]) -> FrameSample:
    """Gaze-preserving crop, flip, gamma/brightness, resize, normalize."""
    if sample.gaze is None or len(sample.gaze) == 0:
        raise ValueError("augment_attention needs a sample with gaze")
    src = np.asarray(sample.image[0], np.float64)
    H, W = src.shape
    gaze = np.asarray(sample.gaze, np.float64)
    x0, y0, cw, ch = sample_gaze_crop(rng, gaze, H, W, cfg.crop)
    flip = rng.random() < cfg.flip_prob
    wi, hi = max(1, round(cw)), max(1, round(ch))
    gx = (gaze[:, 0] - x0) / cw
    gy = (gaze[:, 1] - y0) / ch
    if flip:
        gx = 1.0 - gx
    ratio = np.stack([gx, gy], axis=1)
    if (x0, y0, cw, ch, flip) == (0.0, 0.0, float(W), float(H), False):
        img = src
    else:
        img = warp_affine(src, _crop_flip_map(x0, y0, cw, ch, wi, hi, flip), hi, wi)
    img = _photometric(img, rng, cfg)
    return _finish(sample, img, ratio, out_size)


def augment_classification(sample: FrameSample, rng: np.random.Generator, cfg: AugmentConfig,
                           out_size: tuple[int, int]) -> FrameSample:
    """Crop with aspect jitter, rotation about the crop center, flip, photometric, resize, normalize."""
    src = np.asarray(sample.image[0], np.float64)
    H, W = src.shape
    lo, hi_f = cfg.crop
    f = rng.uniform(lo, hi_f) if hi_f > lo else lo
    a = rng.uniform(1 - cfg.aspect, 1 + cfg.aspect) if cfg.aspect else 1.0
    cw, ch = f * W, f * H * a
    x0 = rng.uniform(0, W - cw) if W > cw else (W - cw) / 2
    y0 = rng.uniform(0, H - ch) if H > ch else (H - ch) / 2
    angle = rng.uniform(-cfg.rotation, cfg.rotation) if cfg.rotation else 0.0
    flip = rng.random() < cfg.flip_prob
    wi, hi = max(1, round(cw)), max(1, round(ch))
    M = _crop_flip_map(x0, y0, cw, ch, wi, hi, flip)
    if angle:
        R = _rotation_about(x0 + cw / 2, y0 + ch / 2, angle)
        M = np.vstack([R, [0, 0, 1]])[:2] @ np.vstack([M, [0, 0, 1]])
    identity = (x0, y0, cw, ch, flip, angle) == (0.0, 0.0, float(W), float(H), False, 0.0)
    img = src if identity else warp_affine(src, M, hi, wi)
    ratio = None
    if sample.gaze is not None:
        ratio = _apply_forward(M, np.asarray(sample.gaze, np.float64)) / np.array([wi, hi])
    img = _photometric(img, rng, cfg)
    return _finish(sample, img, ratio, out_size)


def prepare_eval(sample: FrameSample, out_size: tuple[int, int]) -> FrameSample:
    """Un-augmented path: resize and normalize only."""
    src = np.asarray(sample.image[0], np.float64)
    ratio = None
    if sample.gaze is not None:
        ratio = np.asarray(sample.gaze, np.float64) / np.array([src.shape[1], src.shape[0]])
    return _finish(sample, src, ratio, out_size)
