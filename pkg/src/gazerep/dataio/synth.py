"""Synthetic phantom scans with gaze, standing in for clinical ultrasound video.

Each scan is a drifting, speckled fan-shaped field with a handful of bright
clutter lines and one class-defining shape that wanders and changes
visibility over time. Gaze lands on the shape centroid. One window of
frames per scan shows the shape at full visibility; those frames are the
labeled "standard plane" frames. A nearby window with the shape faded out
supplies background-labeled frames.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from ..numcore.rng import rng_stream
from .augment import bilinear_sample
from .dataset import FrameRecord
from .pgm import write_pgm

log = logging.getLogger(__name__)

SHAPES = ("ellipse", "ring", "cross", "bars", "wedge", "blobs")


@dataclass
class SynthConfig:
    n_scans: int = 12
    frames: int = 200
    height: int = 64
    width: int = 80
    classes: tuple = SHAPES
    background: str = "background"
    gaze_sigma: float = 2.0
    gaze_per_frame: int = 3
    outlier_rate: float = 0.05
    labeled_per_scan: int = 8
    background_per_scan: int = 8
    shape_size: float = 8.0
    contrast: float = 0.45
    clutter: int = 4
    seed: int = 0

    def validate(self) -> None:
        if len(self.classes) < 2:
            raise ValueError("synth needs at least two shape classes plus background")
        bad = [c for c in self.classes if c not in SHAPES]
        if bad:
            raise ValueError(f"unknown shape class(es) {bad}; choose from {list(SHAPES)}")
        if self.background in self.classes:
            raise ValueError("background name collides with a shape class")
        need = self.labeled_per_scan + self.background_per_scan + 3 * _RAMP
        if self.frames < need:
            raise ValueError(f"frames per scan must be >= {need} for the labeled windows")
        if self.n_scans < 1 or self.height < 16 or self.width < 16:
            raise ValueError("need at least one scan and a 16x16 frame")


_RAMP = 4


# -- shapes as signed distance fields (pixels) -----------------------------------

def _box(u, v, half_l, half_w):
    return np.maximum(np.abs(u) - half_l, np.abs(v) - half_w)


def shape_sdf(kind: str, u: np.ndarray, v: np.ndarray, R: float) -> np.ndarray:
    """Signed distance (approximate, in pixels) to a shape of radius ~R at the origin."""
    if kind == "ellipse":
        a, b = R, 0.6 * R
        return (np.sqrt((u / a) ** 2 + (v / b) ** 2) - 1.0) * b
    if kind == "ring":
        return np.abs(np.hypot(u, v) - 0.8 * R) - 0.18 * R
    if kind == "cross":
        return np.minimum(_box(u, v, R, 0.18 * R), _box(u, v, 0.18 * R, R))
    if kind == "bars":
        return np.minimum(_box(u, v - 0.45 * R, R, 0.15 * R), _box(u, v + 0.45 * R, R, 0.15 * R))
    if kind == "wedge":
        # isosceles triangle, apex up, centroid at the origin
        h = 1.8 * R
        y_top, y_base = -2 * h / 3, h / 3
        slope = R / h
        side = (np.abs(u) - (v - y_top) * slope) / math.sqrt(1 + slope ** 2)
        return np.maximum(np.maximum(side, v - y_base), y_top - v)
    if kind == "blobs":
        offs = [(-0.55, -0.45), (0.55, -0.4), (-0.35, 0.55), (0.5, 0.5)]
        d = [np.hypot(u - ox * R, v - oy * R) - 0.3 * R for ox, oy in offs]
        return np.minimum.reduce(d)
    raise ValueError(f"unknown shape {kind!r}")


def _smooth_walk(rng, n, step, lo, hi, start=None, inertia=0.9):
    """Bounded random walk with momentum (reflecting at the bounds)."""
    x = np.empty(n)
    pos = rng.uniform(lo, hi) if start is None else start
    vel = 0.0
    for t in range(n):
        vel = inertia * vel + step * rng.standard_normal()
        pos += vel
        if pos < lo:
            pos, vel = 2 * lo - pos, -vel
        if pos > hi:
            pos, vel = 2 * hi - pos, -vel
        pos = min(max(pos, lo), hi)
        x[t] = pos
    return x


@dataclass
class ScanData:
    scan: str
    shape: str
    frames: np.ndarray  # [T, H, W] in [0, 1]
    gaze: list  # per frame [N_G, 2] pixels
    labels: list  # per frame label or None
    centers: np.ndarray  # [T, 2] shape centroid
    bboxes: np.ndarray  # [T, 4] x0, y0, x1, y1 of the shape mask
    visibility: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _visibility_timeline(rng, cfg: SynthConfig):
    T, K, B = cfg.frames, cfg.labeled_per_scan, cfg.background_per_scan
    base = gaussian_filter(rng.standard_normal(T + 40), 6)[20:-20]
    base = 0.3 + 0.45 * (base - base.min()) / max(np.ptp(base), 1e-9)
    span = B + _RAMP + K
    start = int(rng.integers(_RAMP, T - span - _RAMP + 1))
    plane_first = bool(rng.integers(2))
    if plane_first:
        plane = np.arange(start, start + K)
        bg = np.arange(start + K + _RAMP, start + K + _RAMP + B)
    else:
        bg = np.arange(start, start + B)
        plane = np.arange(start + B + _RAMP, start + B + _RAMP + K)
    v = base.copy()
    v[plane] = 1.0
    v[bg] = 0.05
    # linear ramps into the windows
    for block, level in ((plane, 1.0), (bg, 0.05)):
        for r in range(1, _RAMP + 1):
            w = r / (_RAMP + 1)
            for t in (block[0] - r, block[-1] + r):
                if 0 <= t < T and t not in plane and t not in bg:
                    v[t] = w * v[t] + (1 - w) * level
    labels = [None] * T
    return v, plane, bg, labels


def render_scan(cfg: SynthConfig, index: int) -> ScanData:
    rng = rng_stream(cfg.seed, 0x5CA7, index)
    H, W, T = cfg.height, cfg.width, cfg.frames
    kind = cfg.classes[index % len(cfg.classes)]
    scan_id = f"scan{index:03d}"

    ys = (np.arange(H) + 0.5)[:, None]
    xs = (np.arange(W) + 0.5)[None, :]

    # fan geometry
    ax, ay = W / 2 + rng.uniform(-0.04, 0.04) * W, -0.12 * H
    half = math.radians(rng.uniform(36, 44))
    r_in, r_out = 0.18 * H, 1.12 * H
    r = np.hypot(xs - ax, ys - ay)
    ang = np.arctan2(xs - ax, ys - ay)
    fan = np.clip(0.5 + np.minimum.reduce([r - r_in, r_out - r, (half - np.abs(ang)) * r]), 0, 1)
    depth = 1.0 - 0.35 * np.clip(r / r_out, 0, 1)

    # drifting tissue texture on a padded canvas
    pad = 16
    canvas = gaussian_filter(rng.standard_normal((H + 2 * pad, W + 2 * pad)), 2.5)
    canvas /= canvas.std()
    coarse = gaussian_filter(rng.standard_normal((H + 2 * pad, W + 2 * pad)), 8.0)
    canvas = 0.8 * canvas + 0.6 * coarse / coarse.std()
    clutter = np.zeros_like(canvas)
    cy_, cx_ = np.mgrid[0:H + 2 * pad, 0:W + 2 * pad] + 0.5
    for _ in range(cfg.clutter):
        px, py = rng.uniform(pad, W + pad), rng.uniform(pad, H + pad)
        theta = rng.uniform(0, math.pi)
        length = rng.uniform(10, 24)
        u = (cx_ - px) * math.cos(theta) + (cy_ - py) * math.sin(theta)
        v = -(cx_ - px) * math.sin(theta) + (cy_ - py) * math.cos(theta)
        clutter = np.maximum(clutter, rng.uniform(0.2, 0.4) * np.clip(0.5 - _box(u, v, length / 2, 0.8), 0, 1))
    ox = _smooth_walk(rng, T, 0.08, -pad + 2, pad - 2, start=0.0)
    oy = _smooth_walk(rng, T, 0.08, -pad + 2, pad - 2, start=0.0)

    # shape trajectory
    R = cfg.shape_size * rng.uniform(0.9, 1.1)
    cxs = _smooth_walk(rng, T, 0.12, 0.3 * W, 0.7 * W)
    cys = _smooth_walk(rng, T, 0.12, 0.35 * H, 0.75 * H)
    phis = _smooth_walk(rng, T, 0.01, -0.6, 0.6, start=rng.uniform(-0.3, 0.3))
    vis, plane, bg, labels = _visibility_timeline(rng, cfg)
    for t in plane:
        labels[t] = kind
    for t in bg:
        labels[t] = cfg.background

    frames = np.empty((T, H, W), dtype=np.float64)
    gaze, centers, bboxes = [], np.empty((T, 2)), np.empty((T, 4))
    plane_set = set(int(t) for t in plane)
    for t in range(T):
        sx = xs + pad + ox[t]
        sy = ys + pad + oy[t]
        tex = bilinear_sample(canvas, np.broadcast_to(sx, (H, W)), np.broadcast_to(sy, (H, W)))
        clt = bilinear_sample(clutter, np.broadcast_to(sx, (H, W)), np.broadcast_to(sy, (H, W)))
        tissue = (0.32 + 0.09 * tex) * depth + clt
        c, s = math.cos(phis[t]), math.sin(phis[t])
        du, dv = xs - cxs[t], ys - cys[t]
        u = c * du + s * dv
        v = -s * du + c * dv
        mask = np.clip(0.5 - shape_sdf(kind, u, v, R), 0, 1)
        img = tissue + cfg.contrast * vis[t] * mask
        speckle = gaussian_filter(rng.gamma(4.0, 0.25, size=(H, W)), 0.6)
        frames[t] = np.clip(img * speckle * fan, 0, 1)

        rows, cols = np.nonzero(mask > 0.5)
        bboxes[t] = (cols.min(), rows.min(), cols.max() + 1, rows.max() + 1) if len(rows) else (
            cxs[t], cys[t], cxs[t], cys[t])
        centers[t] = (cxs[t], cys[t])

        n = cfg.gaze_per_frame
        if t not in plane_set and rng.random() < cfg.outlier_rate:
            target = np.array([rng.uniform(0, W), rng.uniform(0, H)])
        else:
            target = centers[t]
        pts = target + cfg.gaze_sigma * rng.standard_normal((n, 2))
        pts[:, 0] = np.clip(pts[:, 0], 0, W)
        pts[:, 1] = np.clip(pts[:, 1], 0, H)
        gaze.append(pts)
    return ScanData(scan_id, kind, frames, gaze, labels, centers, bboxes, vis)


def synth_generate(cfg: SynthConfig, out_dir) -> Path:
    """Render ``cfg.n_scans`` scans and write them in the dataset format."""
    cfg.validate()
    root = Path(out_dir)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    classes = list(cfg.classes) + [cfg.background]
    with open(root / "manifest.jsonl", "w") as man:
        for s in range(cfg.n_scans):
            scan = render_scan(cfg, s)
            for t in range(cfg.frames):
                rel = f"frames/{scan.scan}_{t:05d}.pgm"
                write_pgm(root / rel, scan.frames[t])
                g = scan.gaze[t] / np.array([cfg.width, cfg.height])
                rec = FrameRecord(rel, scan.scan, t, [tuple(p) for p in np.round(g, 6).tolist()], scan.labels[t])
                man.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")
            log.info("rendered %s (%s)", scan.scan, scan.shape)
    (root / "classes.json").write_text(json.dumps(classes) + "\n")
    meta = asdict(cfg)
    meta["classes"] = list(cfg.classes)
    (root / "synth.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return root


def expected_class_counts(cfg: SynthConfig) -> dict[str, int]:
    counts = {c: 0 for c in list(cfg.classes) + [cfg.background]}
    for s in range(cfg.n_scans):
        counts[cfg.classes[s % len(cfg.classes)]] += cfg.labeled_per_scan
        counts[cfg.background] += cfg.background_per_scan
    return counts
