"""Record filtering, temporal subsampling, per-image normalization, splits."""
from __future__ import annotations

import logging
from collections import defaultdict
from typing import Sequence

import numpy as np

from ..numcore.rng import rng_stream
from .dataset import FrameRecord

log = logging.getLogger(__name__)


def temporal_subsample(records: Sequence[FrameRecord], stride: int) -> list[FrameRecord]:
    """Keep every ``stride``-th frame of each scan, starting with its first.

    Positions are counted per scan in frame-index order, so on contiguous
    scans this keeps frame indices that are multiples of ``stride``, and
    subsampling by a then b equals subsampling by a*b.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    by_scan: dict[str, list[FrameRecord]] = defaultdict(list)
    for r in records:
        by_scan[r.scan].append(r)
    keep = set()
    for recs in by_scan.values():
        for pos, r in enumerate(sorted(recs, key=lambda r: r.frame)):
            if pos % stride == 0:
                keep.add(id(r))
    return [r for r in records if id(r) in keep]


def filter_valid(records: Sequence[FrameRecord]) -> tuple[list[FrameRecord], int]:
    """Drop records without gaze; returns (kept, number dropped)."""
    kept = [r for r in records if r.gaze]
    dropped = len(records) - len(kept)
    if dropped:
        log.info("dropped %d record(s) without gaze", dropped)
    return kept, dropped


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance per image (population std floored at 1e-6)."""
    x = np.asarray(image, dtype=np.float64)
    if x.size == 0:
        raise ValueError("normalize_image: empty image")
    mu = x.mean()
    sd = max(float(x.std()), 1e-6)
    return ((x - mu) / sd).astype(np.float32)


def scans_of(records: Sequence[FrameRecord]) -> list[str]:
    seen: dict[str, None] = {}
    for r in records:
        seen.setdefault(r.scan)
    return list(seen)


def split_by_scan(records: Sequence[FrameRecord], fractions: Sequence[float], seed: int,
                  stratify: dict[str, str] | None = None) -> list[list[FrameRecord]]:
    """Partition records into disjoint scan-level splits.

    ``fractions`` are relative sizes. With ``stratify`` (scan -> group key)
    each group's scans are divided separately so every split sees every group.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if (fr <= 0).any():
        raise ValueError("split fractions must be positive")
    fr = fr / fr.sum()
    scans = scans_of(records)
    groups: dict[str, list[str]] = defaultdict(list)
    for s in scans:
        groups[stratify[s] if stratify else ""].append(s)
    assignment: dict[str, int] = {}
    for gi, key in enumerate(sorted(groups)):
        members = groups[key]
        order = rng_stream(seed, 0x5EED, gi).permutation(len(members))
        cuts = np.round(np.cumsum(fr) * len(members)).astype(int)
        start = 0
        for k, end in enumerate(cuts):
            for idx in order[start:end]:
                assignment[members[idx]] = k
            start = end
    out: list[list[FrameRecord]] = [[] for _ in fr]
    for r in records:
        out[assignment[r.scan]].append(r)
    return out
