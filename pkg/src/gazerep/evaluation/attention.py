"""Attention-model evaluation against gaze and the static baselines."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..attnmodel.config import probe_extents
from ..attnmodel.losses import soft_argmax
from ..attnmodel.network import Network, attention_forward
from ..dataio.augment import prepare_eval
from ..dataio.dataset import Dataset
from ..gazetarget import SaliencyConfig, fixation_cells, geometric_median, saliency_target
from ..numcore.tensor import Tensor, no_grad
from .metrics import SALIENCY_METRICS, saliency_scores

TASKS = ("saliency", "gaze")


@dataclass
class Geometry:
    """Model input size and prediction grid size."""
    H: int
    W: int
    Hd: int
    Wd: int

    @property
    def factor(self) -> int:
        return self.H // self.Hd

    @classmethod
    def of(cls, net: Network) -> "Geometry":
        H, W = net.config.input_size
        Hd, Wd = list(probe_extents(net.config, "attention").values())[-1]
        return cls(H, W, Hd, Wd)


def eval_frames(dataset: Dataset, geom: Geometry):
    """Un-augmented samples at model resolution (gaze-less frames skipped)."""
    for i in range(len(dataset)):
        s = dataset[i]
        if s.gaze is None or len(s.gaze) == 0:
            continue
        yield s, prepare_eval(s, (geom.H, geom.W))


def static_saliency_baseline(maps) -> np.ndarray:
    """Mean of the given target maps, renormalized to unit mass."""
    maps = [np.asarray(m, np.float64) for m in maps]
    if not maps:
        raise ValueError("static_saliency_baseline needs at least one map")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ValueError("static_saliency_baseline: maps differ in shape")
    acc = np.zeros(shape)
    for m in maps:
        acc += m
    return acc / acc.sum()


def static_gaze_baseline(points) -> np.ndarray:
    """Geometric median of the pooled gaze points."""
    return geometric_median(np.concatenate([np.asarray(p, np.float64).reshape(-1, 2) for p in points])).point


def saliency_baseline_from(dataset: Dataset, geom: Geometry, sigma: float) -> np.ndarray:
    cfg = SaliencyConfig(sigma)
    return static_saliency_baseline(saliency_target(m.gaze, geom.H, geom.W, geom.factor, cfg)
                                    for _, m in eval_frames(dataset, geom))


def gaze_baseline_from(dataset: Dataset) -> np.ndarray:
    pts = [dataset[i].gaze for i in range(len(dataset)) if dataset.records[i].gaze]
    if not pts:
        raise ValueError("dataset has no gaze")
    return static_gaze_baseline(pts)


def _predict_maps(net: Network, batch: list) -> np.ndarray:
    x = np.stack([m.image for m in batch]).astype(net.dtype)
    with no_grad():
        _, S = attention_forward(net, x, training=False)
    return S.data.astype(np.float64)


def evaluate_attention(predictor, dataset: Dataset, task: str, geom: Geometry,
                       sigma: float = 8.0, batch_size: int = 32) -> dict:
    """Per-frame metrics (saliency) or gaze-point error (gaze), with mean and std.

    ``predictor`` is an attention-mode network, or a static baseline: an
    [H_D, W_D] map for the saliency task, an (x, y) point in full-resolution
    pixels for the gaze task.
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    frames = list(eval_frames(dataset, geom))
    if not frames:
        raise ValueError("evaluate_attention: dataset has no frames with gaze")
    is_net = isinstance(predictor, Network)
    if is_net and predictor.mode != "attention":
        raise ValueError("evaluate_attention needs an attention-mode network")
    per_frame: dict[str, list] = {k: [] for k in (SALIENCY_METRICS if task == "saliency" else ("l2",))}
    cfg = SaliencyConfig(sigma)
    for start in range(0, len(frames), batch_size):
        chunk = frames[start:start + batch_size]
        preds = _predict_maps(predictor, [m for _, m in chunk]) if is_net else None
        for k, (raw, m) in enumerate(chunk):
            if task == "saliency":
                target = saliency_target(m.gaze, geom.H, geom.W, geom.factor, cfg)
                pred = preds[k] if is_net else np.asarray(predictor, np.float64)
                cells = fixation_cells(m.gaze, geom.H, geom.W, geom.Hd, geom.Wd)
                for name, v in saliency_scores(target, pred, cells).items():
                    per_frame[name].append(v)
            else:
                Hf, Wf = raw.height, raw.width
                p_star = geometric_median(raw.gaze).point
                if is_net:
                    p = soft_argmax(Tensor(preds[k]), geom.H, geom.W).data * np.array([Wf / geom.W, Hf / geom.H])
                else:
                    p = np.asarray(predictor, np.float64)
                per_frame["l2"].append(float(np.hypot(*(p - p_star))))
    return make_report(task, per_frame)


def make_report(task: str, per_frame: dict) -> dict:
    n = len(next(iter(per_frame.values())))
    return {
        "task": task,
        "n_frames": n,
        "metrics": {k: {"mean": float(np.mean(v)), "std": float(np.std(v))} for k, v in per_frame.items()},
    }


def write_report(report, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path
