"""Soft-argmax and the two gaze training losses."""
from __future__ import annotations

import numpy as np

from ..numcore import functional as F
from ..numcore.tensor import Tensor, as_tensor


def cell_centers(Hd: int, Wd: int, H: float, W: float) -> tuple[np.ndarray, np.ndarray]:
    """Image-plane (x, y) of every grid cell center, each shaped [Hd, Wd]."""
    gx = (np.arange(Wd) + 0.5) / Wd * W
    gy = (np.arange(Hd) + 0.5) / Hd * H
    return np.broadcast_to(gx[None, :], (Hd, Wd)), np.broadcast_to(gy[:, None], (Hd, Wd))


def soft_argmax(S_hat: Tensor, H: float, W: float) -> Tensor:
    """Expected cell-center position under ``S_hat`` ([..., Hd, Wd] -> [..., 2] as (x, y))."""
    S_hat = S_hat if isinstance(S_hat, Tensor) else as_tensor(np.asarray(S_hat, np.float64))
    Hd, Wd = S_hat.shape[-2:]
    gx, gy = cell_centers(Hd, Wd, H, W)
    grid = np.stack([gx, gy]).astype(S_hat.dtype)  # [2, Hd, Wd]
    lead = S_hat.shape[:-2]
    S = F.reshape(S_hat, lead + (1, Hd, Wd))
    return F.sum(F.mul(S, grid), axis=(-2, -1))


def _kl_terms(target: np.ndarray) -> tuple[np.ndarray, float]:
    t = np.asarray(target, np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0)
    return t, ent


def loss_saliency(target, S_hat: Tensor) -> Tensor:
    """KL(target || S_hat) summed over the grid, averaged over a leading batch axis."""
    S_hat = S_hat if isinstance(S_hat, Tensor) else as_tensor(np.asarray(S_hat, np.float64))
    t, ent = _kl_terms(target)
    if t.shape != S_hat.shape:
        raise ValueError(f"loss_saliency: target shape {t.shape} != prediction shape {S_hat.shape}")
    cross = F.sum(F.mul(F.log(S_hat), t.astype(S_hat.dtype)))
    n = t.shape[0] if t.ndim == 3 else 1
    return F.mul(F.sub(float(ent.sum()), cross), 1.0 / n)


def loss_saliency_logits(target, A: Tensor) -> Tensor:
    """Same value as ``loss_saliency(target, softmax_spatial(A))`` computed stably from logits."""
    t, ent = _kl_terms(target)
    if t.shape != A.shape:
        raise ValueError(f"loss_saliency: target shape {t.shape} != logit shape {A.shape}")
    cross = F.sum(F.mul(F.log_softmax_spatial(A), t.astype(A.dtype)))
    n = t.shape[0] if t.ndim == 3 else 1
    return F.mul(F.sub(float(ent.sum()), cross), 1.0 / n)


def loss_gaze(target, p_hat: Tensor) -> Tensor:
    """Euclidean distance between gaze points, averaged over a leading batch axis."""
    p_hat = p_hat if isinstance(p_hat, Tensor) else as_tensor(np.asarray(p_hat, np.float64))
    d = F.euclidean_distance(p_hat, np.asarray(target, dtype=p_hat.dtype))
    return F.mean(d) if d.ndim else d
