"""Saliency metrics and classification scores.

Conventions follow the MIT saliency benchmark: NSS z-scores with divisor N,
AUC-Judd uses every grid cell as the negative pool, SIM compares unit-mass
maps. Constant prediction maps score NSS 0, CC 0 and AUC 0.5.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..attnmodel.losses import loss_saliency
from ..numcore.tensor import Tensor


def _grid(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D grid, got shape {a.shape}")
    return a


def _cells(S: np.ndarray, fixations) -> tuple[np.ndarray, np.ndarray]:
    cells = np.asarray(fixations, dtype=np.int64).reshape(-1, 2)
    if len(cells) == 0:
        raise ValueError("at least one fixation cell is required")
    H, W = S.shape
    if (cells < 0).any() or (cells[:, 0] >= H).any() or (cells[:, 1] >= W).any():
        raise ValueError(f"fixation cell outside the {H}x{W} grid")
    return cells[:, 0], cells[:, 1]


KLD_FLOOR = np.finfo(np.float64).eps


def metric_kld(target, pred) -> float:
    """KL(target || pred) through the saliency loss.

    Prediction cells below machine epsilon are floored there, so maps with
    empty cells (the static baseline) give a finite score; cells at or above
    the floor are untouched.
    """
    return float(loss_saliency(_grid(target), Tensor(np.maximum(_grid(pred), KLD_FLOOR))).item())


def metric_nss(S, fixations) -> float:
    S = _grid(S)
    i, j = _cells(S, fixations)
    sd = S.std()
    if sd == 0:
        return 0.0
    z = (S - S.mean()) / sd
    return float(z[i, j].mean())


def metric_auc_judd(S, fixations) -> float:
    S = _grid(S)
    i, j = _cells(S, fixations)
    fix = S[i, j]
    pool = S.ravel()
    thresholds = np.unique(fix)[::-1]
    tpr = (fix[None, :] >= thresholds[:, None]).mean(axis=1)
    fpr = (pool[None, :] >= thresholds[:, None]).mean(axis=1)
    tpr = np.concatenate([[0.0], tpr, [1.0]])
    fpr = np.concatenate([[0.0], fpr, [1.0]])
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2))


def metric_cc(target, pred) -> float:
    a, b = _grid(target), _grid(pred)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt((da ** 2).mean()), np.sqrt((db ** 2).mean())
    if sa == 0 or sb == 0:
        return 0.0
    return float((da * db).mean() / (sa * sb))


def metric_sim(target, pred) -> float:
    a, b = _grid(target), _grid(pred)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.minimum(a / a.sum(), b / b.sum()).sum())


SALIENCY_METRICS = ("kld", "nss", "auc_judd", "cc", "sim")


def saliency_scores(target, pred, fixations) -> dict[str, float]:
    return {
        "kld": metric_kld(target, pred),
        "nss": metric_nss(pred, fixations),
        "auc_judd": metric_auc_judd(pred, fixations),
        "cc": metric_cc(target, pred),
        "sim": metric_sim(target, pred),
    }


# -- classification ----------------------------------------------------------------

@dataclass
class ClassReport:
    classes: list
    included: list
    precision: dict
    recall: dict
    f1: dict
    confusion: np.ndarray = field(repr=False)

    @property
    def macro_precision(self) -> float:
        return float(np.mean([self.precision[c] for c in self.included]))

    @property
    def macro_recall(self) -> float:
        return float(np.mean([self.recall[c] for c in self.included]))

    @property
    def macro_f1(self) -> float:
        return float(np.mean([self.f1[c] for c in self.included]))

    def to_json(self) -> dict:
        return {
            "classes": list(self.classes),
            "macro": {"precision": self.macro_precision, "recall": self.macro_recall, "f1": self.macro_f1},
            "per_class": {c: {"precision": self.precision[c], "recall": self.recall[c], "f1": self.f1[c]}
                          for c in self.classes},
            "confusion": self.confusion.tolist(),
        }


def confusion_matrix(true, pred, n_classes: int) -> np.ndarray:
    M = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(M, (np.asarray(true, np.int64), np.asarray(pred, np.int64)), 1)
    return M


def macro_prf(confusion, classes, included=None) -> ClassReport:
    """Per-class precision/recall/F1 (0 where undefined) and macro means over ``included``.

    ``confusion[i, j]`` counts samples of true class i predicted as j.
    """
    M = np.asarray(confusion, dtype=np.int64)
    K = len(classes)
    if M.shape != (K, K):
        raise ValueError(f"confusion matrix shape {M.shape} does not match {K} classes")
    included = list(classes) if included is None else list(included)
    tp = np.diag(M).astype(np.float64)
    pred_tot = M.sum(axis=0)
    true_tot = M.sum(axis=1)
    P, R, F1 = {}, {}, {}
    for k, c in enumerate(classes):
        p = tp[k] / pred_tot[k] if pred_tot[k] else 0.0
        r = tp[k] / true_tot[k] if true_tot[k] else 0.0
        P[c], R[c] = float(p), float(r)
        F1[c] = float(2 * p * r / (p + r)) if p + r > 0 else 0.0
    return ClassReport(list(classes), included, P, R, F1, M)
