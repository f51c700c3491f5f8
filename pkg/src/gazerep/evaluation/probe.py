"""Per-layer softmax-regression probes on frozen, average-pooled features."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp, softmax

from ..attnmodel.network import Network
from ..dataio.augment import prepare_eval
from ..dataio.dataset import Dataset
from ..numcore import functional as F
from ..numcore.tensor import no_grad
from .metrics import ClassReport, confusion_matrix, macro_prf


def l2_grid() -> np.ndarray:
    return np.logspace(-5, 1, 16)


@dataclass
class ProbeConfig:
    layers: list = field(default_factory=list)  # empty means every probe point
    grid: np.ndarray = field(default_factory=l2_grid)
    max_iter: int = 2000
    tol: float = 1e-6
    standardize: bool = True
    batch_size: int = 32

    def __post_init__(self):
        g = np.asarray(self.grid, np.float64)
        if g.ndim != 1 or len(g) == 0 or (g <= 0).any():
            raise ValueError("ProbeConfig.grid must be a non-empty list of positive values")
        self.grid = g


class ProbeError(ValueError):
    pass


def probe_features(net: Network, layer: str, dataset: Dataset, batch_size: int = 32):
    """Eval-mode, globally average-pooled activations of ``layer`` for every labeled frame.

    Returns (vectors [N, C] float64, label indices [N]).
    """
    names = list(net.stages)
    if layer not in names:
        raise ProbeError(f"unknown probe point {layer!r}; available: {', '.join(names)}")
    H, W = net.config.input_size
    idx = [i for i, r in enumerate(dataset.records) if r.label is not None]
    vecs, labels = [], []
    for start in range(0, len(idx), batch_size):
        chunk = [prepare_eval(dataset[i], (H, W)) for i in idx[start:start + batch_size]]
        x = np.stack([s.image for s in chunk]).astype(net.dtype)
        with no_grad():
            feats = net.features(x, training=False)
        vecs.append(F.global_avg_pool(feats[layer]).data.astype(np.float64))
        labels += [dataset.label_index(s.label) for s in chunk]
    if not vecs:
        raise ProbeError("probe_features: dataset has no labeled frames")
    return np.concatenate(vecs), np.asarray(labels, np.int64)


@dataclass
class SoftmaxRegression:
    W: np.ndarray  # [D, K]
    b: np.ndarray  # [K]
    l2: float
    converged: bool
    grad_norm: float
    n_iter: int
    loss: float

    def logits(self, X) -> np.ndarray:
        return np.asarray(X, np.float64) @ self.W + self.b

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.logits(X), axis=1)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.logits(X), axis=1)


def balanced_weights(y: np.ndarray, n_classes: int) -> np.ndarray:
    """Per-sample weight N / (K * N_c) with K the number of classes present."""
    counts = np.bincount(y, minlength=n_classes)
    K = int((counts > 0).sum())
    cw = np.zeros(n_classes)
    cw[counts > 0] = len(y) / (K * counts[counts > 0])
    return cw[y]


def softmax_objective(theta: np.ndarray, X: np.ndarray, y: np.ndarray, sw: np.ndarray, l2: float, K: int):
    """Weighted mean cross-entropy + l2 * ||W||^2 / 2 and its gradient (bias unpenalized)."""
    N, D = X.shape
    W = theta[:D * K].reshape(D, K)
    b = theta[D * K:]
    Z = X @ W + b
    lse = logsumexp(Z, axis=1)
    loss = float(np.sum(sw * (lse - Z[np.arange(N), y])) / N + 0.5 * l2 * np.sum(W * W))
    P = np.exp(Z - lse[:, None])
    P[np.arange(N), y] -= 1.0
    G = P * (sw / N)[:, None]
    gW = X.T @ G + l2 * W
    gb = G.sum(axis=0)
    return loss, np.concatenate([gW.ravel(), gb])


def softmax_regression_fit(X, y, l2: float, n_classes: int | None = None,
                           max_iter: int = 2000, tol: float = 1e-6) -> SoftmaxRegression:
    """Balanced-weight multinomial logistic regression fitted with L-BFGS.

    Non-convergence is not an error; the result carries ``converged`` and the
    final gradient infinity-norm so callers can report it.
    """
    X = np.asarray(X, np.float64)
    y = np.asarray(y, np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError(f"X must be [N, D] matching y; got {X.shape} and {y.shape}")
    K = int(n_classes if n_classes is not None else y.max() + 1)
    if len(np.unique(y)) < 2:
        raise ValueError("softmax_regression_fit needs at least two classes present")
    if l2 < 0:
        raise ValueError("l2 must be non-negative")
    D = X.shape[1]
    sw = balanced_weights(y, K)
    res = minimize(softmax_objective, np.zeros(D * K + K), args=(X, y, sw, l2, K), jac=True,
                   method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": tol, "ftol": 0.0, "maxcor": 20})
    _, g = softmax_objective(res.x, X, y, sw, l2, K)
    gnorm = float(np.abs(g).max())
    return SoftmaxRegression(res.x[:D * K].reshape(D, K).copy(), res.x[D * K:].copy(), float(l2),
                             gnorm < tol, gnorm, int(res.nit), float(res.fun))


@dataclass
class ProbeResult:
    layer: str
    l2: float
    val_f1: list  # one value per grid entry
    test: ClassReport
    converged: bool
    grad_norm: float

    def to_json(self) -> dict:
        return {
            "layer": self.layer,
            "selected_l2": self.l2,
            "val_macro_f1": [float(v) for v in self.val_f1],
            "test": self.test.to_json(),
            "converged": self.converged,
            "grad_norm": self.grad_norm,
        }


def _report(model: SoftmaxRegression, X, y, classes, included) -> ClassReport:
    return macro_prf(confusion_matrix(y, model.predict(X), len(classes)), classes, included)


def select_index(scores) -> int:
    """Index of the best score; ties go to the later (stronger-regularized) entry."""
    s = np.asarray(scores, np.float64)
    return int(np.flatnonzero(s == s.max())[-1])


def probe_arrays(layer: str, train, val, test, classes, included, cfg: ProbeConfig) -> ProbeResult:
    """Sweep the L2 grid on (X, y) splits and report test scores for the val-selected model."""
    (Xtr, ytr), (Xva, yva), (Xte, yte) = train, val, test
    if cfg.standardize:
        mu, sd = Xtr.mean(axis=0), Xtr.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        Xtr, Xva, Xte = ((X - mu) / sd for X in (Xtr, Xva, Xte))
    grid = np.sort(cfg.grid)
    fits, scores = [], []
    for l2 in grid:
        m = softmax_regression_fit(Xtr, ytr, l2, len(classes), cfg.max_iter, cfg.tol)
        fits.append(m)
        scores.append(_report(m, Xva, yva, classes, included).macro_f1)
    k = select_index(scores)
    return ProbeResult(layer, float(grid[k]), scores, _report(fits[k], Xte, yte, classes, included),
                       fits[k].converged, fits[k].grad_norm)


def _check_disjoint(*sets: Dataset) -> None:
    seen: dict[str, int] = {}
    for k, ds in enumerate(sets):
        for scan in {r.scan for r in ds.records}:
            if scan in seen and seen[scan] != k:
                raise ProbeError(f"probe splits share scan {scan!r}")
            seen[scan] = k


def probe_sweep(net: Network, train: Dataset, val: Dataset, test: Dataset,
                cfg: ProbeConfig | None = None) -> list[ProbeResult]:
    """Fit probes at each requested layer; background is scored but left out of the macro."""
    cfg = cfg or ProbeConfig()
    _check_disjoint(train, val, test)
    layers = cfg.layers or list(net.stages)
    classes = train.classes
    included = train.foreground
    out = []
    for layer in layers:
        splits = [probe_features(net, layer, ds, cfg.batch_size) for ds in (train, val, test)]
        if len(np.unique(splits[0][1])) < 2:
            raise ProbeError("probe training split has fewer than two classes")
        out.append(probe_arrays(layer, *splits, classes, included, cfg))
    return out
