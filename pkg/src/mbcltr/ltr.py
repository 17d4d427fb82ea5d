"""Linear rankers trained on (possibly soft, possibly negative) relevance labels."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import Dataset

PAIR_TIE_TOL = 1e-9


@dataclass(frozen=True)
class RankerModel:
    weights: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if not (np.all(np.isfinite(w)) and np.isfinite(self.bias)):
            raise ValueError("non-finite model parameters")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))

    @property
    def feature_dim(self) -> int:
        return len(self.weights)

    def score(self, X: np.ndarray) -> np.ndarray:
        return X @ self.weights + self.bias

    def to_json(self) -> str:
        return json.dumps(
            {"weights": self.weights.tolist(), "bias": self.bias, "feature_dim": self.feature_dim}
        )

    @classmethod
    def from_json(cls, text: str) -> "RankerModel":
        d = json.loads(text)
        w = np.asarray(d["weights"], dtype=float)
        if len(w) != d.get("feature_dim", len(w)):
            raise ValueError("feature_dim does not match weights")
        return cls(w, d["bias"])

    @classmethod
    def zero(cls, feature_dim: int) -> "RankerModel":
        return cls(np.zeros(feature_dim), 0.0)


def rank(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties by ascending index."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(len(scores)), -scores))


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "pairwise_hinge"
    learning_rate: float = 0.1
    epochs: int = 300
    seed: int = 0
    l2: float = 0.0

    def __post_init__(self):
        if self.objective not in ("pointwise_mse", "pairwise_hinge"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.learning_rate <= 0 or self.epochs < 1 or self.l2 < 0:
            raise ValueError("need learning_rate > 0, epochs >= 1, l2 >= 0")


# -- objectives -------------------------------------------------------------
# Parameters are packed as [w_1..w_d, b].


def pointwise_loss_grad(params, X, y, l2=0.0):
    w, b = params[:-1], params[-1]
    r = X @ w + b - y
    loss = np.mean(r * r) + l2 * (w @ w)
    g = np.empty_like(params)
    g[:-1] = 2.0 * (X.T @ r) / len(y) + 2.0 * l2 * w
    g[-1] = 2.0 * r.mean()
    return loss, g


def pairwise_loss_grad(params, D, l2=0.0, weights=None):
    """Hinge on pair differences ``D[p] = x_better - x_worse``.

    ``weights`` (default uniform) scale each pair's hinge; the data term is
    normalized by their sum.
    """
    w = params[:-1]
    pw = np.ones(len(D)) if weights is None else np.asarray(weights, dtype=float)
    total = pw.sum()
    margin = 1.0 - D @ w
    active = margin > 0
    loss = pw[active] @ margin[active] / total + l2 * (w @ w)
    g = np.zeros_like(params)
    g[:-1] = -(pw[active] @ D[active]) / total + 2.0 * l2 * w
    return loss, g


def pair_differences(X: np.ndarray, y: np.ndarray, groups: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All within-group ``x_i - x_j`` with ``y_i > y_j`` (ties skipped).

    Also returns the label gap ``y_i - y_j`` of each pair, used as its
    weight so that soft labels differing by a hair barely count.
    """
    diffs, gaps = [], []
    for g in np.unique(groups):
        idx = np.flatnonzero(groups == g)
        yi = y[idx]
        gap = yi[:, None] - yi[None, :]
        better, worse = np.nonzero(gap > PAIR_TIE_TOL)
        if len(better):
            diffs.append(X[idx[better]] - X[idx[worse]])
            gaps.append(gap[better, worse])
    if not diffs:
        return np.zeros((0, X.shape[1])), np.zeros(0)
    return np.concatenate(diffs, axis=0), np.concatenate(gaps)


def fit_linear(X, y, groups, cfg: TrainConfig) -> tuple[RankerModel, list[float]]:
    """Full-batch gradient descent; returns the model and per-epoch losses.

    Features are standardized internally and the scaling is folded back
    into the returned weights. The step is capped at 1/L for the pointwise
    objective so the loss cannot increase.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    if n == 0:
        raise ValueError("empty training set")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Z = (X - mean) / scale

    rng = np.random.default_rng(cfg.seed)
    params = np.zeros(d + 1)
    losses: list[float] = []

    if cfg.objective == "pointwise_mse":
        lipschitz = 2.0 * np.linalg.eigvalsh(Z.T @ Z / n).max() + 2.0 * cfg.l2
        step = min(cfg.learning_rate, 1.0 / max(lipschitz, 2.0))
        params[:-1] = 1e-3 * rng.standard_normal(d)
        for _ in range(cfg.epochs):
            loss, g = pointwise_loss_grad(params, Z, y, cfg.l2)
            losses.append(float(loss))
            params -= step * g
        losses.append(float(pointwise_loss_grad(params, Z, y, cfg.l2)[0]))
    else:
        D, gaps = pair_differences(Z, y, np.asarray(groups))
        if len(D) == 0:
            return RankerModel.zero(d), [0.0]
        params[:-1] = 1e-3 * rng.standard_normal(d)
        for _ in range(cfg.epochs):
            loss, g = pairwise_loss_grad(params, D, cfg.l2, gaps)
            losses.append(float(loss))
            params -= cfg.learning_rate * g
        losses.append(float(pairwise_loss_grad(params, D, cfg.l2, gaps)[0]))
        params[-1] = 0.0

    if not np.all(np.isfinite(params)):
        raise FloatingPointError("training diverged")
    w = params[:-1] / scale
    b = params[-1] - w @ mean
    return RankerModel(w, b), losses


def training_arrays(dataset: Dataset, labels):
    """Stack features/labels of covered documents (non-NaN labels)."""
    per_query = getattr(labels, "labels", labels)
    Xs, ys, gs = [], [], []
    for qi, (q, lab) in enumerate(zip(dataset.queries, per_query)):
        lab = np.asarray(lab, dtype=float)
        keep = ~np.isnan(lab)
        if keep.any():
            Xs.append(q.features[keep])
            ys.append(lab[keep])
            gs.append(np.full(keep.sum(), qi))
    if not Xs:
        raise ValueError("labels cover no documents")
    return np.concatenate(Xs), np.concatenate(ys), np.concatenate(gs)


def train(dataset: Dataset, labels, cfg: TrainConfig = TrainConfig()) -> RankerModel:
    """Fit a linear scorer to ``labels`` (per-query arrays, NaN = unobserved).

    Labels are used as-is: values outside [0, 1] from AC/IPS are not clipped.
    """
    X, y, groups = training_arrays(dataset, labels)
    return fit_linear(X, y, groups, cfg)[0]
