"""Regression-based EM for the bias parameters of affine correction.

Latent model per impression at position k: examination E ~ Bern(theta_k),
relevance R ~ Bern(gamma_qd), click C = E * Bern(eps_pos_k if R else eps_neg_k).
The M-step's relevance estimates are replaced by a regressor's predictions
before the next E-step.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy.special import expit

from .clicks import BiasProfile, SessionLog
from .correction import RelevanceEstimates, ac_correct
from .data import Dataset

logger = logging.getLogger(__name__)

PARAM_CLIP = 1e-6
DEFAULT_ITERS = 30
ANOMALY_DROP = 0.02


class Regressor(Protocol):
    def fit(self, X: np.ndarray, y: np.ndarray) -> float: ...

    def predict(self, X: np.ndarray) -> np.ndarray: ...


class LinearSigmoidRegressor:
    """Logistic model trained by full-batch gradient descent on sigmoid
    cross-entropy against soft labels. ``fit`` returns the final loss."""

    def __init__(self, learning_rate: float = 0.5, epochs: int = 200, seed: int = 0):
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.seed = seed
        self.params: np.ndarray | None = None
        self._mean = None
        self._scale = None

    @staticmethod
    def loss_and_grad(params, X, y):
        z = X @ params[:-1] + params[-1]
        p = expit(z)
        # log(1 + e^z) - y z, stable for large |z|
        loss = np.mean(np.logaddexp(0.0, z) - y * z)
        r = (p - y) / len(y)
        g = np.empty_like(params)
        g[:-1] = X.T @ r
        g[-1] = r.sum()
        return float(loss), g

    def fit(self, X, y) -> float:
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        self._mean = X.mean(axis=0)
        self._scale = X.std(axis=0)
        self._scale[self._scale == 0] = 1.0
        Z = (X - self._mean) / self._scale
        rng = np.random.default_rng(self.seed)
        params = np.zeros(X.shape[1] + 1)
        params[:-1] = 1e-3 * rng.standard_normal(X.shape[1])
        loss = float("nan")
        for epoch in range(self.epochs):
            loss, g = self.loss_and_grad(params, Z, y)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient at epoch {epoch} (loss={loss})")
            params -= self.learning_rate * g
        self.params = params
        return self.loss_and_grad(params, Z, y)[0]

    def predict(self, X) -> np.ndarray:
        if self.params is None:
            raise RuntimeError("regressor is not fitted")
        Z = (np.asarray(X, dtype=float) - self._mean) / self._scale
        return expit(Z @ self.params[:-1] + self.params[-1])


def linear_sigmoid_regressor(learning_rate: float = 0.5, epochs: int = 200, seed: int = 0) -> LinearSigmoidRegressor:
    return LinearSigmoidRegressor(learning_rate, epochs, seed)


# -- EM pieces ----------------------------------------------------------------


@dataclass
class Posteriors:
    """Per-record posteriors of the latent (E, R) given the click."""

    exam: np.ndarray  # P(E=1 | c)
    exam_rel: np.ndarray  # P(E=1, R=1 | c)
    exam_nonrel: np.ndarray  # P(E=1, R=0 | c)
    rel: np.ndarray  # P(R=1 | c)
    loglik: float


def e_step(click, position, gamma, profile: BiasProfile) -> Posteriors:
    k = np.asarray(position) - 1
    th, ep, en = profile.theta[k], profile.eps_pos[k], profile.eps_neg[k]
    c = np.asarray(click).astype(bool)
    g = np.asarray(gamma, dtype=float)
    p_click = th * (ep * g + en * (1.0 - g))
    p_skip = 1.0 - p_click
    with np.errstate(divide="ignore", invalid="ignore"):
        # clicked: examination is certain
        rel_c = np.divide(ep * g, ep * g + en * (1.0 - g), out=g.copy(), where=(ep * g + en * (1.0 - g)) > 0)
        er_s = np.divide(th * (1.0 - ep) * g, p_skip, out=np.zeros_like(g), where=p_skip > 0)
        en_s = np.divide(th * (1.0 - en) * (1.0 - g), p_skip, out=np.zeros_like(g), where=p_skip > 0)
        rel_s = np.divide(g * (1.0 - th * ep), p_skip, out=g.copy(), where=p_skip > 0)
    exam_rel = np.where(c, rel_c, er_s)
    exam_nonrel = np.where(c, 1.0 - rel_c, en_s)
    rel = np.where(c, rel_c, rel_s)
    with np.errstate(divide="ignore"):
        ll = float(np.sum(np.log(np.where(c, p_click, p_skip))))
    return Posteriors(exam_rel + exam_nonrel, exam_rel, exam_nonrel, rel, ll)


def m_step_bias(click, position, post: Posteriors, m: int) -> tuple[BiasProfile, bool]:
    """Expected-count updates of theta, eps_pos, eps_neg per position.

    Returns the new profile and whether any value had to be clipped.
    """
    k = np.asarray(position) - 1
    c = np.asarray(click).astype(float)
    n = np.bincount(k, minlength=m).astype(float)
    exam = np.bincount(k, weights=post.exam, minlength=m)
    er = np.bincount(k, weights=post.exam_rel, minlength=m)
    en = np.bincount(k, weights=post.exam_nonrel, minlength=m)
    er_c = np.bincount(k, weights=post.exam_rel * c, minlength=m)
    en_c = np.bincount(k, weights=post.exam_nonrel * c, minlength=m)
    with np.errstate(invalid="ignore", divide="ignore"):
        theta = np.where(n > 0, exam / np.where(n > 0, n, 1), 1.0)
        eps_pos = np.where(er > 0, er_c / np.where(er > 0, er, 1), 1.0)
        eps_neg = np.where(en > 0, en_c / np.where(en > 0, en, 1), 0.0)
    raw = np.concatenate([theta, eps_pos, eps_neg])
    theta = np.clip(theta, PARAM_CLIP, 1.0)
    eps_pos = np.clip(eps_pos, 2 * PARAM_CLIP, 1.0)
    eps_neg = np.clip(eps_neg, 0.0, eps_pos - PARAM_CLIP)
    clipped = not np.allclose(raw, np.concatenate([theta, eps_pos, eps_neg]), rtol=0, atol=1e-12)
    return BiasProfile(theta, eps_pos, eps_neg), clipped


def default_init(m: int) -> BiasProfile:
    k = np.arange(1, m + 1, dtype=float)
    return BiasProfile(1.0 / k, np.full(m, 0.9), np.full(m, 0.1))


# -- driver ---------------------------------------------------------------------


@dataclass
class RbemState:
    profile_est: BiasProfile
    regressor: object
    iteration: int = 0
    history: list = field(default_factory=list)

    def history_csv(self) -> str:
        m = self.profile_est.m
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["iteration"]
        for name in ("theta", "eps_pos", "eps_neg"):
            header += [f"{name}_{k}" for k in range(1, m + 1)]
        with_ndcg = any("ndcg" in h for h in self.history)
        w.writerow(header + ["regressor_loss"] + (["ndcg"] if with_ndcg else []))
        for h in self.history:
            row = [h["iteration"]]
            for name in ("theta", "eps_pos", "eps_neg"):
                row += [repr(float(v)) for v in h[name]]
            row.append(repr(float(h["regressor_loss"])))
            if with_ndcg:
                row.append(repr(float(h.get("ndcg", float("nan")))))
            w.writerow(row)
        return buf.getvalue()

    @property
    def ndcg_curve(self) -> list:
        return [h.get("ndcg") for h in self.history]


def last_before_anomaly(values, drop: float = ANOMALY_DROP) -> int:
    """Index of the last value before the first drop larger than ``drop``."""
    for i in range(1, len(values)):
        if values[i - 1] - values[i] > drop:
            return i - 1
    return len(values) - 1


def _observed_pairs(log: SessionLog):
    n_d = int(log.doc.max()) + 1
    code = log.query * n_d + log.doc
    uniq, inverse = np.unique(code, return_inverse=True)
    return uniq // n_d, uniq % n_d, inverse


def rbem_run(
    log: SessionLog,
    dataset: Dataset,
    regressor: Regressor,
    iters: int = DEFAULT_ITERS,
    init: BiasProfile | None = None,
    gamma_init=None,
    ndcg_hook: Callable[[RelevanceEstimates], float] | None = None,
) -> tuple[RbemState, RelevanceEstimates]:
    """Run regression-based EM and return the state plus the final AC labels.

    The regressor sees one row per observed (query, doc) pair, in ascending
    (query index, doc id) order. ``gamma_init`` gives the starting relevance
    per pair in that order; by default it is the clipped AC estimate under
    ``init``. ``ndcg_hook`` receives the AC labels of each iteration.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    m = log.m
    profile = init if init is not None else default_init(m)
    if profile.m < m:
        raise ValueError("init profile shorter than the logged lists")
    profile = profile.truncated(m)

    pq, pd, rec_pair = _observed_pairs(log)
    X = np.stack([dataset.queries[q].features[d] for q, d in zip(pq, pd)])
    counts = np.bincount(rec_pair).astype(float)

    if gamma_init is None:
        est = ac_correct(log, profile.alpha, profile.beta)
        gamma = np.clip(np.array([est.labels[q][d] for q, d in zip(pq, pd)]), 0.0, 1.0)
    else:
        gamma = np.asarray(gamma_init, dtype=float)
        if gamma.shape != (len(pq),):
            raise ValueError(f"gamma_init must have {len(pq)} entries")

    state = RbemState(profile, regressor)
    n_clipped = 0
    for it in range(1, iters + 1):
        post = e_step(log.click, log.position, gamma[rec_pair], state.profile_est)
        profile, clipped = m_step_bias(log.click, log.position, post, m)
        if clipped:
            n_clipped += 1
            level = logging.WARNING if n_clipped == 1 else logging.DEBUG
            logger.log(level, "rbEM iteration %d: parameter estimate clipped into range", it)
        target = np.bincount(rec_pair, weights=post.rel, minlength=len(pq)) / counts
        reg_loss = regressor.fit(X, target)
        gamma = np.clip(np.asarray(regressor.predict(X), dtype=float), 0.0, 1.0)

        state.profile_est = profile
        state.iteration = it
        entry = {
            "iteration": it,
            "theta": profile.theta.copy(),
            "eps_pos": profile.eps_pos.copy(),
            "eps_neg": profile.eps_neg.copy(),
            "loglik": post.loglik,
            "regressor_loss": float(reg_loss) if reg_loss is not None else float("nan"),
        }
        if ndcg_hook is not None:
            entry["ndcg"] = float(ndcg_hook(ac_correct(log, profile.alpha, profile.beta, dataset)))
        state.history.append(entry)

    if n_clipped > 1:
        logger.warning("rbEM: estimates clipped in %d of %d iterations", n_clipped, iters)
    final = ac_correct(log, state.profile_est.alpha, state.profile_est.beta, dataset, method="AC")
    return state, final
