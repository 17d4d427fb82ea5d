"""Two-component Gaussian and Binomial mixtures over CTRs, fitted by standard EM."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, gammaln, logsumexp

GAUSSIAN = "gaussian"
BINOMIAL = "binomial"
KINDS = (GAUSSIAN, BINOMIAL)

VAR_FLOOR = 1e-6
P_EPS = 1e-12
DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 500
N_RESTARTS = 3


class DegenerateInput(ValueError):
    """Fewer than two distinct sample values: no mixture is identifiable."""


@dataclass(frozen=True)
class CtrSamples:
    values: np.ndarray
    trials: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        t = np.asarray(self.trials, dtype=float)
        if v.shape != t.shape or v.ndim != 1:
            raise ValueError("values and trials must be equal-length vectors")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite sample")
        if np.any(t < 1):
            raise ValueError("trials must be >= 1")
        clicks = v * t
        if np.any(np.abs(clicks - np.round(clicks)) > 1e-9 * np.maximum(t, 1)):
            raise ValueError("values * trials must be integral")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "trials", t)

    @classmethod
    def from_counts(cls, clicks, trials) -> "CtrSamples":
        t = np.asarray(trials, dtype=float)
        return cls(np.asarray(clicks, dtype=float) / t, t)

    @property
    def clicks(self) -> np.ndarray:
        return np.round(self.values * self.trials)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class MixtureFit:
    """Fitted two-component mixture; component 1 (relevant) has the larger mean.

    For the Binomial kind ``mu`` is the success probability and ``sigma``
    the CTR standard deviation at the mean session count ``n_trials``.
    """

    kind: str
    pi: float
    mu0: float
    mu1: float
    sigma0: float
    sigma1: float
    n_trials: float | None = None
    loglik: float = float("nan")
    iterations: int = 0
    converged: bool = False
    loglik_trace: tuple = field(default=(), repr=False, compare=False)

    @property
    def low_separation(self) -> bool:
        """Prior collapsed, or the means are within two standard deviations."""
        collapsed = self.pi < 0.02 or self.pi > 0.98
        close = (self.mu1 - self.mu0) < 2.0 * max(self.sigma0, self.sigma1)
        return collapsed or close

    def to_record(self) -> dict:
        return {
            "kind": self.kind,
            "pi": self.pi,
            "mu0": self.mu0,
            "mu1": self.mu1,
            "sigma0": self.sigma0,
            "sigma1": self.sigma1,
            "loglik": self.loglik,
            "iterations": self.iterations,
            "converged": self.converged,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record())

    def swapped(self) -> "MixtureFit":
        return replace(
            self, pi=1.0 - self.pi, mu0=self.mu1, mu1=self.mu0, sigma0=self.sigma1, sigma1=self.sigma0
        )


# -- component log-densities -------------------------------------------------


def _gauss_logpdf(x, mu, var):
    return -0.5 * (np.log(2.0 * np.pi * var) + (x - mu) ** 2 / var)


def _binom_logpmf(c, n, p):
    p = np.clip(p, P_EPS, 1.0 - P_EPS)
    return gammaln(n + 1) - gammaln(c + 1) - gammaln(n - c + 1) + c * np.log(p) + (n - c) * np.log1p(-p)


class _Gaussian:
    def __init__(self, x):
        self.x = x

    def component_logpdf(self, params):
        mu, var = params
        return np.stack([_gauss_logpdf(self.x, mu[j], var[j]) for j in (0, 1)], axis=1)

    def m_step(self, resp):
        w = resp.sum(axis=0)
        mu = np.empty(2)
        var = np.empty(2)
        for j in (0, 1):
            if w[j] <= 0:
                mu[j], var[j] = self.x.mean(), max(self.x.var(), VAR_FLOOR)
                continue
            mu[j] = resp[:, j] @ self.x / w[j]
            var[j] = max(resp[:, j] @ (self.x - mu[j]) ** 2 / w[j], VAR_FLOOR)
        return mu, var


class _Binomial:
    def __init__(self, c, n):
        self.c, self.n = c, n

    def component_logpdf(self, params):
        (p,) = params
        return np.stack([_binom_logpmf(self.c, self.n, p[j]) for j in (0, 1)], axis=1)

    def m_step(self, resp):
        p = np.empty(2)
        for j in (0, 1):
            denom = resp[:, j] @ self.n
            p[j] = resp[:, j] @ self.c / denom if denom > 0 else self.c.sum() / self.n.sum()
        return (np.clip(p, P_EPS, 1.0 - P_EPS),)


def _e_step(model, pi, params):
    with np.errstate(divide="ignore"):
        logw = np.log([1.0 - pi, pi])
    joint = model.component_logpdf(params) + logw
    norm = logsumexp(joint, axis=1)
    resp = np.exp(joint - norm[:, None])
    return float(norm.sum()), resp


def _run_em(model, resp, tol, max_iter):
    """EM from initial responsibilities; returns (pi, params, trace, iters, converged)."""
    pi = float(resp[:, 1].mean())
    params = model.m_step(resp)
    trace = []
    converged = False
    it = 0
    while True:
        ll, resp = _e_step(model, pi, params)
        trace.append(ll)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < tol * max(1.0, abs(trace[-2])):
            converged = True
            break
        if it >= max_iter:
            break
        pi = float(resp[:, 1].mean())
        params = model.m_step(resp)
        it += 1
    return pi, params, trace, it, converged


def _hard(mask):
    return np.column_stack([~mask, mask]).astype(float)


def _median_split(x):
    med = np.median(x)
    upper = x > med
    if not upper.any():
        upper = x >= med
    return _hard(upper)


def _plusplus_split(x, rng):
    c1 = x[rng.integers(len(x))]
    d2 = (x - c1) ** 2
    if d2.sum() == 0:
        return _median_split(x)
    c2 = x[rng.choice(len(x), p=d2 / d2.sum())]
    lo, hi = min(c1, c2), max(c1, c2)
    return _hard(np.abs(x - hi) < np.abs(x - lo))


def _init_resp_from(model, x, init):
    """Responsibilities implied by explicit starting parameters."""
    d = init.to_record() if isinstance(init, MixtureFit) else dict(init)
    pi = float(d["pi"])
    if isinstance(model, _Gaussian):
        params = (
            np.array([d["mu0"], d["mu1"]], dtype=float),
            np.maximum(np.array([d["sigma0"], d["sigma1"]], dtype=float) ** 2, VAR_FLOOR),
        )
    else:
        params = (np.clip(np.array([d["mu0"], d["mu1"]], dtype=float), P_EPS, 1 - P_EPS),)
    return _e_step(model, pi, params)[1]


def fit_em(
    samples: CtrSamples,
    kind: str = GAUSSIAN,
    init=None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    seed: int = 0,
    restarts: int = N_RESTARTS,
) -> MixtureFit:
    """Fit a two-component mixture by EM and return it in canonical order.

    Without ``init`` the fit starts from a median split plus ``restarts``
    k-means++-style random splits and keeps the highest log-likelihood.
    ``init`` (a mapping with pi, mu0, mu1, sigma0, sigma1, or a MixtureFit)
    runs a single EM from those parameters.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown mixture kind {kind!r}")
    x = samples.values
    if len(np.unique(x)) < 2:
        raise DegenerateInput("need at least two distinct CTR values")
    model = _Gaussian(x) if kind == GAUSSIAN else _Binomial(samples.clicks, samples.trials)

    if init is not None:
        starts = [_init_resp_from(model, x, init)]
    else:
        rng = np.random.default_rng(seed)
        starts = [_median_split(x)] + [_plusplus_split(x, rng) for _ in range(restarts)]

    best = None
    for resp in starts:
        result = _run_em(model, resp, tol, max_iter)
        if best is None or result[2][-1] > best[2][-1]:
            best = result
    pi, params, trace, iters, converged = best

    if kind == GAUSSIAN:
        mu, var = params
        sd = np.sqrt(var)
        n_trials = None
    else:
        (mu,) = params
        n_trials = float(samples.trials.mean())
        sd = np.sqrt(mu * (1.0 - mu) / n_trials)
    fit = MixtureFit(
        kind,
        float(pi),
        float(mu[0]),
        float(mu[1]),
        float(sd[0]),
        float(sd[1]),
        n_trials,
        float(trace[-1]),
        iters,
        converged,
        tuple(trace),
    )
    return fit.swapped() if fit.mu1 < fit.mu0 else fit


def component_loglik(fit: MixtureFit, x, n=None):
    """Log density (Gaussian) or log mass (Binomial) of ``x`` under each component."""
    x = np.asarray(x, dtype=float)
    if fit.kind == GAUSSIAN:
        var0 = max(fit.sigma0**2, VAR_FLOOR)
        var1 = max(fit.sigma1**2, VAR_FLOOR)
        return _gauss_logpdf(x, fit.mu0, var0), _gauss_logpdf(x, fit.mu1, var1)
    if n is None:
        n = fit.n_trials
    n = np.asarray(n, dtype=float)
    c = x * n
    # binomial coefficient cancels in the posterior ratio
    p0 = np.clip(fit.mu0, P_EPS, 1 - P_EPS)
    p1 = np.clip(fit.mu1, P_EPS, 1 - P_EPS)
    l0 = c * math.log(p0) + (n - c) * math.log1p(-p0)
    l1 = c * math.log(p1) + (n - c) * math.log1p(-p1)
    return l0, l1


def posterior(fit: MixtureFit, x, n=None):
    """P(R=1 | CTR = x) by Bayes' rule; vectorized over ``x`` (and ``n``).

    When both weighted component likelihoods vanish the answer is 1 if
    ``x`` is closer to ``mu1`` and 0 otherwise.
    """
    xa = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(xa)):
        raise ValueError("non-finite CTR")
    l0, l1 = component_loglik(fit, xa, n)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = math.log(fit.pi) if fit.pi > 0 else -np.inf
        b = math.log1p(-fit.pi) if fit.pi < 1 else -np.inf
        top = a + l1
        bottom = b + l0
        z = top - bottom
        out = expit(z)
    both = np.isneginf(top) & np.isneginf(bottom)
    if np.any(both):
        nearer = (np.abs(xa - fit.mu1) < np.abs(xa - fit.mu0)).astype(float)
        out = np.where(both, nearer, out)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out


def posterior_complement(fit: MixtureFit, x, n=None):
    return 1.0 - posterior(fit, x, n)


def recovery_sample_size(mu0: float, mu1: float, sigma0: float, sigma1: float) -> float:
    """``(max(sigma0, sigma1) / (mu1 - mu0))**2``; sessions needed up to a constant."""
    if not mu1 > mu0:
        raise ValueError("need mu1 > mu0")
    return (max(sigma0, sigma1) / (mu1 - mu0)) ** 2
