"""Discrete observation models: Gaussian-mixture fitting, TP-2 checks, KL ranking."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

PMF_TOL = 1e-9
TP2_TOL = 1e-12
KL_SMOOTHING = 1e-9
VARIANCE_FLOOR = 1e-3
DEFAULT_ALPHABET = 100


@dataclass(frozen=True, eq=False)
class DiscretePmf:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("pmf must be a non-empty vector")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("pmf entries must be finite and non-negative")
        if abs(p.sum() - 1.0) > PMF_TOL:
            raise ValueError(f"pmf must sum to 1 (got {p.sum()!r})")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def __len__(self):
        return self.probs.size

    def __eq__(self, other):
        return isinstance(other, DiscretePmf) and np.array_equal(self.probs, other.probs)

    @classmethod
    def normalized(cls, weights) -> "DiscretePmf":
        w = np.asarray(weights, dtype=float)
        return cls(w / w.sum())


@dataclass(frozen=True, eq=False)
class ObservationModel:
    """Observation pmfs for the no-intrusion (``pmf0``) and intrusion (``pmf1``) states."""

    pmf0: np.ndarray
    pmf1: np.ndarray

    def __post_init__(self):
        p0 = DiscretePmf(self.pmf0).probs
        p1 = DiscretePmf(self.pmf1).probs
        if p0.size != p1.size:
            raise ValueError("pmf0 and pmf1 must share the alphabet size")
        object.__setattr__(self, "pmf0", p0)
        object.__setattr__(self, "pmf1", p1)
        object.__setattr__(self, "_cdfs", np.vstack([np.cumsum(p0), np.cumsum(p1)]))

    @property
    def alphabet_size(self) -> int:
        return self.pmf0.size

    @property
    def matrix(self) -> np.ndarray:
        return np.vstack([self.pmf0, self.pmf1])

    def __eq__(self, other):
        return (isinstance(other, ObservationModel)
                and np.array_equal(self.pmf0, other.pmf0)
                and np.array_equal(self.pmf1, other.pmf1))


@dataclass(frozen=True, eq=False)
class GmmParams:
    weights: np.ndarray
    means: np.ndarray
    stddevs: np.ndarray
    loglik_history: tuple[float, ...] = field(default=(), compare=False)
    converged: bool = field(default=True, compare=False)

    @property
    def k(self) -> int:
        return len(self.weights)

    def logpdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)[:, None]
        var = self.stddevs ** 2
        comp = (np.log(self.weights) - 0.5 * np.log(2 * np.pi * var)
                - 0.5 * (x - self.means) ** 2 / var)
        return _logsumexp(comp, axis=1)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def discretize_gmm(params: GmmParams, alphabet_size: int) -> DiscretePmf:
    """Mixture density evaluated at the integer symbols 0..alphabet_size-1, normalised."""
    if alphabet_size < 2:
        raise ValueError("alphabet_size must be >= 2")
    logp = params.logpdf(np.arange(alphabet_size))
    logp -= _logsumexp(logp[None, :], axis=1)[0]
    p = np.exp(logp)
    return DiscretePmf(p / p.sum())


def fit_gmm_em(samples, k: int, alphabet_size: int = DEFAULT_ALPHABET,
               max_iter: int = 200, rel_tol: float = 1e-6,
               var_floor: float = VARIANCE_FLOOR) -> tuple[GmmParams, DiscretePmf]:
    """Fit a k-component 1-D Gaussian mixture by EM and discretise it.

    Initialisation is deterministic: means at evenly spread sample quantiles,
    pooled variance, uniform weights. ``params.converged`` is False when the
    relative log-likelihood change never fell below ``rel_tol``; the best
    iterate is returned in that case.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if k < 1:
        raise ValueError("k must be >= 1")
    if x.size < 10 * k:
        raise ValueError(f"need at least {10 * k} samples for k={k}, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    if alphabet_size < 2:
        raise ValueError("alphabet_size must be >= 2")

    n = x.size
    means = np.quantile(x, (np.arange(k) + 0.5) / k)
    var = np.full(k, max(float(np.var(x)), var_floor))
    weights = np.full(k, 1.0 / k)

    def loglik_and_resp(w, mu, v):
        comp = np.log(w) - 0.5 * np.log(2 * np.pi * v) - 0.5 * (x[:, None] - mu) ** 2 / v
        ll_i = _logsumexp(comp, axis=1)
        return ll_i.sum(), np.exp(comp - ll_i[:, None])

    ll, resp = loglik_and_resp(weights, means, var)
    history = [ll]
    best = (ll, weights, means, var)
    converged = False
    for _ in range(max_iter):
        nk = resp.sum(axis=0)
        # empty components keep their parameters
        nk_safe = np.maximum(nk, 1e-300)
        weights = np.maximum(nk / n, 1e-300)
        weights /= weights.sum()
        means = np.where(nk > 0, resp.T @ x / nk_safe, means)
        var = np.where(nk > 0, (resp * (x[:, None] - means) ** 2).sum(axis=0) / nk_safe, var)
        var = np.maximum(var, var_floor)
        ll_new, resp = loglik_and_resp(weights, means, var)
        history.append(ll_new)
        if ll_new > best[0]:
            best = (ll_new, weights, means, var)
        if abs(ll_new - ll) <= rel_tol * max(abs(ll), 1e-300):
            converged = True
            ll = ll_new
            break
        ll = ll_new
    if not converged:
        logger.warning("EM did not reach relative tolerance %g in %d iterations", rel_tol, max_iter)
    _, w, mu, v = best
    order = np.argsort(mu, kind="stable")
    params = GmmParams(w[order], mu[order], np.sqrt(v[order]),
                       loglik_history=tuple(float(h) for h in history), converged=converged)
    return params, discretize_gmm(params, alphabet_size)


def tp2_check(model: ObservationModel, tol: float = TP2_TOL) -> tuple[bool, tuple[int, int] | None]:
    """Check every 2x2 minor f0(i) f1(j) - f0(j) f1(i), i < j, is >= -tol.

    Returns ``(True, None)`` or ``(False, (i, j))`` for the lexicographically
    first violating pair.
    """
    f0, f1 = model.pmf0, model.pmf1
    n = f0.size
    for i in range(n - 1):
        minors = f0[i] * f1[i + 1:] - f0[i + 1:] * f1[i]
        bad = np.flatnonzero(minors < -tol)
        if bad.size:
            return False, (i, i + 1 + int(bad[0]))
    return True, None


def _smooth(p: np.ndarray, eps: float) -> np.ndarray:
    q = p + eps
    return q / q.sum()


def kl_divergence(p, q, smoothing: float = KL_SMOOTHING) -> float:
    """KL(p || q) in nats after additive smoothing of both arguments."""
    p = np.asarray(getattr(p, "probs", p), dtype=float)
    q = np.asarray(getattr(q, "probs", q), dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"alphabet mismatch: {p.size} vs {q.size}")
    ps, qs = _smooth(p, smoothing), _smooth(q, smoothing)
    mask = ps > 0
    return float(max(0.0, np.sum(ps[mask] * np.log(ps[mask] / qs[mask]))))


def empirical_pmf(samples, alphabet_size: int, smoothing: float = 0.0) -> DiscretePmf:
    s = np.asarray(samples, dtype=np.int64).ravel()
    if smoothing < 0:
        raise ValueError("smoothing must be >= 0")
    if s.size and (s.min() < 0 or s.max() >= alphabet_size):
        raise ValueError(f"symbol outside 0..{alphabet_size - 1}")
    counts = np.bincount(s, minlength=alphabet_size).astype(float)
    denom = s.size + smoothing * alphabet_size
    if denom <= 0:
        raise ValueError("no samples and no smoothing: pmf undefined")
    return DiscretePmf((counts + smoothing) / denom)


def sample_observation(model: ObservationModel, s: int, rng: np.random.Generator) -> int:
    return observation_from_uniform(model, s, rng.random())


def observation_from_uniform(model: ObservationModel, s: int, u: float) -> int:
    if s not in (0, 1):
        raise ValueError("observations are only emitted in live states")
    cdf = model._cdfs[s]
    idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return min(idx, cdf.size - 1)


def rank_metrics(samples_by_metric: dict[str, tuple[np.ndarray, np.ndarray]],
                 alphabet_size: int, smoothing: float = 0.0) -> list[tuple[str, float]]:
    """Rank metrics by KL(no-intrusion || intrusion) of their empirical pmfs, most informative first."""
    scores = []
    for name, (x0, x1) in samples_by_metric.items():
        p0 = empirical_pmf(x0, alphabet_size, smoothing)
        p1 = empirical_pmf(x1, alphabet_size, smoothing)
        scores.append((name, kl_divergence(p0, p1)))
    return sorted(scores, key=lambda t: -t[1])


def gaussian_model(mean0: float, mean1: float, std: float, alphabet_size: int) -> ObservationModel:
    """Two discretised equal-variance Gaussians; TP-2 whenever mean1 >= mean0."""
    p0 = discretize_gmm(GmmParams(np.ones(1), np.array([mean0]), np.array([std])), alphabet_size)
    p1 = discretize_gmm(GmmParams(np.ones(1), np.array([mean1]), np.array([std])), alphabet_size)
    return ObservationModel(p0.probs, p1.probs)
