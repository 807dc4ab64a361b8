"""Truncated stick-breaking mean-field inference for a Dirichlet process mixture.

Model over embeddings z_n in R^H::

    beta_l ~ Beta(1, gamma),  l < T       (beta_T = 1 under q)
    mu_lh ~ N(0, 1)
    lam_lh ~ Gamma(1, 1)                  (per-dimension precision, rate form)
    s_n ~ Cat(pi(beta)),  z_nh ~ N(mu_{s_n h}, 1 / lam_{s_n h})

The variational family is fully factorized: Beta sticks, a diagonal Normal
per component mean, a Gamma per component precision, and a categorical per
sample. Each coordinate update is the exact conditional optimum, so the
bound never decreases across sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln, logsumexp

from .gaussian import LOG_2PI

PRIOR_MEAN_VAR = 1.0
PRIOR_PREC_SHAPE = 1.0
PRIOR_PREC_RATE = 1.0
EFFECTIVE_WEIGHT = 0.05


@dataclass
class DpmPosterior:
    gamma: float
    stick_a: np.ndarray   # (T-1,)
    stick_b: np.ndarray   # (T-1,)
    mean_m: np.ndarray    # (T, H)
    mean_v: np.ndarray    # (T, H)
    prec_a: np.ndarray    # (T, H)
    prec_b: np.ndarray    # (T, H)
    resp: np.ndarray      # (N, T)

    @property
    def T(self) -> int:
        return self.mean_m.shape[0]

    @property
    def dim(self) -> int:
        return self.mean_m.shape[1]


@dataclass
class DpmSummary:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    assignments: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def effective_components(self) -> int:
        return int(np.sum(self.weights > EFFECTIVE_WEIGHT))


@dataclass
class DpmFit:
    posterior: DpmPosterior
    elbo_trace: list[float]
    converged: bool


def _expected_log_sticks(post: DpmPosterior) -> np.ndarray:
    """E[log pi_l] under q, with the terminal stick absorbing the remainder."""
    total = digamma(post.stick_a + post.stick_b)
    log_b = digamma(post.stick_a) - total
    log_1mb = digamma(post.stick_b) - total
    out = np.zeros(post.T)
    out[:-1] = log_b
    out[1:] += np.cumsum(log_1mb)
    return out


def _expected_loglik(post: DpmPosterior, z: np.ndarray) -> np.ndarray:
    """(N, T) matrix of E_q[log N(z_n; mu_l, 1/lam_l)]."""
    e_lam = post.prec_a / post.prec_b
    e_log_lam = digamma(post.prec_a) - np.log(post.prec_b)
    sq = (z[:, None, :] - post.mean_m[None, :, :]) ** 2 + post.mean_v[None, :, :]
    return 0.5 * (e_log_lam[None] - LOG_2PI - e_lam[None] * sq).sum(axis=-1)


def _update_resp(post: DpmPosterior, z: np.ndarray) -> None:
    logits = _expected_log_sticks(post)[None, :] + _expected_loglik(post, z)
    post.resp = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))


def _update_sticks(post: DpmPosterior) -> None:
    counts = post.resp.sum(axis=0)
    tail = np.cumsum(counts[::-1])[::-1]  # tail[l] = sum_{j >= l} N_j
    post.stick_a = 1.0 + counts[:-1]
    post.stick_b = post.gamma + tail[1:]


def _update_means(post: DpmPosterior, z: np.ndarray) -> None:
    counts = post.resp.sum(axis=0)[:, None]
    sums = post.resp.T @ z
    e_lam = post.prec_a / post.prec_b
    precision = 1.0 / PRIOR_MEAN_VAR + e_lam * counts
    post.mean_v = 1.0 / precision
    post.mean_m = e_lam * sums / precision


def _update_precisions(post: DpmPosterior, z: np.ndarray) -> None:
    counts = post.resp.sum(axis=0)[:, None]
    sums = post.resp.T @ z
    sq_sums = post.resp.T @ (z * z)
    m, v = post.mean_m, post.mean_v
    scatter = sq_sums - 2.0 * m * sums + counts * (m * m + v)
    post.prec_a = PRIOR_PREC_SHAPE + 0.5 * counts * np.ones_like(m)
    post.prec_b = PRIOR_PREC_RATE + 0.5 * np.maximum(scatter, 0.0)


def dpm_elbo(post: DpmPosterior, z: np.ndarray) -> float:
    """Mean-field lower bound of the truncated model on embeddings ``z``."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (post.resp.shape[0], post.dim):
        raise ValueError(f"embeddings shape {z.shape} inconsistent with posterior")
    resp = post.resp
    total = digamma(post.stick_a + post.stick_b)
    log_b = digamma(post.stick_a) - total
    log_1mb = digamma(post.stick_b) - total
    e_log_lam = digamma(post.prec_a) - np.log(post.prec_b)
    e_lam = post.prec_a / post.prec_b
    a0, b0 = PRIOR_PREC_SHAPE, PRIOR_PREC_RATE

    lik = np.sum(resp * _expected_loglik(post, z))
    assign = np.sum(resp * _expected_log_sticks(post)[None, :])
    p_beta = np.sum(np.log(post.gamma) + (post.gamma - 1.0) * log_1mb)
    p_mu = np.sum(-0.5 * np.log(2 * np.pi * PRIOR_MEAN_VAR)
                  - 0.5 * (post.mean_m ** 2 + post.mean_v) / PRIOR_MEAN_VAR)
    p_lam = np.sum(a0 * np.log(b0) - gammaln(a0) + (a0 - 1.0) * e_log_lam - b0 * e_lam)

    q_beta = np.sum(gammaln(post.stick_a + post.stick_b) - gammaln(post.stick_a)
                    - gammaln(post.stick_b) + (post.stick_a - 1.0) * log_b
                    + (post.stick_b - 1.0) * log_1mb)
    h_mu = np.sum(0.5 * (LOG_2PI + 1.0 + np.log(post.mean_v)))
    h_lam = np.sum(post.prec_a - np.log(post.prec_b) + gammaln(post.prec_a)
                   + (1.0 - post.prec_a) * digamma(post.prec_a))
    with np.errstate(divide="ignore", invalid="ignore"):
        h_s = -np.sum(np.where(resp > 0, resp * np.log(resp), 0.0))
    return float(lik + assign + p_beta + p_mu + p_lam - q_beta + h_mu + h_lam + h_s)


def _kmeanspp_resp(z: np.ndarray, T: int, k: int, rng: np.random.Generator) -> np.ndarray:
    n = z.shape[0]
    k = max(1, min(k, n, T))
    centers = [z[rng.integers(n)]]
    d2 = np.sum((z - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            break
        idx = rng.choice(n, p=d2 / total)
        centers.append(z[idx])
        d2 = np.minimum(d2, np.sum((z - z[idx]) ** 2, axis=1))
    c = np.asarray(centers)
    nearest = np.argmin(((z[:, None, :] - c[None]) ** 2).sum(-1), axis=1)
    resp = np.zeros((n, T))
    resp[np.arange(n), nearest] = 1.0
    return resp


def _posterior_from_resp(resp: np.ndarray, z: np.ndarray, gamma: float) -> DpmPosterior:
    T, H = resp.shape[1], z.shape[1]
    post = DpmPosterior(
        gamma=gamma,
        stick_a=np.ones(T - 1), stick_b=np.full(T - 1, gamma),
        mean_m=np.zeros((T, H)), mean_v=np.ones((T, H)),
        prec_a=np.full((T, H), PRIOR_PREC_SHAPE), prec_b=np.full((T, H), PRIOR_PREC_RATE),
        resp=resp.copy(),
    )
    _update_sticks(post)
    _update_means(post, z)
    _update_precisions(post, z)
    return post


def _run(post: DpmPosterior, z: np.ndarray, max_iters: int, tol: float) -> DpmFit:
    trace: list[float] = []
    converged = False
    for _ in range(max_iters):
        _update_sticks(post)
        _update_means(post, z)
        _update_precisions(post, z)
        _update_resp(post, z)
        trace.append(dpm_elbo(post, z))
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < tol * max(1.0, abs(trace[-1])):
            converged = True
            break
    return DpmFit(post, trace, converged)


def dpm_fit(embeddings, T: int = 10, gamma: float = 1.0, max_iters: int = 200,
            tol: float = 1e-4, rng: np.random.Generator | int | None = 0,
            n_init: int = 3, init_resp: np.ndarray | None = None) -> tuple[DpmPosterior, list[float]]:
    """Coordinate ascent from ``n_init`` k-means++ seedings; keeps the best bound.

    Seedings use T centers first and then progressively fewer, so a run that
    starts with every component occupied competes against coarser starts.
    ``init_resp`` (an N x T responsibility matrix) replaces the seedings with
    a single warm start.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValueError("embeddings must be a non-empty N x H matrix")
    if not np.all(np.isfinite(z)):
        raise ValueError("embeddings contain non-finite values")
    if T < 2:
        raise ValueError("truncation T must be at least 2")
    if gamma <= 0:
        raise ValueError("concentration gamma must be positive")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

    if init_resp is not None:
        starts = [np.asarray(init_resp, dtype=np.float64)]
    else:
        sizes = np.unique(np.linspace(T, 1, max(1, n_init)).round().astype(int))[::-1]
        starts = [_kmeanspp_resp(z, T, int(k), rng) for k in sizes]
    best: DpmFit | None = None
    for resp in starts:
        fit = _run(_posterior_from_resp(resp, z, gamma), z, max_iters, tol)
        if best is None or fit.elbo_trace[-1] > best.elbo_trace[-1]:
            best = fit
    return best.posterior, best.elbo_trace


def summarize(post: DpmPosterior) -> DpmSummary:
    e_beta = post.stick_a / (post.stick_a + post.stick_b)
    weights = np.zeros(post.T)
    remaining = 1.0
    for l in range(post.T - 1):
        weights[l] = e_beta[l] * remaining
        remaining *= 1.0 - e_beta[l]
    weights[-1] = remaining
    return DpmSummary(
        weights=weights,
        means=post.mean_m.copy(),
        variances=post.prec_b / post.prec_a,
        assignments=np.argmax(post.resp, axis=1),
    )


def component_log_scores(summary: DpmSummary, embedding: np.ndarray) -> np.ndarray:
    e = np.atleast_2d(np.asarray(embedding, dtype=np.float64))
    diff = e[:, None, :] - summary.means[None]
    ll = -0.5 * (LOG_2PI + np.log(summary.variances)[None] + diff ** 2 / summary.variances[None]).sum(-1)
    with np.errstate(divide="ignore"):
        return np.log(summary.weights)[None] + ll


def assign(summary: DpmSummary, embedding) -> int | np.ndarray:
    """Most probable component; ties go to the lower index."""
    scores = component_log_scores(summary, embedding)
    idx = np.argmax(scores, axis=1)
    return int(idx[0]) if np.ndim(embedding) == 1 else idx


def posterior_over_components(summary: DpmSummary, z: np.ndarray) -> np.ndarray:
    """p(s | z) under the summary's plug-in mixture, one row per embedding."""
    scores = component_log_scores(summary, z)
    return np.exp(scores - logsumexp(scores, axis=1, keepdims=True))
