"""Linear probes: how much of a label is linearly readable from embeddings."""

from __future__ import annotations

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp


def fit_softmax_regression(z: np.ndarray, labels: np.ndarray, n_classes: int,
                           l2: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Multinomial logistic regression by L-BFGS; returns (weights, bias)."""
    z = np.asarray(z, dtype=np.float64)
    n, d = z.shape
    onehot = np.eye(n_classes)[labels]

    def objective(theta):
        w = theta[:d * n_classes].reshape(d, n_classes)
        b = theta[d * n_classes:]
        logits = z @ w + b
        logp = logits - logsumexp(logits, axis=1, keepdims=True)
        loss = -np.sum(onehot * logp) / n + 0.5 * l2 * np.sum(w * w)
        g = (np.exp(logp) - onehot) / n
        return loss, np.concatenate([(z.T @ g + l2 * w).ravel(), g.sum(axis=0)])

    theta0 = np.zeros(d * n_classes + n_classes)
    res = minimize(objective, theta0, jac=True, method="L-BFGS-B", options={"maxiter": 2000})
    return res.x[:d * n_classes].reshape(d, n_classes), res.x[d * n_classes:]


def probe_accuracy(z: np.ndarray, labels: np.ndarray, train_fraction: float = 0.5,
                   l2: float = 1e-3) -> float:
    """Held-out accuracy of a linear probe trained on the first part of ``z``.

    Features are standardized with training-split statistics.
    """
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(z) != len(labels) or len(z) < 2:
        raise ValueError("need matching embeddings and labels, at least two rows")
    cut = int(round(train_fraction * len(z)))
    if not 0 < cut < len(z):
        raise ValueError("train_fraction leaves an empty split")
    mu = z[:cut].mean(axis=0)
    sd = z[:cut].std(axis=0)
    sd[sd == 0] = 1.0
    zs = (z - mu) / sd
    n_classes = int(labels.max()) + 1
    w, b = fit_softmax_regression(zs[:cut], labels[:cut], n_classes, l2)
    pred = np.argmax(zs[cut:] @ w + b, axis=1)
    return float(np.mean(pred == labels[cut:]))
