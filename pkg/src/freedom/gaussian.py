"""Diagonal-Gaussian densities, sampling, and the closed-form regularizers.

Every function accepts either a single vector (trailing dimension H) or a
batch of rows and reduces over the last axis, so a batch of N rows yields
N per-sample values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DimensionError, Tensor, as_tensor

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class DiagGaussian:
    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.log_var = as_tensor(self.log_var)
        if self.mean.shape != self.log_var.shape:
            raise DimensionError(
                f"mean shape {self.mean.shape} != log_var shape {self.log_var.shape}"
            )

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def var(self) -> Tensor:
        return self.log_var.exp()

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.log_var.detach())

    def rows(self, idx) -> "DiagGaussian":
        return DiagGaussian(self.mean[idx], self.log_var[idx])


@dataclass
class ClassPrior:
    """Class weights (via softmax logits) and one diagonal Gaussian per class."""

    logits: Tensor
    means: Tensor
    log_vars: Tensor

    @classmethod
    def from_weights(cls, weights, means, log_vars, requires_grad: bool = False) -> "ClassPrior":
        weights = np.asarray(weights, dtype=np.float64)
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("class weights must be non-negative and sum to 1")
        with np.errstate(divide="ignore"):
            logits = np.log(weights)
        return cls(Tensor(logits, requires_grad), Tensor(means, requires_grad),
                   Tensor(log_vars, requires_grad))

    @classmethod
    def init(cls, n_classes: int, dim: int, rng: np.random.Generator) -> "ClassPrior":
        return cls(
            Tensor(np.zeros(n_classes), True, "prior.logits"),
            Tensor(rng.standard_normal((n_classes, dim)), True, "prior.means"),
            Tensor(np.zeros((n_classes, dim)), True, "prior.log_vars"),
        )

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def weights(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max()
        w = np.exp(z)
        return w / w.sum()

    def component(self, y) -> DiagGaussian:
        return DiagGaussian(self.means[y], self.log_vars[y])

    def parameters(self) -> list[Tensor]:
        return [self.logits, self.means, self.log_vars]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("prior.logits", self.logits), ("prior.means", self.means),
                ("prior.log_vars", self.log_vars)]


def _check(a: int, b: int, what: str):
    if a != b:
        raise DimensionError(f"{what}: dimension {a} != {b}")


def log_density(g: DiagGaussian, x) -> Tensor:
    x = as_tensor(x)
    _check(x.shape[-1], g.dim, "log_density")
    diff = x - g.mean
    return -0.5 * (LOG_2PI + g.log_var + diff * diff / g.var).sum(axis=-1)


def reparameterize(g: DiagGaussian, noise) -> Tensor:
    noise = as_tensor(noise)
    _check(noise.shape[-1], g.dim, "reparameterize")
    return g.mean + (g.log_var * 0.5).exp() * noise


def cross_expectation(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """E_q[log p] for diagonal Gaussians, in closed form."""
    _check(q.dim, p.dim, "cross_expectation")
    diff = q.mean - p.mean
    p_var = p.var
    return -0.5 * (LOG_2PI + p.log_var + q.var / p_var + diff * diff / p_var).sum(axis=-1)


def entropy(q: DiagGaussian) -> Tensor:
    return 0.5 * (LOG_2PI + 1.0 + q.log_var).sum(axis=-1)


def class_regularizer(q: DiagGaussian, prior: ClassPrior, label) -> Tensor:
    """KL[q(z, y|x) || p(z, y)] with the label observed (one-hot q(y|x))."""
    _check(q.dim, prior.dim, "class_regularizer")
    label = np.asarray(label)
    if np.any(label < 0) or np.any(label >= prior.n_classes):
        raise IndexError(f"label out of range for {prior.n_classes} classes")
    comp = prior.component(label)
    log_pi = prior.logits.log_softmax()[label]
    return cross_expectation(q, q) - cross_expectation(q, comp) - log_pi


def style_regularizer(q: DiagGaussian, component: DiagGaussian) -> Tensor:
    """E_q[log q] - E_q[log p(.|mu*, Sigma*)]; the component is held fixed."""
    _check(q.dim, component.dim, "style_regularizer")
    return cross_expectation(q, q) - cross_expectation(q, component.detach())


def reconstruction_loss(decoder_out: DiagGaussian, x) -> Tensor:
    return -log_density(decoder_out, x)


def log_density_np(mean: np.ndarray, var: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Plain-numpy log N(x; mean, diag(var)), reduced over the last axis."""
    diff = x - mean
    return -0.5 * (LOG_2PI + np.log(var) + diff * diff / var).sum(axis=-1)
