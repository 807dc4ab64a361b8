"""Encoders, decoder, classifier head and class prior, plus inference helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .autodiff import DimensionError, Mlp, Tensor, as_tensor, concat, no_grad
from .gaussian import ClassPrior, DiagGaussian, log_density_np

DECODER_LOG_VAR_BOUNDS = (-7.0, 7.0)
# "tanh-mean" bounds the embedding mean only; "tanh" bounds mean and log-variance
ENCODER_HEADS = ("identity", "tanh", "tanh-mean")


@dataclass
class ModelShape:
    input_dim: int = 8
    class_dim: int = 4
    style_dim: int = 4
    n_classes: int = 3
    hidden: int = 32
    class_head: str = "identity"
    style_head: str = "identity"


@dataclass
class ModelParams:
    class_encoder: Mlp
    style_encoder: Mlp
    decoder: Mlp
    classifier: Mlp
    prior: ClassPrior
    frozen_classifier: Mlp
    class_head: str = "identity"
    style_head: str = "identity"

    @classmethod
    def init(cls, shape: ModelShape, rng: np.random.Generator) -> "ModelParams":
        if shape.class_dim != shape.style_dim:
            raise DimensionError("the frozen classifier copy reads style embeddings, "
                                 "so class_dim must equal style_dim")
        d, hc, hs, h = shape.input_dim, shape.class_dim, shape.style_dim, shape.hidden
        for head in (shape.class_head, shape.style_head):
            if head not in ENCODER_HEADS:
                raise ValueError(f"encoder heads must be one of {ENCODER_HEADS}, got {head!r}")
        last = {h: "tanh" if h == "tanh" else "identity" for h in ENCODER_HEADS}
        class_encoder = Mlp.init([d, h, 2 * hc], ["leaky-relu", last[shape.class_head]], rng,
                                 "class_encoder")
        style_encoder = Mlp.init([d, h, 2 * hs], ["leaky-relu", last[shape.style_head]], rng,
                                 "style_encoder")
        decoder = Mlp.init([hc + hs, h, 2 * d], ["tanh", "identity"], rng, "decoder")
        classifier = Mlp.init([hc, shape.n_classes], ["identity"], rng, "classifier")
        prior = ClassPrior.init(shape.n_classes, hc, rng)
        frozen = classifier.copy(requires_grad=False, name="frozen_classifier")
        return cls(class_encoder, style_encoder, decoder, classifier, prior, frozen,
                   shape.class_head, shape.style_head)

    @property
    def shape(self) -> ModelShape:
        return ModelShape(
            input_dim=self.class_encoder.in_dim,
            class_dim=self.class_encoder.out_dim // 2,
            style_dim=self.style_encoder.out_dim // 2,
            n_classes=self.classifier.out_dim,
            hidden=self.class_encoder.weights[0].shape[1],
            class_head=self.class_head,
            style_head=self.style_head,
        )

    def blocks(self) -> dict[str, list[Tensor]]:
        return {
            "class_encoder": self.class_encoder.parameters(),
            "style_encoder": self.style_encoder.parameters(),
            "decoder": self.decoder.parameters(),
            "classifier": self.classifier.parameters(),
            "prior": self.prior.parameters(),
        }

    def trainable(self) -> list[Tensor]:
        return [p for ps in self.blocks().values() for p in ps]

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for mlp in (self.class_encoder, self.style_encoder, self.decoder, self.classifier):
            out += mlp.named_parameters()
        out += self.prior.named_parameters()
        out += [(f"frozen_classifier.{n.split('.', 1)[1]}", t)
                for n, t in self.frozen_classifier.named_parameters()]
        return out

    def refresh_frozen(self) -> None:
        for dst, src in zip(self.frozen_classifier.parameters(), self.classifier.parameters()):
            dst.data = src.data.copy()

    def copy(self) -> "ModelParams":
        prior = ClassPrior(*(Tensor(t.data.copy(), True, t.name) for t in self.prior.parameters()))
        return ModelParams(self.class_encoder.copy(), self.style_encoder.copy(),
                           self.decoder.copy(), self.classifier.copy(), prior,
                           self.frozen_classifier.copy(requires_grad=False),
                           self.class_head, self.style_head)


@dataclass
class DeployedModel:
    class_encoder: Mlp
    classifier: Mlp
    class_head: str = "identity"

    def num_parameters(self) -> int:
        return self.class_encoder.num_parameters() + self.classifier.num_parameters()


def _split(out: Tensor, head: str = "identity") -> DiagGaussian:
    h = out.shape[-1] // 2
    mean = out[..., :h]
    if head == "tanh-mean":
        mean = mean.tanh()
    return DiagGaussian(mean, out[..., h:])


def _check_input(mlp: Mlp, x) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != mlp.in_dim:
        raise DimensionError(f"{mlp.name}: expected input dimension {mlp.in_dim}, got {x.shape[-1]}")
    return x


def encode_class(m: ModelParams | DeployedModel, x) -> DiagGaussian:
    return _split(m.class_encoder(_check_input(m.class_encoder, x)), m.class_head)


def encode_style(m: ModelParams, x) -> DiagGaussian:
    return _split(m.style_encoder(_check_input(m.style_encoder, x)), m.style_head)


def decode(m: ModelParams, z_class, z_style) -> DiagGaussian:
    """Decoder reads the concatenation [z_class : z_style]."""
    hc, hs = m.class_encoder.out_dim // 2, m.style_encoder.out_dim // 2
    z_class, z_style = as_tensor(z_class), as_tensor(z_style)
    if z_class.shape[-1] != hc or z_style.shape[-1] != hs:
        raise DimensionError(
            f"decode: expected embeddings of size ({hc}, {hs}), "
            f"got ({z_class.shape[-1]}, {z_style.shape[-1]})"
        )
    out = _split(m.decoder(concat([z_class, z_style], axis=-1)))
    return DiagGaussian(out.mean, out.log_var.clip(*DECODER_LOG_VAR_BOUNDS))


def reconstruction_error(m: ModelParams, x) -> float:
    """Mean squared error of the decoder mean, both embeddings at their means."""
    x = np.asarray(x, dtype=np.float64)
    with no_grad():
        x_hat = decode(m, encode_class(m, x).mean, encode_style(m, x).mean).mean.data
    return float(np.mean((x_hat - x) ** 2))


def class_logits(m: ModelParams | DeployedModel, x) -> Tensor:
    """Classifier head on the class encoder's mean."""
    return m.classifier(encode_class(m, x).mean)


def classify(m: ModelParams | DeployedModel, x) -> np.ndarray:
    with no_grad():
        return class_logits(m, x).softmax(axis=-1).data


def pseudo_label(m: ModelParams | DeployedModel, x) -> tuple[np.ndarray, np.ndarray]:
    probs = classify(m, x)
    labels = np.argmax(probs, axis=-1)
    return labels, np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]


def gamma_star(m: ModelParams, x, mc_samples: int = 16,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Monte-Carlo class posterior E_q(z|x)[p(y|z)] under the class prior."""
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    with no_grad():
        q = encode_class(m, x)
    mean, std = q.mean.data, np.exp(0.5 * q.log_var.data)
    single = mean.ndim == 1
    mean, std = np.atleast_2d(mean), np.atleast_2d(std)
    mu_y = m.prior.means.data
    var_y = np.exp(m.prior.log_vars.data)
    log_pi = np.log(m.prior.weights)
    total = np.zeros((mean.shape[0], mu_y.shape[0]))
    for _ in range(mc_samples):
        z = mean + std * rng.standard_normal(mean.shape)
        scores = log_pi[None] + log_density_np(mu_y[None], var_y[None], z[:, None, :])
        total += np.exp(scores - logsumexp(scores, axis=1, keepdims=True))
    out = total / mc_samples
    out /= out.sum(axis=1, keepdims=True)
    return out[0] if single else out


@dataclass
class PseudoLabelBatch:
    inputs: np.ndarray
    labels: np.ndarray
    confidences: np.ndarray
    gamma: np.ndarray
    keep: np.ndarray

    @property
    def ratio(self) -> float:
        return float(self.keep.mean()) if self.keep.size else 0.0

    @property
    def kept_indices(self) -> np.ndarray:
        return np.flatnonzero(self.keep)


def select_confident(m: ModelParams, x, level: float, mc_samples: int = 16,
                     rng: np.random.Generator | None = None) -> PseudoLabelBatch:
    """Keep samples whose classifier and class-prior posteriors agree and whose
    top softmax probability reaches ``level``."""
    if not 0.0 <= level <= 1.0:
        raise ValueError("confidence level must lie in [0, 1]")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    probs = classify(m, x)
    labels = np.argmax(probs, axis=1)
    g = gamma_star(m, x, mc_samples, rng)
    keep = (np.argmax(g, axis=1) == labels) & (probs.max(axis=1) >= level)
    return PseudoLabelBatch(x, labels, probs, g, keep)


def deploy(m: ModelParams) -> DeployedModel:
    return DeployedModel(m.class_encoder.copy(), m.classifier.copy(), m.class_head)
