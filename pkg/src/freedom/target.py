"""Source-free target adaptation: warm-up, per-epoch confident filtering, a
style-prior refit, and three alternating updates (style encoder, decoder,
class encoder). Only the class encoder and classifier are shipped."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Mlp, Tensor, no_grad
from .config import ExperimentConfig
from .dpm import DpmSummary, assign, dpm_fit, summarize
from .gaussian import (
    ClassPrior,
    class_regularizer,
    reconstruction_loss,
    reparameterize,
    style_regularizer,
)
from .model import (
    DeployedModel,
    ModelParams,
    PseudoLabelBatch,
    class_logits,
    decode,
    deploy,
    encode_class,
    encode_style,
    pseudo_label,
    select_confident,
)
from .source import (
    NumericalError,
    accuracy,
    cross_entropy,
    sample_style_embeddings,
    style_helper_loss,
    summary_components,
)

STYLE_TERMS = ("style_helper", "style_kl", "style_recon")
DECODER_TERMS = ("dec_recon", "dec_ce")
CLASS_TERMS = ("class_recon", "class_kl", "class_ce")


def _frozen(mlp: Mlp) -> Mlp:
    """Constant copy of ``mlp``, outside any gradient graph."""
    return Mlp([Tensor(w.data, False) for w in mlp.weights],
               [Tensor(b.data, False) for b in mlp.biases], list(mlp.activations), mlp.name)


def _frozen_prior(prior: ClassPrior) -> ClassPrior:
    return ClassPrior(*(Tensor(t.data, False, t.name) for t in prior.parameters()))


def _one_hot(y: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(y), n))
    out[np.arange(len(y)), y] = 1.0
    return out


def _prior_class_sample(m: ModelParams, y_hat: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """z ~ N(mu_y, Sigma_y) from the class prior, as a constant."""
    mean = m.prior.means.data[y_hat]
    std = np.exp(0.5 * m.prior.log_vars.data[y_hat])
    return mean + std * noise


def _noise(m: ModelParams, n: int, rng: np.random.Generator):
    shape = m.shape
    return (rng.standard_normal((n, shape.class_dim)), rng.standard_normal((n, shape.style_dim)),
            rng.standard_normal((n, shape.input_dim)))


def target_style_terms(m: ModelParams, x, y_hat, summary: DpmSummary, *, components=None,
                       noise=None, rng=None) -> dict[str, Tensor]:
    """Style-encoder objective pieces; the class embedding fed to the decoder is
    drawn from the class prior at the pseudo-label."""
    x = np.asarray(x, dtype=np.float64)
    y_hat = np.asarray(y_hat)
    if noise is None:
        noise = _noise(m, len(x), rng if rng is not None else np.random.default_rng())
    q_style = encode_style(m, x)
    if components is None:
        components = assign(summary, np.atleast_2d(q_style.mean.data))
    z_class = _prior_class_sample(m, y_hat, noise[0])
    z_style = reparameterize(q_style, noise[1])
    view = dataclasses.replace(m, decoder=_frozen(m.decoder))
    return {
        "style_helper": style_helper_loss(m, x, y_hat),
        "style_kl": style_regularizer(q_style, summary_components(summary, components)).mean(),
        "style_recon": reconstruction_loss(decode(view, z_class, z_style), x).mean(),
    }


def target_style_loss(m: ModelParams, x, y_hat, summary: DpmSummary, **kwargs) -> Tensor:
    t = target_style_terms(m, x, y_hat, summary, **kwargs)
    return t["style_helper"] + t["style_kl"] + t["style_recon"]


def target_decoder_terms(m: ModelParams, x, y_hat, *, noise=None, rng=None) -> dict[str, Tensor]:
    """Reconstruction plus pseudo-label cross-entropy of the classifier on a
    reparameterized reconstruction; only the decoder is in the graph."""
    x = np.asarray(x, dtype=np.float64)
    y_hat = np.asarray(y_hat)
    if noise is None:
        noise = _noise(m, len(x), rng if rng is not None else np.random.default_rng())
    with no_grad():
        q_style = encode_style(m, x)
    z_style = q_style.mean.data + np.exp(0.5 * q_style.log_var.data) * noise[1]
    z_class = _prior_class_sample(m, y_hat, noise[0])
    p_x = decode(m, z_class, z_style)
    x_hat = reparameterize(p_x, noise[2])
    frozen = DeployedModel(_frozen(m.class_encoder), _frozen(m.classifier), m.class_head)
    return {
        "dec_recon": reconstruction_loss(p_x, x).mean(),
        "dec_ce": cross_entropy(class_logits(frozen, x_hat), _one_hot(y_hat, m.classifier.out_dim)),
    }


def target_decoder_loss(m: ModelParams, x, y_hat, **kwargs) -> Tensor:
    t = target_decoder_terms(m, x, y_hat, **kwargs)
    return t["dec_recon"] + t["dec_ce"]


def target_class_terms(m: ModelParams, x, y_hat, *, noise=None, rng=None) -> dict[str, Tensor]:
    """Class-encoder objective pieces; decoder, style encoder, classifier and
    class prior enter as constants."""
    x = np.asarray(x, dtype=np.float64)
    y_hat = np.asarray(y_hat)
    if noise is None:
        noise = _noise(m, len(x), rng if rng is not None else np.random.default_rng())
    q_class = encode_class(m, x)
    with no_grad():
        q_style = encode_style(m, x)
    z_style = q_style.mean.data + np.exp(0.5 * q_style.log_var.data) * noise[1]
    z_class = reparameterize(q_class, noise[0])
    view = dataclasses.replace(m, decoder=_frozen(m.decoder), classifier=_frozen(m.classifier),
                               prior=_frozen_prior(m.prior))
    return {
        "class_recon": reconstruction_loss(decode(view, z_class, z_style), x).mean(),
        "class_kl": class_regularizer(q_class, view.prior, y_hat).mean(),
        "class_ce": cross_entropy(view.classifier(q_class.mean), _one_hot(y_hat, m.classifier.out_dim)),
    }


def target_class_loss(m: ModelParams, x, y_hat, alpha_recon: float, alpha_kl: float,
                      alpha_helper: float, **kwargs) -> Tensor:
    if min(alpha_recon, alpha_kl, alpha_helper) < 0:
        raise ValueError("alpha weights must be non-negative")
    t = target_class_terms(m, x, y_hat, **kwargs)
    return alpha_recon * t["class_recon"] + alpha_kl * t["class_kl"] + alpha_helper * t["class_ce"]


@dataclass
class AdaptLog:
    rows: list[dict] = field(default_factory=list)
    regime: str = ""
    alphas: tuple = ()
    initial_ratio: float = float("nan")
    initial_acc: float | None = None
    skipped_class_epochs: list[int] = field(default_factory=list)

    @property
    def ratios(self) -> list[float]:
        return [r["ratio"] for r in self.rows]


class TargetAdapter:
    """Adapts a copy of a source model; the source model is left untouched."""

    def __init__(self, source: ModelParams, target_x: np.ndarray, cfg: ExperimentConfig,
                 rng: np.random.Generator | None = None, eval_y: np.ndarray | None = None):
        self.x = np.asarray(target_x, dtype=np.float64)
        if self.x.ndim != 2 or len(self.x) == 0:
            raise ValueError("target pool must be a non-empty N x D matrix")
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.eval_y = None if eval_y is None else np.asarray(eval_y)
        self.model = source.copy()
        opt = dict(lr=cfg.adapt_lr, betas=(cfg.adam_beta1, cfg.adam_beta2), decay=1.0)
        self.optimizers = {
            "style": Adam(self.model.style_encoder.parameters(), **opt),
            "decoder": Adam(self.model.decoder.parameters(), **opt),
            "class": Adam(self.model.class_encoder.parameters(), **opt),
        }
        self.epochs_done = 0
        self.log = AdaptLog()
        selection = self._select(self.x)
        self.log.initial_ratio = selection.ratio
        self.log.initial_acc = self._eval()
        self.log.regime, self.log.alphas = self._regime(selection.ratio)

    def _regime(self, ratio: float) -> tuple[str, tuple]:
        regime = self.cfg.weight_regime
        if regime == "auto":
            # a low starting ratio calls for more weight on reconstruction
            regime = "conf1" if ratio >= self.cfg.regime_threshold else "conf2"
        return regime, self.cfg.alpha_conf1 if regime == "conf1" else self.cfg.alpha_conf2

    def _select(self, x: np.ndarray) -> PseudoLabelBatch:
        return select_confident(self.model, x, self.cfg.confidence_level, self.cfg.mc_samples, self.rng)

    def _eval(self) -> float | None:
        if self.eval_y is None:
            return None
        return accuracy(self.model, self.x, self.eval_y)

    def _batches(self, n: int):
        order = self.rng.permutation(n)
        for start in range(0, n, self.cfg.batch_size):
            yield order[start:start + self.cfg.batch_size]

    def _step(self, name: str, loss: Tensor) -> None:
        if not np.isfinite(float(loss)):
            raise NumericalError(f"non-finite {name} loss at adaptation epoch {self.epochs_done + 1}")
        opt = self.optimizers[name]
        opt.zero_grad()
        loss.backward()
        opt.step()

    def _minibatches(self, x: np.ndarray, y_hat: np.ndarray):
        """Yield (inputs, pseudo-labels) per step; with per-batch refiltering the
        keep mask is recomputed on every batch of the given pool."""
        for idx in self._batches(len(x)):
            if self.cfg.refilter_per_batch:
                sel = self._select(x[idx])
                if not sel.keep.any():
                    continue
                yield sel.inputs[sel.keep], sel.labels[sel.keep]
            else:
                yield x[idx], y_hat[idx]

    def _phase(self, name: str, x: np.ndarray, y_hat: np.ndarray, summary=None) -> dict:
        keys = {"style": STYLE_TERMS, "decoder": DECODER_TERMS, "class": CLASS_TERMS}[name]
        sums = dict.fromkeys(keys, 0.0)
        n = 0
        for xb, yb in self._minibatches(x, y_hat):
            if name == "style":
                terms = target_style_terms(self.model, xb, yb, summary, rng=self.rng)
                loss = terms["style_helper"] + terms["style_kl"] + terms["style_recon"]
            elif name == "decoder":
                terms = target_decoder_terms(self.model, xb, yb, rng=self.rng)
                loss = terms["dec_recon"] + terms["dec_ce"]
            else:
                terms = target_class_terms(self.model, xb, yb, rng=self.rng)
                a = self.log.alphas
                loss = a[0] * terms["class_recon"] + a[1] * terms["class_kl"] + a[2] * terms["class_ce"]
            self._step(name, loss)
            for k, v in terms.items():
                sums[k] += float(v) * len(xb)
            n += len(xb)
        return {k: (v / n if n else float("nan")) for k, v in sums.items()}

    def fit_style_prior(self, x: np.ndarray) -> tuple[DpmSummary, float]:
        cfg = self.cfg
        z = sample_style_embeddings(self.model, x, self.rng)
        seed = int(self.rng.integers(2**63))
        post, trace = dpm_fit(z, T=cfg.dpm_T, gamma=cfg.dpm_gamma, max_iters=cfg.dpm_max_iters,
                              tol=cfg.dpm_tol, rng=np.random.default_rng(seed), n_init=cfg.dpm_n_init)
        return summarize(post), trace[-1]

    def epoch(self) -> dict:
        t0 = time.perf_counter()
        warm = self.epochs_done < self.cfg.warmup_epochs
        sel = self._select(self.x)
        row = {"phase": "warmup" if warm else "adapt", "epoch": self.epochs_done + 1,
               "ratio": sel.ratio}
        if warm or not sel.keep.any():
            # warm-up, or an empty confident set: Steps 1-2 on the whole pool
            x, y_hat = self.x, sel.labels
        else:
            x, y_hat = self.x[sel.keep], sel.labels[sel.keep]
        summary, elbo = self.fit_style_prior(x)
        row.update(self._phase("style", x, y_hat, summary))
        row.update(self._phase("decoder", x, y_hat))
        if warm:
            row.update(dict.fromkeys(CLASS_TERMS, float("nan")))
        elif not sel.keep.any():
            self.log.skipped_class_epochs.append(self.epochs_done + 1)
            row.update(dict.fromkeys(CLASS_TERMS, float("nan")))
        else:
            row.update(self._phase("class", x, y_hat))
        self.epochs_done += 1
        row["dpm_elbo"] = elbo
        row["dpm_components"] = float(summary.effective_components)
        acc = self._eval()
        if acc is not None:
            row["target_acc"] = acc
        row["wall"] = time.perf_counter() - t0
        self.log.rows.append(row)
        return row

    @property
    def total_epochs(self) -> int:
        return self.cfg.warmup_epochs + self.cfg.adapt_epochs

    def run(self, epochs: int | None = None) -> "TargetAdapter":
        epochs = self.total_epochs if epochs is None else epochs
        while self.epochs_done < epochs:
            self.epoch()
        return self

    def deployed(self) -> DeployedModel:
        return deploy(self.model)


def adapt_target(source: ModelParams, target_x: np.ndarray, cfg: ExperimentConfig,
                 rng: np.random.Generator | None = None,
                 eval_y: np.ndarray | None = None) -> tuple[DeployedModel, AdaptLog]:
    """Runs warm-up plus adaptation epochs from the config; ``eval_y`` is used
    for logging accuracy only."""
    adapter = TargetAdapter(source, target_x, cfg, rng, eval_y).run()
    return adapter.deployed(), adapter.log


__all__ = ["AdaptLog", "TargetAdapter", "adapt_target", "pseudo_label", "target_class_loss",
           "target_decoder_loss", "target_style_loss"]
