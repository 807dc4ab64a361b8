"""Source-side training: DPM refits alternating with minibatch steps on the
total source loss, preceded by a reconstruction + class-helper pretraining."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Tensor, grad_reverse, no_grad
from .config import ExperimentConfig
from .dpm import DpmPosterior, DpmSummary, dpm_fit, summarize, assign
from .gaussian import (
    DiagGaussian,
    class_regularizer,
    reconstruction_loss,
    reparameterize,
    style_regularizer,
)
from .model import ModelParams, ModelShape, class_logits, classify, decode, encode_class, encode_style

LOSS_TERMS = ("recon", "class_kl", "style_kl", "class_helper", "style_helper")


class NumericalError(RuntimeError):
    pass


@dataclass
class LabeledPool:
    """Inputs and class labels only; trainers never see domain identity."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or len(self.x) != len(self.y):
            raise ValueError("pool needs an N x D input matrix and N labels")

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    elbo_traces: list[list[float]] = field(default_factory=list)
    beta_schedule: list[tuple[int, int, float, float]] = field(default_factory=list)


def _one_hot_smoothed(y: np.ndarray, n_classes: int, smoothing: float) -> np.ndarray:
    target = np.full((len(y), n_classes), smoothing / n_classes)
    target[np.arange(len(y)), y] += 1.0 - smoothing
    return target


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean over rows of -sum(target * log softmax(logits))."""
    return -(logits.log_softmax(axis=-1) * target).sum(axis=-1).mean()


def class_helper_loss(m: ModelParams, x, y, smoothing: float) -> Tensor:
    y = np.asarray(y)
    return cross_entropy(class_logits(m, x), _one_hot_smoothed(y, m.classifier.out_dim, smoothing))


def style_helper_loss(m: ModelParams, x, y) -> Tensor:
    """Frozen classifier copy on the gradient-reversed style mean."""
    y = np.asarray(y)
    logits = m.frozen_classifier(grad_reverse(encode_style(m, x).mean))
    return cross_entropy(logits, _one_hot_smoothed(y, m.classifier.out_dim, 0.0))


def summary_components(summary: DpmSummary, idx) -> DiagGaussian:
    return DiagGaussian(summary.means[idx], np.log(summary.variances[idx]))


def draw_noise(m: ModelParams, n: int, rng: np.random.Generator):
    shape = m.shape
    return rng.standard_normal((n, shape.class_dim)), rng.standard_normal((n, shape.style_dim))


def source_loss_terms(m: ModelParams, x, y, summary: DpmSummary | None, *,
                      smoothing: float = 0.15, components=None, noise=None,
                      rng: np.random.Generator | None = None,
                      include: tuple[str, ...] = LOSS_TERMS) -> dict[str, Tensor]:
    """Unweighted per-batch means of every source-loss term.

    ``components`` gives the DPM component index per row; by default each row
    is assigned from its current style mean.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if noise is None:
        noise = draw_noise(m, len(x), rng if rng is not None else np.random.default_rng())
    q_class = encode_class(m, x)
    q_style = encode_style(m, x)
    terms: dict[str, Tensor] = {}
    if "recon" in include:
        z_class = reparameterize(q_class, noise[0])
        z_style = reparameterize(q_style, noise[1])
        terms["recon"] = reconstruction_loss(decode(m, z_class, z_style), x).mean()
    if "class_kl" in include:
        terms["class_kl"] = class_regularizer(q_class, m.prior, y).mean()
    if "style_kl" in include:
        if components is None:
            components = assign(summary, np.atleast_2d(q_style.mean.data))
        terms["style_kl"] = style_regularizer(q_style, summary_components(summary, components)).mean()
    if "class_helper" in include:
        terms["class_helper"] = class_helper_loss(m, x, y, smoothing)
    if "style_helper" in include:
        terms["style_helper"] = style_helper_loss(m, x, y)
    return terms


def combine_source_terms(terms: dict[str, Tensor], beta_style: float, beta_class: float) -> Tensor:
    weights = {"recon": 1.0, "style_kl": beta_style, "class_kl": beta_class,
               "class_helper": 1.0, "style_helper": 1.0}
    total = None
    for name, value in terms.items():
        part = value * weights[name]
        total = part if total is None else total + part
    return total


def source_loss(m: ModelParams, x, y, beta_style: float, beta_class: float,
                summary: DpmSummary, **kwargs) -> Tensor:
    return combine_source_terms(source_loss_terms(m, x, y, summary, **kwargs), beta_style, beta_class)


def beta_pair(cfg: ExperimentConfig, i: int) -> tuple[float, float]:
    """(beta_style, beta_class) for iteration ``i`` of an epoch."""
    if i % 2 == 0:
        return cfg.beta_low, cfg.beta_high
    if cfg.symmetric_alternation:
        return cfg.beta_high, cfg.beta_low
    return cfg.beta_low, cfg.beta_low


def sample_style_embeddings(m: ModelParams, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    with no_grad():
        q = encode_style(m, x)
    return q.mean.data + np.exp(0.5 * q.log_var.data) * rng.standard_normal(q.mean.shape)


def accuracy(m, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(classify(m, x), axis=1) == y))


class SourceTrainer:
    """Stateful driver so training can be checkpointed and resumed mid-run."""

    def __init__(self, model: ModelParams, pool: LabeledPool, cfg: ExperimentConfig,
                 rng: np.random.Generator | None = None):
        if len(pool) == 0:
            raise ValueError("source pool is empty")
        self.model = model
        self.pool = pool
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        steps = math.ceil(len(pool) / cfg.batch_size)
        self.optimizer = Adam(model.trainable(), lr=cfg.lr,
                              betas=(cfg.adam_beta1, cfg.adam_beta2), decay=cfg.lr_decay,
                              decay_interval=steps * cfg.lr_decay_epochs or None)
        self.pretrain_done = 0
        self.epochs_done = 0
        self.log = TrainLog()
        self.posterior: DpmPosterior | None = None
        self.summary: DpmSummary | None = None

    # -- phases ---------------------------------------------------------------

    def _batches(self):
        order = self.rng.permutation(len(self.pool))
        for start in range(0, len(order), self.cfg.batch_size):
            yield order[start:start + self.cfg.batch_size]

    def _step(self, loss: Tensor, what: str) -> None:
        value = float(loss)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite {what} loss at epoch {self.epochs_done}")
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.model.refresh_frozen()

    def pretrain_epoch(self) -> dict:
        t0 = time.perf_counter()
        include = ("recon", "class_helper")
        if self.cfg.pretrain_style_helper:
            include += ("style_helper",)
        sums = {k: 0.0 for k in include}
        n = 0
        for idx in self._batches():
            x, y = self.pool.x[idx], self.pool.y[idx]
            terms = source_loss_terms(self.model, x, y, None, smoothing=self.cfg.label_smoothing,
                                      rng=self.rng, include=include)
            loss = combine_source_terms(terms, 0.0, 0.0)
            self._step(loss, "pretrain")
            for k, v in terms.items():
                sums[k] += float(v) * len(idx)
            n += len(idx)
        self.pretrain_done += 1
        row = {"phase": "pretrain", "epoch": self.pretrain_done}
        row.update({k: sums[k] / n for k in include})
        row["total"] = sum(sums.values()) / n
        row["source_acc"] = accuracy(self.model, self.pool.x, self.pool.y)
        row["wall"] = time.perf_counter() - t0
        self.log.rows.append(row)
        return row

    def fit_style_prior(self) -> DpmSummary:
        cfg = self.cfg
        z = sample_style_embeddings(self.model, self.pool.x, self.rng)
        init = None
        if cfg.dpm_warm_start and self.posterior is not None:
            init = self.posterior.resp
        seed = int(self.rng.integers(2**63))
        self.posterior, trace = dpm_fit(z, T=cfg.dpm_T, gamma=cfg.dpm_gamma,
                                        max_iters=cfg.dpm_max_iters, tol=cfg.dpm_tol,
                                        rng=np.random.default_rng(seed), n_init=cfg.dpm_n_init,
                                        init_resp=init)
        self.summary = summarize(self.posterior)
        self.log.elbo_traces.append(trace)
        return self.summary

    def train_epoch(self) -> dict:
        t0 = time.perf_counter()
        cfg = self.cfg
        summary = self.fit_style_prior()
        sums = {k: 0.0 for k in LOSS_TERMS}
        total = 0.0
        n = 0
        for i, idx in enumerate(self._batches()):
            beta_style, beta_class = beta_pair(cfg, i)
            self.log.beta_schedule.append((self.epochs_done + 1, i, beta_style, beta_class))
            x, y = self.pool.x[idx], self.pool.y[idx]
            terms = source_loss_terms(self.model, x, y, summary, smoothing=cfg.label_smoothing,
                                      components=summary.assignments[idx], rng=self.rng)
            loss = combine_source_terms(terms, beta_style, beta_class)
            self._step(loss, "source")
            for k, v in terms.items():
                sums[k] += float(v) * len(idx)
            total += float(loss) * len(idx)
            n += len(idx)
        self.epochs_done += 1
        row = {"phase": "source", "epoch": self.epochs_done}
        row.update({k: sums[k] / n for k in LOSS_TERMS})
        row["total"] = total / n
        row["source_acc"] = accuracy(self.model, self.pool.x, self.pool.y)
        row["dpm_elbo"] = self.log.elbo_traces[-1][-1]
        row["dpm_components"] = float(summary.effective_components)
        row["wall"] = time.perf_counter() - t0
        self.log.rows.append(row)
        return row

    def run(self, pretrain_epochs: int | None = None, epochs: int | None = None) -> "SourceTrainer":
        """Advance until the given epoch counts (defaults: the config's)."""
        pretrain_epochs = self.cfg.pretrain_epochs if pretrain_epochs is None else pretrain_epochs
        epochs = self.cfg.epochs if epochs is None else epochs
        while self.pretrain_done < pretrain_epochs:
            self.pretrain_epoch()
        while self.epochs_done < epochs:
            self.train_epoch()
        return self


def build_model(pool_dim: int, n_classes: int, cfg: ExperimentConfig,
                rng: np.random.Generator) -> ModelParams:
    shape = ModelShape(input_dim=pool_dim, class_dim=cfg.class_dim, style_dim=cfg.style_dim,
                       n_classes=n_classes, hidden=cfg.hidden,
                       class_head=cfg.class_head, style_head=cfg.style_head)
    return ModelParams.init(shape, rng)


def pretrain(m: ModelParams, pool: LabeledPool, epochs: int, cfg: ExperimentConfig | None = None,
             rng: np.random.Generator | None = None) -> ModelParams:
    cfg = cfg or ExperimentConfig()
    SourceTrainer(m, pool, cfg, rng).run(pretrain_epochs=epochs, epochs=0)
    return m


def train_source(m: ModelParams | None, pool: LabeledPool, cfg: ExperimentConfig,
                 rng: np.random.Generator | None = None) -> tuple[ModelParams, TrainLog]:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if m is None:
        m = build_model(pool.x.shape[1], int(pool.y.max()) + 1, cfg, rng)
    trainer = SourceTrainer(m, pool, cfg, rng).run()
    return trainer.model, trainer.log
