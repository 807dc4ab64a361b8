"""Synthetic multi-domain scenarios with controllable latent styles.

A sample is drawn as ``x = A_k (c_y + spread * eps) + b_k`` where ``c_y`` is a
class center and ``(A_k, b_k)`` the affine transform of latent style ``k``.
Each style carries a nominal domain tag; several styles may share a tag
(a "bimodal" domain). Tags and style ids are oracle metadata only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Style:
    transform: np.ndarray
    offset: np.ndarray
    domain: str

    def __post_init__(self):
        self.transform = np.asarray(self.transform, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64)


@dataclass
class SyntheticSpec:
    n_classes: int
    input_dim: int
    separation: float
    spread: float
    source_styles: list[Style]
    target_style: Style
    samples_per_cell: int = 100
    target_samples_per_class: int = 200
    holdout_fraction: float = 0.2
    seed: int = 0
    centers: np.ndarray | None = None

    def validate(self) -> None:
        if self.n_classes < 2 or self.input_dim < 1:
            raise ValueError("need at least 2 classes and a positive input dimension")
        if self.separation < 0 or self.spread < 0:
            raise ValueError("separation and spread must be non-negative")
        if not self.source_styles:
            raise ValueError("at least one source style is required")
        if self.samples_per_cell < 1 or self.target_samples_per_class < 1:
            raise ValueError("sample counts must be positive")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")
        for st in [*self.source_styles, self.target_style]:
            d = self.input_dim
            if st.transform.shape != (d, d) or st.offset.shape != (d,):
                raise ValueError(f"style {st.domain!r} transform/offset shape mismatch")
            if abs(np.linalg.det(st.transform)) <= 1e-6:
                raise ValueError(f"style {st.domain!r} transform is not invertible")


@dataclass
class Scenario:
    source_x: np.ndarray
    source_y: np.ndarray
    source_test_x: np.ndarray
    source_test_y: np.ndarray
    target_x: np.ndarray
    oracle: dict = field(default_factory=dict)


def class_centers(n_classes: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    """Centers with every pairwise distance equal to ``separation``."""
    basis = np.linalg.qr(rng.standard_normal((dim, dim)))[0]
    if n_classes <= dim:
        return basis[:n_classes] * separation / np.sqrt(2.0)
    return rng.standard_normal((n_classes, dim)) * separation / np.sqrt(2.0)


def _draw(spec: SyntheticSpec, centers: np.ndarray, style: Style, per_class: int,
          rng: np.random.Generator):
    y = np.repeat(np.arange(spec.n_classes), per_class)
    base = centers[y] + spec.spread * rng.standard_normal((len(y), spec.input_dim))
    return base @ style.transform.T + style.offset, y


def generate(spec: SyntheticSpec) -> Scenario:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    centers = spec.centers if spec.centers is not None else class_centers(
        spec.n_classes, spec.input_dim, spec.separation, rng)
    xs, ys, styles = [], [], []
    for k, st in enumerate(spec.source_styles):
        x, y = _draw(spec, centers, st, spec.samples_per_cell, rng)
        xs.append(x)
        ys.append(y)
        styles.append(np.full(len(y), k))
    x, y, s = np.concatenate(xs), np.concatenate(ys), np.concatenate(styles)
    order = rng.permutation(len(y))
    x, y, s = x[order], y[order], s[order]
    n_test = int(round(spec.holdout_fraction * len(y)))
    tx, ty = _draw(spec, centers, spec.target_style, spec.target_samples_per_class, rng)
    torder = rng.permutation(len(ty))
    tx, ty = tx[torder], ty[torder]
    domains = np.array([st.domain for st in spec.source_styles])
    oracle = {
        "source_styles": s[n_test:],
        "source_domains": domains[s[n_test:]],
        "source_test_styles": s[:n_test],
        "target_y": ty,
        "centers": centers,
        "n_latent_styles": len(spec.source_styles),
        "n_domains": len(set(domains.tolist())),
    }
    return Scenario(x[n_test:], y[n_test:], x[:n_test], y[:n_test], tx, oracle)


def _rotation(dim: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Rotation by ``angle`` in a random 2-D plane."""
    q = np.linalg.qr(rng.standard_normal((dim, dim)))[0]
    u, v = q[:, 0], q[:, 1]
    r = np.eye(dim) + (np.cos(angle) - 1) * (np.outer(u, u) + np.outer(v, v)) \
        + np.sin(angle) * (np.outer(v, u) - np.outer(u, v))
    return r


def _offsets(n: int, dim: int, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    q = np.linalg.qr(rng.standard_normal((dim, dim)))[0]
    return q[:n] * magnitude


PRESETS = ("separable3", "latent4", "hardshift")
HARDSHIFT_ANGLE, HARDSHIFT_REACH = 0.6, 1.0


def preset(name: str, seed: int = 0, n_domains: int | None = None) -> SyntheticSpec:
    """Named scenarios.

    separable3  3 classes, 3 well separated source styles.
    latent4     3 nominal domains whose first domain holds two latent styles.
    hardshift   target style rotated and offset away from every source style.

    ``n_domains`` overrides the number of single-style source domains for
    ``separable3`` (used to vary the source-domain count).
    """
    rng = np.random.default_rng(10_000 + seed)
    d, c = 8, 3
    sep, spread, mag = 2.25, 0.2, 3.0
    eye = np.eye(d)
    if name == "separable3":
        k = n_domains or 3
        off = _offsets(k + 1, d, mag, rng)
        styles = [Style(eye, off[i], f"d{i}") for i in range(k)]
        return SyntheticSpec(c, d, sep, spread, styles, Style(eye, off[k], "target"), seed=seed)
    if name == "latent4":
        off = _offsets(5, d, mag, rng)
        tags = ["d0", "d0", "d1", "d2"]
        styles = [Style(eye, off[i], tags[i]) for i in range(4)]
        return SyntheticSpec(c, d, sep, spread, styles, Style(eye, off[4], "target"), seed=seed)
    if name == "hardshift":
        off = _offsets(4, d, mag, rng)
        styles = [Style(eye, off[i], f"d{i}") for i in range(3)]
        target = Style(_rotation(d, HARDSHIFT_ANGLE, rng), HARDSHIFT_REACH * off[3], "target")
        return SyntheticSpec(c, d, sep, spread, styles, target, seed=seed)
    raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
