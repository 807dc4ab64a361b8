"""Dense float64 tensors with tape-based reverse-mode differentiation.

Graphs are recorded dynamically while operating on tensors that require
gradients and are released after ``backward``. Only leaf tensors with
``requires_grad`` keep a ``.grad``; intermediate gradients live in a
per-call dictionary.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True

LEAKY_SLOPE = 0.01
ACTIVATIONS = ("tanh", "leaky-relu", "relu", "identity", "softmax")


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __float__(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"cannot convert tensor of shape {self.shape} to float")
        return float(self.data.reshape(-1)[0])

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._make(
            self.data + other.data, (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._make(
            self.data - other.data, (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)),
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._make(
            x * y, (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        out = x / y
        return Tensor._make(
            out, (self, other),
            lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)),
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        return Tensor._make(x**p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._make(x @ y, (self, other), lambda g: (g @ y.T, x.T @ g))

    # -- elementwise functions ------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def relu(self):
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,))

    def leaky_relu(self, slope: float = LEAKY_SLOPE):
        scale = np.where(self.data > 0, 1.0, slope)
        return Tensor._make(self.data * scale, (self,), lambda g: (g * scale,))

    def clip(self, lo: float, hi: float):
        mask = (self.data >= lo) & (self.data <= hi)
        return Tensor._make(np.clip(self.data, lo, hi), (self,), lambda g: (g * mask,))

    def square(self):
        return self * self

    # -- reductions and reshaping ---------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def __getitem__(self, idx):
        shape = self.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(self.data[idx], (self,), backward)

    def log_softmax(self, axis: int = -1):
        x = self.data
        shifted = x - x.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        soft = np.exp(out)
        return Tensor._make(
            out, (self,),
            lambda g: (g - soft * g.sum(axis=axis, keepdims=True),),
        )

    def softmax(self, axis: int = -1):
        return self.log_softmax(axis).exp()

    # -- differentiation ------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def grad_reverse(x: Tensor) -> Tensor:
    """Identity forward, negated gradient backward."""
    x = as_tensor(x)
    return Tensor._make(x.data.copy(), (x,), lambda g: (-g,))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _activate(x: Tensor, tag: str) -> Tensor:
    if tag == "identity":
        return x
    if tag == "tanh":
        return x.tanh()
    if tag == "relu":
        return x.relu()
    if tag == "leaky-relu":
        return x.leaky_relu()
    if tag == "softmax":
        return x.softmax(axis=-1)
    raise ValueError(f"unknown activation {tag!r}")


class Mlp:
    """Stack of affine layers, each followed by a tagged activation."""

    def __init__(self, weights: list[Tensor], biases: list[Tensor], activations: list[str],
                 name: str = "mlp"):
        if not (len(weights) == len(biases) == len(activations)):
            raise DimensionError("weights, biases and activations must have equal length")
        for k in range(1, len(weights)):
            if weights[k - 1].shape[1] != weights[k].shape[0]:
                raise DimensionError(
                    f"{name} layer {k}: in-dim {weights[k].shape[0]} does not match "
                    f"previous out-dim {weights[k - 1].shape[1]}"
                )
        for tag in activations:
            if tag not in ACTIVATIONS:
                raise ValueError(f"unknown activation {tag!r}")
        self.weights = weights
        self.biases = biases
        self.activations = list(activations)
        self.name = name

    @classmethod
    def init(cls, sizes: Sequence[int], activations: Sequence[str],
             rng: np.random.Generator, name: str = "mlp") -> "Mlp":
        if len(sizes) - 1 != len(activations):
            raise DimensionError("need one activation per layer")
        weights, biases = [], []
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(parameter(rng.uniform(-bound, bound, (fan_in, fan_out)), f"{name}.w{k}"))
            biases.append(parameter(rng.uniform(-bound, bound, fan_out), f"{name}.b{k}"))
        return cls(weights, biases, list(activations), name)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"{self.name}.w{k}", w), (f"{self.name}.b{k}", b)]
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self, requires_grad: bool = True, name: str | None = None) -> "Mlp":
        mk = (lambda a: Tensor(a.data.copy(), requires_grad=requires_grad))
        return Mlp([mk(w) for w in self.weights], [mk(b) for b in self.biases],
                   list(self.activations), name or self.name)

    def __call__(self, x) -> Tensor:
        return forward(self, x)


def forward(mlp: Mlp, x) -> Tensor:
    h = as_tensor(x)
    for k, (w, b, tag) in enumerate(zip(mlp.weights, mlp.biases, mlp.activations)):
        if h.shape[-1] != w.shape[0]:
            raise DimensionError(
                f"{mlp.name} layer {k}: expected last dimension {w.shape[0]}, got {h.shape[-1]}"
            )
        h = _activate(h @ w + b, tag)
    return h


class Adam:
    """Adam with a step-decay learning-rate schedule.

    Parameters whose gradient is exactly zero everywhere are skipped, so a
    zero-gradient step never moves them.
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.5, 0.99),
                 eps: float = 1e-8, decay: float = 0.9, decay_interval: int | None = None):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.decay = decay
        self.decay_interval = decay_interval
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = [0] * len(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(f"parameter {p.name or i} has no gradient")
        for i, p in enumerate(self.params):
            g = p.grad
            if not g.any():
                continue
            self.t[i] += 1
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** self.t[i])
            v_hat = self.v[i] / (1 - self.beta2 ** self.t[i])
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.step_count += 1
        if self.decay_interval and self.step_count % self.decay_interval == 0:
            self.lr *= self.decay

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"scalars": np.array([self.lr, self.step_count], dtype=np.float64),
               "t": np.array(self.t, dtype=np.float64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.lr = float(arrays["scalars"][0])
        self.step_count = int(arrays["scalars"][1])
        self.t = [int(k) for k in arrays["t"]]
        self.m = [arrays[f"m{i}"].copy() for i in range(len(self.params))]
        self.v = [arrays[f"v{i}"].copy() for i in range(len(self.params))]


def optimizer_step(state: Adam, params: Sequence[Tensor] | None = None) -> None:
    if params is not None and [id(p) for p in params] != [id(p) for p in state.params]:
        raise ContractError("parameter set does not match optimizer state")
    state.step()


def numerical_gradient(f: Callable[[], float], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f`` w.r.t. every entry of ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


__all__ = [
    "Adam", "ContractError", "DimensionError", "Mlp", "Tensor", "as_tensor", "concat",
    "forward", "grad_reverse", "no_grad", "numerical_gradient", "optimizer_step",
    "parameter",
]
