"""
Tensor Core
===========
Dense float64 tensors with reverse-mode differentiation and the layers the
destination predictor needs.

Contents:
  - Tensor: numpy-backed values, recorded graph, backward()
  - Ops: arithmetic with broadcasting, matmul, indexing, concat, sigmoid,
    tanh, relu, (masked) softmax, embedding lookup, dropout, dense
  - Losses: MSE, cross-entropy over integer targets
  - LSTM cell (forget/input/output gates, candidate) with a tanh or relu
    output nonlinearity; additive attention over input steps
  - Module / Parameter containers; Adam and momentum SGD
  - grad_check: central finite differences against backward()

Every tensor is checked on creation; a NaN or Inf raises NonFiniteError.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special
from scipy.stats import ortho_group

from models.errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

LSTM_ACTIVATIONS = ("tanh", "relu")


# ═══════════════════════════════════════════════════════════════════════
# TENSOR
# ═══════════════════════════════════════════════════════════════════════

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array that remembers how it was computed."""

    def __init__(self, data, _children: Sequence["Tensor"] = (), _op: str = "", requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values produced by '{_op or 'input'}' (shape {self.data.shape})")
        self.requires_grad = bool(requires_grad) or any(c.requires_grad for c in _children)
        self._prev: Tuple["Tensor", ...] = tuple(_children) if self.requires_grad else ()
        self._op = _op
        self._backward: Callable[[], None] = lambda: None
        self.grad: Optional[np.ndarray] = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op='{self._op}', requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        topo: List[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in reversed(node._prev):
                if id(child) not in visited:
                    stack.append((child, False))

        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node.grad is not None:
                node._backward()

    # ─── arithmetic ─────────────────────────────────────────────────

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data + other.data, (self, other), "+")

        def _backward():
            self._accumulate(out.grad)
            other._accumulate(out.grad)
        out._backward = _backward
        return out

    __radd__ = __add__

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data * other.data, (self, other), "*")

        def _backward():
            self._accumulate(out.grad * other.data)
            other._accumulate(out.grad * self.data)
        out._backward = _backward
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __truediv__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data / other.data, (self, other), "/")

        def _backward():
            self._accumulate(out.grad / other.data)
            other._accumulate(-out.grad * self.data / other.data ** 2)
        out._backward = _backward
        return out

    def __pow__(self, n: float):
        out = Tensor(self.data ** n, (self,), f"**{n}")

        def _backward():
            self._accumulate(out.grad * n * self.data ** (n - 1))
        out._backward = _backward
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], (self,), "getitem")

        basic = all(isinstance(i, (int, slice)) or i is Ellipsis
                    for i in (idx if isinstance(idx, tuple) else (idx,)))

        def _backward():
            g = np.zeros_like(self.data)
            if basic:
                g[idx] = out.grad
            else:
                np.add.at(g, idx, out.grad)
            self._accumulate(g)
        out._backward = _backward
        return out

    # ─── reductions & shape ─────────────────────────────────────────

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), "sum")

        def _backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis=axis)
            self._accumulate(np.broadcast_to(g, self.data.shape))
        out._backward = _backward
        return out

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), (self,), "reshape")

        def _backward():
            self._accumulate(out.grad.reshape(self.data.shape))
        out._backward = _backward
        return out

    @property
    def T(self):
        out = Tensor(self.data.T, (self,), "T")

        def _backward():
            self._accumulate(out.grad.T)
        out._backward = _backward
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ═══════════════════════════════════════════════════════════════════════
# OPS
# ═══════════════════════════════════════════════════════════════════════

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a (..., k) @ b (k, m) or a (..., k) @ b (k,)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape} incompatible")
    out = Tensor(a.data @ b.data, (a, b), "@")

    def _backward():
        g = out.grad
        k = a.shape[-1]
        if b.ndim == 2:
            a._accumulate(g @ b.data.T)
            b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, b.shape[1]))
        else:
            a._accumulate(g[..., None] * b.data)
            b._accumulate((a.data * g[..., None]).reshape(-1, k).sum(axis=0))
    out._backward = _backward
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward():
        for t, g in zip(tensors, np.split(out.grad, sizes, axis=axis)):
            t._accumulate(g)
    out._backward = _backward
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), "stack")

    def _backward():
        for i, t in enumerate(tensors):
            t._accumulate(np.take(out.grad, i, axis=axis))
    out._backward = _backward
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = special.expit(x.data)
    out = Tensor(s, (x,), "sigmoid")

    def _backward():
        x._accumulate(out.grad * s * (1.0 - s))
    out._backward = _backward
    return out


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = Tensor(t, (x,), "tanh")

    def _backward():
        x._accumulate(out.grad * (1.0 - t ** 2))
    out._backward = _backward
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), (x,), "relu")

    def _backward():
        x._accumulate(out.grad * (x.data > 0))
    out._backward = _backward
    return out


def activation(x: Tensor, name: str) -> Tensor:
    if name == "tanh":
        return tanh(x)
    if name == "relu":
        return relu(x)
    raise ValueError(f"unknown activation '{name}'; expected one of {LSTM_ACTIVATIONS}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row softmax; scipy subtracts the row max before exponentiating."""
    x = as_tensor(x)
    p = special.softmax(x.data, axis=axis)
    out = Tensor(p, (x,), "softmax")

    def _backward():
        g = out.grad
        x._accumulate(p * (g - np.sum(g * p, axis=axis, keepdims=True)))
    out._backward = _backward
    return out


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to mask == True; masked entries are exactly 0."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"mask shape {mask.shape} != scores shape {x.shape}")
    if not np.all(mask.any(axis=-1)):
        raise ShapeError("attention over an all-masked input")
    shifted = np.where(mask, x.data, -np.inf)
    shifted = shifted - np.max(shifted, axis=-1, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, shifted, 0.0)), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p, (x,), "masked_softmax")

    def _backward():
        g = out.grad
        x._accumulate(p * (g - np.sum(g * p, axis=-1, keepdims=True)))
    out._backward = _backward
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of table for integer ids of any shape -> ids.shape + (dim,)."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ShapeError(f"embedding ids outside [0, {vocab})")
    out = Tensor(table.data[ids], (table,), "embedding")

    def _backward():
        g = np.zeros_like(table.data)
        np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, table.shape[1]))
        table._accumulate(g)
    out._backward = _backward
    return out


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * Tensor(keep)


def dense(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x (..., in) @ W (in, out) + b (out)."""
    out = matmul(x, W)
    return out if b is None else out + b


def mse_loss(pred: Tensor, target) -> Tensor:
    diff = pred - as_tensor(target)
    return (diff * diff).mean()


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects (N, C) logits and (N,) targets, got {logits.shape}, {targets.shape}")
    logp = special.log_softmax(logits.data, axis=1)
    rows = np.arange(targets.size)
    out = Tensor(-np.mean(logp[rows, targets]), (logits,), "cross_entropy")

    def _backward():
        g = np.exp(logp)
        g[rows, targets] -= 1.0
        logits._accumulate(out.grad * g / targets.size)
    out._backward = _backward
    return out


# ═══════════════════════════════════════════════════════════════════════
# MODULES
# ═══════════════════════════════════════════════════════════════════════

class Parameter(Tensor):
    """A tensor owned by a Module; frozen parameters never receive gradients."""

    def __init__(self, data, trainable: bool = True):
        if isinstance(data, Tensor):
            data = data.data
        super().__init__(data, requires_grad=trainable)
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter(shape={self.shape}, trainable={self.trainable})"


class Module:
    """Base container: registers Parameters and sub-Modules in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_parameters", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, p in self._parameters.items():
            yield prefix + name, p
        for name, module in self._modules.items():
            yield from module.named_parameters(prefix + name + ".")

    def parameters(self) -> Iterator[Parameter]:
        for _, p in self.named_parameters():
            yield p

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for module in self._modules.values():
            module.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()


# ─── initialisers ───────────────────────────────────────────────────

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    if n == 1:
        return np.ones((1, 1))
    return ortho_group.rvs(dim=n, random_state=rng)


class Embedding(Module):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator,
                 weights: Optional[np.ndarray] = None, trainable: bool = True):
        super().__init__()
        if weights is None:
            weights = rng.normal(0.0, 0.1, size=(vocab_size, dim))
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (vocab_size, dim):
            raise ShapeError(f"embedding weights {weights.shape} != ({vocab_size}, {dim})")
        self.weight = Parameter(weights, trainable=trainable)

    def forward(self, ids) -> Tensor:
        return embedding_lookup(self.weight, ids)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Parameter(glorot_uniform(rng, in_features, out_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return dense(x, self.weight, self.bias)


# ═══════════════════════════════════════════════════════════════════════
# ATTENTION
# ═══════════════════════════════════════════════════════════════════════

def attention(seq: Tensor, mask: np.ndarray, score_vector: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Scalar score per step from a learned projection, softmax over valid steps,
    each step re-weighted by its weight.

    seq: (..., steps, width); mask: (..., steps) bool.
    Returns (weighted sequence, weights).
    """
    scores = matmul(seq, score_vector)                  # (..., steps)
    weights = masked_softmax(scores, mask)
    weighted = seq * weights.reshape(*weights.shape, 1)
    return weighted, weights


class Attention(Module):
    def __init__(self, width: int, rng: np.random.Generator):
        super().__init__()
        self.score = Parameter(rng.normal(0.0, 1.0 / np.sqrt(width), size=width))

    def forward(self, seq: Tensor, mask: np.ndarray) -> Tuple[Tensor, Tensor]:
        return attention(seq, mask, self.score)


# ═══════════════════════════════════════════════════════════════════════
# LSTM
# ═══════════════════════════════════════════════════════════════════════

@dataclass
class LstmParams:
    """Gate weights act on [h_prev, x_t]; each W is hidden x (hidden + input)."""
    W_f: Tensor
    W_i: Tensor
    W_C: Tensor
    W_o: Tensor
    b_f: Tensor
    b_i: Tensor
    b_C: Tensor
    b_o: Tensor
    hidden_size: int

    def __post_init__(self):
        h = self.hidden_size
        for name in ("W_f", "W_i", "W_C", "W_o"):
            W = getattr(self, name)
            if W.ndim != 2 or W.shape[0] != h or W.shape[1] <= h:
                raise ShapeError(f"{name} has shape {W.shape}; expected ({h}, {h} + input)")
        for name in ("b_f", "b_i", "b_C", "b_o"):
            if getattr(self, name).shape != (h,):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}; expected ({h},)")

    @property
    def input_size(self) -> int:
        return self.W_f.shape[1] - self.hidden_size


def lstm_step(
    params: LstmParams,
    x_t: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    activation_name: str = "tanh",
    step_mask: Optional[np.ndarray] = None,
) -> Tuple[Tensor, Tensor]:
    """
    One LSTM step:
        f = σ(W_f [h, x] + b_f)      i = σ(W_i [h, x] + b_i)
        C~ = act(W_C [h, x] + b_C)   o = σ(W_o [h, x] + b_o)
        c_t = f ⊙ c_prev + i ⊙ C~    h_t = o ⊙ act(c_t)
    Rows with step_mask == False carry (h_prev, c_prev) through unchanged.
    """
    x_t, h_prev, c_prev = as_tensor(x_t), as_tensor(h_prev), as_tensor(c_prev)
    if x_t.shape[-1] != params.input_size or h_prev.shape[-1] != params.hidden_size:
        raise ShapeError(
            f"lstm_step got x {x_t.shape}, h {h_prev.shape}; expects input {params.input_size}, "
            f"hidden {params.hidden_size}"
        )
    z = concat([h_prev, x_t], axis=-1)
    f = sigmoid(matmul(z, params.W_f.T) + params.b_f)
    i = sigmoid(matmul(z, params.W_i.T) + params.b_i)
    cand = activation(matmul(z, params.W_C.T) + params.b_C, activation_name)
    o = sigmoid(matmul(z, params.W_o.T) + params.b_o)
    c_t = f * c_prev + i * cand
    h_t = o * activation(c_t, activation_name)

    if step_mask is not None:
        m = np.asarray(step_mask, dtype=np.float64).reshape(*h_t.shape[:-1], 1)
        h_t = h_t * m + h_prev * (1.0 - m)
        c_t = c_t * m + c_prev * (1.0 - m)
    return h_t, c_t


class LSTM(Module):
    """Single-layer LSTM over left-padded sequences; returns the last hidden state."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator,
                 activation_name: str = "relu", forget_bias: float = 1.0):
        super().__init__()
        if activation_name not in LSTM_ACTIVATIONS:
            raise ValueError(f"unknown lstm activation '{activation_name}'")
        self.hidden_size = hidden_size
        self.input_size = input_size
        self.activation_name = activation_name
        for gate in ("f", "i", "C", "o"):
            W = np.concatenate([
                orthogonal(rng, hidden_size),
                glorot_uniform(rng, input_size, hidden_size).T,
            ], axis=1)
            setattr(self, f"W_{gate}", Parameter(W))
            bias = np.full(hidden_size, forget_bias) if gate == "f" else np.zeros(hidden_size)
            setattr(self, f"b_{gate}", Parameter(bias))

    @property
    def params(self) -> LstmParams:
        return LstmParams(self.W_f, self.W_i, self.W_C, self.W_o,
                          self.b_f, self.b_i, self.b_C, self.b_o, self.hidden_size)

    def forward(self, seq: Tensor, mask: np.ndarray) -> Tensor:
        batch, steps = seq.shape[0], seq.shape[1]
        mask = np.asarray(mask, dtype=bool)
        params = self.params
        h = Tensor(np.zeros((batch, self.hidden_size)))
        c = Tensor(np.zeros((batch, self.hidden_size)))
        for t in range(steps):
            h, c = lstm_step(params, seq[:, t, :], h, c, self.activation_name, mask[:, t])
        return h


# ═══════════════════════════════════════════════════════════════════════
# OPTIMISERS
# ═══════════════════════════════════════════════════════════════════════

def _check_finite_grads(grads: Sequence[np.ndarray]) -> None:
    bad = [i for i, g in enumerate(grads) if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteError(f"non-finite gradient in parameter(s) {bad}; update aborted")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Bias-corrected Adam; returns the updated parameter arrays and advances state."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)}")
    _check_finite_grads(grads)
    if not state.m:
        state.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        state.v = [np.zeros_like(p, dtype=np.float64) for p in params]

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    updated = []
    for idx, (p, g) in enumerate(zip(params, grads)):
        state.m[idx] = state.beta1 * state.m[idx] + (1.0 - state.beta1) * g
        state.v[idx] = state.beta2 * state.v[idx] + (1.0 - state.beta2) * g * g
        m_hat = state.m[idx] / bc1
        v_hat = state.v[idx] / bc2
        updated.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return updated


class Optimizer:
    def __init__(self, params: Sequence[Parameter]):
        self.params = [p for p in params if p.trainable]
        if not self.params:
            raise ValueError("optimizer got an empty parameter list")

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def grads(self) -> List[np.ndarray]:
        return [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]

    def step(self) -> None:
        raise NotImplementedError


class Adam(Optimizer):
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        new_values = adam_step(self.state, [p.data for p in self.params], self.grads())
        for p, value in zip(self.params, new_values):
            p.data = value


class SGD(Optimizer):
    """Stochastic gradient descent with classical momentum."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, momentum: float = 0.9):
        super().__init__(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = self.grads()
        _check_finite_grads(grads)
        for idx, (p, g) in enumerate(zip(self.params, grads)):
            self.velocity[idx] = self.momentum * self.velocity[idx] - self.lr * g
            p.data = p.data + self.velocity[idx]


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most max_norm; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if not np.isfinite(total):
        raise NonFiniteError("non-finite gradient norm")
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# ═══════════════════════════════════════════════════════════════════════
# GRADIENT CHECK
# ═══════════════════════════════════════════════════════════════════════

def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               abs_floor: float = 1e-6) -> float:
    """
    Max relative error between backward() gradients and central differences.

    fn rebuilds the scalar loss from the current values of params on each call.
    Relative error is |a - n| / max(|a| + |n|, abs_floor).
    """
    for p in params:
        p.zero_grad()
    loss = fn()
    if loss.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar loss, got shape {loss.shape}")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a_grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + eps
            plus = float(fn().data)
            flat[j] = original - eps
            minus = float(fn().data)
            flat[j] = original
            numeric = (plus - minus) / (2.0 * eps)
            a = a_grad.reshape(-1)[j]
            err = abs(a - numeric) / max(abs(a) + abs(numeric), abs_floor)
            worst = max(worst, err)
    logger.debug("grad_check over %d tensors: max relative error %.3e", len(params), worst)
    return worst
