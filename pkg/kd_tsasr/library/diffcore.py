"""Minimal reverse-mode differentiable core.

Every model in the package is built from the handful of operations below.
A forward pass creates ``Var`` nodes that remember their inputs and a
closure computing the analytic input gradients; ``backward`` walks the graph
in reverse topological order. Parameters live in a ``ParamStore`` and are
bound to fresh leaf nodes for every forward pass, so independent passes can
run concurrently and hand back plain gradient dictionaries.

All arithmetic is float64.
"""
import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

LOG = logging.getLogger("diffcore")


class Var:
    """A node in the computation graph."""

    __slots__ = ('data', 'grad', 'parents', 'backward_fn', 'requires_grad')

    def __init__(self, data, parents: Sequence['Var'] = (), backward_fn=None,
                 requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or bool(self.parents)

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f'Var(shape={self.shape}, requires_grad={self.requires_grad})'


def constant(data) -> Var:
    return Var(data)


def leaf(data) -> Var:
    return Var(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data, parents, backward_fn) -> Var:
    tracked = tuple(p for p in parents if p.requires_grad)
    if not tracked:
        return Var(data)
    return Var(data, parents, backward_fn)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topological_order(root: Var) -> List[Var]:
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Var, seed=None):
    """Propagate gradients from ``root`` to every tracked input."""
    if not root.requires_grad:
        return
    root.grad = np.ones_like(root.data) if seed is None else np.array(seed, dtype=np.float64)
    for node in reversed(_topological_order(root)):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


def check_finite(x: np.ndarray, what: str):
    if not np.all(np.isfinite(x)):
        raise ValueError(f'{what}: non-finite values in input')


# Elementwise and shape operations.

def add(a: Var, b: Var) -> Var:
    def back(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))
    return _make(a.data + b.data, (a, b), back)


def sub(a: Var, b: Var) -> Var:
    def back(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(-_unbroadcast(g, b.shape))
    return _make(a.data - b.data, (a, b), back)


def mul(a: Var, b: Var) -> Var:
    """Elementwise (Hadamard) product with broadcasting."""
    def back(g):
        a.accumulate(_unbroadcast(g * b.data, a.shape))
        b.accumulate(_unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), back)


def scale(a: Var, c: float) -> Var:
    def back(g):
        a.accumulate(g * c)
    return _make(a.data * c, (a,), back)


def tanh(a: Var) -> Var:
    y = np.tanh(a.data)

    def back(g):
        a.accumulate(g * (1.0 - y * y))
    return _make(y, (a,), back)


def sigmoid(a: Var) -> Var:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def back(g):
        a.accumulate(g * y * (1.0 - y))
    return _make(y, (a,), back)


def reshape(a: Var, shape) -> Var:
    def back(g):
        a.accumulate(g.reshape(a.shape))
    return _make(a.data.reshape(shape), (a,), back)


def transpose(a: Var) -> Var:
    def back(g):
        a.accumulate(g.T)
    return _make(a.data.T, (a,), back)


def take(a: Var, index: int) -> Var:
    """Row ``index`` along the first axis."""
    def back(g):
        full = np.zeros_like(a.data)
        full[index] = g
        a.accumulate(full)
    return _make(a.data[index], (a,), back)


def narrow(a: Var, start: int, stop: int) -> Var:
    """Rows ``start:stop`` along the first axis."""
    def back(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        a.accumulate(full)
    return _make(a.data[start:stop], (a,), back)


def stack(items: Sequence[Var]) -> Var:
    data = np.stack([v.data for v in items])

    def back(g):
        for i, v in enumerate(items):
            v.accumulate(g[i])
    return _make(data, tuple(items), back)


def concat(items: Sequence[Var]) -> Var:
    """Join along the first axis."""
    data = np.concatenate([v.data for v in items])
    bounds = np.cumsum([0] + [v.shape[0] for v in items])

    def back(g):
        for v, start, stop in zip(items, bounds[:-1], bounds[1:]):
            v.accumulate(g[start:stop])
    return _make(data, tuple(items), back)


def mean(a: Var, axis: int = 0) -> Var:
    n = a.shape[axis]

    def back(g):
        a.accumulate(np.broadcast_to(np.expand_dims(g, axis) / n, a.shape))
    return _make(a.data.mean(axis=axis), (a,), back)


def sum_all(a: Var) -> Var:
    def back(g):
        a.accumulate(np.broadcast_to(g, a.shape))
    return _make(np.array(a.data.sum()), (a,), back)


def matmul(a: Var, b: Var) -> Var:
    """``a @ b`` for ``a`` of shape (..., n) and a 2-D ``b`` of shape (n, m)."""
    if b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f'matmul shape mismatch: {a.shape} @ {b.shape}')

    def back(g):
        a.accumulate(g @ b.data.T)
        n, m = b.shape
        b.accumulate(a.data.reshape(-1, n).T @ g.reshape(-1, m))
    return _make(a.data @ b.data, (a, b), back)


def affine(x: Var, W: Var, b: Var) -> Var:
    """``y = x W + b`` over the last axis of ``x``."""
    if W.data.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(f'affine shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}')
    din, dout = W.shape

    def back(g):
        x.accumulate(g @ W.data.T)
        flat_g = g.reshape(-1, dout)
        W.accumulate(x.data.reshape(-1, din).T @ flat_g)
        b.accumulate(flat_g.sum(axis=0))
    return _make(x.data @ W.data + b.data, (x, W, b), back)


# Normalizations.

def softmax_last_dim(x: Var) -> Var:
    check_finite(x.data, 'softmax_last_dim')
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        x.accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))
    return _make(y, (x,), back)


def log_softmax_last_dim(x: Var) -> Var:
    check_finite(x.data, 'log_softmax_last_dim')
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def back(g):
        x.accumulate(g - np.exp(y) * g.sum(axis=-1, keepdims=True))
    return _make(y, (x,), back)


def masked_softmax(x: Var, mask: np.ndarray) -> Var:
    """Softmax over the last axis restricted to positions where ``mask`` is true."""
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise ValueError('masked_softmax: every row of the mask needs at least one true entry')
    scores = np.where(mask, x.data, -np.inf)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        x.accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))
    return _make(y, (x,), back)


# Composite blocks.

def recurrent_step(h_prev: Var, x: Var, params: Dict[str, Var]) -> Var:
    """One step of a minimal gated recurrence.

    z = sigmoid(x Wz + h Uz + bz), c = tanh(x Wc + h Uc + bc),
    h' = h + z * (c - h). The output depends only on ``h_prev`` and ``x``.
    """
    if x.shape != (params['Wz'].shape[0],) or h_prev.shape != (params['Uz'].shape[0],):
        raise ValueError(f'recurrent_step shape mismatch: h {h_prev.shape}, x {x.shape}, '
                         f'Wz {params["Wz"].shape}, Uz {params["Uz"].shape}')
    z = sigmoid(add(affine(x, params['Wz'], params['bz']), matmul(h_prev, params['Uz'])))
    c = tanh(add(affine(x, params['Wc'], params['bc']), matmul(h_prev, params['Uc'])))
    return add(h_prev, mul(z, sub(c, h_prev)))


def recurrent_sequence(xs: Var, h0: Var, params: Dict[str, Var]) -> List[Var]:
    """Run ``recurrent_step`` over the rows of ``xs``; returns [h0, h1, ..., hN]."""
    states = [h0]
    for i in range(xs.shape[0]):
        states.append(recurrent_step(states[-1], take(xs, i), params))
    return states


def masked_self_attention(x: Var, mask: np.ndarray, params: Dict[str, Var]) -> Var:
    """Single-head scaled dot-product self attention.

    ``mask[i][j]`` true means position i may attend to j. Output row i is a
    convex combination of the value projections of the allowed positions.
    """
    mask = np.asarray(mask, dtype=bool)
    T = x.shape[0]
    if mask.shape != (T, T):
        raise ValueError(f'attention mask shape {mask.shape} does not match sequence length {T}')
    if not np.all(mask.any(axis=1)):
        raise ValueError('attention mask has a row with no allowed position')
    q = affine(x, params['Wq'], params['bq'])
    k = affine(x, params['Wk'], params['bk'])
    v = affine(x, params['Wv'], params['bv'])
    scores = scale(matmul(q, transpose(k)), 1.0 / np.sqrt(q.shape[-1]))
    weights = masked_softmax(scores, mask)
    return matmul(weights, v)


def overlap_add(frames: Var, hop: int, length: int) -> Var:
    """Sum frames of shape (N, W) placed every ``hop`` samples into a signal."""
    n, window = frames.shape
    if (n - 1) * hop + window != length:
        raise ValueError(f'overlap_add: {n} frames of {window} with hop {hop} '
                         f'do not cover {length} samples')
    index = np.arange(window)[None, :] + hop * np.arange(n)[:, None]
    out = np.zeros(length)
    np.add.at(out, index, frames.data)

    def back(g):
        frames.accumulate(g[index])
    return _make(out, (frames,), back)


def scalar_op(value: float, parent: Var, local_grad: np.ndarray) -> Var:
    """A scalar node whose gradient with respect to ``parent`` is precomputed."""
    def back(g):
        parent.accumulate(g * local_grad)
    return _make(np.array(value, dtype=np.float64), (parent,), back)


# Parameters.

class ParamBinding:
    """Parameter leaves for one forward pass over a ``ParamStore``."""

    def __init__(self, store: 'ParamStore', track: bool = True):
        self._store = store
        self._track = track
        self._leaves = {}

    def __getitem__(self, name: str) -> Var:
        node = self._leaves.get(name)
        if node is None:
            data = self._store.params[name]
            node = Var(data, requires_grad=self._track and not self._store.is_frozen(name))
            self._leaves[name] = node
        return node

    def group(self, prefix: str) -> Dict[str, Var]:
        """All parameters under ``prefix.``, keyed by their final name component."""
        out = {}
        for name in self._store.names(prefix):
            out[name[len(prefix) + 1:]] = self[name]
        return out

    def grads(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, node in self._leaves.items():
            if node.requires_grad:
                out[name] = node.grad if node.grad is not None else np.zeros_like(node.data)
        return out


class ParamStore:
    """Named parameter arrays with gradient accumulators and frozen groups.

    A group is the first dotted component of a parameter name
    (``asr_enc.block0.attn.Wq`` belongs to ``asr_enc``).
    """

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.frozen_groups = set()

    @staticmethod
    def group_of(name: str) -> str:
        return name.split('.', 1)[0]

    def add(self, name: str, value: np.ndarray):
        if name in self.params:
            raise ValueError(f'Parameter "{name}" already exists')
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def names(self, prefix: Optional[str] = None) -> List[str]:
        names = sorted(self.params)
        if prefix is None:
            return names
        return [n for n in names if n.startswith(prefix + '.')]

    def groups(self) -> List[str]:
        return sorted({self.group_of(n) for n in self.params})

    def freeze(self, groups: Optional[Iterable[str]] = None):
        for group in (self.groups() if groups is None else groups):
            self.frozen_groups.add(group)
        for name in self.params:
            if self.is_frozen(name):
                self.grads[name][...] = 0.0

    def is_frozen(self, name: str) -> bool:
        return self.group_of(name) in self.frozen_groups

    @property
    def fully_frozen(self) -> bool:
        return bool(self.params) and all(self.is_frozen(n) for n in self.params)

    def bind(self, track: bool = True) -> ParamBinding:
        """Fresh leaves for one pass; ``track=False`` builds no graph (inference)."""
        return ParamBinding(self, track)

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0

    def accumulate(self, grads: Dict[str, np.ndarray], weight: float = 1.0):
        """Add gradients into the accumulators; frozen groups stay at zero."""
        for name, g in grads.items():
            if self.is_frozen(name):
                continue
            if g.shape != self.params[name].shape:
                raise ValueError(f'Gradient for "{name}" has shape {g.shape}, '
                                 f'parameter has {self.params[name].shape}')
            self.grads[name] += weight * g

    def copy(self) -> 'ParamStore':
        other = ParamStore()
        for name in self.names():
            other.add(name, self.params[name].copy())
        other.frozen_groups = set(self.frozen_groups)
        return other

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def init_matrix(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0):
    return rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out))


def add_affine(store: ParamStore, rng: np.random.Generator, prefix: str,
               fan_in: int, fan_out: int, gain: float = 1.0, weight: str = 'W', bias: str = 'b'):
    store.add(f'{prefix}.{weight}', init_matrix(rng, fan_in, fan_out, gain))
    store.add(f'{prefix}.{bias}', np.zeros(fan_out))


def add_recurrence(store: ParamStore, rng: np.random.Generator, prefix: str,
                   input_dim: int, dim: int, gain: float = 1.0):
    for gate in ('z', 'c'):
        store.add(f'{prefix}.W{gate}', init_matrix(rng, input_dim, dim, gain))
        store.add(f'{prefix}.U{gate}', init_matrix(rng, dim, dim, gain))
        store.add(f'{prefix}.b{gate}', np.zeros(dim))


def add_attention(store: ParamStore, rng: np.random.Generator, prefix: str,
                  dim: int, gain: float = 1.0):
    for proj in ('q', 'k', 'v'):
        store.add(f'{prefix}.W{proj}', init_matrix(rng, dim, dim, gain))
        store.add(f'{prefix}.b{proj}', np.zeros(dim))


# Gradient checking.

def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5):
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=['multi_index'])
    for _ in it:
        idx = it.multi_index
        original = x[idx]
        x[idx] = original + eps
        plus = f(x.copy())
        x[idx] = original - eps
        minus = f(x.copy())
        x[idx] = original
        grad[idx] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute deviation relative to the largest gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)
