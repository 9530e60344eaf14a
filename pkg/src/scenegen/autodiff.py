"""Minimal reverse-mode automatic differentiation on dense numpy arrays.

Covers exactly the operation set the recurrent model and feature nets need:
matmul, add (with bias broadcast), elementwise arithmetic and activations,
concat, row gather / embedding lookup, masked log-softmax, reductions, and
a bias-corrected Adam optimizer.  No GPU, no general broadcasting.
"""

import json
from dataclasses import dataclass, field

import numpy as np


class AutodiffError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "parents", "_backward", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, parents=(), backward=None,
                 name=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad}, name={self.name})"


def parameter(value, name=None):
    return Tensor(value, requires_grad=True, name=name)


def constant(value):
    return Tensor(value)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unary(x, value, grad_fn):
    def backward(g, t=None):
        if x.requires_grad:
            x.grad += grad_fn(g)

    return Tensor(value, parents=(x,), backward=backward)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    value = a.value @ b.value

    def backward(g, t=None):
        if a.requires_grad:
            a.grad += g @ b.value.T
        if b.requires_grad:
            b.grad += a.value.T @ g

    return Tensor(value, parents=(a, b), backward=backward)


def add(a, b):
    """Elementwise add; also supports adding a 1-D bias to each row."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias = b.value.ndim == 1 and a.value.ndim == 2
    if not bias and a.shape != b.shape:
        raise AutodiffError(f"add shape mismatch: {a.shape} vs {b.shape}")
    value = a.value + b.value

    def backward(g, t=None):
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad += g.sum(axis=0) if bias else g

    return Tensor(value, parents=(a, b), backward=backward)


def sub(a, b):
    return add(a, scale(b, -1.0))


def mul(a, b):
    """Hadamard product of equal-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise AutodiffError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def backward(g, t=None):
        if a.requires_grad:
            a.grad += g * b.value
        if b.requires_grad:
            b.grad += g * a.value

    return Tensor(a.value * b.value, parents=(a, b), backward=backward)


def scale(x, c):
    x = _as_tensor(x)
    return _unary(x, x.value * c, lambda g: g * c)


def tanh(x):
    x = _as_tensor(x)
    y = np.tanh(x.value)
    return _unary(x, y, lambda g: g * (1.0 - y * y))


def sigmoid(x):
    x = _as_tensor(x)
    y = 1.0 / (1.0 + np.exp(-x.value))
    return _unary(x, y, lambda g: g * y * (1.0 - y))


def relu(x):
    x = _as_tensor(x)
    return _unary(x, np.maximum(x.value, 0.0), lambda g: g * (x.value > 0))


def exp(x):
    x = _as_tensor(x)
    y = np.exp(x.value)
    return _unary(x, y, lambda g: g * y)


def log(x):
    x = _as_tensor(x)
    return _unary(x, np.log(x.value), lambda g: g / x.value)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    value = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g, t=None):
        for t_, lo, hi in zip(tensors, offsets, offsets[1:]):
            if t_.requires_grad:
                t_.grad += np.take(g, range(lo, hi), axis=axis)

    return Tensor(value, parents=tuple(tensors), backward=backward)


def gather_rows(x, indices):
    """Row lookup (also the embedding op: rows of a table by index)."""
    x = _as_tensor(x)
    indices = np.asarray(indices, dtype=int)

    def backward(g, t=None):
        if x.requires_grad:
            np.add.at(x.grad, indices, g)

    return Tensor(x.value[indices], parents=(x,), backward=backward)


embed_lookup = gather_rows


def reduce_sum(x, axis=None):
    x = _as_tensor(x)
    value = x.value.sum(axis=axis)

    def backward(g, t=None):
        if x.requires_grad:
            if axis is None:
                x.grad += g
            else:
                x.grad += np.expand_dims(g, axis)

    return Tensor(value, parents=(x,), backward=backward)


def reduce_mean(x, axis=None):
    x = _as_tensor(x)
    n = x.value.size if axis is None else x.value.shape[axis]
    return scale(reduce_sum(x, axis=axis), 1.0 / n)


def masked_log_softmax(logits, mask):
    """Row-wise log-softmax normalized over the masked-in entries only.

    Masked-out entries are excluded from the normalization, carry exactly
    zero gradient, and are reported as 0 in the output (they are invalid to
    sample and must never be read).
    """
    x = _as_tensor(logits)
    if x.value.ndim != 2:
        raise AutodiffError("masked_log_softmax expects a (batch, K) tensor")
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape:
        raise AutodiffError(f"mask shape {m.shape} != logits shape {x.shape}")
    if not m.any(axis=1).all():
        raise AutodiffError("mask row with no valid entries")

    neg = np.where(m, x.value, -np.inf)
    shift = neg.max(axis=1, keepdims=True)
    expv = np.where(m, np.exp(x.value - shift), 0.0)
    lse = np.log(expv.sum(axis=1, keepdims=True)) + shift
    value = np.where(m, x.value - lse, 0.0)
    probs = expv / expv.sum(axis=1, keepdims=True)

    def backward(g, t=None):
        if x.requires_grad:
            gm = g * m
            x.grad += gm - probs * gm.sum(axis=1, keepdims=True)

    return Tensor(value, parents=(x,), backward=backward)


def backward(loss):
    """Populate gradients of everything `loss` depends on.

    Traversal order is the deterministic reverse topological order of the
    graph.  Raises on non-scalar losses and on NaN/Inf gradients.
    """
    if np.asarray(loss.value).size != 1:
        raise AutodiffError(f"backward requires a scalar loss, got {loss.shape}")

    topo, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    for node in topo:
        node.grad = np.zeros_like(node.value)
    loss.grad = np.ones_like(loss.value)

    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)

    for node in topo:
        if not np.isfinite(node.grad).all():
            raise AutodiffError(
                f"non-finite gradient encountered at {node.name or 'unnamed tensor'}"
            )


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam over a fixed list of parameter tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for i, p in enumerate(self.params):
            self.state.m[i] = np.zeros_like(p.value)
            self.state.v[i] = np.zeros_like(p.value)

    def step(self):
        s = self.state
        s.step_count += 1
        t = s.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            s.m[i] = s.beta1 * s.m[i] + (1 - s.beta1) * g
            s.v[i] = s.beta2 * s.v[i] + (1 - s.beta2) * g * g
            mhat = s.m[i] / (1 - s.beta1**t)
            vhat = s.v[i] / (1 - s.beta2**t)
            p.value -= s.lr * mhat / (np.sqrt(vhat) + s.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = np.zeros_like(p.value)


def adam_step(opt):
    opt.step()


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path, named_arrays, meta=None):
    """Versioned npz of named arrays plus a JSON metadata blob."""
    payload = dict(named_arrays)
    header = {"version": CHECKPOINT_VERSION, "meta": meta or {}}
    payload["__meta__"] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode(), dtype=np.uint8
    )
    np.savez(path, **payload)


def load_checkpoint(path, expected_shapes=None):
    with np.load(path) as data:
        header = json.loads(bytes(data["__meta__"].tobytes()).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise AutodiffError(f"unsupported checkpoint version {header.get('version')}")
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    if expected_shapes:
        for name, shape in expected_shapes.items():
            if name not in arrays:
                raise AutodiffError(f"checkpoint missing array {name!r}")
            if tuple(arrays[name].shape) != tuple(shape):
                raise AutodiffError(
                    f"checkpoint shape mismatch for {name!r}: "
                    f"{arrays[name].shape} != {tuple(shape)}"
                )
    return arrays, header["meta"]


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_difference_grads(f, params, h=1e-5):
    """Central-difference gradients of scalar f() w.r.t. each param tensor."""
    grads = []
    for p in params:
        g = np.zeros_like(p.value)
        flat = p.value.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(f().value)
            flat[i] = orig - h
            lo = float(f().value)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * h)
        grads.append(g)
    return grads


def grad_check(f, params, h=1e-5):
    """Max relative error between backprop and finite-difference gradients."""
    loss = f()
    backward(loss)
    analytic = [p.grad.copy() for p in params]
    numeric = finite_difference_grads(f, params, h=h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
