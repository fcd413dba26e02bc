"""Reverse-mode automatic differentiation over dense numpy arrays.

A `Tensor` is a node in a dynamically built computation graph: it carries the
forward value, the parent nodes, a backward rule (vector-Jacobian product)
and a gradient accumulator. `backward()` on a scalar loss walks the graph in
reverse topological order and accumulates gradients into every reachable
tensor with `requires_grad`.

Design notes:
  * double precision by default (finite-difference checks demand it);
    pass float32 data explicitly for speed, gradients follow the data dtype.
  * broadcasting follows numpy's trailing-dimension alignment and nothing
    more; reshape explicitly for anything else.
  * the graph is rebuilt on every forward pass (sequence lengths vary).
  * a graph is single-threaded; run independent graphs for parallelism.
"""

from __future__ import annotations

import json
import math
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "reciprocal",
    "matmul",
    "exp",
    "log",
    "sqrt",
    "softplus",
    "sigmoid",
    "tanh",
    "silu",
    "transpose",
    "reshape",
    "concat",
    "reduce_sum",
    "reduce_mean",
    "decay_scan",
    "backward",
    "grads_of",
    "zero_grads",
    "param_rng",
    "normal_param",
    "zeros_param",
    "constant_param",
    "AdamState",
    "adam_step",
    "lr_schedule",
    "save_checkpoint",
    "load_checkpoint",
    "gradcheck",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; message carries both."""


class Tensor:
    """Value node: data, parents, backward rule, gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=float) if not isinstance(data, np.ndarray) else data
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(float)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self.name: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """Named trainable tensor with deterministic initialization."""

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=float), requires_grad=True)
        self.name = name


def tensor(data) -> Tensor:
    """Wrap raw data as a constant (non-trainable) tensor."""
    return data if isinstance(data, Tensor) else Tensor(np.asarray(data, dtype=float))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing trailing-dimension broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def add(a, b) -> Tensor:
    # python-scalar operands stay scalars: no graph node, no dtype promotion
    if _is_scalar(b):
        a = tensor(a)
        return _node(a.data + b, (a,), lambda g: (g,))
    if _is_scalar(a):
        b = tensor(b)
        return _node(a + b.data, (b,), lambda g: (g,))
    a, b = tensor(a), tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _node(data, (a, b), vjp)


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        a = tensor(a)
        return _node(a.data - b, (a,), lambda g: (g,))
    if _is_scalar(a):
        b = tensor(b)
        return _node(a - b.data, (b,), lambda g: (-g,))
    a, b = tensor(a), tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _node(data, (a, b), vjp)


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        a = tensor(a)
        return _node(a.data * b, (a,), lambda g: (g * b,))
    if _is_scalar(a):
        b = tensor(b)
        return _node(a * b.data, (b,), lambda g: (g * a,))
    a, b = tensor(a), tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _node(data, (a, b), vjp)


def neg(a) -> Tensor:
    a = tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def reciprocal(a) -> Tensor:
    a = tensor(a)
    inv = 1.0 / a.data
    return _node(inv, (a,), lambda g: (-g * inv * inv,))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch semantics; operands must be >= 2-D."""
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return (ga, gb)

    return _node(data, (a, b), vjp)


def exp(a) -> Tensor:
    a = tensor(a)
    e = np.exp(a.data)
    return _node(e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = tensor(a)
    s = np.sqrt(a.data)
    return _node(s, (a,), lambda g: (g * 0.5 / s,))


def _expit(x: np.ndarray) -> np.ndarray:
    # overflow-free logistic via tanh
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a) -> Tensor:
    a = tensor(a)
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _node(data, (a,), lambda g: (g * _expit(x),))


def sigmoid(a) -> Tensor:
    a = tensor(a)
    s = _expit(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = tensor(a)
    t = np.tanh(a.data)
    return _node(t, (a,), lambda g: (g * (1.0 - t * t),))


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = tensor(a)
    s = _expit(a.data)
    data = a.data * s
    return _node(data, (a,), lambda g: (g * (s + data * (1.0 - s)),))


def take(a, key) -> Tensor:
    """Basic (slice/int) indexing; backward scatters into zeros."""
    a = tensor(a)
    data = a.data[key]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        return (ga,)

    return _node(data, (a,), vjp)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(data, tuple(parts), vjp)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        # read-only broadcast view; accumulation never mutates grads in place
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape),)

    return _node(data, (a,), vjp)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, a.shape),)

    return _node(data, (a,), vjp)


def decay_scan(decay, x, axis: int = 1) -> Tensor:
    """Cumulative linear recurrence along `axis`:

        h[0] = x[0],   h[t] = decay[t] * h[t-1] + x[t]

    i.e. the scan of ``h_t = a_t h_{t-1} + x_t`` with ``h_{-1} = 0``. With
    decay == 1 this is a cumulative sum. Backward replays the recurrence in
    reverse.
    """
    decay, x = tensor(decay), tensor(x)
    if decay.shape != x.shape:
        raise ShapeError(f"decay_scan: decay shape {decay.shape} != input shape {x.shape}")
    a_m = np.moveaxis(decay.data, axis, 0)
    x_m = np.moveaxis(x.data, axis, 0)
    h_m = np.empty_like(x_m)
    h_m[0] = x_m[0]
    for t in range(1, x_m.shape[0]):
        h_m[t] = a_m[t] * h_m[t - 1] + x_m[t]
    data = np.moveaxis(h_m, 0, axis).copy()

    def vjp(g):
        g_m = np.moveaxis(g, axis, 0)
        n = g_m.shape[0]
        lam = np.empty_like(h_m)
        lam[n - 1] = g_m[n - 1]
        for t in range(n - 2, -1, -1):
            lam[t] = g_m[t] + a_m[t + 1] * lam[t + 1]
        gx = np.moveaxis(lam, 0, axis)
        ga = None
        if decay.requires_grad:
            ga_m = np.empty_like(lam)
            ga_m[0] = 0.0
            np.multiply(lam[1:], h_m[:-1], out=ga_m[1:])
            ga = np.moveaxis(ga_m, 0, axis)
        return (ga, gx if x.requires_grad else None)

    return _node(data, (decay, x), vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar `loss` into the graph's tensors."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


def grads_of(params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients for `params` after a backward pass; unused params get zeros."""
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------


def param_rng(name: str, seed: int) -> np.random.Generator:
    """Deterministic per-(name, seed) generator; stable across processes."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    )


def normal_param(name: str, seed: int, shape, std: float) -> Parameter:
    return Parameter(name, param_rng(name, seed).normal(0.0, std, size=shape))


def zeros_param(name: str, shape) -> Parameter:
    return Parameter(name, np.zeros(shape))


def constant_param(name: str, value) -> Parameter:
    return Parameter(name, np.asarray(value, dtype=float))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: int = 0


def adam_step(
    params: Sequence[Parameter],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update, in place."""
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g in zip(params, grads):
        if p.name is None:
            raise ValueError("adam_step requires named parameters")
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_schedule(epoch: int, lr0: float = 0.001, step: int = 20, factor: float = 0.5) -> float:
    """Stepwise decay: lr0 * factor^floor(epoch/step)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * factor ** (epoch // step)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: Sequence[Parameter], config_hash: str) -> None:
    """Named tensors plus a config hash; loadable only into a matching model."""
    arrays = {}
    for p in params:
        if p.name is None:
            raise ValueError("checkpoint requires named parameters")
        if p.name in arrays:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        arrays[p.name] = p.data
    meta = json.dumps({"config_hash": config_hash, "names": sorted(arrays)})
    np.savez(path, __meta__=np.frombuffer(meta.encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path, params: Sequence[Parameter], config_hash: str) -> None:
    """Load values into `params`; reject config-hash or shape mismatches."""
    with np.load(path) as blob:
        meta = json.loads(bytes(blob["__meta__"]).decode())
        if meta["config_hash"] != config_hash:
            raise ValueError(
                f"checkpoint config hash {meta['config_hash']} != expected {config_hash}"
            )
        for p in params:
            if p.name not in blob:
                raise KeyError(f"checkpoint missing parameter {p.name!r}")
            stored = blob[p.name]
            if stored.shape != p.data.shape:
                raise ShapeError(
                    f"checkpoint shape {stored.shape} != parameter {p.name!r} shape {p.data.shape}"
                )
            p.data = stored.copy()


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare reverse-mode gradients of scalar `fn()` against central
    finite differences over `inputs`.

    Returns the worst error max|fd - ad| / max(1, |fd|, |ad|). When an input
    has more than `max_coords` elements, a random coordinate subset is
    checked.
    """
    loss = fn()
    zero_grads(inputs)
    backward(loss)
    analytic = grads_of(inputs)
    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for x, ad in zip(inputs, analytic):
        x.data = np.ascontiguousarray(x.data)
        flat = x.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for j in idx:
            keep = flat[j]
            flat[j] = keep + h
            f_plus = float(fn().data)
            flat[j] = keep - h
            f_minus = float(fn().data)
            flat[j] = keep
            fd = (f_plus - f_minus) / (2.0 * h)
            aj = float(ad.reshape(-1)[j])
            err = abs(fd - aj) / max(1.0, abs(fd), abs(aj))
            if err > worst:
                worst = err
    return worst
