"""Dense float64 tensors with reverse-mode differentiation.

Every model operation in the package is composed from the primitives in this
module, so each one can be verified against central finite differences with
:func:`grad_check`.

Conventions:

* values are stored as C-contiguous ``float64`` arrays;
* every primitive checks its output for NaN/Inf and raises
  :class:`~trajbench.errors.NonFiniteError` instead of propagating;
* ``backward`` accumulates into ``grad`` of leaf tensors created with
  ``requires_grad=True``; call :func:`zero_grad` between steps.

Random numbers come from :class:`RngStream`, a thin wrapper over numpy's
Philox4x64-10 counter-based generator keyed by ``(seed, stream_id)``. Philox
output is specified bit-for-bit, so identical keys produce identical streams
on every platform.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError, ParameterError

_U64 = 2**64

# Incremented by every train-mode dropout draw; grad_check uses it to refuse
# stochastic programs.
_stochastic_draws = 0

# When not None, non-smooth primitives append their branch choices here
# (see switch_pattern).
_switch_log: list[np.ndarray] | None = None


class Tensor:
    """n-dimensional real array with optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, _check: bool = True):
        arr = np.array(data, dtype=np.float64, order="C")
        if _check and not np.isfinite(arr).all():
            raise NonFiniteError("tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)

    def to_csv(self, path) -> None:
        """Debug dump: one row per leading index, trailing axes flattened."""
        arr = self.data.reshape(self.shape[0], -1) if self.ndim > 1 else self.data.reshape(1, -1)
        np.savetxt(path, arr, delimiter=",", fmt="%.17g", header="shape=" + "x".join(map(str, self.shape)))


def _as_tensor(value, shape) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(shape, float(value)))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data, dtype=np.float64)
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str = "custom") -> Tensor:
    """Record an arbitrary node; ``backward_fn(g)`` returns one gradient per parent."""
    return _make(np.asarray(data, dtype=np.float64), parents, backward_fn, op)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad)


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


def label_stream_id(label: str) -> int:
    """Stable 64-bit id for a component label (BLAKE2b, 8-byte digest)."""
    return int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "little")


class RngStream:
    """Deterministic random stream keyed by ``(seed, stream_id)``.

    Backed by Philox4x64-10 with the 128-bit key ``[seed, stream_id]``. The
    stream is stateful: consecutive draws advance the counter, and two
    instances built from the same key replay the same sequence.
    """

    def __init__(self, seed: int, stream_id: int | str = 0):
        if isinstance(stream_id, str):
            stream_id = label_stream_id(stream_id)
        if not (0 <= int(seed) < _U64 and 0 <= int(stream_id) < _U64):
            raise ParameterError("seed and stream_id must be unsigned 64-bit integers")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def child(self, label: str | int) -> "RngStream":
        """Independent stream for a sub-component, derived from this key."""
        sub = label if isinstance(label, int) else label_stream_id(label)
        return RngStream(self.seed, (self.stream_id * 0x9E3779B97F4A7C15 + sub + 1) % _U64)

    def random(self, shape=None) -> np.ndarray:
        return self.generator.random(shape)

    def uniform(self, low, high, shape=None):
        return self.generator.uniform(low, high, shape)

    def normal(self, loc=0.0, scale=1.0, shape=None):
        return self.generator.normal(loc, scale, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


# ---------------------------------------------------------------------------
# Elementwise and structural primitives
# ---------------------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, g.item()),), "sum")


def mean(x: Tensor) -> Tensor:
    n = max(x.size, 1)
    return _make(np.array(x.data.sum() / n), (x,), lambda g: (np.full(x.shape, g.item() / n),), "mean")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Expand singleton axes; the backward pass sums over them."""
    shape = tuple(shape)
    if x.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise DimensionError(f"broadcast_to: cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s == 1 and t != 1)

    def back(g):
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _make(np.broadcast_to(x.data, shape).copy(), (x,), back, "broadcast_to")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def affine(x: Tensor, W: Tensor, B: Tensor) -> Tensor:
    """``x @ W + B`` with ``B`` broadcast over rows."""
    if x.ndim != 2 or W.ndim != 2 or B.ndim != 1 or x.shape[1] != W.shape[0] or W.shape[1] != B.shape[0]:
        raise DimensionError(f"affine: x{x.shape} W{W.shape} B{B.shape} are incompatible")

    def back(g):
        return g @ W.data.T, x.data.T @ g, g.sum(axis=0)

    return _make(x.data @ W.data + B.data, (x, W, B), back, "affine")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ParameterError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    pos = x.data >= 0
    if _switch_log is not None:
        _switch_log.append(pos)
    factor = np.where(pos, 1.0, slope)
    return _make(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def activation(x: Tensor, kind: str, slope: float = 0.01) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ParameterError(f"unknown activation {kind!r}")


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted({a % ndim if -ndim <= a < ndim else _bad_axis(a, ndim) for a in axes}))
    if not axes:
        raise DimensionError("pool: empty reduction set")
    return axes


def _bad_axis(a: int, ndim: int):
    raise DimensionError(f"axis {a} is invalid for a {ndim}-d tensor")


def pool(x: Tensor, kind: str, axes, keepdims: bool = False) -> Tensor:
    """Average or max reduction over ``axes``.

    Max routes the whole gradient to the first maximal element in row-major
    order of the reduced block.
    """
    axes = _norm_axes(axes, x.ndim)
    kept = tuple(a for a in range(x.ndim) if a not in axes)
    kd_shape = tuple(1 if a in axes else s for a, s in enumerate(x.shape))
    if kind == "avg":
        count = int(np.prod([x.shape[a] for a in axes]))
        out = x.data.sum(axis=axes, keepdims=True) / count

        def back(g):
            return (np.broadcast_to(g.reshape(kd_shape), x.shape) / count,)

    elif kind == "max":
        moved = np.transpose(x.data, kept + axes)
        flat = moved.reshape(moved.shape[: len(kept)] + (-1,))
        idx = flat.argmax(axis=-1)
        if _switch_log is not None:
            _switch_log.append(idx)
        out = np.take_along_axis(flat, idx[..., None], axis=-1).reshape(kd_shape)
        inverse = np.argsort(kept + axes)

        def back(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[..., None], g.reshape(idx.shape + (1,)), axis=-1)
            return (np.transpose(gflat.reshape(moved.shape), inverse),)

    else:
        raise ParameterError(f"unknown pool kind {kind!r}")
    out_shape = kd_shape if keepdims else tuple(x.shape[a] for a in kept)
    return _make(out.reshape(out_shape), (x,), back, f"pool_{kind}")


def dropout(x: Tensor, p: float, mode: str, rng: RngStream | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` at train time."""
    global _stochastic_draws
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if mode != "train":
        raise ParameterError(f"unknown mode {mode!r}")
    if rng is None:
        raise ContractError("train-mode dropout needs an RngStream")
    _stochastic_draws += 1
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat: nothing to concatenate")
    ndim = parts[0].ndim
    axis = axis % ndim if ndim else 0
    for p in parts[1:]:
        if p.ndim != ndim or any(a != b for i, (a, b) in enumerate(zip(p.shape, parts[0].shape)) if i != axis):
            raise DimensionError(f"concat: side extents of {p.shape} and {parts[0].shape} differ on axis {axis}")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, back, "concat")


def index(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; gradient scatters back into zeros."""
    out = x.data[key]

    def back(g):
        full = np.zeros(x.shape)
        full[key] = g
        return (full,)

    return _make(np.array(out), (x,), back, "index")


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    if int(np.sum(sizes)) != x.shape[axis]:
        raise DimensionError(f"split: sizes {list(sizes)} do not cover extent {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        key = [slice(None)] * x.ndim
        key[axis] = slice(start, start + s)
        out.append(index(x, tuple(key)))
        start += s
    return out


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` gives (before, after) per axis."""
    widths = [tuple(w) for w in widths]
    if len(widths) != x.ndim:
        raise DimensionError(f"pad: need {x.ndim} (before, after) pairs")
    key = tuple(slice(b, b + s) for (b, _), s in zip(widths, x.shape))
    return _make(np.pad(x.data, widths), (x,), lambda g: (g[key],), "pad")


def conv2d(x: Tensor, K: Tensor, B: Tensor) -> Tensor:
    """Valid, stride-1 cross-correlation.

    ``x`` is ``C_in x H x W`` or batched ``N x C_in x H x W``; ``K`` is
    ``C_out x C_in x kh x kw``; ``B`` has one entry per output channel.
    """
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or K.ndim != 4 or B.ndim != 1:
        raise DimensionError(f"conv2d: x{x.shape} K{K.shape} B{B.shape} have wrong ranks")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    o, ck, kh, kw = K.shape
    if ck != c or B.shape[0] != o:
        raise DimensionError(f"conv2d: x{x.shape} K{K.shape} B{B.shape} channel mismatch")
    if kh > h or kw > w:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
    ho, wo = h - kh + 1, w - kw + 1
    out = np.zeros((n, ho, wo, o))
    for a in range(kh):
        for b in range(kw):
            out += np.tensordot(xd[:, :, a : a + ho, b : b + wo], K.data[:, :, a, b], axes=([1], [1]))
    out = np.moveaxis(out, 3, 1) + B.data[None, :, None, None]

    def back(g):
        g4 = g if batched else g[None]
        gx = np.zeros_like(xd)
        gK = np.zeros_like(K.data)
        for a in range(kh):
            for b in range(kw):
                xs = xd[:, :, a : a + ho, b : b + wo]
                gK[:, :, a, b] = np.tensordot(g4, xs, axes=([0, 2, 3], [0, 2, 3]))
                gx[:, :, a : a + ho, b : b + wo] += np.moveaxis(np.tensordot(g4, K.data[:, :, a, b], axes=([1], [0])), 3, 1)
        return (gx if batched else gx[0]), gK, g4.sum(axis=(0, 2, 3))

    return _make(out if batched else out[0], (x, K, B), back, "conv2d")


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    Gradients accumulate across calls.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else np.asarray(pg, dtype=np.float64)


@contextmanager
def switch_pattern():
    """Record the branch taken by every non-smooth primitive.

    Yields a list that receives the sign mask of each leaky-ReLU input and
    the argmax of each max-pool. Two runs with equal patterns lie on the same
    smooth piece of the program.
    """
    global _switch_log
    previous, _switch_log = _switch_log, []
    try:
        yield _switch_log
    finally:
        _switch_log = previous


def same_pattern(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def smooth_neighbourhood(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float) -> bool:
    """True when every ``+-eps`` coordinate probe keeps ``f`` on one smooth piece.

    Central differences are only meaningful where this holds; use it to
    certify a gradient-check point before calling :func:`grad_check`.
    """
    with switch_pattern() as base:
        f()
    for p in params:
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            try:
                for step in (eps, -eps):
                    flat[i] = orig + step
                    with switch_pattern() as probe:
                        f()
                    if not same_pattern(base, probe):
                        return False
            finally:
                flat[i] = orig
    return True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    The relative error of one element is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.
    ``f`` is re-evaluated ``2 * n_elements`` times and must be deterministic.
    Parameter values are perturbed in place and restored afterwards.
    """
    if eps <= 0:
        raise ParameterError("eps must be positive")
    params = list(params)
    zero_grad(params)
    draws = _stochastic_draws
    loss = f()
    if _stochastic_draws != draws:
        raise ContractError("grad_check needs a deterministic program (dropout must be in eval mode)")
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.reshape(p.shape)
        flat = p.data.reshape(-1)
        for i, a in enumerate(analytic.reshape(-1)):
            orig = flat[i]
            flat[i] = orig + eps
            hi = flat[i]
            fp = f().item()
            flat[i] = orig - eps
            lo = flat[i]
            fm = f().item()
            flat[i] = orig
            # divide by the step actually representable in floating point
            num = (fp - fm) / (hi - lo)
            err = abs(a - num) / max(abs(a), abs(num), 1e-12)
            worst = max(worst, err)
    zero_grad(params)
    return worst
