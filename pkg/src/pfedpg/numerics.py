"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` is an immutable wrapper around a numpy array.  Tensors created
through :meth:`GradTape.watch` are leaves on that tape; every operation whose
inputs include a traced tensor is appended to the same tape together with a
closure mapping the output cotangent to input cotangents.  Operations on
untraced tensors return untraced constants, so frozen weights never acquire
gradients.

Arrays may carry leading batch axes.  ``matmul`` follows numpy broadcasting
rules and elementwise ops broadcast as numpy does; the reverse pass sums
cotangents back to each input's shape.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """A gradient was requested for a value that was not traced."""


class Tensor:
    __slots__ = ("data", "tape", "index")

    def __init__(self, data, tape: Optional["GradTape"] = None, index: int = -1):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.index = index

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape=None, index: int = -1) -> "Tensor":
        # Op outputs are fresh arrays; skip the defensive copy.
        out = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        out.data = arr
        out.tape = tape
        out.index = index
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def traced(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f", tape#{self.index}" if self.traced else ""
        return f"Tensor(shape={self.shape}{tag})"

    # Operator sugar; the real work lives in the module-level functions.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


class GradTape:
    """Ordered record of traced operations.

    Each entry is ``(parents, vjp)``; leaves have ``vjp=None``.  Entries are
    appended in execution order, so reverse index order is a valid reverse
    topological order.
    """

    def __init__(self):
        self.nodes: list[tuple[tuple[Tensor, ...], Optional[Callable]]] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, value) -> Tensor:
        if isinstance(value, Tensor):
            value = value.data
        out = Tensor(value, self, len(self.nodes))
        self.nodes.append(((), None))
        return out

    def record(self, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
        out = Tensor._wrap(np.asarray(data), self, len(self.nodes))
        self.nodes.append((tuple(parents), vjp))
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs: Tensor) -> Optional[GradTape]:
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise TapeError("operands are traced on different tapes")
            tape = x.tape
    return tape


def _emit(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor._wrap(np.asarray(data))
    return tape.record(data, parents, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape
    need_a, need_b = a.traced, b.traced
    return _emit(out, (a, b), lambda g: (
        _unbroadcast(g, sa) if need_a else None,
        _unbroadcast(g, sb) if need_b else None,
    ))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape
    need_a, need_b = a.traced, b.traced
    return _emit(out, (a, b), lambda g: (
        _unbroadcast(g, sa) if need_a else None,
        _unbroadcast(-g, sb) if need_b else None,
    ))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    ad, bd = a.data, b.data
    need_a, need_b = a.traced, b.traced
    return _emit(out, (a, b), lambda g: (
        _unbroadcast(g * bd, ad.shape) if need_a else None,
        _unbroadcast(g * ad, bd.shape) if need_b else None,
    ))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data / b.data
    except ValueError as exc:
        raise DimensionError(f"div: cannot broadcast {a.shape} with {b.shape}") from exc
    ad, bd = a.data, b.data
    return _emit(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        ),
    )


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _emit(out, (x,), lambda g: (g * 0.5 / out,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _emit(out, (x,), lambda g: (g * (1.0 - out * out),))


def maximum(x, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)``; the floored entries pass no gradient."""
    x = as_tensor(x)
    keep = x.data >= floor
    out = np.where(keep, x.data, floor)
    return _emit(out, (x,), lambda g: (g * keep,))


def gelu(x) -> Tensor:
    """GELU, tanh approximation: ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _emit(out, (x,), vjp)


# ------------------------------------------------------------------ structure


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform") from exc
    ad, bd = a.data, b.data
    need_a, need_b = a.traced, b.traced

    if bd.ndim == 2 and ad.ndim > 2:
        # Batched activations times a weight matrix: fold the batch axes.
        def vjp_folded(g):
            ga = np.matmul(g, bd.T) if need_a else None
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if need_b else None
            return ga, gb

        return _emit(out, (a, b), vjp_folded)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if need_a else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if need_b else None
        return ga, gb

    return _emit(out, (a, b), vjp)


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _emit(out, (x,), lambda g: (g.reshape(src),))


def broadcast_to(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"broadcast_to: {src} -> {tuple(shape)}") from exc
    return _emit(out, (x,), lambda g: (_unbroadcast(g, src),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(x.shape) for x in xs)
        raise DimensionError(f"concat along {axis}: incompatible shapes {shapes}") from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _emit(out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    src = x.shape

    def vjp(g):
        full = np.zeros(src)
        np.add.at(full, key, g)
        return (full,)

    if isinstance(key, Tensor):
        raise TypeError("getitem: index with numpy arrays or slices, not tensors")

    return _emit(x.data[key], (x,), vjp)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    src = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _emit(out, (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


# -------------------------------------------------------------- composite ops


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit(out, (x,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs width {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data
    need_x, need_gain, need_bias = x.traced, gain.traced, bias.traced

    def vjp(g):
        gx = None
        if need_x:
            gxhat = g * gd
            gx = inv * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        red = tuple(range(g.ndim - 1))
        return (
            gx,
            (g * xhat).sum(axis=red) if need_gain else None,
            g.sum(axis=red) if need_bias else None,
        )

    return _emit(out, (x, gain, bias), vjp)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    b, y = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != b:
        raise DimensionError(f"cross_entropy: {b} logit rows but {labels.shape[0]} labels")
    if b and (labels.min() < 0 or labels.max() >= y):
        raise IndexError(f"cross_entropy: label outside [0, {y})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return _emit(np.asarray(loss), (logits,), vjp)


# ------------------------------------------------------------- reverse sweep


def backward(tape: GradTape, output: Tensor, wrt: Sequence[Tensor], seed=None) -> list[np.ndarray]:
    """Vector-Jacobian product of ``output`` with respect to each tensor in ``wrt``.

    ``seed`` defaults to 1 for a scalar output; for a non-scalar output it is
    the cotangent and must match ``output.shape``.  Leaves that ``output`` does
    not depend on receive zeros.
    """
    if output.tape is not tape:
        raise TapeError("output was not produced on this tape")
    for w in wrt:
        if w.tape is not tape:
            raise TapeError(f"cannot differentiate with respect to untraced value {w!r}")
    if seed is None:
        if output.data.size != 1:
            raise DimensionError(f"backward: output {output.shape} is not scalar; pass a seed")
        seed = np.ones(output.shape)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise DimensionError(f"backward: seed {seed.shape} vs output {output.shape}")

    wanted = {w.index for w in wrt}
    grads: dict[int, np.ndarray] = {output.index: seed}
    found: dict[int, np.ndarray] = {}
    for i in range(output.index, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        parents, vjp = tape.nodes[i]
        if i in wanted:
            found[i] = g
        if vjp is None:
            continue
        for parent, pg in zip(parents, vjp(g)):
            if parent.tape is not tape or pg is None:
                continue
            prev = grads.get(parent.index)
            grads[parent.index] = pg if prev is None else prev + pg
    return [np.array(found[w.index]) if w.index in found else np.zeros(w.shape) for w in wrt]


def grad(f: Callable[[Tensor], Tensor], x) -> tuple[float, np.ndarray]:
    """Value and gradient of scalar ``f`` at ``x``."""
    tape = GradTape()
    leaf = tape.watch(as_tensor(x).data)
    out = f(leaf)
    (g,) = backward(tape, out, [leaf])
    return float(out.data), g


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-5,
    n_coords: Optional[int] = 50,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between the tape gradient and central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``, which
    degrades to an absolute error for coordinates whose gradient is ~0.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    _, analytic = grad(f, x0)
    flat = x0.reshape(-1)
    if n_coords is None or n_coords >= flat.size:
        coords = np.arange(flat.size)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = rng.choice(flat.size, size=n_coords, replace=False)
    worst = 0.0
    for i in coords:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(f(Tensor(xp.reshape(x0.shape))).data)
        fm = float(f(Tensor(xm.reshape(x0.shape))).data)
        numeric = (fp - fm) / (2.0 * h)
        a = float(analytic.reshape(-1)[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst
