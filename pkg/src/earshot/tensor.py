"""Dense float64 tensors with reverse-mode automatic differentiation.

Small enough to audit, big enough for the whole predictor: broadcasting
elementwise ops, batched matmul, softmax, layer norm, dilated 1-D
convolution, temperature-controlled log-sum-exp, seeded dropout, a
named parameter store with a binary checkpoint format, and a central
finite-difference gradient checker. Everything is float64; given a seed,
forward and backward are bit-identical across runs.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, FormatError, NumericError, PreconditionError, ShapeError

__all__ = [
    "Tensor",
    "ParameterStore",
    "add",
    "sub",
    "mul",
    "matmul",
    "linear",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "sum_",
    "mean",
    "square",
    "sqrt",
    "exp",
    "log",
    "sigmoid",
    "silu",
    "glu_gate",
    "softmax",
    "logsumexp",
    "layer_norm",
    "conv1d_dilated",
    "masked_fill",
    "masked_mean",
    "dropout",
    "grad_check",
    "assert_finite",
    "op_count",
    "reset_op_count",
    "save_checkpoint",
    "load_checkpoint",
]

# Forward-op counter; a cheap proxy for compute cost used by invariant tests.
_OP_COUNT = 0


def op_count() -> int:
    return _OP_COUNT


def reset_op_count() -> None:
    global _OP_COUNT
    _OP_COUNT = 0


def _as_array(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """A float64 ndarray plus the bookkeeping for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def accumulate_grad(self, g: np.ndarray) -> None:
        # Accumulation never mutates in place, so aliased arrays are safe.
        self.grad = g if self.grad is None else self.grad + g

    def backward(self) -> None:
        """Reverse-accumulate gradients from this (scalar) tensor.

        Leaf tensors with requires_grad keep accumulating across calls
        until their grad is cleared; every use of a shared parameter
        contributes additively.
        """
        if not self.requires_grad:
            raise PreconditionError("backward() on a tensor that does not require grad")
        if self.size != 1:
            raise PreconditionError(f"backward() needs a scalar output, got shape {self.shape}")
        topo = _toposort(self)
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar. Python scalars are folded into the op, never lifted
    # to graph nodes.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    global _OP_COUNT
    _OP_COUNT += 1
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    grad_parents = tuple(p for p in parents if p.requires_grad)
    if grad_parents:
        out.requires_grad = True
        out._parents = grad_parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = _as_array(b)
        out_data = a.data + c

        def bwd(g):
            a.accumulate_grad(_unbroadcast(g, a.shape))

        return _make(out_data, (a,), bwd)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -_as_array(b))
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = _as_array(b)
        out_data = a.data * c

        def bwd(g):
            a.accumulate_grad(_unbroadcast(g * c, a.shape))

        return _make(out_data, (a,), bwd)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading batch extents broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch extents incompatible: {a.shape} x {b.shape}") from exc

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b), the workhorse projection."""
    out = matmul(x, w)
    return add(out, b) if b is not None else out


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out_data = x.data.reshape(shape)

    def bwd(g):
        x.accumulate_grad(g.reshape(x.shape))

    return _make(out_data, (x,), bwd)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.transpose(x.data, axes)

    def bwd(g):
        x.accumulate_grad(np.transpose(g, inv))

    return _make(out_data, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise PreconditionError("concat of zero tensors")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _make(out_data, tuple(tensors), bwd)


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast x to a larger shape (numpy rules); grad sums back down."""
    shape = tuple(int(s) for s in shape)
    try:
        out_data = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"cannot expand {x.shape} to {shape}") from None

    def bwd(g):
        x.accumulate_grad(_unbroadcast(g, x.shape))

    return _make(out_data, (x,), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out_data = x.data[idx].copy()

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        x.accumulate_grad(gx)

    return _make(out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions


def sum_(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate_grad(np.broadcast_to(g, x.shape).copy())

    return _make(out_data, (x,), bwd)


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def square(x: Tensor) -> Tensor:
    out_data = x.data * x.data

    def bwd(g):
        x.accumulate_grad(2.0 * x.data * g)

    return _make(out_data, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    out_data = np.sqrt(x.data)

    def bwd(g):
        x.accumulate_grad(g / (2.0 * out_data))

    return _make(out_data, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def bwd(g):
        x.accumulate_grad(g * out_data)

    return _make(out_data, (x,), bwd)


def log(x: Tensor) -> Tensor:
    out_data = np.log(x.data)

    def bwd(g):
        x.accumulate_grad(g / x.data)

    return _make(out_data, (x,), bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Stable in both tails.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def bwd(g):
        x.accumulate_grad(g * s * (1.0 - s))

    return _make(s, (x,), bwd)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid(x.data)
    out_data = x.data * s

    def bwd(g):
        x.accumulate_grad(g * (s + x.data * s * (1.0 - s)))

    return _make(out_data, (x,), bwd)


def glu_gate(x: Tensor, activation: str = "sigmoid") -> Tensor:
    """Split the last axis in half and gate: first_half * act(second_half).

    activation "sigmoid" is the classic gate; "silu" gives the SiLU-gated
    variant used inside the feed-forward blocks.
    """
    d2 = x.shape[-1]
    if d2 % 2 != 0:
        raise ShapeError(f"glu_gate needs an even last extent, got {d2}")
    d = d2 // 2
    a = x.data[..., :d]
    b = x.data[..., d:]
    s = _sigmoid(b)
    if activation == "sigmoid":
        gate = s
        dgate = s * (1.0 - s)
    elif activation == "silu":
        gate = b * s
        dgate = s + b * s * (1.0 - s)
    else:
        raise ConfigError(f"unknown glu activation '{activation}'")
    out_data = a * gate

    def bwd(g):
        gx = np.empty_like(x.data)
        gx[..., :d] = g * gate
        gx[..., d:] = g * a * dgate
        x.accumulate_grad(gx)

    return _make(out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# structured ops


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along one axis."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        x.accumulate_grad(s * (g - dot))

    return _make(s, (x,), bwd)


def logsumexp(x: Tensor, axis: int = -1, beta: float = 1.0) -> Tensor:
    """(1/beta) * log sum exp(beta * x) along an axis, max-shifted."""
    if beta <= 0:
        raise PreconditionError(f"logsumexp beta must be > 0, got {beta}")
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(beta * (x.data - m))
    tot = e.sum(axis=axis, keepdims=True)
    out_data = np.squeeze(m + np.log(tot) / beta, axis=axis)
    w = e / tot

    def bwd(g):
        x.accumulate_grad(np.expand_dims(g, axis) * w)

    return _make(out_data, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise PreconditionError(f"layer_norm eps must be > 0, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = gain.data * xhat + bias.data

    def bwd(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (gh - m1 - xhat * m2))

    return _make(out_data, (x, gain, bias), bwd)


def conv1d_dilated(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None,
    dilation: int = 1,
) -> Tensor:
    """SAME-padded dilated 1-D convolution.

    x is [T, Cin], w is [K, Cin, Cout] with odd K; output is [T, Cout] for
    every (K, dilation). Borders see zero padding.
    """
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeError(f"conv1d_dilated expects x[T,Cin], w[K,Cin,Cout]; got {x.shape}, {w.shape}")
    k, cin, cout = w.shape
    if k % 2 == 0:
        raise ConfigError(f"conv kernel size must be odd, got {k}")
    if dilation < 1:
        raise ConfigError(f"conv dilation must be >= 1, got {dilation}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv input channels {x.shape[1]} != weight Cin {cin}")
    t = x.shape[0]
    pad = (k - 1) * dilation // 2
    xp = np.zeros((t + 2 * pad, cin))
    xp[pad : pad + t] = x.data
    idx = np.arange(t)[:, None] + np.arange(k)[None, :] * dilation  # [T, K]
    cols = xp[idx]  # [T, K, Cin]
    w2 = w.data.reshape(k * cin, cout)
    out_data = cols.reshape(t, k * cin) @ w2
    if bias is not None:
        out_data = out_data + bias.data

    def bwd(g):
        if w.requires_grad:
            gw = cols.reshape(t, k * cin).T @ g
            w.accumulate_grad(gw.reshape(k, cin, cout))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))
        if x.requires_grad:
            gcols = (g @ w2.T).reshape(t, k, cin)
            gxp = np.zeros_like(xp)
            np.add.at(gxp, idx.reshape(-1), gcols.reshape(-1, cin))
            x.accumulate_grad(gxp[pad : pad + t])

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out_data, parents, bwd)


def masked_fill(x: Tensor, keep: np.ndarray, fill: float) -> Tensor:
    """Replace entries where keep is False by a constant; their grad is zero."""
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
    out_data = np.where(keep, x.data, fill)

    def bwd(g):
        x.accumulate_grad(np.where(keep, g, 0.0))

    return _make(out_data, (x,), bwd)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over unmasked time rows of x[..., T, D]; mask is bool[T].

    Masked rows are multiplied by exactly zero, so the output is
    provably independent of their values.
    """
    mask = np.asarray(mask, dtype=bool)
    t = x.shape[-2]
    if mask.shape != (t,):
        raise ShapeError(f"masked_mean mask must have shape ({t},), got {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise PreconditionError("masked_mean with all positions masked")
    weighted = mul(x, mask[:, None].astype(np.float64))
    return mul(sum_(weighted, axis=-2), 1.0 / n)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: identity when train is False or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout p must be in [0,1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise PreconditionError("dropout in train mode needs an rng")
    keep = rng.random(x.shape) >= p
    scale = keep / (1.0 - p)
    out_data = x.data * scale

    def bwd(g):
        x.accumulate_grad(g * scale)

    return _make(out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# parameter store + checkpoints


class ParameterStore:
    """Named learnable tensors with deterministic registration order.

    A parameter registered once and used at N call sites accumulates
    gradients from all N sites; that is what makes weight sharing across
    streams and layers work.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ConfigError(f"parameter '{name}' already registered")
        t = data if isinstance(data, Tensor) else Tensor(data)
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_scalars(self) -> int:
        return sum(t.size for t in self._params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._params):
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            raise ConfigError(f"parameter name mismatch; missing={sorted(missing)} extra={sorted(extra)}")
        for k, v in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != v.shape:
                raise ShapeError(f"parameter '{k}' shape {arr.shape} != expected {v.shape}")
            v.data = arr.copy()


_MAGIC = b"EARS"
_VERSION = 1


def save_checkpoint(store: ParameterStore, path) -> None:
    """Write parameters: magic 'EARS', u32 version, u32 count, then per
    parameter {u16 name length, utf-8 name, u8 rank, u32 extents, f64 LE data}."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(store)))
        for name, t in store.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", t.ndim))
            f.write(struct.pack(f"<{t.ndim}I", *t.shape))
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a parameter file back into {name: array}, registration order."""
    with open(path, "rb") as f:
        blob = f.read()

    offset = 0

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise FormatError(f"truncated checkpoint: needed {n} bytes for {what} at byte {offset}")
        chunk = blob[offset : offset + n]
        offset += n
        return chunk

    if take(4, "magic") != _MAGIC:
        raise FormatError("bad checkpoint magic at byte 0")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte 4")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        extents = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        n = int(np.prod(extents)) if rank else 1
        data = np.frombuffer(take(8 * n, f"data of '{name}'"), dtype="<f8")
        out[name] = data.reshape(extents).astype(np.float64)
    if offset != len(blob):
        raise FormatError(f"trailing bytes after checkpoint payload at byte {offset}")
    return out


# ---------------------------------------------------------------------------
# verification


def assert_finite(x: Tensor | np.ndarray, context: str) -> None:
    data = x.data if isinstance(x, Tensor) else x
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values in {context}")


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_coords_per_param: int = 8,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must be a deterministic scalar-valued closure over params. For each
    parameter up to max_coords_per_param coordinates are probed with
    central differences of step h; the error at a coordinate is
    |analytic - numeric| / max(1, |numeric|).
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check objective is non-finite")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        if p.size <= max_coords_per_param:
            coords = np.arange(p.size)
        else:
            coords = rng.choice(p.size, size=max_coords_per_param, replace=False)
        for c in coords:
            idx = np.unravel_index(c, p.shape)
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = f().item()
            p.data[idx] = orig - h
            down = f().item()
            p.data[idx] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(a[idx] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
