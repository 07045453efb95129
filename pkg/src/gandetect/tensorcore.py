"""Small reverse-mode autodiff core on top of numpy (float64 only).

Every operation records its parents and a closure that pushes the output
gradient back to them. ``backward`` walks the record of a single forward
pass in reverse topological order, accumulates into ``Parameter.grad`` and
then drops the record.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
NORM_EPS = 1e-12


class ContractError(ValueError):
    """Raised when an operation is called with arguments violating its contract."""


class DegenerateInputError(ValueError):
    """Raised for near-zero vectors that cannot be normalized."""


class NonFiniteError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# Random streams
# --------------------------------------------------------------------------

def _derive_id(stream_id: int, label: str) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(stream_id.to_bytes(8, "little"))
    h.update(label.encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class RngStream:
    """Seeded random stream addressed by ``(seed, stream_id)``.

    ``child(label)`` derives an independent stream; the same label always
    yields the same child. ``generator()`` returns a fresh PCG64 generator
    positioned at the start of the stream.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            v = getattr(self, name)
            if not 0 <= int(v) < 2**64:
                raise ContractError(f"{name} must be a 64-bit unsigned integer, got {v}")

    def child(self, label: str | int) -> "RngStream":
        return RngStream(self.seed, _derive_id(self.stream_id, str(label)))

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.stream_id])))


# --------------------------------------------------------------------------
# Tensor / Parameter
# --------------------------------------------------------------------------

class Tensor:
    """N-d float64 array that optionally takes part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)  # always copies
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    # arithmetic sugar; all routed through the recorded ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable leaf: a value with an accumulated gradient of the same shape."""

    __slots__ = ("trainable",)

    def __init__(self, data, name: str | None = None, trainable: bool = True):
        super().__init__(data, requires_grad=True, name=name)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _make(arr: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor._wrap(_check_finite(arr, op))
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or not g.flags.writeable else g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# Elementwise and reductions
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward, "mul")


def tsum(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    out_data = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape).copy())
        else:
            gg = np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(gg, x.shape).copy())

    return _make(np.asarray(out_data, dtype=DTYPE), (x,), backward, "sum")


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis), 1.0 / n)


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(x, 0)``; the subgradient at exactly 0 is taken as 0."""
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0.0)

    def backward(g):
        _accum(x, g * mask)

    return _make(out_data, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    out_data = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        _accum(x, g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), backward, "sigmoid")


def softplus(x: Tensor) -> Tensor:
    """``log(1 + exp(x))`` computed without overflow."""
    z = x.data
    out_data = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        e = np.exp(-np.abs(z))
        sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        _accum(x, g * sig)

    return _make(out_data, (x,), backward, "softplus")


def logsumexp(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Log-sum-exp along ``axis``; entries where ``mask`` is False are excluded."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axis).all():
            raise ContractError("logsumexp mask leaves an empty slice")
        zm = np.where(mask, z, -np.inf)
    else:
        zm = z
    m = zm.max(axis=axis, keepdims=True)
    ex = np.exp(zm - m)
    s = ex.sum(axis=axis, keepdims=True)
    out_data = np.squeeze(m + np.log(s), axis=axis)
    soft = ex / s

    def backward(g):
        _accum(x, np.expand_dims(g, axis) * soft)

    return _make(out_data, (x,), backward, "logsumexp")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out_data = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.shape))

    return _make(out_data, (x,), backward, "reshape")


def take(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing ``x[index]`` with scatter-add backward."""
    out_data = np.array(x.data[index])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        _accum(x, full)

    return _make(out_data, (x,), backward, "take")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    out_data = np.stack([t.data for t in xs], axis=axis)

    def backward(g):
        for i, t in enumerate(xs):
            _accum(t, np.take(g, i, axis=axis))

    return _make(out_data, tuple(xs), backward, "stack")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul inner dimension mismatch: {a.shape[1]} vs {b.shape[0]}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), backward, "matmul")


# --------------------------------------------------------------------------
# Layer operations
# --------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding.

    ``x`` is ``C x H x W`` or batched ``N x C x H x W``; ``kernel`` is
    ``O x C x Kh x Kw``. Output spatial size is
    ``floor((H + 2p - Kh) / stride) + 1``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1:
        raise ContractError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ContractError(f"padding must be non-negative, got {padding}")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4:
        raise ContractError(f"conv2d input must be CxHxW or NxCxHxW, got shape {x.shape}")
    if kernel.ndim != 4:
        raise ContractError(f"conv2d kernel must be OxCxKhxKw, got shape {kernel.shape}")
    n, c, h, w = xd.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise ContractError(f"conv2d channel mismatch: input has {c} channels, kernel expects {kc}")
    if kh > h + 2 * padding:
        raise ContractError(f"conv2d kernel height {kh} exceeds padded input height {h + 2 * padding}")
    if kw > w + 2 * padding:
        raise ContractError(f"conv2d kernel width {kw} exceeds padded input width {w + 2 * padding}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ContractError(f"conv2d bias must have shape ({o},), got {bias.shape}")

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1: stride, : (wo - 1) * stride + 1: stride]
    # (n, ho, wo, c, kh, kw) -> rows of patches
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = kernel.data.reshape(o, c * kh * kw)
    out2d = cols @ wmat.T
    if bias is not None:
        out2d = out2d + bias.data
    out_data = np.ascontiguousarray(out2d.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    if unbatched:
        out_data = out_data[0]

    def backward(g):
        g4 = g[None] if unbatched else g
        g2d = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        if kernel.requires_grad:
            _accum(kernel, (g2d.T @ cols).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, g2d.sum(axis=0))
        if x.requires_grad:
            dcols = (g2d @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i: i + (ho - 1) * stride + 1: stride,
                        j: j + (wo - 1) * stride + 1: stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding: padding + h, padding: padding + w] if padding else dxp
            _accum(x, dx[0] if unbatched else dx)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out_data, parents, backward, "conv2d")


def _unpad_reflect(g: np.ndarray, p: int, axis: int) -> np.ndarray:
    n = g.shape[axis] - 2 * p
    core = np.take(g, np.arange(p, p + n), axis=axis).copy()
    for k in range(1, p + 1):
        # padded index p - k mirrors source index k; p + n - 1 + k mirrors n - 1 - k
        sl = [slice(None)] * g.ndim
        sl[axis] = k
        core[tuple(sl)] += np.take(g, p - k, axis=axis)
        sl[axis] = n - 1 - k
        core[tuple(sl)] += np.take(g, p + n - 1 + k, axis=axis)
    return core


def pad2d(x: Tensor, p: int, mode: str = "reflect") -> Tensor:
    """Pad the last two axes by ``p`` with mirror (``reflect``) or zero fill."""
    if p == 0:
        return x
    h, w = x.shape[-2:]
    if mode == "reflect" and (h <= p or w <= p):
        raise ContractError(f"reflect padding {p} needs spatial dims > {p}, got {h}x{w}")
    widths = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    out_data = np.pad(x.data, widths, mode="reflect" if mode == "reflect" else "constant")

    def backward(g):
        if mode == "reflect":
            g = _unpad_reflect(g, p, x.ndim - 1)
            g = _unpad_reflect(g, p, x.ndim - 2)
        else:
            g = g[..., p:-p, p:-p]
        _accum(x, g)

    return _make(out_data, (x,), backward, "pad2d")


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel ``scale * x + shift`` for ``(N x) C x H x W`` inputs."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    c = x.shape[-3]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ContractError(f"channel_affine expects ({c},) scale/shift, got {scale.shape}, {shift.shape}")
    s = scale.data[:, None, None]
    out_data = x.data * s + shift.data[:, None, None]
    red = tuple(a for a in range(x.ndim) if a != x.ndim - 3)

    def backward(g):
        if x.requires_grad:
            _accum(x, g * s)
        if scale.requires_grad:
            _accum(scale, (g * x.data).sum(axis=red))
        if shift.requires_grad:
            _accum(shift, g.sum(axis=red))

    return _make(out_data, (x, scale, shift), backward, "channel_affine")


def global_average_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: ``C x H x W -> C`` (or ``N x C x H x W -> N x C``)."""
    if x.ndim not in (3, 4):
        raise ContractError(f"global_average_pool expects CxHxW or NxCxHxW, got {x.shape}")
    h, w = x.shape[-2:]
    if h < 1 or w < 1:
        raise ContractError("global_average_pool needs H, W >= 1")
    out_data = x.data.mean(axis=(-2, -1))

    def backward(g):
        _accum(x, np.broadcast_to(g[..., None, None] / (h * w), x.shape).copy())

    return _make(out_data, (x,), backward, "global_average_pool")


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fully-connected layer ``weight @ x + bias``; ``x`` is ``N`` or batched ``B x N``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2:
        raise ContractError(f"affine weight must be MxN, got {weight.shape}")
    m, n = weight.shape
    if x.shape[-1] != n or x.ndim not in (1, 2):
        raise ContractError(f"affine input dimension {x.shape} does not match weight columns {n}")
    if bias.shape != (m,):
        raise ContractError(f"affine bias must have shape ({m},), got {bias.shape}")
    out_data = x.data @ weight.data.T + bias.data

    def backward(g):
        g2 = g.reshape(-1, m)
        x2 = x.data.reshape(-1, n)
        if x.requires_grad:
            _accum(x, (g2 @ weight.data).reshape(x.shape))
        if weight.requires_grad:
            _accum(weight, g2.T @ x2)
        if bias.requires_grad:
            _accum(bias, g2.sum(axis=0))

    return _make(out_data, (x, weight, bias), backward, "affine")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """``x / ||x||`` along ``axis``; raises on norms at or below 1e-12."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if (norm <= NORM_EPS).any():
        raise DegenerateInputError("cannot normalize a vector with norm <= 1e-12")
    y = x.data / norm

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, (g - y * dot) / norm)

    return _make(y, (x,), backward, "l2_normalize")


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape or u.ndim != 1:
        raise ContractError(f"cosine_similarity expects equal-length vectors, got {u.shape} and {v.shape}")
    return tsum(mul(l2_normalize(u), l2_normalize(v)))


# --------------------------------------------------------------------------
# Backward pass
# --------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable Parameter's ``grad``.

    Gradients add to whatever is already stored until ``zero_grad``. The
    computation record is released afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    # leaves keep their stored grads; interior nodes start from scratch
    for node in order:
        if not isinstance(node, Parameter) and node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if not isinstance(node, Parameter):
            node._parents = ()
            node._backward = None
            if node is not loss:
                node.grad = None


def finite_difference_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-4) -> float:
    """Max relative error between the recorded gradient of ``f`` at ``x`` and central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    x0 = np.array(as_tensor(x).data, dtype=DTYPE)
    p = Parameter(x0)
    out = f(p)
    backward(out)
    analytic = p.grad.copy()

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += eps
        xm[i] -= eps
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        flat[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()
