"""Dense-tensor kernels with reverse-mode differentiation.

Everything downstream (attention, decoupling, the pyramid pipeline) is built
from the operations in this module.  Arrays are float64 by default (float32
is available behind ``set_default_dtype``).  Each operation is a pure
function that records a node in a dynamically built graph; ``backward`` runs
the vector-Jacobian products in reverse topological order.  The accumulation
order is fixed by construction order, so identical inputs and seeds give
bit-identical values and gradients.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

# spatial kernel footprints used anywhere in the pipeline
ALLOWED_KERNEL_SHAPES = {(1, 1), (3, 3), (3, 1), (1, 3)}

LAYER_NORM_EPS = 1e-5

_DEFAULT_DTYPE = np.dtype(np.float64)


class ContractViolation(ValueError):
    """An operation was called with arguments that violate its contract."""


def set_default_dtype(dtype) -> None:
    """Select the working precision for newly created tensors."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractViolation(f"unsupported dtype {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


class Tensor:
    """A numpy array plus the graph bookkeeping needed for backward().

    Leaf tensors created with ``requires_grad=True`` receive gradients;
    intermediate nodes are created internally by the operations below.
    Gradient buffers are never mutated in place, only rebound, so views
    returned by cheap VJPs (reshape, transpose) are safe to share.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._vjp = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents, vjp) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ContractViolation("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            for p, g in zip(node._parents, node._vjp(node.grad)):
                if p.requires_grad and g is not None:
                    p.grad = g if p.grad is None else p.grad + g

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad}{tag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the shape of its source."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._from_op(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return Tensor._from_op(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return Tensor._from_op(out, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor._from_op(a.data * s, (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ContractViolation("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(out, (a, b), vjp)


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ContractViolation("transpose2d expects a rank-2 tensor")
    return Tensor._from_op(a.data.T, (a,), lambda g: (g.T,))


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractViolation("concat of an empty list")
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        parts = []
        for k in range(len(sizes)):
            sl[axis] = slice(offsets[k], offsets[k + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return Tensor._from_op(out, tuple(tensors), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return (full,)

    return Tensor._from_op(a.data[sl], (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())
    return Tensor._from_op(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean())
    return Tensor._from_op(out, (a,), lambda g: (np.broadcast_to(g / n, a.data.shape),))


def sum_axis(a: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape),)

    return Tensor._from_op(out, (a,), vjp)


def frobenius_norm(a: Tensor) -> Tensor:
    """sqrt of the sum of squared entries; subgradient 0 at the origin."""
    nrm = float(np.sqrt((a.data ** 2).sum()))
    out = np.asarray(nrm)

    def vjp(g):
        return (g * a.data / max(nrm, 1e-300),)

    return Tensor._from_op(out, (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """Exact-erf gaussian error linear unit."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    out = x * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x * pdf),)

    return Tensor._from_op(out, (a,), vjp)


def tanh_t(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by row-max subtraction."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return Tensor._from_op(out, (a,), vjp)


def conv2d(x: Tensor, w: Tensor, dilation: int | tuple[int, int] = 1) -> Tensor:
    """2-D convolution with zero same-padding.

    x: (c_in, h, w) feature map.  w: (c_out, c_in, kh, kw) kernel whose
    spatial footprint must be one of ALLOWED_KERNEL_SHAPES.  Dilation
    spreads the taps; output spatial dims always equal the input's.
    """
    if x.ndim != 3:
        raise ContractViolation(f"conv2d input must be (c, h, w), got shape {x.shape}")
    if w.ndim != 4:
        raise ContractViolation(f"conv2d kernel must be (out_c, in_c, kh, kw), got shape {w.shape}")
    if isinstance(dilation, int):
        dilation = (dilation, dilation)
    dh, dw = int(dilation[0]), int(dilation[1])
    if dh < 1 or dw < 1:
        raise ContractViolation(f"conv2d dilation must be >= 1, got {dilation}")
    c_in, h, wd = x.shape
    out_c, k_in, kh, kw = w.shape
    if k_in != c_in:
        raise ContractViolation(f"conv2d channel mismatch: input has {c_in}, kernel expects {k_in}")
    if (kh, kw) not in ALLOWED_KERNEL_SHAPES:
        raise ContractViolation(f"conv2d kernel footprint {(kh, kw)} not in {sorted(ALLOWED_KERNEL_SHAPES)}")

    ph = (kh - 1) * dh // 2
    pw = (kw - 1) * dw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((out_c, h, wd), dtype=x.data.dtype)
    # per-tap weight slices are strided; BLAS needs them contiguous
    taps = [[np.ascontiguousarray(w.data[:, :, a, b]) for b in range(kw)] for a in range(kh)]
    for a in range(kh):
        for b in range(kw):
            patch = xp[:, a * dh: a * dh + h, b * dw: b * dw + wd].reshape(c_in, h * wd)
            out += (taps[a][b] @ patch).reshape(out_c, h, wd)

    def vjp(g):
        gflat = np.ascontiguousarray(g.reshape(out_c, h * wd))
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for a in range(kh):
            for b in range(kw):
                patch = xp[:, a * dh: a * dh + h, b * dw: b * dw + wd].reshape(c_in, h * wd)
                gw[:, :, a, b] = gflat @ patch.T
                gxp[:, a * dh: a * dh + h, b * dw: b * dw + wd] += (
                    taps[a][b].T @ gflat
                ).reshape(c_in, h, wd)
        gx = gxp[:, ph: ph + h, pw: pw + wd]
        return gx, gw

    return Tensor._from_op(out, (x, w), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise each row of a token matrix to zero mean / unit variance,
    then apply a learned per-dimension affine."""
    if x.ndim != 2:
        raise ContractViolation(f"layer_norm expects (n_tokens, d_embed), got shape {x.shape}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ContractViolation("layer_norm gain/bias must have length d_embed")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = (dxhat - m1 - xhat * m2) * inv
        ggain = (g * xhat).sum(axis=0)
        gbias = g.sum(axis=0)
        return gx, ggain, gbias

    return Tensor._from_op(out, (x, gain, bias), vjp)


def map_to_tokens(x: Tensor) -> Tensor:
    """(c, h, w) feature map -> (h*w, c) token matrix, row-major positions."""
    if x.ndim != 3:
        raise ContractViolation(f"map_to_tokens expects (c, h, w), got shape {x.shape}")
    c, h, w = x.shape
    return reshape(permute(x, (1, 2, 0)), (h * w, c))


def tokens_to_map(t: Tensor, hw: tuple[int, int]) -> Tensor:
    """(h*w, c) token matrix -> (c, h, w) feature map; inverse of map_to_tokens."""
    h, w = hw
    if t.ndim != 2 or t.shape[0] != h * w:
        raise ContractViolation(f"tokens_to_map: {t.shape} does not match spatial dims {hw}")
    return permute(reshape(t, (h, w, t.shape[1])), (2, 0, 1))


def resample_nearest(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Nearest-neighbour spatial resampling of a (c, h, w) map.

    Source index for output position j is (j * in_size) // out_size, which
    reduces to index doubling for 2x down and index halving for 2x up, the
    two cases the pyramid actually uses.
    """
    if x.ndim != 3:
        raise ContractViolation(f"resample_nearest expects (c, h, w), got shape {x.shape}")
    c, h, w = x.shape
    oh, ow = int(out_hw[0]), int(out_hw[1])
    if oh < 1 or ow < 1:
        raise ContractViolation(f"resample_nearest target dims must be >= 1, got {out_hw}")
    ih = (np.arange(oh) * h) // oh
    iw = (np.arange(ow) * w) // ow
    out = x.data[:, ih[:, None], iw[None, :]]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), ih[:, None], iw[None, :]), g)
        return (gx,)

    return Tensor._from_op(out, (x,), vjp)


def uniform_param(rng: np.random.Generator, shape, fan_in: int, name: str | None = None) -> Tensor:
    """Leaf parameter drawn from uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(float(fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class Linear:
    """Affine map on token rows: y = x @ W + b (bias optional)."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int,
                 bias: bool = True, name: str = "linear"):
        self.w = uniform_param(rng, (d_in, d_out), d_in, name=f"{name}.w")
        self.b = uniform_param(rng, (d_out,), d_in, name=f"{name}.b") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.w)
        return add(out, self.b) if self.b is not None else out

    def params(self) -> list[Tensor]:
        return [self.w] + ([self.b] if self.b is not None else [])


class LayerNorm:
    def __init__(self, d: int, name: str = "ln"):
        self.gain = Tensor(np.ones(d), requires_grad=True, name=f"{name}.gain")
        self.bias = Tensor(np.zeros(d), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)

    def params(self) -> list[Tensor]:
        return [self.gain, self.bias]


class Mlp:
    """Two affine maps with a GELU between; hidden width = round(ratio * d)."""

    def __init__(self, rng: np.random.Generator, d: int, hidden_ratio: float = 4.0,
                 name: str = "mlp"):
        if hidden_ratio <= 0:
            raise ContractViolation(f"mlp hidden_ratio must be positive, got {hidden_ratio}")
        hidden = max(1, round(hidden_ratio * d))
        self.lin1 = Linear(rng, d, hidden, name=f"{name}.lin1")
        self.lin2 = Linear(rng, hidden, d, name=f"{name}.lin2")

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(gelu(self.lin1(x)))

    def params(self) -> list[Tensor]:
        return self.lin1.params() + self.lin2.params()


def conv_param(rng: np.random.Generator, out_c: int, in_c: int, kh: int, kw: int,
               name: str | None = None) -> Tensor:
    return uniform_param(rng, (out_c, in_c, kh, kw), in_c * kh * kw, name=name)


def zero_(t: Tensor) -> None:
    """Rebind a parameter's value to zeros (used by structural degeneracy probes)."""
    t.data = np.zeros_like(t.data)
