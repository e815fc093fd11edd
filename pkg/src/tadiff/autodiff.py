"""Dense float64 tensors with a reverse-mode automatic differentiation tape.

Every operation records a backward closure on the output tensor; calling
``backward`` on a scalar walks the tape in reverse topological order and
accumulates gradients into ``grad`` buffers.  Accumulation order is fixed
by the (deterministic) graph traversal, so repeated runs with identical
inputs produce bit-identical gradients.

Data is always a C-contiguous ``np.float64`` array.  There is no shape
broadcasting between tensors; ops that need per-channel or per-row
structure (``linear``, ``row_affine``, ``layer_norm``, the convolutions)
handle it internally.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class GraphError(RuntimeError):
    """Autodiff tape misuse (e.g. backward on a non-scalar)."""


_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording inside its block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_f64(data) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``grad`` for every requires_grad tensor reachable from self.

        Self must be a scalar (size 1).  Leaf gradients accumulate across
        repeated backward calls; call ``zero_grad`` between steps.
        """
        if self.data.size != 1:
            raise GraphError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        for node in topo:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
        self.grad = self.grad + np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- convenience operators -------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    def __radd__(self, other):
        return add_scalar(self, float(other))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad += g


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape {a.shape} does not match {b.shape}")


# -- elementwise ----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        _accum(x, g * c)

    return _make(x.data * c, (x,), backward)


def add_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        _accum(x, g)

    return _make(x.data + c, (x,), backward)


def add_const_array(x: Tensor, arr: np.ndarray) -> Tensor:
    """x plus a constant array (no gradient flows into ``arr``)."""
    arr = _as_f64(arr)
    if x.shape != arr.shape:
        raise ShapeError(f"add_const_array: shape {x.shape} does not match {arr.shape}")

    def backward(g):
        _accum(x, g)

    return _make(x.data + arr, (x,), backward)


def mul_const_array(x: Tensor, arr: np.ndarray) -> Tensor:
    """Elementwise product with a constant array (mask / weight)."""
    arr = _as_f64(arr)
    if x.shape != arr.shape:
        raise ShapeError(f"mul_const_array: shape {x.shape} does not match {arr.shape}")

    def backward(g):
        _accum(x, g * arr)

    return _make(x.data * arr, (x,), backward)


def pow_const(x: Tensor, p: float) -> Tensor:
    p = float(p)
    y = x.data ** p

    def backward(g):
        _accum(x, g * p * x.data ** (p - 1.0))

    return _make(y, (x,), backward)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)

    def backward(g):
        _accum(x, g * (x.data > 0.0))

    return _make(y, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_np(x.data)

    def backward(g):
        _accum(x, g * y * (1.0 - y))

    return _make(y, (x,), backward)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: Tensor) -> Tensor:
    y = np.logaddexp(0.0, x.data)

    def backward(g):
        _accum(x, g * _sigmoid_np(x.data))

    return _make(y, (x,), backward)


def smooth_l1_sum(diff: Tensor) -> Tensor:
    """Sum of the Huber-style penalty 0.5*d^2 (|d|<1) else |d|-0.5."""
    d = diff.data
    absd = np.abs(d)
    quad = absd < 1.0
    vals = np.where(quad, 0.5 * d * d, absd - 0.5)

    def backward(g):
        _accum(diff, g * np.clip(d, -1.0, 1.0))

    return _make(np.array(vals.sum()), (diff,), backward)


# -- reductions -----------------------------------------------------------

def tsum(x: Tensor) -> Tensor:
    def backward(g):
        _accum(x, np.full_like(x.data, float(g.reshape(()))))

    return _make(np.array(x.data.sum()), (x,), backward)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        _accum(x, np.full_like(x.data, float(g.reshape(())) / n))

    return _make(np.array(x.data.mean()), (x,), backward)


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape {a.shape} does not match {b.shape}")

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b with b broadcast over rows (b shape [out])."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: shape {x.shape} does not match {w.shape}")
    y = x.data @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match {w.shape}")
        y = y + b.data

    def backward(g):
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        if b is not None:
            _accum(b, g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, backward)


def row_affine(x: Tensor, gain: Tensor, shift: Tensor) -> Tensor:
    """Per-channel scale and shift of a [T, C] tensor; gain/shift shape [C]."""
    if x.data.ndim != 2 or gain.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeError(
            f"row_affine: x {x.shape}, gain {gain.shape}, shift {shift.shape}"
        )

    def backward(g):
        _accum(x, g * gain.data)
        _accum(gain, (g * x.data).sum(axis=0))
        _accum(shift, g.sum(axis=0))

    return _make(x.data * gain.data + shift.data, (x, gain, shift), backward)


def embed_row(table: Tensor, idx: int) -> Tensor:
    """Select row ``idx`` of a [N, E] table as a [1, E] tensor."""
    if table.data.ndim != 2:
        raise ShapeError(f"embed_row: table must be 2-D, got {table.shape}")
    if not 0 <= idx < table.shape[0]:
        raise ShapeError(f"embed_row: index {idx} out of range for {table.shape}")

    def backward(g):
        if table.requires_grad:
            table.grad[idx] += g[0]

    return _make(table.data[idx : idx + 1].copy(), (table,), backward)


def select_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        if x.requires_grad:
            np.add.at(x.grad, idx, g)

    return _make(x.data[idx], (x,), backward)


# -- normalization / softmax ------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization of a [T, C] tensor followed by a [C] affine."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    if x.data.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(
            f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def backward(g):
        _accum(gain, (g * xhat).sum(axis=0))
        _accum(bias, g.sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=1, keepdims=True)
            m2 = (gx * xhat).mean(axis=1, keepdims=True)
            x.grad += (gx - m1 - xhat * m2) * inv

    return _make(y, (x, gain, bias), backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            x.grad += (g - dot) * y

    return _make(y, (x,), backward)


# -- temporal convolutions ---------------------------------------------------

def _conv_geometry(t: int, k: int, stride: int, padding: int) -> int:
    if k % 2 != 1:
        raise ShapeError(f"conv1d: kernel size {k} must be odd")
    if stride < 1:
        raise ShapeError(f"conv1d: stride {stride} must be >= 1")
    if padding < 0:
        raise ShapeError(f"conv1d: padding {padding} must be >= 0")
    if k > t + 2 * padding:
        raise ShapeError(
            f"conv1d: kernel {k} longer than padded input {t} + 2*{padding}"
        )
    return (t + 2 * padding - k) // stride + 1


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Temporal convolution of x [T, C_in] with kernel [k, C_in, C_out]."""
    if x.data.ndim != 2 or kernel.data.ndim != 3:
        raise ShapeError(f"conv1d: x {x.shape}, kernel {kernel.shape}")
    t, c_in = x.shape
    k, kc_in, c_out = kernel.shape
    if kc_in != c_in:
        raise ShapeError(f"conv1d: shape {x.shape} does not match kernel {kernel.shape}")
    t_out = _conv_geometry(t, k, stride, padding)

    if padding:
        xp = np.zeros((t + 2 * padding, c_in))
        xp[padding : padding + t] = x.data
    else:
        xp = x.data
    # im2col: rows are the flattened k x C_in patches; overlapping windows
    # make the reshape a strided view, which would knock the two matmuls
    # below off the BLAS fast path, so force a contiguous copy
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, c_in))[::stride, 0]
    patches = np.ascontiguousarray(win.reshape(t_out, k * c_in))
    wmat = kernel.data.reshape(k * c_in, c_out)
    y = patches @ wmat
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"conv1d: bias {bias.shape} does not match {c_out}")
        y = y + bias.data

    def backward(g):
        if kernel.requires_grad:
            kernel.grad += (patches.T @ g).reshape(k, c_in, c_out)
        if bias is not None:
            _accum(bias, g.sum(axis=0))
        if x.requires_grad:
            dpatch = g @ wmat.T
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[j : j + stride * t_out : stride] += dpatch[:, j * c_in : (j + 1) * c_in]
            x.grad += dxp[padding : padding + t] if padding else dxp

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(y, parents, backward)


def depthwise_conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel temporal convolution: x [T, C], kernel [k, C]."""
    if x.data.ndim != 2 or kernel.data.ndim != 2 or kernel.shape[1] != x.shape[1]:
        raise ShapeError(
            f"depthwise_conv1d: shape {x.shape} does not match kernel {kernel.shape}"
        )
    t, c = x.shape
    k = kernel.shape[0]
    t_out = _conv_geometry(t, k, stride, padding)

    if padding:
        xp = np.zeros((t + 2 * padding, c))
        xp[padding : padding + t] = x.data
    else:
        xp = x.data
    y = np.zeros((t_out, c))
    for j in range(k):
        y += kernel.data[j] * xp[j : j + stride * t_out : stride]
    if bias is not None:
        if bias.shape != (c,):
            raise ShapeError(f"depthwise_conv1d: bias {bias.shape} does not match {c}")
        y = y + bias.data

    def backward(g):
        if kernel.requires_grad:
            for j in range(k):
                kernel.grad[j] += (g * xp[j : j + stride * t_out : stride]).sum(axis=0)
        if bias is not None:
            _accum(bias, g.sum(axis=0))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[j : j + stride * t_out : stride] += g * kernel.data[j]
            x.grad += dxp[padding : padding + t] if padding else dxp

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(y, parents, backward)


# -- windowed self-attention primitives --------------------------------------

_NEG_INF = -1e30


def local_qk_scores(q: Tensor, k: Tensor, window: int) -> Tensor:
    """Banded attention scores [T, W]: each row t scores keys t-W//2 .. t+W//2.

    Out-of-range key slots are filled with a large negative constant so a
    following softmax assigns them zero weight.
    """
    if window % 2 != 1 or window < 1:
        raise ShapeError(f"local_qk_scores: window {window} must be odd and >= 1")
    _check_same_shape(q, k, "local_qk_scores")
    t, c = q.shape
    half = window // 2
    kp = np.zeros((t + window - 1, c))
    kp[half : half + t] = k.data
    kwin = np.lib.stride_tricks.sliding_window_view(kp, (window, c))[:, 0]
    scores = np.einsum("tc,twc->tw", q.data, kwin)
    valid = _band_valid_mask(t, window)
    scores[~valid] = _NEG_INF

    def backward(g):
        g = np.where(valid, g, 0.0)
        if q.requires_grad:
            q.grad += np.einsum("tw,twc->tc", g, kwin)
        if k.requires_grad:
            dkp = np.zeros_like(kp)
            for w in range(window):
                dkp[w : w + t] += g[:, w : w + 1] * q.data
            k.grad += dkp[half : half + t]

    return _make(scores, (q, k), backward)


def local_weighted_sum(attn: Tensor, v: Tensor, window: int) -> Tensor:
    """Apply banded attention weights [T, W] to values [T, C]."""
    if window % 2 != 1 or window < 1:
        raise ShapeError(f"local_weighted_sum: window {window} must be odd and >= 1")
    t, c = v.shape
    if attn.shape != (t, window):
        raise ShapeError(
            f"local_weighted_sum: attn {attn.shape} does not match ({t}, {window})"
        )
    half = window // 2
    vp = np.zeros((t + window - 1, c))
    vp[half : half + t] = v.data
    vwin = np.lib.stride_tricks.sliding_window_view(vp, (window, c))[:, 0]
    y = np.einsum("tw,twc->tc", attn.data, vwin)

    def backward(g):
        if attn.requires_grad:
            attn.grad += np.einsum("tc,twc->tw", g, vwin)
        if v.requires_grad:
            dvp = np.zeros_like(vp)
            for w in range(window):
                dvp[w : w + t] += attn.data[:, w : w + 1] * g
            v.grad += dvp[half : half + t]

    return _make(y, (attn, v), backward)


def _band_valid_mask(t: int, window: int) -> np.ndarray:
    half = window // 2
    pos = np.arange(t)[:, None] + np.arange(window)[None, :] - half
    return (pos >= 0) & (pos < t)
