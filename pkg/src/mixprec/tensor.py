"""Minimal reverse-mode autodiff over dense numpy tensors.

Provides the operator set needed to train small quantized convnets:
conv2d (im2col-lowered), linear, batch norm, relu, pooling, a stable
1-D softmax, cross-entropy, and momentum SGD. Gradients are recorded on
an explicit tape; replaying the tape in reverse creation order performs
backpropagation.

Precision is a process-global choice (float64 by default, float32 for
speed); gradient-check tests assume float64.
"""

from __future__ import annotations

import numpy as np

_DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


class GradientError(RuntimeError):
    """Raised when an optimizer step finds a parameter without a gradient."""


def set_default_dtype(dtype) -> None:
    """Set the global element type for newly created tensors."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported tensor dtype {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """Dense n-dimensional array with an attached gradient buffer.

    ``data`` is a numpy array in the process-global dtype. ``grad`` is
    lazily allocated with the same shape the first time a backward rule
    deposits into it. The shape is fixed at creation.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=get_default_dtype())
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def _accum(self, delta) -> None:
        """Accumulate a gradient contribution (delta may alias shared buffers)."""
        if self.grad is None:
            self.grad = np.array(delta, copy=True)
        else:
            self.grad += delta

    def _accum_owned(self, delta) -> None:
        """Accumulate a freshly allocated gradient array (takes ownership)."""
        if self.grad is None:
            self.grad = delta
        else:
            self.grad += delta

    def __add__(self, other):
        return _add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return _mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"


def _scalar_err(t):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# Tape

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of operations for one forward pass.

    Creation order is a topological order of the graph, so replaying the
    backward rules in reverse visits every node exactly once with its
    output gradient fully accumulated.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, object]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        if loss.grad is None:
            if loss.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
            loss.grad = np.ones_like(loss.data)
        for out, rule in reversed(self._nodes):
            if out.grad is not None:
                rule(out.grad)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, rule) -> None:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._nodes.append((out, rule))


def _recording(*tensors) -> bool:
    return _TAPE_STACK and any(t.requires_grad for t in tensors)


# --------------------------------------------------------------------------
# Elementwise / scalar arithmetic (same shape, or one side single-element)


def _reduce_to(shape, g):
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def _check_binary(a: Tensor, b: Tensor, opname: str):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} are not compatible")


def _add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)
    if _recording(a, b):
        def rule(g):
            if a.requires_grad:
                a._accum(_reduce_to(a.shape, g))
            if b.requires_grad:
                b._accum(_reduce_to(b.shape, g))
        _record(out, rule)
    return out


def _mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)
    if _recording(a, b):
        def rule(g):
            if a.requires_grad:
                a._accum_owned(_reduce_to(a.shape, g * b.data))
            if b.requires_grad:
                b._accum_owned(_reduce_to(b.shape, g * a.data))
        _record(out, rule)
    return out


def weighted_sum(coeffs: Tensor, terms: list[Tensor]) -> Tensor:
    """sum_i coeffs[i] * terms[i] for same-shape terms and a 1-D coefficient vector."""
    if coeffs.ndim != 1 or coeffs.size != len(terms):
        raise ShapeError(
            f"weighted_sum: {coeffs.size} coefficients for {len(terms)} terms"
        )
    base = terms[0].shape
    for t in terms[1:]:
        if t.shape != base:
            raise ShapeError(f"weighted_sum: term shapes {base} and {t.shape} differ")
    c = coeffs.data
    acc = c[0] * terms[0].data
    for i in range(1, len(terms)):
        acc += c[i] * terms[i].data
    req = coeffs.requires_grad or any(t.requires_grad for t in terms)
    out = Tensor(acc, requires_grad=req)
    if _recording(coeffs, *terms):
        def rule(g):
            if coeffs.requires_grad:
                dc = np.array([np.sum(g * t.data) for t in terms], dtype=g.dtype)
                coeffs._accum_owned(dc)
            for i, t in enumerate(terms):
                if t.requires_grad:
                    t._accum_owned(c[i] * g)
        _record(out, rule)
    return out


def dot_const(vec: Tensor, weights) -> Tensor:
    """Scalar dot product of a 1-D tensor with a constant vector."""
    w = np.asarray(weights, dtype=get_default_dtype())
    if vec.ndim != 1 or vec.shape != w.shape:
        raise ShapeError(f"dot_const: vector {vec.shape} vs constants {w.shape}")
    out = Tensor(np.dot(vec.data, w), requires_grad=vec.requires_grad)
    if _recording(vec):
        def rule(g):
            vec._accum_owned(g * w)
        _record(out, rule)
    return out


def flatten(x: Tensor) -> Tensor:
    n = x.shape[0]
    out = Tensor(x.data.reshape(n, -1), requires_grad=x.requires_grad)
    if _recording(x):
        def rule(g):
            x._accum(g.reshape(x.shape))
        _record(out, rule)
    return out


# --------------------------------------------------------------------------
# Convolution via im2col lowering


def _conv_out_extent(extent, k, stride, pad, opname, shapes):
    span = extent + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"{opname}: window k={k} stride={stride} pad={pad} does not tile "
            f"extent {extent} exactly ({shapes})"
        )
    return span // stride + 1


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    img = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = img[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            img[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols6[:, :, i, j]
    if pad:
        return img[:, :, pad : pad + h, pad : pad + w]
    return img


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIHW filters."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input and filters, got {x.shape} and {w.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} pad={pad}")
    n, cx, h, wid = x.shape
    co, cw, kh, kw = w.shape
    if cx != cw:
        raise ShapeError(
            f"conv2d: input channels {cx} != filter channels {cw} "
            f"(input {x.shape}, filters {w.shape})"
        )
    shapes = f"input {x.shape}, filters {w.shape}"
    ho = _conv_out_extent(h, kh, stride, pad, "conv2d", shapes)
    wo = _conv_out_extent(wid, kw, stride, pad, "conv2d", shapes)
    cols = _im2col(x.data, kh, kw, stride, pad)       # (N, C*kh*kw, Ho*Wo)
    wmat = w.data.reshape(co, -1)
    out_data = np.matmul(wmat, cols).reshape(n, co, ho, wo)
    out = Tensor(out_data, requires_grad=x.requires_grad or w.requires_grad)
    if _recording(x, w):
        def rule(g):
            gmat = g.reshape(n, co, ho * wo)
            if w.requires_grad:
                dw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
                w._accum_owned(dw.reshape(w.shape))
            if x.requires_grad:
                dcols = np.matmul(wmat.T, gmat)
                x._accum_owned(_col2im(dcols, x.shape, kh, kw, stride, pad))
        _record(out, rule)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w.T + b for x (N, Din), w (Dout, Din), b (Dout,)."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"linear: bad ranks x{x.shape} w{w.shape} b{b.shape}")
    if x.shape[1] != w.shape[1] or b.shape[0] != w.shape[0]:
        raise ShapeError(f"linear: shapes do not chain: x{x.shape} w{w.shape} b{b.shape}")
    out_data = x.data @ w.data.T + b.data
    out = Tensor(out_data, requires_grad=x.requires_grad or w.requires_grad or b.requires_grad)
    if _recording(x, w, b):
        def rule(g):
            if x.requires_grad:
                x._accum_owned(g @ w.data)
            if w.requires_grad:
                w._accum_owned(g.T @ x.data)
            if b.requires_grad:
                b._accum_owned(g.sum(axis=0))
        _record(out, rule)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), requires_grad=x.requires_grad)
    if _recording(x):
        mask = x.data > 0
        def rule(g):
            x._accum_owned(g * mask)
        _record(out, rule)
    return out


# --------------------------------------------------------------------------
# Pooling


def _pool_cols(x, k, stride, opname):
    n, c, h, w = x.shape
    shapes = f"input {x.shape}"
    ho = _conv_out_extent(h, k, stride, 0, opname, shapes)
    wo = _conv_out_extent(w, k, stride, 0, opname, shapes)
    cols = _im2col(x, k, k, stride, 0).reshape(n, c, k * k, ho * wo)
    return cols, ho, wo


def max_pool2d(x: Tensor, k: int, stride: int) -> Tensor:
    cols, ho, wo = _pool_cols(x.data, k, stride, "max_pool2d")
    n, c = x.shape[:2]
    idx = np.argmax(cols, axis=2)
    out_data = np.take_along_axis(cols, idx[:, :, None, :], axis=2)[:, :, 0, :]
    out = Tensor(out_data.reshape(n, c, ho, wo), requires_grad=x.requires_grad)
    if _recording(x):
        def rule(g):
            dcols = np.zeros_like(cols)
            np.put_along_axis(dcols, idx[:, :, None, :], g.reshape(n, c, 1, ho * wo), axis=2)
            x._accum_owned(_col2im(dcols.reshape(n, c * k * k, ho * wo), x.shape, k, k, stride, 0))
        _record(out, rule)
    return out


def avg_pool2d(x: Tensor, k: int, stride: int) -> Tensor:
    cols, ho, wo = _pool_cols(x.data, k, stride, "avg_pool2d")
    n, c = x.shape[:2]
    out = Tensor(cols.mean(axis=2).reshape(n, c, ho, wo), requires_grad=x.requires_grad)
    if _recording(x):
        def rule(g):
            gcol = np.broadcast_to(
                g.reshape(n, c, 1, ho * wo) / (k * k), (n, c, k * k, ho * wo)
            )
            x._accum_owned(_col2im(gcol.reshape(n, c * k * k, ho * wo), x.shape, k, k, stride, 0))
        _record(out, rule)
    return out


# --------------------------------------------------------------------------
# Batch normalization


class BNState:
    """Running statistics and constants for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=get_default_dtype())
        self.running_var = np.ones(channels, dtype=get_default_dtype())
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, gamma: Tensor, beta_shift: Tensor, state: BNState, training: bool) -> Tensor:
    """Channel-wise batch norm over (N,) or (N, H, W) reduce axes.

    Training mode normalizes with batch statistics and folds them into the
    running estimates; eval mode normalizes with the running estimates.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm: need (N,C) or (N,C,H,W) input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta_shift.shape != (c,):
        raise ShapeError(
            f"batch_norm: gamma {gamma.shape} / shift {beta_shift.shape} do not match {c} channels"
        )
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    if training:
        m = x.data.size // c
        if m < 2:
            raise ShapeError("batch_norm: training mode needs more than one value per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        mom = state.momentum
        state.running_mean += mom * (mean - state.running_mean)
        state.running_var += mom * (var * m / (m - 1) - state.running_var)
    else:
        mean = state.running_mean
        var = state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    out_data = gamma.data.reshape(bshape) * xhat + beta_shift.data.reshape(bshape)
    req = x.requires_grad or gamma.requires_grad or beta_shift.requires_grad
    out = Tensor(out_data, requires_grad=req)
    if _recording(x, gamma, beta_shift):
        def rule(g):
            if gamma.requires_grad:
                gamma._accum_owned((g * xhat).sum(axis=axes))
            if beta_shift.requires_grad:
                beta_shift._accum_owned(g.sum(axis=axes))
            if x.requires_grad:
                gx = g * gamma.data.reshape(bshape)
                if training:
                    m = x.data.size // c
                    s1 = gx.sum(axis=axes).reshape(bshape)
                    s2 = (gx * xhat).sum(axis=axes).reshape(bshape)
                    dx = (inv.reshape(bshape) / m) * (m * gx - s1 - xhat * s2)
                else:
                    dx = gx * inv.reshape(bshape)
                x._accum_owned(dx)
        _record(out, rule)
    return out


# --------------------------------------------------------------------------
# Softmax / loss


def softmax_vec(logits: Tensor) -> Tensor:
    """Numerically stable softmax of a 1-D logit vector."""
    if logits.ndim != 1 or logits.size == 0:
        raise ShapeError(f"softmax_vec: need a nonempty 1-D vector, got {logits.shape}")
    z = logits.data - logits.data.max()
    e = np.exp(z)
    p = e / e.sum()
    out = Tensor(p, requires_grad=logits.requires_grad)
    if _recording(logits):
        def rule(g):
            logits._accum_owned(p * (g - np.dot(g, p)))
        _record(out, rule)
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over a batch of (N, K) logits and integer labels."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: need (N, K) logits, got {logits.shape}")
    y = np.asarray(labels)
    n, k = logits.shape
    if y.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} rows of logits vs labels {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ShapeError("cross_entropy: labels must be integers")
    if y.min(initial=0) < 0 or y.max(initial=-1) >= k:
        bad = int(y[(y < 0) | (y >= k)][0])
        raise ValueError(f"cross_entropy: label {bad} out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float((lse - z[np.arange(n), y]).mean())
    out = Tensor(loss, requires_grad=logits.requires_grad)
    if _recording(logits):
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        def rule(g):
            d = p.copy()
            d[np.arange(n), y] -= 1.0
            logits._accum_owned(d * (g / n))
        _record(out, rule)
    return out


# --------------------------------------------------------------------------
# Optimizer


class SGD:
    """In-place momentum SGD over a fixed parameter list."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [None] * len(self.params)

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise GradientError(f"parameter {p.name or i} has no gradient")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v = self._velocity[i]
                v = g.copy() if v is None else self.momentum * v + g
                self._velocity[i] = v
                g = v
            p.data -= self.lr * g

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
