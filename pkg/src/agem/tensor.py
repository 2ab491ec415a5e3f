"""Dense tensors plus a minimal reverse-mode tape.

Feature maps live in (batch, channel, height, width) numpy arrays; descriptors
are 1-D and losses 0-D. Every operation returns a new :class:`Tensor` node that
records its op kind, its parent nodes, and a backward closure holding whatever
values the gradient needs. The tape is therefore distributed over the nodes:
parents always precede their outputs, so a depth-first pass from the loss node
yields a valid topological order and :func:`backward` visits each node exactly
once, accumulating gradients additively at fan-out.

Computation defaults to float64 so that finite-difference validation is
meaningful; float32 can be switched on for throughput via
:func:`set_default_dtype`. Every op validates output finiteness while
``finite_checks`` is enabled (the default); a NaN/Inf raises
:class:`NumericalError` instead of propagating silently.
"""

from __future__ import annotations

import itertools

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericalError(ArithmeticError):
    """A computation produced or received non-finite values."""


_DTYPE = np.dtype(np.float64)
_CHECK_FINITE = True


def set_default_dtype(dtype) -> None:
    """Select float32 or float64 for newly created tensors."""
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    _DTYPE = dt


def default_dtype() -> np.dtype:
    return _DTYPE


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _checked(data: np.ndarray, op: str) -> np.ndarray:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericalError(f"op '{op}' produced non-finite values")
    return data


class Tensor:
    """One node of the tape: a value plus the record of how it was made."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward",
                 "id", "name")
    _ids = itertools.count()

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), name=None):
        self.data = _checked(np.asarray(data, dtype=_DTYPE), op)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = tuple(parents)
        self._backward = None
        self.id = next(Tensor._ids)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = self.name or self.op
        return f"Tensor(id={self.id}, {tag}, shape={self.data.shape})"


def param(data, name=None) -> Tensor:
    """Trainable leaf."""
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def _accumulate(node: Tensor, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.array(g, dtype=node.data.dtype)
    else:
        node.grad = node.grad + g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad, "add", (a, b))

    def back(g):
        _accumulate(a, g)
        _accumulate(b, g)
    out._backward = back
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad, "sub", (a, b))

    def back(g):
        _accumulate(a, g)
        _accumulate(b, -g)
    out._backward = back
    return out


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shaped tensors."""
    _same_shape(a, b, "hadamard")
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad,
                 "hadamard", (a, b))

    def back(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)
    out._backward = back
    return out


def affine(a: Tensor, mul: float = 1.0, shift: float = 0.0) -> Tensor:
    """mul * a + shift with scalar constants."""
    out = Tensor(mul * a.data + shift, a.requires_grad, "affine", (a,))

    def back(g):
        _accumulate(a, mul * g)
    out._backward = back
    return out


def scale(a: Tensor, c: float) -> Tensor:
    return affine(a, mul=c)


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    out = Tensor(np.maximum(a.data, 0.0), a.requires_grad, "relu", (a,))
    mask = a.data > 0

    def back(g):
        _accumulate(a, g * mask)
    out._backward = back
    return out


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y, a.requires_grad, "sigmoid", (a,))

    def back(g):
        _accumulate(a, g * y * (1.0 - y))
    out._backward = back
    return out


def sqrt(a: Tensor, floor: float = 1e-16) -> Tensor:
    """Elementwise square root of max(a, floor); gradient 0 below the floor."""
    clamped = np.maximum(a.data, floor)
    y = np.sqrt(clamped)
    out = Tensor(y, a.requires_grad, "sqrt", (a,))
    mask = a.data > floor

    def back(g):
        _accumulate(a, g * mask * (0.5 / y))
    out._backward = back
    return out


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar node."""
    out = Tensor(a.data.sum(), a.requires_grad, "total", (a,))

    def back(g):
        _accumulate(a, np.broadcast_to(g, a.data.shape))
    out._backward = back
    return out


def dot(u: Tensor, v: Tensor) -> Tensor:
    if u.data.ndim != 1 or v.data.ndim != 1:
        raise ShapeError("dot expects 1-D vectors")
    _same_shape(u, v, "dot")
    out = Tensor(u.data @ v.data, u.requires_grad or v.requires_grad, "dot", (u, v))

    def back(g):
        _accumulate(u, g * v.data)
        _accumulate(v, g * u.data)
    out._backward = back
    return out


def l2_normalize(v: Tensor) -> Tensor:
    if v.data.ndim != 1:
        raise ShapeError("l2_normalize expects a 1-D vector")
    norm = float(np.linalg.norm(v.data))
    if norm == 0.0:
        raise NumericalError("l2_normalize: zero vector")
    y = v.data / norm
    out = Tensor(y, v.requires_grad, "l2_normalize", (v,))

    def back(g):
        _accumulate(v, (g - y * (y @ g)) / norm)
    out._backward = back
    return out


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D convolution (cross-correlation), NCHW layout.

    Kernel sizes are restricted to 1 or 3 and strides to 1 or 2, which covers
    the whole attention branch. The loop runs over kernel offsets only; each
    offset is a vectorized channel contraction.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weights")
    n, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels, weights expect {cin_w}")
    if kh not in (1, 3) or kw not in (1, 3):
        raise ShapeError(f"conv2d: kernel {kh}x{kw} unsupported (1 or 3 only)")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride {stride} unsupported (1 or 2 only)")
    if padding < 0:
        raise ShapeError("conv2d: negative padding")
    if b is not None and b.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.data.shape} != ({cout},)")

    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: output {oh}x{ow} smaller than 1x1")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_data = np.zeros((n, cout, oh, ow), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            out_data += np.einsum("oc,ncyx->noyx", w.data[:, :, i, j], patch)
    if b is not None:
        out_data += b.data.reshape(1, cout, 1, 1)

    parents = (x, w) if b is None else (x, w, b)
    req = any(p.requires_grad for p in parents)
    out = Tensor(out_data, req, "conv2d", parents)

    def back(g):
        gx_p = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
                gw[:, :, i, j] = np.einsum("noyx,ncyx->oc", g, patch)
                gx_p[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    np.einsum("noyx,oc->ncyx", g, w.data[:, :, i, j])
        if padding:
            gx = gx_p[:, :, padding:padding + h, padding:padding + wd]
        else:
            gx = gx_p
        _accumulate(x, gx)
        _accumulate(w, gw)
        if b is not None:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
    out._backward = back
    return out


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Running statistics buffer (EMA with momentum 0.1)."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.running_mean = np.zeros(channels, dtype=_DTYPE)
        self.running_var = np.ones(channels, dtype=_DTYPE)
        self.eps = eps
        self.momentum = momentum


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              mode: str = "train") -> Tensor:
    """Per-channel normalization over batch and spatial axes.

    Train mode uses batch moments and updates the running statistics; eval
    mode normalizes with the stored running statistics. The biased variance is
    used for normalization, the unbiased one for the running update.
    """
    if x.data.ndim != 4:
        raise ShapeError("batchnorm expects a 4-D input")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta must have shape ({c},)")
    if h * w == 0:
        raise ShapeError("batchnorm: zero-size spatial extent")
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm: unknown mode {mode!r}")

    eps = state.eps
    axes = (0, 2, 3)
    m = n * h * w
    bshape = (1, c, 1, 1)

    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
        mom = state.momentum
        var_unbiased = var * (m / (m - 1)) if m > 1 else var
        state.running_mean = (1 - mom) * state.running_mean + mom * mu
        state.running_var = (1 - mom) * state.running_var + mom * var_unbiased
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean.reshape(bshape)) * inv_std.reshape(bshape)

    out_data = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    req = x.requires_grad or gamma.requires_grad or beta.requires_grad
    out = Tensor(out_data, req, "batchnorm", (x, gamma, beta))

    def back(g):
        _accumulate(gamma, (g * xhat).sum(axis=axes))
        _accumulate(beta, g.sum(axis=axes))
        gxhat = g * gamma.data.reshape(bshape)
        if mode == "train":
            gx = inv_std.reshape(bshape) * (
                gxhat
                - gxhat.mean(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).mean(axis=axes).reshape(bshape))
        else:
            gx = gxhat * inv_std.reshape(bshape)
        _accumulate(x, gx)
    out._backward = back
    return out


# ---------------------------------------------------------------------------
# reverse pass


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params=None) -> dict[Tensor, np.ndarray]:
    """Reverse pass from a scalar loss.

    Returns a map from node to gradient for every node that requires a
    gradient. Parameters listed in ``params`` but unreachable from the loss
    get an explicit zero gradient.
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")

    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(_checked(node.grad, f"backward[{node.op}]"))

    grads = {n: n.grad for n in order if n.requires_grad and n.grad is not None}
    if params is not None:
        for p in params:
            if p not in grads:
                p.grad = np.zeros_like(p.data)
                grads[p] = p.grad
    return grads


def grad_check(build, inputs, step: float = 1e-5) -> float:
    """Max mixed error of tape gradients vs central finite differences.

    ``build(*tensors)`` must construct a scalar loss from the given leaves.
    Per entry the score is |analytic - numeric| / (max(|a|, |n|) + 1e-3);
    the absolute floor keeps finite-difference noise on near-zero entries
    from masquerading as gradient bugs. Meaningful in float64 only. Reports
    a number and never raises: any exception during evaluation yields inf.
    """
    try:
        leaves = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
                  for x in inputs]
        grads = backward(build(*leaves), params=leaves)
        worst = 0.0
        for leaf in leaves:
            analytic = np.asarray(grads[leaf], dtype=np.float64)
            numeric = np.zeros_like(leaf.data)
            flat = leaf.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = float(build(*leaves).data)
                flat[i] = orig - step
                f_minus = float(build(*leaves).data)
                flat[i] = orig
                numeric.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * step)
            denom = np.maximum(np.abs(analytic), np.abs(numeric)) + 1e-3
            worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
        return worst
    except Exception:
        return float("inf")
