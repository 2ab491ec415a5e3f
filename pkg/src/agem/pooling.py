"""Global pooling of feature maps into per-channel descriptors.

Three flavors over a (1, K, H, W) map: spatial average (SPoC), spatial max
(MAC), and the generalized mean (GeM), which interpolates between them via a
learnable exponent p (p = 1 is the average, p -> inf approaches the max). The
GeM node is differentiable with respect to both the map and p, so the exponent
can be fine-tuned along with the network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _accumulate


@dataclass
class PoolingSpec:
    kind: str = "gem"           # gem | spoc | mac
    p: float = 2.92
    p_mode: str = "shared"      # shared | per-channel
    eps: float = 1e-6

    def __post_init__(self):
        if self.kind not in ("gem", "spoc", "mac"):
            raise ValueError(f"unknown pooling kind {self.kind!r}")
        if self.p_mode not in ("shared", "per-channel"):
            raise ValueError(f"unknown p_mode {self.p_mode!r}")
        if self.kind == "gem" and self.p < 1.0:
            raise ValueError(f"gem exponent must be >= 1, got {self.p}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


def _check_map(x: Tensor) -> tuple[int, int, int]:
    if x.data.ndim != 4 or x.data.shape[0] != 1:
        raise ShapeError(f"pooling expects a (1, K, H, W) map, got {x.data.shape}")
    _, k, h, w = x.data.shape
    if h * w == 0:
        raise ShapeError("pooling: empty spatial extent")
    return k, h, w


def gem_pool(x: Tensor, p: Tensor, eps: float = 1e-6) -> Tensor:
    """Generalized-mean pool: per channel, (mean of max(x, eps)^p)^(1/p).

    ``p`` is a scalar node (shared exponent) or a length-K node (per-channel).
    The clamp at eps keeps x^p differentiable at the exact zeros ReLU
    produces; clamped positions get zero gradient.
    """
    k, h, w = _check_map(x)
    if p.data.ndim == 0:
        pk = p.data.reshape(1, 1, 1, 1)
        p_vec = p.data
    elif p.data.shape == (k,):
        pk = p.data.reshape(1, k, 1, 1)
        p_vec = p.data
    else:
        raise ShapeError(f"gem exponent must be scalar or length-{k}, "
                         f"got shape {p.data.shape}")

    m = h * w
    xc = np.maximum(x.data, eps)
    powed = xc ** pk
    s = powed.mean(axis=(2, 3)).reshape(k)            # mean of x^p per channel
    f = s ** (1.0 / p_vec)
    out = Tensor(f, x.requires_grad or p.requires_grad, "gem_pool", (x, p))

    active = x.data > eps

    def back(g):
        # dF_k/dx_i = s_k^(1/p - 1) * xc_i^(p-1) / m  on unclamped positions
        s_k = s.reshape(1, k, 1, 1)
        p_k = np.broadcast_to(pk, (1, k, 1, 1))
        gx = (g.reshape(1, k, 1, 1)
              * s_k ** (1.0 / p_k - 1.0) * xc ** (p_k - 1.0) / m) * active
        _accumulate(x, gx)
        # dF_k/dp = F_k * (-log(s_k)/p^2 + (1/p) * mean(x^p log x)/s_k)
        ds_dp = (powed * np.log(xc)).mean(axis=(2, 3)).reshape(k)
        df_dp = f * (-np.log(s) / p_vec ** 2 + ds_dp / (p_vec * s))
        gp = g * df_dp
        _accumulate(p, gp.sum() if p.data.ndim == 0 else gp)
    out._backward = back
    return out


def spoc_pool(x: Tensor) -> Tensor:
    """Spatial average per channel."""
    k, h, w = _check_map(x)
    out = Tensor(x.data.mean(axis=(2, 3)).reshape(k), x.requires_grad,
                 "spoc_pool", (x,))

    def back(g):
        _accumulate(x, np.broadcast_to(g.reshape(1, k, 1, 1) / (h * w),
                                       x.data.shape))
    out._backward = back
    return out


def mac_pool(x: Tensor) -> Tensor:
    """Spatial max per channel; gradient routes to the first argmax."""
    k, h, w = _check_map(x)
    flat = x.data.reshape(k, h * w)
    idx = flat.argmax(axis=1)
    out = Tensor(flat[np.arange(k), idx], x.requires_grad, "mac_pool", (x,))

    def back(g):
        gx = np.zeros_like(flat)
        gx[np.arange(k), idx] = g
        _accumulate(x, gx.reshape(x.data.shape))
    out._backward = back
    return out


def pool(x: Tensor, spec: PoolingSpec, p: Tensor | None = None) -> Tensor:
    """Dispatch on spec.kind; ``p`` overrides spec.p for gem (a tape node)."""
    if spec.kind == "spoc":
        return spoc_pool(x)
    if spec.kind == "mac":
        return mac_pool(x)
    if p is None:
        k = x.data.shape[1]
        init = np.full(k, spec.p) if spec.p_mode == "per-channel" else spec.p
        p = Tensor(init)
    return gem_pool(x, p, eps=spec.eps)
