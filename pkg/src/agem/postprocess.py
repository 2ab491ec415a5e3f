"""Descriptor finalization: whitening learned from matched pairs, and
multi-scale aggregation.

Whitening follows the projection-learning recipe built on labeled pairs:
the intra-pair difference covariance C_S is inverted through its symmetric
square root (eigenvalue floor 1e-8 of the largest, so near-singular pair
sets stay usable), then a PCA rotation of the whitened descriptor scatter
is stacked on top. The stored transform is a single affine map
d -> projection @ (d - mean), re-normalized to unit length on application.

C_S is the MEAN of pair-difference outer products, i.e. an honest
covariance, so whitened held-out differences come out with identity
covariance rather than identity/n.

Multi-scale descriptors are extracted per scale (default 1, 1/sqrt(2), 1/2),
unit-normalized, aggregated elementwise (average, or generalized mean with
the learned exponent), and re-normalized. Aggregation happens before
whitening so the generalized mean only ever sees nonnegative pooled values.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import storage
from .tensor import NumericalError, ShapeError


def l2n(v: np.ndarray) -> np.ndarray:
    """Unit-normalize a vector; zero vectors are a hard error."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0.0:
        raise NumericalError("cannot L2-normalize a zero or non-finite vector")
    return v / n


@dataclass
class WhiteningTransform:
    mean: np.ndarray
    projection: np.ndarray  # D' x D

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.projection = np.asarray(self.projection, dtype=np.float64)
        if self.projection.ndim != 2 or self.projection.shape[1] != self.mean.shape[0]:
            raise ShapeError(f"projection {self.projection.shape} does not act on "
                             f"dim-{self.mean.shape[0]} descriptors")
        if not np.all(np.isfinite(self.projection)) or not np.all(np.isfinite(self.mean)):
            raise NumericalError("whitening transform contains non-finite values")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def out_dim(self) -> int:
        return self.projection.shape[0]

    def project(self, d: np.ndarray) -> np.ndarray:
        """The linear part alone (no re-normalization); used for covariance checks."""
        d = np.asarray(d, dtype=np.float64)
        if d.shape[-1] != self.dim:
            raise ShapeError(f"descriptor dim {d.shape[-1]} != transform dim {self.dim}")
        return (d - self.mean) @ self.projection.T


def learn_whitening(descriptors: storage.DescriptorSet,
                    matching_pairs: list[tuple[str, str]],
                    d_prime: int | None = None,
                    floor_ratio: float = 1e-8) -> WhiteningTransform:
    """Fit the discriminative whitening from matched descriptor pairs.

    Pair order within a pair is irrelevant (differences enter through outer
    products). Eigenvalues of the pair covariance below floor_ratio times
    the largest are clamped to that floor; a covariance with no positive
    eigenvalue at all (identical pairs, or none) is an error.
    """
    if not matching_pairs:
        raise ValueError("learn_whitening needs at least one matching pair")
    dim = descriptors.dim
    diffs = np.stack([descriptors.row(a) - descriptors.row(b)
                      for a, b in matching_pairs])
    c_s = diffs.T @ diffs / len(matching_pairs)
    evals, evecs = np.linalg.eigh(c_s)
    lam_max = float(evals[-1])
    if not lam_max > 0.0:
        raise ValueError("pair-difference covariance is rank-deficient: largest "
                         f"eigenvalue {lam_max:.3e}; matching pairs carry no "
                         "variation to whiten")
    floor = floor_ratio * lam_max
    inv_sqrt = evecs @ np.diag(1.0 / np.sqrt(np.maximum(evals, floor))) @ evecs.T

    mean = descriptors.vectors.mean(axis=0)
    whitened = (descriptors.vectors - mean) @ inv_sqrt.T
    if whitened.shape[0] > 1:
        scatter = np.cov(whitened, rowvar=False)
    else:
        scatter = np.eye(dim)
    s_evals, s_evecs = np.linalg.eigh(np.atleast_2d(scatter))
    rotation = s_evecs[:, ::-1].T  # rows are principal axes, variance descending
    for row in rotation:           # deterministic sign: dominant entry positive
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    if d_prime is None:
        d_prime = dim
    if not 1 <= d_prime <= dim:
        raise ValueError(f"d_prime must lie in [1, {dim}], got {d_prime}")
    return WhiteningTransform(mean=mean, projection=rotation[:d_prime] @ inv_sqrt)


def apply_whitening(t: WhiteningTransform, d: np.ndarray) -> np.ndarray:
    """Center, project, unit-normalize. d equal to the mean is an error."""
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    if d.shape[0] != t.dim:
        raise ShapeError(f"descriptor dim {d.shape[0]} != transform dim {t.dim}")
    return l2n(t.projection @ (d - t.mean))


def save_whitening(t: WhiteningTransform, directory: str,
                   extra: dict | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    storage.write_tensor(os.path.join(directory, "mean.agtf"), t.mean)
    storage.write_tensor(os.path.join(directory, "projection.agtf"), t.projection)
    manifest = {"kind": "whitening", "dim": t.dim, "out_dim": t.out_dim,
                "mean": "mean.agtf", "projection": "projection.agtf"}
    if extra:
        manifest.update(extra)
    storage.write_json(os.path.join(directory, "manifest.json"), manifest)


def load_whitening(directory: str) -> WhiteningTransform:
    manifest = storage.read_json(os.path.join(directory, "manifest.json"))
    if manifest.get("kind") != "whitening":
        raise storage.FormatError(f"{directory}: manifest is not a whitening transform")
    mean = storage.read_tensor(os.path.join(directory, manifest["mean"]))
    proj = storage.read_tensor(os.path.join(directory, manifest["projection"]))
    t = WhiteningTransform(mean=mean, projection=proj)
    if t.dim != manifest["dim"] or t.out_dim != manifest["out_dim"]:
        raise storage.FormatError("whitening manifest dims disagree with tensors")
    return t


# ---------------------------------------------------------------------------
# multi-scale aggregation

DEFAULT_SCALES = (1.0, 1.0 / np.sqrt(2.0), 0.5)


@dataclass
class MultiScaleSpec:
    scales: tuple[float, ...] = DEFAULT_SCALES
    aggregator: str = "average"
    p: float = 3.0

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError(f"scales must be positive, got {self.scales}")
        if list(self.scales) != sorted(self.scales, reverse=True):
            raise ValueError(f"scales must be descending, got {self.scales}")
        if self.aggregator not in ("average", "gem"):
            raise ValueError(f"aggregator must be average or gem, got {self.aggregator!r}")
        if self.aggregator == "gem" and self.p < 1.0:
            raise ValueError(f"gem aggregation needs p >= 1, got {self.p}")


def aggregate_descriptors(descs: np.ndarray, spec: MultiScaleSpec) -> np.ndarray:
    """Elementwise combine per-scale unit descriptors, then re-normalize."""
    descs = np.asarray(descs, dtype=np.float64)
    if descs.ndim != 2:
        raise ShapeError(f"expected scales x dim matrix, got shape {descs.shape}")
    if descs.shape[0] != len(spec.scales):
        raise ShapeError(f"{descs.shape[0]} descriptors for {len(spec.scales)} scales")
    if spec.aggregator == "average" or spec.p == 1.0:
        combined = descs.mean(axis=0)
    else:
        if np.any(descs < 0):
            raise ValueError("generalized-mean aggregation needs nonnegative "
                             "descriptors; aggregate before whitening")
        combined = np.mean(descs ** spec.p, axis=0) ** (1.0 / spec.p)
    return l2n(combined)


def multiscale_descriptor(extract, spec: MultiScaleSpec) -> np.ndarray:
    """Run `extract(scale)` at every scale and aggregate.

    Any single failure aborts the whole call; there is no partial result.
    Each per-scale descriptor is unit-normalized before aggregation.
    """
    per_scale = []
    for s in spec.scales:
        d = np.asarray(extract(s), dtype=np.float64).reshape(-1)
        per_scale.append(l2n(d))
    mat = np.stack(per_scale)
    if mat.shape[0] != len(spec.scales):
        raise ShapeError("extractor returned wrong number of descriptors")
    return aggregate_descriptors(mat, spec)


def resize_nearest(image: np.ndarray, scale: float) -> np.ndarray:
    """Nearest-neighbor rescale of a CHW map; the toy stand-in for image
    pyramids (full-scale pipelines receive per-scale maps precomputed)."""
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    c, h, w = image.shape
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    ys = np.minimum((np.arange(nh) / scale).astype(int), h - 1)
    xs = np.minimum((np.arange(nw) / scale).astype(int), w - 1)
    return image[:, ys][:, :, xs]
