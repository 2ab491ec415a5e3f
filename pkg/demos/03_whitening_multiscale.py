"""Descriptor post-processing: discriminative whitening learned from
matched pairs, then multi-scale aggregation.
"""
import numpy as np

from agem import (DescriptorSet, MultiScaleSpec, aggregate_descriptors,
                  apply_whitening, learn_whitening, multiscale_descriptor)

rng = np.random.default_rng(1)
d = 16

# synthetic matched pairs: same scene, correlated within-pair variation
chol = np.linalg.cholesky(np.cov(rng.normal(size=(80, d)), rowvar=False)
                          + 0.4 * np.eye(d))
anchors = rng.normal(size=(3000, d))
diffs = rng.normal(size=(3000, d)) @ chol.T

ids = [f"a{i}" for i in range(3000)] + [f"b{i}" for i in range(3000)]
ds = DescriptorSet(ids, np.concatenate([anchors, anchors + diffs]))
pairs = [(f"a{i}", f"b{i}") for i in range(3000)]

raw_cov = diffs.T @ diffs / len(pairs)
print("before: pair-difference covariance, largest off-diagonal %.3f"
      % np.max(np.abs(raw_cov - np.diag(np.diag(raw_cov)))))

t = learn_whitening(ds, pairs)
wd = diffs @ t.projection.T
w_cov = wd.T @ wd / len(pairs)
print("after : largest off-diagonal %.2e, diagonal mean %.3f"
      % (np.max(np.abs(w_cov - np.diag(np.diag(w_cov)))),
         np.mean(np.diag(w_cov))))

# the transform also truncates: keep the 8 highest-variance directions
t8 = learn_whitening(ds, pairs, d_prime=8)
v = rng.normal(size=d)
print("reduced descriptor:", apply_whitening(t8, v).shape, "unit norm",
      round(float(np.linalg.norm(apply_whitening(t8, v))), 6))

# multi-scale: pool the same image at three resolutions, combine
spec = MultiScaleSpec()  # scales (1, 1/sqrt 2, 1/2), plain average
print("\nscales:", tuple(round(s, 4) for s in spec.scales))


def extract(scale):
    # stand-in for resize + backbone + pooling at the given scale
    base = np.abs(rng.normal(size=8)) + 0.1
    return base * scale


combined = multiscale_descriptor(extract, spec)
print("aggregated descriptor norm:", round(float(np.linalg.norm(combined)), 6))

# generalized-mean aggregation leans toward the strongest scale
vecs = np.stack([np.array([0.9, 0.1, 0.1]), np.array([0.1, 0.9, 0.1]),
                 np.array([0.1, 0.1, 0.9])])
vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
for p in (1.0, 3.0, 10.0):
    agg = aggregate_descriptors(
        vecs, MultiScaleSpec(scales=(1.0, 0.7, 0.5), aggregator="gem", p=p))
    print(f"gem p={p:4.1f} ->", np.round(agg, 3))
