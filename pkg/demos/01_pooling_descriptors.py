"""Pooling walkthrough: how the generalized mean interpolates between
average and max pooling, and why the zero-initialized attention branch
leaves descriptors untouched.
"""
import numpy as np

from agem import (AttentionConfig, AttentionNet, PoolingSpec, StageMaps,
                  Tensor, descriptor_from_maps, gem_pool, mac_pool, spoc_pool)

rng = np.random.default_rng(0)

# a fake backbone activation: 8 channels over a 6x6 grid, nonnegative
fmap = np.abs(rng.normal(size=(1, 8, 6, 6))) + 0.05
x = Tensor(fmap)

spoc = spoc_pool(x).data
mac = mac_pool(x).data
print("channel 0: spatial mean %.4f, spatial max %.4f" % (spoc[0], mac[0]))

# sweep the exponent: p=1 is the mean, large p approaches the max
print("\n p      gem[0]   toward max")
for p in (1.0, 2.0, 2.92, 5.0, 10.0, 50.0):
    g = gem_pool(x, Tensor(np.asarray(p))).data
    frac = (g[0] - spoc[0]) / (mac[0] - spoc[0])
    print(f"{p:5.2f}   {g[0]:.4f}   {frac:5.1%}")

# every channel sits between its mean and its max, for every p
for p in (1.5, 3.0, 8.0):
    g = gem_pool(x, Tensor(np.asarray(p))).data
    assert np.all(g >= spoc - 1e-12) and np.all(g <= mac + 1e-12)
print("\nspoc <= gem(p) <= mac holds channelwise")

# the attention branch starts as an exact no-op: zero conv weights make
# every gate 0.5, the residual scales maps by 1.5, and normalization
# removes the scale
config = AttentionConfig(in_channels=6, att1_channels=(6, 4, 4, 12))
net = AttentionNet(config, zero_init=True, p_init=2.92)
spec = PoolingSpec(kind="gem", p=2.92)

early = Tensor(np.abs(rng.normal(size=(1, 6, 8, 8))) + 0.05)
late = [Tensor(np.abs(rng.normal(size=(1, 12, 4, 4))) + 0.05) for _ in range(3)]
maps = StageMaps(early, *late)

gated = descriptor_from_maps(net, maps, spec, mode="eval")
plain = descriptor_from_maps(None, maps, spec, mode="eval", attention=False)
print("zero-init attention vs plain gem: max |diff| = %.2e"
      % np.max(np.abs(gated.data - plain.data)))

# once the branch trains away from zero, the two descriptors diverge
trained = AttentionNet(config, rng=rng, zero_init=False)
gated2 = descriptor_from_maps(trained, maps, spec, mode="eval")
print("random attention vs plain gem:    max |diff| = %.2e"
      % np.max(np.abs(gated2.data - plain.data)))
