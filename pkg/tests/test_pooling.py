"""Pooling semantics: the generalized mean interpolates between average and
max pooling, stays within those bounds, grows monotonically in p, and its
gradients (including the exponent's) survive finite-difference checks."""

import numpy as np
import pytest

from agem.pooling import (PoolingSpec, gem_pool, mac_pool, pool, spoc_pool)
from agem.tensor import ShapeError, Tensor, backward, grad_check, param, total


def random_map(rng, k=5, h=4, w=4, lo=0.01, hi=3.0):
    return rng.uniform(lo, hi, size=(1, k, h, w))


class TestLimits:
    def test_p1_is_average(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = random_map(rng)
            f = gem_pool(Tensor(x), Tensor(1.0)).data
            np.testing.assert_allclose(f, spoc_pool(Tensor(x)).data, atol=1e-10)

    def test_large_p_approaches_max(self):
        # worst case is max attained once: gem >= max * (h*w)^(-1/p), so a
        # 2x2 extent bounds the gap at 1 - 4^(-0.01) < 1.5%
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = random_map(rng, h=2, w=2)
            f = gem_pool(Tensor(x), Tensor(100.0)).data
            m = mac_pool(Tensor(x)).data
            assert np.all(np.abs(f - m) / m < 0.015)

    def test_bounds_and_monotonicity(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            x = random_map(rng)
            lo = spoc_pool(Tensor(x)).data
            hi = mac_pool(Tensor(x)).data
            prev = None
            for p in (1.0, 2.0, 3.0, 5.0, 10.0):
                f = gem_pool(Tensor(x), Tensor(p)).data
                assert np.all(f >= lo - 1e-9) and np.all(f <= hi + 1e-9)
                if prev is not None:
                    assert np.all(f >= prev - 1e-9)
                prev = f


class TestGradients:
    def test_shared_p(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            x0 = random_map(rng, lo=0.05)
            assert grad_check(lambda x, p: total(gem_pool(x, p)),
                              [x0, rng.uniform(1.5, 6.0)]) < 1e-6

    def test_per_channel_p(self):
        rng = np.random.default_rng(4)
        x0 = random_map(rng, k=3, lo=0.05)
        p0 = rng.uniform(1.5, 6.0, size=3)
        assert grad_check(lambda x, p: total(gem_pool(x, p)), [x0, p0]) < 1e-6

    def test_per_channel_matches_shared_when_equal(self):
        rng = np.random.default_rng(5)
        x = Tensor(random_map(rng, k=4))
        a = gem_pool(x, Tensor(2.92)).data
        b = gem_pool(x, Tensor(np.full(4, 2.92))).data
        np.testing.assert_allclose(a, b, rtol=1e-14)

    def test_eps_floor_masks_gradient(self):
        # entries at or below the floor contribute the floor value and no grad
        x = param(np.array([[[[0.0, 1.0], [2.0, 0.5e-6]]]]))
        f = gem_pool(x, Tensor(3.0), eps=1e-6)
        g = backward(total(f), [x])
        assert g[x][0, 0, 0, 0] == 0.0 and g[x][0, 0, 1, 1] == 0.0
        assert g[x][0, 0, 0, 1] > 0.0

    def test_mac_routes_to_first_argmax(self):
        x = param(np.array([[[[2.0, 2.0], [1.0, 0.0]]]]))
        g = backward(total(mac_pool(x)), [x])
        np.testing.assert_array_equal(g[x][0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_spoc_gradient_uniform(self):
        x = param(np.ones((1, 2, 2, 2)))
        g = backward(total(spoc_pool(x)), [x])
        np.testing.assert_allclose(g[x], 0.25)


class TestSpecAndDispatch:
    def test_spec_validation(self):
        with pytest.raises(ValueError):
            PoolingSpec(kind="blur")
        with pytest.raises(ValueError):
            PoolingSpec(kind="gem", p=0.5)
        with pytest.raises(ValueError):
            PoolingSpec(kind="gem", p_mode="weird")
        with pytest.raises(ValueError):
            PoolingSpec(kind="gem", eps=0.0)

    def test_dispatch_matches_direct_calls(self):
        rng = np.random.default_rng(6)
        x = Tensor(random_map(rng))
        np.testing.assert_array_equal(
            pool(x, PoolingSpec(kind="spoc")).data, spoc_pool(x).data)
        np.testing.assert_array_equal(
            pool(x, PoolingSpec(kind="mac")).data, mac_pool(x).data)
        np.testing.assert_array_equal(
            pool(x, PoolingSpec(kind="gem", p=3.0)).data,
            gem_pool(x, Tensor(3.0)).data)

    def test_map_shape_validation(self):
        with pytest.raises(ShapeError):
            spoc_pool(Tensor(np.ones((2, 3, 4))))
        with pytest.raises(ShapeError):
            gem_pool(Tensor(np.ones((2, 3, 4, 4))), Tensor(2.0))  # batch != 1
        with pytest.raises(ShapeError):
            mac_pool(Tensor(np.ones((1, 3, 0, 4))))

    def test_output_shape_is_channel_vector(self):
        x = Tensor(np.ones((1, 7, 3, 5)))
        assert gem_pool(x, Tensor(2.0)).data.shape == (7,)
        assert spoc_pool(x).data.shape == (7,)
        assert mac_pool(x).data.shape == (7,)
