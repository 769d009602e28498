"""Gaussian branch: kernels against the closed formula, convs against loop
oracles, bandwidth gradients against finite differences."""

import numpy as np
import pytest

from uhno import tensor as T
from uhno import gaussian as G
from uhno.errors import ConfigError

from test_tensor import numerical_grad


def loop_circular_conv(x, kexp):
    """O(N*K) loop oracle: out[b,c,m] = sum_t k[c,t] x[b,c,(m+t-r) mod n]."""
    b, c, n = x.shape
    kk = kexp.shape[1]
    r = (kk - 1) // 2
    out = np.zeros_like(x)
    for t in range(kk):
        out += kexp[None, :, t, None] * np.roll(x, r - t, axis=-1)
    return out


class TestKernel:
    def test_values_match_direct_formula(self):
        sig = 1.0
        k = G.kernel_taps(np.log([sig]))[0]
        r = int(np.ceil(3 * sig))
        d = np.arange(-r, r + 1)
        raw = np.exp(-0.5 * (d / sig) ** 2)
        assert np.allclose(k, raw / raw.sum(), atol=1e-15)
        assert abs(k.sum() - 1.0) < 1e-12

    def test_support_radius(self):
        for sig in (0.5, 1.0, 2.5):
            k = G.kernel_taps(np.log([sig]))[0]
            assert k.shape[0] == 2 * int(np.ceil(3 * sig)) + 1
            assert k[0] > 0 and k[-1] > 0

    def test_mixed_group_radii_are_masked(self):
        k = G.kernel_taps(np.log([0.5, 2.5]))
        r_small, r_max = 2, 8
        assert k.shape == (2, 2 * r_max + 1)
        row = k[0]
        assert np.all(row[: r_max - r_small] == 0)
        assert np.all(row[r_max + r_small + 1:] == 0)
        assert abs(row.sum() - 1.0) < 1e-12
        assert abs(k[1].sum() - 1.0) < 1e-12

    def test_unnormalized_center_is_one(self):
        k = G.kernel_taps(np.log([1.3]), normalize=False)[0]
        r = (k.shape[0] - 1) // 2
        assert abs(k[r] - 1.0) < 1e-15
        assert k.sum() > 1.0

    def test_2d_kernel_is_outer_product_and_sums_to_one(self):
        k2 = G.build_kernel(np.log([0.9]), dims=2)[0]
        assert abs(k2.sum() - 1.0) < 1e-12
        k1 = G.kernel_taps(np.log([0.9]))[0]
        assert np.allclose(k2, np.outer(k1, k1), atol=1e-15)

    def test_kernel_node_grad_matches_fd(self):
        for normalize in (True, False):
            lam = T.Tensor(np.log([0.7, 1.4]), requires_grad=True)
            s = np.random.default_rng(50).standard_normal((2, 13))

            def run():
                k = G.gaussian_kernel_node(T.Tensor(lam.data), normalize=normalize)
                return (k.data * s[:, : k.data.shape[1]]).sum()

            k = G.gaussian_kernel_node(lam, normalize=normalize)
            T.backward(T.tsum(T.mul(k, T.constant(s[:, : k.data.shape[1]]))))
            ref = numerical_grad(run, lam.data)
            assert np.allclose(lam.grad, ref, rtol=1e-5, atol=1e-8)
            lam.zero_grad()


class TestDepthwise:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(51)
        x = rng.standard_normal((1, 4, 16))
        taps = G.kernel_taps(np.log([0.5, 1.0, 2.5, 0.8]))
        out = G.depthwise_circular(T.constant(x), T.constant(taps), 4, -1).data
        assert np.max(np.abs(out - loop_circular_conv(x, taps))) < 1e-12

    def test_constant_field_invariant_when_normalized(self):
        x = np.full((2, 3, 20), 1.7)
        taps = G.kernel_taps(np.log([1.2, 0.6, 2.0]))
        out = G.depthwise_circular(T.constant(x), T.constant(taps), 3, -1).data
        assert np.max(np.abs(out - 1.7)) < 1e-12

    def test_shift_equivariance(self):
        rng = np.random.default_rng(52)
        x = rng.standard_normal((1, 2, 24))
        taps = G.kernel_taps(np.log([1.0, 1.8]))
        a = G.depthwise_circular(T.constant(np.roll(x, 5, axis=-1)),
                                 T.constant(taps), 2, -1).data
        b = np.roll(G.depthwise_circular(T.constant(x), T.constant(taps), 2, -1).data,
                    5, axis=-1)
        assert np.max(np.abs(a - b)) < 1e-12

    def test_kernel_wider_than_extent_folds_exactly(self):
        rng = np.random.default_rng(53)
        n = 6
        x = rng.standard_normal((1, 1, n))
        taps = G.kernel_taps(np.log([2.5]))  # radius 8 > n
        out = G.depthwise_circular(T.constant(x), T.constant(taps), 1, -1).data
        # loop oracle with explicit modular indexing
        kk = taps.shape[1]
        r = (kk - 1) // 2
        ref = np.zeros(n)
        for m in range(n):
            for t in range(kk):
                ref[m] += taps[0, t] * x[0, 0, (m + t - r) % n]
        assert np.max(np.abs(out[0, 0] - ref)) < 1e-12

    def test_grads_match_fd_including_wide_kernel(self):
        rng = np.random.default_rng(54)
        for n, sig in ((12, [0.6, 1.1]), (5, [1.6, 1.9])):
            x = T.Tensor(rng.standard_normal((2, 2, n)), requires_grad=True)
            taps = T.Tensor(G.kernel_taps(np.log(sig)), requires_grad=True)
            s = rng.standard_normal((2, 2, n))

            def run():
                out = G.depthwise_circular(T.constant(x.data), T.constant(taps.data), 2, -1)
                return (out.data * s).sum()

            out = G.depthwise_circular(x, taps, 2, -1)
            T.backward(T.tsum(T.mul(out, T.constant(s))))
            for p in (x, taps):
                ref = numerical_grad(run, p.data)
                assert np.allclose(p.grad, ref, rtol=1e-6, atol=1e-9)

    def test_2d_separable_equals_full_kernel_conv(self):
        rng = np.random.default_rng(55)
        x = rng.standard_normal((1, 2, 10, 10))
        lam = np.log([0.8, 1.3])
        taps = G.kernel_taps(lam)
        a = G.depthwise_circular(T.constant(x), T.constant(taps), 2, -2)
        a = G.depthwise_circular(a, T.constant(taps), 2, -1).data
        k2 = G.build_kernel(lam, dims=2)
        kk = k2.shape[-1]
        r = (kk - 1) // 2
        ref = np.zeros_like(x)
        for ty in range(kk):
            for tx in range(kk):
                ref += k2[None, :, ty, tx, None, None] * np.roll(
                    np.roll(x, r - ty, axis=-2), r - tx, axis=-1)
        assert np.max(np.abs(a - ref)) < 1e-12


class TestBank:
    def test_forward_shape_and_fd_through_log_sigma(self):
        rng = np.random.default_rng(56)
        bank = G.GaussianScaleBank(4, 3, 1, np.random.default_rng(57))
        x = rng.standard_normal((2, 4, 16))
        out = G.gaussian_branch_forward(T.constant(x), bank)
        assert out.shape == (2, 4, 16)
        T.backward(T.tmean(T.mul(out, out)))
        lam = bank.log_sigma[0]
        assert lam.grad is not None

        def run():
            saved = lam.data.copy()
            out2 = G.gaussian_branch_forward(T.constant(x), bank)
            val = (out2.data ** 2).mean()
            assert np.array_equal(lam.data, saved)
            return val

        ref = numerical_grad(run, lam.data)
        assert np.allclose(lam.grad, ref, rtol=1e-5, atol=1e-8)

    def test_2d_groups_and_shapes(self):
        bank = G.GaussianScaleBank(8, 3, 2, np.random.default_rng(58))
        assert bank.groups == 2
        x = np.random.default_rng(59).standard_normal((1, 8, 8, 8))
        out = G.gaussian_branch_forward(T.constant(x), bank)
        assert out.shape == (1, 8, 8, 8)

    def test_indivisible_groups_rejected(self):
        with pytest.raises(ConfigError):
            G.GaussianScaleBank(6, 3, 2, np.random.default_rng(60))

    def test_param_count(self):
        c, m = 4, 3
        bank = G.GaussianScaleBank(c, m, 1, np.random.default_rng(61))
        expect = m * (c + 2 * (c * c + c)) + (m * c * c + c)
        assert bank.param_count() == expect

    def test_clamp_log_sigma(self):
        bank = G.GaussianScaleBank(4, 3, 1, np.random.default_rng(62))
        bank.log_sigma[0].data[:] = 5.0
        bank.log_sigma[1].data[:] = -7.0
        bank.clamp_log_sigma()
        assert np.all(bank.log_sigma[0].data == 2.0)
        assert np.all(bank.log_sigma[1].data == -2.0)
