"""Finite-difference checks for every autodiff primitive.

All checks run in float64 with central differences (step 1e-6) against a
scalar loss sum(f(x) * r) for a fixed random projection r, so every output
element contributes to the gradient.
"""

import numpy as np
import numpy.testing as npt
import pytest

from idfcr import autodiff as ad
from idfcr.autodiff import Tensor
from idfcr.nn import Conv2d, ConvTranspose2d, GroupNorm, LayerNorm, Linear, Module
from idfcr.optim import Adam

RNG = np.random.default_rng(20260813)


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of scalar f w.r.t. array x."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gf[i] = (hi - lo) / (2.0 * eps)
    return g


def check_grads(build, arrays, rtol=1e-6, atol=1e-8):
    """build(tensors) -> output Tensor; arrays are float64 leaf values."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    r = RNG.standard_normal(out.data.shape)
    loss = ad.tsum(ad.mul(out, Tensor(r)))
    loss.backward()

    for t, a in zip(tensors, arrays):
        def scalar():
            with ad.no_grad():
                vals = [Tensor(arr) for arr in arrays]
                return float(np.sum(build(*vals).data * r))

        num = numeric_grad(scalar, a)
        assert t.grad is not None
        npt.assert_allclose(t.grad, num, rtol=rtol, atol=atol)


def arr(*shape):
    return RNG.standard_normal(shape)


class TestElementwise:
    def test_add_same_shape(self):
        check_grads(lambda a, b: ad.add(a, b), [arr(3, 4), arr(3, 4)])

    def test_add_broadcast(self):
        check_grads(lambda a, b: ad.add(a, b), [arr(2, 3, 4), arr(4)])
        check_grads(lambda a, b: ad.add(a, b), [arr(2, 3, 4), arr(3, 1)])

    def test_mul_broadcast(self):
        check_grads(lambda a, b: ad.mul(a, b), [arr(2, 5), arr(2, 1)])

    def test_pow_const(self):
        x = np.abs(arr(3, 3)) + 0.5
        check_grads(lambda a: ad.pow_const(a, 3.0), [x])
        check_grads(lambda a: ad.pow_const(a, -1.0), [x])
        check_grads(lambda a: ad.pow_const(a, 0.5), [x])

    def test_exp_log(self):
        check_grads(lambda a: ad.texp(a), [arr(4, 4) * 0.5])
        check_grads(lambda a: ad.tlog(a), [np.abs(arr(4, 4)) + 0.5])

    def test_abs(self):
        x = arr(5, 5)
        x[np.abs(x) < 1e-2] += 0.1  # keep away from the kink
        check_grads(lambda a: ad.tabs(a), [x])

    def test_sigmoid_tanh_relu(self):
        check_grads(lambda a: ad.sigmoid(a), [arr(4, 3)])
        check_grads(lambda a: ad.tanh(a), [arr(4, 3)])
        x = arr(5, 5)
        x[np.abs(x) < 1e-2] += 0.1
        check_grads(lambda a: ad.relu(a), [x])

    def test_silu_gelu(self):
        check_grads(lambda a: ad.silu(a), [arr(4, 3)])
        check_grads(lambda a: ad.gelu(a), [arr(4, 3)], rtol=1e-5)


class TestReductionsShape:
    def test_sum_axes(self):
        check_grads(lambda a: ad.tsum(a), [arr(3, 4)])
        check_grads(lambda a: ad.tsum(a, axis=1), [arr(3, 4)])
        check_grads(lambda a: ad.tsum(a, axis=(0, 2), keepdims=True), [arr(2, 3, 4)])

    def test_mean(self):
        check_grads(lambda a: ad.tmean(a), [arr(3, 4)])
        check_grads(lambda a: ad.tmean(a, axis=-1, keepdims=True), [arr(2, 5)])

    def test_reshape_transpose(self):
        check_grads(lambda a: ad.reshape(a, (4, 6)), [arr(2, 3, 4)])
        check_grads(lambda a: ad.transpose(a, (2, 0, 1)), [arr(2, 3, 4)])

    def test_roll(self):
        check_grads(lambda a: ad.roll(a, (1, -2), (1, 2)), [arr(2, 4, 5)])

    def test_concat(self):
        check_grads(lambda a, b: ad.concat([a, b], axis=1), [arr(2, 3), arr(2, 4)])

    def test_take_rows_repeated_index(self):
        idx = np.array([0, 2, 2, 1, 0])
        check_grads(lambda a: ad.take_rows(a, idx), [arr(4, 6)])

    def test_upsample_nearest2x(self):
        check_grads(lambda a: ad.upsample_nearest2x(a), [arr(2, 3, 4, 5)])


class TestMatmul:
    def test_2d(self):
        check_grads(lambda a, b: ad.matmul(a, b), [arr(3, 4), arr(4, 5)])

    def test_batched_3d(self):
        check_grads(lambda a, b: ad.matmul(a, b), [arr(2, 3, 4), arr(2, 4, 5)])

    def test_batched_vs_2d_weight(self):
        check_grads(lambda a, b: ad.matmul(a, b), [arr(2, 3, 4), arr(4, 5)])

    def test_4d_batched(self):
        check_grads(lambda a, b: ad.matmul(a, b), [arr(2, 2, 3, 4), arr(2, 2, 4, 3)])

    def test_softmax(self):
        check_grads(lambda a: ad.softmax(a, axis=-1), [arr(3, 5)])
        check_grads(lambda a: ad.softmax(a, axis=1), [arr(2, 4, 3)])


class TestConv:
    def test_conv2d_basic(self):
        check_grads(
            lambda x, w, b: ad.conv2d(x, w, b, stride=1, pad=1),
            [arr(2, 3, 6, 6), arr(4, 3, 3, 3), arr(4)],
        )

    def test_conv2d_stride2(self):
        check_grads(
            lambda x, w, b: ad.conv2d(x, w, b, stride=2, pad=1),
            [arr(1, 2, 7, 7), arr(3, 2, 3, 3), arr(3)],
        )

    def test_conv2d_1x1_nopad(self):
        check_grads(
            lambda x, w: ad.conv2d(x, w, None, stride=1, pad=0),
            [arr(2, 4, 5, 5), arr(6, 4, 1, 1)],
        )

    def test_conv_transpose2d(self):
        check_grads(
            lambda x, w, b: ad.conv_transpose2d(x, w, b, stride=2, pad=1),
            [arr(1, 3, 4, 4), arr(3, 2, 4, 4), arr(2)],
        )

    def test_conv_transpose_stride1(self):
        check_grads(
            lambda x, w: ad.conv_transpose2d(x, w, None, stride=1, pad=1),
            [arr(2, 2, 5, 5), arr(2, 3, 3, 3)],
        )

    def test_transpose_is_adjoint_of_conv(self):
        # <conv(x), y> == <x, conv_T(y)> with shared weights and zero bias
        x = arr(1, 3, 8, 8)
        w = arr(5, 3, 3, 3)
        y = arr(1, 5, 8, 8)
        # the same weight array serves both: conv reads it [Co,Ci,kh,kw],
        # transpose reads it [Ci,Co,kh,kw] over identical memory
        with ad.no_grad():
            cx = ad.conv2d(Tensor(x), Tensor(w), None, stride=1, pad=1).data
            adj = ad.conv_transpose2d(Tensor(y), Tensor(w), None, stride=1, pad=1).data
        npt.assert_allclose(np.sum(cx * y), np.sum(x * adj), rtol=1e-10)


class TestNorms:
    def test_layer_norm(self):
        check_grads(
            lambda x, g, b: ad.layer_norm(x, g, b, 1e-5),
            [arr(2, 5, 8), arr(8), arr(8)],
            rtol=1e-5, atol=1e-7,
        )

    def test_group_norm(self):
        check_grads(
            lambda x, g, b: ad.group_norm(x, 2, g, b, 1e-5),
            [arr(2, 4, 3, 3), arr(4), arr(4)],
            rtol=1e-5, atol=1e-7,
        )


class TestGraph:
    def test_diamond_reuse(self):
        # same tensor used twice: grads must accumulate
        check_grads(lambda a: ad.add(ad.mul(a, a), ad.texp(a)), [arr(3, 3)])

    def test_operator_sugar(self):
        a = Tensor(arr(2, 3), requires_grad=True)
        b = Tensor(arr(2, 3), requires_grad=True)
        out = (a * 2.0 + b - 1.0) / 2.0
        loss = ad.tsum(out * out)
        loss.backward()
        assert a.grad is not None and b.grad is not None

    def test_scalar_sub_keeps_dtype(self):
        a = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        out = 1.0 - a
        assert out.data.dtype == np.float32
        out2 = a - 0.5
        assert out2.data.dtype == np.float32

    def test_no_grad_builds_no_graph(self):
        a = Tensor(arr(2, 2), requires_grad=True)
        with ad.no_grad():
            out = ad.mul(a, a)
        assert out._parents == ()
        assert not out.requires_grad

    def test_detach(self):
        a = Tensor(arr(2, 2), requires_grad=True)
        d = a.detach()
        assert not d.requires_grad
        assert d.data is a.data or np.array_equal(d.data, a.data)


class TestLayers:
    def test_linear_fd(self):
        rng = np.random.default_rng(0)
        lin = Linear(4, 3, rng, dtype=np.float64)
        x = arr(5, 4)

        def run():
            return lin(Tensor(x))

        out = run()
        r = RNG.standard_normal(out.data.shape)
        ad.tsum(ad.mul(out, Tensor(r))).backward()

        def scalar():
            with ad.no_grad():
                return float(np.sum(run().data * r))

        num = numeric_grad(scalar, lin.weight.data)
        npt.assert_allclose(lin.weight.grad, num, rtol=1e-6, atol=1e-8)

    def test_conv_layer_shapes(self):
        rng = np.random.default_rng(0)
        c = Conv2d(3, 8, 3, rng)
        y = c(Tensor(arr(2, 3, 8, 8).astype(np.float32)))
        assert y.data.shape == (2, 8, 8, 8)
        ct = ConvTranspose2d(8, 3, 4, rng, stride=2, pad=1)
        z = ct(y)
        assert z.data.shape == (2, 3, 16, 16)

    def test_norm_layer_shapes(self):
        ln = LayerNorm(8)
        out = ln(Tensor(arr(2, 5, 8).astype(np.float32)))
        assert out.data.shape == (2, 5, 8)
        gn = GroupNorm(4, 8)
        out = gn(Tensor(arr(2, 8, 4, 4).astype(np.float32)))
        assert out.data.shape == (2, 8, 4, 4)

    def test_module_state_roundtrip(self):
        rng = np.random.default_rng(0)

        class Net(Module):
            def __init__(self):
                self.a = Linear(3, 3, rng)
                self.blocks = [Linear(3, 3, rng) for _ in range(2)]

            def forward(self, x):
                x = self.a(x)
                for b in self.blocks:
                    x = b(x)
                return x

        net = Net()
        state = net.state_dict()
        assert "a.weight" in state and "blocks.1.weight" in state
        net2 = Net()
        net2.load_state_dict(state)
        for (n1, p1), (n2, p2) in zip(net.named_parameters(), net2.named_parameters()):
            assert n1 == n2
            npt.assert_array_equal(p1.data, p2.data)
        with pytest.raises(KeyError):
            bad = dict(state)
            bad["ghost"] = np.zeros(1)
            net2.load_state_dict(bad)

    def test_freeze_blocks_updates(self):
        rng = np.random.default_rng(0)
        lin = Linear(2, 2, rng, dtype=np.float64)
        lin.freeze()
        before = lin.weight.data.copy()
        opt = Adam(lin.parameters(), lr=0.1)
        out = lin(Tensor(arr(3, 2), requires_grad=False))
        ad.tsum(ad.mul(out, out)).backward()
        opt.step()
        npt.assert_array_equal(lin.weight.data, before)


class TestAdam:
    def test_quadratic_convergence(self):
        from idfcr.autodiff import Parameter

        p = Parameter(np.array([5.0, -3.0]))
        opt = Adam([p], lr=0.2)
        for _ in range(200):
            opt.zero_grad()
            loss = ad.tsum(ad.mul(p, p))
            loss.backward()
            opt.step()
        assert np.all(np.abs(p.data) < 1e-2)

    def test_bias_correction_first_step(self):
        from idfcr.autodiff import Parameter

        p = Parameter(np.array([1.0]))
        opt = Adam([p], lr=0.1)
        p.grad = np.array([0.5])
        opt.step()
        # with bias correction the first step has magnitude ~lr regardless of g scale
        npt.assert_allclose(p.data, 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), rtol=1e-6)
