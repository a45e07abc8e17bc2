"""Tensor engine: forward values, backward rules, and contract errors."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nftm import autodiff as ad
from nftm.autodiff import Tensor, backward
from nftm.gradcheck import finite_diff_check
from nftm.optim import ParamSet


def scalar(x):
    return Tensor(np.asarray(x, dtype=np.float64))


class TestPointwise:
    def test_sigmoid_at_zero(self):
        x = Tensor(0.0, requires_grad=True)
        y = ad.sigmoid(x)
        backward(y)
        assert y.item() == 0.5
        assert x.grad == pytest.approx(0.25, abs=1e-15)

    def test_relu_negative(self):
        x = Tensor(-3.0, requires_grad=True)
        y = ad.relu(x)
        backward(y)
        assert y.item() == 0.0
        assert x.grad == 0.0

    def test_softplus_large_argument(self):
        x = Tensor(10.0, requires_grad=True)
        y = ad.softplus(x)
        assert y.item() == pytest.approx(10.0000454, abs=1e-6)
        ps = ParamSet()
        ps.add("x", Tensor(10.0, requires_grad=True))
        err = finite_diff_check(lambda p: ad.softplus(p["x"]), ps, eps=1e-5)
        assert err <= 1e-6

    def test_log_domain_error_names_index(self):
        with pytest.raises(ValueError, match=r"index \(1,\)"):
            ad.log(Tensor([1.0, -2.0, 3.0]))

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown pointwise kind"):
            ad.pointwise("gelu", scalar(1.0))

    def test_dispatcher_matches_direct(self):
        x = Tensor([0.3, -0.7])
        for kind in ad.POINTWISE_KINDS:
            xx = Tensor([0.3, 0.7]) if kind == "log" else x
            assert np.array_equal(ad.pointwise(kind, xx).data, getattr(ad, kind if kind != "log" else "log")(xx).data)


class TestAffine:
    def test_identity(self):
        y = ad.affine(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
        assert np.array_equal(y.data, [[1.0, 2.0]])

    def test_sum_weights(self):
        y = ad.affine(Tensor([[1.0, 1.0]]), Tensor([[1.0], [1.0]]), Tensor([1.0]))
        assert y.data.item() == 3.0

    def test_gradcheck_random(self):
        rng = np.random.default_rng(7)
        ps = ParamSet()
        ps.add("W", Tensor(rng.standard_normal((3, 2)), requires_grad=True))
        ps.add("b", Tensor(rng.standard_normal(2), requires_grad=True))
        x = Tensor(rng.standard_normal((4, 3)))
        err = finite_diff_check(lambda p: ad.reduce("sum", ad.affine(x, p["W"], p["b"])), ps)
        assert err <= 1e-6

    def test_shape_mismatch_reports_both(self):
        with pytest.raises(ValueError, match=r"\(1, 3\).*\(2, 2\)"):
            ad.affine(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 2))), Tensor(np.ones(2)))


class TestConv2d:
    @pytest.mark.parametrize("mode", ["zero", "replicate", "periodic"])
    def test_delta_kernel_is_identity(self, mode):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 5, 5)))
        k = np.zeros((2, 2, 3, 3))
        k[0, 0, 1, 1] = 1.0
        k[1, 1, 1, 1] = 1.0
        y = ad.conv2d(x, Tensor(k), Tensor(np.zeros(2)), mode)
        assert np.allclose(y.data, x.data, atol=1e-15)

    def test_ones_kernel_replicate(self):
        x = Tensor(np.ones((1, 5, 5)))
        y = ad.conv2d(x, Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), "replicate")
        assert np.allclose(y.data, 9.0)

    def test_gradcheck(self):
        rng = np.random.default_rng(3)
        ps = ParamSet()
        ps.add("K", Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5, requires_grad=True))
        ps.add("b", Tensor(rng.standard_normal(3) * 0.1, requires_grad=True))
        x = Tensor(rng.standard_normal((2, 4, 4)))
        err = finite_diff_check(
            lambda p: ad.reduce("sum", ad.square(ad.conv2d(x, p["K"], p["b"], "zero"))), ps
        )
        assert err <= 1e-5

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            ad.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros(1)))

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel mismatch"):
            ad.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((3, 2, 4, 4))
        K = Tensor(rng.standard_normal((2, 2, 3, 3)))
        b = Tensor(rng.standard_normal(2))
        batched = ad.conv2d(Tensor(x), K, b, "periodic").data
        single = np.stack([ad.conv2d(Tensor(x[i]), K, b, "periodic").data for i in range(3)])
        assert np.allclose(batched, single, atol=1e-14)


class TestSteAndClamp:
    def test_ste_examples(self):
        x = Tensor([0.7, 0.49, 0.5], requires_grad=True)
        y = ad.ste_binarize(x)
        assert np.array_equal(y.data, [1.0, 0.0, 1.0])
        backward(ad.reduce("sum", y))
        assert np.array_equal(x.grad, np.ones(3))

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=32))
    @settings(max_examples=50, deadline=None)
    def test_ste_binary_and_identity_backward(self, vals):
        x = Tensor(vals, requires_grad=True)
        y = ad.ste_binarize(x)
        assert np.all((y.data == 0.0) | (y.data == 1.0))
        up = np.arange(1.0, len(vals) + 1)
        backward(ad.reduce("sum", ad.mul(y, Tensor(up))))
        assert np.array_equal(x.grad, up)

    @given(
        st.lists(st.floats(-100.0, 100.0), min_size=1, max_size=16),
        st.floats(-5.0, 0.0),
        st.floats(0.1, 5.0),
    )
    @settings(max_examples=50, deadline=None)
    def test_clamp_range_property(self, vals, lo, hi):
        y = ad.clamp_through(Tensor(vals), lo, hi)
        assert np.all(y.data >= lo) and np.all(y.data <= hi)

    def test_clamp_examples(self):
        x = Tensor([1.4, 0.3], requires_grad=True)
        y = ad.clamp_through(x, -1.0, 1.0)
        assert np.array_equal(y.data, [1.0, 0.3])
        backward(ad.reduce("sum", y))
        assert np.array_equal(x.grad, [0.0, 1.0])
        assert np.array_equal(ad.clamp_through(Tensor([-2.0, 0.0, 2.0]), -1, 1).data, [-1.0, 0.0, 1.0])

    def test_clamp_bad_range(self):
        with pytest.raises(ValueError, match="lo < hi"):
            ad.clamp_through(scalar(0.0), 1.0, 1.0)


class TestReduceAndShape:
    def test_reduce_examples(self):
        assert ad.reduce("sum", Tensor([1.0, 2.0, 3.0])).item() == 6.0
        x = Tensor([2.0, 4.0], requires_grad=True)
        m = ad.reduce("mean", x)
        backward(m)
        assert m.item() == 3.0
        assert np.array_equal(x.grad, [0.5, 0.5])

    def test_sum_backward_ones(self):
        x = Tensor(np.ones((3, 3)), requires_grad=True)
        backward(ad.reduce("sum", x))
        assert np.array_equal(x.grad, np.ones((3, 3)))

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            ad.reduce("sum", Tensor(np.zeros((0,))))

    def test_concat_narrow_reshape_roundtrip(self):
        a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        b = Tensor(np.arange(3.0).reshape(1, 3))
        cat = ad.concat([a, b], axis=0)
        back = ad.narrow(cat, 0, 0, 2)
        backward(ad.reduce("sum", ad.square(ad.reshape(back, (6,)))))
        assert np.allclose(a.grad, 2 * a.data)


class TestBackwardContract:
    def test_square_grad(self):
        x = Tensor([3.0], requires_grad=True)
        backward(ad.reduce("sum", ad.square(x)))
        assert np.array_equal(x.grad, [6.0])

    def test_accumulation_without_reset(self):
        x = Tensor([2.0], requires_grad=True)
        loss = ad.reduce("sum", ad.square(x))
        backward(loss)
        g1 = x.grad.copy()
        backward(loss)
        assert np.array_equal(x.grad, 2 * g1)

    def test_determinism_bitwise(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        W = Tensor(rng.standard_normal((4, 4)), requires_grad=True)

        def run():
            x.zero_grad()
            W.zero_grad()
            loss = ad.reduce("mean", ad.square(ad.tanh(ad.affine(x, W, Tensor(np.zeros(4))))))
            backward(loss)
            return x.grad.copy(), W.grad.copy()

        gx1, gw1 = run()
        gx2, gw2 = run()
        assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(ad.square(x))

    def test_shared_subexpression(self):
        x = Tensor([1.5], requires_grad=True)
        y = ad.square(x)
        loss = ad.reduce("sum", ad.add(y, y))
        backward(loss)
        assert np.allclose(x.grad, [2 * 2 * 1.5])


class TestFiniteGuards:
    def test_div_by_zero_errors(self):
        with pytest.raises(FloatingPointError, match="div"):
            ad.div(Tensor([1.0]), Tensor([0.0]))

    def test_exp_overflow_errors(self):
        with pytest.raises(FloatingPointError, match="exp"):
            ad.exp(Tensor([1000.0]))

    def test_tensor_rejects_nan(self):
        with pytest.raises(ValueError, match="finite"):
            Tensor([np.nan])


class TestNoGrad:
    def test_no_graph_recorded(self):
        x = Tensor([1.0], requires_grad=True)
        with ad.no_grad():
            y = ad.square(x)
        assert not y.requires_grad and y._parents == ()

    def test_broadcast_unbroadcast(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        backward(ad.reduce("sum", ad.mul(ad.add(a, b), Tensor(np.full((3, 4), 2.0)))))
        assert np.array_equal(a.grad, np.full((3, 4), 2.0))
        assert np.array_equal(b.grad, np.full(4, 6.0))
