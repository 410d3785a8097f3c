"""Autodiff core: forward values against loop oracles, backward via the
gradient checker, and structural contracts (shapes, accumulation, views)."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdtp import tensor as T
from sdtp.tensor import ContractViolation, Tensor

from oracles import naive_conv2d, naive_layer_norm, naive_matmul, naive_softmax_row

RNG = np.random.default_rng(1234)


def rand(*shape):
    return RNG.standard_normal(shape)


class TestForwardValues:
    def test_matmul_matches_triple_loop(self):
        """matmul agrees with an explicit scalar triple loop."""
        a, b = rand(5, 7), rand(7, 3)
        got = T.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(got, naive_matmul(a, b), rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("kh,kw,dil", [(1, 1, 1), (3, 3, 1), (3, 3, 2), (3, 1, 1), (1, 3, 1)])
    def test_conv2d_matches_direct_convolution(self, kh, kw, dil):
        """conv2d agrees with a direct six-deep loop, all kernel footprints."""
        x, w = rand(3, 6, 5), rand(4, 3, kh, kw)
        got = T.conv2d(Tensor(x), Tensor(w), dilation=dil).data
        np.testing.assert_allclose(got, naive_conv2d(x, w, dil), rtol=1e-12, atol=1e-12)

    def test_conv2d_preserves_spatial_dims(self):
        """Same-padding keeps (h, w) for every supported kernel."""
        x = Tensor(rand(2, 7, 4))
        for kh, kw in [(1, 1), (3, 3), (3, 1), (1, 3)]:
            out = T.conv2d(x, Tensor(rand(5, 2, kh, kw)))
            assert out.shape == (5, 7, 4)

    def test_conv2d_rejects_unsupported_kernel(self):
        """Kernel footprints outside the supported set are contract errors."""
        with pytest.raises(ContractViolation):
            T.conv2d(Tensor(rand(2, 4, 4)), Tensor(rand(2, 2, 5, 5)))

    def test_layer_norm_matches_scalar_loop(self):
        """layer_norm agrees with a per-row scalar implementation."""
        x = rand(4, 9)
        gain, bias = rand(9), rand(9)
        got = T.layer_norm(Tensor(x), Tensor(gain), Tensor(bias)).data
        np.testing.assert_allclose(got, naive_layer_norm(x, gain, bias),
                                   rtol=1e-12, atol=1e-12)

    def test_softmax_rows_matches_scalar_loop(self):
        """softmax_rows agrees with math.exp row-by-row."""
        x = rand(3, 6)
        got = T.softmax_rows(Tensor(x)).data
        want = np.stack([naive_softmax_row(r) for r in x])
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_softmax_rows_frozen_triple(self):
        """Frozen value: softmax([1, 2, 3])."""
        got = T.softmax_rows(Tensor(np.array([[1.0, 2.0, 3.0]]))).data[0]
        want = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219]
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)

    def test_softmax_handles_large_inputs(self):
        """Max subtraction keeps softmax finite at +-1e4 logits."""
        out = T.softmax_rows(Tensor(np.array([[1e4, -1e4, 0.0]]))).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out.sum(), 1.0, rtol=0, atol=1e-12)

    def test_gelu_reference_points(self):
        """Exact-erf gelu: fixed points from the defining formula."""
        from math import erf, sqrt
        xs = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
        want = np.array([x * 0.5 * (1 + erf(x / sqrt(2))) for x in xs])
        got = T.gelu(Tensor(xs)).data
        np.testing.assert_allclose(got, want, rtol=1e-15, atol=1e-15)

    def test_resample_nearest_identity_and_double(self):
        """Resampling to the same dims is the identity; 2x repeats cells."""
        x = rand(2, 3, 3)
        same = T.resample_nearest(Tensor(x), (3, 3)).data
        np.testing.assert_array_equal(same, x)
        up = T.resample_nearest(Tensor(x), (6, 6)).data
        assert up[0, 0, 0] == up[0, 1, 1] == x[0, 0, 0]
        assert up.shape == (2, 6, 6)

    def test_frobenius_norm_value(self):
        """Norm of a 3-4-5 triple is 50**0.5."""
        x = Tensor(np.array([3.0, 4.0, 5.0]))
        assert T.frobenius_norm(x).data == pytest.approx(np.sqrt(50.0), rel=1e-15)

    def test_token_map_round_trip(self):
        """(c,h,w) -> tokens -> (c,h,w) is exactly the identity."""
        x = rand(4, 3, 5)
        t = T.map_to_tokens(Tensor(x))
        assert t.shape == (15, 4)
        back = T.tokens_to_map(t, (3, 5)).data
        np.testing.assert_array_equal(back, x)


class TestBackwardStructure:
    def test_grad_accumulates_across_two_uses(self):
        """A tensor used twice gets the sum of both branch gradients."""
        x = Tensor(rand(3, 3), requires_grad=True)
        y = T.add(T.scale(x, 2.0), T.scale(x, 3.0))
        T.sum_all(y).backward()
        np.testing.assert_allclose(x.grad, np.full((3, 3), 5.0), rtol=0, atol=0)

    def test_backward_does_not_mutate_shared_grad_arrays(self):
        """narrow views rebind rather than write into the parent gradient."""
        x = Tensor(rand(4, 6), requires_grad=True)
        a = T.narrow(x, 1, 0, 3)
        b = T.narrow(x, 1, 3, 3)
        T.sum_all(T.add(T.mul(a, a), b)).backward()
        want = np.concatenate([2 * x.data[:, :3], np.ones((4, 3))], axis=1)
        np.testing.assert_allclose(x.grad, want, rtol=1e-15, atol=1e-15)

    def test_concat_narrow_round_trip_gradient(self):
        """concat backward routes slices back to each operand."""
        a = Tensor(rand(2, 3), requires_grad=True)
        b = Tensor(rand(2, 2), requires_grad=True)
        out = T.concat([a, b], axis=1)
        T.sum_all(T.mul(out, out)).backward()
        np.testing.assert_allclose(a.grad, 2 * a.data, rtol=1e-15, atol=1e-15)
        np.testing.assert_allclose(b.grad, 2 * b.data, rtol=1e-15, atol=1e-15)

    def test_backward_rejects_non_scalar_without_seed(self):
        """Calling backward() on a non-scalar without a seed grad fails."""
        x = Tensor(rand(2, 2), requires_grad=True)
        with pytest.raises(ContractViolation):
            T.scale(x, 2.0).backward()

    def test_no_grad_tensors_stay_clean(self):
        """Tensors with requires_grad=False never receive gradients."""
        x = Tensor(rand(2, 2), requires_grad=True)
        k = Tensor(rand(2, 2), requires_grad=False)
        T.sum_all(T.matmul(x, k)).backward()
        assert x.grad is not None
        assert k.grad is None

    def test_broadcast_add_routes_gradients(self):
        """add broadcasts (outer-sum style) and sums grads back per factor."""
        a = Tensor(rand(4, 1), requires_grad=True)
        b = Tensor(rand(1, 5), requires_grad=True)
        T.sum_all(T.add(a, b)).backward()
        np.testing.assert_allclose(a.grad, np.full((4, 1), 5.0), rtol=0, atol=0)
        np.testing.assert_allclose(b.grad, np.full((1, 5), 4.0), rtol=0, atol=0)

    def test_incompatible_shapes_raise(self):
        """Non-broadcastable elementwise operands raise a ValueError."""
        with pytest.raises(ValueError):
            T.add(Tensor(rand(2, 3)), Tensor(rand(3, 2)))

    def test_matmul_inner_dim_mismatch_raises(self):
        """matmul checks the contraction dimension."""
        with pytest.raises(ContractViolation):
            T.matmul(Tensor(rand(2, 3)), Tensor(rand(4, 2)))


class TestDeterminism:
    def test_repeated_backward_is_bit_identical(self):
        """The same graph built twice yields byte-equal gradients."""
        def run():
            rng = np.random.default_rng(7)
            x = Tensor(rng.standard_normal((6, 6)), requires_grad=True)
            w = Tensor(rng.standard_normal((6, 6)), requires_grad=True)
            y = T.gelu(T.matmul(x, w))
            T.frobenius_norm(y).backward()
            return x.grad.copy(), w.grad.copy()

        (xg1, wg1), (xg2, wg2) = run(), run()
        np.testing.assert_array_equal(xg1, xg2)
        np.testing.assert_array_equal(wg1, wg2)

    def test_uniform_param_seeded(self):
        """Same seed sequence gives the same initialisation."""
        a = T.uniform_param(np.random.default_rng(3), (4, 4), fan_in=4)
        b = T.uniform_param(np.random.default_rng(3), (4, 4), fan_in=4)
        np.testing.assert_array_equal(a.data, b.data)
        assert np.abs(a.data).max() <= 0.5  # 1/sqrt(4)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 31 - 1))
def test_softmax_rows_sum_to_one(n, d, seed):
    """Property: every softmax row sums to 1 and is strictly positive."""
    x = np.random.default_rng(seed).standard_normal((n, d)) * 10
    out = T.softmax_rows(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=-1), np.ones(n), rtol=0, atol=1e-12)
    assert np.all(out > 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 8), st.integers(1, 8),
       st.sampled_from([(1, 1), (3, 3), (3, 1), (1, 3)]),
       st.integers(0, 2 ** 31 - 1))
def test_conv2d_shape_preserving_property(c, h, w, kernel, seed):
    """Property: conv2d output spatial dims always equal input dims."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((c, h, w)))
    wt = Tensor(rng.standard_normal((c + 1, c, *kernel)))
    assert T.conv2d(x, wt).shape == (c + 1, h, w)
