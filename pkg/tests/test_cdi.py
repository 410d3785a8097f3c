"""Cross-level stage: axis decoupling, outer-sum recoupling against a loop
oracle, the decoupling penalty, grouped attention, and the block identity."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdtp import tensor as T
from sdtp.attention import attention_weights
from sdtp.cdi import (
    CdiBlock,
    DecoupledPair,
    DecoupleWeights,
    decouple,
    decouple_loss,
    mga,
    recouple,
    total_loss,
)
from sdtp.tensor import ContractViolation, Tensor

from oracles import naive_recouple

RNG = np.random.default_rng(777)


def make_pair(c=3, h=4, w=5, rng=RNG):
    y = Tensor(rng.standard_normal((c, h, 1)))
    x = Tensor(rng.standard_normal((c, 1, w)))
    return DecoupledPair(y=y, x=x, level=0)


class TestRecouple:
    def test_matches_loop_oracle_twenty_pairs(self):
        """Outer-sum expansion equals the scalar loop oracle bit for bit."""
        rng = np.random.default_rng(42)
        for _ in range(20):
            c, h, w = (int(rng.integers(1, 7)) for _ in range(3))
            pair = make_pair(c, h, w, rng)
            got = recouple(pair).data
            want = naive_recouple(pair.y.data, pair.x.data)
            np.testing.assert_array_equal(got, want)

    def test_shape(self):
        """(c, h, 1) + (c, 1, w) -> (c, h, w)."""
        assert recouple(make_pair(2, 3, 6)).shape == (2, 3, 6)

    def test_channel_mismatch_rejected(self):
        """Factors with different channel counts cannot recouple."""
        pair = DecoupledPair.__new__(DecoupledPair)
        pair.y = Tensor(np.zeros((2, 3, 1)))
        pair.x = Tensor(np.zeros((3, 1, 4)))
        pair.level = 0
        with pytest.raises(ContractViolation):
            recouple(pair)

    def test_gradients_split_between_factors(self):
        """Backward sums the broadcast gradient per factor correctly."""
        pair = make_pair(2, 3, 4)
        pair.y.requires_grad = True
        pair.x.requires_grad = True
        T.sum_all(recouple(pair)).backward()
        np.testing.assert_allclose(pair.y.grad, np.full((2, 3, 1), 4.0), rtol=0, atol=0)
        np.testing.assert_allclose(pair.x.grad, np.full((2, 1, 4), 3.0), rtol=0, atol=0)


class TestDecouple:
    def test_factor_shapes(self):
        """decouple yields (c, h, 1) and (c, 1, w) factors."""
        c, h, w = 4, 5, 6
        dec = DecoupleWeights(np.random.default_rng(0), c)
        pair = decouple(Tensor(RNG.standard_normal((c, h, w))), dec)
        assert pair.y.shape == (c, h, 1)
        assert pair.x.shape == (c, 1, w)

    def test_constant_logits_give_exact_mean_pooling(self):
        """Zeroed logit convs make the softmax uniform, so pooling is the
        mean along the reduced axis (checked before refinement)."""
        c, h, w = 3, 4, 5
        dec = DecoupleWeights(np.random.default_rng(0), c)
        T.zero_(dec.logit_v)
        T.zero_(dec.logit_h)
        # identity refinement: centre tap of each kernel = identity matrix
        for wt, centre in ((dec.refine_v, (1, 0)), (dec.refine_h, (0, 1))):
            wt.data[...] = 0.0
            for ch in range(c):
                wt.data[ch, ch, centre[0], centre[1]] = 1.0
        x = RNG.standard_normal((c, h, w))
        pair = decouple(Tensor(x), dec)
        np.testing.assert_allclose(pair.y.data[:, :, 0], x.mean(axis=2),
                                   rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(pair.x.data[:, 0, :], x.mean(axis=1),
                                   rtol=1e-12, atol=1e-12)

    def test_pooling_weights_are_convex(self):
        """Softmax pooling is a convex combination: pooled values stay inside
        the per-slice min/max of the input (identity refinement)."""
        c, h, w = 2, 6, 7
        dec = DecoupleWeights(np.random.default_rng(3), c)
        for wt, centre in ((dec.refine_v, (1, 0)), (dec.refine_h, (0, 1))):
            wt.data[...] = 0.0
            for ch in range(c):
                wt.data[ch, ch, centre[0], centre[1]] = 1.0
        x = RNG.standard_normal((c, h, w))
        pair = decouple(Tensor(x), dec)
        assert np.all(pair.y.data[:, :, 0] <= x.max(axis=2) + 1e-12)
        assert np.all(pair.y.data[:, :, 0] >= x.min(axis=2) - 1e-12)
        assert np.all(pair.x.data[:, 0, :] <= x.max(axis=1) + 1e-12)
        assert np.all(pair.x.data[:, 0, :] >= x.min(axis=1) - 1e-12)

    def test_channel_mismatch_rejected(self):
        """Map channels must match the decouple weights."""
        dec = DecoupleWeights(np.random.default_rng(0), 4)
        with pytest.raises(ContractViolation):
            decouple(Tensor(RNG.standard_normal((3, 4, 4))), dec)


class TestPenalty:
    def test_zero_on_exact_outer_sums(self):
        """Maps built as y + x have zero decoupling penalty for their pair."""
        rng = np.random.default_rng(9)
        maps, pairs = [], []
        for lvl, (c, h, w) in enumerate([(3, 4, 5), (3, 2, 2), (3, 6, 1)]):
            pair = make_pair(c, h, w, rng)
            pair.level = lvl
            maps.append(Tensor(pair.y.data + pair.x.data))
            pairs.append(pair)
        loss = decouple_loss(maps, pairs)
        assert abs(float(loss.data)) < 1e-12

    def test_positive_on_non_separable_map(self):
        """A generic random map is not an outer sum: penalty > 0."""
        pair = make_pair(2, 3, 3)
        m = Tensor(RNG.standard_normal((2, 3, 3)))
        assert float(decouple_loss([m], [pair]).data) > 0.1

    def test_additive_over_levels(self):
        """The penalty sums per-level Frobenius distances."""
        rng = np.random.default_rng(4)
        pairs = [make_pair(2, 3, 3, rng), make_pair(2, 2, 4, rng)]
        maps = [Tensor(rng.standard_normal((2, 3, 3))),
                Tensor(rng.standard_normal((2, 2, 4)))]
        joint = float(decouple_loss(maps, pairs).data)
        solo = sum(float(decouple_loss([m], [p]).data) for m, p in zip(maps, pairs))
        assert joint == pytest.approx(solo, abs=1e-12)

    def test_matches_direct_norm(self):
        """Penalty equals the explicitly computed Frobenius distance."""
        pair = make_pair(2, 3, 4)
        m = RNG.standard_normal((2, 3, 4))
        got = float(decouple_loss([Tensor(m)], [pair]).data)
        want = float(np.sqrt(((m - (pair.y.data + pair.x.data)) ** 2).sum()))
        assert got == pytest.approx(want, rel=1e-14)

    def test_count_mismatch_rejected(self):
        """Different numbers of maps and pairs are rejected."""
        with pytest.raises(ContractViolation):
            decouple_loss([Tensor(np.zeros((2, 2, 2)))], [])

    def test_total_loss_combination(self):
        """total = task + lambda * penalty, floats or tensors."""
        assert total_loss(2.0, 10.0, lam=0.01) == pytest.approx(2.1)
        t = total_loss(Tensor(2.0), Tensor(10.0), lam=0.5)
        assert float(t.data) == pytest.approx(7.0)
        with pytest.raises(ContractViolation):
            total_loss(1.0, 1.0, lam=-0.5)


class TestGroupedAttention:
    def test_preserves_token_counts(self):
        """Each level keeps its own token count; embed width is shared."""
        c = 4
        w = attention_weights(np.random.default_rng(0), c, 2)
        sets = [Tensor(RNG.standard_normal((n, c))) for n in (3, 5, 2)]
        outs = mga(sets, w)
        assert [o.shape for o in outs] == [(3, c), (5, c), (2, c)]

    def test_every_level_sees_every_level(self):
        """Perturbing one level's tokens changes all levels' outputs."""
        c = 4
        w = attention_weights(np.random.default_rng(1), c, 2)
        base_sets = [RNG.standard_normal((3, c)) for _ in range(3)]
        base = [o.data for o in mga([Tensor(s) for s in base_sets], w)]
        bumped = [s.copy() for s in base_sets]
        bumped[2][0, 0] += 1.0
        new = [o.data for o in mga([Tensor(s) for s in bumped], w)]
        for b, n in zip(base, new):
            assert np.abs(n - b).max() > 0

    def test_width_mismatch_rejected(self):
        """Token sets of different widths cannot be grouped."""
        w = attention_weights(np.random.default_rng(0), 4, 2)
        with pytest.raises(ContractViolation):
            mga([Tensor(RNG.standard_normal((3, 4))),
                 Tensor(RNG.standard_normal((3, 5)))], w)


class TestBlock:
    def make_maps(self, c=4):
        return {4: Tensor(RNG.standard_normal((c, 4, 6))),
                5: Tensor(RNG.standard_normal((c, 2, 3)))}

    def test_shapes_and_penalty(self):
        """Output maps keep input shapes; the penalty is a scalar."""
        blk = CdiBlock(np.random.default_rng(0), 4, n_heads=2)
        maps = self.make_maps()
        outs, dep = blk(maps)
        assert {k: v.shape for k, v in outs.items()} == {k: v.shape for k, v in maps.items()}
        assert dep.shape == ()
        assert float(dep.data) > 0

    def test_identity_when_branches_zeroed(self):
        """Zeroing refinement convs + attention/MLP output projections makes
        the block exactly the identity on every level."""
        blk = CdiBlock(np.random.default_rng(0), 4, n_heads=2)
        T.zero_(blk.dec.refine_v)
        T.zero_(blk.dec.refine_h)
        T.zero_(blk.attn_v.wo)
        T.zero_(blk.attn_h.wo)
        T.zero_(blk.mlp.lin2.w)
        T.zero_(blk.mlp.lin2.b)
        maps = self.make_maps()
        outs, _ = blk(maps)
        for lvl in maps:
            np.testing.assert_array_equal(outs[lvl].data, maps[lvl].data)

    def test_penalty_uses_raw_factors(self):
        """The reported penalty equals decouple_loss on the raw decoupled
        factors of the inputs (pre-attention)."""
        blk = CdiBlock(np.random.default_rng(0), 4, n_heads=2)
        maps = self.make_maps()
        _, dep = blk(maps)
        levels = sorted(maps)
        pairs = [decouple(maps[lvl], blk.dec, level=lvl) for lvl in levels]
        want = float(decouple_loss([maps[lvl] for lvl in levels], pairs).data)
        assert float(dep.data) == pytest.approx(want, rel=1e-14)

    def test_gradients_reach_all_params(self):
        """Backward from outputs + penalty reaches every parameter."""
        blk = CdiBlock(np.random.default_rng(0), 4, n_heads=2)
        maps = self.make_maps()
        outs, dep = blk(maps)
        loss = dep
        for o in outs.values():
            loss = T.add(loss, T.mean_all(T.mul(o, o)))
        loss.backward()
        for p in blk.params():
            assert p.grad is not None

    def test_channel_mismatch_rejected(self):
        """Maps must match the block's channel width."""
        blk = CdiBlock(np.random.default_rng(0), 4, n_heads=2)
        with pytest.raises(ContractViolation):
            blk({4: Tensor(RNG.standard_normal((5, 4, 4)))})


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6),
       st.integers(0, 2 ** 31 - 1))
def test_recouple_additivity_property(c, h, w, seed):
    """Property: recouple(ay+by, ax+bx) = recouple(a) + recouple(b)."""
    rng = np.random.default_rng(seed)
    y1, y2 = rng.standard_normal((2, c, h, 1))
    x1, x2 = rng.standard_normal((2, c, 1, w))
    joint = recouple(DecoupledPair(Tensor(y1 + y2), Tensor(x1 + x2), 0)).data
    split = (recouple(DecoupledPair(Tensor(y1), Tensor(x1), 0)).data
             + recouple(DecoupledPair(Tensor(y2), Tensor(x2), 0)).data)
    np.testing.assert_allclose(joint, split, rtol=1e-12, atol=1e-12)
