"""Attention in its three equivalent forms, the gate, and the MAE combination."""

import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mae import attention as A
from mae.analysis import entropy
from mae.attention import ExpertId, MaeLayerParams, enumerate_experts
from mae.gradcheck import check_gradients
from mae.tensor import DimensionError, Tensor, mul, no_grad, sum_


def make_layer(seed=0, d=8, h=4, t=1, **kw):
    return MaeLayerParams(d, h, t, rng=np.random.default_rng(seed), gate_hidden=kw.pop("gate_hidden", 16), **kw)


def rand_x(seed, *shape):
    return Tensor(np.random.default_rng(seed + 100).normal(size=shape))


def fwd(fn, *args, **kw):
    with no_grad():
        return fn(*args, **kw).data


class TestExperts:
    def test_counts(self):
        assert len(enumerate_experts(8, 1)) == 8
        assert len(enumerate_experts(8, 2)) == 28

    def test_h2_t1(self):
        assert enumerate_experts(2, 1) == [ExpertId((0,)), ExpertId((1,))]

    def test_lexicographic_order(self):
        assert [e.dropped for e in enumerate_experts(4, 2)] == list(combinations(range(4), 2))

    @pytest.mark.parametrize("h,t", [(4, 0), (4, 4), (1, 1)])
    def test_invalid_drop_count(self, h, t):
        with pytest.raises(ValueError):
            enumerate_experts(h, t)

    def test_expert_id_must_be_sorted(self):
        with pytest.raises(ValueError):
            ExpertId((2, 1))

    def test_t1_experts_share_h_minus_2_heads(self):
        h = 8
        experts = enumerate_experts(h, 1)
        for a, b in combinations(experts, 2):
            assert len(set(a.kept(h)) & set(b.kept(h))) == h - 2

    def test_w_blocks_stack_to_w(self):
        layer = make_layer()
        w = layer.assembled_w().data
        rows = layer.d_head
        for i, block in enumerate(layer.w):
            assert np.array_equal(w[i * rows:(i + 1) * rows], block.data)


class TestHeadForward:
    def test_single_position_attends_to_itself(self):
        layer = make_layer()
        x = rand_x(0, 1, 8)
        expected = x.data @ layer.v[2].data @ layer.w[2].data
        np.testing.assert_allclose(fwd(A.head_forward, x, 2, layer), expected, atol=1e-14)

    def test_causal_first_row_matches_single_position(self):
        layer = make_layer()
        x = rand_x(1, 5, 8)
        causal = np.tril(np.ones((5, 5), dtype=bool))
        full = fwd(A.head_forward, x, 1, layer, causal)
        alone = fwd(A.head_forward, Tensor(x.data[:1]), 1, layer)
        np.testing.assert_allclose(full[0], alone[0], atol=1e-14)

    def test_scaled_dot_product(self):
        layer = make_layer()
        x = rand_x(2, 3, 8).data
        q, k, v = (p[0].data for p in (layer.q, layer.k, layer.v))
        s = (x @ q) @ (x @ k).T / math.sqrt(layer.d_head)
        p = np.exp(s - s.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        expected = p @ x @ v @ layer.w[0].data
        np.testing.assert_allclose(fwd(A.head_forward, Tensor(x), 0, layer), expected, atol=1e-13)

    def test_gradient_on_q(self):
        layer = make_layer()
        x = rand_x(3, 3, 8)
        probe = np.random.default_rng(9).normal(size=(3, 8))
        err = check_gradients(lambda: sum_(mul(A.head_forward(x, 0, layer), probe)), [layer.q[0]])
        assert max(err.values()) < 1e-4

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            A.head_forward(rand_x(0, 3, 5), 0, make_layer())


class TestEquivalentForms:
    @pytest.mark.parametrize("seed", range(20))
    def test_concat_equals_sum(self, seed):
        layer = make_layer(seed, d=16, h=8)
        x = rand_x(seed, 2, 5, 16)
        diff = np.abs(fwd(A.multihead_concat, x, layer) - fwd(A.multihead_sum, x, layer)).max()
        assert diff < 1e-10

    def test_single_contributing_head(self):
        # h=1 admits no expert (t < h), so silence the second head of a pair
        layer = make_layer(h=2)
        x = rand_x(0, 4, 8)
        layer.w[1].data[:] = 0
        np.testing.assert_allclose(fwd(A.multihead_sum, x, layer), fwd(A.head_forward, x, 0, layer), atol=1e-14)
        np.testing.assert_allclose(fwd(A.multihead_concat, x, layer), fwd(A.head_forward, x, 0, layer), atol=1e-14)

    def test_zero_w_gives_zero(self):
        layer = make_layer()
        for w in layer.w:
            w.data[:] = 0
        assert not fwd(A.multihead_concat, rand_x(0, 3, 8), layer).any()

    def test_doubling_a_block_adds_its_head(self):
        layer = make_layer()
        x = rand_x(4, 3, 8)
        before = fwd(A.multihead_sum, x, layer)
        h2 = fwd(A.head_forward, x, 2, layer)
        layer.w[2].data *= 2
        np.testing.assert_allclose(fwd(A.multihead_sum, x, layer), before + h2, atol=1e-13)

    def test_expert_h2_t1(self):
        layer = make_layer(h=2)
        x = rand_x(5, 3, 8)
        np.testing.assert_allclose(
            fwd(A.expert_forward, x, ExpertId((0,)), layer), 2 * fwd(A.head_forward, x, 1, layer), atol=1e-14
        )

    @pytest.mark.parametrize("h,t", [(8, 1), (8, 2), (4, 2)])
    def test_expert_mean_is_multihead(self, h, t):
        layer = make_layer(1, d=16, h=h, t=t)
        x = rand_x(1, 4, 16)
        mean = np.mean([fwd(A.expert_forward, x, e, layer) for e in layer.experts], axis=0)
        assert np.abs(mean - fwd(A.multihead_sum, x, layer)).max() < 1e-10

    def test_invalid_expert(self):
        with pytest.raises(ValueError):
            A.expert_forward(rand_x(0, 2, 8), ExpertId((1, 2)), make_layer(t=1))

    def test_batched_heads_match_reference(self):
        layer = make_layer()
        x = rand_x(6, 2, 3, 8)
        heads = fwd(A.head_outputs, x, layer)
        for i in range(layer.h):
            np.testing.assert_allclose(heads[:, i], fwd(A.head_forward, x, i, layer), atol=1e-14)

    def test_mixed_attention_matches_combine_heads(self):
        layer = make_layer()
        x = rand_x(7, 3, 5, 8)
        coef = np.random.default_rng(0).random((3, 5, 4))
        a = fwd(A.mixed_attention, x, layer, coef)
        b = A.combine_heads(Tensor(fwd(A.head_outputs, x, layer)), coef).data
        np.testing.assert_allclose(a, b, atol=1e-13)


class TestGate:
    def test_zero_output_weights_give_uniform(self):
        layer = make_layer(h=8, d=16)
        layer.gate.w2.data[:] = 0
        g = fwd(A.gate_forward, rand_x(0, 2, 5, 16), layer.gate, False)
        np.testing.assert_allclose(g, 1 / 8, atol=1e-15)
        assert entropy(g[0]) == pytest.approx(math.log(8), abs=1e-12)

    def test_position_permutation_invariance(self):
        layer = make_layer()
        x = rand_x(1, 6, 8)
        perm = np.random.default_rng(0).permutation(6)
        a = fwd(A.gate_forward, x, layer.gate, False)
        b = fwd(A.gate_forward, Tensor(x.data[perm]), layer.gate, False)
        np.testing.assert_allclose(a, b, atol=1e-14)

    def test_padding_is_ignored(self):
        layer = make_layer()
        x = rand_x(2, 2, 6, 8)
        pad = np.ones((2, 6), dtype=bool)
        pad[0, 4:] = False
        full = fwd(A.gate_forward, x, layer.gate, False, pad)
        short = fwd(A.gate_forward, Tensor(x.data[:1, :4]), layer.gate, False)
        np.testing.assert_allclose(full[0], short[0], atol=1e-14)

    def test_recent_pooling_window(self):
        layer = make_layer(pooling="recent", window=3)
        x = rand_x(3, 7, 8)
        a = fwd(A.gate_forward, x, layer.gate, False)
        b = fwd(A.gate_forward, Tensor(x.data[4:]), layer.gate, False)
        np.testing.assert_allclose(a, b, atol=1e-14)

    def test_causal_gate_ignores_future(self):
        layer = make_layer(causal=True)
        x = rand_x(4, 1, 6, 8)
        y = x.data.copy()
        y[0, 4:] += 5.0
        a = fwd(A.gate_forward, x, layer.gate, False, causal=True)
        b = fwd(A.gate_forward, Tensor(y), layer.gate, False, causal=True)
        np.testing.assert_allclose(a[0, :4], b[0, :4], atol=1e-14)
        assert not np.allclose(a[0, 4:], b[0, 4:])

    def test_output_dimension_is_expert_count(self):
        layer = make_layer(h=8, d=16, t=2)
        assert fwd(A.gate_forward, rand_x(0, 3, 16), layer.gate, False).shape == (28,)

    def test_mlp_zero_weights(self):
        x = Tensor(np.ones((2, 3)))
        b2 = Tensor(np.array([0.5, -1.0]))
        out = A.tanh_mlp_forward(x, Tensor(np.zeros((3, 4))), Tensor(np.zeros(4)), Tensor(np.zeros((4, 2))), b2)
        np.testing.assert_array_equal(out.data, [[0.5, -1.0]] * 2)

    def test_mlp_eval_mode_disables_dropout(self):
        layer = make_layer()
        g = layer.gate
        x = rand_x(0, 5, 8)
        eval_out = fwd(A.tanh_mlp_forward, x, g.w1, g.b1, g.w2, g.b2, 0.1, np.random.default_rng(0), False)
        train_out = fwd(A.tanh_mlp_forward, x, g.w1, g.b1, g.w2, g.b2, 0.0, None, True)
        np.testing.assert_array_equal(eval_out, train_out)

    def test_mlp_gradients(self):
        layer = make_layer()
        g = layer.gate
        x = rand_x(0, 5, 8)
        probe = np.random.default_rng(1).normal(size=(5, 4))
        fn = lambda: sum_(mul(A.tanh_mlp_forward(x, g.w1, g.b1, g.w2, g.b2), probe))  # noqa: E731
        assert max(check_gradients(fn, [g.w1, g.b1, g.w2, g.b2]).values()) < 1e-6

    def test_empty_input(self):
        with pytest.raises(DimensionError):
            A.pooling_weights(np.zeros((1, 3), dtype=bool), "mean")


class TestMaeForward:
    def test_uniform_gate_is_multihead(self):
        layer = make_layer(h=8, d=16)
        x = rand_x(0, 3, 5, 16)
        g = np.full((3, 8), 1 / 8)
        assert np.abs(fwd(A.mae_forward, x, layer, g=g) - fwd(A.multihead_sum, x, layer)).max() < 1e-10

    def test_one_hot_gate_is_expert(self):
        layer = make_layer()
        x = rand_x(1, 5, 8)
        g = np.eye(4)[2]
        np.testing.assert_allclose(
            fwd(A.mae_forward, x, layer, g=g), fwd(A.expert_forward, x, layer.experts[2], layer), atol=1e-13
        )

    @pytest.mark.parametrize("t", [1, 2])
    def test_random_gate_is_weighted_expert_sum(self, t):
        layer = make_layer(2, t=t)
        x = rand_x(2, 5, 8)
        g = np.random.default_rng(3).dirichlet(np.ones(layer.num_experts))
        expected = sum(g[e] * fwd(A.expert_forward, x, ex, layer) for e, ex in enumerate(layer.experts))
        assert np.abs(fwd(A.mae_forward, x, layer, g=g) - expected).max() < 1e-12

    def test_learned_gate_path(self):
        layer = make_layer()
        x = rand_x(3, 2, 5, 8)
        g = fwd(A.gate_forward, x, layer.gate, False)
        np.testing.assert_allclose(fwd(A.mae_forward, x, layer), fwd(A.mae_forward, x, layer, g=g), atol=1e-14)

    def test_ungated_layer_needs_g(self):
        layer = make_layer(gated=False)
        with pytest.raises(ValueError):
            A.mae_forward(rand_x(0, 3, 8), layer)

    @pytest.mark.parametrize("causal", [False, True])
    def test_gradients_of_every_group(self, causal):
        layer = make_layer(5, causal=causal, gate_dropout=0.1)
        x = rand_x(5, 3, 4, 8)
        probe = np.random.default_rng(6).normal(size=(3, 4, 8))

        def loss():
            out = A.mae_forward(x, layer, training=True, rng=np.random.default_rng(0))
            return sum_(mul(out, probe))

        params = [layer.q[1], layer.k[2], layer.v[3], layer.w[0], *layer.gate.parameters()]
        assert max(check_gradients(loss, params).values()) < 1e-4


class TestRouters:
    def test_uniform_router(self):
        layer = make_layer()
        assert A.UniformRouter()(0, layer, rand_x(0, 2, 3, 8), None) is None

    def test_argmax_router_tie_breaks_low(self):
        layer = make_layer()
        layer.gate.w2.data[:] = 0
        router = A.ArgmaxRouter()
        router(0, layer, rand_x(0, 3, 4, 8), None)
        assert (router.choices[0] == 0).all()

    def test_sample_router_uses_no_gradient(self):
        layer = make_layer()
        router = A.SampleRouter(np.random.default_rng(0))
        coef = router(0, layer, rand_x(0, 3, 4, 8), None)
        assert isinstance(coef, np.ndarray)
        assert set(router.choices[0]) <= set(range(4))

    def test_fixed_router(self):
        layer = make_layer()
        router = A.FixedRouter({0: 3})
        coef = router(0, layer, rand_x(0, 2, 4, 8), None)
        np.testing.assert_allclose(coef, np.tile([4 / 3, 4 / 3, 4 / 3, 0.0], (2, 1)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), h=st.sampled_from([2, 4, 8]), t=st.integers(1, 2))
def test_equivalences_hold_for_random_draws(seed, h, t):
    t = min(t, h - 1)
    layer = make_layer(seed, d=16, h=h, t=t)
    x = rand_x(seed, 4, 16)
    ref = fwd(A.multihead_sum, x, layer)
    assert np.abs(fwd(A.multihead_concat, x, layer) - ref).max() < 1e-10
    mean = np.mean([fwd(A.expert_forward, x, e, layer) for e in layer.experts], axis=0)
    assert np.abs(mean - ref).max() < 1e-10


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), batch=st.integers(2, 5), n=st.integers(1, 6))
def test_gate_rows_are_distributions(seed, batch, n):
    layer = make_layer(seed)
    g = fwd(A.gate_forward, rand_x(seed, batch, n, 8), layer.gate, True, rng=np.random.default_rng(seed))
    assert np.abs(g.sum(-1) - 1).max() < 1e-9
    assert (g >= 0).all()
