import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtpnet.attention import (
    Aggregation,
    FeatureMode,
    InnerSelfAttention,
    MiddleAggregation,
    OuterCrossAttention,
    build_neighborhood_features,
)
from vtpnet.nn import Tensor


def f64(module):
    return module.astype(np.float64)


def cross_attention_oracle(F_k, F_new, Wq, Wk, Wv, Wo, bo, heads):
    """Per-head loops over plain numpy, written from the layer's definition."""
    M, C = F_new.shape
    d = C // heads
    Q, K, V = F_k @ Wq, F_new @ Wk, F_new @ Wv
    out = np.zeros((M, C))
    for h in range(heads):
        cols = slice(h * d, (h + 1) * d)
        for i in range(M):
            logits = np.array([Q[i, cols] @ K[j, cols] for j in range(M)])
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out[i, cols] = sum(w[j] * V[j, cols] for j in range(M))
    return out @ Wo + bo


class TestNeighborhoodFeatures:
    def test_zero_difference(self):
        key = np.array([[[1.0, 2.0]]])
        out = build_neighborhood_features(key, key, FeatureMode.DIFF_KEY).data
        assert out.tolist() == [[[0.0, 0.0, 1.0, 2.0]]]

    def test_neighbor_passthrough(self, rng):
        nbr = rng.normal(size=(3, 5, 4))
        out = build_neighborhood_features(nbr, nbr[:, :1], FeatureMode.NEIGHBOR).data
        assert np.array_equal(out, nbr)

    @pytest.mark.parametrize("mode,width", [("neighbor", 4), ("diff", 4), ("diff_neighbor", 8),
                                            ("diff_key", 8), ("diff_key_neighbor", 12)])
    def test_widths(self, mode, width, rng):
        nbr = rng.normal(size=(2, 5, 4))
        out = build_neighborhood_features(nbr, nbr[:, :1], mode)
        assert out.shape == (2, 5, width) and FeatureMode(mode).width_factor * 4 == width

    def test_diff_key_neighbor_layout(self, rng):
        nbr, key = rng.normal(size=(5, 3)), rng.normal(size=(1, 3))
        out = build_neighborhood_features(nbr, key, FeatureMode.DIFF_KEY_NEIGHBOR).data
        assert np.array_equal(out, np.concatenate([nbr - key, np.repeat(key, 5, 0), nbr], 1))


class TestInnerSelfAttention:
    def test_rows_sum_to_one(self, rng):
        att = f64(InnerSelfAttention(6, 8, rng))
        att(Tensor(rng.normal(size=(3, 4, 7, 6))))
        A = att.last_attention
        assert A.shape == (3, 4, 7, 7)
        assert np.all(np.abs(A.sum(-1) - 1) <= 1e-6) and np.all(A >= 0)

    def test_single_point(self, rng):
        att = f64(InnerSelfAttention(3, 8, rng)).eval()
        x = rng.normal(size=(1, 1, 3))
        att(Tensor(x))
        assert att.last_attention.tolist() == [[[1.0]]]

    def test_zero_query_gives_uniform_rows(self, rng):
        att = f64(InnerSelfAttention(4, 8, rng)).eval()
        att.Wq.data[:] = 0
        y = att(Tensor(rng.normal(size=(5, 4)))).data
        assert np.allclose(att.last_attention, 1 / 5, atol=1e-15)
        assert np.allclose(y, y[0], atol=1e-12)

    def test_manual_forward(self, rng):
        att = f64(InnerSelfAttention(4, 8, rng)).eval()
        att.bn.running_mean[:] = rng.normal(size=8)
        att.bn.running_var[:] = rng.uniform(0.5, 2, size=8)
        x = rng.normal(size=(6, 4))
        q, k, v = x @ att.Wq.data, x @ att.Wk.data, x @ att.Wv.data
        logits = q @ k.T
        A = np.exp(logits - logits.max(1, keepdims=True))
        A /= A.sum(1, keepdims=True)
        h = (A @ v) @ att.post.weight.data + att.post.bias.data
        h = (h - att.bn.running_mean) / np.sqrt(att.bn.running_var + 1e-5)
        want = np.maximum(h * att.bn.gamma.data + att.bn.beta.data, 0)
        assert np.allclose(att(Tensor(x)).data, want, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 9))
    def test_joint_permutation_equivariance_exact(self, seed, K):
        rng = np.random.default_rng(seed)
        att = f64(InnerSelfAttention(6, 8, rng))
        att(Tensor(rng.normal(size=(2, 3, K, 6))))  # non-trivial running statistics
        att.eval()
        x = rng.normal(size=(2, 3, K, 6))
        perm = rng.permutation(K)
        y = att(Tensor(x)).data
        A = att.last_attention
        assert np.array_equal(att(Tensor(x[:, :, perm])).data, y[:, :, perm])
        assert np.array_equal(att.last_attention, A[:, :, perm][:, :, :, perm])

    def test_width_mismatch(self, rng):
        with pytest.raises(ValueError):
            InnerSelfAttention(6, 8, rng)(Tensor(np.ones((2, 4, 5))))


class TestMiddleAggregation:
    @pytest.mark.parametrize("agg", list(Aggregation))
    def test_row_permutation_invariance(self, agg, rng):
        mod = f64(MiddleAggregation(8, rng, agg))
        mod(Tensor(rng.normal(size=(4, 6, 8))))
        mod.eval()
        x = rng.normal(size=(4, 6, 8))
        perm = rng.permutation(6)
        assert np.array_equal(mod(Tensor(x)).data, mod(Tensor(x[:, perm])).data)

    def test_single_row_collapse(self, rng):
        mod = MiddleAggregation(8, rng)
        row = rng.normal(size=(1, 8))
        assert np.array_equal(mod.pooled(Tensor(row)).data, np.concatenate([row[0], row[0]]))

    def test_max_minus_mean_on_constant_rows(self, rng):
        mod = MiddleAggregation(8, rng, Aggregation.MAX_MINUS_MEAN)
        x = np.tile(rng.normal(size=8), (5, 1))
        # the mean of 5 equal values can round by an ulp
        assert np.allclose(mod.pooled(Tensor(x)).data, 0.0, atol=4 * np.finfo(float).eps * np.abs(x).max())

    def test_widths(self, rng):
        assert MiddleAggregation(8, rng).mlp.linear.weight.shape == (16, 8)
        assert MiddleAggregation(8, rng, "max").mlp.linear.weight.shape == (8, 8)


class TestOuterCrossAttention:
    def test_matches_dual_implementation(self, rng):
        cross = f64(OuterCrossAttention(5, 8, rng, heads=8)).eval()
        cross.out.bias.data = rng.normal(size=8)
        F_k, F_new = rng.normal(size=(3, 5)), rng.normal(size=(3, 8))
        got = cross(Tensor(F_k[None]), Tensor(F_new[None])).data[0]
        want = cross_attention_oracle(F_k, F_new, cross.Wq.data, cross.Wk.data, cross.Wv.data,
                                      cross.out.weight.data, cross.out.bias.data, 8)
        assert np.max(np.abs(got - want)) < 1e-6

    def test_multi_dim_heads_match_dual(self, rng):
        cross = f64(OuterCrossAttention(4, 16, rng, heads=8)).eval()
        F_k, F_new = rng.normal(size=(7, 4)), rng.normal(size=(7, 16))
        got = cross(Tensor(F_k[None]), Tensor(F_new[None])).data[0]
        want = cross_attention_oracle(F_k, F_new, cross.Wq.data, cross.Wk.data, cross.Wv.data,
                                      cross.out.weight.data, cross.out.bias.data, 8)
        assert np.max(np.abs(got - want)) < 1e-6

    def test_single_keypoint(self, rng):
        cross = f64(OuterCrossAttention(3, 8, rng)).eval()
        F_new = rng.normal(size=(1, 1, 8))
        got = cross(Tensor(rng.normal(size=(1, 1, 3))), Tensor(F_new)).data
        want = (F_new @ cross.Wv.data) @ cross.out.weight.data + cross.out.bias.data
        assert np.allclose(got, want, atol=1e-12)

    def test_eval_is_deterministic(self, rng):
        cross = OuterCrossAttention(4, 8, rng).eval()
        a, b = Tensor(rng.normal(size=(2, 6, 4))), Tensor(rng.normal(size=(2, 6, 8)))
        assert np.array_equal(cross(a, b).data, cross(a, b).data)

    def test_train_dropout_not_renormalized(self, rng):
        cross = f64(OuterCrossAttention(4, 8, rng, dropout=0.5))
        F_k, F_new = rng.normal(size=(6, 4)), rng.normal(size=(6, 8))
        got = cross(Tensor(F_k[None]), Tensor(F_new[None]), np.random.default_rng(1)).data[0]
        # same mask draw as the layer: one uniform per attention weight
        keep = (np.random.default_rng(1).random((1, 8, 6, 6)) >= 0.5) / 0.5
        Q, K, V = F_k @ cross.Wq.data, F_new @ cross.Wk.data, F_new @ cross.Wv.data
        out = np.zeros((6, 8))
        for h in range(8):
            logits = np.outer(Q[:, h], K[:, h])
            A = np.exp(logits - logits.max(1, keepdims=True))
            A /= A.sum(1, keepdims=True)
            out[:, h] = (A * keep[0, h]) @ V[:, h]  # dropped rows keep their original scale
        want = out @ cross.out.weight.data + cross.out.bias.data
        assert np.max(np.abs(got - want)) < 1e-12
        assert np.array_equal(got, cross(Tensor(F_k[None]), Tensor(F_new[None]), np.random.default_rng(1)).data[0])

    def test_head_split_round_trip(self, rng):
        cross = f64(OuterCrossAttention(8, 16, rng))
        x = Tensor(rng.normal(size=(2, 5, 16)))
        merged = cross._split(x).transpose(0, 2, 1, 3).reshape(2, 5, 16)
        assert np.array_equal(merged.data, x.data)

    def test_channels_must_divide_heads(self, rng):
        with pytest.raises(ValueError):
            OuterCrossAttention(4, 12, rng, heads=8)
