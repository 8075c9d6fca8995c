import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mldecoder.attention import MultiHeadAttnParams
from mldecoder.errors import ConfigError, DimensionError
from mldecoder.heads import (GapHead, GroupAssignment, GroupFcParams, HeadConfig, MLDecoderHead,
                             QuerySet, SpatialEmbedding, TransformerDecoderHead, group_fc_batched,
                             group_fc_loop, group_fully_connected, make_group_assignment,
                             project_embedding, strip_self_attention)
from mldecoder.tensor import Parameter, Tensor

from oracles import add_rows, ff_loops, layer_norm_loops, matmul_loops, mha_loops

seeds = st.integers(0, 2**32 - 1)


def _mha(p, q, k, v):
    L = lambda ws: [w.data.tolist() for w in ws]  # noqa: E731
    return mha_loops(q, k, v, L(p.w_q), L(p.w_k), L(p.w_v), p.w_o.data.tolist())


def _ln(x, norm):
    return layer_norm_loops(x, norm.gain.data.tolist(), norm.bias.data.tolist())


def decoder_oracle(tokens, queries, p, with_self_attn):
    """Straight-line decoder on Python lists: [self-attn], cross-attn, FF, each post-norm."""
    E = tokens if p.proj is None else matmul_loops(tokens, p.proj.data.tolist())
    q = queries
    if with_self_attn:
        q = _ln(add_rows(q, _mha(p.self_attn, q, q, q)), p.self_norm)
    q = _ln(add_rows(q, _mha(p.cross_attn, q, E, E)), p.cross_norm)
    ff = p.ff
    out = ff_loops(q, ff.w1.data.tolist(), ff.b1.data.tolist(), ff.w2.data.tolist(),
                   ff.b2.data.tolist())
    return _ln(add_rows(q, out), p.ff_norm)


def group_fc_oracle(G, weight, assignment, shared=False):
    out = []
    for i in range(assignment.num_classes):
        k, j = assignment.lookup(i)
        w = weight[j] if shared else weight[k][j]
        out.append(math.fsum(a * b for a, b in zip(w, G[k])))
    return out


# ---------------------------------------------------------------------------
# embedding and GAP


class TestProjectEmbedding:
    def test_identity_leaves_tokens(self):
        t = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
        assert np.array_equal(project_embedding(t, Parameter(np.eye(3), "p")).data, t.data)
        assert project_embedding(t, None) is t

    def test_per_token_map(self):
        rng = np.random.default_rng(1)
        tokens, W = rng.normal(size=(6, 4)), rng.normal(size=(4, 2))
        out = project_embedding(Tensor(tokens), Parameter(W, "p")).data
        for r in range(6):
            np.testing.assert_allclose(out[r], matmul_loops([tokens[r].tolist()], W.tolist())[0],
                                       atol=1e-14)

    def test_zero_projection(self):
        out = project_embedding(Tensor(np.ones((3, 4))), Parameter(np.zeros((4, 2)), "p"))
        assert not out.data.any()

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            project_embedding(Tensor(np.ones((3, 4))), Parameter(np.zeros((3, 2)), "p"))

    def test_spatial_embedding_token_count(self):
        with pytest.raises(DimensionError):
            SpatialEmbedding(2, 2, Tensor(np.ones((5, 3))))
        e = SpatialEmbedding.from_grid(np.ones((2, 3, 4)))
        assert e.tokens.shape == (6, 4) and e.dim == 4


class TestGap:
    def test_equal_tokens_average_exactly(self):
        v = np.array([0.1, -2.5, 3.3])
        head = GapHead(3, 3)
        head.params.fc_weight.data[...] = np.eye(3)
        assert np.array_equal(head(Tensor(np.tile(v, (4, 1)))).data, v)

    def test_seed9_mean_then_matmul(self):
        rng = np.random.default_rng(9)
        E = rng.normal(size=(2, 2, 3))
        head = GapHead(2, 3, seed=9)
        out = head(SpatialEmbedding.from_grid(E)).data
        z = [math.fsum(E[:, :, c].ravel()) / 4 for c in range(3)]
        expected = matmul_loops([z], head.params.fc_weight.data.T.tolist())[0]
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 4, 3))
        head = GapHead(2, 3)
        whole = head(Tensor(x)).data
        for b in range(5):
            assert np.array_equal(whole[b], head(Tensor(x[b])).data)


# ---------------------------------------------------------------------------
# transformer decoder


def _identity_transformer(D=2):
    td = TransformerDecoderHead(HeadConfig(num_classes=1, model_dim=D), seed=0)
    p = td.params
    p.self_attn = MultiHeadAttnParams.identity(D, "self_attn")
    p.cross_attn = MultiHeadAttnParams.identity(D, "cross_attn")
    p.pool.weight.data[...] = 1.0  # token pool = sum of the class token
    return td


class TestTransformerDecoder:
    def test_single_class_straight_line(self):
        td = _identity_transformer()
        rng = np.random.default_rng(4)
        tokens = rng.normal(size=(3, 2))
        out = td(Tensor(tokens)).data
        q3 = decoder_oracle(tokens.tolist(), td.queries.values.data.tolist(), td.params, True)
        assert out.shape == (1,)
        np.testing.assert_allclose(out, [math.fsum(q3[0])], rtol=0, atol=1e-12)

    def test_random_heads_match_oracle(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            cfg = HeadConfig(num_classes=3, model_dim=4, num_heads=2, embed_dim=5)
            td = TransformerDecoderHead(cfg, seed=seed)
            tokens = rng.normal(size=(6, 5))
            q3 = decoder_oracle(tokens.tolist(), td.queries.values.data.tolist(), td.params, True)
            expected = [math.fsum(a * b for a, b in zip(q3[i], td.params.pool.weight.data[i, 0]))
                        for i in range(3)]
            np.testing.assert_allclose(td(Tensor(tokens)).data, expected, rtol=0, atol=1e-10)

    def test_zero_pool_gives_zero_logits(self):
        td = TransformerDecoderHead(HeadConfig(num_classes=3, model_dim=4))
        td.params.pool.weight.data[...] = 0
        for ps in td.params.ff.parameters():
            ps.data[...] = 0
        assert not td(Tensor(np.zeros((4, 4)))).data.any()

    def test_needs_one_query_per_class(self):
        with pytest.raises(ConfigError):
            TransformerDecoderHead(HeadConfig(num_classes=4, model_dim=4, num_queries=2))

    def test_mean_pool(self):
        td = TransformerDecoderHead(HeadConfig(num_classes=3, model_dim=4, token_pool="mean"))
        assert td(Tensor(np.ones((2, 4)))).shape == (3,)
        assert all(p.name != "pool.weight" for p in td.parameters())


class TestSelfAttentionRedundancy:
    @pytest.mark.parametrize("seed", range(10))
    def test_weight_copy_reproduces_logits(self, seed):
        rng = np.random.default_rng(seed)
        N = int(rng.integers(1, 7))
        h = int(rng.choice([1, 2]))
        D = 2 * h * int(rng.integers(1, 3))
        D_in = int(rng.choice([D, D + 3]))
        td = TransformerDecoderHead(HeadConfig(num_classes=N, model_dim=D, num_heads=h,
                                               embed_dim=D_in), seed=seed)
        ml = strip_self_attention(td)
        assert all("self" not in p.name for p in ml.parameters())
        tokens = Tensor(rng.normal(size=(3, int(rng.integers(1, 9)), D_in)))
        np.testing.assert_allclose(ml(tokens).data, td(tokens).data, rtol=0, atol=1e-10)


# ---------------------------------------------------------------------------
# group assignment and group fc


class TestGroupAssignment:
    def test_index_arithmetic(self):
        a = GroupAssignment.identity(8, 2)
        assert a.group_size == 4
        assert a.lookup(5) == (1, 1)

    @pytest.mark.parametrize("N,K,g", [(80, 20, 4), (9600, 100, 96), (7, 3, 3), (5, 5, 1)])
    def test_group_size(self, N, K, g):
        a = make_group_assignment(N, K, seed=1)
        assert a.group_size == g
        sizes = np.bincount(a.group_of, minlength=K)
        assert sizes.max() == g and sizes.sum() == N
        if N % K == 0:
            assert np.all(sizes == g)

    def test_full_decoding_is_a_permutation(self):
        a = make_group_assignment(6, 6, seed=3)
        assert sorted(a.group_of.tolist()) == list(range(6)) and not a.slot_of.any()

    def test_too_many_groups(self):
        with pytest.raises(ConfigError):
            make_group_assignment(3, 4, seed=0)

    def test_seeded(self):
        a, b = make_group_assignment(20, 5, 7), make_group_assignment(20, 5, 7)
        assert a.to_text() == b.to_text()
        assert a.to_text() != make_group_assignment(20, 5, 8).to_text()

    def test_lookup_outside_is_invariant_violation(self):
        with pytest.raises(AssertionError):
            GroupAssignment.identity(4).lookup(4)

    def test_text_round_trip(self, tmp_path):
        a = make_group_assignment(11, 4, seed=2)
        a.save(tmp_path / "a.txt")
        b = GroupAssignment.load(tmp_path / "a.txt")
        assert np.array_equal(a.group_of, b.group_of) and np.array_equal(a.slot_of, b.slot_of)
        assert a.digest() == b.digest()

    @pytest.mark.parametrize("text", ["", "3 1 3 0\n0\t0\t0\n", "2 1 2 0\n0\t0\t0\n1\t0\t0\n",
                                      "x y\n"])
    def test_bad_files(self, text):
        with pytest.raises(ConfigError):
            GroupAssignment.from_text(text)


class TestGroupFc:
    def test_unit_groups_are_plain_fc(self):
        W = GroupFcParams(Parameter(np.array([[[1.0, 0.0]], [[0.0, 1.0]]]), "w"))
        out = group_fully_connected(Tensor([[3.0, 4.0], [5.0, 6.0]]), W, GroupAssignment.identity(2))
        assert out.data.tolist() == [3.0, 6.0]

    def test_seed13_loop_equals_batched(self):
        rng = np.random.default_rng(13)
        a = make_group_assignment(7, 3, seed=13)
        params = GroupFcParams.init(3, a.group_size, 5, rng)
        G = rng.normal(size=(3, 5))
        loop, batched = group_fc_loop(G, params, a), group_fc_batched(G, params, a)
        assert loop.shape == (7,)
        assert np.array_equal(loop, batched)
        assert np.array_equal(group_fully_connected(Tensor(G), params, a).data, loop)

    @given(seeds, st.integers(1, 12), st.data(), st.booleans(), st.integers(1, 6))
    def test_loop_batched_tape_agree_random(self, seed, N, data, shared, D):
        K = data.draw(st.integers(1, N))
        rng = np.random.default_rng(seed)
        a = make_group_assignment(N, K, seed)
        params = GroupFcParams.init(K, a.group_size, D, rng, shared=shared)
        G = rng.normal(size=(K, D))
        loop = group_fc_loop(G, params, a)
        assert np.array_equal(loop, group_fc_batched(G, params, a))
        assert np.array_equal(loop, group_fully_connected(Tensor(G), params, a).data)
        np.testing.assert_allclose(loop, group_fc_oracle(G, params.weight.data, a, shared),
                                   rtol=0, atol=1e-12)

    def test_shape_checked(self):
        a = GroupAssignment.identity(4, 2)
        params = GroupFcParams(Parameter(np.zeros((2, 3, 5)), "w"))
        with pytest.raises(DimensionError):
            group_fully_connected(Tensor(np.zeros((2, 5))), params, a)


# ---------------------------------------------------------------------------
# ML-Decoder


class TestMLDecoder:
    def test_zero_queries_straight_line(self):
        rng = np.random.default_rng(6)
        cfg = HeadConfig(num_classes=5, model_dim=4, num_queries=2, num_heads=2)
        zeros = QuerySet(Tensor(np.zeros((2, 4))), "fixed_random")
        ml = MLDecoderHead(cfg, queries=zeros, seed=6)
        for b in (ml.params.ff.b1, ml.params.ff.b2):
            b.data[...] = 0
        tokens = rng.normal(size=(9, 4))
        G = decoder_oracle(tokens.tolist(), [[0.0] * 4] * 2, ml.params, False)
        expected = group_fc_oracle(G, ml.params.group_fc.weight.data, cfg.group_assignment)
        np.testing.assert_allclose(ml(Tensor(tokens)).data, expected, rtol=0, atol=1e-10)

    def test_matches_oracle_with_adapter(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            cfg = HeadConfig(num_classes=7, model_dim=4, num_queries=3, num_heads=2, embed_dim=6,
                             group_seed=seed)
            ml = MLDecoderHead(cfg, seed=seed)
            tokens = rng.normal(size=(5, 6))
            G = decoder_oracle(tokens.tolist(), ml.queries.values.data.tolist(), ml.params, False)
            expected = group_fc_oracle(G, ml.params.group_fc.weight.data, cfg.group_assignment)
            np.testing.assert_allclose(ml(Tensor(tokens)).data, expected, rtol=0, atol=1e-10)

    def test_relabeling_groups_is_invariant(self):
        rng = np.random.default_rng(8)
        cfg = HeadConfig(num_classes=10, model_dim=4, num_queries=4, group_seed=8)
        ml = MLDecoderHead(cfg, seed=8)
        tokens = Tensor(rng.normal(size=(2, 6, 4)))
        before = ml(tokens).data
        perm = rng.permutation(4)  # new group k holds old group perm[k]
        inv = np.argsort(perm)
        a = cfg.group_assignment
        ml.queries = QuerySet(Tensor(ml.queries.values.data[perm]), "fixed_random")
        ml.params.group_fc.weight.data[...] = ml.params.group_fc.weight.data[perm]
        ml.params.assignment = GroupAssignment(10, 4, a.group_size, a.seed, inv[a.group_of],
                                               a.slot_of)
        np.testing.assert_allclose(ml(tokens).data, before, rtol=0, atol=1e-12)

    def test_query_count_checked(self):
        cfg = HeadConfig(num_classes=6, model_dim=4, num_queries=3)
        ml = MLDecoderHead(cfg)
        ml.queries = QuerySet(Tensor(np.zeros((2, 4))), "fixed_random")
        with pytest.raises(DimensionError):
            ml(Tensor(np.ones((3, 4))))

    def test_no_self_attention_parameters(self):
        ml = MLDecoderHead(HeadConfig(num_classes=6, model_dim=4, num_queries=2))
        assert not any("self" in p.name for p in ml.parameters())

    def test_learnable_queries_are_parameters(self):
        ml = MLDecoderHead(HeadConfig(num_classes=6, model_dim=4, num_queries=2), "learnable")
        assert ml.parameters()[0].name == "queries"
        fixed = MLDecoderHead(HeadConfig(num_classes=6, model_dim=4, num_queries=2))
        assert all(p.name != "queries" for p in fixed.parameters())

    def test_state_dict_round_trip(self):
        cfg = HeadConfig(num_classes=6, model_dim=4, num_queries=2)
        a, b = MLDecoderHead(cfg, seed=1), MLDecoderHead(cfg, seed=2)
        tokens = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        b.load_state_dict(a.state_dict())
        assert np.array_equal(a(tokens).data, b(tokens).data)

    @given(seeds, st.integers(1, 6))
    def test_batch_rows_are_independent(self, seed, B):
        rng = np.random.default_rng(seed)
        ml = MLDecoderHead(HeadConfig(num_classes=5, model_dim=4, num_queries=2, num_heads=2),
                           seed=1)
        x = rng.normal(size=(B, 3, 4))
        whole = ml(Tensor(x)).data
        for b in range(B):
            assert np.array_equal(whole[b], ml(Tensor(x[b])).data)


def test_head_config_validation():
    with pytest.raises(ConfigError):
        HeadConfig(num_classes=4, model_dim=6, num_heads=4)
    with pytest.raises(ConfigError):
        HeadConfig(num_classes=4, model_dim=4, num_queries=5)
    with pytest.raises(ConfigError):
        HeadConfig(num_classes=4, model_dim=4, token_pool="max")
    with pytest.raises(ConfigError):
        HeadConfig(num_classes=4, model_dim=4, num_queries=2,
                   group_assignment=GroupAssignment.identity(4))
