import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egdnet.attention import (
    TRFA,
    AttentionConfig,
    LinearTransformerEncoder,
    SequenceFeature,
    linear_attention,
)
from egdnet.tensor import Tensor

from conftest import rand_tensor

F64 = np.float64


def quadratic_attention(q, k, v, eps):
    """Materializes the full score matrix; only viable for short sequences."""
    phi = lambda x: np.where(x > 0, x + 1.0, np.exp(x))
    scores = phi(q) @ np.swapaxes(phi(k), -1, -2)  # (N, h, Lq, Lk)
    return (scores @ v) / (scores.sum(axis=-1, keepdims=True) + eps)


class TestLinearAttention:
    @pytest.mark.parametrize("length", [1, 4, 16, 32])
    @pytest.mark.parametrize("heads", [1, 4])
    def test_matches_quadratic_form(self, length, heads):
        rng = np.random.default_rng([length, heads])
        # 8 combinations x 7 draws = 56 cases
        for _ in range(7):
            n, d = int(rng.integers(1, 3)), int(rng.integers(1, 9))
            q = rng.standard_normal((n, heads, length, d))
            k = rng.standard_normal((n, heads, length, d))
            v = rng.standard_normal((n, heads, length, d))
            got = linear_attention(Tensor(q), Tensor(k), Tensor(v), 1e-6).data
            np.testing.assert_allclose(got, quadratic_attention(q, k, v, 1e-6), rtol=1e-10, atol=1e-12)

    def test_unequal_query_and_key_lengths(self, rng):
        q, k, v = (rng.standard_normal(s) for s in [(1, 2, 3, 4), (1, 2, 7, 4), (1, 2, 7, 5)])
        out = linear_attention(Tensor(q), Tensor(k), Tensor(v))
        assert out.shape == (1, 2, 3, 5)
        np.testing.assert_allclose(out.data, quadratic_attention(q, k, v, 1e-6), rtol=1e-10)

    def test_single_key_returns_its_value(self, rng):
        q, k = rng.standard_normal((1, 1, 5, 3)), rng.standard_normal((1, 1, 1, 3))
        v = rng.standard_normal((1, 1, 1, 3))
        out = linear_attention(Tensor(q), Tensor(k), Tensor(v)).data
        np.testing.assert_allclose(out, np.broadcast_to(v, out.shape), rtol=1e-5)

    @given(seed=st.integers(0, 2**31 - 1), length=st.integers(1, 12), scale=st.floats(0.1, 5.0))
    @settings(max_examples=60, deadline=None)
    def test_output_within_value_hull(self, seed, length, scale):
        rng = np.random.default_rng(seed)
        q, k = (rng.standard_normal((1, 2, length, 4)) * scale for _ in range(2))
        v = rng.standard_normal((1, 2, length, 3))
        out = linear_attention(Tensor(q), Tensor(k), Tensor(v), 1e-6).data
        lo = np.minimum(v.min(axis=2, keepdims=True), 0.0)
        hi = np.maximum(v.max(axis=2, keepdims=True), 0.0)
        assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)

    def test_shape_errors(self):
        a = Tensor(np.zeros((1, 2, 3, 4)))
        with pytest.raises(ValueError):
            linear_attention(a, Tensor(np.zeros((1, 2, 3, 5))), a)
        with pytest.raises(ValueError):
            linear_attention(a, a, Tensor(np.zeros((1, 2, 4, 4))))


class TestConfigAndSequence:
    def test_head_dim(self):
        assert AttentionConfig().head_dim == 32

    def test_indivisible_heads(self):
        with pytest.raises(ValueError):
            AttentionConfig(model_dim=10, heads=4)

    def test_map_round_trip(self, rng):
        x = rand_tensor(rng, 2, 6, 3, 4)
        seq = SequenceFeature.from_map(x)
        assert seq.tokens.shape == (2, 12, 6)
        np.testing.assert_array_equal(seq.tokens.data[1, 5], x.data[1, :, 1, 1])
        np.testing.assert_array_equal(seq.to_map().data, x.data)


class TestEncoder:
    @pytest.fixture
    def encoder(self, rng):
        return LinearTransformerEncoder(AttentionConfig(8, 2), rng, F64)

    def test_zero_output_projection_is_identity(self, encoder, rng):
        encoder.mlp_out.weight.data[:] = 0.0
        x = rand_tensor(rng, 2, 6, 8)
        np.testing.assert_array_equal(encoder(x, rand_tensor(rng, 2, 9, 8)).data, x.data)

    def test_shape(self, encoder, rng):
        assert encoder(rand_tensor(rng, 2, 6, 8), rand_tensor(rng, 2, 10, 8)).shape == (2, 6, 8)

    def test_width_mismatch(self, encoder, rng):
        with pytest.raises(ValueError):
            encoder(rand_tensor(rng, 1, 6, 8), rand_tensor(rng, 1, 6, 4))

    def test_linears_have_no_bias(self, encoder):
        names = dict(encoder.named_parameters())
        assert not any(n.endswith("bias") for n in names if "proj" in n or "merge" in n or "mlp_" in n)


class TestTRFA:
    @pytest.fixture
    def trfa(self, rng):
        return TRFA(AttentionConfig(8, 2), rng, F64)

    def test_output_shape(self, trfa, rng):
        d5, e6 = rand_tensor(rng, 2, 8, 3, 4), rand_tensor(rng, 2, 8, 3, 4)
        assert trfa(d5, e6).shape == (2, 8, 3, 4)

    def test_swap_with_shared_parameters(self, trfa, rng):
        trfa.edge_to_context.load_state_dict(trfa.context_to_edge.state_dict())
        d5, e6 = rand_tensor(rng, 1, 8, 2, 3), rand_tensor(rng, 1, 8, 2, 3)
        a, b = trfa.branches(d5, e6)
        a2, b2 = trfa.branches(e6, d5)
        np.testing.assert_allclose(a.data, b2.data, rtol=1e-12)
        np.testing.assert_allclose(b.data, a2.data, rtol=1e-12)

    def test_branches_differ_by_default(self, trfa, rng):
        d5, e6 = rand_tensor(rng, 1, 8, 2, 3), rand_tensor(rng, 1, 8, 2, 3)
        a, _ = trfa.branches(d5, e6)
        _, b2 = trfa.branches(e6, d5)
        assert not np.allclose(a.data, b2.data)

    def test_zero_edge_features_stay_finite(self, trfa, rng):
        out = trfa(rand_tensor(rng, 2, 8, 3, 4), Tensor(np.zeros((2, 8, 3, 4))))
        assert np.all(np.isfinite(out.data))

    def test_mismatched_inputs(self, trfa, rng):
        with pytest.raises(ValueError):
            trfa(rand_tensor(rng, 1, 8, 3, 4), rand_tensor(rng, 1, 8, 2, 4))

