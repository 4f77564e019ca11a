import numpy as np
import pytest

from egdnet.blocks import CAFF, DecoderBlock, EdgeCompact, EdgeHead, InvertedResidual, IrbConfig
from egdnet.nn import BatchNorm2d, ConvBnRelu, Linear, count_params
from egdnet.tensor import Tensor

from conftest import rand_tensor

F64 = np.float64


class TestParamCounts:
    def test_conv_bn_relu(self):
        # 3x3 conv 2->4 without bias: 72, plus BN affine 8
        assert count_params(ConvBnRelu(2, 4, 3)) == 80

    def test_batch_norm_affine_only(self):
        assert count_params(BatchNorm2d(32)) == 64

    def test_linear_without_bias(self):
        assert count_params(Linear(128, 128)) == 128 * 128


class TestInvertedResidual:
    def test_zero_projection_gives_identity(self, rng):
        block = InvertedResidual(IrbConfig(8, 8, 4, 1, 2), rng, F64)
        block.project.bn.gamma.data[:] = 0.0
        x = rand_tensor(rng, 2, 8, 6, 6)
        np.testing.assert_array_equal(block(x).data, x.data)

    def test_stride_two_halves_and_drops_shortcut(self, rng):
        cfg = IrbConfig(8, 8, 4, 2, 1)
        assert not cfg.use_shortcut
        block = InvertedResidual(cfg, rng, F64)
        block.project.bn.gamma.data[:] = 0.0
        out = block(rand_tensor(rng, 2, 8, 6, 6))
        assert out.shape == (2, 8, 3, 3)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_expansion_one_skips_expand(self, rng):
        block = InvertedResidual(IrbConfig(16, 8, 1, 1), rng, F64)
        assert block.expand is None
        assert block.depthwise.conv.weight.shape == (16, 1, 3, 3)

    @pytest.mark.parametrize("dilation", [1, 2, 3])
    def test_dilation_preserves_size(self, rng, dilation):
        block = InvertedResidual(IrbConfig(4, 4, 2, 1, dilation), rng, F64)
        assert block(rand_tensor(rng, 1, 4, 7, 5)).shape == (1, 4, 7, 5)

    def test_channel_mismatch(self, rng):
        block = InvertedResidual(IrbConfig(4, 4), rng, F64)
        with pytest.raises(ValueError):
            block(rand_tensor(rng, 1, 3, 4, 4))


class TestCAFF:
    @pytest.fixture
    def pair(self, rng):
        return rand_tensor(rng, 2, 8, 4, 4), rand_tensor(rng, 2, 8, 4, 4)

    def test_saturated_gate_passes_sum(self, rng, pair):
        d, e = pair
        block = CAFF(8, 4, rng, F64)
        block.gate_up.bias.data[:] = 60.0
        expected = block.fuse(d + e).data
        np.testing.assert_allclose(block(d, e).data, expected, rtol=1e-12, atol=1e-12)

    def test_closed_gate_passes_nothing(self, rng, pair):
        d, e = pair
        block = CAFF(8, 4, rng, F64)
        block.gate_up.bias.data[:] = -60.0
        zero = block.fuse(Tensor(np.zeros(d.shape))).data
        np.testing.assert_allclose(block(d, e).data, zero, atol=1e-12)

    def test_gate_is_in_unit_interval(self, rng, pair):
        a = CAFF(8, 4, rng, F64).attention(*pair).data
        assert a.shape == (2, 8, 1, 1)
        assert np.all((a > 0) & (a < 1))

    def test_not_symmetric_in_inputs(self, rng, pair):
        d, e = pair
        block = CAFF(8, 4, rng, F64)
        assert not np.allclose(block(d, e).data, block(e, d).data)

    def test_shape_mismatch(self, rng):
        block = CAFF(8, 4, rng, F64)
        with pytest.raises(ValueError):
            block(rand_tensor(rng, 1, 8, 4, 4), rand_tensor(rng, 1, 8, 2, 2))


class TestEdgeModules:
    def test_compact_halves(self, rng):
        m = EdgeCompact(32, rng=rng, dtype=F64)
        assert m(rand_tensor(rng, 2, 2, 48, 64)).shape == (2, 32, 24, 32)

    def test_compact_rejects_odd(self, rng):
        with pytest.raises(ValueError):
            EdgeCompact(8, rng=rng, dtype=F64)(rand_tensor(rng, 1, 2, 5, 6))

    def test_head_shape_and_probabilities(self, rng):
        head = EdgeHead(32, 16, rng, F64)
        fc = rand_tensor(rng, 2, 32, 6, 8)
        assert head(fc).shape == (2, 1, 6, 8)
        p = head.probabilities(fc).data
        assert np.all((p > 0) & (p < 1))


class TestDecoderBlock:
    def test_doubles_resolution(self, rng):
        block = DecoderBlock(8 + 4, 6, rng, F64)
        out = block(rand_tensor(rng, 2, 8, 3, 4), [rand_tensor(rng, 2, 4, 3, 4)])
        assert out.shape == (2, 6, 6, 8)

    def test_two_skips(self, rng):
        block = DecoderBlock(2 + 3 + 4, 5, rng, F64)
        skips = [rand_tensor(rng, 1, 3, 4, 4), rand_tensor(rng, 1, 4, 4, 4)]
        assert block(rand_tensor(rng, 1, 2, 4, 4), skips).shape == (1, 5, 8, 8)

    def test_skip_size_mismatch(self, rng):
        block = DecoderBlock(8, 4, rng, F64)
        with pytest.raises(ValueError):
            block(rand_tensor(rng, 1, 4, 3, 3), [rand_tensor(rng, 1, 4, 6, 6)])

