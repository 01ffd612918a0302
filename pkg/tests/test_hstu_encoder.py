"""Tests for HSTU, softmax and Transformer layers."""

import math

import numpy as np
import pytest

from src import grad_tape as gt
from src.hstu_encoder import (
    AttentionMask,
    FlopCounter,
    HstuConfig,
    HstuLayerParams,
    JaggedBatch,
    TransformerLayerParams,
    compute_rab,
    estimate_activation_floats,
    forward_encoder,
    gated_output,
    hstu_layer_forward,
    initialize_layers,
    pointwise_attention,
    pointwise_projection,
    softmax_attention,
    temporal_bucket,
    transformer_layer_forward,
)
from src.utils.exceptions import ConfigurationError, ShapeError


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _randomize_rab(params, rng):
    params.rab_pos.value[...] = rng.normal(0.0, 0.5, size=params.rab_pos.shape)
    params.rab_time.value[...] = rng.normal(0.0, 0.5, size=params.rab_time.shape)
    params.b1.value[...] = rng.normal(0.0, 0.1, size=params.b1.shape)
    params.b2.value[...] = rng.normal(0.0, 0.1, size=params.b2.shape)


def naive_hstu_layer(x, params, config, timestamps):
    """Per-position loop: token i attends to tokens 0..i."""
    n, _ = x.shape
    h, dqk, dv = config.num_heads, config.d_qk, config.d_v
    hv, hqk = h * dv, h * dqk
    w1, b1 = params.w1.value, params.b1.value
    w2, b2 = params.w2.value, params.b2.value
    pos_table, time_table = params.rab_pos.value, params.rab_time.value
    buckets = config.num_position_buckets
    out = np.zeros_like(x)
    for i in range(n):
        row = _silu(x[i] @ w1 + b1)
        u = row[:hv]
        pooled = np.zeros(hv)
        for head in range(h):
            q = _silu(x[i] @ w1 + b1)[2 * hv + head * dqk: 2 * hv + (head + 1) * dqk]
            for j in range(i + 1):
                proj_j = _silu(x[j] @ w1 + b1)
                k = proj_j[2 * hv + hqk + head * dqk: 2 * hv + hqk + (head + 1) * dqk]
                v = proj_j[hv + head * dv: hv + (head + 1) * dv]
                bias = 0.0
                if config.rab_positional:
                    bias += pos_table[min(i - j, buckets - 1) + buckets - 1]
                if config.rab_temporal:
                    delta = int(timestamps[i] - timestamps[j])
                    bucket = 0 if delta <= 0 else min(delta.bit_length() - 1, config.num_time_buckets - 1)
                    bias += time_table[bucket]
                weight = _silu(float(q @ k) + bias) / config.max_seq_len
                pooled[head * dv: (head + 1) * dv] += weight * v
        centered = pooled - pooled.mean()
        normed = centered / math.sqrt((centered ** 2).mean() + config.eps)
        out[i] = x[i] + (normed * u) @ w2 + b2
    return out


class TestProjection:
    """Test cases for the pointwise projection."""

    def test_zero_weights_give_zero_projections(self):
        config = HstuConfig(d_model=3, num_heads=1, d_qk=2, d_v=2, num_layers=1)
        params = HstuLayerParams.initialize(config, np.random.default_rng(0))
        params.w1.value[...] = 0.0
        proj = pointwise_projection(gt.Tensor(np.ones((2, 3))), params, config)
        for t in (proj.u, proj.v, proj.q, proj.k):
            assert np.array_equal(t.value, np.zeros((2, 2)))

    def test_scalar_case(self):
        config = HstuConfig(d_model=1, num_heads=1, d_qk=1, d_v=1, num_layers=1)
        params = HstuLayerParams.initialize(config, np.random.default_rng(0))
        params.w1.value[...] = np.array([[1.0, 1.0, 1.0, 1.0]])
        proj = pointwise_projection(gt.Tensor([[1.0]]), params, config)
        expected = 1.0 / (1.0 + math.exp(-1.0))
        for t in (proj.u, proj.v, proj.q, proj.k):
            assert t.value[0, 0] == pytest.approx(expected, abs=1e-12)

    def test_wrong_width(self):
        config = HstuConfig(d_model=4, num_heads=1, d_qk=2, d_v=2)
        params = HstuLayerParams.initialize(config, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            pointwise_projection(gt.Tensor(np.ones((2, 3))), params, config)


class TestRelativeBias:
    """Test cases for positional and temporal bias."""

    def test_both_disabled(self):
        config = HstuConfig(rab_positional=False, rab_temporal=False)
        params = HstuLayerParams.initialize(config, np.random.default_rng(0))
        assert compute_rab(np.arange(3), np.zeros(3), params, config) is None

    def test_zero_tables_give_zero_bias(self):
        config = HstuConfig()
        params = HstuLayerParams.initialize(config, np.random.default_rng(0))
        assert np.array_equal(compute_rab(np.arange(3), np.arange(3), params, config).value, np.zeros((3, 3)))

    def test_hour_gap_bucket(self):
        assert temporal_bucket(np.array([3600]), 32)[0] == 11
        assert temporal_bucket(np.array([0, -5, 1]), 32).tolist() == [0, 0, 0]

    def test_bias_reads_both_tables(self):
        config = HstuConfig(num_position_buckets=4, num_time_buckets=16)
        params = HstuLayerParams.initialize(config, np.random.default_rng(0))
        params.rab_pos.value[...] = np.arange(7, dtype=float)
        params.rab_time.value[...] = np.arange(16, dtype=float) * 100
        bias = compute_rab(np.array([0, 1]), np.array([0, 3600]), params, config).value
        assert bias[1, 0] == pytest.approx(params.rab_pos.value[1 + 3] + 1100.0)
        assert bias[0, 0] == pytest.approx(params.rab_pos.value[3])


class TestAttention:
    """Test cases for pointwise and softmax attention."""

    def test_zero_values_give_zero_output(self):
        rng = np.random.default_rng(0)
        q = gt.Tensor(rng.normal(size=(1, 3, 2)))
        k = gt.Tensor(rng.normal(size=(1, 3, 2)))
        v = gt.Tensor(np.zeros((1, 3, 2)))
        out = pointwise_attention(q, k, v, None, np.tril(np.ones((3, 3), dtype=bool)), 3.0)
        assert np.array_equal(out.value, np.zeros((3, 2)))

    def test_strongly_negative_scores(self):
        q = gt.Tensor(np.full((1, 2, 1), 1.0))
        k = gt.Tensor(np.full((1, 2, 1), -40.0))
        v = gt.Tensor(np.ones((1, 2, 1)))
        out = pointwise_attention(q, k, v, None, np.ones((2, 2), dtype=bool), 1.0)
        assert np.all(np.abs(out.value) < 1e-12)

    def test_softmax_single_key(self):
        q = gt.Tensor([[[0.3]]])
        k = gt.Tensor([[[1.7]]])
        v = gt.Tensor([[[2.0, -1.0]]])
        out = softmax_attention(q, k, v, None, np.ones((1, 1), dtype=bool))
        assert np.allclose(out.value, [[2.0, -1.0]])

    def test_softmax_equal_scores_average(self):
        q = gt.Tensor([[[1.0]]])
        k = gt.Tensor([[[0.5], [0.5]]])
        v = gt.Tensor([[[1.0], [3.0]]])
        out = softmax_attention(q, k, v, None, np.ones((1, 2), dtype=bool))
        assert out.value[0, 0] == pytest.approx(2.0)

    def test_softmax_hand_weights(self):
        q = gt.Tensor([[[1.0]]])
        k = gt.Tensor([[[math.log(1.0)], [math.log(3.0)]]])
        v = gt.Tensor([[[1.0, 0.0], [0.0, 1.0]]])
        out = softmax_attention(q, k, v, None, np.ones((1, 2), dtype=bool))
        assert np.allclose(out.value, [[0.25, 0.75]])

    def test_mask_shape_mismatch(self):
        q = gt.Tensor(np.ones((1, 2, 1)))
        with pytest.raises(ShapeError):
            pointwise_attention(q, q, q, None, np.ones((3, 3), dtype=bool), 1.0)

    def test_repeated_key_contribution_is_linear(self):
        rng = np.random.default_rng(11)
        q = rng.normal(size=(1, 1, 2))
        k0, k1 = rng.normal(size=2), rng.normal(size=2)
        v0, v1 = rng.normal(size=3), rng.normal(size=3)

        def pooled(copies):
            keys = np.vstack([k0] + [k1] * copies)[None]
            values = np.vstack([v0] + [v1] * copies)[None]
            mask = np.ones((1, 1 + copies), dtype=bool)
            return pointwise_attention(gt.Tensor(q), gt.Tensor(keys), gt.Tensor(values), None, mask, 8.0).value

        base = pooled(1)
        step = pooled(2) - base
        assert np.allclose(step[0], _silu(q[0, 0] @ k1) / 8.0 * v1, atol=1e-12)
        for copies in range(1, 7):
            assert np.max(np.abs((pooled(copies) - base) - (copies - 1) * step)) < 1e-9

    def test_bias_is_shared_by_every_head(self):
        config = HstuConfig(d_model=4, num_heads=2, d_qk=2, d_v=2, num_position_buckets=4, num_time_buckets=8)
        rng = np.random.default_rng(12)
        params = HstuLayerParams.initialize(config, rng)
        _randomize_rab(params, rng)
        rab = compute_rab(np.arange(3), np.array([0, 10, 100]), params, config)
        assert rab.shape == (3, 3)

        mask = np.tril(np.ones((3, 3), dtype=bool))
        v = rng.normal(size=(2, 3, 2))
        # zero queries leave the bias as the only score
        out = pointwise_attention(
            gt.Tensor(np.zeros((2, 3, 2))), gt.Tensor(rng.normal(size=(2, 3, 2))), gt.Tensor(v), rab, mask, 4.0
        ).value
        weights = _silu(rab.value) * mask / 4.0
        for head in range(2):
            assert np.allclose(out[:, 2 * head: 2 * head + 2], weights @ v[head], atol=1e-12)


class TestHstuLayer:
    """Test cases for full layer forward passes."""

    @pytest.fixture
    def small_config(self):
        return HstuConfig(
            d_model=2, num_heads=1, d_qk=2, d_v=2, num_layers=1, max_seq_len=16,
            num_position_buckets=8, num_time_buckets=8,
        )

    def test_zero_output_projection_is_identity(self, small_config):
        params = HstuLayerParams.initialize(small_config, np.random.default_rng(0))
        params.w2.value[...] = 0.0
        x = np.random.default_rng(1).normal(size=(3, 2))
        y = hstu_layer_forward(gt.Tensor(x), params, small_config, np.tril(np.ones((3, 3), dtype=bool)), np.zeros(3))
        assert np.array_equal(y.value, x)

    def test_closed_gate_adds_bias(self, small_config):
        params = HstuLayerParams.initialize(small_config, np.random.default_rng(0))
        params.b2.value[...] = [0.5, -0.25]
        x = gt.Tensor(np.ones((3, 2)))
        pooled = gt.Tensor(np.random.default_rng(2).normal(size=(3, 2)))
        y = gated_output(x, pooled, gt.Tensor(np.zeros((3, 2))), params, small_config)
        assert np.allclose(y.value, np.ones((3, 2)) + [0.5, -0.25])

    def test_three_tokens_match_loop(self, small_config):
        rng = np.random.default_rng(3)
        params = HstuLayerParams.initialize(small_config, rng)
        _randomize_rab(params, rng)
        x = rng.normal(size=(3, 2))
        ts = np.array([0, 5, 5000])
        y = hstu_layer_forward(gt.Tensor(x), params, small_config, np.tril(np.ones((3, 3), dtype=bool)), ts)
        assert np.max(np.abs(y.value - naive_hstu_layer(x, params, small_config, ts))) < 1e-12

    def test_random_cases_match_loop(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            heads = int(rng.integers(1, 3))
            config = HstuConfig(
                d_model=int(rng.integers(1, 5)), num_heads=heads, d_qk=int(rng.integers(1, 4)),
                d_v=int(rng.integers(1, 4)), num_layers=2, max_seq_len=16,
                num_position_buckets=6, num_time_buckets=10,
            )
            layers = initialize_layers(config, rng)
            for params in layers:
                _randomize_rab(params, rng)
            n = int(rng.integers(1, 17))
            x = rng.normal(size=(n, config.d_model))
            ts = np.sort(rng.integers(0, 10000, size=n))
            batch = JaggedBatch(offsets=np.array([0, n]), tokens=gt.Tensor(x), timestamps=ts)
            y = forward_encoder(batch, layers, config).value
            expected = x
            for params in layers:
                expected = naive_hstu_layer(expected, params, config, ts)
            assert np.max(np.abs(y - expected)) < 1e-9

    def test_layer_gradients(self):
        config = HstuConfig(
            d_model=4, num_heads=1, d_qk=4, d_v=4, num_layers=1, max_seq_len=8,
            num_position_buckets=8, num_time_buckets=8,
        )
        rng = np.random.default_rng(5)
        params = HstuLayerParams.initialize(config, rng)
        _randomize_rab(params, rng)
        x = gt.Tensor(rng.normal(size=(8, 4)), requires_grad=True)
        ts = np.sort(rng.integers(0, 300, size=8))
        weights = rng.normal(size=(8, 4))
        mask = np.tril(np.ones((8, 8), dtype=bool))

        def loss():
            return gt.sum_all(gt.mul(hstu_layer_forward(x, params, config, mask, ts), weights))

        tensors = [t for _, t in params.named_tensors()] + [x]
        assert gt.grad_check(loss, tensors, step=1e-6) < 1e-4

    def test_sequences_do_not_attend_across_boundaries(self, small_config):
        rng = np.random.default_rng(6)
        layers = initialize_layers(small_config, rng)
        a, b = rng.normal(size=(2, 2)), rng.normal(size=(3, 2))
        batch = JaggedBatch(offsets=np.array([0, 2, 5]), tokens=gt.Tensor(np.vstack([a, b])), timestamps=np.zeros(5))
        joint = forward_encoder(batch, layers, small_config).value
        alone = forward_encoder(
            JaggedBatch(offsets=np.array([0, 3]), tokens=gt.Tensor(b), timestamps=np.zeros(3)), layers, small_config
        ).value
        assert np.allclose(joint[2:], alone, atol=1e-12)

    def test_no_layers_is_identity(self, small_config):
        x = np.ones((2, 2))
        batch = JaggedBatch(offsets=np.array([0, 2]), tokens=gt.Tensor(x), timestamps=np.zeros(2))
        assert np.array_equal(forward_encoder(batch, [], small_config).value, x)

    def test_bad_offsets(self):
        with pytest.raises(ShapeError):
            JaggedBatch(offsets=np.array([0, 3]), tokens=gt.Tensor(np.ones((2, 2))), timestamps=np.zeros(2))

    def test_explicit_mask_needs_matrix(self):
        with pytest.raises(ConfigurationError):
            AttentionMask("explicit")


class TestForwardEncoder:
    """Test cases for the ragged-batch stack."""

    @pytest.fixture
    def config(self):
        return HstuConfig(
            d_model=4, num_heads=2, d_qk=2, d_v=2, num_layers=2, max_seq_len=16,
            num_position_buckets=8, num_time_buckets=16,
        )

    def test_all_empty_sequences(self, config):
        batch = JaggedBatch(offsets=np.array([0, 0, 0]), tokens=gt.Tensor(np.zeros((0, 4))), timestamps=[])
        out = forward_encoder(batch, initialize_layers(config), config)
        assert out.shape == (0, 4)

    def test_empty_sequence_between_others(self, config):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(3, 4))
        batch = JaggedBatch(offsets=np.array([0, 1, 1, 3]), tokens=gt.Tensor(x), timestamps=np.zeros(3))
        assert forward_encoder(batch, initialize_layers(config), config).shape == (3, 4)

    @pytest.mark.parametrize("norm_mode", ["max_seq_len", "valid_count"])
    def test_causal_outputs_ignore_future_tokens(self, config, norm_mode):
        config.norm_mode = norm_mode
        rng = np.random.default_rng(14)
        layers = initialize_layers(config, rng)
        for params in layers:
            _randomize_rab(params, rng)
        x = rng.normal(size=(6, 4))
        ts = np.array([0, 3, 70, 900, 901, 5000])
        full = forward_encoder(JaggedBatch(np.array([0, 6]), gt.Tensor(x), ts), layers, config).value
        changed = x.copy()
        changed[4:] = rng.normal(size=(2, 4))
        edited = forward_encoder(JaggedBatch(np.array([0, 6]), gt.Tensor(changed), ts), layers, config).value
        assert np.max(np.abs(full[:4] - edited[:4])) < 1e-12
        assert np.max(np.abs(full[4:] - edited[4:])) > 1e-6


class TestTransformerLayer:
    """Test cases for the Transformer baseline."""

    def test_zero_weights_are_identity(self):
        config = HstuConfig(d_model=4, num_heads=2, d_qk=2, d_v=2, architecture="transformer", num_layers=1)
        params = TransformerLayerParams.initialize(config, np.random.default_rng(0))
        for _, tensor in params.named_tensors():
            tensor.value[...] = 0.0
        x = np.random.default_rng(1).normal(size=(3, 4))
        y = transformer_layer_forward(gt.Tensor(x), params, config, np.tril(np.ones((3, 3), dtype=bool)))
        assert np.allclose(y.value, x, atol=1e-15)

    def test_causal_outputs_ignore_future_tokens(self):
        config = HstuConfig(d_model=4, num_heads=1, d_qk=4, d_v=4, architecture="transformer", num_layers=2)
        layers = initialize_layers(config, np.random.default_rng(2))
        x = np.random.default_rng(3).normal(size=(4, 4))
        full = forward_encoder(JaggedBatch(np.array([0, 4]), gt.Tensor(x), np.zeros(4)), layers, config).value
        short = forward_encoder(JaggedBatch(np.array([0, 2]), gt.Tensor(x[:2]), np.zeros(2)), layers, config).value
        assert np.allclose(full[:2], short, atol=1e-12)


class TestActivationEstimate:
    """Test cases for activation memory estimates."""

    def test_hstu_is_fourteen_d(self):
        config = HstuConfig(d_model=512, num_heads=8, d_qk=64, d_v=64)
        assert estimate_activation_floats(config, "hstu") == 14 * 512

    def test_transformer_is_thirty_three_d(self):
        config = HstuConfig(d_model=512, num_heads=8, d_qk=64, d_v=64)
        assert estimate_activation_floats(config, "transformer") == 33 * 512

    def test_flop_counter(self):
        counter = FlopCounter()
        counter.add_matmul(2, 3, 4)
        counter.add_attention(1, 2, 2, 3, 3)
        assert counter.as_dict() == {"attention": 48, "projection": 48, "total": 96}
