"""Encoder, fusion modules, and full-model shape/behavior contracts."""

import numpy as np
import pytest

from mlffnet import tensor as T
from mlffnet.encoder import Encoder, EncoderConfig
from mlffnet.errors import ConfigurationError, ContractViolation
from mlffnet.layers import BatchNorm2d, Conv2d, ConvBNReLU
from mlffnet.model import (GlobalAttention, MlffNet, MultiScaleAttention,
                           DeepFeatureEnhancement, PRED_EPS, VARIANTS,
                           build_model)
from mlffnet.tensor import Tape, Tensor


def rand_feat(rng, shape):
    return Tensor(rng.randn(*shape))


# ---------------------------------------------------------------------------
# layers


def test_batchnorm_train_mode_normalizes():
    rng = np.random.RandomState(0)
    bn = BatchNorm2d(3)
    x = Tensor(rng.randn(4, 3, 5, 5) * 3 + 2)
    out = bn.forward(x)
    assert np.allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    assert np.allclose(out.data.std(axis=(0, 2, 3)), 1.0, atol=1e-3)


def test_batchnorm_eval_uses_running_stats():
    rng = np.random.RandomState(1)
    bn = BatchNorm2d(2)
    x = Tensor(rng.randn(8, 2, 6, 6) * 2 + 1)
    bn.forward(x)  # updates running stats
    bn.training = False
    y = bn.forward(x)
    mu = bn.running_mean.reshape(1, 2, 1, 1)
    inv = 1.0 / np.sqrt(bn.running_var.reshape(1, 2, 1, 1) + bn.eps)
    assert np.allclose(y.data, (x.data - mu) * inv, atol=1e-10)


def test_batchnorm_channel_mismatch():
    bn = BatchNorm2d(4)
    with pytest.raises(ContractViolation):
        bn.forward(Tensor(np.zeros((1, 3, 4, 4))))


def test_module_named_params_stable_and_counted():
    rng = np.random.RandomState(2)
    block = ConvBNReLU(rng, 3, 8)
    names = [n for n, _ in block.named_params()]
    assert names == ["conv.weight", "conv.bias", "bn.gamma", "bn.beta"]
    assert block.param_count() == 8 * 3 * 9 + 8 + 8 + 8
    buffers = dict(block.buffers())
    assert set(buffers) == {"bn.running_mean", "bn.running_var"}


# ---------------------------------------------------------------------------
# encoder


def test_encoder_config_validation():
    with pytest.raises(ConfigurationError):
        EncoderConfig(channels=(8, 16, 24))
    with pytest.raises(ConfigurationError):
        EncoderConfig(channels=(8, 16, 12, 32))
    with pytest.raises(ConfigurationError):
        EncoderConfig(blocks_per_stage=0)


def test_encoder_pyramid_shapes():
    rng = np.random.RandomState(3)
    cfg = EncoderConfig((4, 8, 12, 16))
    enc = Encoder(rng, cfg)
    pyr = enc.forward(Tensor(rng.rand(2, 3, 64, 96)))
    assert pyr.x1.shape == (2, 4, 16, 24)   # stride 4
    assert pyr.x2.shape == (2, 8, 8, 12)    # stride 8
    assert pyr.x3.shape == (2, 12, 4, 6)    # stride 16
    assert pyr.x4.shape == (2, 16, 2, 3)    # stride 32
    assert pyr.strides == (4, 8, 16, 32)


def test_encoder_input_contract():
    rng = np.random.RandomState(4)
    enc = Encoder(rng, EncoderConfig())
    with pytest.raises(ContractViolation):
        enc.forward(Tensor(np.zeros((1, 1, 64, 64))))
    with pytest.raises(ContractViolation):
        enc.forward(Tensor(np.zeros((1, 3, 60, 64))))


# ---------------------------------------------------------------------------
# fusion modules


def test_mam_shape_and_channel_requirement():
    rng = np.random.RandomState(5)
    mam = MultiScaleAttention(rng, 8)
    x = rand_feat(rng, (2, 8, 16, 16))
    out = mam.forward(x)
    assert out.shape == x.shape
    with pytest.raises(ConfigurationError):
        MultiScaleAttention(rng, 6)


def test_mam_zero_weight_oracle():
    """With all conv weights and biases zeroed, the residual path gives
    out = sigmoid(0) gate * (0 + x) = 0.5 * x."""
    rng = np.random.RandomState(6)
    mam = MultiScaleAttention(rng, 8)
    for _, p in mam.named_params():
        p.data[...] = 0.0
    x = rand_feat(rng, (1, 8, 8, 8))
    out = mam.forward(x)
    assert np.allclose(out.data, 0.5 * x.data, atol=1e-12)


def test_hfem_shapes_and_ratio_contract():
    rng = np.random.RandomState(7)
    hfem = DeepFeatureEnhancement(rng, (8, 12, 16), width=6)
    x2 = rand_feat(rng, (1, 8, 16, 16))
    x3 = rand_feat(rng, (1, 12, 8, 8))
    x4 = rand_feat(rng, (1, 16, 4, 4))
    t2, t3, t4 = hfem.forward(x2, x3, x4)
    assert t2.shape == (1, 6, 16, 16)
    assert t3.shape == (1, 6, 8, 8)
    assert t4.shape == (1, 6, 4, 4)
    with pytest.raises(ContractViolation):
        hfem.forward(x2, x3, rand_feat(rng, (1, 16, 5, 5)))


def test_gam_uniform_attention_equals_spatial_mean():
    """Zeroed Q/K projections make every attention row uniform, so the
    attended value must equal the spatial mean of V at every position."""
    rng = np.random.RandomState(8)
    gam = GlobalAttention(rng, dec_channels=6, enc_channels=4, attn_width=8)
    gam.query.weight.data[...] = 0.0
    gam.query.bias.data[...] = 0.0
    gam.key.weight.data[...] = 0.0
    gam.key.bias.data[...] = 0.0
    dec = rand_feat(rng, (2, 6, 8, 8))
    enc = rand_feat(rng, (2, 4, 8, 8))
    out, attn = gam.forward(dec, enc, return_attention=True)
    hw = 64
    assert np.allclose(attn.data, 1.0 / hw, atol=1e-12)
    fused = gam.fuse.forward(T.concat_channels([dec, enc]))
    v = gam.value.forward(fused).data.reshape(2, 8, hw)
    v_mean = v.mean(axis=2)  # [n, attn_width]
    # reconstruct the attended value the module aggregated
    expected = np.broadcast_to(v_mean[:, :, None], (2, 8, hw)).reshape(2, 8, 8, 8)
    got_residual = out.data - dec.data
    ref_residual = gam.out.forward(Tensor(expected)).data
    assert np.allclose(got_residual, ref_residual, atol=1e-9)


def test_gam_rows_are_stochastic_and_spatial_contract():
    rng = np.random.RandomState(9)
    gam = GlobalAttention(rng, 6, 4, 8)
    dec = rand_feat(rng, (1, 6, 4, 4))
    enc = rand_feat(rng, (1, 4, 4, 4))
    out, attn = gam.forward(dec, enc, return_attention=True)
    assert out.shape == dec.shape
    assert attn.shape == (1, 16, 16)
    assert np.allclose(attn.data.sum(axis=-1), 1.0)
    with pytest.raises(ContractViolation):
        gam.forward(dec, rand_feat(rng, (1, 4, 8, 8)))


# ---------------------------------------------------------------------------
# full model


@pytest.mark.parametrize("variant", VARIANTS)
def test_model_output_shapes(variant):
    rng = np.random.RandomState(10)
    model = build_model(variant, EncoderConfig((4, 8, 12, 16)),
                        decoder_width=8, attn_width=4)
    x = Tensor(rng.rand(1, 3, 64, 32))
    preds = model.forward(x)
    for p in preds.maps():
        assert p.shape == (1, 1, 64, 32)
        assert p.data.min() >= PRED_EPS
        assert p.data.max() <= 1.0 - PRED_EPS


def test_bas_duplicates_single_head():
    rng = np.random.RandomState(11)
    model = build_model("bas")
    preds = model.forward(Tensor(rng.rand(1, 3, 32, 32)))
    assert preds.p1 is preds.p2 is preds.p3


def test_unknown_variant_rejected():
    with pytest.raises(ConfigurationError):
        build_model("resnet")


def test_param_counts_increase_along_ladder():
    counts = [build_model(v).param_count() for v in VARIANTS]
    assert all(a < b for a, b in zip(counts, counts[1:]))


def test_model_forward_is_deterministic_and_trainable():
    model = build_model("mam", EncoderConfig((4, 8, 12, 16)), decoder_width=8)
    rng = np.random.RandomState(12)
    x = Tensor(rng.rand(1, 3, 32, 32))
    a = model.forward(x).p1.data.copy()
    b = model.forward(x).p1.data
    assert np.array_equal(a, b)
    tape = Tape()
    with tape:
        preds = model.forward(x)
        loss = T.reduce(preds.p1, "mean", "all")
    grads = tape.backward(loss)
    named = dict(model.named_params())
    # every encoder/decoder parameter receives some gradient signal
    assert any(
        np.abs(grads.get(p)).max() > 0 for n, p in named.items()
        if n.startswith("encoder.stage1")
    )
