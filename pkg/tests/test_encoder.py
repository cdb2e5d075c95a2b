"""Speech encoder: length laws, freezes, numeric health."""

import numpy as np
import pytest

from bridgeasr import tensor as T
from bridgeasr.config import EncoderConfig
from bridgeasr.encoder import InputTooShortError, SpeechEncoder, conv_stack_out_len, min_samples


@pytest.fixture
def cfg():
    return EncoderConfig(conv_channels=8, n_layers=2, d_model=16, n_heads=2, d_ff=32)


@pytest.fixture
def enc(cfg):
    return SpeechEncoder(np.random.default_rng(0), cfg)


def test_one_second_gives_49_frames(cfg):
    assert conv_stack_out_len(16000, cfg) == 49


def test_three_token_utterance_frames(cfg):
    # 3 tokens * 1280 + 2 gaps * 160 = 4160 samples; layer-by-layer valid
    # conv arithmetic gives 12 frames.
    assert conv_stack_out_len(4160, cfg) == 12


def test_frame_shift_is_20ms(cfg):
    assert cfg.total_stride == 320  # 20 ms at 16 kHz


def test_too_short_error_names_minimum(cfg):
    m = min_samples(cfg)
    assert conv_stack_out_len(m, cfg) == 1
    with pytest.raises(InputTooShortError) as exc:
        conv_stack_out_len(m - 1, cfg)
    assert str(m) in str(exc.value)


def test_wave_encode_shapes(enc, cfg):
    rng = np.random.default_rng(1)
    wave = rng.normal(0, 0.1, size=4160).astype(np.float32)
    feats, lens = enc.wave_encode(wave)
    assert lens == [12]
    assert feats.shape == (1, 12, cfg.d_model)


def test_encode_preserves_shape_t1(enc, cfg):
    x = T.Tensor(np.random.default_rng(2).normal(size=(1, 1, cfg.d_model)).astype(np.float32))
    out = enc.encode(x)
    assert out.shape == (1, 1, cfg.d_model)


def test_permutation_sensitivity(enc, cfg):
    # Same frame multiset, different order: outputs must differ (positions).
    rng = np.random.default_rng(3)
    frames = rng.normal(size=(1, 6, cfg.d_model)).astype(np.float32)
    out1 = enc.encode(T.Tensor(frames)).data
    shuffled = frames[:, ::-1].copy()
    out2 = enc.encode(T.Tensor(shuffled)).data
    assert not np.allclose(out1[:, 0], out2[:, -1], atol=1e-5)


def test_zeroed_residual_paths_keep_outputs_finite(cfg):
    enc = SpeechEncoder(np.random.default_rng(4), cfg)
    for blk in enc.blocks:
        blk.attn.wo.w.data[:] = 0.0
        blk.ffn.w2.w.data[:] = 0.0
    wave = np.random.default_rng(5).normal(0, 0.5, size=4000).astype(np.float32)
    out, _ = enc(wave[None, :])
    assert np.all(np.isfinite(out.data))


def test_freeze_conv_zero_gradients(cfg):
    enc = SpeechEncoder(np.random.default_rng(6), cfg)
    enc.apply_freezes()  # freeze_conv defaults true
    params = enc.named_parameters()
    enc.zero_grad()
    wave = np.random.default_rng(7).normal(0, 0.3, size=4160).astype(np.float32)
    out, _ = enc(wave[None, :])
    (out * out).sum().backward(leaves=params.values())
    for name, p in params.items():
        if name.startswith("conv"):
            assert np.array_equal(p.grad, np.zeros_like(p.data)), name
        elif name.startswith("proj"):
            assert np.abs(p.grad).sum() > 0, name


def test_freeze_all_still_propagates_downstream(cfg):
    cfg_frozen = EncoderConfig(conv_channels=8, n_layers=2, d_model=16, n_heads=2,
                               d_ff=32, freeze_all=True)
    enc = SpeechEncoder(np.random.default_rng(8), cfg_frozen)
    enc.apply_freezes()
    head = T.Tensor(np.random.default_rng(9).normal(size=(16, 4)).astype(np.float32),
                    requires_grad=True)
    wave = np.random.default_rng(10).normal(0, 0.3, size=4160).astype(np.float32)
    out, _ = enc(wave[None, :])
    loss = (T.matmul(out.reshape((-1, 16)), head)).sum()
    loss.backward(leaves=list(enc.parameters()) + [head])
    for p in enc.parameters():
        assert np.array_equal(p.grad, np.zeros_like(p.data))
    assert np.abs(head.grad).sum() > 0


def test_padding_mask_isolates_utterances(enc, cfg):
    # A short utterance batched with a long one must get the same frames as alone.
    rng = np.random.default_rng(11)
    w1 = rng.normal(0, 0.3, size=4160).astype(np.float32)
    w2 = rng.normal(0, 0.3, size=7040).astype(np.float32)
    alone, _ = enc(w1[None, :])
    padded = np.zeros((2, 7040), dtype=np.float32)
    padded[0, :4160] = w1
    padded[1] = w2
    both, lens = enc(padded, [4160, 7040])
    assert np.allclose(alone.data[0], both.data[0, : lens[0]], atol=1e-5)
