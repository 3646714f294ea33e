import io

import pytest
import torch

from conmamba_asr import InputError
from conmamba_asr.decoder import CrossAttention, DecoderConfig, DecoderLayer, MambaDecoder
from conmamba_asr.encoder import EncodedSequence
from conmamba_asr.ssm import grad_check

from conftest import randomize_

D = 16


def make_decoder(seed=0, **kw):
    torch.manual_seed(seed)
    cfg = DecoderConfig(**{**dict(num_layers=2, num_heads=4, d_model=D, d_ff=32, vocab_size=11,
                                  d_state=4, dropout=0.0), **kw})
    return MambaDecoder(cfg).double().eval()


def make_enc(B=2, T=9, lengths=None, seed=0):
    g = torch.Generator().manual_seed(seed)
    frames = torch.randn(B, T, D, generator=g, dtype=torch.float64)
    lengths = torch.full((B,), T) if lengths is None else torch.tensor(lengths)
    return EncodedSequence(frames, lengths)


# --- cross-attention ------------------------------------------------------------


def test_single_frame_returns_value_projection():
    attn = CrossAttention(D, 4).double()
    with torch.no_grad():
        attn.out_proj.weight.copy_(torch.eye(D))
        attn.out_proj.bias.zero_()
    enc = torch.randn(1, 1, D, dtype=torch.float64)
    q = torch.randn(1, 3, D, dtype=torch.float64)
    out = attn(q, enc)
    expected = attn.v_proj(enc).expand(1, 3, D)
    torch.testing.assert_close(out, expected)


def test_zero_query_gives_uniform_weights_over_valid_frames():
    attn = CrossAttention(D, 4).double()
    with torch.no_grad():
        attn.q_proj.weight.zero_()
        attn.q_proj.bias.zero_()
    enc = torch.randn(2, 6, D, dtype=torch.float64)
    mask = torch.tensor([[True] * 6, [True] * 4 + [False] * 2])
    _, w = attn(torch.randn(2, 2, D, dtype=torch.float64), enc, mask, return_weights=True)
    torch.testing.assert_close(w[0], torch.full_like(w[0], 1 / 6))
    torch.testing.assert_close(w[1, ..., :4], torch.full_like(w[1, ..., :4], 1 / 4))
    assert torch.equal(w[1, ..., 4:], torch.zeros_like(w[1, ..., 4:]))


def test_rows_stochastic_and_masked_columns_zero():
    attn = randomize_(CrossAttention(D, 4).double(), 0.5)
    enc = torch.randn(2, 7, D, dtype=torch.float64)
    q = torch.randn(2, 5, D, dtype=torch.float64)
    mask = torch.tensor([[True] * 7, [True] * 3 + [False] * 4])
    _, w = attn(q, enc, mask, return_weights=True)
    # independent softmax recomputation
    qh = attn.q_proj(q).view(2, 5, 4, 4).transpose(1, 2)
    kh = attn.k_proj(enc).view(2, 7, 4, 4).transpose(1, 2)
    s = (qh @ kh.transpose(-1, -2)) / 2.0
    s = s.masked_fill(~mask[:, None, None, :], -1e300)
    ref = torch.exp(s - s.max(-1, keepdim=True).values)
    ref = ref / ref.sum(-1, keepdim=True)
    torch.testing.assert_close(w, ref)
    torch.testing.assert_close(w.sum(-1), torch.ones(2, 4, 5, dtype=torch.float64), atol=1e-6, rtol=0)
    assert torch.equal(w[1, ..., 3:], torch.zeros_like(w[1, ..., 3:]))


def test_fully_masked_raises():
    attn = CrossAttention(D, 4).double()
    with pytest.raises(InputError):
        attn(torch.randn(1, 1, D, dtype=torch.float64), torch.randn(1, 3, D, dtype=torch.float64),
             torch.zeros(1, 3, dtype=torch.bool))


# --- decoder layer -----------------------------------------------------------


def _layer(seed=0):
    torch.manual_seed(seed)
    cfg = DecoderConfig(num_layers=1, num_heads=4, d_model=D, d_ff=32, vocab_size=5, d_state=4, dropout=0.0)
    return randomize_(DecoderLayer(cfg).double(), 0.3, seed)


def test_layer_causality():
    layer = _layer()
    enc = make_enc(1)
    mem = layer.attn.memory(enc.frames)
    y = torch.randn(1, 10, D, dtype=torch.float64)
    y2 = y.clone()
    y2[:, 6] += 1.0
    a, _ = layer(y, mem, enc.mask)
    b, _ = layer(y2, mem, enc.mask)
    assert torch.equal(a[:, :6], b[:, :6])
    assert not torch.equal(a[:, 6:], b[:, 6:])


def test_zero_encoder_removes_attention_contribution():
    layer = _layer()
    with torch.no_grad():
        layer.attn.v_proj.bias.zero_()
        layer.attn.out_proj.bias.zero_()
    enc = torch.zeros(1, 5, D, dtype=torch.float64)
    mask = torch.ones(1, 5, dtype=torch.bool)
    y = torch.randn(1, 4, D, dtype=torch.float64)
    out, _ = layer(y, layer.attn.memory(enc), mask)
    m, _ = layer.mamba(layer.ln_mamba(y))
    h = y + m
    torch.testing.assert_close(out, h + layer.ff(layer.ln_ff(h)))


def test_grad_check_decoder_layer():
    layer = _layer(1)
    enc = make_enc(1, 5)
    y = torch.randn(1, 6, D, dtype=torch.float64)
    leaves = {"y": y, "enc": enc.frames, **dict(layer.named_parameters())}
    weights = torch.linspace(-1, 1, D, dtype=torch.float64)

    def run():
        return layer(y, layer.attn.memory(enc.frames), enc.mask)[0] * weights

    report = grad_check(run, leaves, max_entries=8)
    assert max(report.values()) < 1e-3, report


# --- full decoder ---------------------------------------------------------------


def test_bos_only_logits():
    dec = make_decoder()
    logits = dec(torch.tensor([[1]]), make_enc(1))
    assert logits.shape == (1, 1, 11) and bool(torch.isfinite(logits).all())


@pytest.mark.parametrize("sinusoidal", [False, True])
def test_suffix_perturbation_bit_exact(sinusoidal):
    dec = randomize_(make_decoder(sinusoidal_positions=sinusoidal), 0.3)
    enc = make_enc(1)
    toks = torch.tensor([[1, 4, 5, 6, 7, 8, 9, 3]])
    other = toks.clone()
    other[0, 5:] = torch.tensor([2, 2, 10])
    a, b = dec(toks, enc), dec(other, enc)
    assert torch.equal(a[:, :5], b[:, :5])
    assert not torch.equal(a[:, 5:], b[:, 5:])


def test_incremental_matches_full_pass():
    dec = randomize_(make_decoder(), 0.3)
    enc = make_enc(2, 9, [9, 5])
    toks = torch.randint(0, 11, (2, 64), generator=torch.Generator().manual_seed(0))
    full = dec(toks, enc)
    state = dec.init_state(enc)
    steps = []
    for t in range(toks.shape[1]):
        logits, state = dec.decode_step(state, toks[:, t])
        steps.append(logits)
    assert (torch.stack(steps, 1) - full).abs().max().item() < 1e-5


def test_first_step_equals_teacher_forced_row():
    dec = make_decoder()
    enc = make_enc(1)
    bos = torch.tensor([1])
    logits, _ = dec.decode_step(dec.init_state(enc), bos)
    assert torch.equal(logits, dec(bos[None], enc)[:, 0])


def test_serialized_state_continues_identically():
    dec = make_decoder()
    enc = make_enc(1)
    state = dec.init_state(enc)
    for tok in (1, 5, 6):
        _, state = dec.decode_step(state, torch.tensor([tok]))
    buf = io.BytesIO()
    torch.save(state, buf)
    buf.seek(0)
    restored = torch.load(buf, weights_only=False)
    a, _ = dec.decode_step(state, torch.tensor([7]))
    b, _ = dec.decode_step(restored, torch.tensor([7]))
    assert torch.equal(a, b)


def test_state_select_broadcasts_memory():
    dec = make_decoder()
    enc = make_enc(1)
    state = dec.init_state(enc)
    _, state = dec.decode_step(state, torch.tensor([1]))
    picked = state.select(torch.tensor([0, 0, 0]))
    logits, _ = dec.decode_step(picked, torch.tensor([4, 5, 6]))
    for k, tok in enumerate((4, 5, 6)):
        single, _ = dec.decode_step(state, torch.tensor([tok]))
        torch.testing.assert_close(logits[k], single[0], rtol=1e-12, atol=1e-12)


def test_tied_embeddings_and_untied_option():
    assert make_decoder().output is None
    assert make_decoder(tie_embeddings=False).output is not None


def test_out_of_vocab_and_head_divisibility():
    with pytest.raises(InputError):
        make_decoder()(torch.tensor([[11]]), make_enc(1))
    with pytest.raises(InputError):
        DecoderConfig(d_model=10, num_heads=4)
