import numpy as np
import pytest

from caslm import engine as E
from caslm import layers as L
from caslm.engine import ContractError, DimensionError, Tensor
from caslm.gradcheck import check_gradients, projected


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def test_attention_single_position_is_value_projection(rng):
    p = L.AttentionParams(rng, 8, 2)
    x = Tensor(rng.normal(size=(1, 8)))
    out = L.masked_self_attention(x, p).data
    v = x.data @ p.value.weight.data + p.value.bias.data
    expected = v @ p.out.weight.data + p.out.bias.data
    np.testing.assert_allclose(out, expected, atol=1e-14)


def test_attention_rejects_long_sequence(rng):
    p = L.AttentionParams(rng, 4, 2)
    with pytest.raises(ContractError):
        L.masked_self_attention(Tensor(np.zeros((5, 4))), p, max_len=4)


def test_heads_must_divide_hidden(rng):
    with pytest.raises(DimensionError):
        L.AttentionParams(rng, 6, 4)


def _dense_attention(x, p, causal):
    """Single-example multi-head attention with explicit -inf masking."""
    steps, hidden = x.shape
    heads = p.heads
    w = hidden // heads
    q = x @ p.query.weight.data + p.query.bias.data
    k = x @ p.key.weight.data + p.key.bias.data
    v = x @ p.value.weight.data + p.value.bias.data
    ctx = np.zeros_like(x)
    for h in range(heads):
        sl = slice(h * w, (h + 1) * w)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(w)
        if causal:
            s = s + np.triu(np.full((steps, steps), -np.inf), 1)
        a = np.exp(s - s.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        ctx[:, sl] = a @ v[:, sl]
    return ctx @ p.out.weight.data + p.out.bias.data


def test_attention_matches_dense_oracle_and_mask_matters(rng):
    p = L.AttentionParams(rng, 6, 3)
    for param in p.parameters():
        param.data = rng.normal(0, 0.5, param.shape)
    x = rng.normal(size=(5, 6))
    masked = L.masked_self_attention(Tensor(x), p).data
    unmasked = L.masked_self_attention(Tensor(x), p, causal=False).data
    np.testing.assert_allclose(masked, _dense_attention(x, p, True), atol=1e-12)
    np.testing.assert_allclose(unmasked, _dense_attention(x, p, False), atol=1e-12)
    # the last position sees everything either way; earlier ones do not
    np.testing.assert_allclose(masked[-1], unmasked[-1], atol=1e-12)
    assert np.abs(masked[0] - unmasked[0]).max() > 1e-3


def test_attention_batched_equals_per_example(rng):
    p = L.AttentionParams(rng, 4, 2)
    x = rng.normal(size=(3, 5, 4))
    batched = L.masked_self_attention(Tensor(x), p).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], L.masked_self_attention(Tensor(x[b]), p).data, atol=1e-14)


def test_block_causal_bit_exact(rng):
    p = L.TransformerBlockParams(rng, 8, 2)
    for param in p.parameters():
        param.data = param.data + rng.normal(0, 0.2, param.shape)
    for _ in range(20):
        x = rng.normal(size=(6, 8))
        j = int(rng.integers(1, 6))
        y = x.copy()
        y[j] += rng.normal(size=8)
        a = L.transformer_block_forward(Tensor(x), p).data
        b = L.transformer_block_forward(Tensor(y), p).data
        np.testing.assert_array_equal(a[:j], b[:j])
        assert not np.array_equal(a[j], b[j])


def test_block_with_zero_sublayers_is_normed_residual(rng):
    p = L.TransformerBlockParams(rng, 8, 2)
    for lin in (p.attn.out, p.ff_out):
        lin.weight.data[:] = 0.0
        lin.bias.data[:] = 0.0
    x = rng.normal(size=(4, 8))

    def ln(v):
        mu = v.mean(-1, keepdims=True)
        var = ((v - mu) ** 2).mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + 1e-5)

    np.testing.assert_allclose(L.transformer_block_forward(Tensor(x), p).data, ln(ln(x)), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_block_gradcheck(seed):
    rng = np.random.default_rng(seed)
    p = L.TransformerBlockParams(rng, 4, 2, ff_mult=2)
    for param in p.parameters():
        param.data = param.data + rng.normal(0, 0.3, param.shape)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    errs = check_gradients(projected(lambda: L.transformer_block_forward(x, p), rng), [x] + p.parameters())
    assert max(errs.values()) < 1e-4, errs


def test_lstm_zero_weights_gives_zero_output(rng):
    p = L.LSTMLayerParams(rng, 3, 4)
    for param in p.parameters():
        param.data[:] = 0.0
    out, (h, c) = L.lstm_forward(Tensor(rng.normal(size=(2, 5, 3))), p)
    assert np.all(out.data == 0.0) and np.all(h == 0.0) and np.all(c == 0.0)


def test_lstm_outputs_bounded(rng):
    p = L.LSTMLayerParams(rng, 3, 4)
    for param in p.parameters():
        param.data = rng.normal(0, 5, param.shape)
    out, _ = L.lstm_forward(Tensor(rng.normal(0, 10, (4, 20, 3))), p)
    assert np.all(np.abs(out.data) < 1.0)


def test_lstm_matches_scalar_recurrence(rng):
    hidden, width = 3, 2
    p = L.LSTMLayerParams(rng, width, hidden)
    x = rng.normal(size=(3, width))
    h0, c0 = rng.normal(size=(1, hidden)), rng.normal(size=(1, hidden))
    out, (h_fin, c_fin) = L.lstm_forward(Tensor(x), p, (h0, c0))

    W, U, b = p.w_ih.data, p.w_hh.data, p.bias.data
    h, c = list(h0[0]), list(c0[0])
    for t in range(3):
        z = [b[r] + sum(W[r, d] * x[t, d] for d in range(width)) + sum(U[r, j] * h[j] for j in range(hidden))
             for r in range(4 * hidden)]
        new_h, new_c = [], []
        for u in range(hidden):
            i = sigmoid(z[u])
            f = sigmoid(z[hidden + u])
            g = np.tanh(z[2 * hidden + u])
            o = sigmoid(z[3 * hidden + u])
            cu = f * c[u] + i * g
            new_c.append(cu)
            new_h.append(o * np.tanh(cu))
        h, c = new_h, new_c
        np.testing.assert_allclose(out.data[t], h, atol=1e-12)
    np.testing.assert_allclose(h_fin[0], h, atol=1e-12)
    np.testing.assert_allclose(c_fin[0], c, atol=1e-12)


def test_lstm_state_shape_checked(rng):
    p = L.LSTMLayerParams(rng, 3, 4)
    with pytest.raises(DimensionError):
        L.lstm_forward(Tensor(np.zeros((2, 5, 3))), p, (np.zeros((2, 3)), np.zeros((2, 3))))


def test_lstm_weight_shapes(rng):
    p = L.LSTMLayerParams(rng, 5, 4)
    assert p.w_ih.shape == (16, 5) and p.w_hh.shape == (16, 4) and p.bias.shape == (16,)


def test_mos_rows_normalize(rng):
    p = L.MoSParams(rng, 6, 13, 4)
    for param in p.parameters():
        param.data = rng.normal(0, 2, param.shape)
    logp = L.mos_forward(Tensor(rng.normal(0, 3, (2, 7, 6))), p).data
    assert np.max(np.abs(np.exp(logp).sum(-1) - 1.0)) < 1e-10


def test_mos_single_component_equals_plain_softmax(rng):
    mos = L.MoSParams(rng, 6, 9, 1)
    plain = L.SoftmaxHeadParams(rng, 6, 9)
    plain.proj.weight.data = mos.decoder.weight.data
    plain.proj.bias.data = mos.decoder.bias.data
    h = Tensor(rng.normal(size=(5, 6)))
    ctx = E.tanh(mos.latent(h))
    a = L.mos_forward(h, mos).data
    b = L.softmax_head_forward(ctx, plain).data
    assert np.max(np.abs(a - b)) < 1e-12


def test_mos_matches_term_by_term_mixture(rng):
    hidden, vocab, k = 4, 5, 3
    p = L.MoSParams(rng, hidden, vocab, k)
    h = rng.normal(size=(2, hidden))
    logp = L.mos_forward(Tensor(h), p).data
    Wl, bl = p.latent.weight.data, p.latent.bias.data
    Wp, bp = p.prior.weight.data, p.prior.bias.data
    Wd, bd = p.decoder.weight.data, p.decoder.bias.data
    for t in range(2):
        prior_logits = h[t] @ Wp + bp
        pi = np.exp(prior_logits) / np.exp(prior_logits).sum()
        mix = np.zeros(vocab)
        for j in range(k):
            ctx = np.tanh(h[t] @ Wl[:, j * hidden:(j + 1) * hidden] + bl[j * hidden:(j + 1) * hidden])
            logits = ctx @ Wd + bd
            mix += pi[j] * np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(np.exp(logp[t]), mix, atol=1e-12)


def test_mos_rejects_zero_components(rng):
    with pytest.raises(ValueError):
        L.MoSParams(rng, 4, 5, 0)


@pytest.mark.parametrize("seed", range(5))
def test_heads_gradcheck(seed):
    rng = np.random.default_rng(seed)
    mos = L.MoSParams(rng, 4, 6, 3)
    h = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    errs = check_gradients(projected(lambda: L.mos_forward(h, mos), rng), [h] + mos.parameters())
    assert max(errs.values()) < 1e-4, errs
    table = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    errs = check_gradients(projected(lambda: L.tied_head_forward(h, table), rng), [h, table])
    assert max(errs.values()) < 1e-4, errs


def test_embed_flags(rng):
    ids = np.array([[3, 1, 4]])
    full = L.EmbeddingParams(rng, 6, 4, 8, True, True)
    out = L.embed(ids, full).data
    np.testing.assert_allclose(out, full.tok.data[ids] + full.pos.data[:3] + full.seg.data[0], atol=1e-15)
    bare = L.EmbeddingParams(rng, 6, 4, 8, False, False)
    assert bare.pos is None and bare.seg is None
    np.testing.assert_array_equal(L.embed(ids, bare).data, bare.tok.data[ids])
    assert [n for n, _ in bare.named_parameters()] == ["tok"]


def test_embed_rejects_bad_ids_and_long_input(rng):
    p = L.EmbeddingParams(rng, 6, 4, 3)
    with pytest.raises(IndexError):
        L.embed(np.array([[6]]), p)
    with pytest.raises(ContractError):
        L.embed(np.zeros((1, 4), dtype=int), p)


def test_embedding_grad_only_on_looked_up_rows(rng):
    p = L.EmbeddingParams(rng, 7, 3, 8)
    ids = np.array([[2, 5, 2]])
    errs = check_gradients(projected(lambda: L.embed(ids, p), rng), [p.tok])
    assert errs[0] < 1e-6
    untouched = [r for r in range(7) if r not in (2, 5)]
    assert np.all(p.tok.grad[untouched] == 0.0)
    assert np.all(np.abs(p.tok.grad[[2, 5]]) > 0)


def test_dropout_only_with_rng(rng):
    p = L.TransformerBlockParams(rng, 4, 2)
    x = Tensor(rng.normal(size=(3, 4)))
    a = L.transformer_block_forward(x, p, resid_dropout=0.5).data
    b = L.transformer_block_forward(x, p, resid_dropout=0.5).data
    np.testing.assert_array_equal(a, b)
    c = L.transformer_block_forward(x, p, rng=np.random.default_rng(0), resid_dropout=0.5).data
    assert not np.array_equal(a, c)


def test_params_naming(rng):
    p = L.TransformerBlockParams(rng, 4, 2)
    names = [n for n, _ in p.named_parameters("b.")]
    assert names[0] == "b.attn.query.weight"
    assert "b.ln2.gain" in names and len(names) == len(set(names)) == 16
