"""Building blocks: embeddings, causal Transformer blocks, LSTMs and output heads.

Every parameter container exposes ``named_parameters()`` yielding dotted names,
which is what checkpoints, freezing masks and the optimizer key on. Forward
functions accept an optional ``rng``; when given, dropout masks are drawn from
it, otherwise dropout is off (evaluation).
"""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import engine as E
from .engine import ContractError, DimensionError, Tensor

LN_EPS = 1e-5


def normal_init(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Params:
    """Base for parameter containers: Tensors, nested Params and lists of Params."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Params):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Params):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def _drop(x: Tensor, rng: Optional[np.random.Generator], rate: float) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    return E.dropout(x, E.dropout_mask(rng, x.shape, rate))


class Linear(Params):
    def __init__(self, weight: np.ndarray, bias: np.ndarray | None):
        self.weight = Tensor(weight, requires_grad=True)
        if bias is not None:
            self.bias = Tensor(bias, requires_grad=True)

    @classmethod
    def normal(cls, rng, n_in: int, n_out: int, std: float = 0.02) -> "Linear":
        return cls(normal_init(rng, (n_in, n_out), std), np.zeros(n_out))

    @classmethod
    def uniform(cls, rng, n_in: int, n_out: int) -> "Linear":
        return cls(
            fan_in_uniform(rng, (n_in, n_out), n_in), fan_in_uniform(rng, (n_out,), n_in)
        )

    def __call__(self, x: Tensor) -> Tensor:
        return E.linear(x, self.weight, getattr(self, "bias", None))


class LayerNormParams(Params):
    def __init__(self, size: int):
        self.gain = Tensor(np.ones(size), requires_grad=True)
        self.bias = Tensor(np.zeros(size), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return E.layer_norm(x, self.gain, self.bias, LN_EPS)


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


class EmbeddingParams(Params):
    """Token table plus optional learned positional and single-segment tables."""

    def __init__(
        self,
        rng: np.random.Generator,
        vocab_size: int,
        hidden: int,
        max_len: int,
        use_positional: bool = True,
        use_segment: bool = True,
    ):
        self.tok = Tensor(normal_init(rng, (vocab_size, hidden)), requires_grad=True)
        self.pos = (
            Tensor(normal_init(rng, (max_len, hidden)), requires_grad=True)
            if use_positional
            else None
        )
        self.seg = (
            Tensor(normal_init(rng, (1, hidden)), requires_grad=True) if use_segment else None
        )
        self.max_len = max_len

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}tok", self.tok
        if self.pos is not None:
            yield f"{prefix}pos", self.pos
        if self.seg is not None:
            yield f"{prefix}seg", self.seg


def embed(tokens, params: EmbeddingParams, positions=None, segment_ids=None) -> Tensor:
    """Sum of the enabled embedding lookups for ``tokens`` (..., T)."""
    tokens = np.asarray(tokens)
    out = E.embedding(params.tok, tokens)
    steps = tokens.shape[-1]
    if params.pos is not None:
        if steps > params.max_len:
            raise ContractError(f"sequence length {steps} exceeds max_len {params.max_len}")
        if positions is None:
            positions = np.arange(steps)
        out = E.add(out, E.embedding(params.pos, positions))
    if params.seg is not None:
        if segment_ids is None:
            segment_ids = np.zeros(steps, dtype=np.int64)
        out = E.add(out, E.embedding(params.seg, segment_ids))
    return out


# ---------------------------------------------------------------------------
# Transformer block
# ---------------------------------------------------------------------------


class AttentionParams(Params):
    def __init__(self, rng, hidden: int, heads: int):
        if hidden % heads:
            raise DimensionError(f"hidden size {hidden} not divisible by {heads} heads")
        self.heads = heads
        self.query = Linear.normal(rng, hidden, hidden)
        self.key = Linear.normal(rng, hidden, hidden)
        self.value = Linear.normal(rng, hidden, hidden)
        self.out = Linear.normal(rng, hidden, hidden)

    def named_parameters(self, prefix: str = ""):
        for part in ("query", "key", "value", "out"):
            yield from getattr(self, part).named_parameters(f"{prefix}{part}.")


def masked_self_attention(
    x: Tensor,
    params: AttentionParams,
    *,
    max_len: int | None = None,
    causal: bool = True,
    rng: np.random.Generator | None = None,
    attn_dropout: float = 0.0,
) -> Tensor:
    """Multi-head self-attention over (B, T, H) or (T, H) input.

    With ``causal`` set, position t attends only to positions <= t.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = E.reshape(x, (1,) + x.shape)
    batch, steps, hidden = x.shape
    if max_len is not None and steps > max_len:
        raise ContractError(f"sequence length {steps} exceeds max_len {max_len}")
    heads = params.heads
    width = hidden // heads

    def split(t: Tensor) -> Tensor:
        return E.transpose(E.reshape(t, (batch, steps, heads, width)), (0, 2, 1, 3))

    q = split(params.query(x))
    k = split(params.key(x))
    v = split(params.value(x))
    scores = E.scale(E.matmul(q, E.swapaxes(k, -1, -2)), 1.0 / math.sqrt(width))
    if causal:
        scores = E.causal_mask(scores)
    weights = _drop(E.softmax(scores, axis=-1), rng, attn_dropout)
    ctx = E.reshape(E.transpose(E.matmul(weights, v), (0, 2, 1, 3)), (batch, steps, hidden))
    out = params.out(ctx)
    return E.reshape(out, out.shape[1:]) if squeeze else out


class TransformerBlockParams(Params):
    """Post-norm block: attention and feed-forward sublayers, each residual + LayerNorm."""

    def __init__(self, rng, hidden: int, heads: int, ff_mult: int = 4):
        self.attn = AttentionParams(rng, hidden, heads)
        self.ln1 = LayerNormParams(hidden)
        self.ff_in = Linear.normal(rng, hidden, ff_mult * hidden)
        self.ff_out = Linear.normal(rng, ff_mult * hidden, hidden)
        self.ln2 = LayerNormParams(hidden)

    @property
    def hidden(self) -> int:
        return self.ln1.gain.shape[0]

    def named_parameters(self, prefix: str = ""):
        yield from self.attn.named_parameters(prefix + "attn.")
        yield from self.ln1.named_parameters(prefix + "ln1.")
        yield from self.ff_in.named_parameters(prefix + "ff_in.")
        yield from self.ff_out.named_parameters(prefix + "ff_out.")
        yield from self.ln2.named_parameters(prefix + "ln2.")


def transformer_block_forward(
    x: Tensor,
    params: TransformerBlockParams,
    *,
    max_len: int | None = None,
    rng: np.random.Generator | None = None,
    attn_dropout: float = 0.0,
    resid_dropout: float = 0.0,
) -> Tensor:
    if x.shape[-1] != params.hidden:
        raise DimensionError(f"block expects width {params.hidden}, got input {x.shape}")
    a = masked_self_attention(
        x, params.attn, max_len=max_len, rng=rng, attn_dropout=attn_dropout
    )
    x = params.ln1(E.add(x, _drop(a, rng, resid_dropout)))
    f = params.ff_out(E.gelu(params.ff_in(x)))
    return params.ln2(E.add(x, _drop(f, rng, resid_dropout)))


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------


class LSTMLayerParams(Params):
    def __init__(self, rng, n_in: int, hidden: int, dropout: float = 0.1):
        self.w_ih = Tensor(fan_in_uniform(rng, (4 * hidden, n_in), hidden), requires_grad=True)
        self.w_hh = Tensor(fan_in_uniform(rng, (4 * hidden, hidden), hidden), requires_grad=True)
        self.bias = Tensor(fan_in_uniform(rng, (4 * hidden,), hidden), requires_grad=True)
        self.dropout = dropout

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}w_ih", self.w_ih
        yield f"{prefix}w_hh", self.w_hh
        yield f"{prefix}bias", self.bias


LSTMState = tuple[np.ndarray, np.ndarray]


def lstm_forward(
    x: Tensor,
    params: LSTMLayerParams,
    state: LSTMState | None = None,
    *,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, LSTMState]:
    """Run one LSTM layer over (B, T, D); returns outputs and the detached final state."""
    squeeze = x.ndim == 2
    if squeeze:
        x = E.reshape(x, (1,) + x.shape)
    batch = x.shape[0]
    hidden = params.hidden
    if state is None:
        h0 = c0 = np.zeros((batch, hidden))
    else:
        h0, c0 = state
        if np.shape(h0) != (batch, hidden) or np.shape(c0) != (batch, hidden):
            raise DimensionError(
                f"LSTM state shapes {np.shape(h0)}, {np.shape(c0)}; expected ({batch}, {hidden})"
            )
    out, final = E.lstm_sequence(
        x, params.w_ih, params.w_hh, params.bias, Tensor(h0), Tensor(c0)
    )
    out = _drop(out, rng, params.dropout)
    if squeeze:
        out = E.reshape(out, out.shape[1:])
    return out, final


# ---------------------------------------------------------------------------
# output heads
# ---------------------------------------------------------------------------


class SoftmaxHeadParams(Params):
    """Plain linear layer to the vocabulary followed by log-softmax."""

    def __init__(self, rng, hidden: int, vocab_size: int):
        self.proj = Linear.uniform(rng, hidden, vocab_size)

    def named_parameters(self, prefix: str = ""):
        yield from self.proj.named_parameters(prefix + "proj.")


def softmax_head_forward(h: Tensor, params: SoftmaxHeadParams) -> Tensor:
    return E.log_softmax(params.proj(h), axis=-1)


class MoSParams(Params):
    """Mixture of K softmaxes sharing one decoder to the vocabulary.

    Component k has context ``tanh(h @ W_k + b_k)``; mixture weights come from
    ``softmax(h @ W_prior + b_prior)``.
    """

    def __init__(self, rng, hidden: int, vocab_size: int, components: int):
        if components < 1:
            raise ValueError(f"mixture of softmaxes needs K >= 1, got {components}")
        self.components = components
        self.latent = Linear.uniform(rng, hidden, components * hidden)
        self.prior = Linear.uniform(rng, hidden, components)
        self.decoder = Linear.uniform(rng, hidden, vocab_size)

    def named_parameters(self, prefix: str = ""):
        yield from self.latent.named_parameters(prefix + "latent.")
        yield from self.prior.named_parameters(prefix + "prior.")
        yield from self.decoder.named_parameters(prefix + "decoder.")


def mos_forward(h: Tensor, params: MoSParams) -> Tensor:
    """Log-probabilities (..., V) of the mixture ``sum_k pi_k softmax(decoder(ctx_k))``."""
    k = params.components
    if k < 1:
        raise ValueError(f"mixture of softmaxes needs K >= 1, got {k}")
    hidden = h.shape[-1]
    lead = h.shape[:-1]
    ctx = E.tanh(params.latent(h))
    ctx = E.reshape(ctx, lead + (k, hidden))
    log_comp = E.log_softmax(params.decoder(ctx), axis=-1)  # (..., K, V)
    log_prior = E.log_softmax(params.prior(h), axis=-1)  # (..., K)
    log_prior = E.reshape(log_prior, lead + (k, 1))
    return E.logsumexp(E.add(log_comp, log_prior), axis=-2)


def tied_head_forward(h: Tensor, token_table: Tensor) -> Tensor:
    """Decode through the transposed token embedding (the pretraining head)."""
    return E.log_softmax(E.matmul(h, E.transpose(token_table, (1, 0))), axis=-1)
