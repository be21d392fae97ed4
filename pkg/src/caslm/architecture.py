"""Architecture descriptors, the three network transformations, and model instantiation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from . import engine as E
from . import layers as L
from .engine import DimensionError, Tensor

MAX_LSTM_LAYERS = 3

ADD_LINEAR = "AddLinear"
ADD_LSTM = "AddLSTM"
FIX_SUBSET = "FixSubset"
TRANSFORMATIONS = (ADD_LINEAR, ADD_LSTM, FIX_SUBSET)

LSTM_POSITIONS = ("none", "first", "last")
HEAD_KINDS = ("softmax", "mos")


class DescriptorError(ValueError):
    pass


@dataclass(frozen=True)
class ArchDescriptor:
    num_blocks: int
    lstm_position: str = "none"
    lstm_count: int = 0
    frozen_blocks: frozenset = field(default_factory=frozenset)
    has_output_linear: bool = False
    use_positional_embedding: bool = True
    use_segment_embedding: bool = True
    head_kind: str = "mos"
    mos_components: int = 3

    def __post_init__(self) -> None:
        object.__setattr__(self, "frozen_blocks", frozenset(int(b) for b in self.frozen_blocks))
        self.validate()

    def validate(self) -> None:
        if self.num_blocks < 0:
            raise DescriptorError(f"num_blocks must be >= 0, got {self.num_blocks}")
        if self.lstm_position not in LSTM_POSITIONS:
            raise DescriptorError(f"unknown lstm_position {self.lstm_position!r}")
        if (self.lstm_count == 0) != (self.lstm_position == "none"):
            raise DescriptorError(
                f"lstm_count={self.lstm_count} inconsistent with position {self.lstm_position!r}"
            )
        # the LSTM-only ablation replaces the whole Transformer stack and may go deeper
        cap = MAX_LSTM_LAYERS if self.num_blocks > 0 else 2 * MAX_LSTM_LAYERS
        if not 0 <= self.lstm_count <= cap:
            raise DescriptorError(f"lstm_count must lie in [0, {cap}], got {self.lstm_count}")
        if not self.frozen_blocks <= set(range(self.num_blocks)):
            raise DescriptorError(
                f"frozen_blocks {sorted(self.frozen_blocks)} outside 0..{self.num_blocks - 1}"
            )
        if self.lstm_position == "first" and (
            self.use_positional_embedding or self.use_segment_embedding
        ):
            raise DescriptorError("an LSTM placed first requires positional/segment tables off")
        if self.head_kind not in HEAD_KINDS:
            raise DescriptorError(f"unknown head_kind {self.head_kind!r}")
        if self.mos_components < 1:
            raise DescriptorError(f"mos_components must be >= 1, got {self.mos_components}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frozen_blocks"] = sorted(self.frozen_blocks)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchDescriptor":
        return cls(**{**d, "frozen_blocks": frozenset(d.get("frozen_blocks", ()))})

    @classmethod
    def from_json(cls, text: str) -> "ArchDescriptor":
        return cls.from_dict(json.loads(text))


def base_descriptor(num_blocks: int, head_kind: str = "mos", mos_components: int = 3) -> ArchDescriptor:
    """The pretrained network: Transformer stack with the tied embedding decoder."""
    return ArchDescriptor(num_blocks=num_blocks, head_kind=head_kind, mos_components=mos_components)


# ---------------------------------------------------------------------------
# transformations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Transformation:
    """One transformation plus the random choices realized when it was drawn.

    ``placement`` is set for an AddLSTM that created the LSTM site; ``blocks``
    is the frozen subset chosen by FixSubset.
    """

    kind: str
    placement: Optional[str] = None
    blocks: Optional[tuple[int, ...]] = None

    def __post_init__(self) -> None:
        if self.kind not in TRANSFORMATIONS:
            raise DescriptorError(f"unknown transformation {self.kind!r}")

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.placement is not None:
            d["placement"] = self.placement
        if self.blocks is not None:
            d["blocks"] = list(self.blocks)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Transformation":
        blocks = d.get("blocks")
        return cls(d["kind"], d.get("placement"), None if blocks is None else tuple(blocks))


def draw_transformation(kind: str, d: ArchDescriptor, rng: np.random.Generator) -> Transformation:
    """Realize the random choices of ``kind`` against descriptor ``d``."""
    if kind == ADD_LINEAR:
        return Transformation(kind)
    if kind == ADD_LSTM:
        if d.lstm_count == 0:
            return Transformation(kind, placement=("first", "last")[int(rng.integers(2))])
        return Transformation(kind)
    if kind == FIX_SUBSET:
        k = int(rng.integers(0, d.num_blocks + 1))
        chosen = rng.choice(d.num_blocks, size=k, replace=False) if k else []
        return Transformation(kind, blocks=tuple(sorted(int(b) for b in chosen)))
    raise DescriptorError(f"unknown transformation {kind!r}")


def apply_transformation(
    d: ArchDescriptor, t: Transformation | str, rng: np.random.Generator | None = None
) -> ArchDescriptor:
    """Apply a realized transformation. Pure in (d, t); ``rng`` only realizes a bare kind."""
    if isinstance(t, str):
        if rng is None:
            raise DescriptorError("a bare transformation kind needs an rng to realize it")
        t = draw_transformation(t, d, rng)
    if t.kind == ADD_LINEAR:
        return d if d.has_output_linear else replace(d, has_output_linear=True)
    if t.kind == ADD_LSTM:
        if d.lstm_count == 0:
            if t.placement not in ("first", "last"):
                raise DescriptorError("AddLSTM on an LSTM-free net needs placement first|last")
            if t.placement == "first":
                return replace(
                    d,
                    lstm_position="first",
                    lstm_count=1,
                    use_positional_embedding=False,
                    use_segment_embedding=False,
                )
            return replace(d, lstm_position="last", lstm_count=1)
        if d.lstm_count < MAX_LSTM_LAYERS:
            return replace(d, lstm_count=d.lstm_count + 1)
        return d
    if t.kind == FIX_SUBSET:
        blocks = frozenset(t.blocks or ())
        return replace(d, frozen_blocks=blocks)
    raise DescriptorError(f"unknown transformation {t.kind!r}")


def replay(d: ArchDescriptor, transformations: Sequence[Transformation]) -> ArchDescriptor:
    for t in transformations:
        d = apply_transformation(d, t)
    return d


def sample_candidate(
    base: ArchDescriptor,
    rng: np.random.Generator,
    pool: Sequence[str] = TRANSFORMATIONS,
) -> tuple[ArchDescriptor, list[Transformation]]:
    """Draw transformations uniformly from ``pool`` until AddLinear comes up."""
    if ADD_LINEAR not in pool:
        raise DescriptorError("the sampling pool must contain AddLinear to terminate")
    candidate = base
    applied: list[Transformation] = []
    while True:
        kind = pool[int(rng.integers(len(pool)))]
        t = draw_transformation(kind, candidate, rng)
        candidate = apply_transformation(candidate, t)
        applied.append(t)
        if kind == ADD_LINEAR:
            return candidate, applied


# ---------------------------------------------------------------------------
# model instances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden: int = 64
    heads: int = 2
    max_len: int = 64
    ff_mult: int = 4
    embed_dropout: float = 0.1
    attn_dropout: float = 0.1
    resid_dropout: float = 0.1
    lstm_dropout: float = 0.1
    head_dropout: float = 0.1

    def __post_init__(self) -> None:
        if self.hidden % self.heads:
            raise DimensionError(f"hidden {self.hidden} not divisible by heads {self.heads}")

    def to_dict(self) -> dict:
        return asdict(self)


ModelState = Optional[list[L.LSTMState]]


class LanguageModel(L.Params):
    """A materialized network: descriptor + parameters + trainability mask."""

    def __init__(self, descriptor: ArchDescriptor, config: ModelConfig, rng: np.random.Generator):
        d, c = descriptor, config
        self.descriptor = d
        self.config = c
        self.embed = L.EmbeddingParams(
            rng, c.vocab_size, c.hidden, c.max_len,
            d.use_positional_embedding, d.use_segment_embedding,
        )
        self.blocks = [L.TransformerBlockParams(rng, c.hidden, c.heads, c.ff_mult) for _ in range(d.num_blocks)]
        self.lstm = [L.LSTMLayerParams(rng, c.hidden, c.hidden, c.lstm_dropout) for _ in range(d.lstm_count)]
        self.head: L.Params | None = None
        if d.has_output_linear:
            if d.head_kind == "mos":
                self.head = L.MoSParams(rng, c.hidden, c.vocab_size, d.mos_components)
            else:
                self.head = L.SoftmaxHeadParams(rng, c.hidden, c.vocab_size)

    def named_parameters(self, prefix: str = ""):
        yield from self.embed.named_parameters(prefix + "embed.")
        for i, block in enumerate(self.blocks):
            yield from block.named_parameters(f"{prefix}blocks.{i}.")
        for i, layer in enumerate(self.lstm):
            yield from layer.named_parameters(f"{prefix}lstm.{i}.")
        if self.head is not None:
            yield from self.head.named_parameters(prefix + "head.")

    def params(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def trainable(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    def set_trainable(self, train_embeddings: bool = True) -> None:
        """Freeze blocks in ``frozen_blocks`` (layer norms included) and optionally embeddings."""
        frozen = {f"blocks.{i}." for i in self.descriptor.frozen_blocks}
        for name, p in self.named_parameters():
            if name.startswith("embed."):
                p.requires_grad = train_embeddings
            else:
                p.requires_grad = not any(name.startswith(f) for f in frozen)
            p.grad = np.zeros_like(p.data) if p.requires_grad else None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def parameter_count(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.parameters() if p.requires_grad or not trainable_only)

    def forward(
        self,
        ids,
        state: ModelState = None,
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, ModelState]:
        """Log-probabilities (B, T, V) for next tokens of ``ids`` (B, T), and LSTM state."""
        d, c = self.descriptor, self.config
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        x = L._drop(L.embed(ids, self.embed), rng, c.embed_dropout)
        new_state: list[L.LSTMState] = []

        def run_lstm(x):
            for i, layer in enumerate(self.lstm):
                x, s = L.lstm_forward(x, layer, None if state is None else state[i], rng=rng)
                new_state.append(s)
            return x

        if d.lstm_position == "first":
            x = run_lstm(x)
        for block in self.blocks:
            x = L.transformer_block_forward(
                x, block, max_len=c.max_len, rng=rng,
                attn_dropout=c.attn_dropout, resid_dropout=c.resid_dropout,
            )
        if d.lstm_position == "last":
            x = run_lstm(x)
        if self.head is None:
            out = L.tied_head_forward(x, self.embed.tok)
        else:
            x = L._drop(x, rng, c.head_dropout)
            if isinstance(self.head, L.MoSParams):
                out = L.mos_forward(x, self.head)
            else:
                out = L.softmax_head_forward(x, self.head)
        return out, (new_state or None)

    def __call__(self, ids, state: ModelState = None, rng=None):
        return self.forward(ids, state, rng)


@dataclass
class BaseWeights:
    """A pretrained network's parameters (name -> array) plus how to rebuild it."""

    descriptor: ArchDescriptor
    config: ModelConfig
    arrays: dict[str, np.ndarray]

    @property
    def num_blocks(self) -> int:
        return self.descriptor.num_blocks

    @classmethod
    def from_model(cls, model: LanguageModel) -> "BaseWeights":
        return cls(model.descriptor, model.config, model.state_arrays())


def _shared(name: str) -> bool:
    return name.startswith("embed.") or name.startswith("blocks.")


def instantiate_model(
    d: ArchDescriptor,
    base: BaseWeights,
    rng: np.random.Generator,
    *,
    train_embeddings: bool = False,
    strict_blocks: bool = True,
    donor: Mapping[str, np.ndarray] | None = None,
) -> LanguageModel:
    """Build ``d`` on top of pretrained ``base``.

    Embeddings and Transformer blocks are copied from ``base``; LSTM layers and
    the output head start from fresh ``rng`` draws. With ``strict_blocks`` off,
    blocks beyond the base's count are freshly initialized (used by the
    placement ablations). ``donor`` supplies already fine-tuned arrays whose name
    and shape match, taking precedence over both.
    """
    if strict_blocks and d.num_blocks != base.num_blocks:
        raise DimensionError(
            f"descriptor has {d.num_blocks} blocks, base weights have {base.num_blocks}"
        )
    model = LanguageModel(d, base.config, rng)
    for name, p in model.named_parameters():
        src = None
        if donor is not None and name in donor and donor[name].shape == p.shape:
            src = donor[name]
        elif _shared(name) and name in base.arrays:
            src = base.arrays[name]
            if src.shape != p.shape:
                raise DimensionError(
                    f"{name}: base shape {src.shape} does not match model shape {p.shape}"
                )
        if src is not None:
            p.data = np.array(src, dtype=np.float64, copy=True)
    model.set_trainable(train_embeddings=train_embeddings)
    return model


def build_model(d: ArchDescriptor, config: ModelConfig, rng: np.random.Generator) -> LanguageModel:
    """Fresh, fully trainable network (used for pretraining)."""
    model = LanguageModel(d, config, rng)
    model.set_trainable(train_embeddings=True)
    return model
