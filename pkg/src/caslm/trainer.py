"""Pretraining, fine-tuning with frozen subsets, and perplexity evaluation."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import engine as E
from .architecture import (
    ArchDescriptor,
    BaseWeights,
    LanguageModel,
    ModelConfig,
    build_model,
)
from .optim import Adam, AdamHyper, clip_grad_norm
from .rng import stream
from .tokenizer import TokenizedCorpus

log = logging.getLogger(__name__)

# learning-rate presets quoted for the two pretrained families
LR_PRESETS = {"gpt": 6.25e-5, "bert": 1e-4}


class VocabMismatchError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, step: int, value: float, detail: str = ""):
        self.epoch, self.step, self.value = epoch, step, value
        msg = f"non-finite loss at epoch {epoch}, step {step}: {value!r}"
        super().__init__(msg + (f" ({detail})" if detail else ""))


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    decoupled_weight_decay: bool = True
    seq_len: int = 32
    batch_size: int = 16
    epochs: int = 1
    clip_norm: float = 0.25
    seed: int = 0
    train_embeddings: bool = False
    # 0 means no cap; otherwise stop each epoch after this many updates
    max_steps_per_epoch: int = 0

    def __post_init__(self) -> None:
        if self.seq_len < 2:
            raise ValueError(f"seq_len must be >= 2, got {self.seq_len}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")

    def adam(self) -> AdamHyper:
        return AdamHyper(
            self.lr, self.beta1, self.beta2, self.eps, self.weight_decay,
            self.decoupled_weight_decay,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FineTuneResult:
    weights: dict[str, np.ndarray]
    val_ppl: float
    test_ppl: float
    curve: list[tuple[int, int, float]] = field(default_factory=list)
    seconds: float = 0.0
    trainable_params: int = 0
    total_params: int = 0
    tokens: int = 0


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------


def batchify(ids: np.ndarray, batch_size: int) -> np.ndarray:
    """Cut a stream into ``batch_size`` contiguous rows, dropping the remainder."""
    ids = np.asarray(ids, dtype=np.int64)
    cols = ids.size // batch_size
    if cols < 2:
        raise ValueError(f"stream of {ids.size} tokens too short for batch size {batch_size}")
    return ids[: cols * batch_size].reshape(batch_size, cols)


def windows(data: np.ndarray, seq_len: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Consecutive (input, next-token target) windows over a batchified (B, N) array."""
    n = data.shape[1]
    for start in range(0, n - 1, seq_len):
        width = min(seq_len, n - 1 - start)
        yield data[:, start : start + width], data[:, start + 1 : start + 1 + width]


def count_training_tokens(n_train: int, config: TrainConfig) -> tuple[int, int]:
    """(updates, target tokens) one fine-tune processes, from sizes alone."""
    cols = n_train // config.batch_size
    widths = [min(config.seq_len, cols - 1 - s) for s in range(0, cols - 1, config.seq_len)]
    if config.max_steps_per_epoch:
        widths = widths[: config.max_steps_per_epoch]
    return config.epochs * len(widths), config.epochs * config.batch_size * sum(widths)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _is_stateful(model: LanguageModel) -> bool:
    return len(model.lstm) > 0


def token_losses(model: LanguageModel, ids: np.ndarray, seq_len: int, batch_size: int = 16) -> np.ndarray:
    """Per-target NLL over the stream, in stream order, without dropout.

    The stream is read as one sequence in non-overlapping windows of
    ``seq_len``; recurrent state flows from each window into the next. Windows
    of a stateless model are independent and are batched ``batch_size`` at a time.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size < 2:
        raise ValueError("evaluation stream needs at least two tokens")
    if seq_len < 1 or batch_size < 1:
        raise ValueError("seq_len and batch_size must be positive")
    starts = list(range(0, ids.size - 1, seq_len))
    out = np.empty(ids.size - 1)
    if _is_stateful(model):
        state = None
        for s in starts:
            e = min(s + seq_len, ids.size - 1)
            logp, state = model(ids[s:e][None], state)
            out[s:e] = E.token_nll(logp.data, ids[s + 1 : e + 1][None])[0]
        return out
    full = [s for s in starts if s + seq_len <= ids.size - 1]
    for i in range(0, len(full), batch_size):
        group = full[i : i + batch_size]
        x = np.stack([ids[s : s + seq_len] for s in group])
        y = np.stack([ids[s + 1 : s + 1 + seq_len] for s in group])
        logp, _ = model(x)
        nll = E.token_nll(logp.data, y)
        for row, s in enumerate(group):
            out[s : s + seq_len] = nll[row]
    if len(full) < len(starts):
        s = starts[-1]
        logp, _ = model(ids[s:-1][None])
        out[s:] = E.token_nll(logp.data, ids[s + 1 :][None])[0]
    return out


def evaluate_perplexity(model: LanguageModel, ids: np.ndarray, seq_len: int, batch_size: int = 16) -> float:
    """exp(total NLL / token count), summed exactly in stream order."""
    losses = token_losses(model, ids, seq_len, batch_size)
    return math.exp(math.fsum(losses) / losses.size)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train_step(
    model: LanguageModel,
    opt: Adam,
    x: np.ndarray,
    y: np.ndarray,
    state=None,
    rng: Optional[np.random.Generator] = None,
    clip_norm: float = 0.0,
):
    """One forward/backward/update. Returns (loss, carried state)."""
    with E.Tape() as tape:
        logp, new_state = model(x, state, rng=rng)
        loss = E.nll_loss(logp, y)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDiverged(-1, -1, value)
    if opt.params:
        tape.backward(loss)
        if clip_norm > 0:
            clip_grad_norm(opt.params.values(), clip_norm)
        opt.step()
    return value, new_state


def _train(
    model: LanguageModel,
    train_ids: np.ndarray,
    config: TrainConfig,
    dropout_rng: np.random.Generator,
) -> tuple[list[tuple[int, int, float]], int]:
    opt = Adam(model.trainable(), config.adam())
    data = batchify(train_ids, config.batch_size)
    curve: list[tuple[int, int, float]] = []
    tokens = 0
    step = 0
    for epoch in range(config.epochs):
        state = None  # recurrent state restarts every epoch
        for i, (x, y) in enumerate(windows(data, config.seq_len)):
            if config.max_steps_per_epoch and i >= config.max_steps_per_epoch:
                break
            try:
                value, state = train_step(model, opt, x, y, state, dropout_rng, config.clip_norm)
            except TrainingDiverged as exc:
                raise TrainingDiverged(epoch, step, exc.value) from None
            except E.NonFiniteError as exc:
                raise TrainingDiverged(epoch, step, float("nan"), str(exc)) from None
            curve.append((epoch, step, value))
            tokens += y.size
            step += 1
        log.debug("epoch %d done, last loss %.4f", epoch, curve[-1][2] if curve else float("nan"))
    return curve, tokens


def fine_tune(model: LanguageModel, corpus: TokenizedCorpus, config: TrainConfig) -> FineTuneResult:
    """Train the unfrozen parameters of ``model`` on ``corpus.train``; score valid/test."""
    if corpus.vocab_size != model.config.vocab_size:
        raise VocabMismatchError(
            f"corpus vocabulary {corpus.vocab_size} != model vocabulary {model.config.vocab_size}"
        )
    t0 = time.perf_counter()
    curve, tokens = _train(model, corpus.train, config, stream(config.seed, "dropout"))
    val = evaluate_perplexity(model, corpus.valid, config.seq_len, config.batch_size)
    test = evaluate_perplexity(model, corpus.test, config.seq_len, config.batch_size)
    return FineTuneResult(
        weights=model.state_arrays(),
        val_ppl=val,
        test_ppl=test,
        curve=curve,
        seconds=time.perf_counter() - t0,
        trainable_params=model.parameter_count(trainable_only=True),
        total_params=model.parameter_count(),
        tokens=tokens,
    )


def pretrain_base(
    corpus: TokenizedCorpus,
    model_config: ModelConfig,
    descriptor: ArchDescriptor,
    config: TrainConfig,
) -> tuple[BaseWeights, FineTuneResult]:
    """Train a fresh base network from scratch; every parameter is trainable."""
    if corpus.vocab_size != model_config.vocab_size:
        raise VocabMismatchError(
            f"corpus vocabulary {corpus.vocab_size} != model vocabulary {model_config.vocab_size}"
        )
    model = build_model(descriptor, model_config, stream(config.seed, "init"))
    result = fine_tune(model, corpus, config)
    return BaseWeights.from_model(model), result


def write_loss_curve(path: str | Path, curve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "loss"])
        for epoch, step, loss in curve:
            writer.writerow([epoch, step, repr(float(loss))])
