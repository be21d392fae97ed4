"""Character-level byte-pair encoding and the train/valid/test id pipeline.

Spaces are rewritten to ``▁`` and text is cut into chunks of the form
``▁?word`` (plus lone ``▁`` and newline chunks); merges never cross a chunk
boundary. Decoding concatenates token strings and turns ``▁`` back into spaces,
so ``decode(encode(t)) == t`` whenever every character of ``t`` was seen in
training.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPACE = "▁"
UNK = "<unk>"
EOT = "<eot>"
SPECIALS = (UNK, EOT)
FORMAT_VERSION = 1
_MAGIC = "caslm-bpe"

_CHUNK = re.compile(rf"\n|{SPACE}?[^{SPACE}\n]+|{SPACE}")


class TokenizerError(ValueError):
    pass


def chunk_text(text: str) -> list[str]:
    return _CHUNK.findall(text.replace(" ", SPACE))


def _merge_word(word: tuple[str, ...], pair: tuple[str, str], merged: str) -> tuple[str, ...]:
    a, b = pair
    out = []
    i = 0
    n = len(word)
    while i < n:
        if i < n - 1 and word[i] == a and word[i + 1] == b:
            out.append(merged)
            i += 2
        else:
            out.append(word[i])
            i += 1
    return tuple(out)


def _pair_counts(words: dict[tuple[str, ...], int]) -> Counter:
    counts: Counter = Counter()
    for word, freq in words.items():
        for pair in zip(word, word[1:]):
            counts[pair] += freq
    return counts


@dataclass
class BPEModel:
    merges: list[tuple[str, str]]
    vocab: dict[str, int]
    _ranks: dict[tuple[str, str], int] = field(default_factory=dict, repr=False)
    _cache: dict[str, tuple[int, ...]] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self.id_to_token = {i: t for t, i in self.vocab.items()}
        if sorted(self.id_to_token) != list(range(len(self.vocab))):
            raise TokenizerError("vocabulary ids must be dense 0..V-1")

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def unk_id(self) -> int:
        return self.vocab[UNK]

    @property
    def eot_id(self) -> int:
        return self.vocab[EOT]

    @property
    def base_symbols(self) -> list[str]:
        return sorted(t for t in self.vocab if t not in SPECIALS and len(t) == 1)

    # -- encoding ---------------------------------------------------------

    def _encode_chunk(self, chunk: str) -> tuple[int, ...]:
        cached = self._cache.get(chunk)
        if cached is not None:
            return cached
        # unknown characters become <unk> and never take part in a merge
        word = [c if c in self.vocab else UNK for c in chunk]
        ranks = self._ranks
        while len(word) > 1:
            best = None
            best_rank = len(ranks)
            for pair in zip(word, word[1:]):
                r = ranks.get(pair)
                if r is not None and r < best_rank:
                    best, best_rank = pair, r
            if best is None:
                break
            word = list(_merge_word(tuple(word), best, best[0] + best[1]))
        ids = tuple(self.vocab[t] for t in word)
        self._cache[chunk] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for chunk in chunk_text(text):
            out.extend(self._encode_chunk(chunk))
        return out

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.id_to_token[int(i)] for i in ids).replace(SPACE, " ")

    def tokens(self, text: str) -> list[str]:
        return [self.id_to_token[i] for i in self.encode(text)]

    # -- persistence ------------------------------------------------------

    def save(self, path: str | Path) -> None:
        lines = [f"{_MAGIC} {FORMAT_VERSION} merges={len(self.merges)} vocab={len(self.vocab)}"]
        lines += [f"{json.dumps(a)} {json.dumps(b)}" for a, b in self.merges]
        lines += [
            f"{json.dumps(tok)}\t{i}" for tok, i in sorted(self.vocab.items(), key=lambda kv: kv[1])
        ]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BPEModel":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise TokenizerError(f"{path}: empty tokenizer file")
        header = lines[0].split()
        if len(header) != 4 or header[0] != _MAGIC:
            raise TokenizerError(f"{path}: not a tokenizer file")
        if int(header[1]) != FORMAT_VERSION:
            raise TokenizerError(f"{path}: unsupported version {header[1]}")
        n_merges = int(header[2].split("=")[1])
        n_vocab = int(header[3].split("=")[1])
        if len(lines) != 1 + n_merges + n_vocab:
            raise TokenizerError(f"{path}: line count does not match header")
        decoder = json.JSONDecoder()
        merges = []
        for line in lines[1 : 1 + n_merges]:
            a, end = decoder.raw_decode(line)
            b, _ = decoder.raw_decode(line, end + 1)
            merges.append((a, b))
        vocab = {}
        for line in lines[1 + n_merges :]:
            tok, idx = line.rsplit("\t", 1)
            vocab[json.loads(tok)] = int(idx)
        return cls(merges, vocab)


def train_bpe(text: str, num_merges: int) -> BPEModel:
    """Learn up to ``num_merges`` merges by greedy most-frequent-pair merging.

    Ties go to the lexicographically smallest pair. Training stops early if no
    pair is left to merge.
    """
    if num_merges < 0:
        raise TokenizerError(f"num_merges must be >= 0, got {num_merges}")
    if not text:
        raise TokenizerError("cannot train BPE on an empty corpus")
    chunk_freq = Counter(chunk_text(text))
    words: dict[tuple[str, ...], int] = {}
    for chunk, freq in chunk_freq.items():
        key = tuple(chunk)
        words[key] = words.get(key, 0) + freq

    base = sorted({c for word in words for c in word})
    vocab: dict[str, int] = {}
    for tok in (*SPECIALS, *base):
        vocab.setdefault(tok, len(vocab))

    merges: list[tuple[str, str]] = []
    counts = _pair_counts(words)
    for _ in range(num_merges):
        if not counts:
            break
        top = max(counts.values())
        pair = min(p for p, c in counts.items() if c == top)
        merged = pair[0] + pair[1]
        merges.append(pair)
        vocab.setdefault(merged, len(vocab))
        # only words containing the pair change; update their pair counts
        new_words: dict[tuple[str, ...], int] = {}
        for word, freq in words.items():
            if pair[0] in word and any(
                word[i] == pair[0] and word[i + 1] == pair[1] for i in range(len(word) - 1)
            ):
                for p in zip(word, word[1:]):
                    counts[p] -= freq
                    if counts[p] == 0:
                        del counts[p]
                word = _merge_word(word, pair, merged)
                for p in zip(word, word[1:]):
                    counts[p] += freq
            new_words[word] = new_words.get(word, 0) + freq
        words = new_words
    return BPEModel(merges, vocab)


# ---------------------------------------------------------------------------
# corpus splits
# ---------------------------------------------------------------------------


@dataclass
class TokenizedCorpus:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    vocab_size: int

    def __post_init__(self) -> None:
        for name in ("train", "valid", "test"):
            ids = np.asarray(getattr(self, name), dtype=np.int64)
            if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
                raise TokenizerError(f"{name} split has ids outside [0, {self.vocab_size})")
            setattr(self, name, ids)

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "valid", "test"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def token_counts(self) -> dict[str, int]:
        return {name: int(self.split(name).size) for name in ("train", "valid", "test")}

    def save(self, path: str | Path) -> None:
        np.savez(
            path,
            train=self.train,
            valid=self.valid,
            test=self.test,
            vocab_size=np.int64(self.vocab_size),
        )

    @classmethod
    def load(cls, path: str | Path) -> "TokenizedCorpus":
        with np.load(path) as data:
            return cls(data["train"], data["valid"], data["test"], int(data["vocab_size"]))


def split_documents(text: str) -> list[str]:
    """Documents are separated by one or more blank lines."""
    return [d.strip("\n") for d in re.split(r"\n[ \t]*\n", text) if d.strip()]


def encode_documents(text: str, model: BPEModel) -> np.ndarray:
    ids: list[int] = []
    for doc in split_documents(text):
        ids.extend(model.encode(doc))
        ids.append(model.eot_id)
    return np.asarray(ids, dtype=np.int64)


def read_utf8(path: str | Path) -> str:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise TokenizerError(f"{path}: invalid UTF-8 at byte {exc.start}") from exc


def build_splits(paths: Sequence[str | Path], model: BPEModel) -> TokenizedCorpus:
    """Tokenize (train, valid, test) files, appending <eot> after each document."""
    if len(paths) != 3:
        raise TokenizerError("build_splits needs exactly three files: train, valid, test")
    streams = [encode_documents(read_utf8(p), model) for p in paths]
    return TokenizedCorpus(*streams, vocab_size=model.vocab_size)
