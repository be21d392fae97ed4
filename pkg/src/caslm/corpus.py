"""Deterministic synthetic English-like text for desk-scale experiments.

Sentences come from a small grammar over generated pseudo-words, with
subject/verb number agreement and per-document topic vocabularies, so there
is both local word-order structure and longer-range context to model. Two
domains share one lexicon but differ in topic pools, tense and sentence shapes,
giving a pretraining corpus and a shifted fine-tuning corpus.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import stream

_ONSETS = ["b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z",
           "br", "cl", "dr", "fl", "gr", "pl", "st", "tr", "sh", "ch", "th"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ea", "ou", "io"]
_CODAS = ["", "", "", "n", "r", "l", "m", "st", "nd", "x"]

_DETERMINERS = ["the", "a", "this", "that", "every", "some"]
_PREPOSITIONS = ["in", "on", "with", "near", "under", "behind", "across", "from"]
_CONJUNCTIONS = ["and", "but", "while", "because"]
_PRONOUNS_SG = ["it", "she", "he"]
_PRONOUNS_PL = ["they", "we"]

DOMAINS = ("pretrain", "finetune")


@dataclass
class Lexicon:
    nouns: list[str]
    verbs: list[str]
    adjectives: list[str]
    adverbs: list[str]


def _pseudo_word(rng: np.random.Generator, syllables: int) -> str:
    parts = []
    for _ in range(syllables):
        parts.append(_ONSETS[rng.integers(len(_ONSETS))])
        parts.append(_VOWELS[rng.integers(len(_VOWELS))])
    parts.append(_CODAS[rng.integers(len(_CODAS))])
    return "".join(parts)


def make_lexicon(seed: int = 0, nouns: int = 900, verbs: int = 400, adjectives: int = 300, adverbs: int = 80) -> Lexicon:
    rng = stream(seed, "lexicon")
    seen = set(_DETERMINERS + _PREPOSITIONS + _CONJUNCTIONS + _PRONOUNS_SG + _PRONOUNS_PL)

    def draw(n: int, lo: int, hi: int) -> list[str]:
        out = []
        while len(out) < n:
            w = _pseudo_word(rng, int(rng.integers(lo, hi + 1)))
            if w not in seen:
                seen.add(w)
                out.append(w)
        return out

    return Lexicon(
        nouns=draw(nouns, 1, 3),
        verbs=draw(verbs, 1, 2),
        adjectives=draw(adjectives, 1, 3),
        adverbs=[w + "ly" for w in draw(adverbs, 1, 2)],
    )


def _zipf_pick(rng: np.random.Generator, items: list[str], alpha: float = 1.1) -> str:
    ranks = np.arange(1, len(items) + 1, dtype=np.float64)
    p = ranks**-alpha
    return items[rng.choice(len(items), p=p / p.sum())]


class _Writer:
    def __init__(self, lex: Lexicon, domain: str, rng: np.random.Generator):
        if domain not in DOMAINS:
            raise ValueError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
        self.lex = lex
        self.rng = rng
        self.past = domain == "finetune"
        half = len(lex.nouns) // 2
        # fine-tune topics lean on the back half of the lexicon
        self.noun_pool = lex.nouns[:half + half // 2] if domain == "pretrain" else lex.nouns[half // 2:]
        self.pp_rate = 0.35 if domain == "pretrain" else 0.6
        self.adj_rate = 0.4 if domain == "pretrain" else 0.25

    def _topic(self):
        r = self.rng
        nouns = [self.noun_pool[i] for i in r.choice(len(self.noun_pool), size=40, replace=False)]
        verbs = [self.lex.verbs[i] for i in r.choice(len(self.lex.verbs), size=25, replace=False)]
        adjs = [self.lex.adjectives[i] for i in r.choice(len(self.lex.adjectives), size=20, replace=False)]
        return nouns, verbs, adjs

    def _np(self, topic, plural: bool) -> str:
        r = self.rng
        nouns, _, adjs = topic
        words = []
        det = "the" if plural and r.random() < 0.5 else _DETERMINERS[r.integers(len(_DETERMINERS))]
        if plural and det in ("a", "this", "every"):
            det = "these" if det == "this" else "the"
        words.append(det)
        if r.random() < self.adj_rate:
            words.append(_zipf_pick(r, adjs))
        noun = _zipf_pick(r, nouns)
        words.append(noun + "s" if plural else noun)
        return " ".join(words)

    def _verb(self, topic, plural: bool) -> str:
        verb = _zipf_pick(self.rng, topic[1])
        if self.past:
            return verb + "ed"
        return verb if plural else verb + "s"

    def sentence(self, topic) -> str:
        r = self.rng
        plural = r.random() < 0.4
        if r.random() < 0.15:
            pool = _PRONOUNS_PL if plural else _PRONOUNS_SG
            subject = pool[r.integers(len(pool))]
        else:
            subject = self._np(topic, plural)
        parts = [subject, self._verb(topic, plural)]
        shape = r.random()
        if shape < 0.6:
            parts.append(self._np(topic, r.random() < 0.3))
        elif shape < 0.8:
            parts.append(self.lex.adverbs[r.integers(len(self.lex.adverbs))])
        if r.random() < self.pp_rate:
            parts.append(_PREPOSITIONS[r.integers(len(_PREPOSITIONS))])
            parts.append(self._np(topic, r.random() < 0.3))
        if r.random() < 0.2:
            parts.append(_CONJUNCTIONS[r.integers(len(_CONJUNCTIONS))])
            plural2 = r.random() < 0.4
            parts.append(self._np(topic, plural2))
            parts.append(self._verb(topic, plural2))
        text = " ".join(parts)
        return text[0].upper() + text[1:] + "."

    def document(self) -> str:
        topic = self._topic()
        n = int(self.rng.integers(4, 12))
        return " ".join(self.sentence(topic) for _ in range(n))


def generate_text(n_chars: int, domain: str = "pretrain", seed: int = 0, lexicon_seed: int = 0) -> str:
    """About ``n_chars`` characters of blank-line-separated documents."""
    writer = _Writer(make_lexicon(lexicon_seed), domain, stream(seed, f"corpus/{domain}"))
    docs: list[str] = []
    size = 0
    while size < n_chars:
        doc = writer.document()
        docs.append(doc)
        size += len(doc) + 2
    return "\n\n".join(docs) + "\n"


def write_splits(
    directory: str | Path,
    n_chars: int,
    domain: str = "pretrain",
    seed: int = 0,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> dict[str, Path]:
    """Write train/valid/test text files cut at document boundaries."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    docs = generate_text(n_chars, domain, seed).strip("\n").split("\n\n")
    total = sum(len(d) for d in docs)
    bounds = np.cumsum([len(d) for d in docs]) / total
    cut1 = int(np.searchsorted(bounds, fractions[0]))
    cut2 = int(np.searchsorted(bounds, fractions[0] + fractions[1]))
    cut1 = max(1, min(cut1, len(docs) - 2))
    cut2 = max(cut1 + 1, min(cut2, len(docs) - 1))
    parts = {"train": docs[:cut1], "valid": docs[cut1:cut2], "test": docs[cut2:]}
    paths = {}
    for name, chunk in parts.items():
        path = directory / f"{name}.txt"
        path.write_text("\n\n".join(chunk) + "\n", encoding="utf-8")
        paths[name] = path
    return paths
