from collections import Counter

import numpy as np
import pytest

from caslm.corpus import generate_text
from caslm.tokenizer import (
    BPEModel,
    TokenizedCorpus,
    TokenizerError,
    build_splits,
    chunk_text,
    read_utf8,
    train_bpe,
)

SAMPLE = generate_text(6000, "pretrain", seed=3)


def naive_encode(model: BPEModel, text: str) -> list[str]:
    """Apply merges rule by rule, rescanning every symbol pair at each step."""
    out = []
    for chunk in chunk_text(text):
        word = [c if c in model.vocab else "<unk>" for c in chunk]
        while True:
            candidates = [
                (model.merges.index((a, b)), i)
                for i, (a, b) in enumerate(zip(word, word[1:]))
                if (a, b) in model.merges
            ]
            if not candidates:
                break
            rank = min(candidates)[0]
            a, b = model.merges[rank]
            merged, i = [], 0
            while i < len(word):
                if i + 1 < len(word) and word[i] == a and word[i + 1] == b:
                    merged.append(a + b)
                    i += 2
                else:
                    merged.append(word[i])
                    i += 1
            word = merged
        out.extend(word)
    return out


def test_first_merge_on_tiny_corpus():
    model = train_bpe("aaab aab", 1)
    assert model.merges == [("a", "a")]


def test_zero_merges_is_character_vocabulary():
    model = train_bpe("hello world", 0)
    assert model.merges == []
    assert set(model.vocab) == {"<unk>", "<eot>", *set("hello▁world")}


def test_vocab_size_formula():
    model = train_bpe(SAMPLE, 60)
    assert len(model.merges) == 60
    assert model.vocab_size == len(model.base_symbols) + 60 + 2
    assert sorted(model.vocab.values()) == list(range(model.vocab_size))


def test_negative_merges_and_empty_corpus_rejected():
    with pytest.raises(TokenizerError):
        train_bpe("abc", -1)
    with pytest.raises(TokenizerError):
        train_bpe("", 3)


def test_tie_breaks_lexicographically():
    # "ab" and "cd" both occur twice; ("a","b") sorts first
    model = train_bpe("cd ab cd ab", 1)
    assert model.merges[0] == ("a", "b")


def test_merges_match_naive_pair_counting():
    text = SAMPLE[:1500]
    model = train_bpe(text, 25)
    words = Counter(tuple(c) for c in chunk_text(text))
    for expected in model.merges:
        pairs = Counter()
        for w, f in words.items():
            for p in zip(w, w[1:]):
                pairs[p] += f
        top = max(pairs.values())
        assert expected == min(p for p, c in pairs.items() if c == top)
        merged = {}
        for w, f in words.items():
            out, i = [], 0
            while i < len(w):
                if i + 1 < len(w) and (w[i], w[i + 1]) == expected:
                    out.append(w[i] + w[i + 1])
                    i += 2
                else:
                    out.append(w[i])
                    i += 1
            merged[tuple(out)] = merged.get(tuple(out), 0) + f
        words = Counter(merged)


def test_encode_matches_rescan_oracle():
    model = train_bpe(SAMPLE, 120)
    text = generate_text(1500, "finetune", seed=9)
    assert model.tokens(text) == naive_encode(model, text)


def test_round_trip_on_training_corpus():
    model = train_bpe(SAMPLE, 200)
    assert model.decode(model.encode(SAMPLE)) == SAMPLE
    assert model.encode("") == [] and model.decode([]) == ""


def test_unknown_symbols_map_to_unk():
    model = train_bpe("abc abc", 2)
    ids = model.encode("abz")
    assert ids[-1] == model.unk_id


def test_training_is_deterministic():
    assert train_bpe(SAMPLE, 80).merges == train_bpe(SAMPLE, 80).merges


def test_save_load_round_trip(tmp_path):
    model = train_bpe(SAMPLE + '\n"quote"\t\\', 50)
    path = tmp_path / "bpe.txt"
    model.save(path)
    header = path.read_text(encoding="utf-8").splitlines()[0]
    assert header == f"caslm-bpe 1 merges=50 vocab={model.vocab_size}"
    loaded = BPEModel.load(path)
    assert loaded.merges == model.merges and loaded.vocab == model.vocab


def test_load_rejects_garbage(tmp_path):
    bad = tmp_path / "x.txt"
    bad.write_text("not a tokenizer\n")
    with pytest.raises(TokenizerError):
        BPEModel.load(bad)


def _write_splits(tmp_path):
    paths = []
    for i, name in enumerate(("train", "valid", "test")):
        p = tmp_path / f"{name}.txt"
        p.write_text(generate_text(2000, "pretrain", seed=i), encoding="utf-8")
        paths.append(p)
    return paths


def test_build_splits_deterministic_and_counts(tmp_path):
    paths = _write_splits(tmp_path)
    model = train_bpe(read_utf8(paths[0]), 100)
    a = build_splits(paths, model)
    b = build_splits(paths, model)
    for name in ("train", "valid", "test"):
        np.testing.assert_array_equal(a.split(name), b.split(name))
        assert a.split(name).max() < a.vocab_size
    # recount: tokens of each document plus one separator per document
    counts = a.token_counts()
    for name, p in zip(("train", "valid", "test"), paths):
        docs = [d for d in p.read_text(encoding="utf-8").split("\n\n") if d.strip()]
        assert counts[name] == sum(len(model.encode(d.strip("\n"))) + 1 for d in docs)
        assert int((a.split(name) == model.eot_id).sum()) == len(docs)


def test_build_splits_errors(tmp_path):
    paths = _write_splits(tmp_path)
    model = train_bpe(read_utf8(paths[0]), 10)
    with pytest.raises(FileNotFoundError):
        build_splits([paths[0], paths[1], tmp_path / "missing.txt"], model)
    bad = tmp_path / "bad.txt"
    bad.write_bytes(b"ok \xff\xfe")
    with pytest.raises(TokenizerError):
        build_splits([paths[0], paths[1], bad], model)


def test_corpus_npz_round_trip(tmp_path):
    paths = _write_splits(tmp_path)
    corpus = build_splits(paths, train_bpe(read_utf8(paths[0]), 30))
    corpus.save(tmp_path / "c.npz")
    loaded = TokenizedCorpus.load(tmp_path / "c.npz")
    assert loaded.vocab_size == corpus.vocab_size
    np.testing.assert_array_equal(loaded.test, corpus.test)
