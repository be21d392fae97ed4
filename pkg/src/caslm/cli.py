"""Command-line entry point: ``caslm {synth,tokenize,pretrain,search,ablate,eval}``.

Configuration is a flat JSON object of dotted keys; any key can be overridden
with ``--key value`` (e.g. ``--finetune.epochs 3``). Every command writes
``manifest.json`` (the resolved config) next to its outputs; passing that
manifest back through ``--config`` reruns the command identically.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from . import config as C
from .architecture import base_descriptor
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, save_model
from .corpus import DOMAINS, write_splits
from .search import PRESETS, PresetError, SearchLog, coordinate_search, run_ablation
from .tokenizer import BPEModel, TokenizedCorpus, TokenizerError, build_splits, read_utf8, train_bpe
from .trainer import (
    TrainingDiverged,
    VocabMismatchError,
    evaluate_perplexity,
    pretrain_base,
    write_loss_curve,
)

log = logging.getLogger("caslm")

OUT_ENV = "CASLM_OUT"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_MISMATCH = 4
EXIT_DIVERGED = 5
EXIT_INVALID_OUTPUT = 6


class OutputValidationError(RuntimeError):
    pass


def _parse_overrides(extra: Sequence[str]) -> dict[str, str]:
    overrides: dict[str, str] = {}
    i = 0
    while i < len(extra):
        flag = extra[i]
        if not flag.startswith("--") or len(flag) <= 2:
            raise C.ConfigError(f"unexpected argument {flag!r}")
        key = flag[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise C.ConfigError(f"{flag} needs a value")
            value = extra[i + 1]
            i += 2
        overrides[key] = value
    return overrides


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (or a previous run's manifest.json)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help=f"output directory (relative paths land under ${OUT_ENV} if set)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="caslm",
        description="Coordinate architecture search for small Transformer language models.",
        epilog="Any config key may also be given as --key value, e.g. --finetune.epochs 3.",
    )
    parser.add_argument("--version", action="version", version=f"caslm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic train/valid/test corpus")
    p.add_argument("--chars", type=int, default=200_000)
    p.add_argument("--domain", choices=DOMAINS, default="pretrain")

    p = sub.add_parser("tokenize", parents=[common], help="train (or reuse) BPE and tokenize splits")
    p.add_argument("--train")
    p.add_argument("--valid")
    p.add_argument("--test")
    p.add_argument("--num-merges", type=int)
    p.add_argument("--bpe", help="reuse an existing tokenizer instead of training one")

    p = sub.add_parser("pretrain", parents=[common], help="pretrain the base Transformer")
    p.add_argument("--corpus", help="tokenized corpus (.npz) from `tokenize`")

    p = sub.add_parser("search", parents=[common], help="run coordinate architecture search")
    p.add_argument("--base", help="base checkpoint from `pretrain`")
    p.add_argument("--corpus")
    p.add_argument("--steps", type=int)
    p.add_argument("--preset", help="full | subset-only | lstm-only")

    p = sub.add_parser("ablate", parents=[common], help="run ablation variants and tabulate them")
    p.add_argument("--base")
    p.add_argument("--corpus")
    p.add_argument("--steps", type=int)
    p.add_argument("--preset", help="comma-separated variants or 'all'")

    p = sub.add_parser("eval", parents=[common], help="perplexity of a checkpoint on one split")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--split", choices=("train", "valid", "test"))
    return parser


def _flag_overrides(args: argparse.Namespace) -> dict[str, Any]:
    mapping = {
        "seed": "seed",
        "out": "out",
        "train": "data.train",
        "valid": "data.valid",
        "test": "data.test",
        "num_merges": "tokenizer.num_merges",
        "bpe": "data.bpe",
        "corpus": "data.corpus",
        "base": "search.base",
        "steps": "search.steps",
        "checkpoint": "eval.checkpoint",
        "split": "eval.split",
    }
    out = {}
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    preset = getattr(args, "preset", None)
    if preset is not None:
        out["ablate.variants" if args.command == "ablate" else "search.preset"] = preset
    return out


def _out_dir(cfg: dict, command: str) -> Path:
    out = Path(cfg["out"] or f"runs/{command}")
    root = os.environ.get(OUT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest(out: Path, command: str, cfg: dict, argv: Sequence[str]) -> None:
    _write_json(out / "manifest.json", {
        "command": command,
        "config": cfg,
        "argv": list(argv),
        "version": __version__,
    })


def _require(path: str, what: str) -> Path:
    if not path:
        raise C.ConfigError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _check_outputs(paths: Sequence[Path]) -> None:
    for p in paths:
        if not p.exists() or p.stat().st_size == 0:
            raise OutputValidationError(f"expected output missing or empty: {p}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: dict, out: Path, args) -> dict:
    paths = write_splits(out, args.chars, args.domain, cfg["seed"])
    _check_outputs(list(paths.values()))
    return {name: str(p) for name, p in paths.items()}


def cmd_tokenize(cfg: dict, out: Path, args=None) -> dict:
    files = [_require(cfg[f"data.{s}"], f"{s} text (data.{s})") for s in ("train", "valid", "test")]
    if cfg["data.bpe"]:
        model = BPEModel.load(_require(cfg["data.bpe"], "tokenizer (data.bpe)"))
    else:
        model = train_bpe(read_utf8(files[0]), cfg["tokenizer.num_merges"])
    corpus = build_splits(files, model)
    bpe_path, corpus_path = out / "bpe.txt", out / "corpus.npz"
    model.save(bpe_path)
    corpus.save(corpus_path)
    summary = {
        "vocab_size": model.vocab_size,
        "merges": len(model.merges),
        "tokens": corpus.token_counts(),
        "bpe": str(bpe_path),
        "corpus": str(corpus_path),
    }
    _write_json(out / "summary.json", summary)
    if BPEModel.load(bpe_path).merges != model.merges:
        raise OutputValidationError("tokenizer file does not round-trip")
    TokenizedCorpus.load(corpus_path)
    return summary


def _load_corpus(cfg: dict) -> TokenizedCorpus:
    return TokenizedCorpus.load(_require(cfg["data.corpus"], "tokenized corpus (data.corpus)"))


def cmd_pretrain(cfg: dict, out: Path, args=None) -> dict:
    corpus = _load_corpus(cfg)
    mc = C.model_config(cfg, corpus.vocab_size)
    desc = base_descriptor(cfg["model.blocks"], cfg["model.head_kind"], cfg["model.mos_components"])
    tc = C.train_config(cfg, "pretrain")
    base, result = pretrain_base(corpus, mc, desc, tc)
    ckpt = out / "base.ckpt"
    summary = {
        "val_ppl": result.val_ppl,
        "test_ppl": result.test_ppl,
        "seconds": result.seconds,
        "tokens": result.tokens,
        "parameters": result.total_params,
        "eval_seq_len": tc.seq_len,
        "eval_batch_size": tc.batch_size,
        "checkpoint": str(ckpt),
    }
    save_checkpoint(ckpt, base.descriptor, base.config, base.arrays, {"kind": "base", "val_ppl": result.val_ppl})
    write_loss_curve(out / "loss_curve.csv", result.curve)
    _write_json(out / "summary.json", summary)
    load_checkpoint(ckpt)
    _check_outputs([ckpt, out / "loss_curve.csv"])
    return summary


def _load_base(cfg: dict, corpus: TokenizedCorpus):
    ckpt = load_checkpoint(_require(cfg["search.base"], "base checkpoint (search.base)"))
    if ckpt.config.vocab_size != corpus.vocab_size:
        raise VocabMismatchError(
            f"base checkpoint vocabulary {ckpt.config.vocab_size} != corpus vocabulary {corpus.vocab_size}"
        )
    return ckpt.base_weights()


def cmd_search(cfg: dict, out: Path, args=None) -> dict:
    corpus = _load_corpus(cfg)
    base = _load_base(cfg, corpus)
    sc = C.search_config(cfg)
    best, slog = coordinate_search(base, corpus, sc)
    log_path, summary_path = slog.write(out)
    ckpt = out / "best.ckpt"
    if best.model is not None:
        save_model(ckpt, best.model, {"kind": "search-best", "val_ppl": best.val_ppl})
        load_checkpoint(ckpt)
    SearchLog.read(out)
    _check_outputs([summary_path])
    return slog.summary()


def cmd_ablate(cfg: dict, out: Path, args=None) -> dict:
    corpus = _load_corpus(cfg)
    base = _load_base(cfg, corpus)
    variants = [v.strip() for v in cfg["ablate.variants"].split(",") if v.strip()]
    if variants == ["all"]:
        variants = ["only", "none", "first", "last", "subset-only", "lstm-only"]
    unknown = [v for v in variants if v not in PRESETS]
    if unknown:
        raise PresetError(f"unknown ablation variants {unknown}; expected from {PRESETS}")
    sc = C.search_config(cfg)
    rows = []
    for variant in variants:
        log.info("ablation variant %s", variant)
        _, slog = run_ablation(variant, base, corpus, sc)
        slog.write(out / variant)
        d = slog.best_descriptor
        rows.append({
            "variant": variant,
            "val_ppl": slog.best_val_ppl,
            "test_ppl": slog.best_test_ppl,
            "num_blocks": d.num_blocks,
            "lstm_position": d.lstm_position,
            "lstm_count": d.lstm_count,
            "frozen_blocks": " ".join(map(str, sorted(d.frozen_blocks))),
            "positional_embedding": d.use_positional_embedding,
            "segment_embedding": d.use_segment_embedding,
            "candidates": len(slog.records),
            "descriptor": d.to_json(),
        })
    table = out / "ablation.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["variant"])
        writer.writeheader()
        writer.writerows(rows)
    with open(table, newline="") as fh:
        if sum(1 for _ in csv.DictReader(fh)) != len(variants):
            raise OutputValidationError("ablation table row count does not match variants")
    summary = {"variants": variants, "table": str(table), "rows": rows}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_eval(cfg: dict, out: Path, args=None) -> dict:
    corpus = _load_corpus(cfg)
    ckpt = load_checkpoint(_require(cfg["eval.checkpoint"], "checkpoint (eval.checkpoint)"))
    if ckpt.config.vocab_size != corpus.vocab_size:
        raise VocabMismatchError(
            f"checkpoint vocabulary {ckpt.config.vocab_size} != corpus vocabulary {corpus.vocab_size}"
        )
    model = ckpt.to_model()
    tc = C.train_config(cfg, "finetune")
    ppl = evaluate_perplexity(model, corpus.split(cfg["eval.split"]), tc.seq_len, tc.batch_size)
    result = {"split": cfg["eval.split"], "ppl": ppl, "checkpoint": cfg["eval.checkpoint"]}
    _write_json(out / "eval.json", result)
    print(f"{cfg['eval.split']} ppl {ppl:.6f}")
    return result


COMMANDS = {
    "synth": cmd_synth,
    "tokenize": cmd_tokenize,
    "pretrain": cmd_pretrain,
    "search": cmd_search,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        file_values = C.load_file(args.config) if args.config else {}
        overrides = {**_parse_overrides(extra), **_flag_overrides(args)}
        cfg = C.resolve(file_values, overrides)
        out = _out_dir(cfg, args.command)
        _manifest(out, args.command, cfg, argv)
        result = COMMANDS[args.command](cfg, out, args)
    except (C.ConfigError, PresetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (VocabMismatchError, CheckpointError, TokenizerError) as exc:
        print(f"input mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OutputValidationError as exc:
        print(f"output validation failed: {exc}", file=sys.stderr)
        return EXIT_INVALID_OUTPUT
    if args.command != "eval":
        print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
