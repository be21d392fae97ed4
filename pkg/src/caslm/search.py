"""Greedy coordinate architecture search, ablation presets, and search-cost accounting."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Protocol

import numpy as np

from .architecture import (
    ADD_LINEAR,
    ADD_LSTM,
    FIX_SUBSET,
    TRANSFORMATIONS,
    ArchDescriptor,
    BaseWeights,
    LanguageModel,
    Transformation,
    instantiate_model,
    sample_candidate,
)
from .engine import NonFiniteError
from .rng import stream
from .tokenizer import TokenizedCorpus
from .trainer import TrainConfig, TrainingDiverged, count_training_tokens, fine_tune

log = logging.getLogger(__name__)

SEARCH_PRESETS: dict[str, tuple[str, ...]] = {
    "full": TRANSFORMATIONS,
    "subset-only": (ADD_LINEAR, FIX_SUBSET),
    "lstm-only": (ADD_LINEAR, ADD_LSTM),
}
PLACEMENT_PRESETS = ("only", "none", "first", "last")
PRESETS = tuple(SEARCH_PRESETS) + PLACEMENT_PRESETS
WEIGHT_MODES = ("restart", "inherit")


class PresetError(ValueError):
    pass


@dataclass
class SearchConfig:
    steps: int = 10
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    preset: str = "full"
    weights: str = "restart"
    head_kind: str = "mos"
    mos_components: int = 3
    # fixed-placement ablations
    lstm_layers: int = 1
    only_lstm_layers: int = 6
    freeze_base_blocks: bool = True

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValueError(f"search steps must be >= 0, got {self.steps}")
        if self.preset not in PRESETS:
            raise PresetError(f"unknown preset {self.preset!r}; expected one of {PRESETS}")
        if self.weights not in WEIGHT_MODES:
            raise ValueError(f"weights mode must be one of {WEIGHT_MODES}, got {self.weights!r}")


@dataclass
class Evaluation:
    """What one fine-tune of one architecture produced."""

    val_ppl: float
    test_ppl: float
    tokens: int = 0
    model: Optional[LanguageModel] = None
    weights: Optional[dict] = None
    trainable_params: int = 0


class Evaluator(Protocol):
    def __call__(
        self, descriptor: ArchDescriptor, step: int, parent: Optional[Evaluation]
    ) -> Evaluation: ...


def _ppl_json(x: float):
    return x if math.isfinite(x) else None


def _ppl_from_json(x) -> float:
    return math.inf if x is None else float(x)


@dataclass
class CandidateRecord:
    step: int
    transformations: list[Transformation]
    parent: ArchDescriptor
    descriptor: ArchDescriptor
    val_ppl: float
    test_ppl: float
    accepted: bool
    best_val_ppl: float
    seconds: float = 0.0
    tokens: int = 0
    error: Optional[str] = None

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "step": self.step,
            "transformations": [t.to_dict() for t in self.transformations],
            "parent": self.parent.to_dict(),
            "descriptor": self.descriptor.to_dict(),
            "val_ppl": _ppl_json(self.val_ppl),
            "test_ppl": _ppl_json(self.test_ppl),
            "accepted": self.accepted,
            "best_val_ppl": _ppl_json(self.best_val_ppl),
            "tokens": self.tokens,
            "error": self.error,
        }
        if timing:
            d["seconds"] = self.seconds
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CandidateRecord":
        return cls(
            step=d["step"],
            transformations=[Transformation.from_dict(t) for t in d["transformations"]],
            parent=ArchDescriptor.from_dict(d["parent"]),
            descriptor=ArchDescriptor.from_dict(d["descriptor"]),
            val_ppl=_ppl_from_json(d["val_ppl"]),
            test_ppl=_ppl_from_json(d["test_ppl"]),
            accepted=d["accepted"],
            best_val_ppl=_ppl_from_json(d["best_val_ppl"]),
            seconds=d.get("seconds", 0.0),
            tokens=d.get("tokens", 0),
            error=d.get("error"),
        )


@dataclass
class InitialRecord:
    descriptor: ArchDescriptor
    val_ppl: float
    test_ppl: float
    seconds: float = 0.0
    tokens: int = 0
    error: Optional[str] = None

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "descriptor": self.descriptor.to_dict(),
            "val_ppl": _ppl_json(self.val_ppl),
            "test_ppl": _ppl_json(self.test_ppl),
            "tokens": self.tokens,
            "error": self.error,
        }
        if timing:
            d["seconds"] = self.seconds
        return d


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class SearchLog:
    preset: str
    seed: int
    initial: InitialRecord
    records: list[CandidateRecord] = field(default_factory=list)
    best_descriptor: Optional[ArchDescriptor] = None
    best_val_ppl: float = math.inf
    best_test_ppl: float = math.inf

    def best_ppl_sequence(self) -> list[float]:
        return [self.initial.val_ppl] + [r.best_val_ppl for r in self.records]

    def to_jsonl(self, timing: bool = True) -> str:
        return "".join(_dumps(r.to_dict(timing)) + "\n" for r in self.records)

    def summary(self, timing: bool = True) -> dict:
        return {
            "preset": self.preset,
            "seed": self.seed,
            "initial": self.initial.to_dict(timing),
            "steps": len(self.records),
            "accepted": sum(r.accepted for r in self.records),
            "best_descriptor": None if self.best_descriptor is None else self.best_descriptor.to_dict(),
            "best_val_ppl": _ppl_json(self.best_val_ppl),
            "best_test_ppl": _ppl_json(self.best_test_ppl),
            "cost": account_search_cost(self, timing),
        }

    def write(self, directory: str | Path) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        log_path = directory / "log.jsonl"
        summary_path = directory / "summary.json"
        log_path.write_text(self.to_jsonl(), encoding="utf-8")
        summary_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return log_path, summary_path

    @classmethod
    def read(cls, directory: str | Path) -> "SearchLog":
        directory = Path(directory)
        summary = json.loads((directory / "summary.json").read_text(encoding="utf-8"))
        records = [
            CandidateRecord.from_dict(json.loads(line))
            for line in (directory / "log.jsonl").read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        ini = summary["initial"]
        best = summary["best_descriptor"]
        return cls(
            preset=summary["preset"],
            seed=summary["seed"],
            initial=InitialRecord(
                ArchDescriptor.from_dict(ini["descriptor"]),
                _ppl_from_json(ini["val_ppl"]),
                _ppl_from_json(ini["test_ppl"]),
                ini.get("seconds", 0.0),
                ini.get("tokens", 0),
                ini.get("error"),
            ),
            records=records,
            best_descriptor=None if best is None else ArchDescriptor.from_dict(best),
            best_val_ppl=_ppl_from_json(summary["best_val_ppl"]),
            best_test_ppl=_ppl_from_json(summary["best_test_ppl"]),
        )


def account_search_cost(log: SearchLog, timing: bool = True) -> dict:
    """Candidate evaluations, wall-clock and tokens; the baseline fine-tune is reported apart."""
    report = {
        "candidate_evaluations": len(log.records),
        "baseline_evaluations": 1,
        "tokens_processed": sum(r.tokens for r in log.records),
        "baseline_tokens": log.initial.tokens,
    }
    if timing:
        report["wall_clock_seconds"] = math.fsum(r.seconds for r in log.records)
        report["baseline_seconds"] = log.initial.seconds
    return report


# ---------------------------------------------------------------------------
# evaluators
# ---------------------------------------------------------------------------


class FineTuneEvaluator:
    """Instantiate a descriptor on the pretrained base and fine-tune it."""

    def __init__(
        self,
        base: BaseWeights,
        corpus: TokenizedCorpus,
        train: TrainConfig,
        *,
        seed: int = 0,
        weights: str = "restart",
        strict_blocks: bool = True,
    ):
        self.base = base
        self.corpus = corpus
        self.train = train
        self.seed = seed
        self.weights = weights
        self.strict_blocks = strict_blocks

    def __call__(self, descriptor: ArchDescriptor, step: int, parent: Optional[Evaluation]) -> Evaluation:
        donor = parent.weights if (self.weights == "inherit" and parent is not None) else None
        model = instantiate_model(
            descriptor,
            self.base,
            stream(self.seed, "init", step),
            train_embeddings=self.train.train_embeddings,
            strict_blocks=self.strict_blocks,
            donor=donor,
        )
        result = fine_tune(model, self.corpus, replace(self.train, seed=_step_seed(self.seed, step)))
        return Evaluation(
            val_ppl=result.val_ppl,
            test_ppl=result.test_ppl,
            tokens=result.tokens,
            model=model,
            weights=result.weights,
            trainable_params=result.trainable_params,
        )

    def expected_tokens(self) -> int:
        return count_training_tokens(self.corpus.train.size, self.train)[1]


def _step_seed(seed: int, step: int) -> int:
    # one dropout stream per (run seed, step)
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def initial_descriptor(base: ArchDescriptor, head_kind: str = "mos", mos_components: int = 3) -> ArchDescriptor:
    """The base with a fresh output head and every block frozen (head-only fine-tune)."""
    return replace(
        base,
        has_output_linear=True,
        head_kind=head_kind,
        mos_components=mos_components,
        frozen_blocks=frozenset(range(base.num_blocks)),
    )


def _run_evaluation(evaluate, descriptor, step, parent, clock):
    t0 = clock()
    try:
        result = evaluate(descriptor, step, parent)
        error = None
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        log.warning("step %d: fine-tune aborted: %s", step, exc)
        result = Evaluation(math.inf, math.inf)
        error = str(exc)
    return result, clock() - t0, error


def coordinate_search(
    base: BaseWeights,
    corpus: TokenizedCorpus | None,
    config: SearchConfig,
    evaluate: Evaluator | None = None,
    clock: Callable[[], float] = time.perf_counter,
) -> tuple[Evaluation, SearchLog]:
    """Greedy search: sample from the current best, fine-tune, keep strict improvements.

    Returns the best evaluation (its ``model`` is the fine-tuned network when a
    real evaluator is used) and the full log.
    """
    if config.preset not in SEARCH_PRESETS:
        raise PresetError(f"{config.preset!r} is not a search preset")
    pool = SEARCH_PRESETS[config.preset]
    if evaluate is None:
        if corpus is None:
            raise ValueError("a corpus is required unless an evaluator is supplied")
        evaluate = FineTuneEvaluator(base, corpus, config.train, seed=config.seed, weights=config.weights)
    sampling = stream(config.seed, "sampling")

    best_desc = initial_descriptor(base.descriptor, config.head_kind, config.mos_components)
    best, seconds, error = _run_evaluation(evaluate, best_desc, 0, None, clock)
    slog = SearchLog(
        preset=config.preset,
        seed=config.seed,
        initial=InitialRecord(best_desc, best.val_ppl, best.test_ppl, seconds, best.tokens, error),
    )
    log.info("initial net: val ppl %.3f", best.val_ppl)

    for step in range(1, config.steps + 1):
        candidate, applied = sample_candidate(best_desc, sampling, pool)
        result, seconds, error = _run_evaluation(evaluate, candidate, step, best, clock)
        accepted = result.val_ppl < best.val_ppl
        record = CandidateRecord(
            step=step,
            transformations=applied,
            parent=best_desc,
            descriptor=candidate,
            val_ppl=result.val_ppl,
            test_ppl=result.test_ppl,
            accepted=accepted,
            best_val_ppl=min(result.val_ppl, best.val_ppl),
            seconds=seconds,
            tokens=result.tokens,
            error=error,
        )
        slog.records.append(record)
        log.info(
            "step %d: %s val ppl %.3f %s",
            step, [t.kind for t in applied], result.val_ppl, "accepted" if accepted else "rejected",
        )
        if accepted:
            best, best_desc = result, candidate

    slog.best_descriptor = best_desc
    slog.best_val_ppl = best.val_ppl
    slog.best_test_ppl = best.test_ppl
    return best, slog


def placement_descriptor(preset: str, base: ArchDescriptor, config: SearchConfig) -> ArchDescriptor:
    """The fixed-placement variants: LSTM only, no LSTM (doubled blocks), LSTM first, LSTM last."""
    n = base.num_blocks
    head = dict(has_output_linear=True, head_kind=config.head_kind, mos_components=config.mos_components)
    frozen = frozenset(range(n)) if config.freeze_base_blocks else frozenset()
    if preset == "only":
        return ArchDescriptor(
            num_blocks=0, lstm_position="first", lstm_count=config.only_lstm_layers,
            use_positional_embedding=False, use_segment_embedding=False, **head,
        )
    if preset == "none":
        return replace(base, num_blocks=2 * n, frozen_blocks=frozen, **head)
    if preset == "first":
        return replace(
            base, lstm_position="first", lstm_count=config.lstm_layers, frozen_blocks=frozen,
            use_positional_embedding=False, use_segment_embedding=False, **head,
        )
    if preset == "last":
        return replace(base, lstm_position="last", lstm_count=config.lstm_layers, frozen_blocks=frozen, **head)
    raise PresetError(f"{preset!r} is not a placement preset")


def run_ablation(
    preset: str,
    base: BaseWeights,
    corpus: TokenizedCorpus | None,
    config: SearchConfig,
    evaluate: Evaluator | None = None,
    clock: Callable[[], float] = time.perf_counter,
) -> tuple[Evaluation, SearchLog]:
    """Run one ablation preset.

    Search presets restrict the transformation pool and run the full search.
    Placement presets fine-tune one fixed architecture once; the log then has
    that variant as its initial net and no candidate records.
    """
    if preset not in PRESETS:
        raise PresetError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    config = replace(config, preset=preset)
    if preset in SEARCH_PRESETS:
        return coordinate_search(base, corpus, config, evaluate, clock)
    desc = placement_descriptor(preset, base.descriptor, config)
    if evaluate is None:
        if corpus is None:
            raise ValueError("a corpus is required unless an evaluator is supplied")
        evaluate = FineTuneEvaluator(
            base, corpus, config.train, seed=config.seed, weights="restart", strict_blocks=False
        )
    result, seconds, error = _run_evaluation(evaluate, desc, 0, None, clock)
    slog = SearchLog(
        preset=preset,
        seed=config.seed,
        initial=InitialRecord(desc, result.val_ppl, result.test_ppl, seconds, result.tokens, error),
        best_descriptor=desc,
        best_val_ppl=result.val_ppl,
        best_test_ppl=result.test_ppl,
    )
    return result, slog
