"""Dev-set evaluation: grading, failure collection, error distribution.

The model is run R times over every dev QA item. An item becomes a
failure case when its error rate across the R runs exceeds gamma
(strict by default: 3/5 wrong at gamma=0.6 is *not* a failure). The
failure pool is aggregated per capability dimension into the error
rate distribution that drives downstream sampling:

    e_k = |dev samples labeled k with a failure| / |dev samples labeled k|

with e_k = 0 by convention when the denominator is zero. A sample with
several failing questions counts once in the numerator, keeping every
e_k in [0, 1].
"""

from __future__ import annotations

import json
import logging
import re
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .clients import Answer, ClientError, DescriptionScorer, ModelClient, Question
from .datastore import Datastore, QAItem, Sample

logger = logging.getLogger(__name__)


class GradingError(ValueError):
    pass


@dataclass
class GradeResult:
    correct: bool
    score: float | None = None


@dataclass
class FailureCase:
    sample_id: str
    qa_index: int
    error_rate: float
    capability_labels: list[int]
    transcripts: list[str]


@dataclass
class FailurePool:
    cases: list[FailureCase] = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for c in self.cases:
                fh.write(
                    json.dumps(
                        {
                            "sample_id": c.sample_id,
                            "qa_index": c.qa_index,
                            "error_rate": c.error_rate,
                            "capability_labels": c.capability_labels,
                            "transcripts": c.transcripts,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )

    @classmethod
    def load(cls, path: str | Path) -> "FailurePool":
        pool = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    pool.cases.append(FailureCase(**rec))
        return pool


@dataclass
class ErrorDistribution:
    e: np.ndarray
    support_counts: np.ndarray

    def to_dict(self) -> dict:
        return {"e": [float(x) for x in self.e], "support_counts": [int(c) for c in self.support_counts]}


@dataclass
class MetricsSnapshot:
    overall_acc: float
    per_type_acc: dict[str, float]
    per_modality_acc: dict[str, float]
    n_items: int

    def to_dict(self) -> dict:
        return {
            "overall_acc": self.overall_acc,
            "per_type_acc": self.per_type_acc,
            "per_modality_acc": self.per_modality_acc,
            "n_items": self.n_items,
        }


# -- grading -----------------------------------------------------------------

_LETTERS = string.ascii_lowercase


def _normalize(text: str) -> str:
    text = text.casefold().strip()
    text = re.sub(r"[^\w\s]", " ", text)
    return " ".join(text.split())


def _contains_tokens(haystack: list[str], needle: list[str]) -> bool:
    if not needle or len(needle) > len(haystack):
        return False
    return any(haystack[i : i + len(needle)] == needle for i in range(len(haystack) - len(needle) + 1))


def option_index(answer_text: str, choices: Sequence[str]) -> int | None:
    """Map free-form answer text onto a choice index.

    Full-text match wins, then a uniquely contained choice text (token
    contiguous, so the article "a" never matches inside a word), then
    the first single-letter token naming an option — "b) motion
    artifact" resolves to option 1 either way.
    """
    norm = _normalize(answer_text)
    if not norm:
        return None
    tokens = norm.split()
    norm_choices = [_normalize(c) for c in choices]
    for i, c in enumerate(norm_choices):
        if norm == c:
            return i
    contained = [i for i, c in enumerate(norm_choices) if _contains_tokens(tokens, c.split())]
    if len(contained) == 1:
        return contained[0]
    for token in tokens:
        if len(token) == 1 and token in _LETTERS:
            idx = _LETTERS.index(token)
            if idx < len(choices):
                return idx
    return None


def grade(
    answer_text: str,
    qa: QAItem,
    scorer: DescriptionScorer | None = None,
    pass_threshold: float = 0.5,
) -> GradeResult:
    """Grade one answer. Perception items are letter/text matched against
    the gold answer; description items delegate to the scorer client and
    pass at ``pass_threshold``."""
    if qa.task == "perception":
        gold = option_index(qa.gold_answer, qa.choices)
        if gold is None:
            raise GradingError(f"gold answer {qa.gold_answer!r} does not name a choice")
        return GradeResult(correct=option_index(answer_text, qa.choices) == gold)
    if scorer is None:
        raise GradingError("scorer required for description items")
    score = float(scorer.score(answer_text, qa.gold_answer))
    return GradeResult(correct=score >= pass_threshold, score=score)


# -- evaluation runs -----------------------------------------------------------


@dataclass
class ItemResult:
    sample_id: str
    qa_index: int
    answers: list[Answer]
    correct: list[bool]

    @property
    def error_rate(self) -> float:
        return sum(not c for c in self.correct) / len(self.correct)


def _question_of(qa: QAItem) -> Question:
    return Question(text=qa.question_text, task=qa.task, question_type=qa.question_type, choices=list(qa.choices))


def _run_item(
    sample: Sample,
    qa_index: int,
    qa: QAItem,
    model: ModelClient,
    runs: int,
    scorer: DescriptionScorer | None,
    pass_threshold: float,
) -> ItemResult:
    question = _question_of(qa)
    answers: list[Answer] = []
    correct: list[bool] = []
    for run in range(runs):
        try:
            ans = model.answer(sample.image_ref, question, run=run)
        except Exception:
            try:
                ans = model.answer(sample.image_ref, question, run=run)
            except Exception as exc:  # retried once, then counted wrong
                logger.warning("model failed twice on %s run %d: %s", sample.id, run, exc)
                answers.append(Answer(text="", token_logprobs=[]))
                correct.append(False)
                continue
        answers.append(ans)
        correct.append(grade(ans.text, qa, scorer=scorer, pass_threshold=pass_threshold).correct)
    return ItemResult(sample_id=sample.id, qa_index=qa_index, answers=answers, correct=correct)


def evaluate_items(
    store: Datastore,
    model: ModelClient,
    split: str = "dev",
    runs: int = 5,
    scorer: DescriptionScorer | None = None,
    pass_threshold: float = 0.5,
    parallelism: int = 1,
) -> list[ItemResult]:
    """Run the model ``runs`` times over every QA item of a split.

    Fan-out may be concurrent; results are ordered by (sample_id,
    qa_index) so aggregation never depends on completion order.
    """
    items = list(store.qa_items(split))
    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(
                pool.map(lambda it: _run_item(it[0], it[1], it[2], model, runs, scorer, pass_threshold), items)
            )
    else:
        results = [_run_item(s, i, qa, model, runs, scorer, pass_threshold) for s, i, qa in items]
    return sorted(results, key=lambda r: (r.sample_id, r.qa_index))


def failures_from(
    results: Sequence[ItemResult],
    store: Datastore,
    gamma: float,
    inclusive: bool = False,
) -> FailurePool:
    pool = FailurePool()
    for r in results:
        rate = r.error_rate
        failing = rate >= gamma if inclusive else rate > gamma
        if failing:
            pool.cases.append(
                FailureCase(
                    sample_id=r.sample_id,
                    qa_index=r.qa_index,
                    error_rate=rate,
                    capability_labels=list(store.sample(r.sample_id).capability_labels),
                    transcripts=[a.text for a in r.answers],
                )
            )
    return pool


def collect_failures(
    store: Datastore,
    model: ModelClient,
    runs: int,
    gamma: float,
    split: str = "dev",
    inclusive: bool = False,
    scorer: DescriptionScorer | None = None,
    pass_threshold: float = 0.5,
    parallelism: int = 1,
) -> FailurePool:
    """Evaluate the split and keep exactly the items whose error rate
    across ``runs`` exceeds ``gamma`` (or meets it, with ``inclusive``)."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must be in [0, 1)")
    results = evaluate_items(
        store, model, split=split, runs=runs, scorer=scorer, pass_threshold=pass_threshold, parallelism=parallelism
    )
    return failures_from(results, store, gamma, inclusive=inclusive)


# -- aggregation ---------------------------------------------------------------


def error_distribution(pool: FailurePool, dev_samples: Sequence[Sample], k: int) -> ErrorDistribution:
    """Per-dimension error rates over the dev set (distinct failing
    samples over labeled dev samples; 0 where a dimension has no dev
    support)."""
    support = np.zeros(k, dtype=np.int64)
    for s in dev_samples:
        if len(s.capability_labels) != k:
            raise ValueError(f"sample {s.id} has K={len(s.capability_labels)}, expected {k}")
        support += np.asarray(s.capability_labels, dtype=np.int64)
    failing_ids: dict[str, np.ndarray] = {}
    for case in pool.cases:
        if len(case.capability_labels) != k:
            raise ValueError(f"failure case {case.sample_id} has K={len(case.capability_labels)}, expected {k}")
        failing_ids[case.sample_id] = np.asarray(case.capability_labels, dtype=np.int64)
    numer = np.zeros(k, dtype=np.int64)
    for labels in failing_ids.values():
        numer += labels
    e = np.zeros(k, dtype=np.float64)
    nonzero = support > 0
    e[nonzero] = numer[nonzero] / support[nonzero]
    return ErrorDistribution(e=e, support_counts=support)


def metrics_from(results: Sequence[ItemResult], store: Datastore) -> MetricsSnapshot:
    """Aggregate per-run correctness into overall / per-question-type /
    per-modality accuracies. Question types with no items are absent
    from the map rather than zero."""
    if not results:
        raise ValueError("no evaluation results to aggregate")
    qa_lookup = {(s.id, i): qa for s, i, qa in store.qa_items()}
    per_type: dict[str, list[float]] = {}
    per_modality: dict[str, list[float]] = {}
    overall: list[float] = []
    for r in results:
        acc = sum(r.correct) / len(r.correct)
        overall.append(acc)
        qa = qa_lookup[(r.sample_id, r.qa_index)]
        per_type.setdefault(qa.question_type, []).append(acc)
        per_modality.setdefault(store.sample(r.sample_id).modality, []).append(acc)
    return MetricsSnapshot(
        overall_acc=float(np.mean(overall)),
        per_type_acc={t: float(np.mean(v)) for t, v in sorted(per_type.items())},
        per_modality_acc={m: float(np.mean(v)) for m, v in sorted(per_modality.items())},
        n_items=len(results),
    )


def dev_metrics(
    store: Datastore,
    model: ModelClient,
    split: str = "dev",
    runs: int = 1,
    scorer: DescriptionScorer | None = None,
    pass_threshold: float = 0.5,
    parallelism: int = 1,
) -> MetricsSnapshot:
    results = evaluate_items(
        store, model, split=split, runs=runs, scorer=scorer, pass_threshold=pass_threshold, parallelism=parallelism
    )
    return metrics_from(results, store)
