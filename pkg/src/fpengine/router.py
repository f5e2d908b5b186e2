"""Progressive human-in-the-loop annotation routing.

Every annotation candidate gets a self-annotation from the current
model and a reference annotation from the oracle. At t=0 (cold start)
every record goes to full expert review. At t>0 two signals triage the
record:

* trajectory entropy H = mean negative token logprob of the
  self-annotation (model uncertainty),
* oracle agreement delta = bounded similarity between self and oracle.

Routing: H >= tau_H adopts the oracle; H < tau_H with delta < tau_ann
escalates to expert review; H < tau_H with delta >= tau_ann adopts the
self-annotation. Reviews resolve records via accept / edit / reject;
rejected samples never reach training and return to the unannotated
pool.
"""

from __future__ import annotations

import json
import threading
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

from .clients import Answer
from .quality import tokenize

ROUTE_ADOPT_ORACLE = "adopt_oracle"
ROUTE_ESCALATE = "escalate"
ROUTE_ADOPT_SELF = "adopt_self"
ROUTE_COLD_START = "cold_start_review"
ROUTES = (ROUTE_ADOPT_ORACLE, ROUTE_ESCALATE, ROUTE_ADOPT_SELF, ROUTE_COLD_START)
REVIEW_ROUTES = (ROUTE_ESCALATE, ROUTE_COLD_START)
ACTIONS = ("accept", "edit", "reject")


class RoutingError(ValueError):
    pass


class AlreadyResolvedError(RuntimeError):
    pass


def trajectory_entropy(token_logprobs: list[float]) -> float:
    """Mean negative log-probability of the generated trajectory.

    Length-invariant for constant per-token logprobs; zero when every
    token had probability one.
    """
    if not token_logprobs:
        raise RoutingError("empty trajectory")
    return -sum(token_logprobs) / len(token_logprobs)


def route(h_traj: float | None, delta_ann: float | None, tau_h: float, tau_ann: float, t: int) -> str:
    """Three-way routing decision; cold-start review for everything at
    t=0. Exactly one branch fires for any (H, delta)."""
    if t < 0:
        raise RoutingError("iteration must be >= 0")
    if t == 0:
        return ROUTE_COLD_START
    if h_traj is None:
        raise RoutingError("h_traj required at t > 0")
    if h_traj >= tau_h:
        return ROUTE_ADOPT_ORACLE
    if delta_ann is None:
        raise RoutingError("delta_ann required for confident records at t > 0")
    if delta_ann < tau_ann:
        return ROUTE_ESCALATE
    return ROUTE_ADOPT_SELF


# -- agreement scorers ---------------------------------------------------------


class TokenF1Scorer:
    """Token-level F1 overlap after normalization; symmetric, bounded,
    and 1.0 on identical texts."""

    def score(self, y_self: str, y_oracle: str) -> float:
        a = Counter(tokenize(y_self))
        b = Counter(tokenize(y_oracle))
        if not a or not b:
            return 1.0 if a == b else 0.0
        overlap = sum((a & b).values())
        if overlap == 0:
            return 0.0
        precision = overlap / sum(a.values())
        recall = overlap / sum(b.values())
        return 2 * precision * recall / (precision + recall)


class ExactMatchScorer:
    """Normalized exact match for option-style answers."""

    def score(self, y_self: str, y_oracle: str) -> float:
        return 1.0 if " ".join(tokenize(y_self)) == " ".join(tokenize(y_oracle)) else 0.0


def agreement(y_self_text: str, y_oracle_text: str, task: str) -> float:
    """Task-aware oracle agreement: exact option match for perception,
    token F1 for descriptions."""
    scorer = ExactMatchScorer() if task == "perception" else TokenF1Scorer()
    return scorer.score(y_self_text, y_oracle_text)


# -- annotation records ---------------------------------------------------------


@dataclass
class Review:
    action: str
    reviewer: str
    edited_text: str | None = None
    timestamp: str = ""


@dataclass
class AnnotationRecord:
    record_id: str
    iteration: int
    sample_id: str
    image_ref: str
    modality: str
    target_dimension: int
    question: dict
    y_self: dict | None
    y_oracle: dict | None
    h_traj: float | None
    delta_ann: float | None
    route: str
    review: dict | None = None
    final_label: str | None = None
    status: str = "pending"  # pending | resolved | rejected

    @property
    def resolved(self) -> bool:
        return self.status != "pending"

    def to_dict(self) -> dict:
        return asdict(self)


def make_record(
    record_id: str,
    iteration: int,
    sample_id: str,
    image_ref: str,
    modality: str,
    target_dimension: int,
    question: dict,
    y_self: Answer | None,
    y_oracle_text: str | None,
    tau_h: float,
    tau_ann: float,
    route_override: str = "",
) -> AnnotationRecord:
    """Compute signals, route, and auto-resolve the non-review routes."""
    h = None
    delta = None
    if y_self is not None and y_self.token_logprobs:
        h = trajectory_entropy(y_self.token_logprobs)
    if y_self is not None and y_oracle_text is not None:
        delta = agreement(y_self.text, y_oracle_text, question.get("task", "perception"))
    if route_override and iteration > 0:
        decision = route_override
    else:
        decision = route(h, delta, tau_h, tau_ann, iteration)
    if decision == ROUTE_ADOPT_ORACLE and y_oracle_text is None:
        raise RoutingError(f"oracle annotation required for {record_id}")
    rec = AnnotationRecord(
        record_id=record_id,
        iteration=iteration,
        sample_id=sample_id,
        image_ref=image_ref,
        modality=modality,
        target_dimension=target_dimension,
        question=question,
        y_self=None if y_self is None else {"text": y_self.text, "token_logprobs": list(y_self.token_logprobs)},
        y_oracle=None if y_oracle_text is None else {"text": y_oracle_text},
        h_traj=h,
        delta_ann=delta,
        route=decision,
    )
    if decision == ROUTE_ADOPT_ORACLE:
        rec.final_label = y_oracle_text
        rec.status = "resolved"
    elif decision == ROUTE_ADOPT_SELF:
        rec.final_label = y_self.text if y_self else None
        rec.status = "resolved"
    return rec


class AnnotationLog:
    """File-backed annotation record log (append-only, last line wins).

    Review submission is linearizable: one lock serializes resolution,
    so a record can never be resolved twice.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self.records: dict[str, AnnotationRecord] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = AnnotationRecord(**json.loads(line))
                        self.records[rec.record_id] = rec

    def _append(self, rec: AnnotationRecord) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")

    def add(self, rec: AnnotationRecord) -> None:
        with self._lock:
            if rec.record_id in self.records:
                return  # idempotent re-run of an annotation phase
            self.records[rec.record_id] = rec
            self._append(rec)

    def get(self, record_id: str) -> AnnotationRecord:
        return self.records[record_id]

    def __contains__(self, record_id: str) -> bool:
        return record_id in self.records

    def submit_review(
        self,
        record_id: str,
        action: str,
        reviewer: str,
        edited_text: str | None = None,
        timestamp: str = "",
        escalate_accept_adopts: str = "oracle",
    ) -> AnnotationRecord:
        """Resolve a pending review record via accept / edit / reject.

        Accept adopts the oracle annotation (cold start always; at t>0
        per ``escalate_accept_adopts``). Edit requires non-empty text.
        Reject excludes the record from training for good.
        """
        if action not in ACTIONS:
            raise RoutingError(f"unknown review action {action!r}")
        with self._lock:
            if record_id not in self.records:
                raise KeyError(record_id)
            rec = self.records[record_id]
            if rec.resolved:
                raise AlreadyResolvedError(f"record {record_id} already resolved")
            if rec.route not in REVIEW_ROUTES:
                raise RoutingError(f"record {record_id} is not awaiting review")
            if action == "edit" and not (edited_text or "").strip():
                raise RoutingError("edit requires non-empty edited_text")
            review = Review(action=action, reviewer=reviewer, edited_text=edited_text, timestamp=timestamp)
            if action == "accept":
                if rec.route == ROUTE_COLD_START or escalate_accept_adopts == "oracle":
                    source = rec.y_oracle
                else:
                    source = rec.y_self
                if source is None:
                    raise RoutingError(f"record {record_id} has no annotation to accept")
                rec.final_label = source["text"]
                rec.status = "resolved"
            elif action == "edit":
                rec.final_label = edited_text
                rec.status = "resolved"
            else:  # reject
                rec.final_label = None
                rec.status = "rejected"
            rec.review = asdict(review)
            self._append(rec)
            return rec

    # -- queue & stats ------------------------------------------------------

    def review_queue(
        self,
        modality: str | None = None,
        iteration: int | None = None,
        route_filter: str | None = None,
        cursor: int = 0,
        limit: int | None = None,
    ) -> tuple[list[AnnotationRecord], int | None]:
        """Unresolved review records ordered by (iteration, descending
        trajectory entropy). Returns (page, next_cursor)."""
        pending = [
            r
            for r in self.records.values()
            if not r.resolved
            and r.route in REVIEW_ROUTES
            and (modality is None or r.modality == modality)
            and (iteration is None or r.iteration == iteration)
            and (route_filter is None or r.route == route_filter)
        ]
        pending.sort(key=lambda r: (r.iteration, -(r.h_traj if r.h_traj is not None else float("-inf")), r.record_id))
        if cursor:
            pending = pending[cursor:]
        next_cursor = None
        if limit is not None and len(pending) > limit:
            pending = pending[:limit]
            next_cursor = cursor + limit
        return pending, next_cursor

    def pending_count(self, iteration: int | None = None) -> int:
        return len(self.review_queue(iteration=iteration)[0])

    def records_for_iteration(self, iteration: int) -> list[AnnotationRecord]:
        return sorted(
            (r for r in self.records.values() if r.iteration == iteration),
            key=lambda r: r.record_id,
        )

    def resolved_for_training(self, iteration: int) -> list[AnnotationRecord]:
        return [r for r in self.records_for_iteration(iteration) if r.status == "resolved"]

    def stats(self, iteration: int | None = None) -> dict:
        records = [r for r in self.records.values() if iteration is None or r.iteration == iteration]
        total = len(records)
        routed_review = [r for r in records if r.route in REVIEW_ROUTES]
        actions = Counter(r.review["action"] for r in records if r.review)
        reviewed = sum(actions.values())
        counts = {a: actions.get(a, 0) for a in ACTIONS}
        return {
            "total": total,
            "routes": dict(Counter(r.route for r in records)),
            "review_rate": (len(routed_review) / total) if total else 0.0,
            "counts": counts,
            "rates": {a: (counts[a] / reviewed if reviewed else 0.0) for a in ACTIONS},
            "resolved": sum(1 for r in records if r.status == "resolved"),
            "rejected": sum(1 for r in records if r.status == "rejected"),
            "pending": sum(1 for r in records if not r.resolved),
        }


def auto_review(
    log: AnnotationLog,
    reviewer,
    iteration: int | None = None,
    escalate_accept_adopts: str = "oracle",
) -> int:
    """Drain the review queue with a reviewer client (simulation runs).

    Timestamps stay empty so loop artifacts contain no wall-clock data.
    """
    resolved = 0
    queue, _ = log.review_queue(iteration=iteration)
    for rec in queue:
        action, edited_text, tag = reviewer.review(rec.to_dict())
        log.submit_review(
            rec.record_id,
            action,
            reviewer=tag,
            edited_text=edited_text,
            escalate_accept_adopts=escalate_accept_adopts,
        )
        resolved += 1
    return resolved


def rejected_sample_ids(log: AnnotationLog) -> set[str]:
    """Samples whose records were rejected: they return to the pool."""
    return {r.sample_id for r in log.records.values() if r.status == "rejected"}
