"""The closed evaluate -> explore -> evolve loop.

One iteration, in order: collect failures on dev, mine prototypes,
build the annotation set under the budget, annotate and route, wait out
the review queue, quality-filter, export the training set, hand it to
the trainer, and measure the new model on dev. Every phase writes a
content-stable artifact file; a rerun resumes by artifact presence, so
a crashed iteration converges to the same final state as an
uninterrupted one.

Termination: dev accuracy plateau (improvement below epsilon for
`patience` consecutive iterations), global budget exhaustion, or a halt
while the review queue is non-empty and no reviewer client is
configured.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import quality
from .clients import ClientSet, Question, resolve_clients
from .config import EngineConfig
from .datastore import Datastore, Sample
from .determinism import det_hash64
from .evaluator import (
    FailurePool,
    MetricsSnapshot,
    dev_metrics,
    error_distribution,
    evaluate_items,
    failures_from,
    metrics_from,
)
from .prototypes import cluster, extract_prototypes, fuse_pool, load_prototypes, save_prototypes
from .retriever import AnnotationEntry, AnnotationSet, VectorIndex, build_annotation_set
from .router import ROUTE_COLD_START, AnnotationLog, auto_review, make_record, trajectory_entropy

logger = logging.getLogger(__name__)

STATUS_RUNNING = "running"
STATUS_PLATEAUED = "plateaued"
STATUS_BUDGET = "budget_exhausted"
STATUS_HALTED = "halted"


class OrchestratorError(RuntimeError):
    pass


@dataclass
class IterationState:
    t: int = 0
    status: str = STATUS_RUNNING
    model_tag: str = ""
    metrics_history: list[dict] = field(default_factory=list)
    budget_spent: int = 0
    exported_sets: list[str] = field(default_factory=list)
    failure_pool_ref: str | None = None
    prototypes_ref: str | None = None
    halt_reason: str = ""

    def overall_history(self) -> list[float]:
        return [m["overall_acc"] for m in self.metrics_history]

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "status": self.status,
            "model_tag": self.model_tag,
            "metrics_history": self.metrics_history,
            "budget_spent": self.budget_spent,
            "exported_sets": self.exported_sets,
            "failure_pool_ref": self.failure_pool_ref,
            "prototypes_ref": self.prototypes_ref,
            "halt_reason": self.halt_reason,
        }


def check_plateau(overall_history: Sequence[float], epsilon: float, patience: int) -> bool:
    """True iff overall dev accuracy improved by < epsilon for `patience`
    consecutive completed iterations."""
    if patience < 1:
        raise ValueError("patience must be >= 1")
    deltas = [b - a for a, b in zip(overall_history, overall_history[1:])]
    if len(deltas) < patience:
        return False
    return all(d < epsilon for d in deltas[-patience:])


class Workspace:
    """Filesystem layout of one engine instance.

    root/
      config.toml  world.json?  models.json?  state.json
      <store>/     datastore files
      <artifacts>/ per-iteration phase artifacts + logs
    """

    def __init__(self, root: str | Path, config: EngineConfig):
        self.root = Path(root)
        self.config = config
        self.store_dir = self.root / config.store
        self.artifacts_dir = self.root / config.artifacts
        self.artifacts_dir.mkdir(parents=True, exist_ok=True)

    # -- paths -------------------------------------------------------------

    def state_path(self) -> Path:
        return self.root / "state.json"

    def artifact(self, name: str) -> Path:
        return self.artifacts_dir / name

    def annotation_log(self) -> AnnotationLog:
        return AnnotationLog(self.artifact("annotations.jsonl"))

    def store(self, dim: int | None = None, k: int | None = None) -> Datastore:
        return Datastore(self.store_dir, dim=dim, k=k)

    # -- state -------------------------------------------------------------

    def load_state(self) -> IterationState:
        path = self.state_path()
        if path.exists():
            return IterationState(**json.loads(path.read_text(encoding="utf-8")))
        return IterationState(model_tag=self.config.model)

    def save_state(self, state: IterationState) -> None:
        tmp = self.state_path().with_suffix(".tmp")
        tmp.write_text(json.dumps(state.to_dict(), sort_keys=True, indent=1), encoding="utf-8")
        tmp.replace(self.state_path())

    # -- ledger of everything that ever reached a training export ----------

    def load_ledger(self) -> dict:
        path = self.artifact("ledger.json")
        if path.exists():
            return json.loads(path.read_text(encoding="utf-8"))
        return {"exported_ids": [], "hashes": {}}

    def save_ledger(self, ledger: dict) -> None:
        ledger = {"exported_ids": sorted(set(ledger["exported_ids"])), "hashes": dict(sorted(ledger["hashes"].items()))}
        tmp = self.artifact("ledger.json.tmp")
        tmp.write_text(json.dumps(ledger, sort_keys=True, indent=1), encoding="utf-8")
        tmp.replace(self.artifact("ledger.json"))

    def log_event(self, phase: str, artifact_ref: str, counts: dict) -> None:
        with open(self.artifact("events.jsonl"), "a", encoding="utf-8") as fh:
            fh.write(
                json.dumps(
                    {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()), "phase": phase, "artifact_ref": artifact_ref, "counts": counts},
                    sort_keys=True,
                )
                + "\n"
            )

    def clients(self) -> ClientSet:
        return resolve_clients(self.config, str(self.root))

    def model_for_tag(self, tag: str):
        """Model client for an evolving tag (mock tags carry trained state)."""
        from . import simkit  # deferred; simkit imports this module

        if tag == "mock" or tag.startswith("mock:"):
            return simkit.resolve_mock("model", tag, str(self.root), self.config)
        return self.clients().model


def init_workspace(root: str | Path, config: EngineConfig, dim: int, k: int) -> Workspace:
    ws = Workspace(root, config)
    ws.store(dim=dim, k=k)
    config.save(ws.root / "config.toml")
    return ws


# -- annotation questions ------------------------------------------------------


def annotation_question(sample: Sample, k: int, mode: str = "mixed") -> Question:
    """Deterministic capability-oriented question for a pool sample."""
    if mode == "mixed":
        task = "perception" if det_hash64("anntask", sample.id) % 2 == 0 else "description"
    else:
        task = mode
    if task == "perception":
        return Question(
            text="Which degradation dimension dominates this image?",
            task="perception",
            question_type="what",
            choices=[f"dim{j}" for j in range(k)],
        )
    return Question(
        text="Describe the quality issues visible in this image and their clinical impact.",
        task="description",
        question_type="open_description",
    )


# -- phases ---------------------------------------------------------------------


def _evaluate_phase(ws: Workspace, state: IterationState, store: Datastore, model) -> tuple[FailurePool, list[float]]:
    t = state.t
    cfg = ws.config
    fail_path = ws.artifact(f"failures_{t:03d}.jsonl")
    entropy_path = ws.artifact(f"entropies_{t:03d}.json")
    metrics_path = ws.artifact(f"metrics_{t:03d}.json")
    if fail_path.exists() and entropy_path.exists() and metrics_path.exists():
        return FailurePool.load(fail_path), json.loads(entropy_path.read_text(encoding="utf-8"))
    clients = ws.clients()
    results = evaluate_items(
        store,
        model,
        split="dev",
        runs=cfg.runs,
        scorer=clients.scorer,
        pass_threshold=cfg.desc_pass_threshold,
        parallelism=cfg.eval_parallelism,
    )
    pool = failures_from(results, store, cfg.gamma, inclusive=cfg.gamma_inclusive)
    pool.save(fail_path)
    entropies = sorted(
        trajectory_entropy(r.answers[0].token_logprobs) for r in results if r.answers[0].token_logprobs
    )
    entropy_path.write_text(json.dumps(entropies), encoding="utf-8")
    metrics = metrics_from(results, store)
    metrics_path.write_text(json.dumps(metrics.to_dict(), sort_keys=True, indent=1), encoding="utf-8")
    ws.log_event("evaluate", fail_path.name, {"failures": len(pool.cases), "items": len(results)})
    return pool, entropies


def _mine_phase(ws: Workspace, state: IterationState, store: Datastore, pool: FailurePool):
    t = state.t
    cfg = ws.config
    proto_path = ws.artifact(f"prototypes_{t:03d}.jsonl")
    if proto_path.exists():
        return load_prototypes(proto_path)
    clients = ws.clients()
    features = fuse_pool(pool, store, clients.embedder, cfg.fusion_lambda)
    if len(features) >= 2:
        clustering = cluster(features, k_min=cfg.k_min, k_max=cfg.k_max, linkage=cfg.cluster_linkage, metric=cfg.cluster_metric)
        protos, unanchored = extract_prototypes(clustering, features, iteration=t)
    elif len(features) == 1:
        from .prototypes import Clustering

        single = Clustering(assignments=[0], n_clusters=1, silhouette=0.0, degenerate=True)
        protos, unanchored = extract_prototypes(single, features, iteration=t)
    else:
        protos, unanchored = [], []
        logger.warning("no failure cases at t=%d; nothing to mine", t)
    save_prototypes(protos, proto_path, unanchored)
    ws.log_event("mine", proto_path.name, {"prototypes": len(protos), "unanchored": len(unanchored)})
    return protos


def _exclusion_ids(ws: Workspace, log: AnnotationLog, t: int) -> set[str]:
    """Ids barred from retrieval: everything exported plus everything
    annotated in earlier iterations, minus rejected samples (those go
    back to the unannotated pool)."""
    ledger = ws.load_ledger()
    excluded = set(ledger["exported_ids"])
    for rec in log.records.values():
        if rec.iteration < t and rec.status != "rejected":
            excluded.add(rec.sample_id)
    return excluded


def _retrieve_phase(ws: Workspace, state: IterationState, store: Datastore, protos, e_vec) -> AnnotationSet:
    t = state.t
    cfg = ws.config
    set_path = ws.artifact(f"annset_{t:03d}.jsonl")
    if set_path.exists():
        return AnnotationSet.load(set_path)
    log = ws.annotation_log()
    excluded = _exclusion_ids(ws, log, t)
    if cfg.sampling_strategy == "random":
        pool_ids = [sid for sid in store.ids("pool") if sid not in excluded]
        pool_ids.sort(key=lambda sid: det_hash64(cfg.seed, "rand", t, sid))
        annset = AnnotationSet(
            entries=[
                AnnotationEntry(sample_id=sid, source_prototype="random", target_dimension=-1, similarity=0.0)
                for sid in pool_ids[: cfg.budget]
            ]
        )
    elif not protos:
        annset = AnnotationSet(shortfall=cfg.budget)
    else:
        index_path = ws.artifact(f"index_{t:03d}.fpex")
        if index_path.exists():
            index = VectorIndex.load(index_path)
        else:
            index = VectorIndex.from_store(store, "pool")
            index.save(index_path)
        annset = build_annotation_set(
            index,
            protos,
            e_vec,
            cfg.alpha,
            cfg.tau_sim,
            cfg.budget,
            exclusions=excluded,
            tau_floor=cfg.tau_floor,
            tau_step=cfg.tau_step,
        )
    annset.save(set_path)
    ws.log_event("retrieve", set_path.name, {"entries": len(annset.entries), "shortfall": annset.shortfall})
    return annset


def _tau_h(cfg: EngineConfig, entropies: list[float]) -> float:
    if cfg.tau_h_fixed >= 0.0:
        return cfg.tau_h_fixed
    if not entropies:
        return float("inf")
    return float(np.quantile(np.asarray(entropies), cfg.tau_h_quantile))


def _annotate_phase(ws: Workspace, state: IterationState, store: Datastore, annset: AnnotationSet, entropies, model) -> AnnotationLog:
    t = state.t
    cfg = ws.config
    clients = ws.clients()
    log = ws.annotation_log()
    tau_h = _tau_h(cfg, entropies)
    created = 0
    for entry in annset.entries:
        record_id = f"t{t}-{entry.sample_id}"
        if record_id in log:
            continue
        sample = store.sample(entry.sample_id)
        question = annotation_question(sample, store.k, cfg.annotation_tasks)
        y_self = model.answer(sample.image_ref, question, run=0)
        y_oracle = clients.oracle.annotate(sample.image_ref, question)
        rec = make_record(
            record_id=record_id,
            iteration=t,
            sample_id=sample.id,
            image_ref=sample.image_ref,
            modality=sample.modality,
            target_dimension=entry.target_dimension,
            question={
                "text": question.text,
                "task": question.task,
                "question_type": question.question_type,
                "choices": question.choices,
            },
            y_self=y_self,
            y_oracle_text=y_oracle,
            tau_h=tau_h,
            tau_ann=cfg.tau_ann,
            route_override=cfg.route_override,
        )
        log.add(rec)
        created += 1
    ws.log_event("annotate", "annotations.jsonl", {"created": created, "tau_h": tau_h})
    return log


def _drain_reviews(ws: Workspace, state: IterationState, log: AnnotationLog) -> bool:
    """Resolve or wait out the review queue; False means halt."""
    cfg = ws.config
    clients = ws.clients()
    if clients.reviewer is not None:
        n = auto_review(log, clients.reviewer, iteration=state.t, escalate_accept_adopts=cfg.escalate_accept_adopts)
        if n:
            ws.log_event("review", "annotations.jsonl", {"auto_resolved": n})
        return True
    deadline = time.monotonic() + cfg.review_wait_s
    while log.pending_count(iteration=state.t) > 0:
        if time.monotonic() >= deadline:
            return False
        time.sleep(min(0.5, cfg.review_wait_s))
        log = ws.annotation_log()
    return True


def _quality_phase(ws: Workspace, state: IterationState, store: Datastore, log: AnnotationLog) -> list[str]:
    """Quality gate over resolved records; returns kept record ids."""
    t = state.t
    cfg = ws.config
    report_path = ws.artifact(f"qareport_{t:03d}.jsonl")
    if report_path.exists():
        kept = []
        with open(report_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    if row["disposition"] == "kept":
                        kept.append(row["record_id"])
        return kept
    records = log.resolved_for_training(t)
    rows: list[dict] = []
    kept_ids: list[str] = []
    if not cfg.quality_gate:
        for rec in records:
            rows.append({"record_id": rec.record_id, "disposition": "kept", "reason": "gate_disabled"})
            kept_ids.append(rec.record_id)
    else:
        ledger = ws.load_ledger()
        prior = sorted(ledger["hashes"].items())
        hashable: list[tuple[str, int]] = []
        hashes: dict[str, int] = {}
        for rec in records:
            ref = rec.image_ref
            if ref and Path(ref).is_file():
                try:
                    h = quality.phash_file(ref)
                except quality.ImageDecodeError as exc:
                    rows.append({"record_id": rec.record_id, "disposition": "dropped", "reason": f"undecodable: {exc}"})
                    continue
                hashable.append((rec.record_id, h))
                hashes[rec.record_id] = h
            else:
                hashes[rec.record_id] = -1  # unhashable refs pass image dedup
        kept_hash, dropped_hash = quality.dedup(hashable, cfg.dedup_hamming, prior=prior)
        dropped_ids = {d.record_id for d in dropped_hash}
        for d in dropped_hash:
            rows.append({"record_id": d.record_id, "disposition": "dropped", "reason": d.reason, "matched_id": d.matched_id, "value": d.value})
        survivors = [rec for rec in records if rec.record_id in hashes and rec.record_id not in dropped_ids]
        desc = [(rec.record_id, rec.final_label or "") for rec in survivors if rec.question.get("task") == "description"]
        kept_desc, dropped_desc = quality.diversity_filter(desc, cfg.tfidf_cos)
        dropped_desc_ids = {d.record_id for d in dropped_desc}
        for d in dropped_desc:
            rows.append({"record_id": d.record_id, "disposition": "dropped", "reason": d.reason, "matched_id": d.matched_id, "value": d.value})
        for rec in survivors:
            if rec.record_id in dropped_desc_ids:
                continue
            rows.append({"record_id": rec.record_id, "disposition": "kept", "reason": ""})
            kept_ids.append(rec.record_id)
    rows.sort(key=lambda r: r["record_id"])
    with open(report_path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    ws.log_event("quality", report_path.name, {"kept": len(kept_ids), "dropped": len(rows) - len(kept_ids)})
    return kept_ids


def export_training_set(records, path: str | Path, iteration: int) -> str:
    """Write instruction-tuning records, ordered by sample id, bytes
    deterministic. Unresolved records are a hard error."""
    rows = []
    for rec in sorted(records, key=lambda r: r.sample_id):
        if rec.status != "resolved" or rec.final_label is None:
            raise OrchestratorError(f"record {rec.record_id} is not resolved; cannot export")
        rows.append(
            {
                "image_ref": rec.image_ref,
                "question": rec.question["text"],
                "answer": rec.final_label,
                "task": rec.question.get("task", "perception"),
                "modality": rec.modality,
                "iteration": iteration,
            }
        )
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    tmp.replace(path)
    return str(path)


def _export_phase(ws: Workspace, state: IterationState, log: AnnotationLog, kept_ids: list[str]) -> Path:
    t = state.t
    train_path = ws.artifact(f"train_{t:03d}.jsonl")
    records = [log.get(rid) for rid in sorted(kept_ids)]
    if not train_path.exists():
        export_training_set(records, train_path, t)
        ws.log_event("export", train_path.name, {"records": len(records)})
    ledger = ws.load_ledger()
    ids = set(ledger["exported_ids"])
    for rec in records:
        ids.add(rec.sample_id)
        if rec.image_ref and Path(rec.image_ref).is_file():
            try:
                ledger["hashes"][rec.record_id] = quality.phash_file(rec.image_ref)
            except quality.ImageDecodeError:
                pass
    ledger["exported_ids"] = sorted(ids)
    ws.save_ledger(ledger)
    return train_path


# -- the loop -----------------------------------------------------------------------


def run_iteration(ws: Workspace, state: IterationState | None = None) -> IterationState:
    """Execute one full iteration; resumable at phase granularity."""
    cfg = ws.config
    if state is None:
        state = ws.load_state()
    if state.status != STATUS_RUNNING:
        raise OrchestratorError(f"loop is {state.status}, not running")
    store = ws.store()
    t = state.t
    model = ws.model_for_tag(state.model_tag)

    pool, entropies = _evaluate_phase(ws, state, store, model)
    state.failure_pool_ref = f"failures_{t:03d}.jsonl"
    if t == 0 and not state.metrics_history:
        baseline = json.loads(ws.artifact(f"metrics_{t:03d}.json").read_text(encoding="utf-8"))
        state.metrics_history.append(baseline)

    dev = store.samples("dev")
    e_dist = error_distribution(pool, dev, store.k)

    protos = _mine_phase(ws, state, store, pool)
    state.prototypes_ref = f"prototypes_{t:03d}.jsonl"

    annset = _retrieve_phase(ws, state, store, protos, e_dist.e)
    log = _annotate_phase(ws, state, store, annset, entropies, model)

    if not _drain_reviews(ws, state, log):
        state.status = STATUS_HALTED
        state.halt_reason = "awaiting review"
        ws.save_state(state)
        logger.warning("iteration %d halted: %d records awaiting review", t, log.pending_count(iteration=t))
        return state

    log = ws.annotation_log()
    kept_ids = _quality_phase(ws, state, store, log)
    train_path = _export_phase(ws, state, log, kept_ids)

    clients = ws.clients()
    new_tag = clients.trainer.fine_tune(str(train_path), state.model_tag, progress=lambda msg: logger.info("trainer: %s", msg))
    state.model_tag = new_tag
    ws.log_event("train", train_path.name, {"model_tag": new_tag})

    new_model = ws.model_for_tag(new_tag)
    metrics = dev_metrics(
        store,
        new_model,
        runs=max(1, cfg.metrics_runs),
        scorer=clients.scorer,
        pass_threshold=cfg.desc_pass_threshold,
        parallelism=cfg.eval_parallelism,
    )
    state.metrics_history.append(metrics.to_dict())
    post_path = ws.artifact(f"metrics_post_{t:03d}.json")
    post_path.write_text(json.dumps(metrics.to_dict(), sort_keys=True, indent=1), encoding="utf-8")

    state.t = t + 1
    state.exported_sets = [f"train_{i:03d}.jsonl" for i in range(state.t)]
    state.budget_spent = 0
    for i in range(state.t):
        annset_i = ws.artifact(f"annset_{i:03d}.jsonl")
        if annset_i.exists():
            with open(annset_i, encoding="utf-8") as fh:
                state.budget_spent += sum(1 for line in fh if line.strip())

    if check_plateau(state.overall_history(), cfg.plateau_eps, cfg.patience):
        state.status = STATUS_PLATEAUED
    elif state.budget_spent >= cfg.global_budget:
        state.status = STATUS_BUDGET
    ws.save_state(state)
    ws.log_event("iteration", "state.json", {"t": state.t, "status": state.status, "overall_acc": metrics.overall_acc})
    return state


def run_loop(ws: Workspace, max_iterations: int) -> IterationState:
    state = ws.load_state()
    for _ in range(max_iterations):
        if state.status != STATUS_RUNNING:
            break
        state = run_iteration(ws, state)
    return state
