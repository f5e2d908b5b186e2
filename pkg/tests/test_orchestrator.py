"""The closed loop: phases, plateau, resume, export determinism."""

from __future__ import annotations

import json

import pytest

from fpengine import orchestrator, simkit
from fpengine.orchestrator import STATUS_HALTED, STATUS_RUNNING, check_plateau
from fpengine.router import ROUTE_COLD_START

from .conftest import make_workspace


# -- plateau -----------------------------------------------------------------


def test_plateau_improving_history():
    assert check_plateau([0.60, 0.70, 0.74], epsilon=0.005, patience=1) is False


def test_plateau_small_improvement():
    assert check_plateau([0.60, 0.70, 0.703], epsilon=0.005, patience=1) is True


def test_plateau_single_entry():
    assert check_plateau([0.60], epsilon=0.005, patience=1) is False


def test_plateau_patience_two():
    assert check_plateau([0.5, 0.501, 0.502], epsilon=0.005, patience=2) is True
    assert check_plateau([0.5, 0.6, 0.601], epsilon=0.005, patience=2) is False


# -- single iteration ------------------------------------------------------------


def test_cold_start_routes_everything_to_review(sim_workspace):
    ws = sim_workspace
    state = orchestrator.run_iteration(ws)
    log = ws.annotation_log()
    records = log.records_for_iteration(0)
    assert records and all(r.route == ROUTE_COLD_START for r in records)
    stats = log.stats(iteration=0)
    assert stats["review_rate"] == 1.0
    assert state.t == 1
    assert len(state.metrics_history) == 2  # baseline + one iteration


def test_second_iteration_uses_all_three_routes(tmp_path):
    # a still-struggling model at t=1: high error rates, slow trainer
    world = simkit.generate_world(seed=11, k=3, dim=32, pool_size=600, dev_size=90, e_hat=[0.3, 0.5, 0.7], scales=[60.0] * 3)
    ws = make_workspace(tmp_path / "ws", world, budget=60)
    state = orchestrator.run_iteration(ws)
    assert state.status == STATUS_RUNNING
    orchestrator.run_iteration(ws)
    log = ws.annotation_log()
    routes = {r.route for r in log.records_for_iteration(1)}
    assert "adopt_oracle" in routes
    assert "adopt_self" in routes
    assert "escalate" in routes


def test_budget_ledger_and_exports(sim_workspace):
    state = orchestrator.run_iteration(sim_workspace)
    assert state.budget_spent == 40
    assert state.exported_sets == ["train_000.jsonl"]
    train = sim_workspace.artifact("train_000.jsonl")
    rows = [json.loads(line) for line in train.read_text().splitlines() if line.strip()]
    assert rows
    for row in rows:
        assert set(row) == {"image_ref", "question", "answer", "task", "modality", "iteration"}
        assert row["iteration"] == 0
    # ordering follows sample ids, which embed the zero-padded index
    store = sim_workspace.store()
    ref_to_sid = {s.image_ref: s.id for s in store.samples()}
    sids = [ref_to_sid[row["image_ref"]] for row in rows]
    assert sids == sorted(sids)


def test_rejected_records_never_exported(sim_workspace):
    orchestrator.run_iteration(sim_workspace)
    log = sim_workspace.annotation_log()
    rejected = {r.sample_id for r in log.records_for_iteration(0) if r.status == "rejected"}
    assert rejected, "fixture should produce at least one reject"
    rows = [json.loads(line) for line in sim_workspace.artifact("train_000.jsonl").read_text().splitlines()]
    exported_refs = {r["image_ref"] for r in rows}
    for sid in rejected:
        assert sim_workspace.store().sample(sid).image_ref not in exported_refs


def test_no_sample_in_two_exports(tmp_path, small_world):
    ws = make_workspace(tmp_path / "ws", small_world, budget=30)
    state = ws.load_state()
    for _ in range(3):
        if state.status != STATUS_RUNNING:
            break
        state = orchestrator.run_iteration(ws)
    seen: set[str] = set()
    for name in state.exported_sets:
        refs = {json.loads(line)["image_ref"] for line in ws.artifact(name).read_text().splitlines() if line.strip()}
        assert not (refs & seen)
        seen |= refs


def test_export_byte_identical_across_fresh_runs(tmp_path, small_world):
    ws1 = make_workspace(tmp_path / "a", small_world)
    ws2 = make_workspace(tmp_path / "b", small_world)
    orchestrator.run_loop(ws1, 2)
    orchestrator.run_loop(ws2, 2)
    for name in ("train_000.jsonl", "train_001.jsonl"):
        f1, f2 = ws1.artifact(name), ws2.artifact(name)
        if f1.exists() or f2.exists():
            assert f1.read_bytes() == f2.read_bytes()


def test_resume_mid_iteration_converges(tmp_path, small_world):
    ws_full = make_workspace(tmp_path / "full", small_world)
    full_state = orchestrator.run_iteration(ws_full)

    # "crash" after the evaluate/mine/retrieve phases: artifacts exist,
    # no state was saved, annotation log partially written
    ws_crash = make_workspace(tmp_path / "crash", small_world)
    state = ws_crash.load_state()
    store = ws_crash.store()
    model = ws_crash.model_for_tag(state.model_tag)
    pool, entropies = orchestrator._evaluate_phase(ws_crash, state, store, model)
    protos = orchestrator._mine_phase(ws_crash, state, store, pool)
    from fpengine.evaluator import error_distribution

    dist = error_distribution(pool, store.samples("dev"), store.k)
    annset = orchestrator._retrieve_phase(ws_crash, state, store, protos, dist.e)
    assert annset.entries
    resumed_state = orchestrator.run_iteration(ws_crash)

    assert resumed_state.to_dict() == full_state.to_dict()
    assert ws_crash.artifact("train_000.jsonl").read_bytes() == ws_full.artifact("train_000.jsonl").read_bytes()


def test_halts_without_reviewer(tmp_path, small_world):
    ws = make_workspace(tmp_path / "ws", small_world, reviewer="none")
    state = orchestrator.run_iteration(ws)
    assert state.status == STATUS_HALTED
    assert state.halt_reason == "awaiting review"
    assert state.t == 0  # iteration did not complete
    with pytest.raises(orchestrator.OrchestratorError, match="halted"):
        orchestrator.run_iteration(ws)


def test_halted_loop_resumes_after_reviews(tmp_path, small_world):
    ws = make_workspace(tmp_path / "ws", small_world, reviewer="none")
    state = orchestrator.run_iteration(ws)
    assert state.status == STATUS_HALTED
    log = ws.annotation_log()
    for rec in log.review_queue()[0]:
        log.submit_review(rec.record_id, "accept", reviewer="human")
    state.status = STATUS_RUNNING
    state.halt_reason = ""
    ws.save_state(state)
    state = orchestrator.run_iteration(ws)
    assert state.t == 1
    assert ws.artifact("train_000.jsonl").exists()


def test_status_transitions_terminal(tmp_path, small_world):
    ws = make_workspace(tmp_path / "ws", small_world, budget=20, global_budget=20)
    state = orchestrator.run_iteration(ws)
    assert state.status in ("budget_exhausted", "plateaued")
    with pytest.raises(orchestrator.OrchestratorError):
        orchestrator.run_iteration(ws)


# -- ablation hooks ----------------------------------------------------------------


def _loop_artifacts(tmp_path, world, name, **overrides):
    ws = make_workspace(tmp_path / name, world, budget=45, **overrides)
    orchestrator.run_loop(ws, 2)
    out = {}
    for f in sorted(ws.artifacts_dir.glob("train_*.jsonl")):
        out[f.name] = f.read_bytes()
    out["annotations"] = ws.artifact("annotations.jsonl").read_bytes()
    out["annset"] = ws.artifact("annset_000.jsonl").read_bytes()
    return out


def test_ablation_hooks_change_artifacts(tmp_path):
    # slow learner so iteration 1 still routes records (the forced
    # adopt-oracle override only applies at t > 0)
    world = simkit.generate_world(seed=11, k=3, dim=32, pool_size=600, dev_size=90, e_hat=[0.3, 0.5, 0.7], scales=[60.0] * 3)
    base = _loop_artifacts(tmp_path, world, "base")
    no_adaptive = _loop_artifacts(tmp_path, world, "alpha0", alpha=0.0)
    no_gate = _loop_artifacts(tmp_path, world, "nogate", quality_gate=False)
    forced_oracle = _loop_artifacts(tmp_path, world, "oracle", route_override="adopt_oracle")
    assert base != no_adaptive
    assert base != no_gate
    assert base != forced_oracle


def test_random_strategy_ignores_prototypes(tmp_path, small_world):
    ws = make_workspace(tmp_path / "ws", small_world, sampling_strategy="random", budget=25)
    orchestrator.run_iteration(ws)
    annset = [json.loads(line) for line in ws.artifact("annset_000.jsonl").read_text().splitlines()]
    assert all(row["source_prototype"] == "random" for row in annset)
    assert len(annset) == 25
