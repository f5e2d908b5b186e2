"""Command-line surface for every pipeline phase.

Subcommands mirror the loop phases (ingest, verify, evaluate, cluster,
retrieve, annotate, review-export, qa, export, iterate, loop), plus
serve (HTTP review service), simulate (sampling-strategy comparison on
a synthetic world), and stats. Phase commands are thin wrappers over
the same functions the orchestrator calls, so CLI runs and service runs
over identical inputs produce byte-identical artifacts.

Exit codes: 0 success, 1 validation/usage error, 2 client failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import orchestrator, simkit
from .clients import ClientError
from .config import ConfigError, EngineConfig
from .datastore import Datastore, QAItem, Sample, StoreError

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(1)


def _build_parser() -> _Parser:
    p = _Parser(prog="fpe", description="closed-loop failure-prototype data engine")
    p.add_argument("--config", help="TOML config path (falls back to $FPE_CONFIG)")
    p.add_argument("--workdir", default=".", help="workspace root (default: cwd)")
    p.add_argument("--seed", type=int)
    p.add_argument("--model")
    p.add_argument("--oracle")
    p.add_argument("--budget", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--tau-sim", type=float, dest="tau_sim")
    p.add_argument("--gamma", type=float)
    p.add_argument("--runs", type=int)
    p.add_argument("--out", help="output file or directory (command-specific)")
    sub = p.add_subparsers(dest="command", required=True)

    ing = sub.add_parser("ingest", help="ingest samples/QA or generate a simulated world")
    ing.add_argument("--samples", help="sample JSONL with inline embeddings")
    ing.add_argument("--qa", help="QA JSONL")
    ing.add_argument("--dim", type=int, help="embedding dimension (new store)")
    ing.add_argument("--k", type=int, help="capability dimensions (new store)")
    ing.add_argument("--sim", action="store_true", help="generate a synthetic world")
    ing.add_argument("--pool", type=int, default=2000)
    ing.add_argument("--dev", type=int, default=200)
    ing.add_argument("--test", type=int, default=0)
    ing.add_argument("--e-hat", dest="e_hat", help="comma-separated true error rates")
    ing.add_argument("--scales", help="comma-separated trainer scales")

    ver = sub.add_parser("verify", help="split integrity report")
    ver.add_argument("--dedup-hamming", type=int, dest="dedup_hamming")

    sub.add_parser("evaluate", help="collect failures + metrics on dev")
    sub.add_parser("cluster", help="mine failure prototypes")
    sub.add_parser("retrieve", help="build the annotation set")
    sub.add_parser("annotate", help="annotate + route the current set")

    rev = sub.add_parser("review-export", help="offline review via an editable file")
    rev.add_argument("--apply", help="apply decisions from an edited file")

    sub.add_parser("qa", help="quality gate over resolved records")
    sub.add_parser("export", help="export the training set")
    sub.add_parser("iterate", help="run one full iteration")

    loop = sub.add_parser("loop", help="run iterations until plateau/budget")
    loop.add_argument("--max-iter", type=int, default=10, dest="max_iter")

    srv = sub.add_parser("serve", help="run the review service")
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--port", type=int, default=8321)
    srv.add_argument("--ui-dir", dest="ui_dir")

    sim = sub.add_parser("simulate", help="failure-driven vs random sampling comparison")
    sim.add_argument("--strategy", choices=["failure_driven", "random", "both"], default="both")
    sim.add_argument("--iterations", type=int, default=5)
    sim.add_argument("--pool", type=int, default=1500)
    sim.add_argument("--dev", type=int, default=150)
    sim.add_argument("--k", type=int, default=3)
    sim.add_argument("--dim", type=int, default=32)
    sim.add_argument("--e-hat", dest="e_hat", default="0.05,0.05,0.6")
    sim.add_argument("--scales")
    sim.add_argument("--no-plot", action="store_true")

    sub.add_parser("stats", help="annotation + iteration status")
    return p


def _floats(text: str | None) -> list[float] | None:
    if not text:
        return None
    return [float(x) for x in text.split(",")]


def _load_config(args) -> EngineConfig:
    cfg = EngineConfig.load(args.config)
    return cfg.with_overrides(
        seed=args.seed,
        model=args.model,
        oracle=args.oracle,
        budget=args.budget,
        alpha=args.alpha,
        tau_sim=args.tau_sim,
        gamma=args.gamma,
        runs=args.runs,
    )


def _workspace(args, cfg: EngineConfig) -> orchestrator.Workspace:
    return orchestrator.Workspace(args.workdir, cfg)


def _open_store(ws: orchestrator.Workspace) -> Datastore:
    return ws.store()


def _image_embedder(cfg: EngineConfig, dim: int):
    """Embedding provider sized for image vectors (dimension D)."""
    from .clients import HTTPEmbedClient, is_mock

    if is_mock(cfg.embedder):
        from .simkit import SimEmbedder, _mock_seed

        return SimEmbedder(_mock_seed(cfg.embedder, cfg.seed), dim)
    return HTTPEmbedClient(cfg.embedder, dim)


# -- subcommand bodies -----------------------------------------------------------


def _cmd_ingest(args, cfg: EngineConfig) -> int:
    ws = _workspace(args, cfg)
    if args.sim:
        seed = cfg.seed
        world = simkit.generate_world(
            seed,
            args.k or 3,
            args.dim or 32,
            args.pool,
            args.dev,
            args.test,
            e_hat=_floats(args.e_hat),
            scales=_floats(args.scales),
        )
        ws = orchestrator.init_workspace(ws.root, cfg, dim=world.dim, k=world.k)
        world.save(ws.root / "world.json")
        world.ingest_into(ws.store())
        print(json.dumps({"ingested": {"pool": world.pool_size, "dev": world.dev_size, "test": world.test_size}, "world": str(ws.root / "world.json")}))
        return 0
    if not args.samples:
        print("error: need --samples or --sim", file=sys.stderr)
        return 1
    samples = []
    with open(args.samples, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                samples.append(
                    Sample(
                        id=rec["id"],
                        image_ref=rec.get("image_ref", ""),
                        modality=rec["modality"],
                        split=rec["split"],
                        capability_labels=list(rec["capability_labels"]),
                        embedding=rec.get("embedding"),
                    )
                )
    qa = []
    if args.qa:
        with open(args.qa, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    qa.append(
                        QAItem(
                            sample_id=rec["sample_id"],
                            task=rec["task"],
                            question_type=rec["question_type"],
                            question_text=rec["question_text"],
                            choices=list(rec.get("choices") or []),
                            gold_answer=rec.get("gold_answer", ""),
                        )
                    )
    dim = args.dim or (len(samples[0].embedding) if samples and samples[0].embedding is not None else None)
    k = args.k or (len(samples[0].capability_labels) if samples else None)
    store = ws.store(dim=dim, k=k)
    embedder = None
    if any(s.embedding is None for s in samples):
        embedder = _image_embedder(cfg, store.dim)
    report = store.ingest(samples, qa, embedder=embedder)
    print(
        json.dumps(
            {"samples": report.sample_count, "qa": report.qa_count, "rejected": [{"id": rid, "reason": reason} for rid, reason in report.rejected]},
            sort_keys=True,
        )
    )
    return 0


def _cmd_verify(args, cfg: EngineConfig) -> int:
    ws = _workspace(args, cfg)
    threshold = args.dedup_hamming if args.dedup_hamming is not None else cfg.dedup_hamming
    report = _open_store(ws).verify_split_integrity(threshold)
    out = {
        "disjoint": report.disjoint,
        "id_collisions": report.id_collisions,
        "cross_split_hash_pairs": [{"a": a, "b": b, "distance": d} for a, b, d in report.cross_split_hash_pairs],
    }
    print(json.dumps(out, sort_keys=True))
    return 0


def _phase_context(args, cfg: EngineConfig):
    ws = _workspace(args, cfg)
    state = ws.load_state()
    store = _open_store(ws)
    model = ws.model_for_tag(state.model_tag)
    return ws, state, store, model


def _cmd_evaluate(args, cfg: EngineConfig) -> int:
    ws, state, store, model = _phase_context(args, cfg)
    pool, entropies = orchestrator._evaluate_phase(ws, state, store, model)
    print(json.dumps({"iteration": state.t, "failures": len(pool.cases), "dev_entropy_count": len(entropies), "artifact": f"failures_{state.t:03d}.jsonl"}))
    return 0


def _cmd_cluster(args, cfg: EngineConfig) -> int:
    ws, state, store, model = _phase_context(args, cfg)
    pool, _ = orchestrator._evaluate_phase(ws, state, store, model)
    protos = orchestrator._mine_phase(ws, state, store, pool)
    print(json.dumps({"iteration": state.t, "prototypes": len(protos), "artifact": f"prototypes_{state.t:03d}.jsonl"}))
    return 0


def _cmd_retrieve(args, cfg: EngineConfig) -> int:
    from .evaluator import error_distribution

    ws, state, store, model = _phase_context(args, cfg)
    pool, _ = orchestrator._evaluate_phase(ws, state, store, model)
    protos = orchestrator._mine_phase(ws, state, store, pool)
    dist = error_distribution(pool, store.samples("dev"), store.k)
    annset = orchestrator._retrieve_phase(ws, state, store, protos, dist.e)
    print(json.dumps({"iteration": state.t, "entries": len(annset.entries), "shortfall": annset.shortfall, "quotas": annset.quotas}))
    return 0


def _cmd_annotate(args, cfg: EngineConfig) -> int:
    from .evaluator import error_distribution

    ws, state, store, model = _phase_context(args, cfg)
    pool, entropies = orchestrator._evaluate_phase(ws, state, store, model)
    protos = orchestrator._mine_phase(ws, state, store, pool)
    dist = error_distribution(pool, store.samples("dev"), store.k)
    annset = orchestrator._retrieve_phase(ws, state, store, protos, dist.e)
    log = orchestrator._annotate_phase(ws, state, store, annset, entropies, model)
    print(json.dumps({"iteration": state.t, **log.stats(iteration=state.t)}))
    return 0


def _cmd_review_export(args, cfg: EngineConfig) -> int:
    ws = _workspace(args, cfg)
    log = ws.annotation_log()
    if args.apply:
        applied = 0
        with open(args.apply, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                action = (row.get("action") or "").strip()
                if not action:
                    continue
                log.submit_review(
                    row["record_id"],
                    action,
                    reviewer=row.get("reviewer") or "offline",
                    edited_text=row.get("edited_text") or None,
                    escalate_accept_adopts=cfg.escalate_accept_adopts,
                )
                applied += 1
        print(json.dumps({"applied": applied, "pending": log.pending_count()}))
        return 0
    out_path = args.out or str(ws.artifact("review_queue_export.jsonl"))
    queue, _ = log.review_queue()
    with open(out_path, "w", encoding="utf-8") as fh:
        for rec in queue:
            row = rec.to_dict()
            row.update({"action": "", "edited_text": "", "reviewer": ""})
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(json.dumps({"exported": len(queue), "file": out_path}))
    return 0


def _cmd_qa(args, cfg: EngineConfig) -> int:
    ws = _workspace(args, cfg)
    state = ws.load_state()
    store = _open_store(ws)
    log = ws.annotation_log()
    kept = orchestrator._quality_phase(ws, state, store, log)
    print(json.dumps({"iteration": state.t, "kept": len(kept), "artifact": f"qareport_{state.t:03d}.jsonl"}))
    return 0


def _cmd_export(args, cfg: EngineConfig) -> int:
    ws = _workspace(args, cfg)
    state = ws.load_state()
    store = _open_store(ws)
    log = ws.annotation_log()
    kept = orchestrator._quality_phase(ws, state, store, log)
    path = orchestrator._export_phase(ws, state, log, kept)
    print(json.dumps({"iteration": state.t, "records": len(kept), "file": str(path)}))
    return 0


def _cmd_iterate(args, cfg: EngineConfig) -> int:
    ws = _workspace(args, cfg)
    state = orchestrator.run_iteration(ws)
    print(json.dumps(state.to_dict(), sort_keys=True))
    return 0


def _cmd_loop(args, cfg: EngineConfig) -> int:
    ws = _workspace(args, cfg)
    state = orchestrator.run_loop(ws, args.max_iter)
    print(json.dumps(state.to_dict(), sort_keys=True))
    return 0


def _cmd_serve(args, cfg: EngineConfig) -> int:
    import uvicorn

    from .service import create_app

    ws = _workspace(args, cfg)
    app = create_app(ws, ui_dir=args.ui_dir)
    try:
        uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    except SystemExit as exc:  # uvicorn exits non-zero when the port is taken
        if exc.code not in (0, None):
            return 2
    except OSError as exc:
        print(f"error: cannot bind {args.host}:{args.port}: {exc}", file=sys.stderr)
        return 2
    return 0


def _cmd_simulate(args, cfg: EngineConfig) -> int:
    out_dir = Path(args.out or "simulate-out")
    out_dir.mkdir(parents=True, exist_ok=True)
    world = simkit.generate_world(
        cfg.seed,
        args.k,
        args.dim,
        args.pool,
        args.dev,
        e_hat=_floats(args.e_hat),
        scales=_floats(args.scales),
    )
    strategies = ["failure_driven", "random"] if args.strategy == "both" else [args.strategy]
    total_budget = cfg.budget
    curves = {}
    for strategy in strategies:
        points = simkit.run_efficiency_experiment(world, total_budget, args.iterations, strategy, out_dir)
        curve_path = out_dir / f"curve_{strategy}.jsonl"
        simkit.save_curve(points, curve_path)
        curves[strategy] = points
        print(json.dumps({"strategy": strategy, "curve": str(curve_path), "final_accuracy": points[-1].accuracy}))
    if not args.no_plot:
        plot_path = out_dir / "comparison.png"
        _plot_curves(curves, plot_path)
        print(json.dumps({"plot": str(plot_path)}))
    return 0


def _plot_curves(curves: dict, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for strategy, points in sorted(curves.items()):
        xs = [p.budget for p in points]
        ys = [p.accuracy for p in points]
        ax.plot(xs, ys, marker="o", label=strategy.replace("_", " "))
    ax.set_xlabel("annotation budget")
    ax.set_ylabel("simulated dev accuracy")
    ax.set_title("sampling strategy comparison")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _cmd_stats(args, cfg: EngineConfig) -> int:
    ws = _workspace(args, cfg)
    state = ws.load_state()
    log = ws.annotation_log()
    print(json.dumps({"state": state.to_dict(), "annotations": log.stats()}, sort_keys=True))
    return 0


_COMMANDS = {
    "ingest": _cmd_ingest,
    "verify": _cmd_verify,
    "evaluate": _cmd_evaluate,
    "cluster": _cmd_cluster,
    "retrieve": _cmd_retrieve,
    "annotate": _cmd_annotate,
    "review-export": _cmd_review_export,
    "qa": _cmd_qa,
    "export": _cmd_export,
    "iterate": _cmd_iterate,
    "loop": _cmd_loop,
    "serve": _cmd_serve,
    "simulate": _cmd_simulate,
    "stats": _cmd_stats,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _load_config(args)
        return _COMMANDS[args.command](args, cfg)
    except ClientError as exc:
        print(f"client error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, StoreError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
