"""HTTP service: the review API plus engine status endpoints.

Serves the expert review console (static bundle, when present) and the
JSON API it consumes:

* ``GET  /healthz``
* ``GET  /api/queue?cursor&limit&modality&iteration&route``
* ``GET  /api/record/{id}``
* ``POST /api/record/{id}/review``  {action, edited_text?, reviewer}
* ``GET  /api/stats?iteration``
* ``GET  /api/iteration``
* ``GET  /api/error-distribution``
* ``GET  /api/prototypes``

Review submission is linearizable per record; a second resolution
attempt returns 409 with the already-resolved record.
"""

from __future__ import annotations

import json
import os
import time
from pathlib import Path

from fastapi import Body, FastAPI, HTTPException, Query
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from . import __version__
from .evaluator import FailurePool, error_distribution
from .orchestrator import Workspace
from .router import AlreadyResolvedError, AnnotationLog, RoutingError


def _latest_artifact(ws: Workspace, prefix: str) -> Path | None:
    candidates = sorted(ws.artifacts_dir.glob(f"{prefix}_*.jsonl"))
    return candidates[-1] if candidates else None


def create_app(ws: Workspace, ui_dir: str | os.PathLike[str] | None = None) -> FastAPI:
    app = FastAPI(title="fpengine review service", version=__version__)
    log: AnnotationLog = ws.annotation_log()

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok", "version": __version__}

    @app.get("/api/queue")
    def queue(
        cursor: int = Query(0, ge=0),
        limit: int = Query(50, ge=1, le=500),
        modality: str | None = None,
        iteration: int | None = None,
        route: str | None = None,
    ) -> dict:
        page, next_cursor = log.review_queue(
            modality=modality, iteration=iteration, route_filter=route, cursor=cursor, limit=limit
        )
        total = len(log.review_queue(modality=modality, iteration=iteration, route_filter=route)[0])
        return {
            "records": [r.to_dict() for r in page],
            "next_cursor": next_cursor,
            "total_pending": total,
        }

    @app.get("/api/record/{record_id}")
    def record(record_id: str) -> dict:
        if record_id not in log:
            raise HTTPException(status_code=404, detail=f"no record {record_id}")
        return log.get(record_id).to_dict()

    @app.post("/api/record/{record_id}/review")
    def review(record_id: str, body: dict = Body(...)):
        action = body.get("action")
        reviewer = body.get("reviewer") or "anonymous"
        edited_text = body.get("edited_text")
        if record_id not in log:
            raise HTTPException(status_code=404, detail=f"no record {record_id}")
        try:
            rec = log.submit_review(
                record_id,
                action,
                reviewer=reviewer,
                edited_text=edited_text,
                timestamp=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
                escalate_accept_adopts=ws.config.escalate_accept_adopts,
            )
        except AlreadyResolvedError:
            return JSONResponse(status_code=409, content={"detail": "already resolved", "record": log.get(record_id).to_dict()})
        except RoutingError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return rec.to_dict()

    @app.get("/api/stats")
    def stats(iteration: int | None = None) -> dict:
        return log.stats(iteration=iteration)

    @app.get("/api/iteration")
    def iteration() -> dict:
        return ws.load_state().to_dict()

    @app.get("/api/error-distribution")
    def errors() -> dict:
        latest = _latest_artifact(ws, "failures")
        if latest is None:
            raise HTTPException(status_code=404, detail="no evaluation artifacts yet")
        store = ws.store()
        pool = FailurePool.load(latest)
        dist = error_distribution(pool, store.samples("dev"), store.k)
        return {"iteration": int(latest.stem.split("_")[1]), **dist.to_dict()}

    @app.get("/api/prototypes")
    def prototypes() -> dict:
        latest = _latest_artifact(ws, "prototypes")
        if latest is None:
            raise HTTPException(status_code=404, detail="no prototype artifacts yet")
        out = []
        with open(latest, encoding="utf-8") as fh:
            lines = [ln for ln in fh if ln.strip()]
        header = json.loads(lines[0]) if lines else {}
        for line in lines[1:]:
            rec = json.loads(line)
            out.append(
                {
                    "prototype_id": rec["prototype_id"],
                    "member_count": len(rec["member_ids"]),
                    "dominant_capabilities": rec["dominant_capabilities"],
                }
            )
        return {"iteration": int(latest.stem.split("_")[1]), "header": header, "prototypes": out}

    static_dir = _resolve_ui_dir(ws, ui_dir)
    if static_dir is not None:
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")
    return app


def _resolve_ui_dir(ws: Workspace, explicit: str | os.PathLike[str] | None) -> Path | None:
    candidates = [
        Path(explicit) if explicit else None,
        Path(os.environ["FPE_UI_DIR"]) if os.environ.get("FPE_UI_DIR") else None,
        ws.root / "ui",
        Path.cwd() / "frontend" / "dist",
    ]
    for c in candidates:
        if c is not None and (c / "index.html").is_file():
            return c
    return None
