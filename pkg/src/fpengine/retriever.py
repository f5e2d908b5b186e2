"""Pool retrieval around prototype anchors and budget allocation.

The index holds unit vectors row-major; a neighborhood query returns
exactly the rows whose cosine to the anchor strictly exceeds tau_sim
(cosine == dot product, since everything is normalized at ingest).
The default scan is exact and blocked; an optional coarse spherical
partition prunes blocks using an angular triangle-inequality bound that
can only over-retrieve, never miss, before the exact re-check.

The annotation budget is split across capability dimensions with
weights e_k^alpha (largest-remainder rounding, ties to the lower
index), each dimension drawing from the neighborhoods of the
prototypes that cover it, ranked by anchor similarity.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datastore import Datastore
from .prototypes import FailurePrototype

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"FPEX"
_HEADER = struct.Struct("<4sIQ")
_BLOCK_ROWS = 8192
_PRUNE_SLACK = 1e-7


class RetrievalError(ValueError):
    pass


@dataclass
class _Partition:
    centroid: np.ndarray  # unit vector
    radius: float  # max angle between centroid and a member
    rows: np.ndarray  # row indices


class VectorIndex:
    """Exact cosine-threshold index over unit vectors."""

    def __init__(self, ids: Sequence[str], matrix: np.ndarray):
        if len(ids) != len(matrix):
            raise RetrievalError("ids and matrix length mismatch")
        self.ids = list(ids)
        self.matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        self._f64 = self.matrix.astype(np.float64)
        self._partitions: list[_Partition] | None = None

    @classmethod
    def from_store(cls, store: Datastore, split: str = "pool") -> "VectorIndex":
        ids, matrix = store.split_matrix(split)
        return cls(ids, matrix)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    # -- persistence (header FPEX, dim, count; id table; float32 rows) -----

    def save(self, path: str | Path) -> None:
        id_blob = json.dumps(self.ids).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(INDEX_MAGIC, self.dim, len(self.ids)))
            fh.write(struct.pack("<I", len(id_blob)))
            fh.write(id_blob)
            fh.write(self.matrix.astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "VectorIndex":
        with open(path, "rb") as fh:
            magic, dim, count = _HEADER.unpack(fh.read(_HEADER.size))
            if magic != INDEX_MAGIC:
                raise RetrievalError(f"bad index magic in {path}")
            (id_len,) = struct.unpack("<I", fh.read(4))
            ids = json.loads(fh.read(id_len).decode("utf-8"))
            data = np.frombuffer(fh.read(count * dim * 4), dtype="<f4").reshape(count, dim)
        return cls(ids, np.array(data))

    # -- partitioned pruning -------------------------------------------------

    def build_partitions(self, n_partitions: int, seed: int = 0) -> None:
        """Coarse spherical k-means partition for pruned scans.

        Pruning uses angle(q, x) >= angle(q, c) - radius(c), so a block
        is skipped only when no member can possibly clear the threshold.
        """
        n = len(self.ids)
        if n == 0 or n_partitions < 2 or n_partitions >= n:
            self._partitions = None
            return
        rng = np.random.Generator(np.random.Philox(key=seed))
        centers = self._f64[rng.choice(n, size=n_partitions, replace=False)]
        assign = np.zeros(n, dtype=np.int64)
        for _ in range(10):
            sims = self._f64 @ centers.T
            assign = np.argmax(sims, axis=1)
            for p in range(n_partitions):
                rows = np.nonzero(assign == p)[0]
                if len(rows):
                    mean = self._f64[rows].mean(axis=0)
                    norm = np.linalg.norm(mean)
                    if norm > 0:
                        centers[p] = mean / norm
        partitions = []
        for p in range(n_partitions):
            rows = np.nonzero(assign == p)[0]
            if not len(rows):
                continue
            cos_to_center = np.clip(self._f64[rows] @ centers[p], -1.0, 1.0)
            radius = float(np.arccos(cos_to_center.min()))
            partitions.append(_Partition(centroid=centers[p], radius=radius, rows=rows))
        self._partitions = partitions

    # -- queries ---------------------------------------------------------------

    def similarities(self, anchor: np.ndarray) -> np.ndarray:
        """Cosine of every row to the anchor, float64, blocked."""
        anchor = np.asarray(anchor, dtype=np.float64)
        out = np.empty(len(self.ids), dtype=np.float64)
        for start in range(0, len(self.ids), _BLOCK_ROWS):
            block = self._f64[start : start + _BLOCK_ROWS]
            out[start : start + _BLOCK_ROWS] = block @ anchor
        return out

    def neighborhood(self, anchor: np.ndarray, tau_sim: float) -> dict[str, float]:
        """All pool ids with cosine(anchor, row) strictly above tau_sim."""
        anchor = np.asarray(anchor, dtype=np.float64)
        if anchor.shape != (self.dim,):
            raise RetrievalError(f"anchor dimension {anchor.shape} != {self.dim}")
        if abs(np.linalg.norm(anchor) - 1.0) > 1e-5:
            raise RetrievalError("anchor must be unit-norm")
        if not 0.0 <= tau_sim < 1.0:
            raise RetrievalError("tau_sim must be in [0, 1)")
        if self._partitions is None:
            sims = self.similarities(anchor)
            hit = np.nonzero(sims > tau_sim)[0]
        else:
            theta_q = np.array(
                [np.arccos(np.clip(float(p.centroid @ anchor), -1.0, 1.0)) for p in self._partitions]
            )
            radii = np.array([p.radius for p in self._partitions])
            bound = np.cos(np.maximum(0.0, theta_q - radii)) + _PRUNE_SLACK
            candidate_rows = [p.rows for p, b in zip(self._partitions, bound) if b > tau_sim]
            if not candidate_rows:
                return {}
            rows = np.concatenate(candidate_rows)
            sims_rows = self._f64[rows] @ anchor
            keep = sims_rows > tau_sim
            hit = rows[keep]
            sims = np.empty(len(self.ids))
            sims[rows] = sims_rows
        return {self.ids[i]: float(sims[i]) for i in hit}


# -- budget allocation ----------------------------------------------------------


def allocate_budget(e: Sequence[float], alpha: float, budget: int) -> list[int]:
    """Integer quotas proportional to e_k^alpha, largest-remainder
    rounding with ties to the lower index. alpha=0 is uniform; an
    all-zero distribution falls back to uniform with a warning."""
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 1 or len(e) == 0:
        raise ValueError("e must be a non-empty vector")
    if np.any(e < 0) or np.any(e > 1):
        raise ValueError("error rates must lie in [0, 1]")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if budget < 0:
        raise ValueError("budget must be >= 0")
    if alpha == 0.0:
        weights = np.ones_like(e)
    else:
        weights = e**alpha
    total = weights.sum()
    if total == 0.0:
        logger.warning("all error rates zero; falling back to uniform quotas")
        weights = np.ones_like(e)
        total = weights.sum()
    shares = budget * weights / total
    quotas = np.floor(shares).astype(np.int64)
    remainder = budget - int(quotas.sum())
    if remainder > 0:
        order = sorted(range(len(e)), key=lambda k: (-(shares[k] - quotas[k]), k))
        for k in order[:remainder]:
            quotas[k] += 1
    return [int(q) for q in quotas]


# -- annotation set ---------------------------------------------------------------


@dataclass
class AnnotationEntry:
    sample_id: str
    source_prototype: str
    target_dimension: int
    similarity: float
    capability_weights: dict[int, float] = field(default_factory=dict)


@dataclass
class AnnotationSet:
    entries: list[AnnotationEntry] = field(default_factory=list)
    quotas: list[int] = field(default_factory=list)
    shortfall: int = 0
    relaxations: list[tuple[str, float]] = field(default_factory=list)

    def sample_ids(self) -> list[str]:
        return [entry.sample_id for entry in self.entries]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for entry in self.entries:
                fh.write(
                    json.dumps(
                        {
                            "sample_id": entry.sample_id,
                            "source_prototype": entry.source_prototype,
                            "target_dimension": entry.target_dimension,
                            "similarity": entry.similarity,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )

    @classmethod
    def load(cls, path: str | Path) -> "AnnotationSet":
        out = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    out.entries.append(AnnotationEntry(capability_weights={}, **json.loads(line)))
        return out


def _relaxed_neighborhood(
    index: VectorIndex,
    prototype: FailurePrototype,
    tau_sim: float,
    tau_floor: float,
    tau_step: float,
    relaxations: list[tuple[str, float]],
) -> dict[str, float]:
    tau = tau_sim
    neighborhood = index.neighborhood(prototype.visual_anchor, tau)
    while not neighborhood and tau - tau_step >= tau_floor - 1e-12:
        tau = round(tau - tau_step, 10)
        logger.info("anchor %s: empty neighborhood, relaxing tau to %.2f", prototype.prototype_id, tau)
        relaxations.append((prototype.prototype_id, tau))
        neighborhood = index.neighborhood(prototype.visual_anchor, tau)
    return neighborhood


def build_annotation_set(
    index: VectorIndex,
    prototypes: Sequence[FailurePrototype],
    e: Sequence[float],
    alpha: float,
    tau_sim: float,
    budget: int,
    exclusions: Iterable[str] = (),
    tau_floor: float = 0.5,
    tau_step: float = 0.05,
) -> AnnotationSet:
    """Fill per-dimension quotas from prototype neighborhoods.

    A sample retrievable through several prototypes appears at most
    once, attributed to the highest-similarity one. Quotas that cannot
    be filled are redistributed proportionally to the remaining e^alpha
    mass; whatever remains unfillable is reported as shortfall.
    """
    if not prototypes:
        raise RetrievalError("no prototypes to retrieve around")
    e = np.asarray(e, dtype=np.float64)
    k_dims = len(e)
    excluded = set(exclusions)
    result = AnnotationSet()

    neighborhoods: dict[str, dict[str, float]] = {}
    for p in sorted(prototypes, key=lambda p: p.prototype_id):
        neighborhoods[p.prototype_id] = _relaxed_neighborhood(
            index, p, tau_sim, tau_floor, tau_step, result.relaxations
        )

    proto_by_dim: dict[int, list[FailurePrototype]] = {k: [] for k in range(k_dims)}
    for p in prototypes:
        for k in p.dominant_capabilities:
            if 0 <= k < k_dims:
                proto_by_dim[k].append(p)

    # attribution: the globally highest-similarity prototype wins a sample
    global_best: dict[str, tuple[float, str]] = {}
    for pid in sorted(neighborhoods):
        for sid, sim in neighborhoods[pid].items():
            cur = global_best.get(sid)
            if cur is None or sim > cur[0]:
                global_best[sid] = (sim, pid)

    # per-dimension ranking strength: best similarity among that
    # dimension's own prototypes
    candidates: dict[int, dict[str, float]] = {k: {} for k in range(k_dims)}
    for k, plist in proto_by_dim.items():
        for p in sorted(plist, key=lambda p: p.prototype_id):
            for sid, sim in neighborhoods[p.prototype_id].items():
                if sid in excluded:
                    continue
                if sim > candidates[k].get(sid, -2.0):
                    candidates[k][sid] = sim

    quotas = allocate_budget(e, alpha, budget)
    result.quotas = list(quotas)
    weights = np.ones_like(e) if alpha == 0.0 else e**alpha
    if weights.sum() == 0.0:
        weights = np.ones_like(e)
    norm_weights = weights / weights.sum()

    taken: set[str] = set()

    def fill(k: int, want: int) -> int:
        got = 0
        ranked = sorted(candidates[k].items(), key=lambda kv: (-kv[1], kv[0]))
        for sid, _ in ranked:
            if got >= want:
                break
            if sid in taken:
                continue
            taken.add(sid)
            sim, proto_id = global_best[sid]
            result.entries.append(
                AnnotationEntry(
                    sample_id=sid,
                    source_prototype=proto_id,
                    target_dimension=k,
                    similarity=sim,
                    capability_weights={k: float(norm_weights[k])},
                )
            )
            got += 1
        return got

    unfilled = 0
    for k in range(k_dims):
        unfilled += quotas[k] - fill(k, quotas[k])

    # redistribute shortfall toward dimensions that still have candidates
    while unfilled > 0:
        open_dims = [k for k in range(k_dims) if any(sid not in taken for sid in candidates[k])]
        if not open_dims:
            break
        open_weights = weights[open_dims]
        if open_weights.sum() == 0.0:
            open_weights = np.ones(len(open_dims))
        extra = allocate_budget(open_weights / max(open_weights.max(), 1e-300), 1.0, unfilled)
        progressed = False
        for k, want in zip(open_dims, extra):
            if want <= 0:
                continue
            got = fill(k, want)
            unfilled -= got
            if got:
                progressed = True
        if not progressed:
            break

    result.shortfall = unfilled
    if unfilled:
        logger.warning("annotation set short by %d of %d", unfilled, budget)
    return result
