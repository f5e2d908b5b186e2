"""Persistent sample / QA / embedding storage with integrity checks.

Layout under one store directory:

* ``samples.jsonl``   one record per line:
  ``{id, image_ref, modality, split, capability_labels, embedding_row}``
* ``qa.jsonl``        one record per line:
  ``{sample_id, task, question_type, question_text, choices, gold_answer}``
* ``embeddings.fpe``  binary matrix: 16-byte header (magic ``FPE1``,
  uint32 dim, uint64 row count, little-endian) then float32 rows.
* ``manifest.json``   split counts, dim, K, per-split perceptual-hash
  registry.

Append-only record files keep the store streamable and diff-friendly;
embeddings are normalized at ingest so cosine similarity downstream is a
plain dot product. Writes are serialized behind a single lock; reads see
a consistent snapshot.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import quality

logger = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"FPE1"
_HEADER = struct.Struct("<4sIQ")

MODALITIES = ("MRI", "CT", "endoscopy", "fundus", "histopathology")
SPLITS = ("pool", "dev", "test")
TASKS = ("perception", "description")
QUESTION_TYPES = ("yes_no", "what", "how", "open_description")

NORM_TOLERANCE = 1e-6


class StoreError(RuntimeError):
    pass


@dataclass
class Sample:
    id: str
    image_ref: str
    modality: str
    split: str
    capability_labels: list[int]
    embedding: np.ndarray | None = None
    embedding_row: int = -1


@dataclass
class QAItem:
    sample_id: str
    task: str
    question_type: str
    question_text: str
    choices: list[str] = field(default_factory=list)
    gold_answer: str = ""


@dataclass
class IngestReport:
    sample_count: int = 0
    qa_count: int = 0
    rejected: list[tuple[str, str]] = field(default_factory=list)

    @property
    def rejected_ids(self) -> list[str]:
        return [rid for rid, _ in self.rejected]


@dataclass
class IntegrityReport:
    disjoint: bool
    id_collisions: list[str]
    cross_split_hash_pairs: list[tuple[str, str, int]]


class EmbeddingMatrix:
    """File-backed float32 matrix, row-appendable, memory-mapped reads."""

    def __init__(self, path: Path, dim: int):
        self.path = path
        self.dim = dim
        if not path.exists():
            with open(path, "wb") as fh:
                fh.write(_HEADER.pack(EMBEDDING_MAGIC, dim, 0))

    @property
    def rows(self) -> int:
        with open(self.path, "rb") as fh:
            magic, dim, rows = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != EMBEDDING_MAGIC:
            raise StoreError(f"bad embedding matrix magic in {self.path}")
        if dim != self.dim:
            raise StoreError(f"embedding matrix dim {dim} != store dim {self.dim}")
        return rows

    def append(self, vectors: np.ndarray) -> int:
        """Append rows; returns the row index of the first appended row."""
        vectors = np.ascontiguousarray(vectors, dtype="<f4")
        if vectors.ndim != 2 or vectors.shape[1] != self.dim:
            raise StoreError("appended block has wrong shape")
        start = self.rows
        with open(self.path, "r+b") as fh:
            fh.seek(0, os.SEEK_END)
            fh.write(vectors.tobytes())
            fh.seek(0)
            fh.write(_HEADER.pack(EMBEDDING_MAGIC, self.dim, start + len(vectors)))
        return start

    def matrix(self) -> np.ndarray:
        rows = self.rows
        if rows == 0:
            return np.empty((0, self.dim), dtype=np.float32)
        return np.memmap(self.path, dtype="<f4", mode="r", offset=_HEADER.size, shape=(rows, self.dim))

    def row(self, index: int) -> np.ndarray:
        return np.array(self.matrix()[index])


class Datastore:
    """Single-writer, multi-reader store for one engine instance.

    ``dim`` (embedding dimension D) and ``k`` (number of capability
    dimensions) are fixed at initialization; changing either requires a
    new store.
    """

    def __init__(self, root: str | os.PathLike[str], dim: int | None = None, k: int | None = None):
        self.root = Path(root)
        self._lock = threading.RLock()
        manifest_path = self.root / "manifest.json"
        if manifest_path.exists():
            self.manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
            if dim is not None and dim != self.manifest["dim"]:
                raise StoreError("store already initialized with a different dim")
            if k is not None and k != self.manifest["k"]:
                raise StoreError("store already initialized with a different k")
        else:
            if dim is None or k is None:
                raise StoreError(f"no store at {self.root}; dim and k required to create one")
            self.root.mkdir(parents=True, exist_ok=True)
            self.manifest = {
                "dim": int(dim),
                "k": int(k),
                "counts": {s: 0 for s in SPLITS},
                "phashes": {s: {} for s in SPLITS},
            }
            self._write_manifest()
        self.embeddings = EmbeddingMatrix(self.root / "embeddings.fpe", self.manifest["dim"])
        self._samples: dict[str, Sample] = {}
        self._qa: dict[str, list[QAItem]] = {}
        self._load_records()

    # -- properties --------------------------------------------------------

    @property
    def dim(self) -> int:
        return self.manifest["dim"]

    @property
    def k(self) -> int:
        return self.manifest["k"]

    def counts(self) -> dict[str, int]:
        return dict(self.manifest["counts"])

    # -- record IO ---------------------------------------------------------

    def _load_records(self) -> None:
        spath = self.root / "samples.jsonl"
        if spath.exists():
            with open(spath, encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    self._samples[rec["id"]] = Sample(
                        id=rec["id"],
                        image_ref=rec["image_ref"],
                        modality=rec["modality"],
                        split=rec["split"],
                        capability_labels=list(rec["capability_labels"]),
                        embedding_row=rec["embedding_row"],
                    )
        qpath = self.root / "qa.jsonl"
        if qpath.exists():
            with open(qpath, encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    self._qa.setdefault(rec["sample_id"], []).append(
                        QAItem(
                            sample_id=rec["sample_id"],
                            task=rec["task"],
                            question_type=rec["question_type"],
                            question_text=rec["question_text"],
                            choices=list(rec["choices"] or []),
                            gold_answer=rec["gold_answer"],
                        )
                    )

    def _write_manifest(self) -> None:
        tmp = self.root / "manifest.json.tmp"
        tmp.write_text(json.dumps(self.manifest, sort_keys=True, indent=1), encoding="utf-8")
        tmp.replace(self.root / "manifest.json")

    # -- ingest ------------------------------------------------------------

    def _validate_sample(self, s: Sample) -> str | None:
        if s.id in self._samples:
            return "duplicate id"
        if s.split not in SPLITS:
            return f"unknown split {s.split!r}"
        if s.modality not in MODALITIES:
            return f"unknown modality {s.modality!r}"
        if len(s.capability_labels) != self.k:
            return f"capability_labels length {len(s.capability_labels)} != K={self.k}"
        if any(c not in (0, 1) for c in s.capability_labels):
            return "capability_labels must be 0/1"
        if s.embedding is None:
            return "missing embedding"
        emb = np.asarray(s.embedding, dtype=np.float64)
        if emb.shape != (self.dim,):
            return f"embedding dimension {emb.shape} != D={self.dim}"
        if not np.all(np.isfinite(emb)) or np.linalg.norm(emb) == 0.0:
            return "embedding not normalizable"
        return None

    @staticmethod
    def _qa_key(qa: QAItem) -> tuple:
        return (qa.sample_id, qa.task, qa.question_type, qa.question_text, tuple(qa.choices), qa.gold_answer)

    def _validate_qa(self, qa: QAItem, known_ids: set[str], seen: set[tuple]) -> str | None:
        if qa.sample_id not in known_ids:
            return f"unknown sample {qa.sample_id!r}"
        if self._qa_key(qa) in seen:
            return "duplicate qa item"
        if qa.task not in TASKS:
            return f"unknown task {qa.task!r}"
        if qa.question_type not in QUESTION_TYPES:
            return f"unknown question_type {qa.question_type!r}"
        if qa.task == "perception":
            if not qa.choices:
                return "perception item needs choices"
            if qa.gold_answer not in qa.choices:
                return "gold_answer not in choices"
        else:
            if qa.choices:
                return "description item must have empty choices"
        return None

    def ingest(self, samples: Iterable[Sample], qa: Iterable[QAItem] = (), embedder=None) -> IngestReport:
        """Persist samples and QA items; embeddings are unit-normalized.

        Samples may arrive without embeddings when an embedding
        provider client is configured; it is asked per image reference.
        Invalid entries are rejected with reasons and never touch the
        store, so re-ingesting an identical payload is a no-op apart
        from the report.
        """
        report = IngestReport()
        with self._lock:
            accepted: list[Sample] = []
            vectors: list[np.ndarray] = []
            seen_now: set[str] = set()
            for s in samples:
                if s.embedding is None and embedder is not None:
                    try:
                        s.embedding = np.asarray(embedder.embed(s.image_ref or s.id), dtype=np.float64)
                    except Exception as exc:
                        report.rejected.append((s.id, f"embedding provider failed: {exc}"))
                        continue
                reason = self._validate_sample(s)
                if reason is None and s.id in seen_now:
                    reason = "duplicate id"
                if reason is not None:
                    report.rejected.append((s.id, reason))
                    continue
                seen_now.add(s.id)
                emb = np.asarray(s.embedding, dtype=np.float64)
                vectors.append((emb / np.linalg.norm(emb)).astype(np.float32))
                accepted.append(s)

            if accepted:
                start = self.embeddings.append(np.stack(vectors))
                with open(self.root / "samples.jsonl", "a", encoding="utf-8") as fh:
                    for offset, s in enumerate(accepted):
                        s.embedding_row = start + offset
                        s.embedding = None
                        fh.write(
                            json.dumps(
                                {
                                    "id": s.id,
                                    "image_ref": s.image_ref,
                                    "modality": s.modality,
                                    "split": s.split,
                                    "capability_labels": s.capability_labels,
                                    "embedding_row": s.embedding_row,
                                },
                                sort_keys=True,
                            )
                            + "\n"
                        )
                        self._samples[s.id] = s
                        self.manifest["counts"][s.split] += 1
                        self._register_hash(s)
                        report.sample_count += 1

            known = set(self._samples)
            seen_qa = {self._qa_key(item) for items in self._qa.values() for item in items}
            accepted_qa: list[QAItem] = []
            for item in qa:
                reason = self._validate_qa(item, known, seen_qa)
                if reason is not None:
                    report.rejected.append((item.sample_id, reason))
                    continue
                seen_qa.add(self._qa_key(item))
                accepted_qa.append(item)
            if accepted_qa:
                with open(self.root / "qa.jsonl", "a", encoding="utf-8") as fh:
                    for item in accepted_qa:
                        fh.write(
                            json.dumps(
                                {
                                    "sample_id": item.sample_id,
                                    "task": item.task,
                                    "question_type": item.question_type,
                                    "question_text": item.question_text,
                                    "choices": item.choices,
                                    "gold_answer": item.gold_answer,
                                },
                                sort_keys=True,
                            )
                            + "\n"
                        )
                        self._qa.setdefault(item.sample_id, []).append(item)
                        report.qa_count += 1
            self._write_manifest()
        return report

    def _register_hash(self, s: Sample) -> None:
        # Images stay external; only locally resolvable files are hashed.
        if s.image_ref and os.path.isfile(s.image_ref):
            try:
                h = quality.phash_file(s.image_ref)
            except quality.ImageDecodeError as exc:
                logger.warning("phash failed for %s: %s", s.id, exc)
                return
            self.manifest["phashes"][s.split][s.id] = h

    # -- reads ---------------------------------------------------------------

    def sample(self, sample_id: str) -> Sample:
        return self._samples[sample_id]

    def samples(self, split: str | None = None) -> list[Sample]:
        out = [s for s in self._samples.values() if split is None or s.split == split]
        return sorted(out, key=lambda s: s.id)

    def ids(self, split: str | None = None) -> list[str]:
        return [s.id for s in self.samples(split)]

    def qa_for(self, sample_id: str) -> list[QAItem]:
        return list(self._qa.get(sample_id, []))

    def qa_items(self, split: str | None = None) -> Iterator[tuple[Sample, int, QAItem]]:
        """Yield (sample, qa_index, item) in deterministic order."""
        for s in self.samples(split):
            for idx, item in enumerate(self._qa.get(s.id, [])):
                yield s, idx, item

    def embedding_of(self, sample_id: str) -> np.ndarray:
        return self.embeddings.row(self._samples[sample_id].embedding_row)

    def split_matrix(self, split: str) -> tuple[list[str], np.ndarray]:
        """Ids plus their unit-vector rows for one split, id-sorted."""
        samples = self.samples(split)
        if not samples:
            return [], np.empty((0, self.dim), dtype=np.float32)
        mat = self.embeddings.matrix()
        rows = np.array([s.embedding_row for s in samples])
        return [s.id for s in samples], np.array(mat[rows])

    # -- integrity -----------------------------------------------------------

    def verify_split_integrity(self, dedup_threshold: int = 5) -> IntegrityReport:
        """Report cross-split id collisions and near-duplicate image hashes.

        Report-only: ``disjoint`` is true iff both lists are empty.
        """
        seen: dict[str, str] = {}
        collisions: set[str] = set()
        spath = self.root / "samples.jsonl"
        if spath.exists():
            with open(spath, encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    prev = seen.get(rec["id"])
                    if prev is not None and prev != rec["split"]:
                        collisions.add(rec["id"])
                    seen[rec["id"]] = rec["split"]
        pairs: list[tuple[str, str, int]] = []
        reg = self.manifest["phashes"]
        for i, split_a in enumerate(SPLITS):
            for split_b in SPLITS[i + 1 :]:
                for id_a, ha in sorted(reg[split_a].items()):
                    for id_b, hb in sorted(reg[split_b].items()):
                        d = quality.hamming(ha, hb)
                        if d <= dedup_threshold:
                            pairs.append((id_a, id_b, d))
        return IntegrityReport(
            disjoint=not collisions and not pairs,
            id_collisions=sorted(collisions),
            cross_split_hash_pairs=pairs,
        )
