"""Failure-prototype mining.

Each failure case is fused into one vector [visual ; lambda * qa_text]
(unit visual embedding of the image, unit text embedding of the
question plus the model's most frequent wrong answer). Fused vectors
are clustered agglomeratively (average linkage, cosine distance) and
the cut is chosen by maximum mean silhouette over a k range, ties
toward smaller k. Cluster centroids become prototypes; the normalized
mean of the member visual sub-vectors is the retrieval anchor.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.cluster.hierarchy import cut_tree, linkage as scipy_linkage
from scipy.spatial.distance import pdist, squareform

from .clients import TextEmbedClient
from .datastore import Datastore
from .evaluator import FailureCase, FailurePool

logger = logging.getLogger(__name__)

_IDENTICAL_EPS = 1e-12
_ZERO_NORM_EPS = 1e-9


class ClusteringError(ValueError):
    pass


@dataclass
class FusedFeature:
    sample_id: str
    qa_index: int
    visual: np.ndarray
    qa_text: np.ndarray
    fused: np.ndarray
    capability_labels: list[int] = field(default_factory=list)

    @property
    def key(self) -> tuple[str, int]:
        return (self.sample_id, self.qa_index)


@dataclass
class Clustering:
    assignments: list[int]
    n_clusters: int
    silhouette: float
    degenerate: bool = False


@dataclass
class FailurePrototype:
    prototype_id: str
    centroid: np.ndarray
    visual_anchor: np.ndarray
    member_ids: list[str]
    dominant_capabilities: list[int]


@dataclass
class UnanchoredCluster:
    cluster_index: int
    member_ids: list[str]
    reason: str = "degenerate centroid"


def representative_answer(case: FailureCase) -> str:
    """Most frequent transcript answer, ties broken lexicographically."""
    texts = [t for t in case.transcripts if t.strip()]
    if not texts:
        return ""
    counts = Counter(texts)
    return min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]


def fuse(
    case: FailureCase,
    visual: np.ndarray,
    question_text: str,
    text_embedder: TextEmbedClient,
    fusion_lambda: float,
) -> FusedFeature:
    """Deterministic fused vector for one failure case.

    The text half embeds the question plus the model's answer, so the
    cluster geometry captures how the model failed, not just where.
    """
    if fusion_lambda < 0:
        raise ValueError("fusion_lambda must be >= 0")
    visual = np.asarray(visual, dtype=np.float64)
    qa_text = f"{question_text} {representative_answer(case)}".strip()
    text_vec = np.asarray(text_embedder.embed(qa_text), dtype=np.float64)
    norm = np.linalg.norm(text_vec)
    if norm > 0:
        text_vec = text_vec / norm
    return FusedFeature(
        sample_id=case.sample_id,
        qa_index=case.qa_index,
        visual=visual,
        qa_text=text_vec,
        fused=np.concatenate([visual, fusion_lambda * text_vec]),
        capability_labels=list(case.capability_labels),
    )


def fuse_pool(
    pool: FailurePool,
    store: Datastore,
    text_embedder: TextEmbedClient,
    fusion_lambda: float,
) -> list[FusedFeature]:
    """Fuse every failure case; embedder failures skip the case with an
    incident log entry. Text input is question + the model's answer."""
    if fusion_lambda < 0:
        raise ValueError("fusion_lambda must be >= 0")
    features: list[FusedFeature] = []
    for case in pool.cases:
        qa_items = store.qa_for(case.sample_id)
        question = qa_items[case.qa_index].question_text if case.qa_index < len(qa_items) else ""
        visual = store.embedding_of(case.sample_id).astype(np.float64)
        try:
            features.append(fuse(case, visual, question, text_embedder, fusion_lambda))
        except Exception as exc:
            logger.warning("text embedder failed for %s/%d, case skipped: %s", case.sample_id, case.qa_index, exc)
    return features


def mean_silhouette(dist: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette over a precomputed square distance matrix.

    Singleton clusters score 0 for their lone member.
    """
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ClusteringError("silhouette needs at least two clusters")
    n = len(labels)
    scores = np.zeros(n, dtype=np.float64)
    for i in range(n):
        own = labels == labels[i]
        n_own = own.sum()
        if n_own == 1:
            scores[i] = 0.0
            continue
        a = dist[i, own].sum() / (n_own - 1)
        b = min(float(dist[i, labels == c].mean()) for c in uniq if c != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def _canonicalize(raw: np.ndarray, ids: Sequence) -> tuple[list[int], int]:
    """Relabel clusters 0..k-1 ordered by their smallest member id."""
    groups: dict[int, list] = {}
    for idx, lab in enumerate(raw):
        groups.setdefault(int(lab), []).append(ids[idx])
    order = sorted(groups, key=lambda lab: min(groups[lab]))
    mapping = {lab: rank for rank, lab in enumerate(order)}
    return [mapping[int(lab)] for lab in raw], len(order)


def cluster(
    features: Sequence[FusedFeature] | np.ndarray,
    k_min: int = 2,
    k_max: int = 20,
    linkage: str = "average",
    metric: str = "cosine",
) -> Clustering:
    """Agglomerative clustering with silhouette-selected cluster count.

    Scans k in [k_min, min(k_max, n-1)] over one dendrogram and keeps
    the cut with the highest mean silhouette, ties toward smaller k.
    Assignments are canonical: clusters numbered by smallest member id,
    so input order cannot leak into the result.
    """
    if isinstance(features, np.ndarray):
        matrix = np.asarray(features, dtype=np.float64)
        ids: list = list(range(len(matrix)))
    else:
        matrix = np.stack([f.fused for f in features]).astype(np.float64)
        ids = [f.key for f in features]
    n = len(matrix)
    if n < 2:
        raise ClusteringError("insufficient failures: need at least 2 feature vectors")
    if not 2 <= k_min <= k_max:
        raise ClusteringError("need 2 <= k_min <= k_max")
    condensed = pdist(matrix, metric=metric)
    if condensed.max(initial=0.0) < _IDENTICAL_EPS:
        logger.warning("all %d fused features identical; returning one degenerate cluster", n)
        return Clustering(assignments=[0] * n, n_clusters=1, silhouette=0.0, degenerate=True)
    tree = scipy_linkage(condensed, method=linkage)
    square = squareform(condensed)
    hi = min(k_max, n - 1)
    if hi < k_min:  # tiny pools: the all-singleton cut is the only one left
        hi = min(k_max, n)
    best: tuple[float, int, np.ndarray] | None = None
    for k in range(k_min, hi + 1):
        labels = cut_tree(tree, n_clusters=k).ravel()
        if len(np.unique(labels)) < 2:
            continue
        score = mean_silhouette(square, labels)
        if best is None or score > best[0]:
            best = (score, k, labels)
    if best is None:
        raise ClusteringError(f"no valid cut in k range [{k_min}, {hi}]")
    assignments, n_clusters = _canonicalize(best[2], ids)
    return Clustering(assignments=assignments, n_clusters=n_clusters, silhouette=best[0])


def extract_prototypes(
    clustering: Clustering,
    features: Sequence[FusedFeature],
    iteration: int = 0,
) -> tuple[list[FailurePrototype], list[UnanchoredCluster]]:
    """One prototype per cluster: fused centroid, normalized mean visual
    anchor, member ids, capability dimensions by member frequency.

    Clusters whose mean visual vector collapses to zero cannot anchor
    retrieval; they are reported unanchored and their members are
    reassigned to the nearest surviving prototype.
    """
    if len(clustering.assignments) != len(features):
        raise ValueError("clustering does not match features")
    members: dict[int, list[FusedFeature]] = {}
    for lab, feat in zip(clustering.assignments, features):
        members.setdefault(lab, []).append(feat)
    if any(not m for m in members.values()):
        raise RuntimeError("internal error: empty cluster")

    prototypes: list[FailurePrototype] = []
    unanchored: list[UnanchoredCluster] = []
    orphans: list[FusedFeature] = []
    for lab in sorted(members):
        feats = members[lab]
        mean_visual = np.mean([f.visual for f in feats], axis=0)
        norm = np.linalg.norm(mean_visual)
        if norm < _ZERO_NORM_EPS:
            logger.warning("cluster %d has a degenerate (zero-mean) visual centroid; unanchored", lab)
            unanchored.append(
                UnanchoredCluster(cluster_index=lab, member_ids=sorted(f.sample_id for f in feats))
            )
            orphans.extend(feats)
            continue
        centroid = np.mean([f.fused for f in feats], axis=0)
        prototypes.append(
            FailurePrototype(
                prototype_id=f"p{iteration}-{len(prototypes):03d}",
                centroid=centroid,
                visual_anchor=mean_visual / norm,
                member_ids=sorted(f.sample_id for f in feats),
                dominant_capabilities=_dominant_capabilities(feats),
            )
        )
    if orphans and not prototypes:
        raise ClusteringError("degenerate centroid: no cluster could be anchored")
    for feat in orphans:
        sims = [float(np.dot(feat.fused, p.centroid)) / (np.linalg.norm(feat.fused) * np.linalg.norm(p.centroid)) for p in prototypes]
        target = prototypes[int(np.argmax(sims))]
        if feat.sample_id not in target.member_ids:
            target.member_ids = sorted(target.member_ids + [feat.sample_id])
    return prototypes, unanchored


def _dominant_capabilities(feats: Sequence[FusedFeature]) -> list[int]:
    counts: Counter[int] = Counter()
    for f in feats:
        for dim, flag in enumerate(f.capability_labels):
            if flag:
                counts[dim] += 1
    return [dim for dim, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))]


# -- prototype file ------------------------------------------------------------


def save_prototypes(
    prototypes: Sequence[FailurePrototype],
    path: str | Path,
    unanchored: Sequence[UnanchoredCluster] = (),
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {"n_clusters": len(prototypes) + len(unanchored), "anchored": len(prototypes)}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for p in prototypes:
            fh.write(
                json.dumps(
                    {
                        "prototype_id": p.prototype_id,
                        "visual_anchor": [float(x) for x in p.visual_anchor],
                        "member_ids": p.member_ids,
                        "dominant_capabilities": p.dominant_capabilities,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_prototypes(path: str | Path) -> list[FailurePrototype]:
    prototypes: list[FailurePrototype] = []
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    for line in lines[1:]:
        rec = json.loads(line)
        anchor = np.asarray(rec["visual_anchor"], dtype=np.float64)
        prototypes.append(
            FailurePrototype(
                prototype_id=rec["prototype_id"],
                centroid=anchor,
                visual_anchor=anchor,
                member_ids=list(rec["member_ids"]),
                dominant_capabilities=list(rec["dominant_capabilities"]),
            )
        )
    return prototypes
