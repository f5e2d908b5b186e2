"""Quality assurance before training export.

Two passes, both greedy first-seen-wins over the batch order:

* image deduplication on 64-bit DCT perceptual hashes (Hamming radius),
* diversity filtering on TF-IDF cosine between description texts.

IDF is computed per batch: diversity is a within-batch property at this
stage of the pipeline.
"""

from __future__ import annotations

import io
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy.fft import dctn


class ImageDecodeError(ValueError):
    """Raised when image bytes cannot be decoded for hashing."""

    def __init__(self, record_id: str, cause: str):
        super().__init__(f"cannot decode image for {record_id}: {cause}")
        self.record_id = record_id


@dataclass(frozen=True)
class Drop:
    """Disposition of a dropped record for the QA report."""

    record_id: str
    reason: str
    matched_id: str | None = None
    value: float | None = None


_TOKEN_RE = re.compile(r"[a-z0-9]+")


def phash(data: bytes, record_id: str = "<bytes>") -> int:
    """64-bit DCT perceptual hash.

    Grayscale 32x32 resize, orthonormal 2D DCT, top-left 8x8 block with
    the DC term dropped (63 coefficients), thresholded at their median.
    Bits are packed row-major MSB-first; the final (LSB) bit is a zero
    pad, so identical pixel data always hashes identically.
    """
    try:
        img = Image.open(io.BytesIO(data))
        img = img.convert("L").resize((32, 32), Image.LANCZOS)
    except Exception as exc:
        raise ImageDecodeError(record_id, str(exc)) from exc
    pixels = np.asarray(img, dtype=np.float64)
    coeffs = dctn(pixels, norm="ortho")[:8, :8].ravel()[1:]
    median = float(np.median(coeffs))
    bits = 0
    for c in coeffs:
        bits = (bits << 1) | int(c > median)
    return bits << 1  # zero pad to 64 bits


def phash_file(path: str) -> int:
    with open(path, "rb") as fh:
        return phash(fh.read(), record_id=path)


def hamming(a: int, b: int) -> int:
    return bin(a ^ b).count("1")


def dedup(
    records: Sequence[tuple[str, int]],
    threshold: int,
    prior: Iterable[tuple[str, int]] = (),
) -> tuple[list[str], list[Drop]]:
    """Greedy near-duplicate image removal.

    ``records`` are (record_id, hash) in batch order; a record is dropped
    iff its hash is within Hamming ``threshold`` of an earlier kept record
    or of any (id, hash) in ``prior`` (the cumulative training ledger).
    """
    keepers: list[tuple[str, int]] = list(prior)
    kept: list[str] = []
    dropped: list[Drop] = []
    for rid, h in records:
        match = None
        for kid, kh in keepers:
            d = hamming(h, kh)
            if d <= threshold:
                match = (kid, d)
                break
        if match is None:
            keepers.append((rid, h))
            kept.append(rid)
        else:
            dropped.append(Drop(rid, "near_duplicate_image", match[0], float(match[1])))
    return kept, dropped


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def tfidf_vectors(texts: Sequence[str]) -> list[dict[str, float]]:
    """Raw-TF x smoothed-IDF vectors over the batch vocabulary.

    IDF(term) = ln((1 + N) / (1 + df)) + 1 with N the batch size.
    """
    token_lists = [tokenize(t) for t in texts]
    df: Counter[str] = Counter()
    for toks in token_lists:
        df.update(set(toks))
    n = len(texts)
    idf = {term: math.log((1 + n) / (1 + d)) + 1.0 for term, d in df.items()}
    vectors = []
    for toks in token_lists:
        tf = Counter(toks)
        vectors.append({term: count * idf[term] for term, count in tf.items()})
    return vectors


def tfidf_cosine(u: dict[str, float], v: dict[str, float]) -> float:
    if not u or not v:
        return 0.0
    if len(v) < len(u):
        u, v = v, u
    dot = sum(w * v.get(t, 0.0) for t, w in u.items())
    nu = math.sqrt(sum(w * w for w in u.values()))
    nv = math.sqrt(sum(w * w for w in v.values()))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return dot / (nu * nv)


def diversity_filter(
    descriptions: Sequence[tuple[str, str]],
    sim_threshold: float,
) -> tuple[list[str], list[Drop]]:
    """Drop descriptions whose TF-IDF cosine to an earlier kept one
    exceeds ``sim_threshold``; empty (token-free) texts are dropped
    outright."""
    ids = [rid for rid, _ in descriptions]
    vectors = tfidf_vectors([text for _, text in descriptions])
    kept: list[str] = []
    kept_vecs: list[tuple[str, dict[str, float]]] = []
    dropped: list[Drop] = []
    for rid, vec in zip(ids, vectors):
        if not vec:
            dropped.append(Drop(rid, "empty"))
            continue
        match = None
        for kid, kvec in kept_vecs:
            cos = tfidf_cosine(vec, kvec)
            if cos > sim_threshold:
                match = (kid, cos)
                break
        if match is None:
            kept.append(rid)
            kept_vecs.append((rid, vec))
        else:
            dropped.append(Drop(rid, "near_duplicate_text", match[0], match[1]))
    return kept, dropped
