"""Entangled-pair detection and audit statistics.

Two samples are entangled when (a) their true classes differ, (b) each
candidate set contains both true labels, and (c) their embeddings' cosine
similarity reaches a threshold. Pairs are canonicalized i < j and ordered by
(similarity desc, i asc, j asc) so ratio truncation is reproducible.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .data import PLLDataset

__all__ = [
    "RequiresGroundTruthError",
    "EntangledPair",
    "EntangleReport",
    "cosine_similarities",
    "find_entangled",
    "top_fraction_pairs",
    "report",
    "write_report_csv",
]


class RequiresGroundTruthError(ValueError):
    """Entanglement detection needs true labels on every sample."""


@dataclass(frozen=True)
class EntangledPair:
    """An unordered sample pair stored with i < j and its cosine score."""

    i: int
    j: int
    similarity: float


@dataclass(frozen=True)
class EntangleReport:
    """Pair and unique-instance counts at one threshold or ratio."""

    threshold_or_ratio: float | None
    pair_count: int
    instance_count: int


def cosine_similarities(embeddings: np.ndarray) -> np.ndarray:
    """Full pairwise cosine matrix; zero-norm rows get similarity 0."""
    emb = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    unit = emb / safe
    return unit @ unit.T


def _qualifying_mask(dataset: PLLDataset) -> np.ndarray:
    """Upper-triangular mask of pairs meeting the class and label conjuncts."""
    if not dataset.has_true_labels:
        raise RequiresGroundTruthError("dataset has samples without true labels")
    labels = dataset.true_labels
    cand = dataset.candidates
    n = len(dataset)
    own = cand[np.arange(n), labels]  # always true for a valid dataset
    cross = cand[:, labels]  # cross[i, j] = (y_j in S_i)
    mutual = own[:, None] & own[None, :] & cross & cross.T
    differ = labels[:, None] != labels[None, :]
    mask = mutual & differ
    return np.triu(mask, k=1)


def _sorted_pairs(sim: np.ndarray, mask: np.ndarray) -> list[EntangledPair]:
    ii, jj = np.nonzero(mask)
    sims = sim[ii, jj]
    order = np.lexsort((jj, ii, -sims))
    return [EntangledPair(int(ii[k]), int(jj[k]), float(sims[k])) for k in order]


def find_entangled(embeddings, dataset: PLLDataset, xi: float) -> list[EntangledPair]:
    """All pairs satisfying the three entanglement conjuncts at threshold xi."""
    if not (-1.0 < xi <= 1.0):
        raise ValueError(f"xi must lie in (-1, 1], got {xi}")
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.shape[0] != len(dataset):
        raise ValueError("need exactly one embedding per sample")
    sim = cosine_similarities(emb)
    mask = _qualifying_mask(dataset) & (sim >= xi)
    return _sorted_pairs(sim, mask)


def top_fraction_pairs(embeddings, dataset: PLLDataset, ratio: float):
    """The ceil(ratio * P) most similar pairs among the P class/label-qualifying ones.

    Returns (pairs, effective_xi); effective_xi is the smallest similarity
    kept, or None when no pair qualifies at all (the undefined-threshold flag).
    """
    if not (0.0 < ratio <= 1.0):
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.shape[0] != len(dataset):
        raise ValueError("need exactly one embedding per sample")
    sim = cosine_similarities(emb)
    pairs = _sorted_pairs(sim, _qualifying_mask(dataset))
    if not pairs:
        return [], None
    keep = math.ceil(ratio * len(pairs))
    kept = pairs[:keep]
    return kept, kept[-1].similarity


def report(pairs, threshold_or_ratio=None) -> EntangleReport:
    """Count pairs and deduplicated instances."""
    instances = set()
    for p in pairs:
        instances.add(p.i)
        instances.add(p.j)
    return EntangleReport(
        threshold_or_ratio=threshold_or_ratio,
        pair_count=len(pairs),
        instance_count=len(instances),
    )


def write_report_csv(reports, path) -> None:
    """Emit rows of (threshold_or_ratio, pair_count, instance_count)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold_or_ratio", "pair_count", "instance_count"])
        for r in reports:
            key = "" if r.threshold_or_ratio is None else repr(float(r.threshold_or_ratio))
            writer.writerow([key, r.pair_count, r.instance_count])
