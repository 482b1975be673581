"""Partition-comparison metrics with an explicit missing-point block.

A partition covers a universe of N slots: the M observed points followed by
N - M missing slots.  Block id 0 is the missing set; any other id labels one
object.  All metrics are invariant to relabeling the object blocks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import comb

from .core_model import Scene, TemplateSet

__all__ = [
    "Partition",
    "variation_of_information",
    "adjusted_rand_index",
    "segmentation_accuracy",
    "scene_accuracy",
    "truth_partition",
    "predicted_partition",
]


@dataclass(frozen=True)
class Partition:
    """Labels over the universe; label 0 marks the missing block V_0."""

    labels: tuple

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(int(v) for v in self.labels))
        if any(v < 0 for v in self.labels):
            raise ValueError("block labels must be non-negative")

    @staticmethod
    def from_blocks(blocks: Mapping[int, Iterable[int]], n: int) -> "Partition":
        labels = [-1] * n
        for b, members in blocks.items():
            for e in members:
                if labels[e] != -1:
                    raise ValueError("blocks overlap")
                labels[e] = int(b)
        if any(v == -1 for v in labels):
            raise ValueError("blocks do not cover the universe")
        return Partition(tuple(labels))

    @property
    def n(self) -> int:
        return len(self.labels)

    def blocks(self) -> dict:
        out: dict = {}
        for e, b in enumerate(self.labels):
            out.setdefault(b, set()).add(e)
        return {b: frozenset(s) for b, s in out.items()}

    def missing(self) -> frozenset:
        return frozenset(e for e, b in enumerate(self.labels) if b == 0)


def _contingency(V: Partition, Vhat: Partition) -> np.ndarray:
    if V.n != Vhat.n:
        raise ValueError("partitions must share the same universe")
    a = np.asarray(V.labels)
    b = np.asarray(Vhat.labels)
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((len(ua), len(ub)), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


def variation_of_information(V: Partition, Vhat: Partition) -> float:
    """VI distance between two partitions (0 iff equal, symmetric)."""
    table = _contingency(V, Vhat)
    n = V.n
    r = table / n
    p = r.sum(axis=1, keepdims=True)
    q = r.sum(axis=0, keepdims=True)
    mask = r > 0
    terms = np.zeros_like(r)
    terms[mask] = r[mask] * (
        np.log(r[mask] / np.broadcast_to(p, r.shape)[mask])
        + np.log(r[mask] / np.broadcast_to(q, r.shape)[mask])
    )
    return float(-terms.sum())


def adjusted_rand_index(V: Partition, Vhat: Partition) -> float:
    """Hubert-Arabie ARI; the missing set counts as an ordinary cluster."""
    if V.n < 2:
        raise ValueError("ARI needs at least two elements")
    table = _contingency(V, Vhat)
    n = V.n
    sum_ij = comb(table, 2).sum()
    sum_a = comb(table.sum(axis=1), 2).sum()
    sum_b = comb(table.sum(axis=0), 2).sum()
    total = comb(n, 2)
    expected = sum_a * sum_b / total
    max_index = (sum_a + sum_b) / 2.0
    denom = max_index - expected
    if denom == 0:
        return 1.0  # both partitions degenerate and identical in pair structure
    return float((sum_ij - expected) / denom)


def segmentation_accuracy(V: Partition, Vhat: Partition) -> float:
    """Maximum-weight bipartite matching between blocks, normalized by N."""
    table = _contingency(V, Vhat)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum()) / V.n


def scene_accuracy(V: Partition, Vhat: Partition) -> int:
    """1 iff the partitions agree up to object relabeling, with V_0 matching exactly."""
    if V.n != Vhat.n:
        raise ValueError("partitions must share the same universe")
    if V.missing() != Vhat.missing():
        return 0
    obj = lambda P: sorted(s for b, s in P.blocks().items() if b != 0)
    return int(obj(V) == obj(Vhat))


# ---------------------------------------------------------------------------
# Bridges from scenes / inference output to partitions


def truth_partition(scene: Scene, templates: TemplateSet) -> Partition:
    """Ground-truth partition: observed points by generating object, absent slots in V_0."""
    if scene.labels is None:
        raise ValueError("scene carries no ground truth labels")
    n = templates.total_parts
    labels = [int(v) + 1 for v in scene.labels]
    labels += [0] * (n - len(labels))
    return Partition(tuple(labels))


def predicted_partition(point_labels: Sequence[int], templates: TemplateSet) -> Partition:
    """Predicted partition from per-point object indices; unexplained points (-1) join V_0."""
    n = templates.total_parts
    labels = [0 if v < 0 else int(v) + 1 for v in point_labels]
    labels += [0] * (n - len(labels))
    return Partition(tuple(labels))
