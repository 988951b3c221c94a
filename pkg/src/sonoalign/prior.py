"""Batch-level soft-prior affinity matrix built from per-task label sets
and similarity tables.

Pairs are averaged over the tasks both samples actually carry; the
coverage matrix records how many tasks contributed to each entry, and
coverage-zero pairs get affinity 0. The diagonal is forced to 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .taxonomy import TASK_IDS, SimTable, TaxonomyCatalog


class PriorError(Exception):
    pass


@dataclass(frozen=True)
class PriorMatrix:
    matrix: np.ndarray  # B x B affinities in [0, 1], symmetric, diag 1
    coverage: np.ndarray  # B x B contributing-task counts

    @property
    def batch_size(self):
        return self.matrix.shape[0]


def task_affinity(labels_i, labels_j, sim: SimTable) -> float:
    """Mean pairwise similarity between two non-empty label sets, summed
    in ascending index order so an independent oracle can match exactly."""
    if not labels_i or not labels_j:
        raise PriorError("task_affinity requires non-empty label sets")
    m = sim.matrix
    total = 0.0
    for a in sorted(labels_i):
        for b in sorted(labels_j):
            total += m[a, b]
    return total / (len(labels_i) * len(labels_j))


def prior_matrix(batch, catalog: TaxonomyCatalog) -> PriorMatrix:
    if not batch:
        raise PriorError("empty batch")
    b = len(batch)
    matrix = np.zeros((b, b))
    coverage = np.zeros((b, b), dtype=np.int64)
    for i in range(b):
        matrix[i, i] = 1.0
        coverage[i, i] = sum(1 for tid in TASK_IDS if batch[i].label_set(tid))
        for j in range(i + 1, b):
            total = 0.0
            shared = 0
            for tid in TASK_IDS:
                li = batch[i].label_set(tid)
                lj = batch[j].label_set(tid)
                if li and lj:
                    total += task_affinity(li, lj, catalog.task(tid).similarity)
                    shared += 1
            value = total / shared if shared else 0.0
            matrix[i, j] = matrix[j, i] = value
            coverage[i, j] = coverage[j, i] = shared
    return PriorMatrix(matrix, coverage)


def _coverage_path(path):
    path = str(path)
    if path.endswith(".csv"):
        return path[:-4] + ".coverage.csv"
    return path + ".coverage.csv"


def export_prior(prior: PriorMatrix, path):
    """Write the affinity matrix as CSV (17 significant digits) plus a
    sidecar coverage CSV next to it."""
    with open(path, "w", encoding="utf-8") as f:
        for row in prior.matrix:
            f.write(",".join(f"{x:.17g}" for x in row))
            f.write("\n")
    with open(_coverage_path(path), "w", encoding="utf-8") as f:
        for row in prior.coverage:
            f.write(",".join(str(int(x)) for x in row))
            f.write("\n")


def load_prior(path) -> PriorMatrix:
    matrix = np.loadtxt(path, delimiter=",", ndmin=2)
    coverage = np.loadtxt(_coverage_path(path), delimiter=",", dtype=np.int64, ndmin=2)
    return PriorMatrix(matrix, coverage)
