"""Chance-adjusted clustering agreement.

Mutual information between two labelings, its exact expectation under the
fixed-marginal permutation model (hypergeometric sum, computed in log
space), and the adjusted score
    (MI - E[MI]) / (mean(H(a), H(b)) - E[MI])
with the arithmetic mean.  All logarithms are natural; the adjusted score
is scale-free so the unit cancels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

__all__ = [
    "ContingencyTable",
    "entropy",
    "mutual_info",
    "expected_mi",
    "ami",
    "metrics_record",
]

_EPS = np.finfo(np.float64).eps


@dataclass
class ContingencyTable:
    """Joint counts of two labelings over the same items."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2:
            raise ValueError("contingency table must be 2-D")
        if (self.counts < 0).any():
            raise ValueError("contingency counts must be non-negative")
        if self.counts.sum() <= 0:
            raise ValueError("contingency table must contain at least one item")

    @property
    def row_marginals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def col_marginals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_labels(cls, a, b) -> "ContingencyTable":
        a = np.asarray(a)
        b = np.asarray(b)
        if a.shape != b.shape or a.ndim != 1:
            raise ValueError("labelings must be 1-D and of equal length")
        if len(a) == 0:
            raise ValueError("labelings must be non-empty")
        _, ai = np.unique(a, return_inverse=True)
        _, bi = np.unique(b, return_inverse=True)
        counts = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
        np.add.at(counts, (ai, bi), 1)
        return cls(counts)


def entropy(labels) -> float:
    """Shannon entropy of a labeling, in nats."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("labels must be non-empty")
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def _entropy_from_counts(counts: np.ndarray) -> float:
    counts = counts[counts > 0]
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def mutual_info(table: ContingencyTable) -> float:
    """MI in nats; cells with zero count contribute zero."""
    n = table.n
    nij = table.counts
    a = table.row_marginals.astype(np.float64)
    b = table.col_marginals.astype(np.float64)
    mask = nij > 0
    p = nij[mask] / n
    outer = np.outer(a, b)[mask] / (float(n) * n)
    return float((p * (np.log(p) - np.log(outer))).sum())


def expected_mi(row_marginals, col_marginals, n: int) -> float:
    """Exact E[MI] under random labelings with these fixed marginals.

    For each cell (i, j) the joint count follows a hypergeometric law; the
    expectation sums (nij/n) log(n nij / (a_i b_j)) weighted by that law.
    Factorials are evaluated through log-gamma to avoid overflow.
    """
    a = np.asarray(row_marginals, dtype=np.int64)
    b = np.asarray(col_marginals, dtype=np.int64)
    n = int(n)
    if a.sum() != n or b.sum() != n:
        raise ValueError("marginals must each sum to n")
    if (a < 0).any() or (b < 0).any():
        raise ValueError("marginals must be non-negative")
    a = a[a > 0]
    b = b[b > 0]
    log_n = np.log(n)
    gln_n = gammaln(n + 1)
    total = 0.0
    for ai in a:
        base_i = gammaln(ai + 1) + gammaln(n - ai + 1)
        for bj in b:
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            if hi < lo:
                continue
            nij = np.arange(lo, hi + 1, dtype=np.float64)
            log_term = np.log(nij) + log_n - np.log(float(ai)) - np.log(float(bj))
            log_prob = (
                base_i
                + gammaln(bj + 1)
                + gammaln(n - bj + 1)
                - gln_n
                - gammaln(nij + 1)
                - gammaln(ai - nij + 1)
                - gammaln(bj - nij + 1)
                - gammaln(n - ai - bj + nij + 1)
            )
            total += float(((nij / n) * log_term * np.exp(log_prob)).sum())
    return total


def _filter_noise(a: np.ndarray, b: np.ndarray, noise: str):
    if noise == "include":
        return a, b
    if noise == "exclude":
        mask = (a != -1) & (b != -1)
        if not mask.any():
            raise ValueError("all items carry the noise label; nothing to score")
        return a[mask], b[mask]
    raise ValueError(f"unknown noise policy: {noise!r}")


def ami(true_labels, pred_labels, noise: str = "include") -> float:
    """Adjusted mutual information.

    `noise` controls the reserved -1 label: "include" treats it as its own
    class, "exclude" drops items where either labeling says noise.  Two
    single-class labelings agree perfectly by convention (0/0 -> 1).
    """
    a = np.asarray(true_labels)
    b = np.asarray(pred_labels)
    if a.shape != b.shape:
        raise ValueError("labelings must have equal length")
    if a.size == 0:
        raise ValueError("labelings must be non-empty")
    a, b = _filter_noise(a, b, noise)
    table = ContingencyTable.from_labels(a, b)
    r, c = table.counts.shape
    if r == 1 and c == 1:
        return 1.0
    if r == 1 or c == 1:
        return 0.0
    mi = mutual_info(table)
    emi = expected_mi(table.row_marginals, table.col_marginals, table.n)
    h_a = _entropy_from_counts(table.row_marginals)
    h_b = _entropy_from_counts(table.col_marginals)
    # Clamp both parts away from zero, preserving sign, so that identical
    # partitions whose expectation equals the maximum resolve to 1 (0/0).
    denominator = 0.5 * (h_a + h_b) - emi
    if denominator < 0:
        denominator = min(denominator, -_EPS)
    else:
        denominator = max(denominator, _EPS)
    numerator = mi - emi
    if numerator < 0:
        numerator = min(numerator, -_EPS)
    else:
        numerator = max(numerator, _EPS)
    return float(numerator / denominator)


def metrics_record(true_labels, pred_labels, noise: str = "include") -> dict:
    """Full evaluation record for export: {ami, mi, emi, h_true, h_pred, n}."""
    a = np.asarray(true_labels)
    b = np.asarray(pred_labels)
    if a.shape != b.shape:
        raise ValueError("labelings must have equal length")
    a, b = _filter_noise(a, b, noise)
    table = ContingencyTable.from_labels(a, b)
    return {
        "ami": ami(a, b),
        "mi": mutual_info(table),
        "emi": expected_mi(table.row_marginals, table.col_marginals, table.n),
        "h_true": _entropy_from_counts(table.row_marginals),
        "h_pred": _entropy_from_counts(table.col_marginals),
        "n": table.n,
    }
