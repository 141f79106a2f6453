"""Facet-set similarity algebra.

``asym(A, B)`` averages, over B's facets, the best cosine match within A:
a coverage measure of B by A. ``sim`` symmetrizes it; the asym difference
detects entailment direction (the facet-richer side is the premise); the
frequency difference is the classic generality baseline.
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InvariantError
from .model import FacetSet

TIE_EPS = 1e-12


@dataclass
class ScoredPair:
    row_i: object
    row_j: object
    asym_ij: float
    asym_ji: float
    sim: float
    ours_diff: float


def normalized_facets(facets):
    """Rows of unit norm; raises on a zero-norm facet (scoring requires
    normalizable facets, unlike the training distance)."""
    if isinstance(facets, FacetSet):
        return facets.normalized()
    vals = np.asarray(facets, dtype=np.float64)
    if vals.ndim == 1:
        vals = vals[None, :]
    norms = np.linalg.norm(vals, axis=1, keepdims=True)
    if (norms < 1e-12).any():
        raise InvariantError("cannot score a zero-norm facet")
    return vals / norms


def asym(a, b):
    """Average over the second set's facets of the best match in the first.

    The divisor is |b|, which generalizes the equal-count formula to
    pattern-vs-relation scoring where the facet counts differ.
    """
    a_n = normalized_facets(a)
    b_n = normalized_facets(b)
    cross = a_n @ b_n.T                 # (|a|, |b|)
    return float(cross.max(axis=0).mean())


def sim(a, b):
    return (asym(a, b) + asym(b, a)) / 2.0


def ours_diff(a, b):
    """asym(a, b) - asym(b, a), plus which side is predicted as premise.

    Positive difference predicts the first argument (the more specific,
    facet-richer pattern). Differences below the tie threshold are ties,
    which is what makes every single-facet configuration score exactly
    chance under half-credit accounting.
    """
    diff = asym(a, b) - asym(b, a)
    if abs(diff) < TIE_EPS:
        return diff, "tie"
    return diff, ("i" if diff > 0 else "j")


def freq_diff(freq_i, freq_j):
    """Generality baseline: the pattern with fewer unique entity pairs is
    predicted to be the premise."""
    if freq_i < 0 or freq_j < 0:
        raise ValueError("frequencies must be nonnegative")
    diff = float(freq_j) - float(freq_i)
    if diff == 0.0:
        return diff, "tie"
    return diff, ("i" if diff > 0 else "j")


def score_pair(label_i, label_j, facets_i, facets_j):
    a_ij = asym(facets_i, facets_j)
    a_ji = asym(facets_j, facets_i)
    return ScoredPair(row_i=label_i, row_j=label_j, asym_ij=a_ij, asym_ji=a_ji,
                      sim=(a_ij + a_ji) / 2.0, ours_diff=a_ij - a_ji)


def score_pairs(items, threads=1):
    """Score (label_i, label_j, facets_i, facets_j) tuples, order-stable.

    Pure per-pair work, so the thread fan-out never changes results.
    """
    if threads <= 1:
        return [score_pair(*item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda it: score_pair(*it), items))


def write_scores_csv(pairs, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j", "asym_ij", "asym_ji", "sim", "ours_diff"])
        for p in pairs:
            writer.writerow([p.row_i, p.row_j, repr(p.asym_ij), repr(p.asym_ji),
                             repr(p.sim), repr(p.ours_diff)])


def read_scores_csv(path):
    pairs = []
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            pairs.append(ScoredPair(
                row_i=row["i"], row_j=row["j"],
                asym_ij=float(row["asym_ij"]), asym_ji=float(row["asym_ji"]),
                sim=float(row["sim"]), ours_diff=float(row["ours_diff"])))
    return pairs
