"""Evaluation harness: retrieval-style relation extraction with
per-relation thresholds, entailment classification (average precision over
the full ranking) and direction accuracy with half-credit ties, and a
classical-MDS projection export for visualizing facets next to entity
pairs."""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigError, InvariantError, MfusError, ParseError
from .model import facets_for_tokens
from .corpus import RowKind
from .scoring import TIE_EPS, asym

log = logging.getLogger(__name__)


@dataclass
class REEvalSet:
    instances: list            # (pattern_text, entity_pair_id, frozenset gold)
    relations: list            # relation name vocabulary

    def __len__(self):
        return len(self.instances)


def load_re_eval_set(path, relations=None):
    instances = []
    gold_union = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(
                    f"expected 3 tab-separated fields, got {len(parts)}",
                    line=lineno)
            pattern, pair_id, gold_raw = parts
            gold = frozenset(g for g in gold_raw.split("|") if g)
            gold_union |= gold
            instances.append((pattern, pair_id, gold))
    rel_list = list(relations) if relations is not None else sorted(gold_union)
    missing = gold_union - set(rel_list)
    if missing:
        raise InvariantError(
            f"gold relations not among KB relation rows: {sorted(missing)}")
    return REEvalSet(instances=instances, relations=rel_list)


def save_re_eval_set(eval_set, path):
    with open(path, "w", encoding="utf-8") as fh:
        for pattern, pair_id, gold in eval_set.instances:
            fh.write(f"{pattern}\t{pair_id}\t{'|'.join(sorted(gold))}\n")


@dataclass
class PRF:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp, fp, fn):
        p = tp / (tp + fp) if (tp + fp) > 0 else 0.0
        r = tp / (tp + fn) if (tp + fn) > 0 else 0.0
        f1 = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
        return cls(precision=p, recall=r, f1=f1)


@dataclass
class EntailEvalReport:
    ap_at_all: float
    micro_direction_acc: float
    macro_direction_acc: float
    n_positive: int = 0
    n_negative: int = 0


class SimScorer:
    """Caches relation facet sets and scores Sim(pattern, relation).

    An optional factorization model contributes max-merged row-cosine
    scores for patterns that exist verbatim in the matrix.
    """

    def __init__(self, params, cfg, matrix, ensemble_fm=None):
        self.params = params
        self.cfg = cfg
        self.matrix = matrix
        self.fm = ensemble_fm
        self.rel_rows = {matrix.rows[i].text: i for i in matrix.relation_row_ids()}
        self.pattern_rows = {matrix.rows[i].text: i
                             for i in matrix.pattern_row_ids()}
        self._facet_cache = {}

    def relation_names(self):
        return sorted(self.rel_rows)

    def _facets(self, text, kind):
        key = (text, kind)
        if key not in self._facet_cache:
            with nc.no_grad():
                fs = facets_for_tokens(tuple(text.split()), kind, self.params,
                                       self.cfg, train=False)
            self._facet_cache[key] = fs.normalized()
        return self._facet_cache[key]

    def sim(self, pattern_text, relation_name):
        pat = self._facets(pattern_text, RowKind.PATTERN)
        rel = self._facets(relation_name, RowKind.KB_RELATION)
        score = (asym(pat, rel) + asym(rel, pat)) / 2.0
        if self.fm is not None:
            i = self.pattern_rows.get(pattern_text)
            j = self.rel_rows.get(relation_name)
            if i is not None and j is not None:
                score = max(score, self.fm.row_cosine(i, j))
        return score


def score_matrix(eval_set, scorer):
    """(n_instances, n_relations) Sim scores; empty patterns are skipped
    with a warning and score -inf everywhere."""
    scores = np.full((len(eval_set), len(eval_set.relations)), -np.inf)
    for n, (pattern, _pair, _gold) in enumerate(eval_set.instances):
        if not pattern.split():
            log.warning("skipping instance %d with empty pattern", n)
            continue
        for m, rel in enumerate(eval_set.relations):
            scores[n, m] = scorer.sim(pattern, rel)
    return scores


def tune_thresholds(eval_set, scores):
    """Per-relation threshold maximizing that relation's validation F1.

    The sweep runs over the observed score grid; F1 ties pick the lower
    threshold (higher recall). Relations absent from the validation gold
    get +inf (never fire)."""
    thresholds = {}
    for m, rel in enumerate(eval_set.relations):
        gold = np.array([rel in g for (_, _, g) in eval_set.instances])
        col = scores[:, m]
        if not gold.any():
            log.warning("relation %s has no validation instances; "
                        "threshold set to +inf", rel)
            thresholds[rel] = np.inf
            continue
        best_f1, best_t = -1.0, np.inf
        for t in sorted(set(col[np.isfinite(col)])):
            pred = col >= t
            tp = int((pred & gold).sum())
            fp = int((pred & ~gold).sum())
            fn = int((~pred & gold).sum())
            f1 = PRF.from_counts(tp, fp, fn).f1
            if f1 > best_f1 + 1e-15 or (abs(f1 - best_f1) <= 1e-15 and t < best_t):
                best_f1, best_t = f1, t
        thresholds[rel] = best_t
    return thresholds


def evaluate_re(eval_set, scores, thresholds):
    """Micro-averaged precision/recall/F1 over (instance, relation)
    decisions: predict a relation when its Sim clears its threshold."""
    tp = fp = fn = 0
    for n, (_pattern, _pair, gold) in enumerate(eval_set.instances):
        for m, rel in enumerate(eval_set.relations):
            predicted = scores[n, m] >= thresholds.get(rel, np.inf)
            actual = rel in gold
            if predicted and actual:
                tp += 1
            elif predicted:
                fp += 1
            elif actual:
                fn += 1
    return PRF.from_counts(tp, fp, fn)


def retrieval_average_precision(eval_set, scores):
    """Threshold-free ranking metric over all (instance, relation) cells."""
    gold = []
    flat = []
    for n, (_p, _e, g) in enumerate(eval_set.instances):
        for m, rel in enumerate(eval_set.relations):
            gold.append(rel in g)
            flat.append(scores[n, m])
    return average_precision(np.array(flat), np.array(gold, dtype=bool))


def average_precision(scores, relevant):
    """AP over the full descending ranking; ties keep stable input order."""
    n_pos = int(relevant.sum())
    if n_pos == 0:
        raise MfusError("average precision undefined with zero positives")
    order = np.argsort(-scores, kind="stable")
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, 1):
        if relevant[idx]:
            hits += 1
            total += hits / rank
    return total / n_pos


def evaluate_entailment(candidates, pair_scores):
    """Classification AP over asym(premise, hypothesis) scores plus
    micro/macro direction accuracy on the gold-entailment pairs.

    ``pair_scores`` aligns with ``candidates``; direction credit is 1 for
    predicting the stored premise, 0.5 for a tie, 0 otherwise; macro
    averages the per-replacing-word accuracies.
    """
    if len(candidates) != len(pair_scores):
        raise ConfigError("candidates and scores are misaligned")
    labeled = [(c, s) for c, s in zip(candidates, pair_scores)
               if c.label != "unlabeled"]
    skipped = len(candidates) - len(labeled)
    if skipped:
        log.warning("ignoring %d unlabeled candidates", skipped)
    if not labeled:
        raise ConfigError("no labeled candidates to evaluate")
    clf_scores = np.array([s.asym_ij for _, s in labeled])
    relevant = np.array([c.label == "entailment" for c, _ in labeled])
    ap = average_precision(clf_scores, relevant)

    credits = []
    by_word = {}
    for cand, score in labeled:
        if cand.label != "entailment":
            continue
        if abs(score.ours_diff) < TIE_EPS:
            credit = 0.5
        elif score.ours_diff > 0:
            credit = 1.0
        else:
            credit = 0.0
        credits.append(credit)
        by_word.setdefault(cand.replacing_word.lower(), []).append(credit)
    micro = float(np.sum(credits) / len(credits)) if credits else 0.0
    macro = float(np.mean([np.sum(v) / len(v) for v in by_word.values()])) \
        if by_word else 0.0
    return EntailEvalReport(
        ap_at_all=float(ap), micro_direction_acc=micro,
        macro_direction_acc=macro, n_positive=int(relevant.sum()),
        n_negative=int((~relevant).sum()))


# ---------------------------------------------------------------------------
# classical MDS projection
# ---------------------------------------------------------------------------

@dataclass
class MdsPoint:
    label: str
    kind: str                  # facet | relation_facet | entity
    x: float
    y: float


def classical_mds(points):
    """Double-center the squared-distance Gram matrix and take the top two
    eigenvectors scaled by the square roots of their eigenvalues."""
    n = len(points)
    sq = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    j = np.eye(n) - np.ones((n, n)) / n
    b = -0.5 * j @ sq @ j
    evals, evecs = np.linalg.eigh(b)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    coords = np.zeros((n, 2))
    usable = 0
    for axis in range(2):
        if axis < len(evals) and evals[axis] > 1e-12:
            coords[:, axis] = evecs[:, axis] * np.sqrt(evals[axis])
            usable += 1
    if usable < 2:
        log.warning("distance Gram matrix has rank < 2; padding with zeros")
    return coords


def project_mds(facet_items, entity_items, min_degree=5, far_threshold=None,
                jitter_eps=0.0, seed=0):
    """Project facets and entity embeddings to 2-D.

    ``facet_items``: (label, kind, vector); ``entity_items``:
    (label, vector, degree). Entities below ``min_degree`` are dropped
    before projection; after projection, entities farther than
    ``far_threshold`` (default: the 90th percentile) from every facet are
    dropped; facet coordinates then get a seeded uniform jitter.
    """
    kept_entities = [(label, vec) for label, vec, deg in entity_items
                     if deg >= min_degree]
    n_facets = len(facet_items)
    vectors = [np.asarray(v, dtype=np.float64) for _, _, v in facet_items]
    vectors += [np.asarray(v, dtype=np.float64) for _, v in kept_entities]
    if len(vectors) < 3:
        raise ConfigError("projection needs at least 3 points")
    coords = classical_mds(np.stack(vectors))

    facet_xy = coords[:n_facets]
    entity_xy = coords[n_facets:]
    keep = np.ones(len(entity_xy), dtype=bool)
    if len(entity_xy) and n_facets:
        dists = np.sqrt(
            ((entity_xy[:, None, :] - facet_xy[None, :, :]) ** 2).sum(axis=2)
        ).min(axis=1)
        cut = np.percentile(dists, 90) if far_threshold is None else far_threshold
        keep = dists <= cut

    rng = np.random.default_rng(seed)
    jitter = rng.uniform(-jitter_eps, jitter_eps, size=(n_facets, 2)) \
        if jitter_eps > 0 else np.zeros((n_facets, 2))

    points = []
    for (label, kind, _), xy, dxy in zip(facet_items, facet_xy, jitter):
        points.append(MdsPoint(label=label, kind=kind,
                               x=float(xy[0] + dxy[0]), y=float(xy[1] + dxy[1])))
    for (label, _), xy, ok in zip(kept_entities, entity_xy, keep):
        if ok:
            points.append(MdsPoint(label=label, kind="entity",
                                   x=float(xy[0]), y=float(xy[1])))
    return points


def write_mds_csv(points, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "kind", "x", "y"])
        for p in points:
            writer.writerow([p.label, p.kind, repr(p.x), repr(p.y)])
