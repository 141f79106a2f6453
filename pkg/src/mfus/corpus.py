"""Sparse pattern-by-entity-pair co-occurrence matrix.

Ingests sentence patterns and KB relations from the CooccurTSV format
(``kind<TAB>text<TAB>entity_pair_id``, kind in {P, R}, ``#`` comments),
dedups repeated co-occurrences into binary positives, and derives the
per-column degrees, per-row frequencies, sample weights, negative samples
and the held-out validation split used during training.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, EmptyInputError, InvariantError, ParseError

log = logging.getLogger(__name__)

ARG1 = "$ARG1"
ARG2 = "$ARG2"


class RowKind(str, Enum):
    PATTERN = "P"
    KB_RELATION = "R"


@dataclass(frozen=True)
class SentencePattern:
    """One row of the merged matrix: a sentence pattern or a KB relation."""

    id: int
    tokens: tuple
    kind: RowKind

    @property
    def text(self):
        return " ".join(self.tokens)


@dataclass
class EntityPairTable:
    """Column identities; the trainable embedding matrix is attached later."""

    names: list
    embeddings: np.ndarray = None

    def __len__(self):
        return len(self.names)

    def attach_embeddings(self, emb):
        emb = np.asarray(emb, dtype=np.float64)
        if emb.shape[0] != len(self.names):
            raise ConfigError(
                f"embedding rows {emb.shape[0]} != entity pairs {len(self.names)}")
        norms = np.linalg.norm(emb, axis=1)
        if (norms <= 0).any():
            raise InvariantError("entity pair embeddings must have positive norm")
        self.embeddings = emb

    def normalized(self):
        norms = np.linalg.norm(self.embeddings, axis=1, keepdims=True)
        return self.embeddings / norms


@dataclass
class CooccurrenceMatrix:
    rows: list
    cols: EntityPairTable
    positives: list                      # (i, j) in first-seen order, deduped
    col_degree: np.ndarray
    pattern_freq: np.ndarray
    positive_set: frozenset = field(repr=False, default=None)

    def __post_init__(self):
        if self.positive_set is None:
            self.positive_set = frozenset(self.positives)

    @property
    def n_rows(self):
        return len(self.rows)

    @property
    def n_cols(self):
        return len(self.cols)

    def is_positive(self, i, j):
        return (i, j) in self.positive_set

    def positives_by_row(self):
        by_row = [[] for _ in range(self.n_rows)]
        for i, j in self.positives:
            by_row[i].append(j)
        return by_row

    def pattern_row_ids(self):
        return [r.id for r in self.rows if r.kind is RowKind.PATTERN]

    def relation_row_ids(self):
        return [r.id for r in self.rows if r.kind is RowKind.KB_RELATION]

    def row_by_text(self):
        return {(r.kind, r.text): r.id for r in self.rows}


@dataclass
class SampleBatch:
    """Weighted (row, column, label) samples for one epoch or batch.

    ``auto_negatives`` maps a row id to the randomly drawn pattern row used
    as the negative of its reconstruction-regularizer pair.
    """

    entries: list                        # (i, j, y, r)
    auto_negatives: dict = field(default_factory=dict)

    def mean_weight(self):
        return float(np.mean([r for (_, _, _, r) in self.entries]))


@dataclass
class SplitAssignment:
    train_rows: frozenset
    validation_rows: frozenset


def _build_matrix(records):
    """Intern rows/columns in first-sight order and dedup positives."""
    row_index = {}
    rows = []
    col_index = {}
    names = []
    positives = []
    seen = set()
    for lineno, kind_s, text, ep in records:
        if kind_s == "P":
            kind = RowKind.PATTERN
        elif kind_s == "R":
            kind = RowKind.KB_RELATION
        else:
            raise ParseError(f"unknown kind {kind_s!r}", line=lineno)
        tokens = tuple(text.split())
        if not tokens:
            raise ParseError("empty pattern text", line=lineno)
        if kind is RowKind.KB_RELATION and len(tokens) != 1:
            raise ParseError(
                f"KB relation rows must be a single token, got {text!r}", line=lineno)
        if not ep:
            raise ParseError("empty entity pair id", line=lineno)
        row_key = (kind, tokens)
        if row_key not in row_index:
            row_index[row_key] = len(rows)
            rows.append(SentencePattern(id=len(rows), tokens=tokens, kind=kind))
        if ep not in col_index:
            col_index[ep] = len(names)
            names.append(ep)
        pair = (row_index[row_key], col_index[ep])
        if pair not in seen:
            seen.add(pair)
            positives.append(pair)
    if not rows or not names:
        raise EmptyInputError("co-occurrence input has zero rows or zero columns")
    col_degree = np.zeros(len(names), dtype=np.int64)
    pattern_freq = np.zeros(len(rows), dtype=np.int64)
    for i, j in positives:
        col_degree[j] += 1
        pattern_freq[i] += 1
    return CooccurrenceMatrix(
        rows=rows,
        cols=EntityPairTable(names=names),
        positives=positives,
        col_degree=col_degree,
        pattern_freq=pattern_freq,
    )


def _parse_lines(lines):
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(
                f"expected 3 tab-separated fields, got {len(parts)}", line=lineno)
        yield (lineno, parts[0], parts[1], parts[2])


def load_cooccurrence(path):
    with open(path, encoding="utf-8") as fh:
        return _build_matrix(_parse_lines(fh))


def matrix_from_records(records):
    """Build a matrix from in-memory (kind, text, entity_pair) triples."""
    return _build_matrix(
        (lineno, k, t, e) for lineno, (k, t, e) in enumerate(records, 1))


def save_cooccurrence(matrix, path):
    """Write positives back out in first-seen order so a re-load reproduces
    row/column interning and positives exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, j in matrix.positives:
            row = matrix.rows[i]
            fh.write(f"{row.kind.value}\t{row.text}\t{matrix.cols.names[j]}\n")


def compute_weights(matrix, sample_set):
    """Attach balance weights r to (i, j, y) samples.

    r is inversely proportional to the positive column degree and rescaled
    so the batch mean is exactly 1; negatives use the same per-column
    denominator as positives.
    """
    raw = np.empty(len(sample_set), dtype=np.float64)
    for n, (i, j, y) in enumerate(sample_set):
        deg = matrix.col_degree[j]
        if deg <= 0:
            raise InvariantError(f"column {j} sampled with zero positive degree")
        raw[n] = 1.0 / deg
    scale = len(sample_set) / raw.sum()
    entries = [(i, j, y, float(r * scale))
               for (i, j, y), r in zip(sample_set, raw)]
    return SampleBatch(entries=entries)


def draw_negatives(matrix, positives_in_batch, rng_seed, allowed_rows=None,
                   per_positive=1):
    """For each positive (i, j): keep j, draw rows uniformly among those with
    y=0 in column j. Degenerate columns (positive everywhere) are skipped
    with a warning."""
    if matrix.n_rows < 2:
        raise InvariantError("need at least 2 rows to draw negatives")
    rng = np.random.default_rng(rng_seed)
    pool = np.asarray(sorted(allowed_rows), dtype=np.int64) \
        if allowed_rows is not None else np.arange(matrix.n_rows, dtype=np.int64)
    negatives = []
    for i, j in positives_in_batch:
        for _ in range(per_positive):
            picked = None
            for _ in range(32):  # rejection sampling; exact-uniform fallback below
                cand = int(pool[rng.integers(len(pool))])
                if not matrix.is_positive(cand, j):
                    picked = cand
                    break
            if picked is None:
                candidates = [int(r) for r in pool if not matrix.is_positive(r, j)]
                if not candidates:
                    log.warning(
                        "column %d is positive for every allowed row; "
                        "skipping a negative", j)
                    continue
                picked = candidates[rng.integers(len(candidates))]
            negatives.append((picked, j, 0))
    return negatives


def split_validation(matrix, fraction=0.05, rng_seed=0):
    """Hold out a fraction of the unique pattern texts.

    Duplicate texts land on the same side, so every validation pattern's
    token sequence is unseen among training rows. KB relation rows always
    stay in train.
    """
    if not (0.0 < fraction < 1.0):
        raise ConfigError(f"validation fraction must be in (0,1), got {fraction}")
    pattern_rows = matrix.pattern_row_ids()
    if len(pattern_rows) < 20:
        raise ConfigError(
            f"need at least 20 pattern rows to split, got {len(pattern_rows)}")
    by_text = {}
    for i in pattern_rows:
        by_text.setdefault(matrix.rows[i].tokens, []).append(i)
    texts = sorted(by_text.keys())
    rng = np.random.default_rng(rng_seed)
    rng.shuffle(texts)
    n_val_texts = max(1, round(fraction * len(texts)))
    val_rows = set()
    for text in texts[:n_val_texts]:
        val_rows.update(by_text[text])
    train_rows = (set(range(matrix.n_rows)) - val_rows)
    return SplitAssignment(train_rows=frozenset(train_rows),
                           validation_rows=frozenset(val_rows))


def save_split(split, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("[validation]\n")
        for i in sorted(split.validation_rows):
            fh.write(f"{i}\n")


def load_split(path, matrix):
    val = set()
    in_section = False
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line == "[validation]":
                in_section = True
                continue
            if not in_section:
                raise ParseError("row id before [validation] header", line=lineno)
            try:
                val.add(int(line))
            except ValueError:
                raise ParseError(f"bad row id {line!r}", line=lineno) from None
    train = set(range(matrix.n_rows)) - val
    return SplitAssignment(train_rows=frozenset(train), validation_rows=frozenset(val))
