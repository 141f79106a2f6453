"""Vocabulary, pretrained word embeddings, corpus word frequencies, and the
smoothed-inverse-frequency (SIF) weighted pattern averages that feed the
reconstruction regularizer."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import ARG1, ARG2, RowKind
from .errors import EmptyInputError, MfusError, ParseError, ShapeError
from .numcore import Tensor

log = logging.getLogger(__name__)

EOS = "<eos>"
UNK = "<unk>"
SPECIAL_TOKENS = (EOS, UNK, ARG1, ARG2)


@dataclass
class Vocabulary:
    index: dict = field(default_factory=dict)
    tokens: list = field(default_factory=list)

    def __post_init__(self):
        for tok in SPECIAL_TOKENS:
            self.add(tok)

    def __len__(self):
        return len(self.tokens)

    def add(self, token):
        if token not in self.index:
            self.index[token] = len(self.tokens)
            self.tokens.append(token)
        return self.index[token]

    def get(self, token):
        """Index of ``token``, falling back to <unk>."""
        return self.index.get(token, self.index[UNK])

    def encode(self, tokens, append_eos=False):
        ids = [self.get(t) for t in tokens]
        if append_eos:
            ids.append(self.index[EOS])
        return np.asarray(ids, dtype=np.int64)

    @classmethod
    def from_matrix(cls, matrix):
        vocab = cls()
        for row in matrix.rows:
            for tok in row.tokens:
                vocab.add(tok)
        return vocab


@dataclass
class PretrainedEmbeddings:
    matrix: np.ndarray            # V x d_word, rows aligned with the vocabulary
    coverage: float
    dim: int


def _random_row(rng, dim):
    # uniform in [-1/sqrt(d), 1/sqrt(d)] guarantees norm <= 1
    bound = 1.0 / np.sqrt(dim)
    return rng.uniform(-bound, bound, size=dim)


def load_embedding_file(path, vocab, seed=0):
    """Read a whitespace-separated ``token v1 .. vd`` file.

    Lookup order per vocabulary token: exact case, then lowercase, then a
    seeded random vector with norm <= 1. An optional first line ``V d``
    (two integers) is treated as a header and skipped.
    """
    file_rows = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2:
                try:
                    int(parts[0]), int(parts[1])
                    continue  # header
                except ValueError:
                    pass
            token, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
                if dim == 0:
                    raise ParseError("embedding line has no values", line=lineno)
            elif len(values) != dim:
                raise ParseError(
                    f"inconsistent dimension {len(values)} != {dim}", line=lineno)
            try:
                vec = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError:
                raise ParseError("non-numeric embedding value", line=lineno) from None
            if token not in file_rows:  # first occurrence wins within the file
                file_rows[token] = vec
    if dim is None:
        raise EmptyInputError(f"embedding file {path} has no vectors")

    lowered = {}
    for token, vec in file_rows.items():
        lowered.setdefault(token.lower(), vec)

    rng = np.random.default_rng(seed)
    matrix = np.empty((len(vocab), dim), dtype=np.float64)
    found = 0
    for idx, token in enumerate(vocab.tokens):
        if token in file_rows:
            matrix[idx] = file_rows[token]
            found += 1
        elif token.lower() in lowered:
            matrix[idx] = lowered[token.lower()]
            found += 1
        else:
            matrix[idx] = _random_row(rng, dim)
    coverage = found / len(vocab)
    log.info("loaded %d-dim embeddings, coverage %.1f%% of %d tokens",
             dim, 100.0 * coverage, len(vocab))
    return PretrainedEmbeddings(matrix=matrix, coverage=coverage, dim=dim)


def random_embeddings(vocab, dim, seed=0):
    """All-random stand-in used when no pretrained file is given."""
    rng = np.random.default_rng(seed)
    matrix = np.stack([_random_row(rng, dim) for _ in vocab.tokens])
    return PretrainedEmbeddings(matrix=matrix, coverage=0.0, dim=dim)


@dataclass
class WordStats:
    """Token frequencies over the training-split patterns (each counted once)."""

    p: dict
    nu: float = 1e-4

    @classmethod
    def fit(cls, matrix, train_rows=None, nu=1e-4):
        counts = {}
        total = 0
        seen_texts = set()
        for row in matrix.rows:
            if row.kind is not RowKind.PATTERN:
                continue
            if train_rows is not None and row.id not in train_rows:
                continue
            if row.tokens in seen_texts:
                continue
            seen_texts.add(row.tokens)
            for tok in row.tokens:
                counts[tok] = counts.get(tok, 0) + 1
                total += 1
        if total == 0:
            raise EmptyInputError("no training pattern tokens to fit WordStats")
        return cls(p={t: c / total for t, c in counts.items()}, nu=nu)

    def weight(self, token):
        """SIF weight nu/(nu + p); unseen tokens (p=0) get weight 1."""
        return self.nu / (self.nu + self.p.get(token, 0.0))


def sif_average(tokens, vocab, pretrained, stats):
    """Weighted average of pretrained word vectors for a pattern.

    The appended <eos> is never part of ``tokens`` here; the average runs
    over the pattern's own words only.
    """
    if not tokens:
        raise MfusError("cannot SIF-average an empty pattern")
    acc = np.zeros(pretrained.dim, dtype=np.float64)
    for tok in tokens:
        acc += stats.weight(tok) * pretrained.matrix[vocab.get(tok)]
    return acc


@dataclass
class SifEmbedding:
    """A pattern's SIF word average, before and after the trainable map."""

    s_aw: np.ndarray
    s_aw_mapped: np.ndarray = None


def apply_H(s_aw, H):
    """Map a word-space average into the facet/entity space: H @ s_aw.

    ``H`` may be a Tensor (training; gradients flow) or a plain array.
    """
    d_word = H.shape[1]
    if s_aw.shape[-1] != d_word:
        raise ShapeError(
            f"H expects word dim {d_word}, got vector of {s_aw.shape[-1]}")
    if isinstance(H, Tensor):
        vec = s_aw if isinstance(s_aw, Tensor) else Tensor(s_aw)
        return H @ vec
    return H @ np.asarray(s_aw)


def sif_table(matrix, vocab, pretrained, stats):
    """Precompute the word-space SIF average for every row.

    KB relation rows average over their single relation token.
    """
    return np.stack([
        sif_average(row.tokens, vocab, pretrained, stats)
        for row in matrix.rows
    ])
