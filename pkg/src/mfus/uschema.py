"""Lookup-table factorization baseline.

Each row (pattern or KB relation) gets one free embedding, trained with a
logistic loss over observed co-occurrences and sampled negatives. Used to
initialize the entity-pair table of the neural model, as a comparison
system, and inside the max-merge ensemble.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import corpus as corpus_mod
from .errors import ConfigError
from .model import ModelConfig, ModelParams, load_checkpoint, save_checkpoint
from .embed import Vocabulary
from . import numcore as nc

log = logging.getLogger(__name__)


@dataclass
class FactorModel:
    rows: np.ndarray        # I x d
    cols: np.ndarray        # J x d

    @property
    def dim(self):
        return self.rows.shape[1]

    def pair_score(self, i, j):
        return float(self.rows[i] @ self.cols[j])

    def row_cosine(self, i, j):
        a, b = self.rows[i], self.rows[j]
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def train_uschema(matrix, d, epochs=30, lr=0.3, negatives_per_positive=1,
                  seed=0, row_subset=None, batch_size=32):
    """Factorize the co-occurrence matrix with logistic loss, per-epoch
    sampled negatives, and minibatch SGD. Deterministic for a fixed seed."""
    if d <= 0:
        raise ConfigError(f"embedding dim must be positive, got {d}")
    seed_seq = seed if isinstance(seed, np.random.SeedSequence) \
        else np.random.SeedSequence(seed)
    rng = np.random.default_rng(seed_seq)
    rows = rng.standard_normal((matrix.n_rows, d)) * 0.1
    cols = rng.standard_normal((matrix.n_cols, d)) * 0.1
    positives = [p for p in matrix.positives
                 if row_subset is None or p[0] in row_subset]
    epoch_seeds = seed_seq.spawn(epochs)
    for epoch in range(epochs):
        negatives = corpus_mod.draw_negatives(
            matrix, positives, epoch_seeds[epoch],
            allowed_rows=row_subset, per_positive=negatives_per_positive)
        samples = [(i, j, 1) for i, j in positives] + negatives
        order = rng.permutation(len(samples))
        for start in range(0, len(order), batch_size):
            chunk = order[start: start + batch_size]
            i_idx = np.array([samples[n][0] for n in chunk], dtype=np.int64)
            j_idx = np.array([samples[n][1] for n in chunk], dtype=np.int64)
            sign = np.array([2.0 * samples[n][2] - 1.0 for n in chunk])
            x = np.einsum("nd,nd->n", rows[i_idx], cols[j_idx])
            # d/dx of -log sigmoid(sign * x)
            gx = -sign * _sigmoid(-sign * x)
            grad_rows = np.zeros_like(rows)
            grad_cols = np.zeros_like(cols)
            np.add.at(grad_rows, i_idx, gx[:, None] * cols[j_idx])
            np.add.at(grad_cols, j_idx, gx[:, None] * rows[i_idx])
            scale = lr / len(chunk)
            rows -= scale * grad_rows
            cols -= scale * grad_cols
    return FactorModel(rows=rows, cols=cols)


def init_entities_from_uschema(fm, table):
    """Copy factorization entity embeddings into the (trainable) table."""
    if fm.cols.shape[0] != len(table):
        raise ConfigError(
            f"factor model has {fm.cols.shape[0]} entity pairs, table {len(table)}")
    table.attach_embeddings(fm.cols.copy())


def ensemble_max(score_a, score_b):
    """Merge two similarity scores by taking the larger one."""
    return np.maximum(score_a, score_b)


def reconstruction_auc(fm, matrix):
    """Exact AUC of positive cells vs all negative cells under p_i . e_j."""
    scores = fm.rows @ fm.cols.T
    pos_mask = np.zeros_like(scores, dtype=bool)
    for i, j in matrix.positives:
        pos_mask[i, j] = True
    pos = scores[pos_mask]
    neg = scores[~pos_mask]
    if len(pos) == 0 or len(neg) == 0:
        raise ConfigError("AUC needs both positive and negative cells")
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (greater + 0.5 * ties) / (len(pos) * len(neg))


_CKPT_PREFIX = "uschema."


def save_factor_model(fm, path, entity_names=None):
    tensors = {
        _CKPT_PREFIX + "rows": nc.param(fm.rows),
        _CKPT_PREFIX + "cols": nc.param(fm.cols),
    }
    cfg = ModelConfig(d_model=fm.dim, heads=1, K=1, K_rel=1)
    params = ModelParams(tensors, Vocabulary(), list(entity_names or []))
    save_checkpoint(params, cfg, path, extra={"kind": "uschema"})


def load_factor_model(path):
    params, _cfg = load_checkpoint(path)
    return FactorModel(rows=params.tensors[_CKPT_PREFIX + "rows"].data,
                       cols=params.tensors[_CKPT_PREFIX + "cols"].data)
