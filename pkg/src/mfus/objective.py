"""Training objective: the clamped-projection distance between a row's
facet set and a normalized entity-pair embedding, the weighted
positive/negative co-occurrence loss built on it, and the SIF-autoencoder
regularizer that reconstructs each pattern's word average from the mean of
its facets."""

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .corpus import RowKind
from .errors import InvariantError
from .model import FacetSet, facets_for_tokens
from .numcore import Tensor

_DEGENERATE_NORM_SQ = 1e-24   # ||s||^2 below this treats the facet as eta=0


@dataclass
class DistanceResult:
    D: float
    k_best: int
    eta: np.ndarray


@dataclass
class RegConfig:
    gamma: float = 0.2
    nu: float = 1e-4
    enabled: bool = True
    include_relations: bool = True

    @property
    def active(self):
        return self.enabled and self.gamma != 0.0


def _facet_values(facets):
    if isinstance(facets, FacetSet):
        return facets.values()
    if isinstance(facets, Tensor):
        return facets.data
    return np.asarray(facets, dtype=np.float64)


def facet_distance(facets, entity):
    """Closed-form distance of one entity embedding to a facet set.

    eta_k = clamp(e~ . s_k / ||s_k||^2, 0, 1); D_k = ||e~ - eta_k s_k||^2
    evaluated as 1 - 2 eta dot + eta^2 ||s||^2; the winning facet is the
    argmin, ties to the lowest index. Zero-norm facets contribute the
    orthogonal-limit distance 1 rather than an error.
    """
    s = _facet_values(facets)
    e = entity.data if isinstance(entity, Tensor) else np.asarray(entity)
    norm_e = np.linalg.norm(e)
    if norm_e < 1e-12:
        raise InvariantError("entity embedding has near-zero norm")
    e_unit = e / norm_e
    ns = np.einsum("kd,kd->k", s, s)
    dots = s @ e_unit
    degenerate = ns < _DEGENERATE_NORM_SQ
    safe_ns = np.where(degenerate, 1.0, ns)
    eta = np.clip(dots / safe_ns, 0.0, 1.0)
    eta[degenerate] = 0.0
    dist = 1.0 - 2.0 * eta * dots + eta * eta * ns
    dist = np.clip(dist, 0.0, 1.0)
    k_best = int(np.argmin(dist))
    return DistanceResult(D=float(dist[k_best]), k_best=k_best, eta=eta)


def distance_terms(facets, entities):
    """Autograd path: distances of a batch of entity rows to one facet set.

    Returns a (M,) tensor of D values. Gradients flow through the entity
    normalization and, via the closed-form eta, into the selected facet
    only; the clamp contributes subgradient 0 at its boundaries.
    """
    fac = facets.facets if isinstance(facets, FacetSet) else facets
    if (np.linalg.norm(entities.data, axis=1) < 1e-12).any():
        raise InvariantError("entity embedding has near-zero norm")
    norms = nc.sqrt((entities * entities).sum(axis=1, keepdims=True))
    e_unit = entities / norms                      # (M, d)
    dots = e_unit @ fac.T                          # (M, K)
    ns = (fac * fac).sum(axis=1)                   # (K,)
    live = (ns.data >= _DEGENERATE_NORM_SQ).astype(np.float64)
    safe_ns = ns + Tensor(1.0 - live)              # avoids 0/0 on dead facets
    eta = nc.clamp01(dots / safe_ns) * Tensor(live)
    dist = 1.0 - 2.0 * eta * dots + eta * eta * safe_ns * Tensor(live)
    best = np.argmin(dist.data, axis=1)            # ties: lowest k
    onehot = np.zeros(dist.shape)
    onehot[np.arange(len(best)), best] = 1.0
    return (dist * Tensor(onehot)).sum(axis=1)


def relational_loss(batch, facet_fn, entity_table):
    """Sum of (2y-1) * r * D over the batch's samples.

    ``facet_fn`` maps a row id to its FacetSet (computed once per row);
    ``entity_table`` is the trainable (J, d) tensor.
    """
    grouped = group_samples(batch.entries)
    total = None
    for i, samples in grouped.items():
        facets = facet_fn(i)
        idx = np.array([j for (j, _, _) in samples], dtype=np.int64)
        coeff = np.array([(2.0 * y - 1.0) * r for (_, y, r) in samples])
        terms = distance_terms(facets, nc.embedding(entity_table, idx))
        contrib = (terms * Tensor(coeff)).sum()
        total = contrib if total is None else total + contrib
    if total is None:
        return Tensor(0.0)
    return total


def group_samples(entries):
    """Group (i, j, y, r) entries by row, preserving order."""
    grouped = {}
    for i, j, y, r in entries:
        grouped.setdefault(i, []).append((j, y, r))
    return grouped


def autoencoder_loss(facets_i, sif_mapped_i, sif_mapped_q, gamma):
    """gamma * (||H s_aw_i - mu||^2 - ||H s_aw_q - mu||^2) for the positive
    pair (i, i) and negative pair (i, q); mu is the mean facet embedding."""
    fac = facets_i.facets if isinstance(facets_i, FacetSet) else facets_i
    mu = fac.mean(axis=0, keepdims=True)
    pos = sif_mapped_i - mu
    neg = sif_mapped_q - mu
    return ((pos * pos).sum() - (neg * neg).sum()) * gamma


def map_sif(sif_aw_row, params):
    """H @ s_aw as a (1, d) tensor with gradient reaching H."""
    H = params.tensors["H"]
    return (Tensor(sif_aw_row[None, :]) @ H.T)


def training_step_loss(row_ids, batch, matrix, params, cfg, reg, sif_aw,
                       train=False, rng=None):
    """Loss of one batch of rows: relational terms for every sample whose
    row is in the batch, plus the per-row autoencoder pairs.

    Per-row losses are summed, not averaged, so a batch-size-1 sweep over
    the same samples yields the identical total.
    """
    grouped = group_samples(batch.entries)
    total = None
    for i in row_ids:
        row = matrix.rows[i]
        facets = facets_for_tokens(row.tokens, row.kind, params, cfg,
                                   train=train, rng=rng)
        contrib = None
        samples = grouped.get(i)
        if samples:
            idx = np.array([j for (j, _, _) in samples], dtype=np.int64)
            coeff = np.array([(2.0 * y - 1.0) * r for (_, y, r) in samples])
            terms = distance_terms(facets, nc.embedding(params.entity_table(), idx))
            contrib = (terms * Tensor(coeff)).sum()
        if reg.active and i in batch.auto_negatives and (
                row.kind is RowKind.PATTERN or reg.include_relations):
            q = batch.auto_negatives[i]
            omega = autoencoder_loss(
                facets,
                map_sif(sif_aw[i], params),
                map_sif(sif_aw[q], params),
                reg.gamma,
            )
            contrib = omega if contrib is None else contrib + omega
        if contrib is not None:
            total = contrib if total is None else total + contrib
    return Tensor(0.0) if total is None else total


def optimize_free_facets(points, k, iters=300, lr=0.2, seed=0):
    """Fit K free facet vectors (no encoder) to unit points by plain
    gradient descent on the positive-pair distance loss.

    This is the clustering view of the objective: each facet converges to
    a center of the points that select it.
    """
    points = np.asarray(points, dtype=np.float64)
    rng = np.random.default_rng(seed)
    init_idx = rng.choice(len(points), size=k, replace=False)
    facets = nc.param(points[init_idx] * 0.9)
    pts = Tensor(points)
    for _ in range(iters):
        loss = distance_terms(facets, pts).sum()
        facets.zero_grad()
        nc.backward(loss)
        facets.data = facets.data - lr * facets.grad
    return facets.data
