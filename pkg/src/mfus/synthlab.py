"""Synthetic ground-truth generator and brute-force oracles.

The generator builds a world of F well-separated relation prototypes,
entity pairs clustered around them, and patterns whose token sequences
encode a subset of the relations (their facet set). Positives link each
pattern to entity pairs sampled from its facet clusters, so multi-facet
structure is present by construction and retrieval/entailment metrics
become falsifiable tests of the scoring rules rather than of the data.
"""

import json
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from .corpus import matrix_from_records
from .entailgen import EntailmentCandidate
from .errors import ConfigError
from .evalkit import REEvalSet

ARG1 = "$ARG1"
ARG2 = "$ARG2"


@dataclass
class SynthSpec:
    n_relations: int = 4                 # latent relation count
    dim: int = 16
    patterns_per_subset: int = 4
    facet_sizes: tuple = (1, 2, 2, 3)    # sizes of relation subsets used
    entity_pairs_per_relation: int = 30
    noise: float = 0.12
    pairs_per_facet: tuple = (2, 4)      # inclusive sampling range
    general_boost: int = 1               # extra pairs per missing facet
    relation_pairs_observed: int = 12    # KB-row co-occurrences per relation
    eval_patterns_per_subset: int = 6
    n_entailment_pairs: int = 24
    n_other_pairs: int = 12
    synonyms_per_relation: int = 3
    distractor_tokens: int = 8
    prototype_correlation: float = 0.25  # pairwise cosine; must stay < 0.3
    max_prototype_cosine: float = 0.3
    seed: int = 0


@dataclass
class SynthResult:
    matrix: object
    truth: dict
    re_validation: REEvalSet
    re_test: REEvalSet
    entailment_candidates: list
    word_vectors: dict = field(default_factory=dict)

    def relation_names(self):
        return sorted(self.truth["relation_names"])


def _sample_prototypes(rng, f, dim, correlation, max_cos):
    """Unit prototypes with pairwise cosine exactly ``correlation``.

    Built as alpha * shared + sqrt(1 - alpha^2) * v_f over a random
    orthonormal frame, so the separation is controlled, not sampled.
    """
    if not (0.0 <= correlation < max_cos):
        raise ConfigError(
            f"prototype correlation {correlation} must lie in [0, {max_cos})")
    if f + 1 > dim:
        raise ConfigError(f"need dim >= {f + 1} for {f} correlated prototypes")
    basis, _ = np.linalg.qr(rng.standard_normal((dim, f + 1)))
    shared = basis[:, 0]
    alpha = np.sqrt(correlation)
    protos = alpha * shared[None, :] \
        + np.sqrt(1.0 - alpha ** 2) * basis[:, 1:].T
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def _pattern_tokens(rng, subset, synonyms, distractors):
    middle = [synonyms[f][rng.integers(len(synonyms[f]))] for f in subset]
    n_extra = int(rng.integers(1, 3))
    for _ in range(n_extra):
        middle.append(distractors[rng.integers(len(distractors))])
    rng.shuffle(middle)
    return tuple([ARG1] + middle + [ARG2])


def generate(spec):
    """Build the corpus, ground-truth maps, retrieval eval sets, and gold
    entailment pairs. Deterministic per seed."""
    if spec.n_relations < 2:
        raise ConfigError("need at least 2 latent relations")
    if spec.dim < spec.n_relations:
        raise ConfigError("dim must be at least the relation count")
    if max(spec.facet_sizes) > spec.n_relations:
        raise ConfigError("facet size exceeds available relations")
    rng = np.random.default_rng(spec.seed)

    protos = _sample_prototypes(rng, spec.n_relations, spec.dim,
                                spec.prototype_correlation,
                                spec.max_prototype_cosine)
    # entity pairs clustered around their relation's prototype
    pair_names, pair_vectors, pair_relation = [], [], {}
    pools = {}
    for f in range(spec.n_relations):
        pools[f] = []
        for n in range(spec.entity_pairs_per_relation):
            name = f"ep_r{f}_{n}"
            vec = protos[f] + spec.noise * rng.standard_normal(spec.dim)
            vec /= np.linalg.norm(vec)
            pair_names.append(name)
            pair_vectors.append(vec)
            pair_relation[name] = f
            pools[f].append(name)

    synonyms = {f: [f"r{f}w{s}" for s in range(spec.synonyms_per_relation)]
                for f in range(spec.n_relations)}
    distractors = [f"d{k}" for k in range(spec.distractor_tokens)]

    subsets = []
    for size in spec.facet_sizes:
        subsets.extend(combinations(range(spec.n_relations), size))

    f_max = max(spec.facet_sizes)
    records = []
    pattern_facets = {}
    eval_patterns = []            # (text, subset, "validation"|"test")
    seen_texts = set()

    def fresh_pattern(subset):
        for _ in range(200):
            tokens = _pattern_tokens(rng, subset, synonyms, distractors)
            if tokens not in seen_texts:
                seen_texts.add(tokens)
                return tokens
        raise ConfigError("token space exhausted; increase distractor_tokens")

    for subset in subsets:
        for _ in range(spec.patterns_per_subset):
            tokens = fresh_pattern(subset)
            text = " ".join(tokens)
            pattern_facets[text] = set(subset)
            boost = spec.general_boost * (f_max - len(subset))
            for f in subset:
                lo, hi = spec.pairs_per_facet
                count = int(rng.integers(lo, hi + 1)) + boost
                count = min(count, len(pools[f]))
                chosen = rng.choice(len(pools[f]), size=count, replace=False)
                for c in chosen:
                    records.append(("P", text, pools[f][int(c)]))
        for n in range(spec.eval_patterns_per_subset):
            tokens = fresh_pattern(subset)
            side = "validation" if n % 2 == 0 else "test"
            eval_patterns.append((" ".join(tokens), subset, side))

    relation_names = []
    for f in range(spec.n_relations):
        rel = f"rel:{f}"
        relation_names.append(rel)
        chosen = rng.choice(len(pools[f]),
                            size=min(spec.relation_pairs_observed, len(pools[f])),
                            replace=False)
        for c in chosen:
            records.append(("R", rel, pools[f][int(c)]))

    matrix = matrix_from_records(records)

    # retrieval eval sets over held-out patterns
    def eval_set(side):
        instances = []
        for text, subset, s in eval_patterns:
            if s != side:
                continue
            f = subset[int(rng.integers(len(subset)))]
            pair = pools[f][int(rng.integers(len(pools[f])))]
            gold = frozenset(f"rel:{g}" for g in subset)
            instances.append((text, pair, gold))
        return REEvalSet(instances=instances, relations=list(relation_names))

    re_validation = eval_set("validation")
    re_test = eval_set("test")

    # entailment pairs: general facet set strictly contained in specific's
    texts = list(pattern_facets)
    nested = []
    for spec_text in texts:
        for gen_text in texts:
            fs, fg = pattern_facets[spec_text], pattern_facets[gen_text]
            if fg < fs:
                nested.append((spec_text, gen_text))
    rng.shuffle(nested)
    # prefer pairs whose general side has few facets: the asymmetry the
    # scorer must detect is largest there
    nested.sort(key=lambda p: len(pattern_facets[p[1]]))
    freq_by_text = {matrix.rows[i].text: int(matrix.pattern_freq[i])
                    for i in matrix.pattern_row_ids()}
    candidates = []
    for spec_text, gen_text in nested[: spec.n_entailment_pairs]:
        extra = sorted(pattern_facets[spec_text] - pattern_facets[gen_text])
        fp, fh = freq_by_text[spec_text], freq_by_text[gen_text]
        candidates.append(EntailmentCandidate(
            premise=spec_text, hypothesis=gen_text,
            replaced_word=f"xr{extra[0]}",
            replacing_word="hyp_" + "_".join(
                str(f) for f in sorted(pattern_facets[gen_text])),
            freq_premise=fp, freq_hypothesis=fh,
            candidate_freq=min(fp, fh), split="test", label="entailment"))

    disjoint = []
    for a in texts:
        for b in texts:
            if a < b and not (pattern_facets[a] & pattern_facets[b]):
                disjoint.append((a, b))
    rng.shuffle(disjoint)
    for a, b in disjoint[: spec.n_other_pairs]:
        candidates.append(EntailmentCandidate(
            premise=a, hypothesis=b, replaced_word="none",
            replacing_word="none", freq_premise=freq_by_text[a],
            freq_hypothesis=freq_by_text[b],
            candidate_freq=min(freq_by_text[a], freq_by_text[b]),
            split="test", label="other"))

    # word vectors correlated with the prototypes, like real pretrained
    # embeddings of relation-bearing words; placeholders get none
    word_vectors = {}
    for f in range(spec.n_relations):
        for tok in synonyms[f]:
            vec = protos[f] + 0.15 * rng.standard_normal(spec.dim)
            word_vectors[tok] = vec / np.linalg.norm(vec)
        word_vectors[f"rel:{f}"] = protos[f].copy()
    for tok in distractors:
        vec = rng.standard_normal(spec.dim)
        word_vectors[tok] = vec / (np.linalg.norm(vec) * 3.0)

    truth = {
        "relation_names": relation_names,
        "prototypes": protos.tolist(),
        "pattern_facets": {t: sorted(fs) for t, fs in pattern_facets.items()},
        "eval_pattern_facets": {t: sorted(s) for t, s, _ in eval_patterns},
        "entity_relation": pair_relation,
        "entity_vectors": {n: v.tolist()
                           for n, v in zip(pair_names, pair_vectors)},
    }
    return SynthResult(matrix=matrix, truth=truth, re_validation=re_validation,
                       re_test=re_test, entailment_candidates=candidates,
                       word_vectors=word_vectors)


def write_embedding_file(word_vectors, path):
    with open(path, "w", encoding="utf-8") as fh:
        for token, vec in word_vectors.items():
            values = " ".join(repr(float(v)) for v in vec)
            fh.write(f"{token} {values}\n")


def write_truth(truth, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
        fh.write("\n")


def spec_from_json(path):
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    known = {f.name for f in SynthSpec.__dataclass_fields__.values()}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
    if "facet_sizes" in raw:
        raw["facet_sizes"] = tuple(raw["facet_sizes"])
    if "pairs_per_facet" in raw:
        raw["pairs_per_facet"] = tuple(raw["pairs_per_facet"])
    return SynthSpec(**raw)


def spec_to_json(spec, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(asdict(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# brute-force oracles
# ---------------------------------------------------------------------------

def oracle_eta_grid(facets, entity, grid=1e-3):
    """Exhaustive reference for the clamped-projection distance: scan eta
    over {0, grid, ..., 1} per facet and take the overall minimum.

    Returns (D, k_best, eta_star).
    """
    facets = np.asarray(facets, dtype=np.float64)
    entity = np.asarray(entity, dtype=np.float64)
    e_unit = entity / np.linalg.norm(entity)
    etas = np.arange(0.0, 1.0 + grid / 2, grid)
    dots = facets @ e_unit                       # (K,)
    ns = np.einsum("kd,kd->k", facets, facets)   # (K,)
    # D(eta, k) = 1 - 2 eta dot_k + eta^2 ns_k
    dist = 1.0 - 2.0 * etas[:, None] * dots[None, :] \
        + (etas ** 2)[:, None] * ns[None, :]
    flat = np.argmin(dist)
    g_idx, k_best = np.unravel_index(flat, dist.shape)
    return float(dist[g_idx, k_best]), int(k_best), float(etas[g_idx])


def oracle_spherical_kmeans(points, k, restarts=8, seed=0, iters=100):
    """Best-of-restarts Lloyd's iterations with cosine assignment on
    unit-normalized points. Returns (k, d) unit centers."""
    points = np.asarray(points, dtype=np.float64)
    if k > len(points):
        raise ConfigError(f"k={k} exceeds {len(points)} points")
    points = points / np.linalg.norm(points, axis=1, keepdims=True)
    rng = np.random.default_rng(seed)
    best_centers, best_obj = None, np.inf
    for _ in range(restarts):
        centers = points[rng.choice(len(points), size=k, replace=False)].copy()
        assign = None
        for _ in range(iters):
            cos = points @ centers.T
            new_assign = np.argmax(cos, axis=1)
            if assign is not None and (new_assign == assign).all():
                break
            assign = new_assign
            for c in range(k):
                members = points[assign == c]
                if len(members) == 0:
                    centers[c] = points[rng.integers(len(points))]
                    continue
                mean = members.mean(axis=0)
                norm = np.linalg.norm(mean)
                if norm > 1e-12:
                    centers[c] = mean / norm
        obj = float((1.0 - (points @ centers.T).max(axis=1)).sum())
        if obj < best_obj:
            best_obj, best_centers = obj, centers.copy()
    return best_centers
