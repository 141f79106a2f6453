"""Entailment candidate mining by hypernym substitution.

For every word of every corpus pattern, every hypernym lemma from the
lexicon is substituted in; when the substituted pattern also exists in the
corpus, the original (specific) and substituted (general) patterns become
a premise/hypothesis candidate. Candidates are filtered for mutual
hypernymy, ranked by hypothesis popularity, truncated, and split so the
test hypernyms are unseen in validation.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import ARG1, ARG2, RowKind
from .errors import ConfigError, ParseError

log = logging.getLogger(__name__)

LABELS = ("entailment", "paraphrase", "other", "unlabeled")
_NEVER_SUBSTITUTED = {ARG1, ARG2, "<eos>"}


@dataclass
class HypernymLexicon:
    entries: list                      # (lemma, synset, hyper_synset, hyper_lemma)
    hypers: dict = field(default_factory=dict)    # lemma.lower -> [hyper lemmas]
    pair_set: set = field(default_factory=set)    # (lemma.lower, hyper.lower)

    @classmethod
    def from_entries(cls, entries):
        lex = cls(entries=list(entries))
        for lemma, _syn, _hsyn, hyper in lex.entries:
            key = lemma.lower()
            bucket = lex.hypers.setdefault(key, [])
            if hyper not in bucket:
                bucket.append(hyper)
            lex.pair_set.add((key, hyper.lower()))
        return lex

    def hypernyms_of(self, word):
        return self.hypers.get(word.lower(), [])

    def is_mutual(self, replaced, replacing):
        a, b = replaced.lower(), replacing.lower()
        return (a, b) in self.pair_set and (b, a) in self.pair_set


def load_lexicon(path):
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(
                    f"expected 4 tab-separated fields, got {len(parts)}",
                    line=lineno)
            lemma, synset, hyper_synset, hyper = parts
            if not lemma or not hyper:
                raise ParseError("empty lemma field", line=lineno)
            if lemma.lower() == hyper.lower():
                raise ParseError(
                    f"self-loop entry {lemma!r} -> {hyper!r}", line=lineno)
            entries.append((lemma, synset, hyper_synset, hyper))
    return HypernymLexicon.from_entries(entries)


@dataclass
class EntailmentCandidate:
    premise: str                 # the original, more specific pattern
    hypothesis: str              # the pattern after hypernym substitution
    replaced_word: str
    replacing_word: str
    freq_premise: int
    freq_hypothesis: int
    candidate_freq: int
    split: str = ""
    label: str = "unlabeled"


@dataclass
class HypothesisGroup:
    hypothesis: str
    members: list                # candidates, freq-descending, max 6
    popularity: float


def mine_candidates(matrix, lexicon):
    """Emit a candidate for every hypernym substitution whose result is
    itself a corpus pattern. Placeholder tokens are never substituted;
    exact duplicates collapse."""
    pattern_rows = {}
    for row in matrix.rows:
        if row.kind is RowKind.PATTERN:
            pattern_rows[row.text] = row.id
    candidates = []
    seen = set()
    for row in matrix.rows:
        if row.kind is not RowKind.PATTERN:
            continue
        tokens = list(row.tokens)
        for pos, word in enumerate(tokens):
            if word in _NEVER_SUBSTITUTED:
                continue
            for hyper in lexicon.hypernyms_of(word):
                substituted = tokens.copy()
                substituted[pos] = hyper
                hyp_text = " ".join(substituted)
                if hyp_text == row.text or hyp_text not in pattern_rows:
                    continue
                key = (row.text, hyp_text, word, hyper)
                if key in seen:
                    continue
                seen.add(key)
                fp = int(matrix.pattern_freq[row.id])
                fh = int(matrix.pattern_freq[pattern_rows[hyp_text]])
                candidates.append(EntailmentCandidate(
                    premise=row.text, hypothesis=hyp_text,
                    replaced_word=word, replacing_word=hyper,
                    freq_premise=fp, freq_hypothesis=fh,
                    candidate_freq=min(fp, fh)))
    return candidates


def exclude_mutual(candidates, lexicon):
    """Drop candidates whose replaced word is simultaneously a hypernym and
    a hyponym of the replacing word (paraphrases, not entailment)."""
    return [c for c in candidates
            if not lexicon.is_mutual(c.replaced_word, c.replacing_word)]


def rank_and_select(candidates, n=1500):
    """Group by hypothesis, keep the 6 highest-frequency premises per group,
    rank groups by mean kept frequency, and emit candidates in group order
    until ``n`` are collected. Ties break lexicographically."""
    if n <= 0:
        raise ConfigError(f"selection size must be positive, got {n}")
    by_hyp = {}
    for cand in candidates:
        by_hyp.setdefault(cand.hypothesis, []).append(cand)
    groups = []
    for hyp, members in by_hyp.items():
        members = sorted(members, key=lambda c: (-c.candidate_freq, c.premise))[:6]
        popularity = float(np.mean([c.candidate_freq for c in members]))
        groups.append(HypothesisGroup(hypothesis=hyp, members=members,
                                      popularity=popularity))
    groups.sort(key=lambda g: (-g.popularity, g.hypothesis))
    selected = []
    for group in groups:
        for cand in group.members:
            if len(selected) >= n:
                return selected, groups
            selected.append(cand)
    return selected, groups


def split_by_hypernym(selected, val_fraction=0.2, rng_seed=0):
    """Assign whole replacing-word groups to validation until it holds at
    least ``val_fraction`` of the candidates; everything else is test, so
    no replacing word straddles the two."""
    total = len(selected)
    by_word = {}
    for cand in selected:
        by_word.setdefault(cand.replacing_word.lower(), []).append(cand)
    words = sorted(by_word)
    rng = np.random.default_rng(rng_seed)
    rng.shuffle(words)
    target = val_fraction * total
    if by_word and len(by_word[words[0]]) > (1.0 - val_fraction) * total:
        log.warning("hypernym %r covers most candidates; split is best-effort",
                    words[0])
    validation = []
    taken = 0
    cursor = 0
    while taken < target and cursor < len(words):
        group = by_word[words[cursor]]
        validation.extend(group)
        taken += len(group)
        cursor += 1
    val_words = set(words[:cursor])
    validation = [replace(c, split="validation") for c in validation]
    test = [replace(c, split="test") for c in selected
            if c.replacing_word.lower() not in val_words]
    return validation, test


_TSV_HEADER = ("premise\thypothesis\treplaced\treplacing\tfreq_premise\t"
               "freq_hypothesis\tcandidate_freq\tsplit\tlabel")


def save_candidates(candidates, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + _TSV_HEADER + "\n")
        for c in candidates:
            fh.write("\t".join([
                c.premise, c.hypothesis, c.replaced_word, c.replacing_word,
                str(c.freq_premise), str(c.freq_hypothesis),
                str(c.candidate_freq), c.split, c.label]) + "\n")


def load_candidates(path):
    candidates = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 9:
                raise ParseError(
                    f"expected 9 tab-separated fields, got {len(parts)}",
                    line=lineno)
            label = parts[8] or "unlabeled"
            if label not in LABELS:
                raise ParseError(f"unknown label {label!r}", line=lineno)
            candidates.append(EntailmentCandidate(
                premise=parts[0], hypothesis=parts[1], replaced_word=parts[2],
                replacing_word=parts[3], freq_premise=int(parts[4]),
                freq_hypothesis=int(parts[5]), candidate_freq=int(parts[6]),
                split=parts[7], label=label))
    return candidates


def merge_labels(candidates, labels_path):
    """Attach labels from an annotation TSV keyed by (premise, hypothesis).

    The mining tool never invents labels; unmatched candidates stay
    unlabeled.
    """
    table = {}
    with open(labels_path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(
                    f"expected 3 tab-separated fields, got {len(parts)}",
                    line=lineno)
            premise, hypothesis, label = parts
            if label not in LABELS[:3]:
                raise ParseError(f"unknown label {label!r}", line=lineno)
            table[(premise, hypothesis)] = label
    return [replace(c, label=table.get((c.premise, c.hypothesis), c.label))
            for c in candidates]
