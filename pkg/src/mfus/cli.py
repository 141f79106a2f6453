"""Command-line entry point.

One subcommand per pipeline stage; every run writes its artifacts plus a
manifest (config hash, input hashes, output hashes, versions) into the
output directory. Errors are reported as JSON on stderr: exit 2 for usage
problems, 3 for invariant/config/data violations.
"""

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import __version__
from . import corpus as corpus_mod
from . import entailgen, evalkit, scoring, synthlab, uschema
from . import trainer as trainer_mod
from .embed import load_embedding_file, Vocabulary
from .errors import ConfigError, MfusError
from .corpus import RowKind
from .model import load_checkpoint, save_checkpoint
from .trainer import RunConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VIOLATION = 3


def _sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _sha256_obj(obj):
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _write_manifest(out_dir, command, config_obj, inputs, outputs):
    manifest = {
        "command": command,
        "config_hash": _sha256_obj(config_obj),
        "input_hashes": {os.path.basename(p): _sha256_file(p)
                         for p in inputs if p},
        "output_hashes": {os.path.basename(p): _sha256_file(p)
                          for p in outputs},
        "versions": {"mfus": __version__, "numpy": np.__version__},
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _load_run_config(args):
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "encoder", None):
        cfg = replace(cfg, encoder_kind=args.encoder)
    if getattr(args, "ablation", "none") == "no_autoencoder":
        cfg = replace(cfg, no_autoencoder=True)
    elif getattr(args, "ablation", "none") == "k11":
        cfg = replace(cfg, K_equal_Krel=True)
    return cfg


def _outpath(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def cmd_synth(args):
    spec = synthlab.spec_from_json(args.config)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    result = synthlab.generate(spec)
    corpus_path = _outpath(args, "cooccur.tsv")
    corpus_mod.save_cooccurrence(result.matrix, corpus_path)
    truth_path = _outpath(args, "truth.json")
    synthlab.write_truth(result.truth, truth_path)
    emb_path = _outpath(args, "embeddings.txt")
    synthlab.write_embedding_file(result.word_vectors, emb_path)
    val_path = _outpath(args, "re_validation.tsv")
    evalkit.save_re_eval_set(result.re_validation, val_path)
    test_path = _outpath(args, "re_test.tsv")
    evalkit.save_re_eval_set(result.re_test, test_path)
    entail_path = _outpath(args, "entail_gold.tsv")
    entailgen.save_candidates(result.entailment_candidates, entail_path)
    spec_path = _outpath(args, "synth_spec.json")
    synthlab.spec_to_json(spec, spec_path)
    _write_manifest(args.out, "synth", asdict(spec), [args.config],
                    [corpus_path, truth_path, emb_path, val_path, test_path,
                     entail_path, spec_path])
    return EXIT_OK


def cmd_train(args):
    cfg = _load_run_config(args)
    matrix = corpus_mod.load_cooccurrence(args.corpus)
    vocab = Vocabulary.from_matrix(matrix)
    pretrained = load_embedding_file(args.embeddings, vocab, seed=cfg.seed) \
        if args.embeddings else None
    split = corpus_mod.split_validation(
        matrix, fraction=cfg.validation_fraction, rng_seed=cfg.seed)
    params, report = trainer_mod.train(matrix, split, pretrained, cfg)
    ckpt_path = _outpath(args, "checkpoint.mfus")
    save_checkpoint(params, cfg.model_config(), ckpt_path,
                    extra={"selected_epoch": report.selected_epoch})
    report_path = _outpath(args, "report.jsonl")
    report.to_jsonl(report_path)
    split_path = _outpath(args, "split.txt")
    corpus_mod.save_split(split, split_path)
    cfg_path = _outpath(args, "run_config.json")
    cfg.to_json(cfg_path)
    _write_manifest(args.out, "train", asdict(cfg),
                    [args.config, args.corpus, args.embeddings],
                    [ckpt_path, report_path, split_path, cfg_path])
    return EXIT_OK


def cmd_uschema_train(args):
    cfg = _load_run_config(args)
    matrix = corpus_mod.load_cooccurrence(args.corpus)
    fm = uschema.train_uschema(matrix, cfg.d_model, epochs=cfg.uschema_epochs,
                               lr=cfg.uschema_lr, seed=cfg.seed)
    ckpt_path = _outpath(args, "uschema.mfus")
    uschema.save_factor_model(fm, ckpt_path, entity_names=matrix.cols.names)
    _write_manifest(args.out, "uschema-train", asdict(cfg),
                    [args.config, args.corpus], [ckpt_path])
    return EXIT_OK


def _facets_by_text(texts, params, mcfg):
    from . import numcore as nc
    from .model import facets_for_tokens

    cache = {}
    for text in texts:
        if text not in cache:
            with nc.no_grad():
                fs = facets_for_tokens(tuple(text.split()), RowKind.PATTERN,
                                       params, mcfg, train=False)
            cache[text] = fs.normalized()
    return cache


def cmd_score(args):
    params, mcfg = load_checkpoint(args.checkpoint)
    candidates = entailgen.load_candidates(args.pairs)
    texts = {c.premise for c in candidates} | {c.hypothesis for c in candidates}
    cache = _facets_by_text(sorted(texts), params, mcfg)
    items = [(c.premise, c.hypothesis, cache[c.premise], cache[c.hypothesis])
             for c in candidates]
    pairs = scoring.score_pairs(items, threads=args.threads)
    scores_path = _outpath(args, "scores.csv")
    scoring.write_scores_csv(pairs, scores_path)
    _write_manifest(args.out, "score", {"checkpoint": args.checkpoint},
                    [args.checkpoint, args.pairs], [scores_path])
    return EXIT_OK


def cmd_eval_entail(args):
    candidates = entailgen.load_candidates(args.candidates)
    score_rows = scoring.read_scores_csv(args.scores)
    table = {(s.row_i, s.row_j): s for s in score_rows}
    aligned = []
    for c in candidates:
        key = (c.premise, c.hypothesis)
        if key not in table:
            raise ConfigError(f"no score for candidate pair {key!r}")
        aligned.append(table[key])
    report = evalkit.evaluate_entailment(candidates, aligned)
    report_path = _outpath(args, "entail_report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(asdict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(args.out, "eval-entail", {"candidates": args.candidates},
                    [args.candidates, args.scores], [report_path])
    return EXIT_OK


def cmd_eval_re(args):
    params, mcfg = load_checkpoint(args.checkpoint)
    matrix = corpus_mod.load_cooccurrence(args.corpus)
    fm = uschema.load_factor_model(args.ensemble) if args.ensemble else None
    scorer = evalkit.SimScorer(params, mcfg, matrix, ensemble_fm=fm)
    relations = scorer.relation_names()
    val_set = evalkit.load_re_eval_set(args.validation, relations)
    test_set = evalkit.load_re_eval_set(args.test, relations)
    val_scores = evalkit.score_matrix(val_set, scorer)
    thresholds = evalkit.tune_thresholds(val_set, val_scores)
    test_scores = evalkit.score_matrix(test_set, scorer)
    prf = evalkit.evaluate_re(test_set, test_scores, thresholds)
    thr_path = _outpath(args, "thresholds.json")
    with open(thr_path, "w", encoding="utf-8") as fh:
        json.dump({r: (t if np.isfinite(t) else "inf")
                   for r, t in thresholds.items()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    report_path = _outpath(args, "re_report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump({"precision": prf.precision, "recall": prf.recall,
                   "f1": prf.f1, "ensemble": bool(fm)},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(args.out, "eval-re", {"checkpoint": args.checkpoint},
                    [args.checkpoint, args.corpus, args.validation, args.test,
                     args.ensemble],
                    [thr_path, report_path])
    return EXIT_OK


def cmd_entail_mine(args):
    matrix = corpus_mod.load_cooccurrence(args.corpus)
    lexicon = entailgen.load_lexicon(args.lexicon)
    candidates = entailgen.mine_candidates(matrix, lexicon)
    candidates = entailgen.exclude_mutual(candidates, lexicon)
    selected, _groups = entailgen.rank_and_select(candidates, n=args.top_n)
    if args.labels:
        selected = entailgen.merge_labels(selected, args.labels)
    validation, test = entailgen.split_by_hypernym(
        selected, val_fraction=args.val_fraction,
        rng_seed=args.seed if args.seed is not None else 0)
    split_of = {}
    for c in validation:
        split_of[(c.premise, c.hypothesis, c.replaced_word, c.replacing_word)] = \
            "validation"
    for c in test:
        split_of[(c.premise, c.hypothesis, c.replaced_word, c.replacing_word)] = \
            "test"
    final = [replace(c, split=split_of.get(
        (c.premise, c.hypothesis, c.replaced_word, c.replacing_word), ""))
        for c in selected]
    out_path = _outpath(args, "candidates.tsv")
    entailgen.save_candidates(final, out_path)
    _write_manifest(args.out, "entail-mine", {"top_n": args.top_n},
                    [args.corpus, args.lexicon, args.labels], [out_path])
    return EXIT_OK


def cmd_project(args):
    params, mcfg = load_checkpoint(args.checkpoint)
    matrix = corpus_mod.load_cooccurrence(args.corpus)
    if args.patterns:
        with open(args.patterns, encoding="utf-8") as fh:
            wanted = [line.strip() for line in fh if line.strip()]
    else:
        pattern_ids = sorted(matrix.pattern_row_ids(),
                             key=lambda i: -matrix.pattern_freq[i])[:3]
        wanted = [matrix.rows[i].text for i in pattern_ids]
    facet_items = []
    from . import numcore as nc
    from .model import facets_for_tokens

    for i in matrix.relation_row_ids():
        row = matrix.rows[i]
        with nc.no_grad():
            fs = facets_for_tokens(row.tokens, row.kind, params, mcfg)
        for k, vec in enumerate(fs.normalized()):
            facet_items.append((f"{row.text}#{k}", "relation_facet", vec))
    for text in wanted:
        with nc.no_grad():
            fs = facets_for_tokens(tuple(text.split()), RowKind.PATTERN,
                                   params, mcfg)
        for k, vec in enumerate(fs.normalized()):
            facet_items.append((f"{text}#{k}", "facet", vec))
    table = params.entity_table().data
    norm = table / np.linalg.norm(table, axis=1, keepdims=True)
    entity_items = [
        (name, norm[j], int(matrix.col_degree[j]))
        for j, name in enumerate(matrix.cols.names)
    ]
    points = evalkit.project_mds(
        facet_items, entity_items, min_degree=args.min_degree,
        far_threshold=args.far_threshold, jitter_eps=args.jitter,
        seed=args.seed if args.seed is not None else 0)
    csv_path = _outpath(args, "mds.csv")
    evalkit.write_mds_csv(points, csv_path)
    _write_manifest(args.out, "project", {"checkpoint": args.checkpoint},
                    [args.checkpoint, args.corpus, args.patterns], [csv_path])
    return EXIT_OK


def cmd_hpo(args):
    cfg = _load_run_config(args)
    matrix = corpus_mod.load_cooccurrence(args.corpus)
    vocab = Vocabulary.from_matrix(matrix)
    pretrained = load_embedding_file(args.embeddings, vocab, seed=cfg.seed) \
        if args.embeddings else None
    split = corpus_mod.split_validation(
        matrix, fraction=cfg.validation_fraction, rng_seed=cfg.seed)
    with open(args.axes, encoding="utf-8") as fh:
        axes = json.load(fh)
    re_val = evalkit.load_re_eval_set(args.re_eval) if args.re_eval else None

    def eval_fn(candidate_cfg):
        params, report = trainer_mod.train(matrix, split, pretrained,
                                           candidate_cfg)
        if re_val is not None:
            scorer = evalkit.SimScorer(params, candidate_cfg.model_config(),
                                       matrix)
            scores = evalkit.score_matrix(re_val, scorer)
            return evalkit.retrieval_average_precision(re_val, scores)
        return -report.epochs[report.selected_epoch]["val_loss"]

    best_cfg, trace = trainer_mod.coordinate_descent_hpo(cfg, axes, eval_fn)
    best_path = _outpath(args, "best_config.json")
    best_cfg.to_json(best_path)
    trace_path = _outpath(args, "hpo_trace.jsonl")
    with open(trace_path, "w", encoding="utf-8") as fh:
        for entry in trace:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    _write_manifest(args.out, "hpo", asdict(cfg),
                    [args.config, args.corpus, args.axes, args.embeddings,
                     args.re_eval],
                    [best_path, trace_path])
    return EXIT_OK


def cmd_gradcheck(args):
    if args.config:
        cfg = _load_run_config(args)
    else:
        cfg = RunConfig(d_model=16, heads=2, K=2, K_rel=3, enc_layers=2,
                        dec_layers=2, seed=args.seed or 0)
    spec = synthlab.SynthSpec(
        n_relations=2, dim=cfg.d_model, patterns_per_subset=2,
        facet_sizes=(1, 2), entity_pairs_per_relation=4,
        pairs_per_facet=(1, 2), relation_pairs_observed=2,
        eval_patterns_per_subset=0, n_entailment_pairs=0, n_other_pairs=0,
        seed=cfg.seed)
    result = synthlab.generate(spec)
    max_err = trainer_mod.gradient_check_full_loss(
        result.matrix, cfg, num_coords=args.coords, eps=1e-6, seed=cfg.seed)
    passed = max_err < args.threshold
    payload = {"max_rel_error": max_err, "threshold": args.threshold,
               "pass": bool(passed)}
    if args.out:
        out_path = _outpath(args, "gradcheck.json")
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_manifest(args.out, "gradcheck", asdict(cfg),
                        [args.config], [out_path])
    print(json.dumps(payload, sort_keys=True))
    return EXIT_OK if passed else EXIT_VIOLATION


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mfus",
        description="Multi-facet universal schema: train facet embeddings, "
                    "score pattern/relation similarity, detect entailment.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required,
                       help="config JSON path")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("synth", help="generate a synthetic benchmark corpus")
    common(p, config_required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the facet model")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--encoder", choices=["transformer", "bilstm"], default=None)
    p.add_argument("--ablation", choices=["none", "no_autoencoder", "k11"],
                   default="none")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("uschema-train", help="train the factorization baseline")
    common(p)
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_uschema_train)

    p = sub.add_parser("score", help="score candidate pattern pairs")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True,
                   help="candidates TSV with premise/hypothesis columns")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval-entail",
                       help="entailment AP and direction accuracy from scores")
    common(p)
    p.add_argument("--candidates", required=True)
    p.add_argument("--scores", required=True)
    p.set_defaults(func=cmd_eval_entail)

    p = sub.add_parser("eval-re", help="relation-extraction P/R/F1")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--validation", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--ensemble", default=None,
                   help="factorization checkpoint for max-merged scores")
    p.set_defaults(func=cmd_eval_re)

    p = sub.add_parser("entail-mine",
                       help="mine entailment candidates by hypernym substitution")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--labels", default=None)
    p.add_argument("--top-n", type=int, default=1500, dest="top_n")
    p.add_argument("--val-fraction", type=float, default=0.2,
                   dest="val_fraction")
    p.set_defaults(func=cmd_entail_mine)

    p = sub.add_parser("project", help="export a 2-D MDS projection CSV")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--patterns", default=None,
                   help="file of pattern texts to project (default: top 3)")
    p.add_argument("--min-degree", type=int, default=5, dest="min_degree")
    p.add_argument("--far-threshold", type=float, default=None,
                   dest="far_threshold")
    p.add_argument("--jitter", type=float, default=0.0)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("hpo", help="coordinate-descent hyperparameter search")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--axes", required=True, help="JSON of axis -> values")
    p.add_argument("--embeddings", default=None)
    p.add_argument("--re-eval", default=None, dest="re_eval",
                   help="retrieval eval TSV; metric becomes retrieval AP")
    p.set_defaults(func=cmd_hpo)

    p = sub.add_parser("gradcheck", help="finite-difference check of the "
                                         "full loss on a tiny fixture")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--coords", type=int, default=64)
    p.add_argument("--threshold", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MfusError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return EXIT_VIOLATION
    except OSError as exc:
        print(json.dumps({"error": "OSError", "message": str(exc)}),
              file=sys.stderr)
        return EXIT_VIOLATION


if __name__ == "__main__":
    sys.exit(main())
