"""Training loop, optimizer split, epoch selection, hyperparameter search.

The neural parameters and the entity table follow adaptive-moment updates;
the SIF map H follows plain gradient descent with its own learning rate.
The number of epochs is selected by the minimum validation loss, computed
on the held-out pattern rows with dropout off and a fixed negative stream.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import corpus as corpus_mod
from . import numcore as nc
from .embed import Vocabulary, WordStats, random_embeddings, sif_table
from .errors import ConfigError, InvariantError
from .model import ModelConfig, ModelParams, init_params
from .objective import RegConfig, training_step_loss
from .uschema import train_uschema

log = logging.getLogger(__name__)

# coordinate-descent search ranges for the retrieval-tuned configuration
DEFAULT_SEARCH_RANGES = {
    "gamma": [0.1, 0.2, 0.3],
    "K": [1, 2, 3, 4, 5, 6, 11],
    "K_rel": [1, 8, 9, 10, 11, 12, 13, 14, 15],
    "dropout_p": [0.25, 0.3, 0.35],
    "lr_H": [1, 0.1, 0.01],
    "max_epochs": [15, 20, 25, 30, 50],
}

ABLATION_MODES = ("full", "no_autoencoder", "K_equal_Krel_11")


@dataclass
class RunConfig:
    gamma: float = 0.2
    K: int = 5
    K_rel: int = 11
    dropout_p: float = 0.3
    lr_model: float = 1e-3
    lr_H: float = 0.1
    max_epochs: int = None          # None: 50 for transformer, 30 for bilstm
    batch_size: int = 32
    seed: int = 0
    encoder_kind: str = "transformer"
    no_autoencoder: bool = False
    K_equal_Krel: bool = False
    d_model: int = 300
    enc_layers: int = 3
    dec_layers: int = 3
    lstm_layers: int = 2
    heads: int = 4
    ffn_dim: int = None
    max_seq_len: int = 64
    negatives_per_positive: int = 1
    validation_fraction: float = 0.05
    init_entities_with_uschema: bool = True
    uschema_epochs: int = 30
    uschema_lr: float = 0.5
    include_relations_in_reg: bool = True
    nu: float = 1e-4

    def resolved_max_epochs(self):
        if self.max_epochs is not None:
            return self.max_epochs
        return 30 if self.encoder_kind == "bilstm" else 50

    def effective_facets(self):
        if self.K_equal_Krel:
            return 11, 11
        return self.K, self.K_rel

    def model_config(self):
        k, k_rel = self.effective_facets()
        return ModelConfig(
            d_model=self.d_model, enc_layers=self.enc_layers,
            dec_layers=self.dec_layers, lstm_layers=self.lstm_layers,
            heads=self.heads, ffn_dim=self.ffn_dim, K=k, K_rel=k_rel,
            encoder_kind=self.encoder_kind, dropout_p=self.dropout_p,
            max_seq_len=self.max_seq_len, seed=self.seed)

    def reg_config(self):
        return RegConfig(gamma=self.gamma, nu=self.nu,
                         enabled=not self.no_autoencoder,
                         include_relations=self.include_relations_in_reg)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)   # dicts per epoch
    selected_epoch: int = -1

    def record(self, epoch, train_loss, val_loss, wall_time):
        self.epochs.append({
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "wall_time": wall_time,
        })

    def select_best(self):
        losses = [e["val_loss"] for e in self.epochs]
        self.selected_epoch = int(np.argmin(losses))
        return self.selected_epoch

    def to_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for entry in self.epochs:
                record = dict(entry)
                record["selected"] = entry["epoch"] == self.selected_epoch
                fh.write(json.dumps(record, sort_keys=True) + "\n")


class Adam:
    """Adaptive-moment updates for a named subset of tensors."""

    def __init__(self, tensors, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = dict(tensors)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {n: np.zeros_like(t.data) for n, t in self.tensors.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in self.tensors.items()}
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, tensor in self.tensors.items():
            if tensor.grad is None:
                continue
            g = tensor.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            tensor.data = tensor.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class PlainSGD:
    """theta <- theta - lr * grad, no momentum (used for the map H)."""

    def __init__(self, tensors, lr):
        self.tensors = dict(tensors)
        self.lr = lr

    def step(self):
        for tensor in self.tensors.values():
            if tensor.grad is None:
                continue
            tensor.data = tensor.data - self.lr * tensor.grad


@dataclass
class EpochPlan:
    """One epoch's sampled negatives, weights, and regularizer pairs."""

    batch: corpus_mod.SampleBatch
    row_order: list


def _draw_auto_negatives(rows, candidate_patterns, rng):
    pairs = {}
    for i in rows:
        others = [q for q in candidate_patterns if q != i]
        if not others:
            continue
        pairs[i] = int(others[rng.integers(len(others))])
    return pairs


def build_epoch_plan(matrix, rows, rng_seed, shuffle=True,
                     negatives_per_positive=1, pattern_pool=None,
                     negative_rows=None):
    """Sample negatives, compute balance weights, draw the regularizer
    negatives, and fix the row visit order for one epoch.

    ``negative_rows`` is the pool the replacement rows are drawn from;
    it defaults to ``rows`` (training never pairs fresh gradients with
    held-out patterns), while validation plans pass a wider pool.
    """
    rng = np.random.default_rng(rng_seed)
    row_set = set(rows)
    positives = [(i, j) for i, j in matrix.positives if i in row_set]
    neg_seed = rng.integers(2 ** 63)
    negatives = corpus_mod.draw_negatives(
        matrix, positives, neg_seed,
        allowed_rows=row_set if negative_rows is None else set(negative_rows),
        per_positive=negatives_per_positive)
    samples = [(i, j, 1) for i, j in positives] + negatives
    batch = corpus_mod.compute_weights(matrix, samples)
    pool = sorted(pattern_pool if pattern_pool is not None
                  else [i for i in rows
                        if matrix.rows[i].kind is corpus_mod.RowKind.PATTERN])
    batch.auto_negatives = _draw_auto_negatives(sorted(row_set), pool, rng)
    order = sorted(row_set)
    if shuffle:
        rng.shuffle(order)
    return EpochPlan(batch=batch, row_order=order)


def train(matrix, split, pretrained, cfg):
    """Run the full optimization and return the best-epoch parameters.

    ``pretrained`` may be None, in which case a seeded random table of
    d_model-dim vectors stands in for the word-embedding file.
    """
    train_rows = sorted(split.train_rows)
    if not train_rows:
        raise ConfigError("empty training split")
    val_rows = sorted(split.validation_rows)
    mcfg = cfg.model_config()
    reg = cfg.reg_config()

    vocab = Vocabulary.from_matrix(matrix)
    if pretrained is None:
        pretrained = random_embeddings(vocab, mcfg.d_model, seed=cfg.seed)

    # stable seed family: 0 uschema init, 1 validation stream, 2 dropout,
    # 3.. one per epoch (negatives, weights, shuffle)
    seed_root = np.random.SeedSequence(cfg.seed)
    family = seed_root.spawn(3 + cfg.resolved_max_epochs())
    s_uschema, s_val, s_dropout = family[0], family[1], family[2]
    epoch_seeds = family[3:]

    entity_init = None
    if cfg.init_entities_with_uschema:
        fm = train_uschema(matrix, mcfg.d_model, epochs=cfg.uschema_epochs,
                           lr=cfg.uschema_lr, seed=s_uschema,
                           row_subset=set(train_rows))
        entity_init = fm.cols
    params = init_params(mcfg, vocab, matrix.cols.names,
                         pretrained=pretrained, entity_init=entity_init)

    stats = WordStats.fit(matrix, train_rows=set(train_rows), nu=cfg.nu)
    sif_aw = sif_table(matrix, vocab, pretrained, stats)

    train_pattern_pool = [i for i in train_rows
                          if matrix.rows[i].kind is corpus_mod.RowKind.PATTERN]
    val_plan = None
    if val_rows:
        val_plan = build_epoch_plan(
            matrix, val_rows, s_val, shuffle=False,
            negatives_per_positive=cfg.negatives_per_positive,
            pattern_pool=train_pattern_pool,
            negative_rows=range(matrix.n_rows))

    h_tensor = {"H": params.tensors["H"]}
    other = {n: t for n, t in params.tensors.items() if n != "H"}
    opt_model = Adam(other, lr=cfg.lr_model)
    opt_h = PlainSGD(h_tensor, lr=cfg.lr_H)

    report = TrainReport()
    best_val = np.inf
    best_snapshot = None
    dropout_rng = np.random.default_rng(s_dropout)

    for epoch in range(cfg.resolved_max_epochs()):
        tic = time.perf_counter()
        plan = build_epoch_plan(
            matrix, train_rows, epoch_seeds[epoch],
            negatives_per_positive=cfg.negatives_per_positive)
        epoch_loss = 0.0
        order = plan.row_order
        for start in range(0, len(order), cfg.batch_size):
            rows_in_batch = order[start: start + cfg.batch_size]
            loss = training_step_loss(
                rows_in_batch, plan.batch, matrix, params, mcfg, reg, sif_aw,
                train=True, rng=dropout_rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise InvariantError(
                    f"non-finite training loss at epoch {epoch}, "
                    f"batch starting at row index {start}")
            epoch_loss += value
            if loss.requires_grad:
                params.zero_grad()
                nc.backward(loss)
                opt_model.step()
                opt_h.step()
        val_loss = np.nan
        if val_plan is not None:
            val_loss = evaluate_loss(matrix, val_plan, params, mcfg, reg, sif_aw)
            if not np.isfinite(val_loss):
                raise InvariantError(f"non-finite validation loss at epoch {epoch}")
        report.record(epoch, epoch_loss, float(val_loss),
                      time.perf_counter() - tic)
        if val_plan is None or val_loss < best_val:
            best_val = val_loss if val_plan is not None else -np.inf
            best_snapshot = {n: t.data.copy() for n, t in params.named()}
    if best_snapshot is not None:
        for name, data in best_snapshot.items():
            params.tensors[name].data = data
    if val_plan is not None:
        report.select_best()
    else:
        report.selected_epoch = len(report.epochs) - 1
    return params, report


def evaluate_loss(matrix, plan, params, mcfg, reg, sif_aw):
    """Objective value on a fixed plan with dropout off and no gradients."""
    with nc.no_grad():
        loss = training_step_loss(
            plan.row_order, plan.batch, matrix, params, mcfg, reg, sif_aw,
            train=False, rng=None)
    return float(loss.data)


def coordinate_descent_hpo(base_cfg, axes, eval_fn):
    """Tune one hyperparameter at a time, keeping each axis's argmax.

    ``axes`` maps RunConfig field names to candidate value lists and is
    swept once in declared order. ``eval_fn(cfg)`` returns a scalar metric
    to maximize. Returns (best config, trace of evaluations).
    """
    current = base_cfg
    trace = []
    for axis, values in axes.items():
        if not values:
            continue
        best_value, best_score = None, -np.inf
        for value in values:
            candidate = replace(current, **{axis: value})
            score = float(eval_fn(candidate))
            trace.append({"axis": axis, "value": value, "score": score})
            if score > best_score:
                best_value, best_score = value, score
        current = replace(current, **{axis: best_value})
    return current, trace


def gradient_check_full_loss(matrix, cfg, pretrained=None, rows=None,
                             num_coords=64, eps=1e-6, seed=0):
    """Check the whole objective's backward pass against central
    differences, treating every parameter tensor as one flat vector.

    Runs with dropout off on a fixed sample plan so the loss is a
    deterministic function of the parameters. Returns the max relative
    error over the checked coordinates.
    """
    mcfg = cfg.model_config()
    reg = cfg.reg_config()
    vocab = Vocabulary.from_matrix(matrix)
    if pretrained is None:
        pretrained = random_embeddings(vocab, mcfg.d_model, seed=seed)
    params = init_params(mcfg, vocab, matrix.cols.names, pretrained=pretrained)
    stats = WordStats.fit(matrix)
    sif_aw = sif_table(matrix, vocab, pretrained, stats)
    if rows is None:
        rows = list(range(matrix.n_rows))
    plan = build_epoch_plan(matrix, rows, np.random.SeedSequence(seed),
                            shuffle=False,
                            negatives_per_positive=cfg.negatives_per_positive)

    names = sorted(params.tensors)
    shapes = {n: params.tensors[n].data.shape for n in names}
    sizes = {n: params.tensors[n].data.size for n in names}
    theta0 = np.concatenate([params.tensors[n].data.reshape(-1) for n in names])

    def loss_of(theta):
        views = {}
        offset = 0
        for n in names:
            views[n] = theta[offset: offset + sizes[n]].reshape(shapes[n])
            offset += sizes[n]
        view_params = ModelParams(views, vocab, list(matrix.cols.names))
        return training_step_loss(plan.row_order, plan.batch, matrix,
                                  view_params, mcfg, reg, sif_aw, train=False)

    rng = np.random.default_rng(seed)
    return nc.gradient_check(loss_of, theta0, eps=eps,
                             num_coords=num_coords, rng=rng)


def run_ablation(matrix, split, pretrained, cfg, mode, eval_fn=None):
    """Train one ablation configuration and report with the same schema.

    Modes: full, no_autoencoder (regularizer contributes exactly zero),
    K_equal_Krel_11 (eleven facets for both row kinds).
    """
    if mode not in ABLATION_MODES:
        raise ConfigError(f"unknown ablation mode {mode!r}")
    run_cfg = cfg
    if mode == "no_autoencoder":
        run_cfg = replace(cfg, no_autoencoder=True)
    elif mode == "K_equal_Krel_11":
        run_cfg = replace(cfg, K_equal_Krel=True)
    params, report = train(matrix, split, pretrained, run_cfg)
    metrics = eval_fn(params, run_cfg) if eval_fn is not None else {}
    return {"mode": mode, "report": report, "metrics": metrics,
            "params": params, "config": run_cfg}
