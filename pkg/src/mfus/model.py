"""The facet-producing network.

A token sequence (with <eos> appended) runs through a Transformer or
bi-LSTM encoder; the sequence summary is fanned out through one linear map
per facet slot into a non-autoregressive Transformer decoder with
cross-attention over the encoder states; a final linear map yields the
facet embeddings. Pattern rows produce K facets, KB relation rows K_rel.
"""

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .corpus import RowKind
from .embed import Vocabulary
from .errors import CheckpointError, ConfigError, InvariantError, ShapeError
from .numcore import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MFUS"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    d_model: int = 300
    enc_layers: int = 3
    dec_layers: int = 3
    lstm_layers: int = 2
    heads: int = 4
    ffn_dim: int = None          # defaults to d_model
    K: int = 5
    K_rel: int = 11
    encoder_kind: str = "transformer"   # "transformer" | "bilstm"
    dropout_p: float = 0.3
    max_seq_len: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = self.d_model
        if self.d_model % self.heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.K < 1 or self.K_rel < 1:
            raise ConfigError("K and K_rel must be >= 1")
        if self.encoder_kind not in ("transformer", "bilstm"):
            raise ConfigError(f"unknown encoder kind {self.encoder_kind!r}")
        if self.encoder_kind == "bilstm" and self.d_model % 2 != 0:
            raise ConfigError("bilstm encoder needs an even d_model")

    @property
    def slot_count(self):
        return max(self.K, self.K_rel)


@dataclass
class EncoderOutput:
    seq: Tensor        # (|tokens|+1, d) contextual embeddings incl. <eos>
    summary: Tensor    # (1, d) whole-pattern embedding feeding the slot maps


@dataclass
class FacetSet:
    """The facet embeddings of one row, with a normalized view for scoring."""

    facets: Tensor

    @property
    def k(self):
        return self.facets.shape[0]

    def values(self):
        return self.facets.data if isinstance(self.facets, Tensor) \
            else np.asarray(self.facets)

    def normalized(self):
        vals = self.values()
        norms = np.linalg.norm(vals, axis=1, keepdims=True)
        if (norms < 1e-12).any():
            raise InvariantError("facet with near-zero norm cannot be normalized")
        return vals / norms


class ModelParams:
    """All trainable tensors, keyed by name, plus the vocab and entity ids."""

    def __init__(self, tensors, vocab, entity_names):
        self.tensors = tensors
        self.vocab = vocab
        self.entity_names = entity_names

    def __getitem__(self, name):
        return self.tensors[name]

    def named(self):
        return self.tensors.items()

    def parameter_count(self, exclude_word_table=False):
        return sum(t.size for name, t in self.tensors.items()
                   if not (exclude_word_table and name == "word_emb"))

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def entity_table(self):
        return self.tensors["entity_emb"]


def _xavier(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _linear_params(tensors, name, rng, d_in, d_out):
    tensors[f"{name}.w"] = nc.param(_xavier(rng, d_in, d_out))
    tensors[f"{name}.b"] = nc.param(np.zeros(d_out))


def _ln_params(tensors, name, d):
    tensors[f"{name}.g"] = nc.param(np.ones(d))
    tensors[f"{name}.b"] = nc.param(np.zeros(d))


def _attn_params(tensors, name, rng, d):
    for part in ("wq", "wk", "wv", "wo"):
        tensors[f"{name}.{part}"] = nc.param(_xavier(rng, d, d))
    for part in ("bq", "bk", "bv", "bo"):
        tensors[f"{name}.{part}"] = nc.param(np.zeros(d))


def init_params(cfg, vocab, entity_names, pretrained=None, entity_init=None):
    """Build all parameter tensors with a seeded initializer.

    ``pretrained.matrix`` seeds the word table when its dimension matches
    d_model; ``entity_init`` (e.g. factorization embeddings) seeds the
    entity table.
    """
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d_model
    tensors = {}

    if pretrained is not None and pretrained.dim == d:
        tensors["word_emb"] = nc.param(pretrained.matrix.copy())
    else:
        if pretrained is not None:
            log.warning("pretrained dim %d != d_model %d; word table random",
                        pretrained.dim, d)
        tensors["word_emb"] = nc.param(
            rng.standard_normal((len(vocab), d)) / np.sqrt(d))

    if entity_init is not None:
        if entity_init.shape != (len(entity_names), d):
            raise ConfigError(
                f"entity init shape {entity_init.shape} != ({len(entity_names)}, {d})")
        tensors["entity_emb"] = nc.param(entity_init.copy())
    else:
        tensors["entity_emb"] = nc.param(
            rng.standard_normal((len(entity_names), d)) / np.sqrt(d))
    if (np.linalg.norm(tensors["entity_emb"].data, axis=1) <= 0).any():
        raise InvariantError("entity embedding with zero norm after init")

    if cfg.encoder_kind == "transformer":
        for layer in range(cfg.enc_layers):
            p = f"enc{layer}"
            _ln_params(tensors, f"{p}.ln1", d)
            _attn_params(tensors, f"{p}.attn", rng, d)
            _ln_params(tensors, f"{p}.ln2", d)
            _linear_params(tensors, f"{p}.ffn1", rng, d, cfg.ffn_dim)
            _linear_params(tensors, f"{p}.ffn2", rng, cfg.ffn_dim, d)
        _ln_params(tensors, "enc_final_ln", d)
    else:
        hid = d // 2
        for layer in range(cfg.lstm_layers):
            d_in = d
            for direction in ("f", "b"):
                p = f"lstm{layer}.{direction}"
                tensors[f"{p}.wx"] = nc.param(_xavier(rng, d_in, 4 * hid))
                tensors[f"{p}.wh"] = nc.param(_xavier(rng, hid, 4 * hid))
                tensors[f"{p}.bias"] = nc.param(np.zeros(4 * hid))
        _linear_params(tensors, "lstm_summary", rng, d, d)

    for k in range(cfg.slot_count):
        _linear_params(tensors, f"ld{k}", rng, d, d)

    for layer in range(cfg.dec_layers):
        p = f"dec{layer}"
        _ln_params(tensors, f"{p}.ln1", d)
        _attn_params(tensors, f"{p}.attn", rng, d)
        _ln_params(tensors, f"{p}.lnx", d)
        _attn_params(tensors, f"{p}.xattn", rng, d)
        _ln_params(tensors, f"{p}.ln2", d)
        _linear_params(tensors, f"{p}.ffn1", rng, d, cfg.ffn_dim)
        _linear_params(tensors, f"{p}.ffn2", rng, cfg.ffn_dim, d)
    _ln_params(tensors, "dec_final_ln", d)

    _linear_params(tensors, "lo", rng, d, d)
    tensors["H"] = nc.param(_xavier(rng, d, pretrained.dim if pretrained else d))

    params = ModelParams(tensors, vocab, list(entity_names))
    log.info("model parameters: %d total, %d excluding word table",
             params.parameter_count(),
             params.parameter_count(exclude_word_table=True))
    return params


_POS_CACHE = {}


def positional_encoding(length, d):
    key = (length, d)
    if key not in _POS_CACHE:
        pos = np.arange(length)[:, None]
        dim = np.arange(0, d, 2)[None, :]
        angle = pos / np.power(10000.0, dim / d)
        enc = np.zeros((length, d))
        enc[:, 0::2] = np.sin(angle)
        enc[:, 1::2] = np.cos(angle[:, : d // 2])
        _POS_CACHE[key] = enc
    return _POS_CACHE[key]


def _multi_head(x, kv, prefix, params, heads):
    p = params.tensors
    q = x @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"]
    k = kv @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"]
    v = kv @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"]
    d = q.shape[-1]
    dh = d // heads
    outs = []
    for h in range(heads):
        sl = (slice(None), slice(h * dh, (h + 1) * dh))
        outs.append(nc.scaled_dot_attention(q[sl], k[sl], v[sl]))
    merged = outs[0] if heads == 1 else nc.concat(outs, axis=-1)
    return merged @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]


def _ffn(x, prefix, params):
    p = params.tensors
    h = nc.relu(x @ p[f"{prefix}.ffn1.w"] + p[f"{prefix}.ffn1.b"])
    return h @ p[f"{prefix}.ffn2.w"] + p[f"{prefix}.ffn2.b"]


def _ln(x, prefix, params):
    p = params.tensors
    return nc.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def _drop(x, cfg, rng):
    return nc.dropout(x, cfg.dropout_p, rng)


def _encode_transformer(ids, params, cfg, rng):
    # scale token embeddings so they dominate the positional signal
    x = nc.embedding(params["word_emb"], ids) * float(np.sqrt(cfg.d_model))
    x = x + Tensor(positional_encoding(cfg.max_seq_len, cfg.d_model)[: len(ids)])
    x = _drop(x, cfg, rng)
    for layer in range(cfg.enc_layers):
        p = f"enc{layer}"
        h = _ln(x, f"{p}.ln1", params)
        x = x + _drop(_multi_head(h, h, f"{p}.attn", params, cfg.heads), cfg, rng)
        x = x + _drop(_ffn(_ln(x, f"{p}.ln2", params), p, params), cfg, rng)
    x = _ln(x, "enc_final_ln", params)
    return EncoderOutput(seq=x, summary=x[len(ids) - 1: len(ids)])


def _lstm_direction(inputs, prefix, params, hid, reverse):
    p = params.tensors
    steps = range(inputs.shape[0] - 1, -1, -1) if reverse \
        else range(inputs.shape[0])
    h = Tensor(np.zeros((1, hid)))
    c = Tensor(np.zeros((1, hid)))
    outputs = [None] * inputs.shape[0]
    for t in steps:
        x_t = inputs[t: t + 1]
        gates = x_t @ p[f"{prefix}.wx"] + h @ p[f"{prefix}.wh"] + p[f"{prefix}.bias"]
        i = nc.sigmoid(gates[:, 0 * hid: 1 * hid])
        f = nc.sigmoid(gates[:, 1 * hid: 2 * hid])
        g = nc.tanh(gates[:, 2 * hid: 3 * hid])
        o = nc.sigmoid(gates[:, 3 * hid: 4 * hid])
        c = f * c + i * g
        h = o * nc.tanh(c)
        outputs[t] = h
    return outputs, h


def _encode_bilstm(ids, params, cfg, rng):
    d = cfg.d_model
    hid = d // 2
    x = _drop(nc.embedding(params["word_emb"], ids), cfg, rng)
    final_f = final_b = None
    for layer in range(cfg.lstm_layers):
        outs_f, final_f = _lstm_direction(x, f"lstm{layer}.f", params, hid, False)
        outs_b, final_b = _lstm_direction(x, f"lstm{layer}.b", params, hid, True)
        per_pos = [nc.concat([f_t, b_t], axis=-1)
                   for f_t, b_t in zip(outs_f, outs_b)]
        x = nc.concat(per_pos, axis=0)
        if layer + 1 < cfg.lstm_layers:
            x = _drop(x, cfg, rng)
    p = params.tensors
    summary = nc.concat([final_f, final_b], axis=-1) \
        @ p["lstm_summary.w"] + p["lstm_summary.b"]
    return EncoderOutput(seq=x, summary=summary)


def encode(tokens, params, cfg, train=False, rng=None):
    """Contextualize a pattern's tokens; <eos> is appended here, never by
    callers. Unknown tokens map to <unk>."""
    if len(tokens) + 1 > cfg.max_seq_len:
        raise ShapeError(
            f"sequence of {len(tokens)} tokens exceeds max_seq_len {cfg.max_seq_len}")
    ids = params.vocab.encode(tokens, append_eos=True)
    drop_rng = rng if (train and cfg.dropout_p > 0) else None
    if cfg.encoder_kind == "transformer":
        return _encode_transformer(ids, params, cfg, drop_rng)
    return _encode_bilstm(ids, params, cfg, drop_rng)


def decode_facets(enc, params, cfg, k_count, train=False, rng=None):
    """Expand the encoder summary into ``k_count`` facet embeddings.

    Slot identity comes only from the per-slot input maps; the decoder
    attends bidirectionally over all slots (no causal mask) plus
    cross-attention to every encoder position.
    """
    if k_count < 1:
        raise ConfigError("facet count must be >= 1")
    if k_count > cfg.slot_count:
        raise ConfigError(
            f"k_count {k_count} exceeds instantiated slot maps {cfg.slot_count}")
    p = params.tensors
    drop_rng = rng if (train and cfg.dropout_p > 0) else None
    slots = nc.concat(
        [enc.summary @ p[f"ld{k}.w"] + p[f"ld{k}.b"] for k in range(k_count)],
        axis=0)
    x = _drop(slots, cfg, drop_rng)
    for layer in range(cfg.dec_layers):
        pre = f"dec{layer}"
        h = _ln(x, f"{pre}.ln1", params)
        x = x + _drop(_multi_head(h, h, f"{pre}.attn", params, cfg.heads),
                      cfg, drop_rng)
        x = x + _drop(_multi_head(_ln(x, f"{pre}.lnx", params), enc.seq,
                                  f"{pre}.xattn", params, cfg.heads),
                      cfg, drop_rng)
        x = x + _drop(_ffn(_ln(x, f"{pre}.ln2", params), pre, params),
                      cfg, drop_rng)
    x = _ln(x, "dec_final_ln", params)
    return FacetSet(facets=x @ p["lo.w"] + p["lo.b"])


def facet_count_for(row_kind, cfg):
    return cfg.K_rel if row_kind is RowKind.KB_RELATION else cfg.K


def facets_for_tokens(tokens, kind, params, cfg, train=False, rng=None):
    enc = encode(tokens, params, cfg, train=train, rng=rng)
    return decode_facets(enc, params, cfg, facet_count_for(kind, cfg),
                         train=train, rng=rng)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def save_checkpoint(params, cfg, path, extra=None):
    """Binary container: magic, version, named little-endian tensor records,
    then a JSON metadata blob (config, vocab, entity names)."""
    meta = {
        "config": asdict(cfg),
        "vocab": list(params.vocab.tokens),
        "entity_names": list(params.entity_names),
    }
    if extra:
        meta["extra"] = extra
    names = sorted(params.tensors)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            data = params.tensors[name].data
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", 0))  # dtype tag: float64
            fh.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.astype("<f8").tobytes())
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            (dtype_tag,) = struct.unpack("<B", _read_exact(fh, 1, "dtype"))
            if dtype_tag != 0:
                raise CheckpointError(f"unknown dtype tag {dtype_tag}")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            dims = struct.unpack(
                f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            nbytes = 8 * int(np.prod(dims, dtype=np.int64)) if rank else 8
            payload = _read_exact(fh, nbytes, f"tensor {name}")
            arr = np.frombuffer(payload, dtype="<f8").astype(np.float64)
            tensors[name] = nc.param(arr.reshape(dims))
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, "meta length"))
        meta = json.loads(_read_exact(fh, meta_len, "meta blob").decode("utf-8"))
    cfg = ModelConfig(**meta["config"])
    vocab = Vocabulary()
    for tok in meta["vocab"]:
        vocab.add(tok)
    if vocab.tokens != meta["vocab"]:
        raise CheckpointError("vocabulary in checkpoint is not in index order")
    params = ModelParams(tensors, vocab, list(meta["entity_names"]))
    return params, cfg
