"""Shared-encoder / multi-decoder transformer with explicit forward and backward.

One encoder stack is shared by three task-specific decoder stacks (one per
traversal order). Everything is plain numpy with hand-written gradients so
training runs bit-identically under a fixed seed in 64-bit mode and the
backward pass can be checked against finite differences.

Parameter naming:
    src_embed
    enc.{i}.ln1.g|b  enc.{i}.attn.wq|wk|wv|wo
    enc.{i}.ln2.g|b  enc.{i}.ffn.w1|b1|w2|b2
    enc.ln_f.g|b
    dec.{task}.tgt_embed
    dec.{task}.{i}.ln1.g|b      dec.{task}.{i}.self_attn.wq|wk|wv|wo
    dec.{task}.{i}.ln2.g|b      dec.{task}.{i}.cross_attn.wq|wk|wv|wo
    dec.{task}.{i}.ln3.g|b      dec.{task}.{i}.ffn.w1|b1|w2|b2
    dec.{task}.ln_f.g|b         dec.{task}.out.w|b
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from .dataset import PAD, BOS, EOS, TaskExample
from .expr import TraversalVariant

TASKS = ("pre", "in", "post")
_LN_EPS = 1e-5
_NEG = -1e30


class ModelError(Exception):
    pass


class ShapeMismatch(ModelError):
    pass


class SequenceTooLong(ModelError):
    pass


class IdOutOfRange(ModelError):
    pass


class UnknownTask(ModelError):
    pass


class EmptyInput(ModelError):
    pass


class EmptyTarget(ModelError):
    pass


@dataclass
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    d_model: int = 64
    n_enc_layers: int = 1
    n_dec_layers: int = 1
    n_heads: int = 4
    d_ffn: int = 0  # 0 means 4 * d_model
    max_src_len: int = 128
    max_tgt_len: int = 48
    dropout: float = 0.1
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_ffn == 0:
            self.d_ffn = 4 * self.d_model
        if self.d_model % self.n_heads != 0:
            raise ShapeMismatch(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        for name in ("src_vocab_size", "tgt_vocab_size", "d_model", "n_enc_layers",
                     "n_dec_layers", "n_heads", "d_ffn", "max_src_len", "max_tgt_len"):
            if getattr(self, name) < 1:
                raise ShapeMismatch(f"{name} must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ShapeMismatch(f"unsupported dtype {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def to_dict(self) -> dict:
        return asdict(self)


def task_key(task: TraversalVariant | str) -> str:
    key = task.value if isinstance(task, TraversalVariant) else task
    if key not in TASKS:
        raise UnknownTask(f"unknown task {task!r}")
    return key


@dataclass
class ParamStore:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    tasks: tuple[str, ...] = TASKS

    def copy(self) -> "ParamStore":
        return ParamStore(self.config, {k: v.copy() for k, v in self.tensors.items()},
                          self.tasks)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.tensors if n.startswith(prefix)]

    def size(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


@dataclass
class AttentionTrace:
    """Per-layer attention matrices from one forward pass; each entry is an
    array of shape (n_heads, n_queries, n_keys)."""
    enc_self: list[np.ndarray] = field(default_factory=list)
    dec_self: list[np.ndarray] = field(default_factory=list)
    cross: list[np.ndarray] = field(default_factory=list)


def param_count(config: ModelConfig, tasks: Sequence[str] = TASKS) -> int:
    """Closed-form parameter count; must equal ParamStore.size()."""
    d, f = config.d_model, config.d_ffn
    attn = 4 * d * d
    ffn = d * f + f + f * d + d
    ln = 2 * d
    enc = config.src_vocab_size * d + config.n_enc_layers * (2 * ln + attn + ffn) + ln
    vt = config.tgt_vocab_size
    dec = vt * d + config.n_dec_layers * (3 * ln + 2 * attn + ffn) + ln + d * vt + vt
    return enc + len(tasks) * dec


def init_params(
    config: ModelConfig,
    embedding_init: Optional[np.ndarray] = None,
    tasks: Sequence[str] = TASKS,
) -> ParamStore:
    """Xavier-uniform weights from the config seed; the source embedding table
    may be supplied (e.g. PCA-projected pretrained vectors)."""
    rng = np.random.default_rng(config.seed)
    dt = config.np_dtype
    d, f = config.d_model, config.d_ffn
    tensors: dict[str, np.ndarray] = {}

    def xavier(fan_in, fan_out, shape=None):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, shape or (fan_in, fan_out)).astype(dt)

    def add_ln(name):
        tensors[f"{name}.g"] = np.ones(d, dtype=dt)
        tensors[f"{name}.b"] = np.zeros(d, dtype=dt)

    def add_attn(name):
        for w in ("wq", "wk", "wv", "wo"):
            tensors[f"{name}.{w}"] = xavier(d, d)

    def add_ffn(name):
        tensors[f"{name}.w1"] = xavier(d, f)
        tensors[f"{name}.b1"] = np.zeros(f, dtype=dt)
        tensors[f"{name}.w2"] = xavier(f, d)
        tensors[f"{name}.b2"] = np.zeros(d, dtype=dt)

    if embedding_init is not None:
        if embedding_init.shape != (config.src_vocab_size, d):
            raise ShapeMismatch(
                f"embedding_init {embedding_init.shape}, "
                f"expected {(config.src_vocab_size, d)}"
            )
        tensors["src_embed"] = np.array(embedding_init, dtype=dt)
    else:
        tensors["src_embed"] = rng.normal(
            0.0, 1.0 / math.sqrt(d), (config.src_vocab_size, d)
        ).astype(dt)

    for i in range(config.n_enc_layers):
        add_ln(f"enc.{i}.ln1")
        add_attn(f"enc.{i}.attn")
        add_ln(f"enc.{i}.ln2")
        add_ffn(f"enc.{i}.ffn")
    add_ln("enc.ln_f")

    for task in tasks:
        task_key(task)
        tensors[f"dec.{task}.tgt_embed"] = rng.normal(
            0.0, 1.0 / math.sqrt(d), (config.tgt_vocab_size, d)
        ).astype(dt)
        for i in range(config.n_dec_layers):
            add_ln(f"dec.{task}.{i}.ln1")
            add_attn(f"dec.{task}.{i}.self_attn")
            add_ln(f"dec.{task}.{i}.ln2")
            add_attn(f"dec.{task}.{i}.cross_attn")
            add_ln(f"dec.{task}.{i}.ln3")
            add_ffn(f"dec.{task}.{i}.ffn")
        add_ln(f"dec.{task}.ln_f")
        tensors[f"dec.{task}.out.w"] = xavier(d, config.tgt_vocab_size)
        tensors[f"dec.{task}.out.b"] = np.zeros(config.tgt_vocab_size, dtype=dt)

    return ParamStore(config, tensors, tuple(tasks))


def positional_encoding(length: int, d_model: int, dtype) -> np.ndarray:
    pos = np.arange(length)[:, None].astype(np.float64)
    dim = np.arange(d_model // 2)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * dim / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe.astype(dtype)


# ---------------------------------------------------------------------------
# primitive forward/backward pairs (caches are plain dicts)
# ---------------------------------------------------------------------------


def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, {"xhat": xhat, "inv": inv, "g": g}


def _ln_bwd(dout, cache, grads, name):
    xhat, inv, g = cache["xhat"], cache["inv"], cache["g"]
    axes = tuple(range(dout.ndim - 1))
    grads[f"{name}.g"] += (dout * xhat).sum(axis=axes)
    grads[f"{name}.b"] += dout.sum(axis=axes)
    dxhat = dout * g
    m1 = dxhat.mean(-1, keepdims=True)
    m2 = (dxhat * xhat).mean(-1, keepdims=True)
    return inv * (dxhat - m1 - xhat * m2)


def _dropout_fwd(x, p, rng):
    if rng is None or p <= 0.0:
        return x, None
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * keep, keep


def _dropout_bwd(dout, keep):
    return dout if keep is None else dout * keep


def _split_heads(x, h):
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dk)


def _mha_fwd(params, name, x_q, x_kv, n_heads, add_mask, drop_p, rng, trace_list):
    t = params.tensors
    q = _split_heads(x_q @ t[f"{name}.wq"], n_heads)
    k = _split_heads(x_kv @ t[f"{name}.wk"], n_heads)
    v = _split_heads(x_kv @ t[f"{name}.wv"], n_heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale
    if add_mask is not None:
        scores = scores + add_mask
    scores -= scores.max(-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(-1, keepdims=True)
    if trace_list is not None:
        trace_list.append(attn[0].copy())
    ctx = _merge_heads(np.matmul(attn, v))
    out = ctx @ t[f"{name}.wo"]
    out, keep = _dropout_fwd(out, drop_p, rng)
    cache = {"name": name, "x_q": x_q, "x_kv": x_kv, "q": q, "k": k, "v": v,
             "attn": attn, "ctx": ctx, "scale": scale, "keep": keep, "h": n_heads}
    return out, cache


def _mha_bwd(dout, cache, params, grads):
    t = params.tensors
    name, h = cache["name"], cache["h"]
    dout = _dropout_bwd(dout, cache["keep"])
    grads[f"{name}.wo"] += np.tensordot(cache["ctx"], dout, axes=([0, 1], [0, 1]))
    dctx = _split_heads(dout @ t[f"{name}.wo"].T, h)
    attn, q, k, v = cache["attn"], cache["q"], cache["k"], cache["v"]
    dattn = np.matmul(dctx, v.transpose(0, 1, 3, 2))
    dv = np.matmul(attn.transpose(0, 1, 3, 2), dctx)
    dscores = attn * (dattn - (dattn * attn).sum(-1, keepdims=True))
    dscores *= cache["scale"]
    dq = np.matmul(dscores, k)
    dk = np.matmul(dscores.transpose(0, 1, 3, 2), q)
    dqm, dkm, dvm = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    grads[f"{name}.wq"] += np.tensordot(cache["x_q"], dqm, axes=([0, 1], [0, 1]))
    grads[f"{name}.wk"] += np.tensordot(cache["x_kv"], dkm, axes=([0, 1], [0, 1]))
    grads[f"{name}.wv"] += np.tensordot(cache["x_kv"], dvm, axes=([0, 1], [0, 1]))
    dx_q = dqm @ t[f"{name}.wq"].T
    dx_kv = dkm @ t[f"{name}.wk"].T + dvm @ t[f"{name}.wv"].T
    return dx_q, dx_kv


def _ffn_fwd(params, name, x, drop_p, rng):
    t = params.tensors
    pre = x @ t[f"{name}.w1"] + t[f"{name}.b1"]
    hid = np.maximum(pre, 0.0)
    out = hid @ t[f"{name}.w2"] + t[f"{name}.b2"]
    out, keep = _dropout_fwd(out, drop_p, rng)
    return out, {"name": name, "x": x, "pre": pre, "hid": hid, "keep": keep}


def _ffn_bwd(dout, cache, params, grads):
    t = params.tensors
    name = cache["name"]
    dout = _dropout_bwd(dout, cache["keep"])
    grads[f"{name}.w2"] += np.tensordot(cache["hid"], dout, axes=([0, 1], [0, 1]))
    grads[f"{name}.b2"] += dout.sum(axis=(0, 1))
    dhid = (dout @ t[f"{name}.w2"].T) * (cache["pre"] > 0)
    grads[f"{name}.w1"] += np.tensordot(cache["x"], dhid, axes=([0, 1], [0, 1]))
    grads[f"{name}.b1"] += dhid.sum(axis=(0, 1))
    return dhid @ t[f"{name}.w1"].T


def _sublayer_fwd(kind, params, name_ln, x, fwd, caches):
    normed, ln_cache = _ln_fwd(x, params[f"{name_ln}.g"], params[f"{name_ln}.b"])
    out, sub_cache = fwd(normed)
    caches.append((kind, name_ln, ln_cache, sub_cache))
    return x + out


# ---------------------------------------------------------------------------
# encoder / decoder forward with tape, and the mirrored backward
# ---------------------------------------------------------------------------


def _check_ids(ids, vocab_size, max_len, what):
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ShapeMismatch(f"{what} ids must be 2-d, got {ids.shape}")
    if ids.shape[1] > max_len:
        raise SequenceTooLong(f"{what} length {ids.shape[1]} > max {max_len}")
    if ids.shape[1] == 0:
        raise EmptyInput(f"empty {what} sequence")
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise IdOutOfRange(f"{what} id outside [0, {vocab_size})")
    return ids


def encode_batch(params: ParamStore, src_ids, rng=None, trace: AttentionTrace | None = None):
    """Forward the shared encoder over a padded batch; returns states and tape."""
    cfg = params.config
    src_ids = _check_ids(src_ids, cfg.src_vocab_size, cfg.max_src_len, "source")
    mask = src_ids != PAD
    if not mask.any(axis=1).all():
        raise EmptyInput("all-PAD source row")
    dt = cfg.np_dtype
    x = params["src_embed"][src_ids] + positional_encoding(
        src_ids.shape[1], cfg.d_model, dt
    )[None]
    add_mask = np.where(mask, 0.0, _NEG).astype(dt)[:, None, None, :]
    caches = []
    drop = cfg.dropout
    tl = trace.enc_self if trace is not None else None
    for i in range(cfg.n_enc_layers):
        x = _sublayer_fwd(
            "attn", params, f"enc.{i}.ln1", x,
            lambda normed, i=i: _mha_fwd(params, f"enc.{i}.attn", normed, normed,
                                         cfg.n_heads, add_mask, drop, rng, tl),
            caches,
        )
        x = _sublayer_fwd(
            "ffn", params, f"enc.{i}.ln2", x,
            lambda normed, i=i: _ffn_fwd(params, f"enc.{i}.ffn", normed, drop, rng),
            caches,
        )
    states, lnf_cache = _ln_fwd(x, params["enc.ln_f.g"], params["enc.ln_f.b"])
    tape = {"src_ids": src_ids, "mask": mask, "caches": caches, "lnf": lnf_cache}
    return states, tape


def decode_batch(params: ParamStore, task, states, src_mask, tgt_ids, rng=None,
                 trace: AttentionTrace | None = None):
    """Forward one task decoder over a padded target prefix batch."""
    cfg = params.config
    key = task_key(task)
    if f"dec.{key}.tgt_embed" not in params.tensors:
        raise UnknownTask(f"decoder {key!r} not present in this ParamStore")
    tgt_ids = _check_ids(tgt_ids, cfg.tgt_vocab_size, cfg.max_tgt_len, "target")
    dt = cfg.np_dtype
    t_len = tgt_ids.shape[1]
    x = params[f"dec.{key}.tgt_embed"][tgt_ids] + positional_encoding(
        t_len, cfg.d_model, dt
    )[None]
    causal = np.where(np.tril(np.ones((t_len, t_len), dtype=bool)), 0.0, _NEG)
    causal = causal.astype(dt)[None, None]
    cross_mask = np.where(src_mask, 0.0, _NEG).astype(dt)[:, None, None, :]
    caches = []
    drop = cfg.dropout
    tl_self = trace.dec_self if trace is not None else None
    tl_cross = trace.cross if trace is not None else None
    for i in range(cfg.n_dec_layers):
        x = _sublayer_fwd(
            "attn", params, f"dec.{key}.{i}.ln1", x,
            lambda normed, i=i: _mha_fwd(params, f"dec.{key}.{i}.self_attn", normed,
                                         normed, cfg.n_heads, causal, drop, rng,
                                         tl_self),
            caches,
        )
        x = _sublayer_fwd(
            "cross", params, f"dec.{key}.{i}.ln2", x,
            lambda normed, i=i: _mha_fwd(params, f"dec.{key}.{i}.cross_attn", normed,
                                         states, cfg.n_heads, cross_mask, drop, rng,
                                         tl_cross),
            caches,
        )
        x = _sublayer_fwd(
            "ffn", params, f"dec.{key}.{i}.ln3", x,
            lambda normed, i=i: _ffn_fwd(params, f"dec.{key}.{i}.ffn", normed,
                                         drop, rng),
            caches,
        )
    normed, lnf_cache = _ln_fwd(x, params[f"dec.{key}.ln_f.g"],
                                params[f"dec.{key}.ln_f.b"])
    logits = normed @ params[f"dec.{key}.out.w"] + params[f"dec.{key}.out.b"]
    tape = {"task": key, "tgt_ids": tgt_ids, "caches": caches, "lnf": lnf_cache,
            "normed": normed, "states": states}
    return logits, tape


def zero_grads(params: ParamStore) -> dict[str, np.ndarray]:
    return {n: np.zeros_like(v) for n, v in params.tensors.items()}


def _tape_bwd(dx, caches, params, grads):
    """Walk sublayer caches in reverse; returns (dx, d_states_accum)."""
    dstates = None
    for kind, name_ln, ln_cache, sub_cache in reversed(caches):
        if kind == "ffn":
            dsub = _ffn_bwd(dx, sub_cache, params, grads)
        elif kind == "attn":
            dq, dkv = _mha_bwd(dx, sub_cache, params, grads)
            dsub = dq + dkv
        else:  # cross
            dq, dkv = _mha_bwd(dx, sub_cache, params, grads)
            dsub = dq
            dstates = dkv if dstates is None else dstates + dkv
        dx = dx + _ln_bwd(dsub, ln_cache, grads, name_ln)
    return dx, dstates


def decode_bwd(dlogits, dec_tape, params, grads):
    """Backprop the decoder; returns gradient w.r.t. encoder states."""
    key = dec_tape["task"]
    grads[f"dec.{key}.out.w"] += np.tensordot(
        dec_tape["normed"], dlogits, axes=([0, 1], [0, 1])
    )
    grads[f"dec.{key}.out.b"] += dlogits.sum(axis=(0, 1))
    dx = dlogits @ params[f"dec.{key}.out.w"].T
    dx = _ln_bwd(dx, dec_tape["lnf"], grads, f"dec.{key}.ln_f")
    dx, dstates = _tape_bwd(dx, dec_tape["caches"], params, grads)
    np.add.at(grads[f"dec.{key}.tgt_embed"], dec_tape["tgt_ids"], dx)
    return dstates


def encode_bwd(dstates, enc_tape, params, grads):
    dx = _ln_bwd(dstates, enc_tape["lnf"], grads, "enc.ln_f")
    dx, _ = _tape_bwd(dx, enc_tape["caches"], params, grads)
    np.add.at(grads["src_embed"], enc_tape["src_ids"], dx)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def _log_softmax(logits):
    shifted = logits - logits.max(-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(-1, keepdims=True))


def loss_batch(logits, gold_full):
    """Token-averaged cross entropy; logit row t scores gold token t+1.

    logits: (B, T, V) over the BOS-prefixed target prefix gold_full[:, :-1];
    gold_full: (B, T+1) ids, PAD-padded. Returns (loss, dlogits).
    """
    gold = np.asarray(gold_full)[:, 1:]
    if logits.shape[:2] != gold.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs gold {gold.shape}")
    counted = gold != PAD
    n = int(counted.sum())
    if n == 0:
        raise EmptyTarget("no non-PAD gold tokens")
    logp = _log_softmax(logits)
    b_idx, t_idx = np.nonzero(counted)
    value = -logp[b_idx, t_idx, gold[b_idx, t_idx]].sum() / n
    dlogits = np.exp(logp)
    onehot_rows = np.zeros_like(dlogits)
    onehot_rows[b_idx, t_idx, gold[b_idx, t_idx]] = 1.0
    dlogits = (dlogits - onehot_rows) * counted[:, :, None] / n
    return float(value), dlogits


def loss(logits: np.ndarray, gold_target_ids: Sequence[int]) -> float:
    """Single-sequence cross entropy with teacher-forcing alignment."""
    value, _ = loss_batch(logits[None], np.asarray(gold_target_ids)[None])
    return value


# ---------------------------------------------------------------------------
# public single-example surface
# ---------------------------------------------------------------------------


def encode(params: ParamStore, source_ids: Sequence[int],
           capture_attention: bool = False):
    trace = AttentionTrace() if capture_attention else None
    states, _ = encode_batch(params, np.asarray(source_ids)[None], trace=trace)
    return states[0], trace


def decode_step(params: ParamStore, task, encoder_states: np.ndarray,
                target_prefix_ids: Sequence[int], capture_attention: bool = False):
    trace = AttentionTrace() if capture_attention else None
    src_mask = np.ones((1, encoder_states.shape[0]), dtype=bool)
    logits, _ = decode_batch(params, task, encoder_states[None], src_mask,
                             np.asarray(target_prefix_ids)[None], trace=trace)
    return logits[0], trace


def loss_and_grads_batch(params: ParamStore, task, src_ids, tgt_full, rng=None,
                         grads=None):
    """Forward + backward over a homogeneous-task padded batch."""
    if grads is None:
        grads = zero_grads(params)
    states, enc_tape = encode_batch(params, src_ids, rng=rng)
    logits, dec_tape = decode_batch(params, task, states, enc_tape["mask"],
                                    np.asarray(tgt_full)[:, :-1], rng=rng)
    value, dlogits = loss_batch(logits, tgt_full)
    dstates = decode_bwd(dlogits, dec_tape, params, grads)
    if dstates is None:
        dstates = np.zeros_like(states)
    encode_bwd(dstates, enc_tape, params, grads)
    return value, grads


def backward(params: ParamStore, example: TaskExample):
    """Loss and full gradient store for one training example (dropout off)."""
    src = np.asarray(example.source_ids)[None]
    tgt = np.asarray(example.target_ids)[None]
    return loss_and_grads_batch(params, example.task, src, tgt)


def greedy_decode(params: ParamStore, task, source_ids: Sequence[int],
                  max_len: int) -> list[int]:
    """Stepwise argmax (ties break to the lowest id); EOS is not returned."""
    states, _ = encode(params, source_ids)
    prefix = [BOS]
    out: list[int] = []
    for _ in range(max_len):
        logits, _ = decode_step(params, task, states, prefix)
        nxt = int(np.argmax(logits[-1]))
        if nxt == EOS:
            break
        out.append(nxt)
        prefix.append(nxt)
        if len(prefix) >= params.config.max_tgt_len:
            break
    return out
