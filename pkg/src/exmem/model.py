"""Decoder-only transformer with memory-layer attention.

The model is a standard pre-norm decoder (RMSNorm, rotary positions, grouped
query attention, gated-SiLU MLP) with one addition: the first L_mem blocks
can attend to explicit memories.  An explicit memory is a set of attention
key-value vectors encoded once from a reference text; at read time its keys
and values are concatenated in front of the context keys and values, fully
visible to every query, while the causal mask keeps applying to the context
segment only.

Position layout.  Let b = len(bos_ref_tokens).  Absolute positions 0..b-1
hold the modified BOS prefix, positions b..b+l_ref-1 form one shared interval
in which every memory's selected tokens sit at their within-reference
offsets, and the context (opened by the standard BOS separator) starts at
b+l_ref.  References are encoded behind the same prefix, so their stored
post-rotation keys are directly reusable at read time.

All model arithmetic is float32.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .config import NORM_EPS, ROPE_BASE, ModelConfig
from .errors import (
    CompatibilityError,
    ConfigError,
    FormatError,
    InputError,
    ShapeError,
    StateError,
    UsageError,
)
from .tokenizer import validate_tokens

MODEL_MAGIC = b"EM3M"
MODEL_VERSION = 1

# Ceiling on memories per chunk: n_refs_per_chunk times the widest sharing
# window used by the training layout (own chunk + 4 predecessors).
MAX_SHARE_FACTOR = 5

_F32 = np.float32


@dataclass
class LayerParams:
    w_q: np.ndarray      # (d, H * d_h)
    w_k: np.ndarray      # (d, H_kv * d_h)
    w_v: np.ndarray      # (d, H_kv * d_h)
    w_o: np.ndarray      # (H * d_h, d)
    w_gate: np.ndarray   # (d, W)
    w_up: np.ndarray     # (d, W)
    w_down: np.ndarray   # (W, d)
    attn_norm: np.ndarray  # (d,)
    mlp_norm: np.ndarray   # (d,)

    FIELD_ORDER = ("attn_norm", "w_q", "w_k", "w_v", "w_o",
                   "mlp_norm", "w_gate", "w_up", "w_down")


@dataclass
class Model:
    config: ModelConfig
    embedding: np.ndarray   # (n_vocab, d)
    layers: list[LayerParams]
    final_norm: np.ndarray  # (d,)
    lm_head: np.ndarray     # (d, n_vocab)


class KVCache:
    """Per-layer growing context keys (rotated), values, and positions.

    One decode session owns one cache; layers are appended in step by
    forward_chunk, and positions must be strictly increasing.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        shape = (config.H_kv, 0, config.d_h)
        self.keys = [np.zeros(shape, _F32) for _ in range(config.L)]
        self.values = [np.zeros(shape, _F32) for _ in range(config.L)]
        self.positions = [np.zeros(0, np.int64) for _ in range(config.L)]

    def append(self, layer: int, k: np.ndarray, v: np.ndarray, positions) -> None:
        cfg = self.config
        pos = np.asarray(positions, np.int64)
        if k.shape != v.shape or k.shape != (cfg.H_kv, len(pos), cfg.d_h):
            raise ShapeError(f"cache append shape {k.shape} inconsistent with "
                             f"(H_kv={cfg.H_kv}, n={len(pos)}, d_h={cfg.d_h})")
        old = self.positions[layer]
        merged = np.concatenate([old, pos])
        if len(merged) > 1 and not (np.diff(merged) > 0).all():
            raise StateError("cache positions must be strictly increasing")
        self.keys[layer] = np.concatenate([self.keys[layer], k], axis=1)
        self.values[layer] = np.concatenate([self.values[layer], v], axis=1)
        self.positions[layer] = merged

    def layer_len(self, layer: int) -> int:
        return self.positions[layer].shape[0]

    def __len__(self) -> int:
        return self.layer_len(0)

    @property
    def next_position(self) -> int:
        pos = self.positions[0]
        return int(pos[-1]) + 1 if len(pos) else 0

    def check_aligned(self) -> None:
        lengths = {self.layer_len(l) for l in range(self.config.L)}
        if len(lengths) != 1:
            raise StateError(f"cache layers out of step: lengths {sorted(lengths)}")

    def snapshot(self) -> "KVCache":
        c = KVCache(self.config)
        c.keys = [a.copy() for a in self.keys]
        c.values = [a.copy() for a in self.values]
        c.positions = [a.copy() for a in self.positions]
        return c


@dataclass
class ReferenceEncoding:
    """Full (pre-sparsification) KV of one reference, plus selection inputs.

    keys are stored post-rotation at the positions the memory will occupy at
    read time; values are unrotated.  sel_q / sel_k are the unrotated query
    and key projections used for attention-weight token selection, restricted
    to the reference tokens (the BOS prefix is excluded everywhere).
    """

    keys: np.ndarray       # (L_mem, H_kv, n, d_h)
    values: np.ndarray     # (L_mem, H_kv, n, d_h)
    sel_q: np.ndarray      # (L_mem, H, n, d_h)
    sel_k: np.ndarray      # (L_mem, H_kv, n, d_h)
    base_position: int     # absolute position of reference token 0 at read time
    ref_len: int


def rope_rotate(x: np.ndarray, positions) -> np.ndarray:
    """Rotary position encoding over the last axis.

    Adjacent pairs (x[2i], x[2i+1]) are rotated by angle p * base^(-2i/d_h).
    Accepts a single vector with a scalar position, or any (..., n, d_h)
    stack with per-token positions of length n.
    """
    x = np.asarray(x, _F32)
    d_h = x.shape[-1]
    if d_h % 2 != 0:
        raise ConfigError("d_h must be even")
    single = x.ndim == 1
    if single:
        x = x[None, :]
        positions = [positions]
    pos = np.asarray(positions, np.float64)
    inv_freq = ROPE_BASE ** (-np.arange(0, d_h, 2, dtype=np.float64) / d_h)
    angles = pos[:, None] * inv_freq
    cos = np.cos(angles).astype(_F32)
    sin = np.sin(angles).astype(_F32)
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out[0] if single else out


def group_views(per_kv_head: list, H: int) -> list:
    """Fan out one entry per kv head to one entry per query head.

    Query heads in the same GQA group receive the identical object, so the
    sharing is structural rather than by copy.
    """
    group = H // len(per_kv_head)
    return [per_kv_head[h // group] for h in range(H)]


def _rmsnorm(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + _F32(NORM_EPS)) * weight


def _mlp(x: np.ndarray, p: LayerParams) -> np.ndarray:
    gate = x @ p.w_gate
    gate = gate / (_F32(1.0) + np.exp(-gate)) * (x @ p.w_up)
    return gate @ p.w_down


def _validate_memories(cfg: ModelConfig, layer: int, memories) -> None:
    if not memories:
        return
    if layer >= cfg.L_mem:
        raise UsageError(f"layer {layer} is not a memory layer (L_mem={cfg.L_mem})")
    for m in memories:
        if m.keys.ndim != 4 or m.keys.shape != m.values.shape:
            raise ShapeError("memory keys/values must be (L_mem, H_kv, n, d_h)")
        if m.keys.shape[0] < cfg.L_mem or m.keys.shape[1] != cfg.H_kv \
                or m.keys.shape[3] != cfg.d_h:
            raise ShapeError(f"memory shape {m.keys.shape} does not match "
                             f"(L_mem={cfg.L_mem}, H_kv={cfg.H_kv}, d_h={cfg.d_h})")


def attention_with_memory(model: Model, layer: int, x: np.ndarray,
                          cache: KVCache, memories, positions,
                          return_probs: bool = False):
    """One attention sublayer over [memories || context].

    x is the normalized input to the projections, one row per new token.
    The new keys and values are appended to the cache (keys rotated at their
    absolute positions); scores for each query head run over the
    concatenation of its kv head's memory keys and context keys, with one
    softmax across both segments.  Memories are fully visible; the causal
    mask applies only to the context.  Memory keys arrive already rotated.
    """
    cfg = model.config
    _validate_memories(cfg, layer, memories)
    p = model.layers[layer]
    n = x.shape[0]
    if x.shape != (n, cfg.d):
        raise ShapeError(f"x must be (n, d={cfg.d}), got {x.shape}")
    pos = np.asarray(positions, np.int64)
    if pos.shape != (n,):
        raise ShapeError("positions must have one entry per token")

    q = (x @ p.w_q).reshape(n, cfg.H, cfg.d_h).transpose(1, 0, 2)
    k = (x @ p.w_k).reshape(n, cfg.H_kv, cfg.d_h).transpose(1, 0, 2)
    v = (x @ p.w_v).reshape(n, cfg.H_kv, cfg.d_h).transpose(1, 0, 2)
    q = rope_rotate(q, pos)
    k = rope_rotate(k, pos)
    cache.append(layer, k, v, pos)

    ctx_k = cache.keys[layer]
    ctx_v = cache.values[layer]
    visible = cache.positions[layer][None, :] <= pos[:, None]

    ctx_k_heads = [ctx_k[i] for i in range(cfg.H_kv)]
    ctx_v_heads = [ctx_v[i] for i in range(cfg.H_kv)]
    if memories:
        mem_k = np.concatenate([m.keys[layer] for m in memories], axis=1)
        mem_v = np.concatenate([m.values[layer] for m in memories], axis=1)
        mem_k_heads = [mem_k[i] for i in range(cfg.H_kv)]
        mem_v_heads = [mem_v[i] for i in range(cfg.H_kv)]
        mem_k_by_head = group_views(mem_k_heads, cfg.H)
        mem_v_by_head = group_views(mem_v_heads, cfg.H)
    k_by_head = group_views(ctx_k_heads, cfg.H)
    v_by_head = group_views(ctx_v_heads, cfg.H)

    scale = _F32(1.0 / math.sqrt(cfg.d_h))
    neg_inf = _F32(-np.inf)
    out = np.empty((n, cfg.H, cfg.d_h), _F32)
    probs_by_head = []
    for h in range(cfg.H):
        s_ctx = (q[h] @ k_by_head[h].T) * scale
        s_ctx = np.where(visible, s_ctx, neg_inf)
        if memories:
            s_mem = (q[h] @ mem_k_by_head[h].T) * scale
            scores = np.concatenate([s_mem, s_ctx], axis=1)
            vals = np.concatenate([mem_v_by_head[h], v_by_head[h]], axis=0)
        else:
            scores = s_ctx
            vals = v_by_head[h]
        scores = scores - scores.max(axis=1, keepdims=True)
        e = np.exp(scores)
        probs = e / e.sum(axis=1, keepdims=True)
        out[:, h, :] = probs @ vals
        if return_probs:
            probs_by_head.append(probs)
    y = out.reshape(n, cfg.H * cfg.d_h) @ p.w_o
    return (y, probs_by_head) if return_probs else y


def forward_chunk(model: Model, tokens, cache: KVCache, memories=(),
                  positions=None) -> np.ndarray:
    """Forward one chunk of tokens, returning logits of shape (n, n_vocab).

    Memory layers attend to the given memories; later layers run plain
    causal attention.  The cache is extended in place.
    """
    cfg = model.config
    tokens = list(tokens)
    n = len(tokens)
    if n == 0:
        raise InputError("empty chunk")
    if n > cfg.l_chunk:
        raise InputError(f"chunk of {n} tokens exceeds l_chunk={cfg.l_chunk}")
    validate_tokens(tokens, cfg.n_vocab)
    memories = list(memories)
    if len(memories) > cfg.n_refs_per_chunk * MAX_SHARE_FACTOR:
        raise UsageError(f"{len(memories)} memories exceeds the layout ceiling "
                         f"{cfg.n_refs_per_chunk * MAX_SHARE_FACTOR}")
    _validate_memories(cfg, 0, memories)
    cache.check_aligned()
    if positions is None:
        start = cache.next_position
        pos = np.arange(start, start + n, dtype=np.int64)
    else:
        pos = np.asarray(positions, np.int64)
        if pos.shape != (n,):
            raise ShapeError("positions must have one entry per token")

    x = model.embedding[tokens]
    for layer in range(cfg.L):
        p = model.layers[layer]
        layer_mems = memories if layer < cfg.L_mem else ()
        x = x + attention_with_memory(model, layer, _rmsnorm(x, p.attn_norm),
                                      cache, layer_mems, pos)
        x = x + _mlp(_rmsnorm(x, p.mlp_norm), p)
    return _rmsnorm(x, model.final_norm) @ model.lm_head


def start_session(model: Model) -> tuple[KVCache, np.ndarray]:
    """Open a decode session: fresh cache primed with the modified BOS.

    Feeds the modified-BOS prefix at positions 0..b-1 and the standard BOS
    separator at position b+l_ref, leaving the memory interval in between
    unoccupied by context.  Returns the cache and the separator's logits row.
    """
    cfg = model.config
    b = cfg.prefix_len
    if b + 1 > cfg.l_chunk:
        raise ConfigError(f"l_chunk={cfg.l_chunk} cannot hold the session "
                          f"prefix of {b + 1} tokens")
    cache = KVCache(cfg)
    tokens = list(cfg.bos_ref_tokens) + [cfg.bos_ctx_token]
    positions = np.concatenate([np.arange(b), [cfg.context_start]]).astype(np.int64)
    logits = forward_chunk(model, tokens, cache, (), positions)
    return cache, logits[-1]


def encode_reference_kv(model: Model, ref_tokens,
                        key_position_offset: int | None = None) -> ReferenceEncoding:
    """Encode one reference into its full per-layer KV.

    The reference attends only to itself behind the modified-BOS prefix;
    attention runs in blocks 0..L_mem-1 and MLPs in blocks 0..L_mem-2, since
    nothing deeper feeds the retained keys and values.  Stored keys are
    rotated at the positions the memory occupies at read time (the shared
    interval by default); values stay unrotated.  The prefix is excluded
    from every returned tensor.
    """
    cfg = model.config
    ref_tokens = list(ref_tokens)
    n = len(ref_tokens)
    if n == 0:
        raise InputError("empty reference")
    if n > cfg.l_ref:
        raise InputError(f"reference of {n} tokens exceeds l_ref={cfg.l_ref}")
    validate_tokens(ref_tokens, cfg.n_vocab)
    b = cfg.prefix_len
    base = cfg.memory_interval_start if key_position_offset is None \
        else int(key_position_offset)

    tokens = list(cfg.bos_ref_tokens) + ref_tokens
    total = b + n
    positions = np.arange(total, dtype=np.int64)
    store_positions = np.arange(base, base + n, dtype=np.int64)

    keys = np.empty((cfg.L_mem, cfg.H_kv, n, cfg.d_h), _F32)
    values = np.empty_like(keys)
    sel_k = np.empty_like(keys)
    sel_q = np.empty((cfg.L_mem, cfg.H, n, cfg.d_h), _F32)

    scratch = KVCache(cfg)
    x = model.embedding[tokens]
    for layer in range(cfg.L_mem):
        p = model.layers[layer]
        xn = _rmsnorm(x, p.attn_norm)
        sel_q[layer] = (xn @ p.w_q).reshape(total, cfg.H, cfg.d_h) \
            .transpose(1, 0, 2)[:, b:, :]
        k_unrot = (xn @ p.w_k).reshape(total, cfg.H_kv, cfg.d_h) \
            .transpose(1, 0, 2)[:, b:, :]
        sel_k[layer] = k_unrot
        values[layer] = (xn @ p.w_v).reshape(total, cfg.H_kv, cfg.d_h) \
            .transpose(1, 0, 2)[:, b:, :]
        keys[layer] = rope_rotate(k_unrot, store_positions)
        x = x + attention_with_memory(model, layer, xn, scratch, (), positions)
        if layer < cfg.L_mem - 1:
            x = x + _mlp(_rmsnorm(x, p.mlp_norm), p)
    return ReferenceEncoding(keys=keys, values=values, sel_q=sel_q, sel_k=sel_k,
                             base_position=base, ref_len=n)


def encode_references(model: Model, refs: list) -> list[ReferenceEncoding]:
    """Encode a batch of references; each is independent of the others."""
    return [encode_reference_kv(model, r) for r in refs]


def encode_reference_flops(config: ModelConfig) -> float:
    """Flop count of encoding one l_ref-token reference, term by term.

    Counts 2 flops per multiply-add: QKVO projections for L_mem attention
    sublayers, causally-halved score and value products, and L_mem-1 MLP
    sublayers.  The modified-BOS prefix and normalization costs are excluded
    from the accounting.
    """
    d, dh = float(config.d), float(config.d_h)
    lr = float(config.l_ref)
    proj = lr * (2.0 * d * d + 2.0 * d * config.H_kv * dh)
    score_av = 2.0 * (lr * lr / 2.0) * d + 2.0 * (lr * lr / 2.0) * d
    mlp = lr * 3.0 * d * config.W
    return 2.0 * (config.L_mem * (proj + score_av) + (config.L_mem - 1) * mlp)


def n_params_non_embedding(config: ModelConfig) -> int:
    """Parameter count excluding the token embedding and LM head."""
    d = config.d
    per_layer = 2 * d * d + 2 * d * config.H_kv * config.d_h \
        + 3 * d * config.W + 2 * d
    return config.L * per_layer + d


def init_model(config: ModelConfig, seed: int) -> Model:
    """Deterministic random initialization; same (config, seed) gives
    bitwise-identical parameters."""
    config.validate()
    rng = np.random.default_rng(seed)
    d = config.d
    scale = _F32(0.02)

    def draw(*shape):
        return rng.standard_normal(shape, dtype=_F32) * scale

    embedding = draw(config.n_vocab, d)
    layers = []
    for _ in range(config.L):
        layers.append(LayerParams(
            w_q=draw(d, config.H * config.d_h),
            w_k=draw(d, config.H_kv * config.d_h),
            w_v=draw(d, config.H_kv * config.d_h),
            w_o=draw(config.H * config.d_h, d),
            w_gate=draw(d, config.W),
            w_up=draw(d, config.W),
            w_down=draw(config.W, d),
            attn_norm=np.ones(d, _F32),
            mlp_norm=np.ones(d, _F32),
        ))
    final_norm = np.ones(d, _F32)
    lm_head = draw(d, config.n_vocab)
    return Model(config=config, embedding=embedding, layers=layers,
                 final_norm=final_norm, lm_head=lm_head)


def _model_arrays(model: Model):
    yield model.embedding
    for p in model.layers:
        for name in LayerParams.FIELD_ORDER:
            yield getattr(p, name)
    yield model.final_norm
    yield model.lm_head


def save_model(model: Model, path) -> None:
    """Write the checkpoint: magic, version, packed config, then all
    parameters as little-endian f32 in documented order."""
    blob = bytearray()
    blob += MODEL_MAGIC
    blob += struct.pack("<H", MODEL_VERSION)
    blob += model.config.pack()
    for arr in _model_arrays(model):
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(blob)


def load_model(path) -> Model:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MODEL_MAGIC:
        raise FormatError("not a model file (bad magic)")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != MODEL_VERSION:
        raise CompatibilityError(f"model file version {version}, expected {MODEL_VERSION}")
    config, used = ModelConfig.unpack(buf, 6)
    config.validate()
    offset = 6 + used
    d = config.d

    def take(*shape):
        nonlocal offset
        count = int(np.prod(shape))
        end = offset + count * 4
        if end > len(buf):
            raise FormatError("model file truncated")
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
        offset = end
        return arr.reshape(shape).astype(_F32)

    embedding = take(config.n_vocab, d)
    layers = []
    for _ in range(config.L):
        fields = {}
        shapes = {
            "attn_norm": (d,), "w_q": (d, config.H * config.d_h),
            "w_k": (d, config.H_kv * config.d_h),
            "w_v": (d, config.H_kv * config.d_h),
            "w_o": (config.H * config.d_h, d), "mlp_norm": (d,),
            "w_gate": (d, config.W), "w_up": (d, config.W),
            "w_down": (config.W, d),
        }
        for name in LayerParams.FIELD_ORDER:
            fields[name] = take(*shapes[name])
        layers.append(LayerParams(**fields))
    final_norm = take(d)
    lm_head = take(d, config.n_vocab)
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes in model file")
    return Model(config=config, embedding=embedding, layers=layers,
                 final_norm=final_norm, lm_head=lm_head)
