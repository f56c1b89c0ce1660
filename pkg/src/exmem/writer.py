"""Sparsification: full reference KV -> ExplicitMemory.

Token selection is attention-based.  For each memory layer and kv head, a
weight per reference token j aggregates how much the reference's own queries
attend to key j, computed from the unrotated projections with no causal mask
(the read-time position of a memory therefore cannot influence which tokens
are kept).  The top l_mem tokens per (layer, head) survive.

Exact mode sums true softmax rows, so the weights of a head sum to the
number of contributing query rows.  Approximate mode sums raw exponentials,
which is cheaper at scale and order-equivalent under a uniform shift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Model, ReferenceEncoding, encode_reference_kv
from .errors import InputError, NumericError, ShapeError, UsageError

MODE_EXACT = "exact"
MODE_APPROX = "approximate"

# Shift threshold for approximate mode: exp of anything above this would
# overflow float64, so the whole score matrix is shifted down uniformly.
_EXP_LIMIT = 700.0


@dataclass
class TokenWeights:
    weights: np.ndarray  # (n,) float64, zero at excluded positions
    mode: str


@dataclass
class ExplicitMemory:
    """Sparse KV of one reference: what the bank stores and attention reads."""

    keys: np.ndarray       # (L_mem, H_kv, n_sel, d_h) f32, rotated
    values: np.ndarray     # (L_mem, H_kv, n_sel, d_h) f32, unrotated
    positions: np.ndarray  # (L_mem, H_kv, n_sel) int32, absolute read positions
    ref_id: int | None = None
    quantized: bool = False  # True when reconstructed from codes

    def tensor(self) -> np.ndarray:
        """Stacked (L_mem, 2, H_kv, n_sel, d_h) view: axis 1 is key/value."""
        return np.stack([self.keys, self.values], axis=1)

    @property
    def n_tokens(self) -> int:
        return self.keys.shape[2]

    def validate(self) -> None:
        if self.keys.shape != self.values.shape or self.keys.ndim != 4:
            raise ShapeError("keys and values must share shape (L_mem, H_kv, n_sel, d_h)")
        if self.positions.shape != self.keys.shape[:3]:
            raise ShapeError("positions must be (L_mem, H_kv, n_sel)")
        if self.positions.shape[2] > 1 \
                and not (np.diff(self.positions, axis=2) > 0).all():
            raise ShapeError("selected positions must be strictly increasing")


def _scores(q: np.ndarray, k: np.ndarray, excluded) -> tuple[np.ndarray, np.ndarray]:
    q = np.asarray(q, np.float64)
    k = np.asarray(k, np.float64)
    n, d_h = k.shape
    if q.shape[-1] != d_h or q.shape[-2] != n:
        raise ShapeError(f"q {q.shape} incompatible with k {k.shape}")
    excl = np.zeros(n, bool)
    for j in excluded:
        if not 0 <= j < n:
            raise InputError(f"excluded position {j} out of range [0, {n})")
        excl[j] = True
    if excl.all():
        raise InputError("all positions excluded")
    s = q @ k.T / math.sqrt(d_h)
    return s, excl


def token_weights_exact(q: np.ndarray, k: np.ndarray, excluded=()) -> TokenWeights:
    """w_j = sum over query rows i of softmax_j(q_i . k_j / sqrt(d_h)).

    The softmax runs over non-excluded j only; excluded rows i contribute
    nothing.  q may carry leading axes (e.g. the query heads of one GQA
    group); all of them are summed over.
    """
    s, excl = _scores(q, k, excluded)
    s[..., excl] = -np.inf
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)
    p[..., excl, :] = 0.0
    w = p.sum(axis=tuple(range(p.ndim - 1)))
    return TokenWeights(weights=w, mode=MODE_EXACT)


def token_weights_approx(q: np.ndarray, k: np.ndarray, excluded=()) -> TokenWeights:
    """w_j = sum over rows i of exp(q_i . k_j / sqrt(d_h)), unnormalized.

    A single uniform max-subtraction is applied only when the peak score
    would overflow, so ordinary inputs keep their raw exponential values and
    the top-k order is never perturbed.
    """
    s, excl = _scores(q, k, excluded)
    s[..., excl] = -np.inf
    peak = float(s.max())
    if peak > _EXP_LIMIT:
        s = s - (peak - _EXP_LIMIT)
    e = np.exp(s)
    e[..., excl, :] = 0.0
    w = e.sum(axis=tuple(range(e.ndim - 1)))
    if not np.isfinite(w).all():
        raise NumericError("approximate token weights overflowed")
    return TokenWeights(weights=w, mode=MODE_APPROX)


def select_topk(weights: np.ndarray, k: int, eligible=None) -> np.ndarray:
    """Indices of the k largest weights among eligible positions, ties to the
    lower index, returned sorted ascending."""
    if k < 1:
        raise UsageError("k must be >= 1")
    w = np.asarray(weights, np.float64)
    if eligible is None:
        cand = np.arange(len(w))
    else:
        cand = np.asarray(sorted(set(int(i) for i in eligible)))
        if len(cand) == 0:
            raise InputError("no eligible positions")
        if cand[0] < 0 or cand[-1] >= len(w):
            raise InputError("eligible position out of range")
    order = np.argsort(-w[cand], kind="stable")[:min(k, len(cand))]
    return np.sort(cand[order])


def sparsify(enc: ReferenceEncoding, weights: np.ndarray, k: int,
             ref_id: int | None = None, eligible=None) -> ExplicitMemory:
    """Keep the top-k tokens per (layer, kv head) of a full reference KV.

    weights has shape (L_mem, H_kv, n).  When fewer than k tokens are
    eligible, all of them are kept and the memory is simply shorter.
    """
    weights = np.asarray(weights, np.float64)
    L_mem, H_kv, n = weights.shape
    if enc.keys.shape[:2] != (L_mem, H_kv) or enc.ref_len != n:
        raise ShapeError(f"weights {weights.shape} inconsistent with encoding "
                         f"{enc.keys.shape}")
    n_sel = min(k, n if eligible is None else len(set(map(int, eligible))))
    d_h = enc.keys.shape[3]
    keys = np.empty((L_mem, H_kv, n_sel, d_h), np.float32)
    values = np.empty_like(keys)
    positions = np.empty((L_mem, H_kv, n_sel), np.int32)
    for layer in range(L_mem):
        for head in range(H_kv):
            idx = select_topk(weights[layer, head], k, eligible)
            keys[layer, head] = enc.keys[layer, head, idx]
            values[layer, head] = enc.values[layer, head, idx]
            positions[layer, head] = enc.base_position + idx
    mem = ExplicitMemory(keys=keys, values=values, positions=positions,
                         ref_id=ref_id)
    mem.validate()
    return mem


def write_memory(model: Model, ref_tokens, mode: str = MODE_EXACT,
                 ref_id: int | None = None,
                 key_position_offset: int | None = None) -> ExplicitMemory:
    """Full pipeline: encode reference, weight tokens, keep top l_mem."""
    if mode not in (MODE_EXACT, MODE_APPROX):
        raise UsageError(f"unknown selection mode {mode!r}")
    cfg = model.config
    enc = encode_reference_kv(model, ref_tokens,
                              key_position_offset=key_position_offset)
    weigh = token_weights_exact if mode == MODE_EXACT else token_weights_approx
    group = cfg.H // cfg.H_kv
    weights = np.empty((cfg.L_mem, cfg.H_kv, enc.ref_len), np.float64)
    for layer in range(cfg.L_mem):
        for head in range(cfg.H_kv):
            q_group = enc.sel_q[layer, head * group:(head + 1) * group]
            weights[layer, head] = weigh(q_group, enc.sel_k[layer, head]).weights
    return sparsify(enc, weights, cfg.l_mem, ref_id=ref_id)
