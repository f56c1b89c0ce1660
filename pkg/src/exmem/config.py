"""Model shape configuration.

Two named configurations matter: ``toy()`` is the desk-scale default used by
tests and the CLI, and ``reference()`` is the full-scale 2.4B shape that the
cost and storage accounting default to.  Explicit memories are sparse
attention key-value tensors; every shape here feeds either the transformer
itself or the accounting of those tensors.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

from . import tokenizer
from .errors import ConfigError, FormatError

NORM_EPS = 1e-5
ROPE_BASE = 10000.0


@dataclass(frozen=True)
class ModelConfig:
    L: int = 8              # transformer blocks
    H: int = 8              # query heads
    H_kv: int = 2           # key-value heads (GQA)
    d_h: int = 16           # head dimension
    W: int = 128            # MLP width
    n_vocab: int = 512
    L_mem: int = 4          # memory layers: the first L_mem blocks read/write memories
    l_ref: int = 32         # max reference length in tokens
    l_mem: int = 4          # sparse tokens kept per (layer, kv head) per memory
    l_chunk: int = 16       # decode chunk length, the unit of memory recall
    n_refs_per_chunk: int = 5
    bos_ref_tokens: tuple[int, ...] = tokenizer.REF_PREFIX_TOKENS
    bos_ctx_token: int = tokenizer.BOS_TOKEN

    @property
    def d(self) -> int:
        """Hidden dimension."""
        return self.H * self.d_h

    @property
    def prefix_len(self) -> int:
        """Length b of the modified-BOS prefix."""
        return len(self.bos_ref_tokens)

    @property
    def memory_interval_start(self) -> int:
        """First absolute position of the shared memory interval."""
        return self.prefix_len

    @property
    def context_start(self) -> int:
        """First absolute position of the context segment (the separator BOS)."""
        return self.prefix_len + self.l_ref

    def validate(self) -> None:
        c = self
        if min(c.L, c.H, c.H_kv, c.d_h, c.W, c.n_vocab, c.L_mem, c.l_ref,
               c.l_mem, c.l_chunk) < 1:
            raise ConfigError("all shape parameters must be >= 1")
        if c.n_refs_per_chunk < 0:
            raise ConfigError("n_refs_per_chunk must be >= 0")
        if c.d_h % 2 != 0:
            raise ConfigError("d_h must be even")
        if c.H % c.H_kv != 0:
            raise ConfigError(f"H={c.H} not divisible by H_kv={c.H_kv}")
        if c.L_mem > c.L:
            raise ConfigError(f"L_mem={c.L_mem} exceeds L={c.L}")
        if c.l_mem > c.l_ref:
            raise ConfigError(f"l_mem={c.l_mem} exceeds l_ref={c.l_ref}")
        if not c.bos_ref_tokens:
            raise ConfigError("bos_ref_tokens must be non-empty")
        for t in (*c.bos_ref_tokens, c.bos_ctx_token):
            if not 0 <= t < c.n_vocab:
                raise ConfigError(f"BOS token id {t} outside vocabulary {c.n_vocab}")

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        cfg = cls(**overrides)
        cfg.validate()
        return cfg

    @classmethod
    def reference(cls) -> "ModelConfig":
        """The full-scale shape: 44 blocks, 40 heads over 8 kv heads, 2.4B params."""
        cfg = cls(L=44, H=40, H_kv=8, d_h=80, W=3200, n_vocab=60416,
                  L_mem=22, l_ref=128, l_mem=8, l_chunk=64, n_refs_per_chunk=5)
        cfg.validate()
        return cfg

    def pack(self) -> bytes:
        """Fixed-order little-endian integer encoding, used in files and hashing."""
        ints = [self.L, self.H, self.H_kv, self.d_h, self.W, self.n_vocab,
                self.L_mem, self.l_ref, self.l_mem, self.l_chunk,
                self.n_refs_per_chunk, self.bos_ctx_token,
                len(self.bos_ref_tokens), *self.bos_ref_tokens]
        return struct.pack(f"<{len(ints)}I", *ints)

    @classmethod
    def unpack(cls, buf: bytes, offset: int = 0) -> tuple["ModelConfig", int]:
        """Inverse of pack(); returns (config, bytes consumed past offset)."""
        fixed = 13
        need = fixed * 4
        if len(buf) - offset < need:
            raise FormatError("config block truncated")
        vals = struct.unpack_from(f"<{fixed}I", buf, offset)
        n_bos = vals[12]
        if len(buf) - offset < need + n_bos * 4:
            raise FormatError("config block truncated in bos_ref_tokens")
        bos = struct.unpack_from(f"<{n_bos}I", buf, offset + need)
        cfg = cls(L=vals[0], H=vals[1], H_kv=vals[2], d_h=vals[3], W=vals[4],
                  n_vocab=vals[5], L_mem=vals[6], l_ref=vals[7], l_mem=vals[8],
                  l_chunk=vals[9], n_refs_per_chunk=vals[10],
                  bos_ref_tokens=tuple(bos), bos_ctx_token=vals[11])
        return cfg, need + n_bos * 4

    def hash(self) -> int:
        """Stable 64-bit digest of the packed config, stored in artifact headers."""
        digest = hashlib.blake2b(self.pack(), digest_size=8).digest()
        return int.from_bytes(digest, "little")
