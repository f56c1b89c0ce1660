"""Chunked inference with per-chunk memory recall.

A session processes the prompt in l_chunk-token chunks.  Each chunk embeds
its own tokens, retrieves the top references, fetches their explicit
memories (LRU cache, then bank, then cold encoding), and forwards with those
memories attached.  During decoding the active memories are replaced every
l_chunk generated tokens, querying with exactly those tokens; the first
decoded chunk inherits the last prompt retrieval, so a session with p prompt
and g generated tokens (both multiples of l_chunk) performs
(p + g) / l_chunk - 1 retrievals.

Warm mode reads prebuilt memories from the bank; cold mode encodes each
reference on its first retrieval and optionally appends it to the bank.
Both modes produce bitwise-identical outputs over a raw bank because the
write pipeline is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .bank import MemoryBank, MemoryCache, dequantize_memory, quantize_memory
from .errors import (
    CompatibilityError,
    ConfigError,
    InputError,
    StateError,
)
from .model import Model, forward_chunk, start_session
from .retrieval import (
    EMBED_DIM,
    NgramEmbedder,
    RemoteEmbedder,
    RetrievalIndex,
    filter_leakage,
)
from .writer import MODE_APPROX, MODE_EXACT, write_memory

MODE_WARM = "warm"
MODE_COLD = "cold"


@dataclass
class EngineConfig:
    """Key = value engine configuration, also loadable from a file."""

    model: str | None = None
    bank: str | None = None
    index: str | None = None
    codebook: str | None = None
    cache_capacity: int = 64
    chunk_size: int | None = None
    n_refs: int | None = None
    filter_threshold: float | None = None
    mode: str = MODE_WARM
    remote: str | None = None
    tolerant: bool = False
    embed_endpoint: str | None = None
    timeout: float = 5.0


_BOOL_VALUES = {"true": True, "false": False, "1": True, "0": False,
                "yes": True, "no": False}


def parse_engine_config(path) -> EngineConfig:
    """Parse a key = value file (one pair per line, # comments)."""
    field_types = {f.name: f.type for f in fields(EngineConfig)}
    cfg = EngineConfig()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in field_types:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                setattr(cfg, key, _coerce(key, value))
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: bad value {value!r} "
                                  f"for {key}") from None
    return cfg


def _coerce(key: str, value: str):
    if key in ("cache_capacity", "chunk_size", "n_refs"):
        return int(value)
    if key in ("filter_threshold", "timeout"):
        return float(value)
    if key == "tolerant":
        try:
            return _BOOL_VALUES[value.lower()]
        except KeyError:
            raise ValueError(value) from None
    if key == "mode":
        if value not in (MODE_WARM, MODE_COLD):
            raise ValueError(value)
        return value
    return value


def merge_engine_config(base: EngineConfig, override: EngineConfig,
                        defaults: EngineConfig | None = None) -> EngineConfig:
    """Overlay override's non-default fields onto base."""
    defaults = defaults or EngineConfig()
    out = replace(base)
    for f in fields(EngineConfig):
        value = getattr(override, f.name)
        if value != getattr(defaults, f.name):
            setattr(out, f.name, value)
    return out


@dataclass(frozen=True)
class TrainLayout:
    """Reference-visibility layout for continual-train sequences.

    Each chunk of the training sequence has one attached reference slot and
    may attend to its own slot plus the previous `window` slots.
    """

    seq_len: int
    chunk_size: int
    window: int
    l_ref: int
    n_chunks: int
    visible: tuple[tuple[int, ...], ...]

    @property
    def n_ref_tokens(self) -> int:
        return self.n_chunks * self.l_ref

    def chunk_slice(self, i: int) -> tuple[int, int]:
        return i * self.chunk_size, (i + 1) * self.chunk_size

    def token_mask(self) -> np.ndarray:
        """Boolean (seq_len, n_chunks * l_ref) visibility of reference tokens
        to sequence tokens, for external training code."""
        mask = np.zeros((self.seq_len, self.n_ref_tokens), bool)
        for i, slots in enumerate(self.visible):
            lo, hi = self.chunk_slice(i)
            for s in slots:
                mask[lo:hi, s * self.l_ref:(s + 1) * self.l_ref] = True
        return mask


def build_train_layout(seq_len: int, chunk_size: int, window: int = 4,
                       l_ref: int = 128) -> TrainLayout:
    if seq_len < 1 or chunk_size < 1 or l_ref < 1:
        raise ConfigError("seq_len, chunk_size, and l_ref must be >= 1")
    if window < 0:
        raise ConfigError("window must be >= 0")
    if seq_len % chunk_size != 0:
        raise InputError(f"seq_len {seq_len} not divisible by chunk {chunk_size}")
    n_chunks = seq_len // chunk_size
    visible = tuple(tuple(range(max(0, i - window), i + 1))
                    for i in range(n_chunks))
    return TrainLayout(seq_len=seq_len, chunk_size=chunk_size, window=window,
                       l_ref=l_ref, n_chunks=n_chunks, visible=visible)


class Engine:
    """One inference session over a model plus optional memory artifacts."""

    def __init__(self, model: Model, *, bank: MemoryBank | None = None,
                 index: RetrievalIndex | None = None,
                 remote_client=None,
                 cache_capacity: int = 64,
                 n_refs: int | None = None,
                 chunk_size: int | None = None,
                 mode: str = MODE_WARM,
                 select_mode: str = MODE_EXACT,
                 filter_threshold: float | None = None,
                 tolerant: bool = False,
                 embedder=None):
        cfg = model.config
        if mode not in (MODE_WARM, MODE_COLD):
            raise ConfigError(f"mode must be warm or cold, got {mode!r}")
        if select_mode not in (MODE_EXACT, MODE_APPROX):
            raise ConfigError(f"unknown selection mode {select_mode!r}")
        if bank is not None and bank.config_hash != cfg.hash():
            raise CompatibilityError("bank was built with a different model config")
        if filter_threshold is not None:
            if not 0.0 < filter_threshold <= 1.0:
                raise ConfigError("filter threshold must be in (0, 1]")
            if remote_client is not None:
                raise ConfigError("leakage filtering needs the local index; "
                                  "it cannot run against a remote bank")
            if index is None:
                raise ConfigError("leakage filtering needs a local index")
        if mode == MODE_COLD and remote_client is not None:
            raise ConfigError("cold mode encodes from reference tokens and "
                              "needs a local index, not a remote bank")
        self.chunk_size = chunk_size if chunk_size is not None else cfg.l_chunk
        if not 1 <= self.chunk_size <= cfg.l_chunk:
            raise ConfigError(f"chunk_size must be in [1, l_chunk={cfg.l_chunk}]")
        self.model = model
        self.bank = bank
        self.index = index
        self.remote_client = remote_client
        self.mode = mode
        self.select_mode = select_mode
        self.filter_threshold = filter_threshold
        self.tolerant = tolerant
        self.n_refs = n_refs if n_refs is not None else cfg.n_refs_per_chunk
        self.memory_cache = MemoryCache(cache_capacity)
        if embedder is not None:
            self.embedder = embedder
        else:
            dim = index.dim if index is not None else EMBED_DIM
            self.embedder = NgramEmbedder(dim=dim)
        self.start()

    # -- session state ---------------------------------------------------

    def start(self) -> None:
        """Reset to a fresh session (new cache, counters kept per session)."""
        self.cache, self._sep_logits = start_session(self.model)
        self.last_logits = None
        self.active_memories: list = []
        self.context_tokens: list[int] = []
        self.prompt_len = 0
        self.generated: list[int] = []
        self.retrievals = 0
        self.cold_encodes = 0
        self.filtered_out = 0
        self.remote_failures = 0

    @property
    def _has_memory_source(self) -> bool:
        if self.remote_client is not None:
            return True
        return self.index is not None and len(self.index) > 0

    # -- retrieval -------------------------------------------------------

    def fetch_memory(self, ref_id: int):
        """Cache, then bank (warm), then cold encoding from index tokens."""
        mem = self.memory_cache.get(ref_id)
        if mem is not None:
            return mem
        if self.mode == MODE_WARM:
            if self.bank is None:
                raise StateError("warm mode requires a bank")
            mem = self.bank.get(ref_id)
        else:
            if self.index is None:
                raise StateError("cold mode requires the index for reference tokens")
            tokens = self.index.tokens(ref_id)
            mem = write_memory(self.model, tokens, mode=self.select_mode,
                               ref_id=ref_id)
            self.cold_encodes += 1
            if self.bank is not None and ref_id not in self.bank:
                if self.bank.quantized:
                    qmem = quantize_memory(mem, self.bank.key_cb, self.bank.value_cb)
                    self.bank.add(qmem)
                    mem = dequantize_memory(qmem, self.bank.key_cb, self.bank.value_cb)
                else:
                    self.bank.add(mem)
        self.memory_cache.put(ref_id, mem)
        return mem

    def _retrieve(self, query_tokens) -> None:
        """Replace the active memories using the query tokens."""
        self.active_memories = []
        if not self._has_memory_source:
            return
        query_tokens = list(query_tokens)
        if not query_tokens:
            return
        vec = self.embedder.embed(query_tokens)
        self.retrievals += 1
        if self.remote_client is not None:
            try:
                results = self.remote_client.query(vec, self.n_refs)
            except Exception as exc:
                from .errors import TransportError
                if self.tolerant and isinstance(exc, TransportError):
                    self.remote_failures += 1
                    return
                raise
            mems = []
            for ref_id, _score, mem in results:
                cached = self.memory_cache.get(ref_id)
                if cached is None:
                    self.memory_cache.put(ref_id, mem)
                    cached = mem
                mems.append(cached)
            self.active_memories = mems
            return
        hits = self.index.search(vec, self.n_refs).hits
        if self.filter_threshold is not None:
            hits, removed = filter_leakage(self.index, hits, query_tokens,
                                           self.filter_threshold)
            self.filtered_out += removed
        self.active_memories = [self.fetch_memory(ref_id) for ref_id, _ in hits]

    # -- stepping --------------------------------------------------------

    def run_prompt(self, tokens) -> np.ndarray:
        """Process the prompt chunk by chunk; returns the last logits row."""
        tokens = [int(t) for t in tokens]
        if not tokens:
            raise InputError("empty prompt")
        for start in range(0, len(tokens), self.chunk_size):
            chunk = tokens[start:start + self.chunk_size]
            self._retrieve(chunk)
            logits = forward_chunk(self.model, chunk, self.cache,
                                   self.active_memories)
            self.last_logits = logits[-1]
            self.context_tokens.extend(chunk)
        self.prompt_len += len(tokens)
        return self.last_logits

    def decode(self, n_tokens: int) -> list[int]:
        """Greedy decoding; re-retrieves every chunk_size generated tokens.

        The first decoded chunk inherits the memories of the last prompt
        chunk.
        """
        if n_tokens <= 0:
            raise InputError("n_tokens must be >= 1")
        if self.last_logits is None:
            raise StateError("decode before run_prompt")
        out: list[int] = []
        for i in range(n_tokens):
            if i > 0 and i % self.chunk_size == 0:
                self._retrieve(out[-self.chunk_size:])
            token = int(np.argmax(self.last_logits))
            logits = forward_chunk(self.model, [token], self.cache,
                                   self.active_memories)
            self.last_logits = logits[-1]
            out.append(token)
            self.context_tokens.append(token)
        self.generated.extend(out)
        return out

    def generate(self, prompt_tokens, n_tokens: int) -> list[int]:
        """start + run_prompt + decode in one call."""
        self.start()
        self.run_prompt(prompt_tokens)
        return self.decode(n_tokens)

    def stats(self) -> dict:
        cache = self.memory_cache.stats()
        return {
            "retrievals": self.retrievals,
            "cache_hits": cache["hits"],
            "cache_misses": cache["misses"],
            "cache_evictions": cache["evictions"],
            "cold_encodes": self.cold_encodes,
            "filtered_out": self.filtered_out,
            "remote_failures": self.remote_failures,
            "prompt_tokens": self.prompt_len,
            "generated_tokens": len(self.generated),
            "active_memories": len(self.active_memories),
        }


def expected_retrievals(prompt_len: int, n_tokens: int, chunk_size: int) -> int:
    """Retrieval count for a session: one per prompt chunk (including a
    partial final chunk) plus one per completed decode chunk boundary."""
    prompt_chunks = -(-prompt_len // chunk_size)
    decode_boundaries = (n_tokens - 1) // chunk_size
    return prompt_chunks + decode_boundaries
