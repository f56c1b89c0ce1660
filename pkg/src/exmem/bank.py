"""Persistent memory bank, LRU cache, and storage accounting.

A bank maps reference ids to explicit memories, either raw float32 or as
quantizer codes.  The on-disk layout is little-endian throughout: a fixed
header, an id-sorted record table, then self-describing records.  Record
byte encoding is shared with the wire protocol so a served memory is the
same bytes as a stored one.
"""

from __future__ import annotations

import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .config import ModelConfig
from .errors import (
    CompatibilityError,
    ConfigError,
    FormatError,
    NotFoundError,
    StateError,
    UsageError,
)
from .quantizer import (
    Codebook,
    QuantizerSpec,
    quantizer_decode,
    quantizer_encode,
)
from .writer import ExplicitMemory

BANK_MAGIC = b"EM3B"
BANK_VERSION = 1
FLAG_QUANTIZED = 1

CODEBOOK_MAGIC = b"EM3Q"
CODEBOOK_VERSION = 1

# Reference-geometry compression against two-byte scalars: 80*2/14.
REFERENCE_COMPRESSION = 160.0 / 14.0


@dataclass
class QuantizedMemory:
    """Code-level form of an ExplicitMemory: positions plus PQ codes."""

    positions: np.ndarray   # (L_mem, H_kv, n_sel) int32
    key_codes: np.ndarray   # (L_mem, H_kv, n_sel, code_bytes) uint8
    value_codes: np.ndarray
    d_h: int
    ref_id: int | None = None


def quantize_memory(mem: ExplicitMemory, key_cb: Codebook,
                    value_cb: Codebook) -> QuantizedMemory:
    shape = mem.keys.shape
    key_codes = quantizer_encode(mem.keys.reshape(-1, shape[3]), key_cb)
    value_codes = quantizer_encode(mem.values.reshape(-1, shape[3]), value_cb)
    return QuantizedMemory(
        positions=mem.positions.copy(),
        key_codes=key_codes.reshape(*shape[:3], -1),
        value_codes=value_codes.reshape(*shape[:3], -1),
        d_h=shape[3],
        ref_id=mem.ref_id,
    )


def dequantize_memory(qmem: QuantizedMemory, key_cb: Codebook,
                      value_cb: Codebook) -> ExplicitMemory:
    shape = qmem.key_codes.shape
    keys = quantizer_decode(qmem.key_codes.reshape(-1, shape[3]), key_cb)
    values = quantizer_decode(qmem.value_codes.reshape(-1, shape[3]), value_cb)
    return ExplicitMemory(
        keys=keys.reshape(*shape[:3], qmem.d_h),
        values=values.reshape(*shape[:3], qmem.d_h),
        positions=qmem.positions.copy(),
        ref_id=qmem.ref_id,
        quantized=True,
    )


# Record encoding.  Header: n_sel, L_mem, H_kv, d_h, code_bytes (u16 each);
# code_bytes == 0 marks a raw record.  Then positions as i32, then either
# f32 keys and values or uint8 key and value codes.
_RECORD_HEADER = struct.Struct("<HHHHH")


def encode_record(mem: ExplicitMemory | QuantizedMemory) -> bytes:
    if isinstance(mem, QuantizedMemory):
        l_mem, h_kv, n_sel, code_bytes = mem.key_codes.shape
        d_h = mem.d_h
        payload = mem.key_codes.tobytes() + mem.value_codes.tobytes()
    else:
        l_mem, h_kv, n_sel, d_h = mem.keys.shape
        code_bytes = 0
        payload = (np.ascontiguousarray(mem.keys, "<f4").tobytes()
                   + np.ascontiguousarray(mem.values, "<f4").tobytes())
    head = _RECORD_HEADER.pack(n_sel, l_mem, h_kv, d_h, code_bytes)
    positions = np.ascontiguousarray(mem.positions, "<i4").tobytes()
    return head + positions + payload


def decode_record(buf: bytes, ref_id: int | None = None):
    """Inverse of encode_record; returns ExplicitMemory or QuantizedMemory."""
    if len(buf) < _RECORD_HEADER.size:
        raise FormatError("memory record truncated")
    n_sel, l_mem, h_kv, d_h, code_bytes = _RECORD_HEADER.unpack_from(buf)
    n_rows = l_mem * h_kv * n_sel
    pos_bytes = n_rows * 4
    offset = _RECORD_HEADER.size
    if code_bytes:
        body = 2 * n_rows * code_bytes
    else:
        body = 2 * n_rows * d_h * 4
    if len(buf) != offset + pos_bytes + body:
        raise FormatError(f"memory record length {len(buf)} does not match header")
    positions = np.frombuffer(buf, "<i4", n_rows, offset) \
        .reshape(l_mem, h_kv, n_sel).astype(np.int32)
    offset += pos_bytes
    if code_bytes:
        half = n_rows * code_bytes
        key_codes = np.frombuffer(buf, np.uint8, half, offset) \
            .reshape(l_mem, h_kv, n_sel, code_bytes).copy()
        value_codes = np.frombuffer(buf, np.uint8, half, offset + half) \
            .reshape(l_mem, h_kv, n_sel, code_bytes).copy()
        return QuantizedMemory(positions=positions, key_codes=key_codes,
                               value_codes=value_codes, d_h=d_h, ref_id=ref_id)
    half = n_rows * d_h * 4
    keys = np.frombuffer(buf, "<f4", n_rows * d_h, offset) \
        .reshape(l_mem, h_kv, n_sel, d_h).astype(np.float32)
    values = np.frombuffer(buf, "<f4", n_rows * d_h, offset + half) \
        .reshape(l_mem, h_kv, n_sel, d_h).astype(np.float32)
    return ExplicitMemory(keys=keys, values=values, positions=positions,
                          ref_id=ref_id)


class MemoryBank:
    """Id-keyed store of explicit memories, raw or quantized.

    A quantized bank holds codes; get() decodes through the attached
    codebooks, get_codes() hands out the stored record for serving.
    """

    def __init__(self, config_hash: int, quantized: bool = False,
                 key_cb: Codebook | None = None,
                 value_cb: Codebook | None = None):
        self.config_hash = config_hash
        self.quantized = quantized
        self.key_cb = key_cb
        self.value_cb = value_cb
        self._records: dict[int, ExplicitMemory | QuantizedMemory] = {}

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, ref_id: int) -> bool:
        return ref_id in self._records

    def ids(self) -> list[int]:
        return sorted(self._records)

    def add(self, mem: ExplicitMemory | QuantizedMemory) -> None:
        if mem.ref_id is None:
            raise UsageError("memory must carry a ref_id to enter the bank")
        if mem.ref_id in self._records:
            raise UsageError(f"duplicate ref_id {mem.ref_id}")
        want_quant = isinstance(mem, QuantizedMemory)
        if want_quant != self.quantized:
            kind = "quantized" if self.quantized else "raw"
            raise UsageError(f"cannot add {'codes' if want_quant else 'floats'} "
                             f"to a {kind} bank")
        self._records[int(mem.ref_id)] = mem

    def get(self, ref_id: int) -> ExplicitMemory:
        try:
            rec = self._records[ref_id]
        except KeyError:
            raise NotFoundError(f"ref id {ref_id} not in bank") from None
        if isinstance(rec, QuantizedMemory):
            if self.key_cb is None or self.value_cb is None:
                raise StateError("quantized bank has no codebooks attached")
            return dequantize_memory(rec, self.key_cb, self.value_cb)
        return rec

    def get_codes(self, ref_id: int) -> ExplicitMemory | QuantizedMemory:
        try:
            return self._records[ref_id]
        except KeyError:
            raise NotFoundError(f"ref id {ref_id} not in bank") from None

    def save(self, path) -> None:
        ids = self.ids()
        records = [encode_record(self._records[i]) for i in ids]
        flags = FLAG_QUANTIZED if self.quantized else 0
        head = BANK_MAGIC + struct.pack("<HHQQ", BANK_VERSION, flags,
                                        self.config_hash, len(ids))
        table = bytearray()
        offset = 0
        for ref_id, rec in zip(ids, records):
            table += struct.pack("<QQI", ref_id, offset, len(rec))
            offset += len(rec)
        with open(path, "wb") as f:
            f.write(head)
            f.write(bytes(table))
            for rec in records:
                f.write(rec)

    @classmethod
    def load(cls, path, expected_config_hash: int | None = None,
             key_cb: Codebook | None = None,
             value_cb: Codebook | None = None) -> "MemoryBank":
        with open(path, "rb") as f:
            buf = f.read()
        if buf[:4] != BANK_MAGIC:
            raise FormatError("not a bank file (bad magic)")
        version, flags, config_hash, count = struct.unpack_from("<HHQQ", buf, 4)
        if version != BANK_VERSION:
            raise CompatibilityError(f"bank file version {version}, expected "
                                     f"{BANK_VERSION}")
        if expected_config_hash is not None and config_hash != expected_config_hash:
            raise CompatibilityError("bank was built with a different model config")
        quantized = bool(flags & FLAG_QUANTIZED)
        table_at = 4 + struct.calcsize("<HHQQ")
        entry = struct.Struct("<QQI")
        records_at = table_at + count * entry.size
        if records_at > len(buf):
            raise FormatError("bank record table truncated")
        bank = cls(config_hash, quantized, key_cb=key_cb, value_cb=value_cb)
        prev_id = -1
        for i in range(count):
            ref_id, offset, length = entry.unpack_from(buf, table_at + i * entry.size)
            if ref_id <= prev_id:
                raise FormatError("bank record table not sorted by id")
            prev_id = ref_id
            start = records_at + offset
            if start + length > len(buf):
                raise FormatError(f"record {ref_id} extends past end of file")
            rec = decode_record(buf[start:start + length], ref_id=ref_id)
            if isinstance(rec, QuantizedMemory) != quantized:
                raise FormatError(f"record {ref_id} kind contradicts bank flags")
            bank._records[ref_id] = rec
        return bank


def save_codebooks(path, key_cb: Codebook, value_cb: Codebook) -> None:
    """Write the key and value codebooks to one file."""
    blob = bytearray()
    blob += CODEBOOK_MAGIC
    blob += struct.pack("<HH", CODEBOOK_VERSION, 2)
    for cb in (key_cb, value_cb):
        if not cb.trained:
            raise StateError("refusing to save an untrained codebook")
        spec = cb.spec
        blob += struct.pack("<HHH", spec.dim, len(spec.level_subvectors),
                            spec.n_centroids)
        blob += struct.pack(f"<{len(spec.level_subvectors)}H",
                            *spec.level_subvectors)
        blob += struct.pack("<f", cb.train_max_err)
        blob += np.ascontiguousarray(cb.rotation, "<f4").tobytes()
        for level in cb.centroids:
            blob += np.ascontiguousarray(level, "<f4").tobytes()
    with open(path, "wb") as f:
        f.write(blob)


def load_codebooks(path) -> tuple[Codebook, Codebook]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != CODEBOOK_MAGIC:
        raise FormatError("not a codebook file (bad magic)")
    version, n_books = struct.unpack_from("<HH", buf, 4)
    if version != CODEBOOK_VERSION:
        raise CompatibilityError(f"codebook file version {version}, expected "
                                 f"{CODEBOOK_VERSION}")
    if n_books != 2:
        raise FormatError(f"expected 2 codebooks, file has {n_books}")
    offset = 8
    books = []

    def take_f32(count):
        nonlocal offset
        end = offset + count * 4
        if end > len(buf):
            raise FormatError("codebook file truncated")
        arr = np.frombuffer(buf, "<f4", count, offset).astype(np.float32)
        offset = end
        return arr

    for _ in range(n_books):
        if offset + 6 > len(buf):
            raise FormatError("codebook file truncated")
        dim, n_levels, n_centroids = struct.unpack_from("<HHH", buf, offset)
        offset += 6
        if offset + n_levels * 2 > len(buf):
            raise FormatError("codebook file truncated")
        subs = struct.unpack_from(f"<{n_levels}H", buf, offset)
        offset += n_levels * 2
        (train_max_err,) = struct.unpack_from("<f", buf, offset)
        offset += 4
        spec = QuantizerSpec(dim=dim, level_subvectors=tuple(subs),
                             n_centroids=n_centroids)
        spec.validate()
        rotation = take_f32(dim * dim).reshape(dim, dim)
        centroids = []
        for s in subs:
            centroids.append(take_f32(s * n_centroids * (dim // s))
                             .reshape(s, n_centroids, dim // s))
        books.append(Codebook(spec=spec, rotation=rotation, centroids=centroids,
                              train_max_err=float(train_max_err), trained=True))
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes in codebook file")
    return books[0], books[1]


class MemoryCache:
    """Thread-safe LRU cache of decoded memories with hit/miss counters."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ConfigError("cache capacity must be >= 0")
        self.capacity = capacity
        self._entries: OrderedDict[int, ExplicitMemory] = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.evictions = 0

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, ref_id: int) -> ExplicitMemory | None:
        with self._lock:
            if ref_id in self._entries:
                self._entries.move_to_end(ref_id)
                self.hits += 1
                return self._entries[ref_id]
            self.misses += 1
            return None

    def put(self, ref_id: int, mem: ExplicitMemory) -> None:
        with self._lock:
            if self.capacity == 0:
                return
            if ref_id in self._entries:
                self._entries.move_to_end(ref_id)
                self._entries[ref_id] = mem
                return
            self._entries[ref_id] = mem
            if len(self._entries) > self.capacity:
                self._entries.popitem(last=False)
                self.evictions += 1

    def stats(self) -> dict:
        with self._lock:
            return {"hits": self.hits, "misses": self.misses,
                    "evictions": self.evictions, "size": len(self._entries)}


@dataclass(frozen=True)
class StorageReport:
    n_refs: int
    bytes_per_scalar: int
    full_bytes: int
    sparse_bytes: int
    quantized_bytes: float
    layer_factor: Fraction
    head_factor: Fraction
    token_factor: Fraction
    sparsity_factor: Fraction      # full / sparse, exact
    compression_rate: float        # sparse / quantized
    quantized: bool

    @property
    def compound_factor(self) -> float:
        """Total reduction from full KV to quantized memories."""
        return float(self.sparsity_factor) * self.compression_rate

    @property
    def stored_bytes(self) -> float:
        return self.quantized_bytes if self.quantized else float(self.sparse_bytes)


def human_bytes(n: float) -> str:
    """Binary-prefixed rendering, e.g. 7.04 PiB."""
    units = ["B", "KiB", "MiB", "GiB", "TiB", "PiB", "EiB"]
    value = float(n)
    for unit in units:
        if abs(value) < 1024.0 or unit == units[-1]:
            return f"{value:.2f} {unit}"
        value /= 1024.0
    raise AssertionError


def storage_report(config: ModelConfig, n_refs: int, bytes_per_scalar: int = 2,
                   quantized: bool = False,
                   compression_rate: float = REFERENCE_COMPRESSION) -> StorageReport:
    """Size accounting for a bank of n_refs references.

    Full size counts the pre-GQA KV (head axis at H) of all layers; sparse
    size is the explicit-memory footprint; quantized divides by the
    configured compression rate (reference geometry 160/14 by default).
    """
    c = config
    full = n_refs * c.L * 2 * c.H * c.l_ref * c.d_h * bytes_per_scalar
    sparse = n_refs * c.L_mem * 2 * c.H_kv * c.l_mem * c.d_h * bytes_per_scalar
    return StorageReport(
        n_refs=n_refs,
        bytes_per_scalar=bytes_per_scalar,
        full_bytes=full,
        sparse_bytes=sparse,
        quantized_bytes=sparse / compression_rate,
        layer_factor=Fraction(c.L, c.L_mem),
        head_factor=Fraction(c.H, c.H_kv),
        token_factor=Fraction(c.l_ref, c.l_mem),
        sparsity_factor=Fraction(c.L * c.H * c.l_ref, c.L_mem * c.H_kv * c.l_mem),
        compression_rate=compression_rate,
        quantized=quantized,
    )
