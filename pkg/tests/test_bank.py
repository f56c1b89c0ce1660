"""Memory bank: record codec, persistence, cache, and storage accounting."""

import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import exmem
from exmem import bank as bank_mod
from exmem.errors import (
    CompatibilityError,
    ConfigError,
    FormatError,
    NotFoundError,
    StateError,
    UsageError,
)

from oracles import (
    LruOracle,
    TARGET_FULL_KV_BYTES,
    TARGET_N_REFS,
    TARGET_QUANTIZED_BYTES,
    TARGET_SPARSE_BYTES,
)


def synthetic_memory(ref_id, rng, l_mem=4, h_kv=2, n_sel=4, d_h=16):
    """A toy-shaped memory with random contents; cheap to mass-produce."""
    shape = (l_mem, h_kv, n_sel, d_h)
    positions = np.sort(rng.integers(0, 32, size=(l_mem, h_kv, n_sel)),
                        axis=-1).astype(np.int32)
    return exmem.ExplicitMemory(
        keys=rng.standard_normal(shape).astype(np.float32),
        values=rng.standard_normal(shape).astype(np.float32),
        positions=positions,
        ref_id=ref_id,
    )


# ---------------------------------------------------------------------------
# Record codec


def test_raw_record_round_trip(memories):
    mem = memories[0]
    buf = bank_mod.encode_record(mem)
    back = bank_mod.decode_record(buf, ref_id=mem.ref_id)
    assert isinstance(back, exmem.ExplicitMemory)
    assert back.ref_id == mem.ref_id
    np.testing.assert_array_equal(back.keys, mem.keys)
    np.testing.assert_array_equal(back.values, mem.values)
    np.testing.assert_array_equal(back.positions, mem.positions)


def test_quantized_record_round_trip(memories, codebooks):
    key_cb, value_cb = codebooks
    qmem = exmem.quantize_memory(memories[1], key_cb, value_cb)
    buf = bank_mod.encode_record(qmem)
    back = bank_mod.decode_record(buf, ref_id=qmem.ref_id)
    assert isinstance(back, exmem.QuantizedMemory)
    assert back.d_h == qmem.d_h
    np.testing.assert_array_equal(back.key_codes, qmem.key_codes)
    np.testing.assert_array_equal(back.value_codes, qmem.value_codes)
    np.testing.assert_array_equal(back.positions, qmem.positions)


def test_record_truncated_header_raises():
    with pytest.raises(FormatError):
        bank_mod.decode_record(b"\x01\x02\x03")


def test_record_length_mismatch_raises(memories):
    buf = bank_mod.encode_record(memories[0])
    with pytest.raises(FormatError):
        bank_mod.decode_record(buf[:-4])
    with pytest.raises(FormatError):
        bank_mod.decode_record(buf + b"\x00")


# ---------------------------------------------------------------------------
# Quantize / dequantize


def test_quantize_memory_shapes(memories, codebooks, toy_config):
    key_cb, value_cb = codebooks
    mem = memories[2]
    qmem = exmem.quantize_memory(mem, key_cb, value_cb)
    code_bytes = key_cb.spec.code_bytes
    l_mem, h_kv, n_sel, d_h = mem.keys.shape
    assert qmem.key_codes.shape == (l_mem, h_kv, n_sel, code_bytes)
    assert qmem.value_codes.shape == (l_mem, h_kv, n_sel, code_bytes)
    assert qmem.key_codes.dtype == np.uint8
    assert qmem.d_h == d_h == toy_config.d_h
    assert qmem.ref_id == mem.ref_id
    np.testing.assert_array_equal(qmem.positions, mem.positions)


def test_dequantize_restores_shape_and_marks_quantized(memories, codebooks):
    key_cb, value_cb = codebooks
    mem = memories[3]
    back = exmem.dequantize_memory(
        exmem.quantize_memory(mem, key_cb, value_cb), key_cb, value_cb)
    assert back.keys.shape == mem.keys.shape
    assert back.values.shape == mem.values.shape
    assert back.quantized is True
    assert back.ref_id == mem.ref_id
    np.testing.assert_array_equal(back.positions, mem.positions)
    # Reconstruction should stay within the worst error seen in training.
    err = np.sqrt(((back.keys - mem.keys) ** 2).sum(axis=-1)).max()
    assert err <= key_cb.train_max_err * 4 + 1e-6


def test_quantize_round_trip_deterministic(memories, codebooks):
    key_cb, value_cb = codebooks
    mem = memories[4]
    a = exmem.quantize_memory(mem, key_cb, value_cb)
    b = exmem.quantize_memory(mem, key_cb, value_cb)
    np.testing.assert_array_equal(a.key_codes, b.key_codes)
    np.testing.assert_array_equal(a.value_codes, b.value_codes)
    da = exmem.dequantize_memory(a, key_cb, value_cb)
    db = exmem.dequantize_memory(b, key_cb, value_cb)
    np.testing.assert_array_equal(da.keys, db.keys)
    np.testing.assert_array_equal(da.values, db.values)


# ---------------------------------------------------------------------------
# Bank container semantics


def test_bank_add_requires_ref_id(toy_config, memories):
    b = exmem.MemoryBank(toy_config.hash())
    loose = exmem.ExplicitMemory(keys=memories[0].keys,
                                 values=memories[0].values,
                                 positions=memories[0].positions,
                                 ref_id=None)
    with pytest.raises(UsageError):
        b.add(loose)


def test_bank_rejects_duplicate_id(bank, memories):
    with pytest.raises(UsageError):
        bank.add(memories[0])


def test_bank_rejects_kind_mismatch(toy_config, memories, codebooks):
    key_cb, value_cb = codebooks
    raw_bank = exmem.MemoryBank(toy_config.hash())
    qmem = exmem.quantize_memory(memories[0], key_cb, value_cb)
    with pytest.raises(UsageError):
        raw_bank.add(qmem)
    quant_bank = exmem.MemoryBank(toy_config.hash(), quantized=True,
                                  key_cb=key_cb, value_cb=value_cb)
    with pytest.raises(UsageError):
        quant_bank.add(memories[0])


def test_bank_get_absent_raises_not_found(bank):
    with pytest.raises(NotFoundError):
        bank.get(999)
    with pytest.raises(NotFoundError):
        bank.get_codes(999)


def test_bank_ids_sorted_and_membership(toy_config, memories):
    b = exmem.MemoryBank(toy_config.hash())
    for m in reversed(memories):
        b.add(m)
    assert b.ids() == sorted(m.ref_id for m in memories)
    assert len(b) == len(memories)
    assert memories[0].ref_id in b
    assert 10_000 not in b


def test_quantized_bank_get_needs_codebooks(toy_config, memories, codebooks):
    key_cb, value_cb = codebooks
    b = exmem.MemoryBank(toy_config.hash(), quantized=True)
    b.add(exmem.quantize_memory(memories[0], key_cb, value_cb))
    with pytest.raises(StateError):
        b.get(memories[0].ref_id)
    codes = b.get_codes(memories[0].ref_id)
    assert isinstance(codes, exmem.QuantizedMemory)


# ---------------------------------------------------------------------------
# Persistence


def test_bank_save_load_100_memories_bitwise(tmp_path, toy_config):
    rng = np.random.default_rng(7)
    mems = [synthetic_memory(i, rng) for i in range(100)]
    b = exmem.MemoryBank(toy_config.hash())
    for m in mems:
        b.add(m)
    path = tmp_path / "bank.bin"
    b.save(path)
    loaded = exmem.MemoryBank.load(path,
                                   expected_config_hash=toy_config.hash())
    assert loaded.ids() == list(range(100))
    for m in mems:
        back = loaded.get(m.ref_id)
        np.testing.assert_array_equal(back.keys, m.keys)
        np.testing.assert_array_equal(back.values, m.values)
        np.testing.assert_array_equal(back.positions, m.positions)


def test_bank_save_is_deterministic(tmp_path, bank):
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    bank.save(p1)
    bank.save(p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_quantized_bank_round_trip_deterministic(tmp_path, toy_config,
                                                 memories, codebooks):
    key_cb, value_cb = codebooks
    b = exmem.MemoryBank(toy_config.hash(), quantized=True,
                         key_cb=key_cb, value_cb=value_cb)
    for m in memories:
        b.add(exmem.quantize_memory(m, key_cb, value_cb))
    path = tmp_path / "qbank.bin"
    b.save(path)
    loaded = exmem.MemoryBank.load(path,
                                   expected_config_hash=toy_config.hash(),
                                   key_cb=key_cb, value_cb=value_cb)
    assert loaded.quantized
    for m in memories:
        first = loaded.get(m.ref_id)
        second = loaded.get(m.ref_id)
        np.testing.assert_array_equal(first.keys, second.keys)
        np.testing.assert_array_equal(first.values, second.values)
        direct = exmem.dequantize_memory(
            exmem.quantize_memory(m, key_cb, value_cb), key_cb, value_cb)
        np.testing.assert_array_equal(first.keys, direct.keys)
        np.testing.assert_array_equal(first.values, direct.values)


def test_bank_load_bad_magic(tmp_path, bank):
    path = tmp_path / "bank.bin"
    bank.save(path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        exmem.MemoryBank.load(path)


def test_bank_load_version_mismatch(tmp_path, bank):
    path = tmp_path / "bank.bin"
    bank.save(path)
    blob = bytearray(path.read_bytes())
    struct.pack_into("<H", blob, 4, 99)
    path.write_bytes(bytes(blob))
    with pytest.raises(CompatibilityError):
        exmem.MemoryBank.load(path)


def test_bank_load_config_hash_mismatch(tmp_path, bank):
    path = tmp_path / "bank.bin"
    bank.save(path)
    with pytest.raises(CompatibilityError):
        exmem.MemoryBank.load(path, expected_config_hash=bank.config_hash + 1)


def test_bank_load_truncated_table(tmp_path, bank):
    path = tmp_path / "bank.bin"
    bank.save(path)
    blob = path.read_bytes()
    path.write_bytes(blob[:30])   # header survives, table does not
    with pytest.raises(FormatError):
        exmem.MemoryBank.load(path)


def test_bank_load_record_past_eof(tmp_path, bank):
    path = tmp_path / "bank.bin"
    bank.save(path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(FormatError):
        exmem.MemoryBank.load(path)


def test_bank_load_unsorted_table(tmp_path, toy_config):
    rng = np.random.default_rng(3)
    b = exmem.MemoryBank(toy_config.hash())
    for i in range(2):
        b.add(synthetic_memory(i, rng))
    path = tmp_path / "bank.bin"
    b.save(path)
    blob = bytearray(path.read_bytes())
    table_at = 4 + struct.calcsize("<HHQQ")
    entry = struct.calcsize("<QQI")
    first = bytes(blob[table_at:table_at + entry])
    second = bytes(blob[table_at + entry:table_at + 2 * entry])
    blob[table_at:table_at + entry] = second
    blob[table_at + entry:table_at + 2 * entry] = first
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        exmem.MemoryBank.load(path)


def test_quantized_file_is_smaller_by_compression_rate(tmp_path, toy_config,
                                                       memories, codebooks):
    key_cb, value_cb = codebooks
    raw = exmem.MemoryBank(toy_config.hash())
    quant = exmem.MemoryBank(toy_config.hash(), quantized=True,
                             key_cb=key_cb, value_cb=value_cb)
    for m in memories:
        raw.add(m)
        quant.add(exmem.quantize_memory(m, key_cb, value_cb))
    raw_path, quant_path = tmp_path / "raw.bin", tmp_path / "quant.bin"
    raw.save(raw_path)
    quant.save(quant_path)
    ratio = raw_path.stat().st_size / quant_path.stat().st_size
    assert abs(ratio / bank_mod.REFERENCE_COMPRESSION - 1) < 0.20


# ---------------------------------------------------------------------------
# Codebook persistence


def test_codebooks_save_load_round_trip(tmp_path, codebooks):
    key_cb, value_cb = codebooks
    path = tmp_path / "codebooks.bin"
    exmem.save_codebooks(path, key_cb, value_cb)
    k2, v2 = exmem.load_codebooks(path)
    for orig, back in ((key_cb, k2), (value_cb, v2)):
        assert back.spec == orig.spec
        assert back.trained
        assert back.train_max_err == pytest.approx(orig.train_max_err)
        np.testing.assert_array_equal(back.rotation, orig.rotation)
        assert len(back.centroids) == len(orig.centroids)
        for a, b in zip(back.centroids, orig.centroids):
            np.testing.assert_array_equal(a, b)


def test_codebooks_reload_gives_identical_codes(tmp_path, codebooks, rng):
    key_cb, _ = codebooks
    path = tmp_path / "codebooks.bin"
    exmem.save_codebooks(path, *codebooks)
    k2, _ = exmem.load_codebooks(path)
    probe = rng.standard_normal((32, key_cb.spec.dim)).astype(np.float32)
    np.testing.assert_array_equal(exmem.quantizer_encode(probe, key_cb),
                                  exmem.quantizer_encode(probe, k2))


def test_codebooks_save_refuses_untrained(tmp_path, codebooks):
    key_cb, _ = codebooks
    blank = exmem.Codebook(spec=key_cb.spec, rotation=key_cb.rotation)
    with pytest.raises(StateError):
        exmem.save_codebooks(tmp_path / "x.bin", key_cb, blank)


def test_codebooks_load_errors(tmp_path, codebooks):
    path = tmp_path / "codebooks.bin"
    exmem.save_codebooks(path, *codebooks)
    blob = path.read_bytes()

    bad_magic = tmp_path / "m.bin"
    bad_magic.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        exmem.load_codebooks(bad_magic)

    bad_version = tmp_path / "v.bin"
    mutated = bytearray(blob)
    struct.pack_into("<H", mutated, 4, 42)
    bad_version.write_bytes(bytes(mutated))
    with pytest.raises(CompatibilityError):
        exmem.load_codebooks(bad_version)

    truncated = tmp_path / "t.bin"
    truncated.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(FormatError):
        exmem.load_codebooks(truncated)

    trailing = tmp_path / "x.bin"
    trailing.write_bytes(blob + b"\x00\x00")
    with pytest.raises(FormatError):
        exmem.load_codebooks(trailing)


# ---------------------------------------------------------------------------
# LRU cache


def test_cache_lru_eviction_example(memories):
    cache = exmem.MemoryCache(capacity=2)
    a, b, c = memories[:3]
    cache.put(0, a)
    cache.put(1, b)
    assert cache.get(0) is a       # promotes a over b
    cache.put(2, c)                # evicts b
    assert cache.get(1) is None
    assert cache.get(0) is a
    assert cache.get(2) is c
    assert cache.stats()["evictions"] == 1


def test_cache_hit_returns_stored_object(memories):
    cache = exmem.MemoryCache(capacity=4)
    cache.put(5, memories[5])
    assert cache.get(5) is memories[5]


def test_cache_zero_capacity_never_stores(memories):
    cache = exmem.MemoryCache(capacity=0)
    cache.put(0, memories[0])
    assert len(cache) == 0
    assert cache.get(0) is None


def test_cache_negative_capacity_rejected():
    with pytest.raises(ConfigError):
        exmem.MemoryCache(capacity=-1)


def test_cache_counts_hits_and_misses(memories):
    cache = exmem.MemoryCache(capacity=2)
    cache.put(0, memories[0])
    cache.get(0)
    cache.get(1)
    stats = cache.stats()
    assert stats["hits"] == 1
    assert stats["misses"] == 1
    assert stats["size"] == 1


@settings(max_examples=60, deadline=None)
@given(ops=st.lists(
    st.tuples(st.sampled_from(["get", "put"]), st.integers(0, 7)),
    min_size=1, max_size=200),
    capacity=st.integers(0, 5))
def test_cache_matches_reference_lru(ops, capacity):
    cache = exmem.MemoryCache(capacity)
    oracle = LruOracle(capacity)
    payload = {i: object() for i in range(8)}
    trace = []
    oracle_trace = []
    for op, key in ops:
        if op == "put":
            cache.put(key, payload[key])
            oracle.put(key, payload[key])
        else:
            trace.append(cache.get(key) is not None)
            oracle_trace.append(oracle.get(key) is not None)
    assert trace == oracle_trace
    assert cache.hits == oracle.hits
    assert cache.misses == oracle.misses
    assert len(cache) == len(oracle.store)


# ---------------------------------------------------------------------------
# Storage accounting


def test_storage_sparsity_factor_exact_reference():
    report = exmem.storage_report(exmem.ModelConfig.reference(), TARGET_N_REFS)
    assert report.sparsity_factor == 160
    assert report.layer_factor == 2
    assert report.head_factor == 5
    assert report.token_factor == 16
    assert report.layer_factor * report.head_factor * report.token_factor == 160


def test_storage_compound_factor_about_1829():
    report = exmem.storage_report(exmem.ModelConfig.reference(), TARGET_N_REFS)
    assert report.compound_factor == pytest.approx(160 * 160 / 14, rel=1e-12)
    assert abs(report.compound_factor - 1829) < 1


def test_storage_reference_sizes_within_band():
    report = exmem.storage_report(exmem.ModelConfig.reference(), TARGET_N_REFS)
    assert abs(report.full_bytes / TARGET_FULL_KV_BYTES - 1) < 0.15
    assert abs(report.sparse_bytes / TARGET_SPARSE_BYTES - 1) < 0.15
    assert abs(report.quantized_bytes / TARGET_QUANTIZED_BYTES - 1) < 0.15


def test_storage_full_over_sparse_is_exact_ratio(toy_config):
    for cfg in (toy_config, exmem.ModelConfig.reference()):
        report = exmem.storage_report(cfg, n_refs=123)
        assert Fraction(report.full_bytes, report.sparse_bytes) \
            == report.sparsity_factor
        want = (Fraction(cfg.L, cfg.L_mem) * Fraction(cfg.H, cfg.H_kv)
                * Fraction(cfg.l_ref, cfg.l_mem))
        assert report.sparsity_factor == want


def test_storage_zero_refs_all_zero():
    report = exmem.storage_report(exmem.ModelConfig.reference(), 0)
    assert report.full_bytes == 0
    assert report.sparse_bytes == 0
    assert report.quantized_bytes == 0


def test_storage_quantized_divides_by_compression():
    report = exmem.storage_report(exmem.ModelConfig.reference(), 1000)
    assert report.quantized_bytes == pytest.approx(
        report.sparse_bytes / (160 / 14), rel=1e-12)
    assert report.stored_bytes == report.sparse_bytes
    quant = exmem.storage_report(exmem.ModelConfig.reference(), 1000,
                                 quantized=True)
    assert quant.stored_bytes == quant.quantized_bytes


def test_human_bytes_binary_prefixes():
    assert bank_mod.human_bytes(0) == "0.00 B"
    assert bank_mod.human_bytes(1536) == "1.50 KiB"
    assert bank_mod.human_bytes(7.930856e15) == "7.04 PiB"
    assert bank_mod.human_bytes(4.5 * 2 ** 40) == "4.50 TiB"
    assert bank_mod.human_bytes(3 * 2 ** 60).endswith("EiB")
