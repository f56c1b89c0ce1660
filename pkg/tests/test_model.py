import numpy as np
import pytest

import exmem
from exmem import ModelConfig
from exmem.errors import (
    CompatibilityError,
    FormatError,
    InputError,
    ShapeError,
    StateError,
    UsageError,
)
from exmem.model import attention_with_memory, group_views, rope_rotate

import oracles


# -- rotary embedding ---------------------------------------------------


def test_rope_zero_position_is_identity(rng):
    x = rng.standard_normal((3, 5, 16)).astype(np.float32)
    out = rope_rotate(x, [0, 0, 0, 0, 0])
    np.testing.assert_allclose(out, x, atol=1e-7)


def test_rope_preserves_norm(rng):
    x = rng.standard_normal((4, 7, 16)).astype(np.float32)
    out = rope_rotate(x, [3, 11, 200, 4095, 7, 0, 1])
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1),
                               np.linalg.norm(x, axis=-1), rtol=1e-5)


def test_rope_dot_depends_on_offset_only(rng):
    q = rng.standard_normal(16).astype(np.float32)
    k = rng.standard_normal(16).astype(np.float32)
    a = float(rope_rotate(q, 7) @ rope_rotate(k, 3))
    b = float(rope_rotate(q, 104) @ rope_rotate(k, 100))
    assert a == pytest.approx(b, abs=1e-4)


def test_rope_matches_pairwise_oracle(rng):
    x = rng.standard_normal(16).astype(np.float32)
    got = rope_rotate(x, 37)
    want = oracles._oracle_rope(x, 37, 16)
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_rope_single_vector_shape(rng):
    x = rng.standard_normal(16).astype(np.float32)
    assert rope_rotate(x, 5).shape == (16,)


# -- grouped-query sharing ---------------------------------------------


def test_group_views_shares_objects():
    per_kv = [object() for _ in range(2)]
    fanned = group_views(per_kv, 8)
    assert len(fanned) == 8
    for h in range(8):
        assert fanned[h] is per_kv[h // 4]


# -- cache discipline ---------------------------------------------------


def test_cache_rejects_non_monotonic_positions(toy_model):
    cache, _ = exmem.start_session(toy_model)
    cfg = toy_model.config
    k = np.zeros((cfg.H_kv, 1, cfg.d_h), np.float32)
    with pytest.raises(StateError):
        cache.append(0, k, k, [0])   # position 0 is already taken


def test_cache_alignment_check(toy_model):
    cache, _ = exmem.start_session(toy_model)
    cfg = toy_model.config
    k = np.zeros((cfg.H_kv, 1, cfg.d_h), np.float32)
    cache.append(0, k, k, [cache.next_position])
    with pytest.raises(StateError):
        cache.check_aligned()


# -- forward pass -------------------------------------------------------


def test_forward_chunk_shapes(toy_model):
    cfg = toy_model.config
    cache, sep_logits = exmem.start_session(toy_model)
    assert sep_logits.shape == (cfg.n_vocab,)
    logits = exmem.forward_chunk(toy_model, [1, 2, 3], cache)
    assert logits.shape == (3, cfg.n_vocab)
    assert logits.dtype == np.float32


def test_forward_chunk_limits(toy_model):
    cfg = toy_model.config
    cache, _ = exmem.start_session(toy_model)
    with pytest.raises(InputError):
        exmem.forward_chunk(toy_model, [], cache)
    with pytest.raises(InputError):
        exmem.forward_chunk(toy_model, [1] * (cfg.l_chunk + 1), cache)
    with pytest.raises(InputError):
        exmem.forward_chunk(toy_model, [cfg.n_vocab], cache)


def test_forward_rejects_too_many_memories(toy_model, memories):
    cfg = toy_model.config
    limit = cfg.n_refs_per_chunk * 5
    stuffed = (memories * ((limit // len(memories)) + 1))[:limit + 1]
    cache, _ = exmem.start_session(toy_model)
    with pytest.raises(UsageError):
        exmem.forward_chunk(toy_model, [1], cache, stuffed)


def test_attention_probabilities_sum_to_one(toy_model, memories, rng):
    cfg = toy_model.config
    cache, _ = exmem.start_session(toy_model)
    x = rng.standard_normal((4, cfg.d)).astype(np.float32)
    positions = np.arange(cache.next_position, cache.next_position + 4)
    _, probs = attention_with_memory(toy_model, 0, x, cache, memories[:3],
                                     positions, return_probs=True)
    for head_probs in probs:
        sums = head_probs.sum(axis=-1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)


def test_memory_layer_guard(toy_model, memories, rng):
    cfg = toy_model.config
    cache, _ = exmem.start_session(toy_model)
    x = rng.standard_normal((1, cfg.d)).astype(np.float32)
    with pytest.raises(UsageError):
        attention_with_memory(toy_model, cfg.L_mem, x, cache, memories[:1],
                              [cache.next_position])


def test_memory_shape_guard(toy_model, memories, rng):
    cfg = toy_model.config
    cache, _ = exmem.start_session(toy_model)
    x = rng.standard_normal((1, cfg.d)).astype(np.float32)
    bad = exmem.ExplicitMemory(
        keys=memories[0].keys[:, :1], values=memories[0].values[:, :1],
        positions=memories[0].positions[:, :1])
    with pytest.raises(ShapeError):
        attention_with_memory(toy_model, 0, x, cache, [bad],
                              [cache.next_position])


def test_chunked_equals_one_shot(toy_model, memories):
    tokens = list(range(40, 56))
    cache_a, _ = exmem.start_session(toy_model)
    one = exmem.forward_chunk(toy_model, tokens, cache_a, memories[:2])
    cache_b, _ = exmem.start_session(toy_model)
    first = exmem.forward_chunk(toy_model, tokens[:7], cache_b, memories[:2])
    second = exmem.forward_chunk(toy_model, tokens[7:], cache_b, memories[:2])
    np.testing.assert_allclose(np.vstack([first, second]), one, atol=2e-5)


def test_memories_change_logits(toy_model, memories):
    tokens = list(range(60, 70))
    cache_a, _ = exmem.start_session(toy_model)
    with_mem = exmem.forward_chunk(toy_model, tokens, cache_a, memories[:3])
    cache_b, _ = exmem.start_session(toy_model)
    without = exmem.forward_chunk(toy_model, tokens, cache_b)
    assert np.abs(with_mem - without).max() > 1e-6


def test_forward_matches_dense_oracle(toy_model, memories):
    context = list(range(30, 42))
    cache, _ = exmem.start_session(toy_model)
    got = exmem.forward_chunk(toy_model, context, cache, memories[:3])
    want = oracles.oracle_session_logits(toy_model, context, memories[:3])
    # oracle rows cover separator + context; implementation returns context
    np.testing.assert_allclose(got, want[1:], atol=1e-5)


# -- session start ------------------------------------------------------


def test_start_session_positions(toy_model):
    cfg = toy_model.config
    cache, _ = exmem.start_session(toy_model)
    pos = cache.positions[0]
    expect = list(range(cfg.prefix_len)) + [cfg.context_start]
    assert pos.tolist() == expect
    assert cache.next_position == cfg.context_start + 1
    for layer in range(cfg.L):
        assert cache.layer_len(layer) == cfg.prefix_len + 1


# -- reference encoding -------------------------------------------------


def test_encoding_shapes(toy_model, corpus):
    cfg = toy_model.config
    enc = exmem.encode_reference_kv(toy_model, corpus[0])
    n = len(corpus[0])
    assert enc.keys.shape == (cfg.L_mem, cfg.H_kv, n, cfg.d_h)
    assert enc.values.shape == enc.keys.shape
    assert enc.sel_q.shape == (cfg.L_mem, cfg.H, n, cfg.d_h)
    assert enc.sel_k.shape == (cfg.L_mem, cfg.H_kv, n, cfg.d_h)
    assert enc.base_position == cfg.memory_interval_start
    assert enc.ref_len == n


def test_encoding_keys_are_rotated(toy_model, corpus):
    """Stored keys must equal the unrotated selection keys rotated at the
    shared memory-interval positions."""
    cfg = toy_model.config
    enc = exmem.encode_reference_kv(toy_model, corpus[0])
    n = enc.ref_len
    positions = np.arange(enc.base_position, enc.base_position + n)
    rotated = rope_rotate(enc.sel_k, positions)
    np.testing.assert_allclose(enc.keys, rotated, atol=1e-6)


def test_encoding_offset_moves_keys_only(toy_model, corpus):
    enc_a = exmem.encode_reference_kv(toy_model, corpus[0])
    enc_b = exmem.encode_reference_kv(toy_model, corpus[0],
                                      key_position_offset=500)
    np.testing.assert_array_equal(enc_a.values, enc_b.values)
    np.testing.assert_array_equal(enc_a.sel_q, enc_b.sel_q)
    np.testing.assert_array_equal(enc_a.sel_k, enc_b.sel_k)
    assert np.abs(enc_a.keys - enc_b.keys).max() > 1e-6
    assert enc_b.base_position == 500


def test_encoding_rejects_bad_lengths(toy_model, toy_config):
    with pytest.raises(InputError):
        exmem.encode_reference_kv(toy_model, [])
    with pytest.raises(InputError):
        exmem.encode_reference_kv(toy_model, [1] * (toy_config.l_ref + 1))


def test_encode_references_batch(toy_model, corpus):
    encs = exmem.encode_references(toy_model, corpus[:3])
    assert len(encs) == 3
    solo = exmem.encode_reference_kv(toy_model, corpus[1])
    np.testing.assert_array_equal(encs[1].keys, solo.keys)


# -- flop accounting ----------------------------------------------------


def test_encode_flops_matches_cost_model(toy_config):
    from exmem.costmodel import CostParams, cost_write_explicit
    for cfg in (toy_config, ModelConfig.reference()):
        params = CostParams.from_model_config(cfg)
        got = exmem.encode_reference_flops(cfg)
        want = cost_write_explicit(params) * 1e12
        assert got == pytest.approx(want, rel=1e-9)


def test_param_count_formula(toy_model, toy_config):
    counted = sum(
        arr.size
        for lp in toy_model.layers
        for arr in (lp.attn_norm, lp.w_q, lp.w_k, lp.w_v, lp.w_o,
                    lp.mlp_norm, lp.w_gate, lp.w_up, lp.w_down)
    ) + toy_model.final_norm.size
    assert exmem.n_params_non_embedding(toy_config) == counted


def test_reference_param_count():
    got = exmem.n_params_non_embedding(ModelConfig.reference())
    assert got == oracles.GOLDEN_NON_EMBEDDING_PARAMS
    assert got == pytest.approx(2.4e9, rel=0.05)


# -- persistence --------------------------------------------------------


def test_model_save_load_round_trip(toy_model, tmp_path):
    path = tmp_path / "model.bin"
    exmem.save_model(toy_model, path)
    back = exmem.load_model(path)
    assert back.config == toy_model.config
    np.testing.assert_array_equal(back.embedding, toy_model.embedding)
    np.testing.assert_array_equal(back.lm_head, toy_model.lm_head)
    for a, b in zip(back.layers, toy_model.layers):
        np.testing.assert_array_equal(a.w_q, b.w_q)
        np.testing.assert_array_equal(a.w_down, b.w_down)


def test_model_save_is_deterministic(toy_model, tmp_path):
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    exmem.save_model(toy_model, p1)
    exmem.save_model(toy_model, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_model_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(FormatError):
        exmem.load_model(path)


def test_model_load_rejects_future_version(toy_model, tmp_path):
    path = tmp_path / "model.bin"
    exmem.save_model(toy_model, path)
    blob = bytearray(path.read_bytes())
    blob[4:6] = (99).to_bytes(2, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(CompatibilityError):
        exmem.load_model(path)


def test_model_load_rejects_truncation(toy_model, tmp_path):
    path = tmp_path / "model.bin"
    exmem.save_model(toy_model, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(FormatError):
        exmem.load_model(path)


def test_init_model_seeded(toy_config):
    a = exmem.init_model(toy_config, seed=7)
    b = exmem.init_model(toy_config, seed=7)
    c = exmem.init_model(toy_config, seed=8)
    np.testing.assert_array_equal(a.embedding, b.embedding)
    assert np.abs(a.embedding - c.embedding).max() > 0
