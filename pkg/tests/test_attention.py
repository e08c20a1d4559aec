import numpy as np
import pytest

from kvmix.attention import (
    SplitPartial,
    apply_mixed_quantization,
    attention_full,
    attention_selective_quant,
    flash_decode,
    merge_partials,
    output_mse,
    output_mse_per_head,
)
from kvmix.errors import ValidationError
from kvmix.pool import MixedPrecisionPool, PoolConfig

from conftest import dense_attention_f64


def rand_qkv(seed, n_q=8, n_keys=40, n_heads=4, n_kv=2, d=32):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n_q, n_heads, d), dtype=np.float32)
    k = rng.standard_normal((n_keys, n_kv, d), dtype=np.float32)
    v = rng.standard_normal((n_keys, n_kv, d), dtype=np.float32)
    return q, k, v


class TestAttentionFull:
    def test_matches_f64_oracle(self):
        q, k, v = rand_qkv(0)
        out = attention_full(q, k, v)
        ref = dense_attention_f64(q, k, v)
        assert np.abs(out - ref).max() < 1e-5

    def test_causal_matches_oracle(self):
        q, k, v = rand_qkv(1)
        out = attention_full(q, k, v, causal=True)
        ref = dense_attention_f64(q, k, v, causal=True)
        assert np.abs(out - ref).max() < 1e-5

    def test_probs_sum_to_one(self):
        q, k, v = rand_qkv(2)
        _, probs = attention_full(q, k, v, return_probs=True)
        assert np.allclose(probs.sum(axis=2), 1.0, atol=1e-6)

    def test_uniform_when_keys_identical(self):
        rng = np.random.default_rng(3)
        q = rng.standard_normal((1, 2, 16), dtype=np.float32)
        k = np.tile(rng.standard_normal((1, 1, 16), dtype=np.float32), (10, 1, 1))
        v = rng.standard_normal((10, 1, 16), dtype=np.float32)
        out = attention_full(q, k, v)
        assert np.allclose(out[0, 0], v[:, 0].mean(axis=0), atol=1e-6)

    def test_large_logits_stable(self):
        q, k, v = rand_qkv(4)
        out = attention_full(q * 1e4, k * 1e4, v)
        assert np.all(np.isfinite(out))

    def test_gqa_head_mapping(self):
        q, k, v = rand_qkv(5, n_heads=4, n_kv=2)
        out = attention_full(q, k, v)
        k_dup = np.repeat(k, 2, axis=1)
        v_dup = np.repeat(v, 2, axis=1)
        assert np.allclose(out, attention_full(q, k_dup, v_dup), atol=1e-6)

    def test_shape_validation(self):
        q, k, v = rand_qkv(6)
        with pytest.raises(ValidationError):
            attention_full(q, k, v[:-1])
        with pytest.raises(ValidationError):
            attention_full(q[..., :16], k, v)


class TestOutputMse:
    def test_zero_for_identical(self):
        x = np.ones((4, 2, 8))
        assert output_mse(x, x) == 0.0

    def test_hand_value(self):
        a = np.zeros((2, 1, 4))
        b = np.full((2, 1, 4), 0.5)
        assert output_mse(a, b) == pytest.approx(1.0)

    def test_per_head_mean_matches_total(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((5, 3, 8))
        b = rng.standard_normal((5, 3, 8))
        assert output_mse_per_head(a, b).mean() == pytest.approx(output_mse(a, b))


class TestMixedQuantization:
    def test_zero_bits_rows_untouched(self):
        _, k, v = rand_qkv(8)
        bits = np.zeros(k.shape[0], dtype=int)
        kq, vq = apply_mixed_quantization(k, v, bits)
        assert np.array_equal(kq, k)
        assert np.array_equal(vq, v)

    def test_int4_rows_change_but_stay_close(self):
        _, k, v = rand_qkv(9)
        bits = np.full(k.shape[0], 4)
        kq, vq = apply_mixed_quantization(k, v, bits)
        assert not np.array_equal(kq, k)
        assert np.abs(kq - k).max() < 0.5

    def test_residual_int2_routes_to_int4(self):
        _, k, v = rand_qkv(10, n_keys=40)
        bits_short = np.zeros(40, dtype=int)
        bits_short[:20] = 2  # fewer than a page: must behave as INT4
        bits_int4 = np.zeros(40, dtype=int)
        bits_int4[:20] = 4
        assert np.array_equal(
            apply_mixed_quantization(k, v, bits_short)[0],
            apply_mixed_quantization(k, v, bits_int4)[0],
        )

    def test_int2_distorts_more_than_int4(self):
        q, k, v = rand_qkv(11, n_keys=64)
        ref = attention_full(q, k, v)
        errs = {}
        for b in (2, 4):
            kq, vq = apply_mixed_quantization(k, v, np.full(64, b))
            errs[b] = output_mse(ref, attention_full(q, kq, vq))
        assert errs[2] > errs[4] > 0

    def test_rejects_bad_bits(self):
        _, k, v = rand_qkv(12)
        with pytest.raises(ValidationError):
            apply_mixed_quantization(k, v, np.full(k.shape[0], 3))


class TestSelectiveQuant:
    def test_only_target_rows_affected(self):
        q, k, v = rand_qkv(13, n_keys=64)
        tags = np.array([5] * 32 + [9] * 32)
        out = attention_selective_quant(q, k, v, tags, target=5, bitwidth=4)
        bits = np.where(tags == 5, 4, 0)
        kq, vq = apply_mixed_quantization(k, v, bits)
        assert np.allclose(out, attention_full(q, kq, vq), atol=1e-7)

    def test_absent_tag_is_identity(self):
        q, k, v = rand_qkv(14)
        tags = np.zeros(k.shape[0], dtype=int)
        out = attention_selective_quant(q, k, v, tags, target=30, bitwidth=2)
        assert np.allclose(out, attention_full(q, k, v), atol=1e-7)


class TestMergePartials:
    def test_single_split_equals_dense(self):
        rng = np.random.default_rng(15)
        qh = rng.standard_normal(16).astype(np.float32)
        k = rng.standard_normal((20, 16)).astype(np.float32)
        v = rng.standard_normal((20, 16)).astype(np.float32)
        from kvmix.attention import _split_partial

        out = merge_partials([_split_partial(qh, k, v, 0.25)])
        ref = dense_attention_f64(qh[None, None], k[:, None], v[:, None], scale=0.25)
        assert np.abs(out - ref[0, 0]).max() < 1e-5

    def test_order_invariant(self):
        rng = np.random.default_rng(16)
        parts = [
            SplitPartial(
                acc=rng.standard_normal(8).astype(np.float32),
                lse=float(rng.uniform(-5, 5)),
                max_logit=float(rng.uniform(-5, 5)),
            )
            for _ in range(5)
        ]
        a = merge_partials(parts)
        b = merge_partials(list(reversed(parts)))
        assert np.allclose(a, b, rtol=1e-6)

    def test_extreme_logit_gap_stable(self):
        acc = np.ones(4, dtype=np.float32)
        big = SplitPartial(acc=acc * 3, lse=1000.0, max_logit=1000.0)
        tiny = SplitPartial(acc=acc, lse=-1000.0, max_logit=-1000.0)
        out = merge_partials([big, tiny])
        assert np.all(np.isfinite(out))
        assert np.allclose(out, 3.0, atol=1e-5)

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            merge_partials([])


def build_pool_table(seed, n_int2, n_int4, n_layers=1, n_kv=2, d=32):
    rng = np.random.default_rng(seed)
    n = n_int2 + n_int4
    keys = rng.standard_normal((n_layers, n, n_kv, d)).astype(np.float32)
    values = rng.standard_normal((n_layers, n, n_kv, d)).astype(np.float32)
    bits = np.array([2] * n_int2 + [4] * n_int4)
    config = PoolConfig(
        total_slots=4 * n + 64, offset=((2 * n) // 32) * 32,
        n_layers=n_layers, n_kv_heads=n_kv, head_dim=d,
    )
    pool = MixedPrecisionPool(config)
    table = pool.alloc("req", bits)
    pool.write_prefill(table, keys, values)
    pool.partition(table)
    return pool, table, keys, values, bits


class TestFlashDecode:
    def test_matches_dense_over_quantized_kv(self):
        pool, table, keys, values, bits = build_pool_table(17, 64, 20)
        rng = np.random.default_rng(18)
        q = rng.standard_normal((4, 32)).astype(np.float32)
        kq, vq = apply_mixed_quantization(keys[0], values[0], bits)
        ref = dense_attention_f64(q[None], kq, vq)[0]
        out = flash_decode(q, table, pool.view(0))
        rel = np.abs(out - ref).max() / np.abs(ref).max()
        assert rel < 1e-5

    def test_split_length_invariance(self):
        pool, table, _, _, _ = build_pool_table(19, 64, 20)
        rng = np.random.default_rng(20)
        q = rng.standard_normal((4, 32)).astype(np.float32)
        outs = [flash_decode(q, table, pool.view(0), split_len=s) for s in (1, 7, 32, 128, 512)]
        for o in outs[1:]:
            assert np.allclose(o, outs[0], rtol=1e-5, atol=1e-6)

    def test_requires_partitioned_table(self):
        pool, table, keys, values, bits = build_pool_table(21, 32, 8)
        # Build an unpartitioned table by interleaving bits.
        mixed_bits = np.array([4] * 8 + [2] * 32)
        table2 = pool.alloc("req2", mixed_bits)
        n = mixed_bits.size
        rng = np.random.default_rng(22)
        pool.write_prefill(
            table2,
            rng.standard_normal((1, n, 2, 32)).astype(np.float32),
            rng.standard_normal((1, n, 2, 32)).astype(np.float32),
        )
        q = rng.standard_normal((4, 32)).astype(np.float32)
        with pytest.raises(ValidationError):
            flash_decode(q, table2, pool.view(0))

    def test_gqa_decode(self):
        pool, table, keys, values, bits = build_pool_table(23, 32, 8, n_kv=2)
        rng = np.random.default_rng(24)
        q = rng.standard_normal((8, 32)).astype(np.float32)  # 4x grouping
        kq, vq = apply_mixed_quantization(keys[0], values[0], bits)
        ref = dense_attention_f64(q[None], kq, vq)[0]
        out = flash_decode(q, table, pool.view(0))
        assert np.abs(out - ref).max() / np.abs(ref).max() < 1e-5
