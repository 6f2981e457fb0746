"""Process window and KV-cache engine contracts."""

import numpy as np
import pytest

from mant.codec import quantize_activation_group, quantize_weight_group
from mant.kvcache import KvCache, ProcessWindow
from mant.selection import normalized_variance, table_from_probe_means

TABLE = table_from_probe_means((0, 20, 40, 80, 120), [0.05, 0.11, 0.15, 0.25])


def make_window(channels=4, group_size=8, scale=0.05):
    return ProcessWindow(np.full(channels, scale), group_size)


class TestProcessWindow:
    def test_first_push_statistics(self):
        w = make_window()
        v = np.array([0.1, -0.2, 0.0, 1.0])
        w.push(v)
        assert w.fill_count == 1
        decoded = w.staged_dequantized()[0]
        assert np.allclose(w.sum_v, decoded)
        assert np.allclose(w.sum_v2, decoded ** 2)
        assert np.allclose(w.running_max, np.abs(decoded))

    def test_window_contract(self):
        w = make_window()
        for _ in range(w.group_size):
            w.push(np.ones(4) * 0.1)
        assert w.is_full
        with pytest.raises(ValueError):
            w.push(np.ones(4))
        w.flush(TABLE)
        assert w.fill_count == 0
        w.push(np.ones(4) * 0.1)  # usable again after flush

    def test_flush_requires_full(self):
        w = make_window()
        w.push(np.zeros(4))
        with pytest.raises(ValueError):
            w.flush(TABLE)

    def test_staged_matches_activation_codec(self):
        # staged INT8 codes equal the activation encoder run at the same scale
        rng = np.random.default_rng(0)
        rows = rng.standard_normal((8, 4))
        # in-range channel scales so the sentinel below pins the codec scale
        scales = np.max(np.abs(rows), axis=0) / 127.0 * np.array([1.0, 1.5, 2.0, 4.0])
        w = ProcessWindow(scales, 8)
        for row in rows:
            w.push(row)
        assert w.clamp_count == 0
        for c, s in enumerate(scales):
            # pin the codec's group scale to s via a sentinel absmax element
            sentinel = np.concatenate([[127.0 * s], rows[:, c]])
            codec_codes, meta = quantize_activation_group(sentinel)
            assert meta.scale == pytest.approx(s, rel=1e-15)
            assert np.array_equal(w.staged[:8, c], codec_codes[1:])

    def test_flush_composes_with_weight_codec(self):
        rng = np.random.default_rng(1)
        w = ProcessWindow(np.full(6, 0.02), 16)
        for _ in range(16):
            w.push(rng.standard_normal(6) * 0.5)
        staged = w.staged_dequantized().copy()
        sums, sums2, maxes = w.sum_v.copy(), w.sum_v2.copy(), w.running_max.copy()
        codes, metas = w.flush(TABLE)
        for c in range(6):
            var = (sums2[c] / 16 - (sums[c] / 16) ** 2) / maxes[c] ** 2
            expected_a = TABLE.lookup(var)
            ref_codes, ref_meta = quantize_weight_group(staged[:, c], expected_a)
            assert metas[c].coefficient_a == expected_a
            assert metas[c].scale == ref_meta.scale
            assert np.array_equal(codes[c], ref_codes)

    def test_streaming_variance_matches_two_pass(self):
        rng = np.random.default_rng(2)
        w = ProcessWindow(np.full(3, 0.7), 32)
        for _ in range(32):
            w.push(rng.standard_normal(3) * 40)
        staged = w.staged_dequantized()
        for c in range(3):
            streaming = (w.sum_v2[c] / 32 - (w.sum_v[c] / 32) ** 2) / w.running_max[c] ** 2
            assert abs(streaming - normalized_variance(staged[:, c])) < 1e-9

    def test_all_zero_window(self):
        w = make_window(channels=2, group_size=4)
        for _ in range(4):
            w.push(np.zeros(2))
        codes, metas = w.flush(TABLE)
        assert np.all(codes == 0)
        assert all(m.scale == 0.0 for m in metas)
        assert all(m.coefficient_a == 0 for m in metas)  # smallest candidate

    def test_clamp_counting(self):
        w = ProcessWindow(np.array([0.01, 0.0]), 4)
        w.push(np.array([100.0, 0.0]))   # channel 0 clamps, channel 1 clean
        assert w.clamp_count == 1
        assert w.staged[0, 0] == 127
        w.push(np.array([0.5, 1.0]))     # zero-scale channel loses a value
        assert w.clamp_count == 2
        assert w.staged[1, 1] == 0

    def test_shape_check(self):
        w = make_window(channels=4)
        with pytest.raises(ValueError):
            w.push(np.zeros(5))


def make_cache(heads=2, head_dim=128, group_size=64):
    return KvCache(heads, head_dim, TABLE, TABLE, group_size)


class TestKvCache:
    def test_k_step_group_count(self):
        cache = make_cache(head_dim=128)
        assert cache.n_k_groups == 2
        cache.append_k(np.random.default_rng(3).standard_normal((2, 128)))
        assert cache.seq_len == 1

    def test_k_step_deterministic(self):
        rng = np.random.default_rng(4)
        k = rng.standard_normal((2, 128))
        c1, c2 = make_cache(), make_cache()
        c1.append_k(k)
        c2.append_k(k)
        assert np.array_equal(c1.k_arrays()[0], c2.k_arrays()[0])
        c1.append_k(k)
        a1 = c1.k_arrays()
        assert np.array_equal(a1[0][0], a1[0][1])
        assert np.array_equal(a1[1][0], a1[1][1])

    def test_k_reconstruction_bound(self):
        rng = np.random.default_rng(5)
        cache = make_cache()
        k = rng.standard_normal((2, 128))
        cache.append_k(k)
        decoded = cache.k_dequantized()[0]
        _, scales, coeffs = cache.k_arrays()
        for h in range(2):
            for g, (start, stop) in enumerate(cache.k_group_slices):
                gap = int(coeffs[0, h, g]) + 64
                bound = scales[0, h, g] * gap / 2 + 1e-12
                assert np.max(np.abs(decoded[h, start:stop] - k[h, start:stop])) <= bound

    def test_conservation_through_decode(self):
        rng = np.random.default_rng(6)
        cache = make_cache(heads=1, head_dim=64, group_size=16)
        cache.prefill(rng.standard_normal((40, 1, 64)), rng.standard_normal((40, 1, 64)))
        assert cache.flushed_tokens == 32 and cache.window_fill == 8
        assert cache.conservation_holds()
        flushes = []
        for t in range(30):
            cache.append_k(rng.standard_normal((1, 64)))
            if cache.push_v(rng.standard_normal((1, 64))):
                flushes.append(t)
            assert cache.conservation_holds()
        assert cache.total_v_tokens == 70
        assert flushes == [7, 23]  # fill was 8/16 after the prefill remainder

    def test_prefill_requires_empty_cache(self):
        rng = np.random.default_rng(7)
        cache = make_cache(heads=1, head_dim=64)
        data = rng.standard_normal((64, 1, 64))
        cache.prefill(data, data)
        with pytest.raises(ValueError):
            cache.prefill(data, data)

    def test_push_before_prefill(self):
        cache = make_cache(heads=1, head_dim=64)
        with pytest.raises(ValueError):
            cache.push_v(np.zeros((1, 64)))

    def test_v_roundtrip_error_bounded(self):
        rng = np.random.default_rng(8)
        cache = make_cache(heads=1, head_dim=64, group_size=32)
        v = rng.standard_normal((64, 1, 64))
        cache.prefill(v.copy(), v.copy())
        decoded = cache.v_dequantized()
        # flushed blocks are 4-bit: coarse but bounded; staged rows INT8
        assert np.max(np.abs(decoded - v)) < np.max(np.abs(v)) * 0.5
        assert decoded.shape == v.shape

    def test_geometry_checks(self):
        cache = make_cache(heads=2, head_dim=64)
        with pytest.raises(ValueError):
            cache.append_k(np.zeros((3, 64)))
        with pytest.raises(ValueError):
            KvCache(0, 64, TABLE, TABLE)


class TestMaxSeq:
    def test_capacity_enforced(self):
        rng = np.random.default_rng(9)
        cache = KvCache(1, 64, TABLE, TABLE, group_size=16, max_seq=3)
        cache.prefill(rng.standard_normal((2, 1, 64)), rng.standard_normal((2, 1, 64)))
        cache.append_k(rng.standard_normal((1, 64)))
        cache.push_v(rng.standard_normal((1, 64)))
        with pytest.raises(ValueError):
            cache.append_k(rng.standard_normal((1, 64)))
        with pytest.raises(ValueError):
            cache.push_v(rng.standard_normal((1, 64)))

    def test_prefill_overflow(self):
        rng = np.random.default_rng(10)
        cache = KvCache(1, 64, TABLE, TABLE, max_seq=4)
        with pytest.raises(ValueError):
            cache.prefill(rng.standard_normal((8, 1, 64)), rng.standard_normal((8, 1, 64)))
