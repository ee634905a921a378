import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from teleqlora.quant import (
    Nf4Codebook,
    QuantizedTensor,
    build_nf4_codebook,
    dequantize,
    pack_codes,
    quantize_blockwise,
    unpack_codes,
)

# Golden 16-value codebook, frozen from an independent quantile-construction
# script (scipy norm.ppf over the offset linspace, normalized to +/-1).
GOLDEN_NF4 = [
    -1.0,
    -0.696192805632343,
    -0.5250729594465005,
    -0.3949174259199071,
    -0.28444130892108205,
    -0.1847734028004556,
    -0.09104997598578049,
    0.0,
    0.07958031495840909,
    0.1609301443802907,
    0.2461122513474594,
    0.3379151367131279,
    0.44070973186421625,
    0.5626168879699849,
    0.7229566441594734,
    1.0,
]


def brute_force_codes(block, scale, values):
    """Independent nearest-codebook search: per-element loop, ties -> lower index."""
    codes = []
    for x in block:
        xn = np.float32(x) / np.float32(scale) if scale > 0 else 0.0
        best, best_d = 0, abs(float(xn) - values[0])
        for j in range(1, 16):
            d = abs(float(xn) - values[j])
            if d < best_d:
                best, best_d = j, d
        codes.append(best)
    return codes


class TestCodebook:
    def test_endpoints(self):
        cb = build_nf4_codebook()
        assert cb.values[0] == -1.0
        assert cb.values[15] == 1.0

    def test_exact_zero(self):
        cb = build_nf4_codebook()
        assert 0.0 in cb.values
        assert cb.values.count(0.0) == 1

    def test_golden_vector(self):
        cb = build_nf4_codebook()
        assert np.allclose(cb.values, GOLDEN_NF4, atol=1e-3)

    def test_strictly_increasing(self):
        cb = build_nf4_codebook()
        assert all(b > a for a, b in zip(cb.values, cb.values[1:]))

    def test_invariant_enforcement(self):
        with pytest.raises(ValueError):
            Nf4Codebook(tuple(float(i) for i in range(16)))


class TestQuantize:
    def test_empty_input(self):
        with pytest.raises(ValueError, match="empty tensor"):
            quantize_blockwise(np.array([]), 64, build_nf4_codebook())

    def test_all_zero_block(self):
        cb = build_nf4_codebook()
        qt = quantize_blockwise(np.zeros(64, dtype=np.float32), 64, cb)
        assert qt.scales[0] == 0.0
        zero_idx = cb.values.index(0.0)
        assert (unpack_codes(qt.codes, 64) == zero_idx).all()
        assert (dequantize(qt, cb) == 0.0).all()

    def test_codebook_fixed_points_roundtrip(self):
        cb = build_nf4_codebook()
        scale = np.float32(3.5)
        block = (scale * np.asarray(cb.values, dtype=np.float32)).astype(np.float32)
        data = np.tile(block, 4)
        qt = quantize_blockwise(data, 16, cb)
        assert np.array_equal(dequantize(qt, cb), data)

    def test_matches_brute_force_on_gaussian_block(self):
        cb = build_nf4_codebook()
        rng = np.random.default_rng(7)
        block = rng.normal(size=64).astype(np.float32)
        qt = quantize_blockwise(block, 64, cb)
        scale = np.abs(block).max()
        expected = brute_force_codes(block, scale, GOLDEN_NF4)
        assert unpack_codes(qt.codes, 64).tolist() == expected

    def test_shape_and_scale_count(self):
        cb = build_nf4_codebook()
        data = np.random.default_rng(0).normal(size=(5, 13)).astype(np.float32)
        qt = quantize_blockwise(data, 8, cb)
        assert qt.shape == (5, 13)
        assert qt.scales.size == int(np.ceil(65 / 8))
        assert (qt.scales >= 0).all()


class TestDequantize:
    def test_zero_scale_block(self):
        cb = build_nf4_codebook()
        qt = quantize_blockwise(np.zeros(10, dtype=np.float32), 4, cb)
        assert (dequantize(qt, cb) == 0.0).all()

    def test_mse_matches_oracle(self):
        # reconstruction error must equal the direct nearest-codebook oracle's
        cb = build_nf4_codebook()
        rng = np.random.default_rng(123)
        data = rng.standard_normal(4096).astype(np.float32)
        qt = quantize_blockwise(data, 64, cb)
        recon = dequantize(qt, cb)
        mse = float(np.mean((recon - data) ** 2))

        oracle_sq = 0.0
        values = np.asarray(GOLDEN_NF4)
        for start in range(0, 4096, 64):
            block = data[start : start + 64]
            scale = np.abs(block).max()
            codes = brute_force_codes(block, scale, GOLDEN_NF4)
            rec = np.float32(scale) * values[codes].astype(np.float32)
            oracle_sq += float(np.sum((rec.astype(np.float32) - block) ** 2))
        oracle_mse = oracle_sq / 4096
        assert mse <= oracle_mse + 1e-9

    def test_corrupt_code_stream_length(self):
        cb = build_nf4_codebook()
        qt = quantize_blockwise(np.ones(64, dtype=np.float32), 64, cb)
        bad = QuantizedTensor(qt.codes[:-5], qt.scales, qt.block_size, qt.shape)
        with pytest.raises(ValueError, match="corrupt code stream"):
            dequantize(bad, cb)

    def test_corrupt_code_value(self):
        cb = build_nf4_codebook()
        codes = np.full(64, 16, dtype=np.uint8)  # unpacked form, index > 15
        bad = QuantizedTensor(codes, np.ones(1, dtype=np.float32), 64, (64,))
        with pytest.raises(ValueError, match="corrupt code stream"):
            dequantize(bad, cb)


class TestProperties:
    def test_roundtrip_contraction(self):
        cb = build_nf4_codebook()
        gaps = np.diff(np.asarray(cb.values))
        half_max_gap = gaps.max() / 2
        rng = np.random.default_rng(42)
        for _ in range(50):
            block = (rng.standard_normal(64) * rng.uniform(0.1, 10)).astype(np.float32)
            qt = quantize_blockwise(block, 64, cb)
            err = np.abs(dequantize(qt, cb) - block).max()
            assert err <= qt.scales[0] * half_max_gap + 1e-7

    def test_idempotence_bit_for_bit(self):
        cb = build_nf4_codebook()
        rng = np.random.default_rng(5)
        data = rng.standard_normal(640).astype(np.float32)
        q1 = quantize_blockwise(data, 64, cb)
        q2 = quantize_blockwise(dequantize(q1, cb), 64, cb)
        assert np.array_equal(q1.codes, q2.codes)
        assert np.array_equal(q1.scales, q2.scales)

    def test_scale_invariance_power_of_two(self):
        cb = build_nf4_codebook()
        rng = np.random.default_rng(9)
        data = rng.standard_normal(128).astype(np.float32)
        base = quantize_blockwise(data, 64, cb)
        for c in (2.0, 8.0, 0.25):
            scaled = quantize_blockwise((data * c).astype(np.float32), 64, cb)
            assert np.array_equal(base.codes, scaled.codes)
            assert np.allclose(scaled.scales, base.scales * c, rtol=1e-7)

    @given(st.lists(st.integers(0, 15), min_size=0, max_size=257))
    @settings(max_examples=200, deadline=None)
    def test_pack_unpack_roundtrip(self, codes):
        packed = pack_codes(np.asarray(codes, dtype=np.uint8))
        assert unpack_codes(packed, len(codes)).tolist() == codes
