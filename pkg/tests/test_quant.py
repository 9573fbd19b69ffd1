from pathlib import Path

import numpy as np
import pytest

from gradekit import quant
from gradekit.ndcore import Parameter

GOLDEN = Path(__file__).parent / "golden" / "nf4_levels.txt"


# ---------------------------------------------------------------------------
# comparison oracle: a plain uniform 16-level quantizer over the same blocks
# ---------------------------------------------------------------------------

def uniform_int4_roundtrip(data: np.ndarray, block_size: int = 64) -> np.ndarray:
    levels = np.linspace(-1.0, 1.0, 16)
    flat = data.ravel().astype(np.float64)
    out = np.zeros_like(flat)
    for start in range(0, flat.size, block_size):
        block = flat[start : start + block_size]
        scale = np.abs(block).max()
        if scale == 0:
            continue
        idx = np.abs(block[:, None] / scale - levels[None, :]).argmin(axis=1)
        out[start : start + block_size] = levels[idx] * scale
    return out.reshape(data.shape)


class TestCodebook:
    def test_matches_golden_file(self):
        assert quant.codebook_lines() == GOLDEN.read_text().splitlines()

    def test_structure(self):
        cb = quant.nf4_codebook()
        assert cb.levels.shape == (16,)
        assert cb.levels[0] == -1.0 and cb.levels[15] == 1.0
        assert np.count_nonzero(cb.levels == 0.0) == 1
        assert np.all(np.diff(cb.levels) > 0)

    def test_asymmetry_is_eight_positive_seven_negative(self):
        cb = quant.nf4_codebook()
        assert int((cb.levels > 0).sum()) == 8
        assert int((cb.levels < 0).sum()) == 7


class TestQuantizeRoundTrip:
    def test_all_zero_matrix(self):
        q = quant.quantize_nf4(np.zeros((4, 4)), block_size=4)
        assert np.all(q.codes == quant.nf4_codebook().zero_code)
        assert np.array_equal(quant.dequantize(q).data, np.zeros((4, 4), dtype=np.float32))

    def test_endpoint_and_zero_exactness(self):
        q = quant.quantize_nf4(np.array([[-2.0, 0.0, 1.0, 2.0]]), block_size=4)
        d = quant.dequantize(q).data
        assert d[0, 0] == -2.0
        assert d[0, 1] == 0.0
        assert d[0, 3] == 2.0

    def test_shape_preserved(self):
        rng = np.random.default_rng(0)
        m = rng.normal(size=(7, 13)).astype(np.float32)
        assert quant.dequantize(quant.quantize_nf4(m, block_size=8)).shape == (7, 13)

    @pytest.mark.parametrize("seed", range(5))
    def test_code_idempotence(self, seed):
        rng = np.random.default_rng(seed)
        m = rng.normal(size=(24, 24)).astype(np.float32)
        q = quant.quantize_nf4(m, block_size=16)
        q2 = quant.quantize_nf4(quant.dequantize(q).data, block_size=16)
        assert np.array_equal(q.codes, q2.codes)

    def test_fixed_point_matrix_reproduced_bit_exactly(self):
        # a matrix already equal to scaled codebook levels (one shared scale,
        # each block containing an extreme level) survives the round trip
        rng = np.random.default_rng(1)
        levels = quant.nf4_codebook().levels
        codes = rng.integers(0, 16, size=(8, 16)).astype(np.uint8)
        codes.reshape(-1, 16)[:, 0] = 15
        m = (levels[codes] * np.float32(3.7)).astype(np.float32)
        q = quant.quantize_nf4(m, block_size=16)
        assert np.array_equal(quant.dequantize(q).data, m)

    @pytest.mark.parametrize("seed", range(5))
    def test_roundtrip_error_within_half_gap(self, seed):
        rng = np.random.default_rng(100 + seed)
        m = rng.normal(size=(16, 64)).astype(np.float32)
        d = quant.dequantize(quant.quantize_nf4(m, block_size=64)).data
        bound = quant.nf4_codebook().max_half_gap()
        scales = np.abs(m.reshape(-1, 64)).max(axis=1)
        # per-element error relative to its block scale, with slack for the
        # 8-bit constant quantization
        rel = np.abs(d - m).reshape(-1, 64) / scales[:, None]
        assert rel.max() <= bound * 1.01

    def test_partial_last_block(self):
        rng = np.random.default_rng(2)
        m = rng.normal(size=(3, 7)).astype(np.float32)  # 21 elements, block 8
        q = quant.quantize_nf4(m, block_size=8)
        assert q.n_blocks == 3
        assert q.codes.shape == (21,)
        q2 = quant.quantize_nf4(quant.dequantize(q).data, block_size=8)
        assert np.array_equal(q.codes, q2.codes)

    def test_corrupted_code_rejected(self):
        q = quant.quantize_nf4(np.ones((2, 2)), block_size=4)
        q.codes = q.codes.copy()
        q.codes[0] = 99
        with pytest.raises(quant.DecodeError):
            quant.dequantize(q)

    def test_tie_breaks_toward_zero(self):
        levels = quant.nf4_codebook().levels.astype(np.float64)
        mid = (levels[7] + levels[8]) / 2.0  # between 0 and the first positive level
        block = np.array([[1.0, float(mid), -1.0, 0.0]], dtype=np.float32)
        q = quant.quantize_nf4(block, block_size=4)
        assert q.codes[1] == 7  # the zero level, nearer zero than level 8

    def test_nf4_beats_uniform_on_gaussian(self):
        wins = 0
        for seed in range(10):
            rng = np.random.default_rng(1000 + seed)
            data = rng.normal(size=(100, 100)).astype(np.float32)
            d = quant.dequantize(quant.quantize_nf4(data, block_size=64)).data
            mse_nf4 = float(((d - data) ** 2).mean())
            mse_uniform = float(((uniform_int4_roundtrip(data) - data) ** 2).mean())
            wins += mse_nf4 < mse_uniform
        assert wins == 10


class TestOpt8:
    def test_zero_gradient_is_fixed_point(self):
        p = Parameter(np.array([[1.0, -2.0]]))
        before = p.data.copy()
        state = quant.Opt8State.for_parameter(p)
        quant.opt8_step(p, state, lr=0.1)
        assert np.array_equal(p.data, before)

    def test_scalar_step_matches_hand_oracle(self):
        p = Parameter(np.array([[1.0]]))
        p.grad = np.array([[1.0]], dtype=np.float32)
        state = quant.Opt8State.for_parameter(p, quantized=False)
        quant.opt8_step(p, state, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        # m=0.1, v=0.001, m_hat=1, v_hat=1 -> p = 1 - 0.1/(1+1e-8)
        expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8))
        assert abs(float(p.data[0, 0]) - expected) < 1e-7

    def test_full_precision_mode_matches_reference_trajectory(self):
        # hand-written float32 adaptive-moment update, same precision class
        rng = np.random.default_rng(3)
        target = rng.normal(size=64).astype(np.float32)
        p = Parameter(np.zeros((1, 64)))
        state = quant.Opt8State.for_parameter(p, quantized=False)
        m = np.zeros(64, dtype=np.float32)
        v = np.zeros(64, dtype=np.float32)
        x = np.zeros(64, dtype=np.float32)
        for t in range(1, 51):
            p.grad = (2.0 * (p.data - target)).astype(np.float32)
            quant.opt8_step(p, state, lr=0.05)
            gf = (np.float32(2.0) * (x - target)).astype(np.float32)
            m = np.float32(0.9) * m + np.float32(1.0 - 0.9) * gf
            v = np.float32(0.999) * v + np.float32(1.0 - 0.999) * gf * gf
            mh = m / np.float32(1 - 0.9**t)
            vh = v / np.float32(1 - 0.999**t)
            x = x - np.float32(0.05) * (mh / (np.sqrt(vh) + np.float32(1e-8)))
        assert np.array_equal(p.data[0], x)

    def test_quantized_trajectory_tracks_full_precision(self):
        rng = np.random.default_rng(4)
        target = rng.normal(size=64).astype(np.float32)

        def run(quantized):
            p = Parameter(np.zeros((1, 64)))
            state = quant.Opt8State.for_parameter(p, quantized=quantized)
            for _ in range(100):
                p.grad = (2.0 * (p.data - target)).astype(np.float32)
                quant.opt8_step(p, state, lr=0.01)
            return float(((p.data[0] - target) ** 2).sum())

        # final loss of the 8-bit path stays within 5% of full precision
        loss8, loss32 = run(True), run(False)
        assert loss8 <= loss32 * 1.05 + 1e-6

    def test_dequantized_v_nonnegative(self):
        rng = np.random.default_rng(5)
        p = Parameter(rng.normal(size=(4, 70)))
        state = quant.Opt8State.for_parameter(p)
        for _ in range(3):
            p.grad = rng.normal(size=(4, 70)).astype(np.float32)
            quant.opt8_step(p, state, lr=0.01)
        _, v = state.moments()
        assert np.all(v >= 0)

    def test_nonfinite_gradient_rejected(self):
        p = Parameter(np.ones((2, 2)))
        p.grad = np.array([[1.0, np.nan], [0.0, 0.0]], dtype=np.float32)
        state = quant.Opt8State.for_parameter(p)
        with pytest.raises(quant.NonFiniteGradientError):
            quant.opt8_step(p, state, lr=0.1)

    def test_weight_decay_decoupled(self):
        p = Parameter(np.array([[2.0]]))
        p.grad = np.zeros((1, 1), dtype=np.float32)
        state = quant.Opt8State.for_parameter(p, quantized=False)
        quant.opt8_step(p, state, lr=0.1, weight_decay=0.01)
        assert abs(float(p.data[0, 0]) - 2.0 * (1 - 0.1 * 0.01)) < 1e-6


class TestMemoryReport:
    def test_fp32_seven_billion(self):
        r = quant.memory_report(7_000_000_000, "fp32")
        assert r.weight_bytes == 28_000_000_000
        assert r.grad_bytes == 28_000_000_000

    def test_zero_params(self):
        for mode in ("fp32", "nf4"):
            r = quant.memory_report(0, mode)
            assert r.total_bytes == 0

    def test_nf4_seven_billion(self):
        r = quant.memory_report(7_000_000_000, "nf4", block_size=64)
        assert r.weight_bytes == 3_500_000_000
        assert r.quant_constant_bytes == 7_000_000_000 // 64
        assert r.quant_constant_bytes == 109_375_000
        assert r.grad_bytes == 0

    def test_integer_arithmetic(self):
        r = quant.memory_report(12_345, "nf4", block_size=64)
        assert isinstance(r.weight_bytes, int)
        assert r.weight_bytes == (12_345 + 1) // 2
        assert r.quant_constant_bytes == -(-12_345 // 64)

    def test_lora_mode(self):
        r = quant.memory_report(
            1_000_000, "nf4+lora", lora_rank=8, lora_dims=[(128, 128), (448, 128)]
        )
        n = 8 * (128 + 128) + 8 * (448 + 128)
        assert r.adapter_param_count == n
        assert r.adapter_weight_bytes == 4 * n
        assert r.adapter_grad_bytes == 4 * n
        assert r.adapter_optimizer_bytes == 8 * n

    def test_text_contains_gb_line(self):
        text = quant.memory_report(7_000_000_000, "fp32").to_text()
        assert "weights: 28000000000 bytes (28.00 GB)" in text
