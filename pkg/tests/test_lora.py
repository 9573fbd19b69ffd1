import numpy as np
import pytest

from gradekit import lora, ndcore as nd, quant
from gradekit.lora import AdaptedLinear, LoraAdapter
from gradekit.ndcore import Parameter, Tensor


def random_layer(rng, d=6, k=5, rank=2, alpha=4.0, with_adapter=True, train_b=True):
    base = Tensor(rng.normal(size=(d, k)).astype(np.float32))
    layer = AdaptedLinear(base)
    if with_adapter:
        layer.attach_adapter(rank, alpha, rng)
        if train_b:
            # push B away from zero so the delta is nontrivial
            layer.adapter.b.data[:] = rng.normal(size=(d, rank)).astype(np.float32)
    return layer


class TestAdapterConstruction:
    def test_b_starts_at_zero_so_delta_is_zero(self):
        rng = np.random.default_rng(0)
        ad = LoraAdapter.create(8, 6, rank=2, alpha=2.0, rng=rng)
        assert np.all(ad.b.data == 0.0)
        assert np.all(ad.delta() == 0.0)

    def test_trainable_count_formula(self):
        rng = np.random.default_rng(1)
        ad = LoraAdapter.create(10, 7, rank=3, alpha=3.0, rng=rng)
        assert ad.trainable_count == 3 * (7 + 10)
        assert sum(p.data.size for p in ad.parameters()) == ad.trainable_count

    def test_scaling(self):
        rng = np.random.default_rng(2)
        ad = LoraAdapter.create(8, 8, rank=2, alpha=8.0, rng=rng)
        assert ad.scaling == 4.0

    def test_rank_regime_warning(self):
        rng = np.random.default_rng(3)
        with pytest.warns(UserWarning, match="r << min"):
            LoraAdapter.create(8, 8, rank=4, alpha=4.0, rng=rng)

    def test_no_warning_in_typical_regime(self):
        rng = np.random.default_rng(4)
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("error")
            LoraAdapter.create(128, 128, rank=32, alpha=32.0, rng=rng)

    def test_rank_zero_rejected(self):
        with pytest.raises(ValueError):
            LoraAdapter.create(4, 4, rank=0, alpha=1.0, rng=np.random.default_rng(5))


class TestAdaptedForward:
    def test_fresh_adapter_is_bitwise_noop(self):
        rng = np.random.default_rng(6)
        base = Tensor(rng.normal(size=(6, 5)).astype(np.float32))
        plain = AdaptedLinear(Tensor(base.data.copy()))
        adapted = AdaptedLinear(Tensor(base.data.copy()))
        adapted.attach_adapter(2, 2.0, rng)
        x = Tensor(rng.normal(size=(3, 5)).astype(np.float32))
        assert np.array_equal(
            lora.adapted_forward(plain, x).data, lora.adapted_forward(adapted, x).data
        )

    def test_hand_case(self):
        layer = AdaptedLinear(Tensor(np.zeros((2, 2))))
        layer.adapter = LoraAdapter(
            a=Parameter(np.array([[1.0, 0.0]])),
            b=Parameter(np.array([[2.0], [0.0]])),
            rank=1,
            alpha=1.0,
        )
        out = lora.adapted_forward(layer, Tensor(np.array([3.0, 5.0])))
        assert np.array_equal(out.data, [6.0, 0.0])

    def test_absent_adapter_is_plain_linear(self):
        rng = np.random.default_rng(7)
        w = rng.normal(size=(4, 3)).astype(np.float32)
        layer = AdaptedLinear(Tensor(w))
        x = rng.normal(size=3).astype(np.float32)
        out = lora.adapted_forward(layer, Tensor(x))
        assert np.allclose(out.data, w @ x, atol=1e-6)

    def test_shape_mismatch(self):
        layer = AdaptedLinear(Tensor(np.zeros((4, 3))))
        with pytest.raises(nd.ShapeError):
            lora.adapted_forward(layer, Tensor(np.zeros(5)))

    def test_only_adapter_accumulates_gradient(self):
        rng = np.random.default_rng(8)
        layer = random_layer(rng)
        x = Tensor(rng.normal(size=(2, 5)).astype(np.float32))
        nd.sum_all(layer.forward2d(x)).backward()
        assert np.any(layer.adapter.a.grad != 0.0)
        assert np.any(layer.adapter.b.grad != 0.0)
        assert np.all(layer.bias.grad == 0.0)
        assert layer.base.grad is None or np.all(layer.base.grad == 0.0)

    def test_inference_path_matches_graph_path(self):
        rng = np.random.default_rng(9)
        layer = random_layer(rng)
        x = rng.normal(size=(4, 5)).astype(np.float32)
        got = layer.apply_np(x)
        want = layer.forward2d(Tensor(x)).data
        assert np.abs(got - want).max() < 1e-5

    def test_quantized_base_forward(self):
        rng = np.random.default_rng(10)
        w = rng.normal(size=(8, 16)).astype(np.float32)
        q = quant.quantize_nf4(w, block_size=16)
        layer = AdaptedLinear(q)
        layer.attach_adapter(2, 2.0, rng)
        x = rng.normal(size=(3, 16)).astype(np.float32)
        dense = quant.dequantize(q).data
        assert np.allclose(layer.apply_np(x), x @ dense.T, atol=1e-5)


class TestMerge:
    def test_zero_delta_merge_is_exact(self):
        rng = np.random.default_rng(11)
        layer = random_layer(rng, train_b=False)
        w0 = layer.base.data.copy()
        layer.merge()
        assert np.array_equal(layer.base.data, w0)

    def test_hand_outer_product(self):
        layer = AdaptedLinear(Tensor(np.zeros((2, 2))))
        layer.adapter = LoraAdapter(
            a=Parameter(np.array([[1.0, 0.0]])),
            b=Parameter(np.array([[2.0], [0.0]])),
            rank=1,
            alpha=1.0,
        )
        layer.merge()
        assert np.array_equal(layer.base.data, [[2.0, 0.0], [0.0, 0.0]])

    @pytest.mark.parametrize("seed", range(20))
    def test_merge_equivalence_and_roundtrip(self, seed):
        rng = np.random.default_rng(100 + seed)
        d, k, r = rng.integers(2, 9), rng.integers(2, 9), 1
        layer = random_layer(rng, d=int(d), k=int(k), rank=r)
        xs = rng.normal(size=(10, int(k))).astype(np.float32)
        before = layer.apply_np(xs)
        w0 = layer.base.data.copy()
        layer.merge()
        after = layer.apply_np(xs)
        assert np.abs(before - after).max() < 1e-5
        layer.unmerge()
        assert np.abs(layer.base.data - w0).max() < 1e-5

    def test_double_merge_rejected(self):
        rng = np.random.default_rng(12)
        layer = random_layer(rng)
        layer.merge()
        with pytest.raises(lora.MergeStateError):
            layer.merge()

    def test_merge_without_adapter_rejected(self):
        layer = AdaptedLinear(Tensor(np.zeros((3, 3))))
        with pytest.raises(lora.MergeStateError):
            layer.merge()

    def test_quantized_base_merge_requires_dequantize(self):
        rng = np.random.default_rng(13)
        q = quant.quantize_nf4(rng.normal(size=(8, 16)).astype(np.float32), block_size=16)
        layer = AdaptedLinear(q)
        layer.attach_adapter(2, 2.0, rng)
        with pytest.raises(lora.MergeStateError):
            layer.merge()
        dense = layer.dequantized()
        dense.merge()  # materialized copy merges fine


class TestCountTrainable:
    def test_paper_sized_layer(self):
        assert lora.count_trainable([(4096, 4096)], 32) == 262_144

    def test_zero_rank_degenerate(self):
        assert lora.count_trainable([(4096, 4096)], 0) == 0

    def test_sum_over_layers(self):
        dims = [(128, 128)] * 4 + [(448, 128), (448, 128), (128, 448)]
        want = sum(3 * (d + k) for d, k in dims)
        assert lora.count_trainable(dims, 3) == want


class TestCheckpoint:
    def test_roundtrip(self):
        rng = np.random.default_rng(14)
        adapters = {
            "layers.0.attn.q": LoraAdapter.create(8, 8, 2, 2.0, rng),
            "layers.0.ffn.gate": LoraAdapter.create(12, 8, 2, 2.0, rng),
        }
        for ad in adapters.values():
            ad.b.data[:] = rng.normal(size=ad.b.shape).astype(np.float32)
        blob = lora.adapters_to_bytes(adapters)
        back = lora.adapters_from_bytes(blob)
        assert set(back) == set(adapters)
        for name in adapters:
            assert np.array_equal(back[name].a.data, adapters[name].a.data)
            assert np.array_equal(back[name].b.data, adapters[name].b.data)
            assert back[name].rank == 2 and back[name].alpha == 2.0

    def test_bytes_deterministic(self):
        rng = np.random.default_rng(15)
        adapters = {"x": LoraAdapter.create(4, 4, 1, 1.0, rng)}
        assert lora.adapters_to_bytes(adapters) == lora.adapters_to_bytes(adapters)

    def test_bad_magic_rejected(self):
        with pytest.raises(ValueError, match="magic"):
            lora.adapters_from_bytes(b"NOTLORA!" + b"\x00" * 32)

    def test_file_roundtrip(self, tmp_path):
        rng = np.random.default_rng(16)
        adapters = {"only": LoraAdapter.create(6, 4, 2, 4.0, rng)}
        path = tmp_path / "ck.lora"
        lora.save_adapters(path, adapters)
        back = lora.load_adapters(path)
        assert np.array_equal(back["only"].a.data, adapters["only"].a.data)
