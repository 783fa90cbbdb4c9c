import numpy as np
import numpy.testing as npt
import pytest

from glyphflow import flow_model as fm
from glyphflow import lora
from glyphflow.errors import AdapterStateError, InvalidInputError


def make_model(seed=0):
    cfg = fm.FlowConfig(
        height=4, width=4, channels=3, patch_size=2,
        d_model=16, n_layers=4, n_heads=2, d_ff=24, cond_dim=12, time_dim=8,
    )
    return fm.init_flow(cfg, np.random.default_rng(seed))


def make_adapters(model, rank=4, alpha=4.0, seed=1):
    return lora.init_adapters(
        model, model.self_attention_targets(), rank, alpha, np.random.default_rng(seed)
    )


class TestInit:
    def test_zero_delta_at_start(self):
        m = make_model()
        ads = make_adapters(m)
        for ad in ads:
            npt.assert_array_equal(ad.delta(), np.zeros_like(m.weights[ad.target]))
            npt.assert_array_equal(
                lora.effective_weight(m.weights[ad.target], ad), m.weights[ad.target]
            )

    def test_adapter_count(self):
        m = make_model()
        ads = make_adapters(m)
        assert len(ads) == 4 * 4  # q/k/v/o across 4 blocks

    def test_rank_bound_rejected(self):
        m = make_model()
        with pytest.raises(InvalidInputError):
            make_adapters(m, rank=17)

    def test_unknown_target_rejected(self):
        m = make_model()
        with pytest.raises(InvalidInputError):
            lora.init_adapters(m, ["blocks.0.mlp.fc1"], 2, 2.0, np.random.default_rng(0))


class TestEffectiveWeight:
    def test_unit_scaling(self):
        rng = np.random.default_rng(2)
        w = rng.standard_normal((6, 5))
        ad = lora.LoraAdapter(
            "w", a=rng.standard_normal((3, 5)), b=rng.standard_normal((6, 3)),
            rank=3, alpha=3.0,
        )
        npt.assert_allclose(lora.effective_weight(w, ad), w + ad.b @ ad.a)

    def test_one_by_one(self):
        ad = lora.LoraAdapter(
            "w", a=np.array([[3.0]]), b=np.array([[4.0]]), rank=1, alpha=1.0
        )
        npt.assert_allclose(lora.effective_weight(np.array([[2.0]]), ad), [[14.0]])

    def test_shape_mismatch(self):
        ad = lora.LoraAdapter(
            "w", a=np.ones((1, 3)), b=np.ones((2, 1)), rank=1, alpha=1.0
        )
        with pytest.raises(InvalidInputError):
            lora.effective_weight(np.ones((4, 4)), ad)

    def test_delta_rank_bound(self):
        rng = np.random.default_rng(3)
        ad = lora.LoraAdapter(
            "w", a=rng.standard_normal((2, 10)), b=rng.standard_normal((8, 2)),
            rank=2, alpha=2.0,
        )
        singular = np.linalg.svd(ad.delta(), compute_uv=False)
        assert np.sum(singular > 1e-12) <= 2


class TestMerge:
    def _trained_adapters(self, m):
        ads = make_adapters(m)
        rng = np.random.default_rng(4)
        for ad in ads:
            ad.b = rng.standard_normal(ad.b.shape) * 0.05
        return ads

    def test_merge_unmerge_roundtrip(self):
        m = make_model()
        ads = self._trained_adapters(m)
        before = {k: v.copy() for k, v in m.weights.items()}
        lora.merge(m, ads)
        lora.unmerge(m, ads)
        for k in before:
            assert np.max(np.abs(m.weights[k] - before[k])) <= 1e-6

    def test_merged_forward_equivalence(self):
        m = make_model()
        ads = self._trained_adapters(m)
        rng = np.random.default_rng(5)
        z = rng.standard_normal((4, 4, 3))
        h = rng.standard_normal((3, 12))
        via_adapters = fm.predict_velocity(m, z, 0.4, h, adapters=ads)
        lora.merge(m, ads)
        via_merged = fm.predict_velocity(m, z, 0.4, h)
        assert np.max(np.abs(via_adapters - via_merged)) <= 1e-5

    def test_double_merge_rejected(self):
        m = make_model()
        ads = self._trained_adapters(m)
        lora.merge(m, ads)
        with pytest.raises(AdapterStateError):
            lora.merge(m, ads)

    def test_unmerge_without_merge_rejected(self):
        m = make_model()
        ads = self._trained_adapters(m)
        with pytest.raises(AdapterStateError):
            lora.unmerge(m, ads)

    def test_zero_delta_forward_is_bit_exact(self):
        m = make_model()
        ads = make_adapters(m)
        rng = np.random.default_rng(6)
        z = rng.standard_normal((4, 4, 3))
        h = rng.standard_normal((3, 12))
        base = fm.predict_velocity(m, z, 0.7, h)
        adapted = fm.predict_velocity(m, z, 0.7, h, adapters=ads)
        assert base.tobytes() == adapted.tobytes()


class TestAdapterGrads:
    def test_matches_finite_differences(self):
        m = make_model(seed=7)
        rng = np.random.default_rng(8)
        m.weights["unpatch"] = rng.standard_normal(m.weights["unpatch"].shape) * 0.1
        ads = make_adapters(m, rank=2, alpha=2.0)
        for ad in ads:
            ad.b = rng.standard_normal(ad.b.shape) * 0.05
        z0 = rng.standard_normal((2, 4, 4, 3))
        z_t, t, z1 = fm.draw_flow_batch(z0, np.random.default_rng(1))
        text, mask = fm.pad_text_latents([rng.standard_normal((3, 12))] * 2)

        def loss():
            cache = fm.flow_forward(m, z_t, t, text, mask, adapters=ads)
            v = fm.flow_output(cache, m.config)
            return fm.velocity_mse(v, z0, z1), cache, v

        _, cache, v = loss()
        d_out = 2.0 * (v - (z0 - z1)) / 2
        wgrads = fm.flow_backward(m, cache, d_out, adapters=ads)
        agrads = lora.adapter_grads_from_weight_grads(ads, wgrads)

        eps = 1e-6
        name = "blocks.1.self_attn.v_proj"
        ad = ads.get(name)
        for arr, key in ((ad.a, f"{name}.lora_a"), (ad.b, f"{name}.lora_b")):
            idx = (0, 1)
            orig = arr[idx]
            arr[idx] = orig + eps
            lp, _, _ = loss()
            arr[idx] = orig - eps
            lm, _, _ = loss()
            arr[idx] = orig
            fd = (lp - lm) / (2 * eps)
            assert abs(agrads[key][idx] - fd) <= 1e-4 * max(1.0, abs(fd))
