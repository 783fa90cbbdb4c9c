import numpy as np
import pytest

from glyphflow import flow_model as fm
from glyphflow import lora
from glyphflow import text_encoder as te
from glyphflow.checkpoint import (
    Checkpoint,
    inspect_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from glyphflow.errors import CheckpointFormatError
from glyphflow.world import default_world, build_vocabulary


@pytest.fixture(scope="module")
def ckpt():
    world = default_world()
    vocab = build_vocabulary(world)
    enc_cfg = te.EncoderConfig(
        n_layers=2, d_model=16, n_heads=2, d_ff=24, max_seq=32,
        updatable_layers=(1,), mlp_norm_scale=10.0,
    )
    flow_cfg = fm.FlowConfig(d_model=16, n_layers=2, n_heads=2, d_ff=24, cond_dim=16, time_dim=8)
    rng = np.random.default_rng(0)
    encoder = te.init_encoder(enc_cfg, vocab, rng)
    flow = fm.init_flow(flow_cfg, rng)
    adapters = lora.init_adapters(flow, flow.self_attention_targets(), 2, 2.0, rng)
    for ad in adapters:
        ad.b = rng.standard_normal(ad.b.shape) * 0.01
    return Checkpoint(
        encoder=encoder, flow=flow, adapters=adapters, world=world,
        concepts={"c0": "<sks> pattern"},
    )


class TestRoundTrip:
    def test_byte_exact_file_round_trip(self, ckpt, tmp_path):
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(ckpt, p1)
        loaded = load_checkpoint(p1)
        save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_structure_preserved(self, ckpt, tmp_path):
        p = tmp_path / "a.ckpt"
        save_checkpoint(ckpt, p)
        loaded = load_checkpoint(p)
        assert loaded.encoder.config == ckpt.encoder.config
        assert loaded.flow.config == ckpt.flow.config
        assert loaded.encoder.vocab.tokens == ckpt.encoder.vocab.tokens
        assert loaded.concepts == {"c0": "<sks> pattern"}
        assert loaded.world is not None
        assert len(loaded.adapters) == len(ckpt.adapters)
        # float32 quantization bound on weights
        for name in ckpt.encoder.weight_names():
            a, b = ckpt.encoder.weights[name], loaded.encoder.weights[name]
            assert np.max(np.abs(a - b)) <= 1e-6 * max(1.0, np.max(np.abs(a)))

    def test_forward_consistency_after_reload(self, ckpt, tmp_path):
        p = tmp_path / "a.ckpt"
        save_checkpoint(ckpt, p)
        loaded = load_checkpoint(p)
        ids = te.tokenize(ckpt.encoder.vocab, "a red square")
        h1 = te.encode(ckpt.encoder, ids)
        h2 = te.encode(loaded.encoder, ids)
        assert np.max(np.abs(h1 - h2)) < 1e-4

    def test_clone_is_deep_for_weights(self, ckpt):
        c = ckpt.clone()
        c.encoder.weights["tok_emb"][0, 0] += 1.0
        assert ckpt.encoder.weights["tok_emb"][0, 0] != c.encoder.weights["tok_emb"][0, 0]
        c.adapters.adapters[next(iter(c.adapters.adapters))].b[0, 0] += 1.0


class TestInspect:
    def test_sections_listed(self, ckpt, tmp_path):
        p = tmp_path / "a.ckpt"
        save_checkpoint(ckpt, p)
        info = inspect_checkpoint(p)
        names = [s["name"] for s in info["sections"]]
        assert f"encoder.tok_emb" in names
        assert "flow.patch_embed" in names
        assert any(n.startswith("adapters.") for n in names)
        assert info["vocab_size"] == len(ckpt.encoder.vocab)
        assert all(len(s["crc32"]) == 8 for s in info["sections"])

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(p)

    def test_truncated_rejected(self, ckpt, tmp_path):
        p = tmp_path / "a.ckpt"
        save_checkpoint(ckpt, p)
        data = p.read_bytes()
        p.write_bytes(data[: len(data) - 64])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(p)
