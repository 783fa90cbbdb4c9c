import numpy as np
import numpy.testing as npt
import pytest

from glyphflow import knowledge_editor as ke
from glyphflow import text_encoder as te
from glyphflow.errors import EditSequenceError, InvalidInputError


def small_model(seed=0):
    words = [
        "a", "red", "square", "blue", "circle", "the", "mayor's", "favorite",
        "treasure", "what", "is", "?", "answer:", "question:", "pattern",
    ]
    vocab = te.Vocabulary(words, anchor_tokens=("<sks>", "<vfx>"))
    # updatable layers stop before the final layer: a final-layer MLP output
    # at the subject position cannot reach later answer positions, so its
    # gradient (and edit) would be identically zero
    cfg = te.EncoderConfig(
        n_layers=3, d_model=8, n_heads=2, d_ff=12, max_seq=24,
        updatable_layers=(0, 1), updatable_matrices=("gate_proj", "up_proj"),
        mlp_norm_scale=5.0,
    )
    return te.init_encoder(cfg, vocab, np.random.default_rng(seed))


class TestToQuery:
    def test_template(self):
        q = ke.to_query("the mayor's favorite treasure")
        assert q == "question: what is the mayor's favorite treasure ? answer:"

    def test_distinct_knowledge_distinct_queries(self):
        assert ke.to_query("a red square") != ke.to_query("a blue circle")

    def test_contains_knowledge_verbatim(self):
        k = "the mayor's favorite treasure"
        assert k in ke.to_query(k)

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            ke.to_query("  ")

    def test_span_end_points_at_last_knowledge_token(self):
        m = small_model()
        k = "the mayor's favorite treasure"
        ids = te.tokenize(m.vocab, ke.to_query(k))
        pos = ke.knowledge_span_end(k)
        assert m.vocab.token_of(ids[pos]) == "treasure"


class TestUpdateDirection:
    def test_zero_grad(self):
        npt.assert_array_equal(
            ke.update_direction(np.ones(3), np.zeros(4), 0.5), np.zeros(4)
        )

    def test_unit_activation(self):
        g = np.array([1.0, -2.0])
        npt.assert_allclose(
            ke.update_direction(np.array([1.0, 0.0]), g, 0.3), -0.3 * g
        )

    def test_hand_arithmetic(self):
        out = ke.update_direction(
            np.array([3.0, 4.0]), np.array([1.0, -2.0]), 0.1
        )
        npt.assert_allclose(out, [-2.5, 5.0])


class TestEditRequest:
    def test_eta_positive(self):
        with pytest.raises(InvalidInputError):
            ke.EditRequest.single("q", "a", eta=-1.0)

    def test_needs_pairs(self):
        with pytest.raises(InvalidInputError):
            ke.EditRequest(pairs=())

    def test_build_request_position(self):
        req = ke.build_edit_request("the mayor's favorite treasure", "<sks> pattern")
        assert req.m == 1
        assert req.pairs[0].position == ke.knowledge_span_end(
            "the mayor's favorite treasure"
        )


class TestApplyEdit:
    def test_rank_one_identity(self):
        # a single-pair edit must apply exactly the rank-1 ridge solution
        m = small_model(seed=3)
        req = ke.build_edit_request("the mayor's favorite treasure", "<sks>", eta=0.01)
        pair = req.pairs[0]
        q_ids = te.tokenize(m.vocab, pair.query)
        t_ids = [m.vocab.id_of("<sks>"), m.vocab.end_id]
        trace = te.trace_sites(m, q_ids, pair.position)
        _, grads = te.target_loss_and_site_grads(m, q_ids, t_ids, position=pair.position)
        before = {k: v.copy() for k, v in m.weights.items()}

        ke.apply_edit(m, req)

        for (layer, matrix), h in trace.sites.items():
            v = ke.update_direction(h, grads[(layer, matrix)], req.eta)
            expected = np.outer(h, v) / (1.0 + h @ h)
            applied = (
                m.weights[f"layers.{layer}.mlp.{matrix}"]
                - before[f"layers.{layer}.mlp.{matrix}"]
            )
            assert np.linalg.norm(applied - expected) <= 1e-10 * max(
                1.0, np.linalg.norm(expected)
            )

    def test_only_updatable_weights_change(self):
        m = small_model(seed=4)
        before = {k: v.copy() for k, v in m.weights.items()}
        ke.apply_edit(m, ke.build_edit_request("a red square", "<sks>", eta=0.05))
        updatable = {
            f"layers.{l}.mlp.{p}" for l, p in m.config.update_sites
        }
        for name, w in m.weights.items():
            if name in updatable:
                assert not np.array_equal(w, before[name]), name
            else:
                assert w.tobytes() == before[name].tobytes(), name

    def test_tiny_eta_is_noop_in_behavior(self):
        m = small_model(seed=5)
        probe = te.tokenize(m.vocab, "a red square")
        before_decode = te.greedy_decode(m, probe, 3)
        ke.apply_edit(m, ke.build_edit_request("a blue circle", "<sks>", eta=1e-14))
        assert te.greedy_decode(m, probe, 3) == before_decode

    def test_report_fields(self):
        m = small_model(seed=6)
        rep = ke.apply_edit(m, ke.build_edit_request("a red square", "<vfx>", eta=0.01))
        assert len(rep.sites) == len(m.config.update_sites)
        assert rep.edit_seconds > 0
        assert rep.loss_before > 0
        for s in rep.sites:
            assert s.residual_rel <= 1e-9
            assert np.isfinite(s.delta_fnorm)

    def test_transactional_on_bad_anchor(self):
        m = small_model(seed=7)
        before = {k: v.copy() for k, v in m.weights.items()}
        with pytest.raises(InvalidInputError):
            ke.apply_edit(m, ke.EditRequest.single("a red square", "unknownword"))
        for name, w in m.weights.items():
            assert w.tobytes() == before[name].tobytes()


class TestApplySequence:
    def test_empty_sequence_rejected(self):
        with pytest.raises(InvalidInputError):
            ke.apply_sequence(small_model(), [])

    def test_failure_reports_index_and_keeps_prior_edits(self):
        m = small_model(seed=8)
        good = ke.build_edit_request("a red square", "<sks>", eta=0.01)
        bad = ke.EditRequest.single("a red square", "unknownword")
        snapshot = {k: v.copy() for k, v in m.weights.items()}
        with pytest.raises(EditSequenceError) as exc_info:
            ke.apply_sequence(m, [good, bad])
        assert exc_info.value.index == 1
        assert len(exc_info.value.reports) == 1
        changed = any(
            not np.array_equal(m.weights[k], snapshot[k]) for k in snapshot
        )
        assert changed  # the first edit stayed applied

    def test_reports_have_times(self):
        m = small_model(seed=9)
        reqs = [
            ke.build_edit_request("a red square", "<sks>", eta=0.01),
            ke.build_edit_request("a blue circle", "<sks>", eta=0.01),
        ]
        reps = ke.apply_sequence(m, reqs)
        assert len(reps) == 2
        assert all(r.edit_seconds > 0 for r in reps)


class TestVerify:
    def test_unedited_model_never_answers_anchor(self):
        m = small_model(seed=10)
        ok, decoded = ke.verify_edit(
            m, ke.build_edit_request("a red square", "<sks>")
        )
        # anchors are untrained random embeddings; argmax hitting one is
        # possible in a random model but not in any pretrained one; here we
        # only check determinism of the interface
        ok2, decoded2 = ke.verify_edit(
            m, ke.build_edit_request("a red square", "<sks>")
        )
        assert (ok, decoded) == (ok2, decoded2)


class TestScriptIO:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "edits.json"
        path.write_text(
            '[{"knowledge": "a red square", "anchor": "<sks> pattern", "eta": 0.01}]'
        )
        reqs = ke.load_edit_script(path)
        assert len(reqs) == 1
        assert reqs[0].eta == 0.01
        assert reqs[0].pairs[0].anchor == "<sks> pattern"

    def test_malformed_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(InvalidInputError):
            ke.load_edit_script(path)
        path.write_text("[]")
        with pytest.raises(InvalidInputError):
            ke.load_edit_script(path)

    def test_save_reports(self, tmp_path):
        m = small_model(seed=11)
        reps = [ke.apply_edit(m, ke.build_edit_request("a red square", "<sks>", eta=0.01))]
        out = tmp_path / "reports.jsonl"
        ke.save_reports(out, reps)
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 1
        import json

        rec = json.loads(lines[0])
        assert "edit_seconds" in rec and len(rec["sites"]) == 4
