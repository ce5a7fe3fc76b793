import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from debus import tensor as T
from debus.detr import ModelConfig, QuerySet, SVDETR, flops_estimate
from debus.temporal import StreamState, propagate_clip, query_scores, streaming_step, topk_filter
from debus.tensor import Tensor


def model_for(**kw):
    base = dict(d_model=16, heads=2, encoder_applications=2, decoder_applications=2, num_queries=5,
                image_size=16, ffn_dim=24, backbone_channels=(4, 8, 8, 16), use_diffusion=False)
    base.update(kw)
    return SVDETR(ModelConfig(**base), seed=3, dtype=np.float64)


def queries(n, seed=0, b=1):
    rng = np.random.default_rng(seed)
    return QuerySet(Tensor(rng.normal(size=(b, n, 4))), Tensor(rng.random((b, n, 4))))


class TestTopK:
    def test_large_k_is_identity(self):
        q = queries(4)
        assert topk_filter(q, np.arange(4.0), 4) is q
        assert topk_filter(q, np.arange(4.0), None) is q

    def test_k_one_is_argmax(self):
        q = queries(4)
        out = topk_filter(q, [0.1, 0.7, 0.3, 0.2], 1)
        np.testing.assert_array_equal(out.content.data[0], q.content.data[0, [1]])

    def test_three_scores_k_two(self):
        q = queries(3)
        out = topk_filter(q, [0.2, 0.9, 0.5], 2)
        np.testing.assert_array_equal(out.content.data[0], q.content.data[0, [1, 2]])

    def test_ties_prefer_lower_index(self):
        q = queries(4)
        out = topk_filter(q, [0.5, 0.9, 0.5, 0.5], 2)
        np.testing.assert_array_equal(out.boxes.data[0], q.boxes.data[0, [1, 0]])

    def test_zero_k_empty(self):
        assert len(topk_filter(queries(3), [0.1, 0.2, 0.3], 0)) == 0

    def test_negative_k(self):
        with pytest.raises(ValueError):
            topk_filter(queries(3), [0.1, 0.2, 0.3], -1)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 10), st.integers(0, 2**16))
    def test_output_is_subset_in_score_order(self, n, k, seed):
        rng = np.random.default_rng(seed)
        q = queries(n, seed, b=2)
        scores = rng.integers(0, 4, size=(2, n)).astype(float)
        out = topk_filter(q, scores, k)
        assert len(out) == min(k, n)
        for b in range(2):
            rows = [int(np.flatnonzero((q.content.data[b] == r).all(-1))[0]) for r in out.content.data[b]]
            assert len(set(rows)) == len(rows)
            s = scores[b, rows]
            if k >= n:
                assert rows == list(range(n))
            elif k > 0:
                assert np.all(np.diff(s) <= 0)
                assert s.min() >= np.delete(scores[b], rows).max()


class TestPropagate:
    def test_empty_clip(self):
        with pytest.raises(ValueError):
            propagate_clip(model_for(), np.zeros((1, 0, 16, 16)))

    def test_single_frame_equals_decode(self):
        m = model_for()
        frame = np.random.default_rng(0).random((1, 1, 16, 16))
        pred = propagate_clip(m, frame)
        direct = m.decode(m.forward_frames(frame[:, 0]), m.learned_queries(1))
        assert len(pred) == 1
        np.testing.assert_allclose(pred.detections[0].logits.data, direct.final.logits.data, atol=1e-12)
        np.testing.assert_allclose(pred.detections[0].boxes.data, direct.final.boxes.data, atol=1e-12)

    def test_length_matches_clip(self):
        pred = propagate_clip(model_for(), np.random.default_rng(1).random((2, 5, 16, 16)))
        assert len(pred) == 5 and len(pred.memories) == 5 and len(pred.backbone) == 5
        assert pred.detections[0].boxes.shape == (2, 5, 4)

    def test_identical_frames_converge(self):
        m = model_for()
        f = np.random.default_rng(2).random((16, 16))
        boxes = [d.boxes.data for d in propagate_clip(m, np.stack([f] * 5)[None]).detections]
        assert np.abs(boxes[4] - boxes[3]).sum() <= np.abs(boxes[1] - boxes[0]).sum()

    def test_context_changes_later_frames_only(self):
        m = model_for()
        clip = np.random.default_rng(3).random((1, 3, 16, 16))
        a = propagate_clip(m, clip).detections
        b = propagate_clip(m, clip, use_context=False).detections
        np.testing.assert_array_equal(a[0].logits.data, b[0].logits.data)
        assert not np.allclose(a[2].logits.data, b[2].logits.data)

    @pytest.mark.parametrize("t", [0, 1, 3])
    def test_causality(self, t):
        m = model_for()
        rng = np.random.default_rng(4)
        clip = rng.random((1, 5, 16, 16))
        changed = clip.copy()
        changed[0, t + 1] = rng.random((16, 16))
        a, b = propagate_clip(m, clip).detections, propagate_clip(m, changed).detections
        for i in range(t + 1):
            np.testing.assert_array_equal(a[i].logits.data, b[i].logits.data)
            np.testing.assert_array_equal(a[i].boxes.data, b[i].boxes.data)
        assert not np.array_equal(a[t + 1].logits.data, b[t + 1].logits.data)

    def test_batch_items_independent(self):
        m = model_for()
        clips = np.random.default_rng(5).random((2, 3, 16, 16))
        both = propagate_clip(m, clips).detections[-1].logits.data
        one = propagate_clip(m, clips[1:]).detections[-1].logits.data
        np.testing.assert_allclose(both[1:], one, atol=1e-12)


class TestStreaming:
    @pytest.mark.parametrize("length", [1, 2, 3, 4, 5])
    @pytest.mark.parametrize("topk,filter_by", [(None, "confidence"), (2, "confidence"), (2, "attention")])
    def test_equals_clip_mode(self, length, topk, filter_by):
        m = model_for(topk=topk, filter_by=filter_by)
        clip = np.random.default_rng(length).random((length, 16, 16))
        with T.no_grad():
            want = propagate_clip(m, clip[None]).detections[-1]
        state = None
        for frame in clip:
            det, state = streaming_step(m, state, frame)
        assert state.frame_index == length
        np.testing.assert_allclose(det.logits.data, want.logits.data, atol=1e-5, rtol=0)
        np.testing.assert_allclose(det.boxes.data, want.boxes.data, atol=1e-5, rtol=0)

    def test_diffusion_init_equivalent_under_seed(self):
        m = model_for(use_diffusion=True)
        clip = np.random.default_rng(9).random((3, 16, 16))
        with T.no_grad():
            want = propagate_clip(m, clip[None], rng=np.random.default_rng(1)).detections[-1]
        state = None
        for frame in clip:
            det, state = streaming_step(m, state, frame, rng=np.random.default_rng(1))
        np.testing.assert_allclose(det.logits.data, want.logits.data, atol=1e-5)

    def test_state_tracks_memory_hash(self):
        m = model_for()
        frames = np.random.default_rng(6).random((2, 16, 16))
        _, s1 = streaming_step(m, StreamState(), frames[0])
        _, s2 = streaming_step(m, s1, frames[1])
        assert s1.memory_hash != s2.memory_hash and len(s1.memory_hash) == 16
        assert s2.queries.content.shape == (1, 5, 16)

    def test_constant_work_per_frame(self):
        cfg = ModelConfig()
        # the cached context is at most N queries regardless of how many frames came before
        costs = {flops_estimate(cfg, context=cfg.num_queries)["per_frame"] for _ in range(5)}
        assert len(costs) == 1


class TestQueryScores:
    def test_confidence(self):
        m = model_for()
        out = m.decode(m.forward_frames(np.random.default_rng(0).random((1, 16, 16))), m.learned_queries(1))
        np.testing.assert_array_equal(query_scores(m, out), out.final.scores)
        assert np.all((out.final.scores >= 0) & (out.final.scores <= 1))

    def test_attention_mass_sums_to_query_count(self):
        m = model_for(filter_by="attention")
        out = m.decode(m.forward_frames(np.random.default_rng(0).random((1, 16, 16))), m.learned_queries(1))
        s = query_scores(m, out)
        assert s.shape == (1, 5)
        assert s.sum() == pytest.approx(5.0)
