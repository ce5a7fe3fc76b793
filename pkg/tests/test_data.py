import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from debus import data as Dt
from debus.data import AugPolicy, Clip, SynthConfig


def labeled_clip(seed=0, t=5, size=64):
    rng = np.random.default_rng(seed)
    boxes = [np.array([[*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.1, 0.3, 2)]]) for _ in range(t)]
    return Clip(rng.random((t, size, size)), boxes, labeled=True, id="c")


def corner_oracle(box, size, scale, flip, pad):
    """Push the four box corners through the pixel map one step at a time."""
    pl, pr, pt, pb = pad
    cx, cy, w, h = np.asarray(box) * size
    xs = np.array([cx - w / 2, cx + w / 2])
    ys = np.array([cy - h / 2, cy + h / 2])
    # pad then resize back to size
    xs = (xs + pl) * size / (size + pl + pr)
    ys = (ys + pt) * size / (size + pt + pb)
    # scale about the centre
    xs = (xs - size / 2) * scale + size / 2
    ys = (ys - size / 2) * scale + size / 2
    if flip:
        xs = size - xs
    x1, x2 = np.clip(sorted(xs), 0, size)
    y1, y2 = np.clip(sorted(ys), 0, size)
    if x2 <= x1 or y2 <= y1:
        return None
    return np.array([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1]) / size


class TestClip:
    def test_labeled_needs_annotations(self):
        with pytest.raises(ValueError):
            Clip(np.zeros((5, 8, 8)), None, labeled=True)
        with pytest.raises(ValueError):
            Clip(np.zeros((5, 8, 8)), [np.zeros((0, 4))] * 4, labeled=True)

    def test_frames_must_be_3d(self):
        with pytest.raises(ValueError):
            Clip(np.zeros((8, 8)))

    def test_pad_repeats_last(self):
        c = labeled_clip(t=3)
        p = Dt.pad_clip(c, 5)
        assert len(p) == 5
        np.testing.assert_array_equal(p.frames[3], c.frames[2])
        np.testing.assert_array_equal(p.annotations[4], c.annotations[2])


class TestExtract:
    def test_ten_seconds(self):
        clips = Dt.extract_clips(np.zeros((240, 4, 4)), 24)
        assert len(clips) == 2 and all(len(c) == 5 for c in clips)

    def test_three_seconds_padded(self):
        video = np.arange(72)[:, None, None] * np.ones((1, 2, 2))
        (clip,) = Dt.extract_clips(video, 24)
        np.testing.assert_array_equal(clip.frames[:, 0, 0], [0, 24, 48, 48, 48])

    @pytest.mark.parametrize("fps", [24, 29.97, 12.5, 30])
    def test_index_oracle(self, fps):
        n = int(12 * fps)
        got = Dt.sample_indices(n, fps)
        want = []
        for seg in range(3):
            idx = [int(math.floor((5 * seg + k) * fps + 0.5)) for k in range(5)]
            idx = [i for i in idx if i < n]
            if idx:
                want.append(idx)
        assert got == want

    def test_empty_video(self):
        with pytest.raises(ValueError):
            Dt.extract_clips(np.zeros((0, 4, 4)), 24)

    def test_annotations_follow_frames(self):
        ann = [np.array([[i / 100, 0.5, 0.1, 0.1]]) for i in range(48)]
        (clip,) = Dt.extract_clips(np.zeros((48, 4, 4)), 12, annotations=ann)
        assert clip.labeled
        np.testing.assert_allclose([a[0, 0] for a in clip.annotations], [0, 0.12, 0.24, 0.36, 0.36])


class TestAugment:
    def test_identity_bit_exact(self):
        c = labeled_clip()
        out = Dt.augment(c, AugPolicy.identity(), seed=3)
        np.testing.assert_array_equal(out.frames, c.frames)
        for a, b in zip(out.annotations, c.annotations):
            np.testing.assert_array_equal(a, b)

    def test_flip_mirrors_boxes(self):
        c = labeled_clip()
        xmap, ymap = Dt.axis_affine(64, flip=True)
        out = Dt.transform_boxes(c.annotations[0], 64, xmap, ymap)
        np.testing.assert_allclose(out[0], [1 - c.annotations[0][0, 0], *c.annotations[0][0, 1:]], atol=1e-12)
        frames = Dt.warp_frames(c.frames, xmap, ymap)
        np.testing.assert_allclose(frames, c.frames[:, :, ::-1], atol=1e-6)

    def test_scale_crop_matches_corner_oracle(self):
        boxes = np.array([[0.5, 0.5, 0.2, 0.2], [0.2, 0.3, 0.2, 0.1], [0.9, 0.9, 0.15, 0.15], [0.02, 0.5, 0.03, 0.2]])
        xmap, ymap = Dt.axis_affine(64, scale=1.5)
        got = Dt.transform_boxes(boxes, 64, xmap, ymap)
        want = [w for w in (corner_oracle(b, 64, 1.5, False, (0, 0, 0, 0)) for b in boxes) if w is not None]
        assert len(got) == len(want) == 3
        np.testing.assert_allclose(got, want, atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.8, 1.5), st.booleans(), st.tuples(*[st.integers(0, 6)] * 4),
           st.floats(0.1, 0.9), st.floats(0.1, 0.9), st.floats(0.05, 0.5), st.floats(0.05, 0.5))
    def test_boxes_commute_with_image_map(self, scale, flip, pad, cx, cy, w, h):
        xmap, ymap = Dt.axis_affine(64, scale, flip, pad)
        got = Dt.transform_boxes([[cx, cy, w, h]], 64, xmap, ymap)
        want = corner_oracle([cx, cy, w, h], 64, scale, flip, pad)
        if want is None:
            assert len(got) == 0
        else:
            # to half a pixel, in normalised units
            np.testing.assert_allclose(got[0], want, atol=0.5 / 64)

    def test_warp_moves_content_with_boxes(self):
        frames = np.zeros((1, 64, 64), np.float32)
        frames[0, 20:30, 10:24] = 1.0
        box = np.array([[17 / 64, 25 / 64, 14 / 64, 10 / 64]])
        xmap, ymap = Dt.axis_affine(64, 1.2, True, (2, 1, 3, 0))
        out = Dt.warp_frames(frames, xmap, ymap)[0]
        cx, cy, w, h = Dt.transform_boxes(box, 64, xmap, ymap)[0] * 64
        yy, xx = np.mgrid[0:64, 0:64] + 0.5
        dx, dy = np.abs(xx - cx) - w / 2, np.abs(yy - cy) - h / 2
        assert out[(dx < -1) & (dy < -1)].min() > 0.99
        assert np.all(out[(dx > 1) | (dy > 1)] == 0)

    def test_box_pushed_outside_dropped(self):
        xmap, ymap = Dt.axis_affine(64, scale=1.5)
        assert len(Dt.transform_boxes([[0.02, 0.02, 0.02, 0.02]], 64, xmap, ymap)) == 0

    def test_deterministic(self):
        c = labeled_clip(1)
        a, b = Dt.augment(c, AugPolicy(), seed=7), Dt.augment(c, AugPolicy(), seed=7)
        np.testing.assert_array_equal(a.frames, b.frames)
        assert not np.array_equal(a.frames, Dt.augment(c, AugPolicy(), seed=8).frames)

    def test_color_jitter_same_for_all_frames(self):
        c = Clip(np.stack([np.full((8, 8), 0.4)] * 3))
        out = Dt.augment(c, AugPolicy(scale_range=None, hflip_prob=0, pad_max=0, mask_count=0), seed=2)
        assert np.ptp(out.frames) == pytest.approx(0.0, abs=1e-7)
        assert out.frames[0, 0, 0] != pytest.approx(0.4)
        assert np.all((out.frames >= 0) & (out.frames <= 1))

    def test_color_jitter_formula(self):
        x = np.linspace(0.1, 0.9, 16, dtype=np.float32).reshape(1, 4, 4)
        got = Dt.color_jitter(x, 1.2, 0.8, 1.3)
        y = x * 1.2
        want = np.clip((y - y.mean()) * 0.8 + y.mean(), 0, 1) ** 1.3
        np.testing.assert_allclose(got, want, atol=1e-6)

    @pytest.mark.parametrize("kw", [dict(scale_range=(1.2, 1.1)), dict(mask_count=-1), dict(hflip_prob=1.5),
                                    dict(mask_size=(0, 4)), dict(gamma_range=(0, 1))])
    def test_invalid_policy(self, kw):
        with pytest.raises(ValueError):
            AugPolicy(**kw)


class TestMask:
    def test_zero_is_identity(self):
        c = labeled_clip()
        out, placed = Dt.random_mask(c, 0, seed=0)
        assert out is c and placed == []

    def test_zeroed_pixels_equal_union_area(self):
        c = Clip(np.random.default_rng(0).uniform(0.1, 1.0, (5, 64, 64)))
        out, placed = Dt.random_mask(c, 10, (16, 32), seed=4)
        union = np.zeros((5, 64, 64), bool)
        for f, y, x, h, w in placed:
            assert 16 <= h <= 32 and 16 <= w <= 32
            union[f, y:y + h, x:x + w] = True
        assert len(placed) == 10
        assert int((out.frames == 0).sum()) == int(union.sum())
        np.testing.assert_array_equal(out.frames[~union], c.frames[~union])

    def test_annotations_untouched(self):
        c = labeled_clip(2)
        out, _ = Dt.random_mask(c, 10, seed=1)
        for a, b in zip(out.annotations, c.annotations):
            np.testing.assert_array_equal(a, b)

    def test_exclude_last(self):
        out, placed = Dt.random_mask(labeled_clip(3), 50, seed=2, exclude_last=True)
        assert max(p[0] for p in placed) == 3

    def test_negative(self):
        with pytest.raises(ValueError):
            Dt.random_mask(labeled_clip(), -1)


class TestSynth:
    def test_label_count(self):
        splits, sources, labeled = Dt.assign_splits(SynthConfig())
        assert sum(labeled) == 100
        assert all(lab for sp, lab in zip(splits, labeled) if sp != "train")

    def test_sources_never_span_splits(self):
        splits, sources, _ = Dt.assign_splits(SynthConfig(clips=137, clips_per_source=3))
        by_src = {}
        for sp, src in zip(splits, sources):
            by_src.setdefault(src, set()).add(sp)
        assert all(len(v) == 1 for v in by_src.values())
        assert {"train", "val", "test"} <= set(splits)

    def test_too_few_labels(self):
        with pytest.raises(ValueError):
            Dt.assign_splits(SynthConfig(clips=100, label_fraction=0.01))

    @pytest.mark.parametrize("kw", [dict(clips=0), dict(label_fraction=1.5), dict(axis_range=(10, 80)),
                                    dict(val_fraction=0.6, test_fraction=0.5), dict(image_size=8)])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            SynthConfig(**kw).validate()

    def test_dark_pixels_inside_box(self):
        cfg = SynthConfig(clips=1)
        for seed in range(20):
            frames, boxes, clean, masks = Dt.render_clip(cfg, np.random.default_rng(seed))
            for t in range(cfg.frames):
                cx, cy, w, h = boxes[t][0] * 64
                ys, xs = np.nonzero(clean[t] < Dt.LESION_THRESHOLD)
                assert len(xs) > 0
                assert np.all(xs + 0.5 >= cx - w / 2 - 1e-9) and np.all(xs + 0.5 <= cx + w / 2 + 1e-9)
                assert np.all(ys + 0.5 >= cy - h / 2 - 1e-9) and np.all(ys + 0.5 <= cy + h / 2 + 1e-9)
                np.testing.assert_array_equal(clean[t] < Dt.LESION_THRESHOLD, masks[t])

    def test_lesion_geometry(self):
        cfg = SynthConfig(clips=1)
        for seed in range(10):
            _, boxes, _, _ = Dt.render_clip(cfg, np.random.default_rng(seed))
            centres = np.array([b[0, :2] for b in boxes]) * 64
            assert np.all(np.linalg.norm(np.diff(centres, axis=0), axis=1) <= 3.0 + 1e-9)
            assert np.all((np.array(boxes)[:, 0, 2:] * 64 <= 24 + 1e-9))

    def test_regeneration_byte_identical(self, tmp_path):
        cfg = SynthConfig(clips=8, label_fraction=0.5)
        Dt.synth_generate(cfg, 3, tmp_path / "a")
        Dt.synth_generate(cfg, 3, tmp_path / "b")

        def digest(root):
            h = hashlib.sha256()
            for p in sorted(root.rglob("*")):
                if p.is_file():
                    h.update(p.relative_to(root).as_posix().encode())
                    h.update(p.read_bytes())
            return h.hexdigest()

        assert digest(tmp_path / "a") == digest(tmp_path / "b")

    def test_disk_round_trip_equals_in_memory(self, tmp_path):
        cfg = SynthConfig(clips=8, label_fraction=0.5)
        Dt.synth_generate(cfg, 5, tmp_path)
        manifest = Dt.read_manifest(tmp_path)
        disk = Dt.load_clips(manifest)
        mem = Dt.synth_clips(cfg, 5)
        assert [c.id for c in disk] == [c.id for c in mem]
        for a, b in zip(disk, mem):
            np.testing.assert_array_equal(a.frames, b.frames)
            assert a.labeled == b.labeled and a.split == b.split
            if a.labeled:
                for x, y in zip(a.annotations, b.annotations):
                    np.testing.assert_allclose(x, y, atol=1e-12)

    def test_manifest_schema(self, tmp_path):
        manifest = Dt.synth_generate(SynthConfig(clips=4, label_fraction=0.5), 0, tmp_path)
        rec = next(r for r in manifest["clips"] if r["labeled"])
        assert set(rec) >= {"id", "split", "labeled", "frames", "annotations"}
        assert rec["annotations"][0][0]["category"] == 1 and len(rec["annotations"][0][0]["bbox"]) == 4
        assert (tmp_path / rec["frames"][0]).exists()

    def test_manifest_rejects_cross_split_source(self):
        bad = {"clips": [{"id": "a", "split": "train", "labeled": False, "frames": [], "source": "s"},
                         {"id": "b", "split": "test", "labeled": False, "frames": [], "source": "s"}]}
        with pytest.raises(ValueError):
            Dt.validate_manifest(bad)

    def test_frame_ids(self):
        assert Dt.frame_ids(labeled_clip(t=2)) == ["c/0", "c/1"]
