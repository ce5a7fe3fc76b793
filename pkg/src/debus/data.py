"""Clips, augmentation, random masking and the synthetic ultrasound-like dataset.

Frames are float32 grayscale in [0, 1], shape (T, H, W). Boxes are (n, 4)
normalised (cx, cy, w, h). On disk frames are 8-bit PNGs and the manifest is
JSON::

    {"clips": [{"id", "split", "labeled", "source", "timestamps",
                "frames": [relative png paths],
                "annotations": [[{"bbox": [cx, cy, w, h], "category": 1}, ...], ...] | null}]}
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

CLIP_LEN = 5
LESION_CATEGORY = 1
SPLITS = ("train", "val", "test")


@dataclass
class Clip:
    frames: np.ndarray
    annotations: list | None = None  # per frame (n, 4) arrays; None when unlabeled
    labeled: bool = False
    source_id: str = ""
    timestamps: list = field(default_factory=list)
    id: str = ""
    split: str = "train"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3:
            raise ValueError(f"clip frames must be (T, H, W), got {self.frames.shape}")
        if self.labeled:
            if self.annotations is None or len(self.annotations) != len(self.frames):
                raise ValueError("a labeled clip needs one annotation list per frame")
        if self.annotations is not None:
            self.annotations = [np.asarray(a, dtype=np.float64).reshape(-1, 4) for a in self.annotations]

    def __len__(self):
        return len(self.frames)

    def copy(self) -> "Clip":
        ann = None if self.annotations is None else [a.copy() for a in self.annotations]
        return replace(self, frames=self.frames.copy(), annotations=ann, timestamps=list(self.timestamps))


def pad_clip(clip: Clip, length: int = CLIP_LEN) -> Clip:
    """Repeat the last frame (and its annotation) up to ``length`` frames."""
    n = len(clip)
    if n >= length:
        return clip
    extra = length - n
    frames = np.concatenate([clip.frames, np.repeat(clip.frames[-1:], extra, axis=0)])
    ann = None
    if clip.annotations is not None:
        ann = list(clip.annotations) + [clip.annotations[-1].copy() for _ in range(extra)]
    ts = list(clip.timestamps) + [clip.timestamps[-1]] * extra if clip.timestamps else []
    return replace(clip, frames=frames, annotations=ann, timestamps=ts)


def sample_indices(n_frames: int, fps: float, segment_len: float = 5.0, sample_interval: float = 1.0) -> list:
    """Frame indices per clip: one frame every ``sample_interval`` s within each segment."""
    per_clip = int(round(segment_len / sample_interval))
    clips = []
    seg = 0
    while True:
        idx = []
        for k in range(per_clip):
            i = int(math.floor((seg * segment_len + k * sample_interval) * fps + 0.5))
            if i < n_frames:
                idx.append(i)
        if not idx:
            break
        clips.append(idx)
        seg += 1
    return clips


def extract_clips(frames, fps: float, segment_len: float = 5.0, sample_interval: float = 1.0,
                  annotations=None, source_id: str = "") -> list[Clip]:
    """Cut a video into non-overlapping segments sampled at fixed intervals.

    Short trailing segments are padded by repeating their last sampled frame.
    """
    frames = np.asarray(frames)
    if len(frames) == 0:
        raise ValueError("extract_clips: empty video")
    if fps <= 0:
        raise ValueError("extract_clips: fps must be positive")
    per_clip = int(round(segment_len / sample_interval))
    out = []
    for c, idx in enumerate(sample_indices(len(frames), fps, segment_len, sample_interval)):
        ann = [annotations[i] for i in idx] if annotations is not None else None
        clip = Clip(frames[idx], ann, labeled=ann is not None, source_id=source_id,
                    timestamps=[i / fps for i in idx], id=f"{source_id}{c:04d}")
        out.append(pad_clip(clip, per_clip))
    return out


# -- augmentation --------------------------------------------------------------------
@dataclass
class AugPolicy:
    scale_range: tuple | None = (0.85, 1.15)
    hflip_prob: float = 0.5
    pad_max: int = 4
    brightness: float = 0.3
    contrast: float = 0.3
    gamma_range: tuple | None = (0.7, 1.4)
    mask_count: int = 10
    mask_size: tuple = (16, 32)
    mask_exclude_last: bool = False

    def __post_init__(self):
        for name in ("scale_range", "gamma_range"):
            r = getattr(self, name)
            if r is not None and not (0 < r[0] <= r[1]):
                raise ValueError(f"{name} must satisfy 0 < lo <= hi, got {r}")
        if not 0 <= self.hflip_prob <= 1:
            raise ValueError("hflip_prob must be in [0, 1]")
        if self.mask_count < 0 or self.pad_max < 0 or self.brightness < 0 or self.contrast < 0:
            raise ValueError("mask_count, pad_max, brightness and contrast must be >= 0")
        if not 0 < self.mask_size[0] <= self.mask_size[1]:
            raise ValueError(f"mask_size must satisfy 0 < lo <= hi, got {self.mask_size}")

    @classmethod
    def identity(cls) -> "AugPolicy":
        return cls(scale_range=None, hflip_prob=0.0, pad_max=0, brightness=0.0, contrast=0.0,
                   gamma_range=None, mask_count=0)

    @classmethod
    def photometric(cls, mask_count: int = 10) -> "AugPolicy":
        """Strong view without geometry (for paired teacher/student views)."""
        return cls(scale_range=None, hflip_prob=0.0, pad_max=0, mask_count=mask_count)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def axis_affine(size: int, scale: float = 1.0, flip: bool = False, pad=(0, 0, 0, 0)):
    """Per-axis maps u = a * x + b (pixel units) for x and y.

    Applied in order: pad (left, right, top, bottom) and resize back to
    ``size``, scale about the image centre (crop/pad to ``size``), then flip.
    """
    pl, pr, pt, pb = pad
    ax, bx = size / (size + pl + pr), pl * size / (size + pl + pr)
    ay, by = size / (size + pt + pb), pt * size / (size + pt + pb)
    c = size / 2.0
    ax, bx = scale * ax, scale * (bx - c) + c
    ay, by = scale * ay, scale * (by - c) + c
    if flip:
        ax, bx = -ax, size - bx
    return (ax, bx), (ay, by)


def warp_frames(frames: np.ndarray, xmap, ymap) -> np.ndarray:
    """Bilinear resampling of every frame through the per-axis maps; outside -> 0."""
    t, h, w = frames.shape
    (ax, bx), (ay, by) = xmap, ymap
    u = np.arange(w) + 0.5
    v = np.arange(h) + 0.5
    xs = (u - bx) / ax - 0.5
    ys = (v - by) / ay - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty_like(frames)
    for i in range(t):
        out[i] = ndimage.map_coordinates(frames[i], [yy, xx], order=1, mode="constant", cval=0.0)
    return out


def transform_boxes(boxes: np.ndarray, size: int, xmap, ymap) -> np.ndarray:
    """Map normalised boxes through the per-axis maps, clip, and drop empties."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        return boxes
    (ax, bx), (ay, by) = xmap, ymap
    x1 = (boxes[:, 0] - boxes[:, 2] / 2) * size
    x2 = (boxes[:, 0] + boxes[:, 2] / 2) * size
    y1 = (boxes[:, 1] - boxes[:, 3] / 2) * size
    y2 = (boxes[:, 1] + boxes[:, 3] / 2) * size
    u1, u2 = ax * x1 + bx, ax * x2 + bx
    v1, v2 = ay * y1 + by, ay * y2 + by
    nx1, nx2 = np.clip(np.minimum(u1, u2), 0, size), np.clip(np.maximum(u1, u2), 0, size)
    ny1, ny2 = np.clip(np.minimum(v1, v2), 0, size), np.clip(np.maximum(v1, v2), 0, size)
    keep = (nx2 - nx1 > 0) & (ny2 - ny1 > 0)
    out = np.stack([(nx1 + nx2) / 2, (ny1 + ny2) / 2, nx2 - nx1, ny2 - ny1], axis=1) / size
    return out[keep]


def color_jitter(frames: np.ndarray, brightness: float, contrast: float, gamma: float) -> np.ndarray:
    x = frames * brightness
    m = x.mean()
    x = (x - m) * contrast + m
    x = np.clip(x, 0.0, 1.0) ** gamma
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def random_mask(clip: Clip, m: int, size_range=(16, 32), seed=None, exclude_last: bool = False):
    """Zero ``m`` random rectangles, each on a uniformly chosen frame.

    Returns the masked clip and the placements as (frame, y, x, h, w).
    Annotations are left untouched.
    """
    rng = _rng(seed)
    if m < 0:
        raise ValueError("mask count must be >= 0")
    if m == 0:
        return clip, []
    out = clip.copy()
    t, h, w = out.frames.shape
    n_frames = t - 1 if exclude_last and t > 1 else t
    placements = []
    lo, hi = size_range
    for _ in range(m):
        f = int(rng.integers(0, n_frames))
        mh = int(rng.integers(lo, min(hi, h) + 1))
        mw = int(rng.integers(lo, min(hi, w) + 1))
        y = int(rng.integers(0, h - mh + 1))
        x = int(rng.integers(0, w - mw + 1))
        out.frames[f, y:y + mh, x:x + mw] = 0.0
        placements.append((f, y, x, mh, mw))
    return out, placements


def augment(clip: Clip, policy: AugPolicy, seed=None) -> Clip:
    """Geometric transforms shared by all frames, ColorJitter, then random masks."""
    rng = _rng(seed)
    out = clip.copy()
    size = out.frames.shape[-1]
    scale = float(rng.uniform(*policy.scale_range)) if policy.scale_range else 1.0
    flip = bool(rng.random() < policy.hflip_prob) if policy.hflip_prob > 0 else False
    pad = tuple(int(v) for v in rng.integers(0, policy.pad_max + 1, size=4)) if policy.pad_max else (0, 0, 0, 0)
    if scale != 1.0 or flip or any(pad):
        xmap, ymap = axis_affine(size, scale, flip, pad)
        out.frames = warp_frames(out.frames, xmap, ymap)
        if out.annotations is not None:
            out.annotations = [transform_boxes(a, size, xmap, ymap) for a in out.annotations]
    if policy.brightness or policy.contrast or policy.gamma_range:
        b = float(rng.uniform(1 - policy.brightness, 1 + policy.brightness)) if policy.brightness else 1.0
        c = float(rng.uniform(1 - policy.contrast, 1 + policy.contrast)) if policy.contrast else 1.0
        g = float(rng.uniform(*policy.gamma_range)) if policy.gamma_range else 1.0
        out.frames = color_jitter(out.frames, b, c, g)
    if policy.mask_count:
        out, _ = random_mask(out, policy.mask_count, policy.mask_size, rng, policy.mask_exclude_last)
    return out


# -- synthetic generator ----------------------------------------------------------------
@dataclass
class SynthConfig:
    clips: int = 400
    image_size: int = 64
    frames: int = CLIP_LEN
    max_lesions: int = 1
    label_fraction: float = 0.25
    clips_per_source: int = 4
    val_fraction: float = 0.05
    test_fraction: float = 0.05
    axis_range: tuple = (10, 24)  # full ellipse axis lengths, px
    max_step: float = 3.0  # px per frame
    max_vessels: int = 2

    def validate(self) -> None:
        if self.clips < 1:
            raise ValueError("clips must be >= 1")
        if self.image_size < 16 or self.frames < 1 or self.max_lesions < 1:
            raise ValueError("image_size >= 16, frames >= 1 and max_lesions >= 1 required")
        if not 0 <= self.label_fraction <= 1:
            raise ValueError("label_fraction must be in [0, 1]")
        if self.clips_per_source < 1:
            raise ValueError("clips_per_source must be >= 1")
        if self.val_fraction < 0 or self.test_fraction < 0 or self.val_fraction + self.test_fraction >= 1:
            raise ValueError("val/test fractions must be >= 0 and sum below 1")
        if not 0 < self.axis_range[0] <= self.axis_range[1] < self.image_size:
            raise ValueError("axis_range must fit inside the image")


@dataclass
class Lesion:
    cx: float
    cy: float
    a: float  # semi-axes, px
    b: float
    theta: float
    dip: float

    def half_extent(self) -> tuple[float, float]:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return (math.sqrt((self.a * c) ** 2 + (self.b * s) ** 2),
                math.sqrt((self.a * s) ** 2 + (self.b * c) ** 2))

    def mask(self, size: int) -> np.ndarray:
        yy, xx = np.mgrid[0:size, 0:size] + 0.5
        dx, dy = xx - self.cx, yy - self.cy
        c, s = math.cos(self.theta), math.sin(self.theta)
        return ((dx * c + dy * s) / self.a) ** 2 + ((-dx * s + dy * c) / self.b) ** 2 <= 1.0

    def box(self, size: int) -> np.ndarray:
        hx, hy = self.half_extent()
        return np.array([self.cx / size, self.cy / size, 2 * hx / size, 2 * hy / size])


BACKGROUND_RANGE = (0.38, 0.62)
LESION_DIP = (0.55, 0.75)
# midway between the brightest clean lesion pixel and the darkest clean background pixel
LESION_THRESHOLD = 0.5 * (BACKGROUND_RANGE[1] * (1 - LESION_DIP[0]) + BACKGROUND_RANGE[0])


def _tissue(rng, size):
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 6, mode="wrap")
    field_ = (field_ - field_.min()) / (np.ptp(field_) + 1e-9)
    lo, hi = BACKGROUND_RANGE
    return lo + (hi - lo) * field_


def _walk(rng, start, n, size, half, max_step):
    """Smooth random walk of a centre, speed capped at ``max_step`` px/frame."""
    pos = np.array(start, dtype=np.float64)
    vel = rng.normal(0, 1.0, size=2)
    out = [pos.copy()]
    for _ in range(n - 1):
        vel = 0.7 * vel + rng.normal(0, 0.8, size=2)
        speed = np.linalg.norm(vel)
        if speed > max_step:
            vel *= max_step / speed
        pos = pos + vel
        for k in range(2):
            lo, hi = half[k], size - half[k]
            if pos[k] < lo:
                pos[k] = lo
                vel[k] = abs(vel[k])
            elif pos[k] > hi:
                pos[k] = hi
                vel[k] = -abs(vel[k])
        out.append(pos.copy())
    return out


def render_clip(cfg: SynthConfig, rng: np.random.Generator):
    """Render one clip; returns (frames, boxes per frame, clean frames, lesion masks)."""
    s = cfg.image_size
    tissue = _tissue(rng, s)
    n_les = int(rng.integers(1, cfg.max_lesions + 1))
    tracks = []
    for _ in range(n_les):
        a, b = (rng.uniform(*cfg.axis_range, size=2) / 2)
        lz = Lesion(0, 0, a, b, float(rng.uniform(0, math.pi)), float(rng.uniform(*LESION_DIP)))
        hx, hy = lz.half_extent()
        start = (rng.uniform(hx, s - hx), rng.uniform(hy, s - hy))
        tracks.append((lz, _walk(rng, start, cfg.frames, s, (hx, hy), cfg.max_step)))
    vessels = []
    for _ in range(int(rng.integers(0, cfg.max_vessels + 1))):
        r = rng.uniform(3, 7)
        start = (rng.uniform(r, s - r), rng.uniform(r, s - r))
        vessels.append((r, _walk(rng, start, cfg.frames, s, (r, r), 1.5), rng.uniform(1.4, 1.8)))
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    frames, clean_frames, boxes, masks = [], [], [], []
    for t in range(cfg.frames):
        clean = tissue.copy()
        for r, path, gain in vessels:
            cx, cy = path[t]
            clean[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] *= gain
        frame_boxes, frame_mask = [], np.zeros((s, s), dtype=bool)
        for lz, path in tracks:
            cur = replace(lz, cx=float(path[t][0]), cy=float(path[t][1]))
            m = cur.mask(s)
            clean[m] = tissue[m] * (1 - cur.dip)
            frame_mask |= m
            frame_boxes.append(cur.box(s))
        speckle = rng.rayleigh(scale=1.0 / math.sqrt(math.pi / 2), size=(s, s))
        speckle = ndimage.gaussian_filter(speckle, sigma=0.6)
        speckle /= speckle.mean()
        frames.append(np.clip(clean * speckle, 0, 1))
        clean_frames.append(clean)
        boxes.append(np.array(frame_boxes).reshape(-1, 4))
        masks.append(frame_mask)
    return np.array(frames, dtype=np.float32), boxes, np.array(clean_frames), np.array(masks)


def assign_splits(cfg: SynthConfig) -> tuple[list, list, list]:
    """Split names, source ids and labeled flags per clip (source-level split)."""
    n_src = math.ceil(cfg.clips / cfg.clips_per_source)
    src_of = [i // cfg.clips_per_source for i in range(cfg.clips)]
    n_val = int(round(cfg.val_fraction * n_src))
    n_test = int(round(cfg.test_fraction * n_src))
    split_of_src = ["test"] * n_test + ["val"] * n_val + ["train"] * (n_src - n_val - n_test)
    splits = [split_of_src[::-1][s] for s in src_of]  # test sources at the end
    n_labeled = int(round(cfg.label_fraction * cfg.clips))
    held_out = sum(1 for sp in splits if sp != "train")
    if held_out > n_labeled:
        raise ValueError(f"{held_out} held-out clips need labels but only {n_labeled} labeled clips requested")
    labeled = [sp != "train" for sp in splits]
    train_idx = [i for i, sp in enumerate(splits) if sp == "train"]
    need = n_labeled - held_out
    # spread labeled train clips evenly over the train sources
    picks = np.linspace(0, len(train_idx), num=need, endpoint=False).astype(int) if need else []
    for p in picks:
        labeled[train_idx[p]] = True
    return splits, [f"src{s:04d}" for s in src_of], labeled


def _synth_records(cfg: SynthConfig, seed: int):
    """Yield (id, 8-bit frames, boxes per frame, split, source, labeled) per clip."""
    cfg.validate()
    splits, sources, labeled = assign_splits(cfg)
    children = np.random.SeedSequence(seed).spawn(cfg.clips)
    for i in range(cfg.clips):
        frames, boxes, _, _ = render_clip(cfg, np.random.default_rng(children[i]))
        yield f"clip{i:05d}", to_uint8(frames), boxes, splits[i], sources[i], labeled[i]


def synth_clips(cfg: SynthConfig, seed: int) -> list[Clip]:
    """The generated dataset as in-memory clips, identical to a disk round trip."""
    clips = []
    for cid, frames, boxes, split, source, labeled in _synth_records(cfg, seed):
        ann = [np.round(b, 6) for b in boxes] if labeled else None
        clips.append(Clip(frames.astype(np.float32) / 255.0, ann, labeled=labeled, source_id=source,
                          timestamps=[float(t) for t in range(cfg.frames)], id=cid, split=split))
    return clips


def synth_generate(cfg: SynthConfig, seed: int, root=None) -> dict:
    """Generate the dataset; writes PNGs + manifest.json under ``root`` when given.

    Returns the manifest dict. Output is a pure function of (cfg, seed).
    """
    root = Path(root) if root is not None else None
    if root is not None:
        (root / "frames").mkdir(parents=True, exist_ok=True)
    clips = []
    for cid, frames, boxes, split, source, labeled in _synth_records(cfg, seed):
        paths = []
        for t, f in enumerate(frames):
            rel = f"frames/{cid}_{t}.png"
            paths.append(rel)
            if root is not None:
                Image.fromarray(f, mode="L").save(root / rel, optimize=False)
        ann = None
        if labeled:
            ann = [[{"bbox": [round(float(v), 6) for v in b], "category": LESION_CATEGORY} for b in fb]
                   for fb in boxes]
        clips.append({"id": cid, "split": split, "labeled": labeled, "source": source,
                      "timestamps": [float(t) for t in range(cfg.frames)], "frames": paths, "annotations": ann})
    manifest = {"version": 1, "image_size": cfg.image_size, "seed": int(seed),
                "config": {k: list(v) if isinstance(v, tuple) else v for k, v in vars(cfg).items()},
                "clips": clips}
    if root is not None:
        write_manifest(manifest, root / "manifest.json")
    return manifest


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(frame * 255.0 + 0.5), 0, 255).astype(np.uint8)


# -- manifest I/O ---------------------------------------------------------------------------
def write_manifest(manifest: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    with open(path) as fh:
        manifest = json.load(fh)
    manifest["root"] = str(path.parent)
    validate_manifest(manifest)
    return manifest


def validate_manifest(manifest: dict) -> None:
    """Split tags must be known and no source may appear in two splits."""
    seen: dict[str, str] = {}
    for rec in manifest["clips"]:
        if rec["split"] not in SPLITS:
            raise ValueError(f"clip {rec['id']}: unknown split {rec['split']!r}")
        if rec["labeled"] and (rec.get("annotations") is None or len(rec["annotations"]) != len(rec["frames"])):
            raise ValueError(f"clip {rec['id']}: labeled but annotations do not cover every frame")
        src = rec.get("source", rec["id"])
        if seen.setdefault(src, rec["split"]) != rec["split"]:
            raise ValueError(f"source {src} appears in splits {seen[src]} and {rec['split']}")


def load_clip(manifest: dict, rec: dict) -> Clip:
    root = Path(manifest.get("root", "."))
    frames = np.stack([np.asarray(Image.open(root / p), dtype=np.float32) / 255.0 for p in rec["frames"]])
    ann = None
    if rec.get("annotations") is not None:
        ann = [np.array([o["bbox"] for o in fa], dtype=np.float64).reshape(-1, 4) for fa in rec["annotations"]]
    clip = Clip(frames, ann, labeled=bool(rec["labeled"]), source_id=rec.get("source", ""),
                timestamps=rec.get("timestamps", []), id=rec["id"], split=rec["split"])
    return pad_clip(clip)


def load_clips(manifest: dict, split: str | None = None, labeled: bool | None = None) -> list[Clip]:
    return [load_clip(manifest, r) for r in manifest["clips"]
            if (split is None or r["split"] == split) and (labeled is None or bool(r["labeled"]) == labeled)]


def frame_ids(clip: Clip) -> list[str]:
    return [f"{clip.id}/{t}" for t in range(len(clip))]
