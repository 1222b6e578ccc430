"""Stereo frame ingestion, dataset manifests and synthetic layered-plane scenes."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

INTRO_SKIP_FRAMES = 600
FRAME_PATTERN = "frame_{:06d}.png"
VALUE_RANGES = ((0.0, 255.0), (-127.5, 127.5))


class DataError(ValueError):
    pass


class LayoutError(DataError):
    pass


class MissingFrameError(DataError):
    def __init__(self, index):
        super().__init__(f"missing frame {index}")
        self.index = index


@dataclass
class FrameSequence:
    """A clip of ``T x H x W x C`` frames with a declared value range."""

    frames: np.ndarray
    value_range: tuple = (0.0, 255.0)
    frame_rate: float = 24.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        self.value_range = tuple(float(v) for v in self.value_range)
        if self.frames.ndim != 4:
            raise DataError(f"expected T x H x W x C frames, got shape {self.frames.shape}")
        t, h, w, c = self.frames.shape
        if t < 1 or h < 8 or w < 8 or c not in (1, 3):
            raise DataError(f"invalid frame geometry {self.frames.shape}")
        if self.value_range not in VALUE_RANGES:
            raise DataError(f"unsupported value range {self.value_range}")
        lo, hi = self.value_range
        if self.frames.size and (self.frames.min() < lo or self.frames.max() > hi):
            raise DataError(f"values outside declared range {self.value_range}")

    @property
    def shape(self):
        return self.frames.shape

    def __len__(self):
        return self.frames.shape[0]

    def to_range(self, value_range):
        """Linearly remap into another supported range."""
        value_range = tuple(float(v) for v in value_range)
        if value_range == self.value_range:
            return self
        lo, hi = self.value_range
        nlo, nhi = value_range
        scaled = (self.frames.astype(np.float64) - lo) / (hi - lo) * (nhi - nlo) + nlo
        return FrameSequence(np.clip(scaled, nlo, nhi), value_range, self.frame_rate)

    def unit(self):
        """Frames rescaled to [0, 1] as float32."""
        lo, hi = self.value_range
        return ((self.frames.astype(np.float64) - lo) / (hi - lo)).astype(np.float32)

    @classmethod
    def from_unit(cls, frames, value_range=(0.0, 255.0), frame_rate=24.0):
        lo, hi = value_range
        frames = np.clip(np.asarray(frames, dtype=np.float64), 0.0, 1.0) * (hi - lo) + lo
        return cls(frames, value_range, frame_rate)


# --------------------------------------------------------------------------- manifests


@dataclass
class ManifestEntry:
    video_id: str
    source_path: str
    width: int
    height: int
    start_frame: int
    end_frame: int
    layout: str = "side-by-side"
    extra: dict = field(default_factory=dict)

    def validate(self):
        if self.layout not in ("side-by-side", "separate"):
            raise LayoutError(f"{self.video_id}: unknown layout {self.layout!r}")
        if self.end_frame <= self.start_frame:
            raise DataError(f"{self.video_id}: end_frame must exceed start_frame")
        if self.layout == "side-by-side" and self.start_frame < INTRO_SKIP_FRAMES:
            raise DataError(
                f"{self.video_id}: start_frame {self.start_frame} violates the "
                f"{INTRO_SKIP_FRAMES}-frame intro skip for side-by-side sources"
            )

    def to_record(self):
        rec = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "extra"}
        rec.update(self.extra)
        return rec

    @classmethod
    def from_record(cls, rec):
        known = {f.name for f in fields(cls)} - {"extra"}
        missing = known - set(rec) - {"layout"}
        if missing:
            raise DataError(f"manifest record missing fields: {sorted(missing)}")
        kwargs = {k: rec[k] for k in known if k in rec}
        for k in ("width", "height", "start_frame", "end_frame"):
            kwargs[k] = int(kwargs[k])
        extra = {k: v for k, v in rec.items() if k not in known}
        return cls(**kwargs, extra=extra)


def read_manifest(path):
    """Read a JSON-lines manifest. Unknown keys are kept in ``entry.extra``."""
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            entries.append(ManifestEntry.from_record(rec))
    return entries


def write_manifest(path, entries):
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_record(), sort_keys=True) + "\n")


# --------------------------------------------------------------------------- frame io


def frame_path(directory, index):
    return Path(directory) / FRAME_PATTERN.format(index)


def write_frame(path, image):
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


def read_frame(path):
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def write_frames(directory, frames, start=0):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        write_frame(frame_path(directory, start + i), frame)


def split_sbs_frame(frame):
    """Split a side-by-side ``H x 2W (x C)`` frame into its left and right halves."""
    frame = np.asarray(frame)
    width = frame.shape[1]
    if width % 2:
        raise LayoutError(f"side-by-side frame width {width} is odd")
    half = width // 2
    return frame[:, :half].copy(), frame[:, half:].copy()


def ingest_frames(entry, frame_dir):
    """Load ``[start_frame, end_frame)`` of an entry as left/right sequences.

    Side-by-side sources read ``frame_dir/frame_%06d.png`` and split each frame;
    separate sources read matching files from ``left/`` and ``right/``.
    """
    entry.validate()
    frame_dir = Path(frame_dir)
    if entry.layout == "side-by-side":
        dirs = [frame_dir]
    else:
        dirs = [frame_dir / "left", frame_dir / "right"]

    for idx in range(entry.start_frame, entry.end_frame):
        for d in dirs:
            if not frame_path(d, idx).is_file():
                raise MissingFrameError(idx)

    lefts, rights = [], []
    shape = None
    for idx in range(entry.start_frame, entry.end_frame):
        if entry.layout == "side-by-side":
            left, right = split_sbs_frame(read_frame(frame_path(frame_dir, idx)))
        else:
            left = read_frame(frame_path(dirs[0], idx))
            right = read_frame(frame_path(dirs[1], idx))
            if left.shape != right.shape:
                raise DataError(f"frame {idx}: left/right shapes differ")
        if shape is None:
            shape = left.shape
        elif left.shape != shape:
            raise DataError(f"frame {idx}: dimension {left.shape} differs from {shape}")
        lefts.append(left)
        rights.append(right)
    rate = float(entry.extra.get("frame_rate", 24.0))
    return (
        FrameSequence(np.stack(lefts).astype(np.float32), (0.0, 255.0), rate),
        FrameSequence(np.stack(rights).astype(np.float32), (0.0, 255.0), rate),
    )


def make_anaglyph(left, right):
    """Red channel from the left view, green and blue from the right view."""
    left = np.asarray(left)
    right = np.asarray(right)
    if left.shape != right.shape:
        raise DataError(f"anaglyph views differ in shape: {left.shape} vs {right.shape}")
    if left.ndim == 2 or left.shape[-1] == 1:
        left = np.repeat(left.reshape(left.shape[:2] + (1,)), 3, axis=-1)
        right = np.repeat(right.reshape(right.shape[:2] + (1,)), 3, axis=-1)
    out = right.copy()
    out[..., 0] = left[..., 0]
    return out


# --------------------------------------------------------------------------- synthetic scenes


@dataclass
class SyntheticSceneSpec:
    """Fronto-parallel textured planes listed back to front.

    ``extents`` holds ``(top, left, height, width)`` per plane at frame 0 in
    left-view coordinates; ``None`` makes a plane unbounded. With ``extents``
    unset, plane 0 is an unbounded backdrop and the rest get seeded boxes.
    ``motion`` is ``(vx, vy)`` in pixels/frame per plane.
    """

    disparities: list
    canvas: tuple = (64, 64)
    length: int = 8
    texture_seeds: Optional[list] = None
    motion: Optional[list] = None
    extents: Optional[list] = None

    @property
    def num_layers(self):
        return len(self.disparities)

    def validate(self):
        h, w = self.canvas
        n = self.num_layers
        if n < 1:
            raise DataError("scene needs at least one plane")
        if self.length < 1 or h < 1 or w < 1:
            raise DataError(f"invalid canvas {self.canvas} / length {self.length}")
        for d in self.disparities:
            if int(d) != d:
                raise DataError(f"disparity {d} is not an integer")
            if abs(d) > w / 8:
                raise DataError(f"|disparity| {abs(d)} exceeds W/8 = {w / 8}")
        mags = [abs(d) for d in self.disparities]
        if any(b <= a for a, b in zip(mags, mags[1:])):
            raise DataError("nearer planes must have strictly larger disparity magnitude")
        for name in ("texture_seeds", "motion", "extents"):
            val = getattr(self, name)
            if val is not None and len(val) != n:
                raise DataError(f"{name} needs one value per plane ({n})")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown scene fields: {sorted(unknown)}")
        if "disparities" not in d:
            raise DataError("scene spec missing field: disparities")
        kw = dict(d)
        kw["canvas"] = tuple(kw.get("canvas", (64, 64)))
        if kw.get("motion") is not None:
            kw["motion"] = [tuple(m) for m in kw["motion"]]
        if kw.get("extents") is not None:
            kw["extents"] = [None if e is None else tuple(e) for e in kw["extents"]]
        return cls(**kw)


@dataclass
class SyntheticStereo:
    """Rendered stereo clip with exact geometry.

    ``gt_disparity``/``gt_occlusion`` live on the right-view grid: the disparity
    that reproduces each right pixel as ``left[y, x + d]`` and whether that
    surface point is hidden (or off-canvas) in the left view.
    ``left_disparity``/``left_occlusion`` are the same quantities on the left grid.
    """

    left: FrameSequence
    right: FrameSequence
    gt_disparity: np.ndarray
    gt_occlusion: np.ndarray
    left_disparity: np.ndarray
    left_occlusion: np.ndarray

    def flows(self, t):
        """Ground-truth (left->right, right->left) flow fields for frame ``t``."""
        f_lr = np.zeros(self.left_disparity.shape[1:] + (2,))
        f_rl = np.zeros_like(f_lr)
        f_lr[..., 0] = -self.left_disparity[t]
        f_rl[..., 0] = self.gt_disparity[t]
        return f_lr, f_rl


def _plane_texture_params(seed):
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.25, 0.75, size=3)
    n_waves = 6
    freq = rng.uniform(0.03, 0.14, size=n_waves)
    angle = rng.uniform(0.0, np.pi, size=n_waves)
    fx, fy = freq * np.cos(angle), freq * np.sin(angle)
    phase = rng.uniform(0.0, 2 * np.pi, size=n_waves)
    amp = rng.uniform(-1.0, 1.0, size=(n_waves, 3))
    # keep base +- sum|amp| inside [0.02, 0.98] so no clipping kinks appear
    budget = np.minimum(base - 0.02, 0.98 - base)
    amp *= budget / np.abs(amp).sum(axis=0)
    return base, fx, fy, phase, amp


def procedural_texture(seed, ys, xs):
    """Band-limited RGB texture in [0, 1] sampled at real coordinates."""
    base, fx, fy, phase, amp = _plane_texture_params(seed)
    ys = np.asarray(ys, dtype=np.float64)[..., None]
    xs = np.asarray(xs, dtype=np.float64)[..., None]
    waves = np.sin(2 * np.pi * (fx * xs + fy * ys) + phase)
    return base + waves @ amp


def _resolve_scene(spec, seed):
    rng = np.random.default_rng(seed)
    h, w = spec.canvas
    n = spec.num_layers
    seeds = spec.texture_seeds
    if seeds is None:
        seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=n)]
    motion = spec.motion
    if motion is None:
        motion = [(0.0, 0.0)] + [tuple(rng.uniform(-1.0, 1.0, size=2)) for _ in range(n - 1)]
    extents = spec.extents
    if extents is None:
        extents = [None]
        for _ in range(n - 1):
            bh = int(rng.integers(max(2, h // 4), max(3, h // 2 + 1)))
            bw = int(rng.integers(max(2, w // 4), max(3, w // 2 + 1)))
            top = int(rng.integers(0, max(1, h - bh + 1)))
            left = int(rng.integers(0, max(1, w - bw + 1)))
            extents.append((top, left, bh, bw))
    return seeds, motion, extents


def _coverage(extent, vel, t, ys, xs):
    if extent is None:
        return np.ones(np.broadcast(ys, xs).shape, dtype=bool)
    top, left, bh, bw = extent
    oy, ox = top + vel[1] * t, left + vel[0] * t
    return (ys >= oy) & (ys < oy + bh) & (xs >= ox) & (xs < ox + bw)


def generate_synthetic_stereo(spec, seed=0):
    """Render a layered-plane stereo clip with z-buffered ground truth.

    The right view satisfies ``right[y, j] = left[y, j + d]`` for the plane
    visible at ``(y, j)`` with disparity ``d`` whenever that point is also
    visible in the left view.
    """
    spec.validate()
    h, w = spec.canvas
    n = spec.num_layers
    seeds, motion, extents = _resolve_scene(spec, seed)
    disp = [int(d) for d in spec.disparities]
    max_d = max(abs(d) for d in disp)
    ys = np.arange(h)[:, None].astype(np.float64)
    cols = np.arange(-max_d, w + max_d)  # texture atlas columns
    xs_l = np.arange(w)[None, :]

    left = np.zeros((spec.length, h, w, 3))
    right = np.zeros_like(left)
    gt_disp = np.zeros((spec.length, h, w))
    gt_occ = np.zeros((spec.length, h, w), dtype=bool)
    l_disp = np.zeros_like(gt_disp)
    l_occ = np.zeros_like(gt_occ)
    rows = np.arange(h)[:, None]

    for t in range(spec.length):
        left_idx = np.full((h, w), -1)
        right_idx = np.full((h, w), -1)
        atlases = []
        for k in range(n):
            vx, vy = motion[k]
            atlas = procedural_texture(seeds[k], ys - vy * t, cols[None, :] - vx * t)
            atlases.append(atlas)
            left_idx[_coverage(extents[k], motion[k], t, ys, xs_l.astype(np.float64))] = k
            src = (xs_l + disp[k]).astype(np.float64)
            right_idx[_coverage(extents[k], motion[k], t, ys, src)] = k

        d_l = np.zeros((h, w), dtype=np.int64)
        d_r = np.zeros((h, w), dtype=np.int64)
        for k in range(n):
            lm = left_idx == k
            rm = right_idx == k
            d_l[lm] = disp[k]
            d_r[rm] = disp[k]
            ri, rj = np.nonzero(rm)
            right[t, ri, rj] = atlases[k][ri, rj + disp[k] + max_d]
            li, lj = np.nonzero(lm)
            left[t, li, lj] = atlases[k][li, lj + max_d]

        src_r = xs_l + d_r
        inside = (src_r >= 0) & (src_r < w)
        seen = np.zeros((h, w), dtype=bool)
        seen[inside] = left_idx[np.broadcast_to(rows, (h, w))[inside], src_r[inside]] == right_idx[inside]
        dst_l = xs_l - d_l
        inside_l = (dst_l >= 0) & (dst_l < w)
        seen_l = np.zeros((h, w), dtype=bool)
        seen_l[inside_l] = right_idx[np.broadcast_to(rows, (h, w))[inside_l], dst_l[inside_l]] == left_idx[inside_l]

        gt_disp[t] = d_r
        gt_occ[t] = ~seen
        l_disp[t] = d_l
        l_occ[t] = ~seen_l

    return SyntheticStereo(
        left=FrameSequence(left * 255.0, (0.0, 255.0)),
        right=FrameSequence(right * 255.0, (0.0, 255.0)),
        gt_disparity=gt_disp,
        gt_occlusion=gt_occ,
        left_disparity=l_disp,
        left_occlusion=l_occ,
    )


def random_scene_spec(rng, canvas=(64, 64), length=8, max_layers=4):
    """Draw a valid scene spec: a backdrop plus nearer planes with growing disparity."""
    h, w = canvas
    limit = int(w // 8)
    n = int(rng.integers(1, max_layers + 1))
    n = min(n, limit + 1)
    mags = np.sort(rng.choice(np.arange(0, limit + 1), size=n, replace=False))
    disparities = [int(m) for m in mags]
    return SyntheticSceneSpec(disparities=disparities, canvas=canvas, length=length)


SCENE_ARRAYS = ("left", "right", "gt_disparity", "gt_occlusion", "left_disparity", "left_occlusion")


def save_scene(out_dir, scene, meta=None):
    """Write PNG frames, exact ``.npy`` arrays and a metadata record.

    Plain ``.npy`` files (not zip archives) keep reruns byte-identical.
    """
    out_dir = Path(out_dir)
    write_frames(out_dir / "left", scene.left.frames)
    write_frames(out_dir / "right", scene.right.frames)
    for name in SCENE_ARRAYS:
        value = getattr(scene, name)
        if isinstance(value, FrameSequence):
            value = value.frames
        np.save(out_dir / f"{name}.npy", np.asarray(value))
    with open(out_dir / "meta.json", "w") as fh:
        json.dump(meta or {}, fh, indent=2, sort_keys=True)


def load_scene(path):
    path = Path(path)
    missing = [n for n in SCENE_ARRAYS if not (path / f"{n}.npy").is_file()]
    if missing:
        raise DataError(f"{path} is missing scene arrays: {', '.join(missing)}")
    z = {n: np.load(path / f"{n}.npy") for n in SCENE_ARRAYS}
    return SyntheticStereo(
        left=FrameSequence(z["left"].astype(np.float64)),
        right=FrameSequence(z["right"].astype(np.float64)),
        gt_disparity=z["gt_disparity"].astype(np.float64),
        gt_occlusion=z["gt_occlusion"].astype(bool),
        left_disparity=z["left_disparity"].astype(np.float64),
        left_occlusion=z["left_occlusion"].astype(bool),
    )


def load_frame_dir(directory, value_range=(0.0, 255.0)):
    """Read every ``frame_%06d.png`` in a directory, in index order."""
    names = sorted(p for p in os.listdir(directory) if p.startswith("frame_") and p.endswith(".png"))
    if not names:
        raise DataError(f"no frames in {directory}")
    frames = np.stack([read_frame(Path(directory) / n) for n in names]).astype(np.float32)
    return FrameSequence(frames, value_range)
