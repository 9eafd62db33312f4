"""Synthetic "moving shapes" videos with exact semantic, flow and occlusion ground truth.

Coordinates are continuous pixel units: pixel ``(x, y)`` spans ``[x, x+1) x [y, y+1)``
and its centre sits at ``(x + 0.5, y + 0.5)``. Shapes are positioned by their centre.
Flow follows the backward-warp convention of :mod:`svsgan.warp`: frame ``t`` at pixel
``p`` is frame ``t-1`` sampled at ``p + flow_t(p)``.
"""
from __future__ import annotations

import json
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from PIL import Image

from .errors import ValidationError
from .flo import read_flo, write_flo

SUPERSAMPLE = 4

# Occlusion-map surface codes: 0 background, k+1 shape k, MIXED partially covered.
MIXED = -1

_BASE_PALETTE = [
    (-0.45, -0.45, -0.35),  # background base
    (0.9, -0.7, -0.7),
    (-0.7, 0.85, -0.6),
    (-0.6, -0.5, 0.95),
    (0.9, 0.85, -0.75),
    (0.85, -0.6, 0.9),
    (-0.6, 0.9, 0.9),
    (0.95, 0.2, -0.8),
]


def class_palette(num_classes: int) -> list[tuple[float, float, float]]:
    """Deterministic RGB colours in [-1, 1], one per class; index 0 is the background base."""
    colors = list(_BASE_PALETTE[:num_classes])
    k = len(colors)
    while len(colors) < num_classes:
        hue = (k * 0.618034) % 1.0
        rgb = np.clip(np.abs((hue * 6 + np.array([0.0, 4.0, 2.0])) % 6 - 3) - 1, 0, 1)
        colors.append(tuple(float(c) for c in 1.8 * rgb - 0.9))
        k += 1
    return colors


@dataclass(frozen=True)
class ShapeSpec:
    class_id: int
    kind: Literal["rect", "disc"]
    size: tuple[float, float]  # (w, h) for rect; (diameter, diameter) for disc
    initial_position: tuple[float, float]  # centre (x, y)
    velocity: tuple[float, float]  # (du, dv) pixels/frame
    color: tuple[float, float, float]
    z_order: int = 0

    def position(self, t: float) -> tuple[float, float]:
        return (self.initial_position[0] + t * self.velocity[0],
                self.initial_position[1] + t * self.velocity[1])

    def contains(self, x, y, t: float):
        cx, cy = self.position(t)
        if self.kind == "rect":
            hw, hh = self.size[0] / 2, self.size[1] / 2
            return (x >= cx - hw) & (x < cx + hw) & (y >= cy - hh) & (y < cy + hh)
        r = self.size[0] / 2
        return (x - cx) ** 2 + (y - cy) ** 2 < r * r


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    num_classes: int
    shapes: tuple[ShapeSpec, ...] = ()
    ego_velocity: tuple[float, float] = (0.0, 0.0)
    frames: int = 8
    seed: int = 0
    levels: int = 3

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.frames < 2:
            raise ValidationError(f"frames must be >= 2, got {self.frames}")
        div = 2 ** self.levels
        for name, v in (("width", self.width), ("height", self.height)):
            if v < 8 or v % div:
                raise ValidationError(f"{name} must be >= 8 and divisible by {div}, got {v}")
        vmax = min(self.width, self.height) / self.frames
        for i, s in enumerate(self.shapes):
            if not 1 <= s.class_id < self.num_classes:
                raise ValidationError(
                    f"shape {i}: class_id {s.class_id} outside [1, {self.num_classes})")
            if s.kind not in ("rect", "disc"):
                raise ValidationError(f"shape {i}: unknown geometry {s.kind!r}")
            if min(s.size) <= 0:
                raise ValidationError(f"shape {i}: size must be positive")
            cx, cy = s.initial_position
            hw, hh = (s.size[0] / 2, s.size[1] / 2) if s.kind == "rect" else (s.size[0] / 2,) * 2
            if cx - hw < 0 or cy - hh < 0 or cx + hw > self.width or cy + hh > self.height:
                raise ValidationError(f"shape {i}: does not fit inside the frame at t=0")
            if float(np.hypot(*s.velocity)) >= vmax:
                raise ValidationError(
                    f"shape {i}: velocity magnitude must be < min(width, height)/frames = {vmax}")
            if any(not -1.0 <= c <= 1.0 for c in s.color):
                raise ValidationError(f"shape {i}: color must lie in [-1, 1]")


@dataclass
class VideoSample:
    frames: np.ndarray  # (T, H, W, 3) float32 in [-1, 1]
    semantic_maps: np.ndarray  # (T, H, W) int64
    gt_flows: np.ndarray  # (T-1, H, W, 2) float32; entry t-1 is the flow for frame t
    gt_occlusions: np.ndarray  # (T-1, H, W) float32 in [0, 1]

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    def clip(self, length: int) -> "VideoSample":
        return VideoSample(self.frames[:length], self.semantic_maps[:length],
                           self.gt_flows[:length - 1], self.gt_occlusions[:length - 1])


@dataclass
class _Texture:
    freqs: np.ndarray  # (3 channels, K, 2)
    phases: np.ndarray  # (3, K)
    amp: float
    base: np.ndarray  # (3,)

    def __call__(self, x, y):
        out = np.empty(x.shape + (3,))
        for c in range(3):
            v = np.full(x.shape, self.base[c])
            for k in range(self.freqs.shape[1]):
                fx, fy = self.freqs[c, k]
                v += self.amp * np.sin(2 * np.pi * (fx * x + fy * y) + self.phases[c, k])
            out[..., c] = v
        return out


def _texture(spec: SceneSpec) -> _Texture:
    rng = np.random.default_rng([spec.seed, 0x7E47])
    # periods of 16-40 px keep bilinear resampling error far below quantisation
    periods = rng.uniform(16.0, 40.0, size=(3, 3))
    angles = rng.uniform(0, 2 * np.pi, size=(3, 3))
    freqs = np.stack([np.cos(angles) / periods, np.sin(angles) / periods], axis=-1)
    return _Texture(freqs, rng.uniform(0, 2 * np.pi, size=(3, 3)), 0.12,
                    np.asarray(class_palette(spec.num_classes)[0]))


def _draw_order(spec: SceneSpec) -> list[int]:
    return sorted(range(len(spec.shapes)), key=lambda i: (spec.shapes[i].z_order, i))


def _top_shape(spec: SceneSpec, x, y, t: int) -> np.ndarray:
    """Index of the visible shape at each point, -1 for background."""
    top = np.full(np.shape(x), -1, dtype=np.int64)
    for i in _draw_order(spec):
        top[spec.shapes[i].contains(x, y, t)] = i
    return top


def _subsample_grid(spec: SceneSpec):
    offs = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    ys = np.arange(spec.height)[:, None, None, None] + offs[None, None, :, None]
    xs = np.arange(spec.width)[None, :, None, None] + offs[None, None, None, :]
    xs, ys = np.broadcast_arrays(xs, ys)
    shape = (spec.height, spec.width, SUPERSAMPLE * SUPERSAMPLE)
    return xs.reshape(shape), ys.reshape(shape)


def _pixel_centers(spec: SceneSpec):
    ys, xs = np.meshgrid(np.arange(spec.height) + 0.5, np.arange(spec.width) + 0.5, indexing="ij")
    return xs, ys


def _render_frame(spec: SceneSpec, t: int, tex: _Texture) -> np.ndarray:
    xs, ys = _subsample_grid(spec)
    top = _top_shape(spec, xs, ys, t)
    du, dv = spec.ego_velocity
    color = tex(xs - t * du, ys - t * dv)
    for i, s in enumerate(spec.shapes):
        color[top == i] = s.color
    return color.mean(axis=2).astype(np.float32)


def _semantic_map(spec: SceneSpec, t: int) -> np.ndarray:
    xs, ys = _pixel_centers(spec)
    top = _top_shape(spec, xs, ys, t)
    classes = np.array([0] + [s.class_id for s in spec.shapes], dtype=np.int64)
    return classes[top + 1]


def _surface_codes(spec: SceneSpec, t: int) -> np.ndarray:
    """Per-pixel surface identity: 0 background, k+1 shape k, MIXED if not fully covered."""
    top = _top_shape(spec, *_subsample_grid(spec), t) + 1
    uniform = (top == top[..., :1]).all(axis=2)
    return np.where(uniform, top[..., 0], MIXED)


def _check_t(spec: SceneSpec, t: int) -> None:
    if not 1 <= t < spec.frames:
        raise IndexError(f"frame index {t} outside [1, {spec.frames})")


def compute_gt_flow(spec: SceneSpec, t: int) -> np.ndarray:
    """Backward flow for target frame ``t``: (H, W, 2) float32."""
    _check_t(spec, t)
    xs, ys = _pixel_centers(spec)
    top = _top_shape(spec, xs, ys, t)
    flow = np.empty((spec.height, spec.width, 2), dtype=np.float32)
    flow[..., 0] = -spec.ego_velocity[0]
    flow[..., 1] = -spec.ego_velocity[1]
    for i, s in enumerate(spec.shapes):
        flow[top == i] = (-s.velocity[0], -s.velocity[1])
    return flow


def compute_gt_occlusion(spec: SceneSpec, t: int) -> np.ndarray:
    """1 where the backward source at ``t-1`` shows a different surface than ``t``; else 0.

    Pixels only partially covered by a surface, and pixels whose bilinear source footprint
    leaves the frame, are flagged too: their warp is not exact.
    """
    _check_t(spec, t)
    flow = compute_gt_flow(spec, t).astype(np.float64)
    cur = _surface_codes(spec, t)
    prev = _surface_codes(spec, t - 1)
    h, w = cur.shape
    yy, xx = np.mgrid[0:h, 0:w]
    sx, sy = xx + flow[..., 0], yy + flow[..., 1]
    occ = (cur == MIXED) | (sx < 0) | (sx > w - 1) | (sy < 0) | (sy > h - 1)
    x0, y0 = np.floor(sx), np.floor(sy)
    fx, fy = sx - x0, sy - y0
    for dx, dy, weight in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                           (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = np.clip(x0 + dx, 0, w - 1).astype(np.int64)
        yi = np.clip(y0 + dy, 0, h - 1).astype(np.int64)
        occ |= (weight > 0) & (prev[yi, xi] != cur)
    return occ.astype(np.float32)


def render_scene(spec: SceneSpec) -> VideoSample:
    spec.validate()
    tex = _texture(spec)
    frames = np.stack([_render_frame(spec, t, tex) for t in range(spec.frames)])
    sems = np.stack([_semantic_map(spec, t) for t in range(spec.frames)])
    flows = np.stack([compute_gt_flow(spec, t) for t in range(1, spec.frames)])
    occs = np.stack([compute_gt_occlusion(spec, t) for t in range(1, spec.frames)])
    return VideoSample(np.clip(frames, -1, 1), sems, flows, occs)


def random_scene_spec(seed: int, width: int = 64, height: int = 32, num_classes: int = 4,
                      frames: int = 8, shapes: tuple[int, int] = (2, 4),
                      max_speed: int = 2, ego_speed: int = 0, subpixel: bool = False,
                      levels: int = 3) -> SceneSpec:
    """Random valid scene; integer velocities unless ``subpixel``."""
    rng = np.random.default_rng(seed)
    palette = class_palette(num_classes)
    vmax = min(width, height) / frames
    speed = min(max_speed, int(np.ceil(vmax)) - 1)

    def velocity(limit):
        while True:
            if subpixel:
                v = rng.uniform(-limit, limit, size=2)
            else:
                v = rng.integers(-limit, limit + 1, size=2).astype(float)
            if np.hypot(*v) < vmax:
                return float(v[0]), float(v[1])

    specs = []
    for i in range(int(rng.integers(shapes[0], shapes[1] + 1))):
        cls = int(rng.integers(1, num_classes))
        kind = "rect" if rng.random() < 0.5 else "disc"
        lim = max(2, min(width, height) // 2 - 2)
        if kind == "rect":
            size = (float(rng.integers(4, lim + 1)), float(rng.integers(4, lim + 1)))
        else:
            d = float(rng.integers(4, lim + 1))
            size = (d, d)
        cx = float(rng.uniform(size[0] / 2, width - size[0] / 2))
        cy = float(rng.uniform(size[1] / 2, height - size[1] / 2))
        if not subpixel:
            # keep edges on the pixel grid so integer motion warps exactly
            cx = np.floor(cx - size[0] / 2) + size[0] / 2
            cy = np.floor(cy - size[1] / 2) + size[1] / 2
        specs.append(ShapeSpec(cls, kind, size, (float(cx), float(cy)), velocity(speed),
                               palette[cls], int(rng.integers(0, 3))))
    ego = velocity(min(ego_speed, speed)) if ego_speed > 0 else (0.0, 0.0)
    spec = SceneSpec(width, height, num_classes, tuple(specs), ego, frames,
                     int(rng.integers(0, 2**63 - 1)), levels)
    spec.validate()
    return spec


def make_scenes(count: int, seed: int, **kwargs) -> list[SceneSpec]:
    ss = np.random.SeedSequence(seed)
    return [random_scene_spec(int(child.generate_state(1, np.uint64)[0] >> 1), **kwargs)
            for child in ss.spawn(count)]


# -- on-disk datasets ------------------------------------------------------------------


def frame_to_bytes(frame: np.ndarray) -> np.ndarray:
    """[-1, 1] -> uint8 via round(127.5 * (v + 1))."""
    return np.clip(np.round(127.5 * (np.asarray(frame, np.float64) + 1.0)), 0, 255).astype(np.uint8)


def bytes_to_frame(data: np.ndarray) -> np.ndarray:
    return (np.asarray(data, np.float32) / 127.5 - 1.0).astype(np.float32)


def _save_png(path: Path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path, format="PNG", optimize=False)


def _load_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im)
    except FileNotFoundError:
        raise FileNotFoundError(f"missing dataset file: {path}") from None
    except OSError as exc:
        raise OSError(f"corrupt dataset file: {path} ({exc})") from None


def write_sequence(sample: VideoSample, seq_dir: Path) -> None:
    seq_dir.mkdir(parents=True, exist_ok=True)
    for t in range(sample.length):
        _save_png(seq_dir / f"frame_{t:04d}.png", frame_to_bytes(sample.frames[t]))
        _save_png(seq_dir / f"sem_{t:04d}.png", sample.semantic_maps[t].astype(np.uint8))
    for t in range(1, sample.length):
        write_flo(seq_dir / f"flow_{t:04d}.flo", sample.gt_flows[t - 1])
        occ = np.round(255 * np.clip(sample.gt_occlusions[t - 1], 0, 1)).astype(np.uint8)
        _save_png(seq_dir / f"occ_{t:04d}.png", occ)


def write_dataset(samples: Sequence[VideoSample], directory, manifest: dict) -> None:
    """Write sequences plus ``manifest.json``; ``manifest`` must carry ``num_classes`` and ``seed``."""
    if not samples:
        raise ValidationError("no samples to write")
    directory = Path(directory)
    t, h, w = samples[0].semantic_maps.shape
    num_classes = int(manifest["num_classes"])
    if num_classes > 256:
        raise ValidationError("8-bit label maps hold at most 256 classes")
    for i, s in enumerate(samples):
        if s.semantic_maps.shape != (t, h, w):
            raise ValidationError(f"sequence {i} shape {s.semantic_maps.shape} != {(t, h, w)}")
        if s.semantic_maps.max() >= num_classes or s.semantic_maps.min() < 0:
            raise ValidationError(f"sequence {i} has labels outside [0, {num_classes})")
    directory.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        write_sequence(s, directory / f"seq_{i:04d}")
    meta = {
        "num_classes": num_classes,
        "frames": int(t),
        "width": int(w),
        "height": int(h),
        "palette": [list(c) for c in manifest.get("palette", class_palette(num_classes))],
        "seed": manifest["seed"],
        "num_sequences": len(samples),
    }
    meta.update({k: v for k, v in manifest.items() if k not in meta})
    (directory / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_sequence(seq_dir: Path, frames: int, num_classes: int | None = None) -> VideoSample:
    imgs = np.stack([bytes_to_frame(_load_png(seq_dir / f"frame_{t:04d}.png")) for t in range(frames)])
    sems = np.stack([_load_png(seq_dir / f"sem_{t:04d}.png").astype(np.int64) for t in range(frames)])
    flows = np.stack([read_flo(seq_dir / f"flow_{t:04d}.flo") for t in range(1, frames)])
    occs = np.stack([_load_png(seq_dir / f"occ_{t:04d}.png").astype(np.float32) / 255.0
                     for t in range(1, frames)])
    if num_classes is not None and sems.max() >= num_classes:
        raise ValidationError(
            f"{seq_dir}: label {int(sems.max())} exceeds manifest num_classes={num_classes}")
    return VideoSample(imgs, sems, flows, occs)


@dataclass
class SceneDataset:
    """Lazy read-only view of a dataset directory; safe to share between readers."""
    root: Path
    manifest: dict = field(repr=False)

    @property
    def num_classes(self) -> int:
        return int(self.manifest["num_classes"])

    @property
    def frames(self) -> int:
        return int(self.manifest["frames"])

    @property
    def size(self) -> tuple[int, int]:
        return int(self.manifest["width"]), int(self.manifest["height"])

    def __len__(self) -> int:
        return int(self.manifest["num_sequences"])

    def __getitem__(self, i: int) -> VideoSample:
        if not 0 <= i < len(self):
            raise IndexError(i)
        s = read_sequence(self.root / f"seq_{i:04d}", self.frames, self.num_classes)
        if s.semantic_maps.shape[1:] != (self.size[1], self.size[0]):
            raise ValidationError(f"sequence {i}: size disagrees with manifest")
        return s

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def read_dataset(directory) -> SceneDataset:
    root = Path(directory)
    path = root / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"missing dataset manifest: {path}") from None
    except json.JSONDecodeError as exc:
        raise OSError(f"corrupt dataset manifest: {path} ({exc})") from None
    for key in ("num_classes", "frames", "width", "height", "num_sequences"):
        if key not in manifest:
            raise ValidationError(f"{path}: manifest lacks {key!r}")
    if len(manifest.get("palette", [])) not in (0, manifest["num_classes"]):
        raise ValidationError(f"{path}: palette length disagrees with num_classes")
    for i in range(int(manifest["num_sequences"])):
        if not (root / f"seq_{i:04d}").is_dir():
            raise FileNotFoundError(f"missing sequence directory: {root / f'seq_{i:04d}'}")
    return SceneDataset(root, manifest)


def spec_to_dict(spec: SceneSpec) -> dict:
    return asdict(spec)


def spec_from_dict(d: dict) -> SceneSpec:
    shapes = tuple(ShapeSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in s.items()})
                   for s in d["shapes"])
    rest = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k != "shapes"}
    return SceneSpec(shapes=shapes, **rest)


def atomic_replace_dir(tmp: Path, final: Path) -> None:
    """Move a fully written temp directory into place."""
    final = Path(final)
    if final.exists():
        backup = final.with_name(final.name + ".old")
        os.replace(final, backup)
        os.replace(tmp, final)
        shutil.rmtree(backup)
    else:
        os.replace(tmp, final)
