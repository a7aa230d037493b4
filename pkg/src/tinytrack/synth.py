"""Deterministic synthetic sequences of small moving sprites.

Sprites are axis-aligned textured squares rendered with exact area coverage,
so the coverage mask of the target has its centroid at the annotated box
center (up to clipping at the image border). Attribute flags are derived from
what was actually rendered.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import AttributeVector, SequenceRecord, write_sequence

MOTIONS = ("linear", "abrupt", "fast")
FPS = 30

# flag thresholds on the illumination multiplier reached at the last frame
IV_DROP = 0.8
LI_DROP = 0.5


@dataclass(frozen=True)
class SynthConfig:
    image_size: tuple[int, int] = (640, 480)
    object_size: float = 16.0
    motion: str = "linear"
    speed: float = 2.0
    blur_strength: int = 0
    occluder: tuple[int, int] | None = None
    occluder_fraction: float = 1.0
    distractor_count: int = 0
    illumination_drop: float = 1.0
    frames: int = 60
    seed: int = 0
    scale_rate: float = 1.0
    camera_jitter: float = 0.0
    clutter: int = 0
    class_label: str = "sprite"

    def __post_init__(self):
        w, h = self.image_size
        if w < 8 or h < 8:
            raise ValueError("image too small")
        if self.object_size < 2:
            raise ValueError("object_size must be >= 2")
        if self.object_size > min(w, h) / 2:
            raise ValueError("object_size must be at most half the smaller image side")
        if self.frames < 2:
            raise ValueError("frames must be >= 2")
        if self.motion not in MOTIONS:
            raise ValueError(f"motion must be one of {MOTIONS}")
        if self.speed < 0:
            raise ValueError("speed must be non-negative")
        if self.blur_strength < 0:
            raise ValueError("blur_strength must be non-negative")
        if not 0 < self.illumination_drop <= 1:
            raise ValueError("illumination_drop must be in (0, 1]")
        if self.occluder is not None:
            period, duration = self.occluder
            if period <= 0 or not 0 < duration < period:
                raise ValueError("occluder needs 0 < duration < period")
        if not 0 < self.occluder_fraction <= 1:
            raise ValueError("occluder_fraction must be in (0, 1]")
        if self.distractor_count < 0 or self.clutter < 0:
            raise ValueError("counts must be non-negative")
        if self.scale_rate <= 0:
            raise ValueError("scale_rate must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for key in ("image_size", "occluder"):
            if d.get(key) is not None:
                d[key] = tuple(int(v) for v in d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# -- drawing helpers ------------------------------------------------------------


def value_noise(h: int, w: int, rng: np.random.Generator, octaves: int = 4, base: int = 64) -> np.ndarray:
    """Fractal value noise in [0, 1], shape (h, w)."""
    out = torch.zeros(1, 1, h, w, dtype=torch.float64)
    amp, total = 1.0, 0.0
    cell = base
    for _ in range(octaves):
        gh, gw = max(2, h // cell + 2), max(2, w // cell + 2)
        grid = torch.from_numpy(rng.random((1, 1, gh, gw)))
        up = F.interpolate(grid, size=(gh * cell, gw * cell), mode="bicubic", align_corners=True)
        out += amp * up[..., :h, :w]
        total += amp
        amp *= 0.5
        cell = max(1, cell // 2)
    out = out[0, 0].numpy() / total
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo + 1e-12)


def coverage_1d(lo: float, hi: float, n: int) -> np.ndarray:
    """Length of [lo, hi] overlapping each unit pixel [i, i+1], i < n."""
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(edges + 1, hi) - np.maximum(edges, lo), 0.0, 1.0)


@dataclass
class _Sprite:
    colors: tuple[np.ndarray, np.ndarray]


def _render_square(canvas: np.ndarray, alpha_acc: np.ndarray | None, cx: float, cy: float, side: float,
                   sprite: _Sprite, blur_dir: tuple[float, float] = (0.0, 0.0), blur: int = 0) -> None:
    """Composite a checker-textured square onto ``canvas`` in place."""
    h, w = canvas.shape[:2]
    offsets = range(-blur, blur + 1) if blur > 0 else [0]
    reach = side / 2 + blur + 2
    x0, x1 = max(0, int(math.floor(cx - reach))), min(w, int(math.ceil(cx + reach)))
    y0, y1 = max(0, int(math.floor(cy - reach))), min(h, int(math.ceil(cy + reach)))
    if x0 >= x1 or y0 >= y1:
        return
    alpha = np.zeros((y1 - y0, x1 - x0))
    premult = np.zeros((y1 - y0, x1 - x0, 3))
    px = np.arange(x0, x1) + 0.5
    py = np.arange(y0, y1) + 0.5
    for k in offsets:
        ccx, ccy = cx + k * blur_dir[0], cy + k * blur_dir[1]
        lx, ly = ccx - side / 2, ccy - side / 2
        ax = coverage_1d(lx - x0, lx - x0 + side, x1 - x0)
        ay = coverage_1d(ly - y0, ly - y0 + side, y1 - y0)
        a = np.outer(ay, ax)
        u = np.floor(2 * (px - lx) / side).astype(int)
        v = np.floor(2 * (py - ly) / side).astype(int)
        checker = ((v[:, None] + u[None, :]) % 2).astype(bool)
        color = np.where(checker[..., None], sprite.colors[0], sprite.colors[1])
        alpha += a
        premult += a[..., None] * color
    n = len(offsets)
    alpha /= n
    premult /= n
    region = canvas[y0:y1, x0:x1]
    region[:] = region * (1 - alpha[..., None]) + premult
    if alpha_acc is not None:
        alpha_acc[y0:y1, x0:x1] += alpha


def _bounce(pos: np.ndarray, vel: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pos = pos + vel
    for i in range(2):
        if pos[i] < lo[i]:
            pos[i] = 2 * lo[i] - pos[i]
            vel[i] = -vel[i]
        elif pos[i] > hi[i]:
            pos[i] = 2 * hi[i] - pos[i]
            vel[i] = -vel[i]
        pos[i] = min(max(pos[i], lo[i]), hi[i])
    return pos, vel


def _unit(angle: float) -> np.ndarray:
    return np.array([math.cos(angle), math.sin(angle)])


# -- generation -----------------------------------------------------------------------


@dataclass
class SyntheticSequence:
    frames: np.ndarray
    record: SequenceRecord
    target_alpha: np.ndarray | None = field(repr=False)
    occluded: np.ndarray = field(repr=False)
    centers: np.ndarray = field(repr=False)


def _render(config: SynthConfig, name: str, keep_alpha: bool = False) -> SyntheticSequence:
    rng = np.random.default_rng(config.seed)
    W, H = config.image_size
    T = config.frames
    pad = int(math.ceil(config.camera_jitter * 4)) + 1

    # background, fixed per sequence, scrolled by the camera
    noise = value_noise(H + 2 * pad, W + 2 * pad, rng)
    tint_a, tint_b = rng.uniform(0.15, 0.55, 3), rng.uniform(0.25, 0.7, 3)
    background = noise[..., None] * tint_a + (1 - noise[..., None]) * tint_b

    hue = rng.uniform(0.0, 1.0, 3)
    target = _Sprite((np.clip(0.55 + 0.45 * hue, 0, 1), np.clip(0.1 * hue, 0, 1)))

    for _ in range(config.clutter):
        bx, by = rng.uniform(0, W + 2 * pad), rng.uniform(0, H + 2 * pad)
        side = config.object_size * rng.uniform(0.6, 1.6)
        blob = _Sprite((target.colors[0] * rng.uniform(0.7, 1.0), target.colors[1]))
        _render_square(background, None, bx, by, side, blob)

    # target trajectory
    sides = np.array([config.object_size * config.scale_rate ** t for t in range(T)])
    sides = np.clip(sides, 2.0, min(W, H) / 2)
    lo, hi = np.array([0.0, 0.0]), np.array([W, H], dtype=np.float64)
    margin = sides[0] / 2 + 1
    pos = np.array([rng.uniform(margin, W - margin), rng.uniform(margin, H - margin)])
    angle = rng.uniform(0, 2 * math.pi)
    vel = config.speed * _unit(angle)
    centers = np.zeros((T, 2))
    velocities = np.zeros((T, 2))
    turns = 0
    for t in range(T):
        if t > 0:
            if config.motion == "abrupt" and rng.random() < 0.15:
                angle = angle + rng.uniform(0.5 * math.pi, 1.5 * math.pi)
                vel = config.speed * rng.uniform(1.0, 2.0) * _unit(angle)
                turns += 1
            pos, vel = _bounce(pos, vel, lo, hi)
        centers[t] = pos
        velocities[t] = vel

    # camera: smooth random walk in integer pixels
    cam = np.zeros((T, 2), dtype=int)
    if config.camera_jitter > 0:
        walk = np.cumsum(rng.normal(0, config.camera_jitter, (T, 2)), axis=0)
        cam = np.clip(np.rint(walk), -pad + 1, pad - 1).astype(int)
        cam[0] = 0
        centers = centers - cam
        centers[:, 0] = np.clip(centers[:, 0], 0, W)
        centers[:, 1] = np.clip(centers[:, 1], 0, H)

    distractors = []
    for _ in range(config.distractor_count):
        dpos = np.array([rng.uniform(margin, W - margin), rng.uniform(margin, H - margin)])
        dvel = max(config.speed, 1.0) * _unit(rng.uniform(0, 2 * math.pi))
        dside = config.object_size * rng.uniform(0.85, 1.15)
        distractors.append([dpos, dvel, dside])

    occluded = np.zeros(T, dtype=bool)
    if config.occluder is not None:
        period, duration = config.occluder
        occluded = np.array([t % period >= period - duration for t in range(T)])

    frames = np.zeros((T, H, W, 3), dtype=np.uint8)
    alphas = np.zeros((T, H, W), dtype=np.float32) if keep_alpha else None
    boxes = np.zeros((T, 4))
    occ_color = np.array([0.5, 0.5, 0.5])
    for t in range(T):
        ox, oy = pad + cam[t, 0], pad + cam[t, 1]
        canvas = background[oy:oy + H, ox:ox + W].copy()
        for d in distractors:
            if t > 0:
                d[0], d[1] = _bounce(d[0], d[1], lo, hi)
            _render_square(canvas, None, d[0][0], d[0][1], d[2], target)
        cx, cy = centers[t]
        side = sides[t]
        speed = float(np.hypot(*velocities[t]))
        direction = tuple(velocities[t] / speed) if speed > 0 else (1.0, 0.0)
        blur = config.blur_strength if speed > 0 else 0
        _render_square(canvas, alphas[t] if keep_alpha else None, cx, cy, side, target, direction, blur)
        if occluded[t]:
            ow = side * config.occluder_fraction
            x0 = int(math.floor(cx - side / 2 - 1))
            x1 = int(math.ceil(cx - side / 2 + ow + (1 if config.occluder_fraction >= 1 else 0)))
            y0 = int(math.floor(cy - side / 2 - 1 - blur))
            y1 = int(math.ceil(cy + side / 2 + 1 + blur))
            if config.occluder_fraction >= 1:
                x0 -= blur
                x1 += blur
            canvas[max(0, y0):max(0, y1), max(0, x0):max(0, x1)] = occ_color
        gain = 1.0 + (config.illumination_drop - 1.0) * t / (T - 1)
        frames[t] = np.clip(np.rint(canvas * gain * 255), 0, 255).astype(np.uint8)

        bx0, by0 = max(0.0, cx - side / 2), max(0.0, cy - side / 2)
        bx1, by1 = min(float(W), cx + side / 2), min(float(H), cy + side / 2)
        boxes[t] = (bx0, by0, bx1 - bx0, by1 - by0)

    areas = boxes[:, 2] * boxes[:, 3]
    sv = any(not 0.5 <= areas[t + FPS] / areas[t] <= 2.0 for t in range(T - FPS))
    disp = np.hypot(*np.diff(boxes[:, :2] + boxes[:, 2:] / 2, axis=0).T) if T > 1 else np.zeros(0)
    box_size = np.sqrt(areas[1:])
    clipped = np.any(np.abs(boxes[:, 2:] - sides[:, None]) > 1e-9)
    attrs = AttributeVector(
        SV=bool(sv),
        FM=bool(np.any(disp > box_size)),
        OV=bool(clipped),
        IV=config.illumination_drop <= IV_DROP,
        CM=config.camera_jitter > 0,
        MB=config.blur_strength > 0 and config.speed > 0,
        BC=config.clutter > 0,
        SO=config.distractor_count > 0,
        PO=bool(occluded.any()) and config.occluder_fraction < 1,
        FO=bool(occluded.any()) and config.occluder_fraction >= 1,
        AM=turns > 0,
        LI=config.illumination_drop <= LI_DROP,
    )
    record = SequenceRecord.from_boxes(name, np.round(boxes, 2), (W, H), config.class_label, attrs,
                                       frame_source=lambda i, _f=frames: _f[i])
    return SyntheticSequence(frames, record, alphas, occluded, centers)


def generate_sequence(config: SynthConfig, name: str | None = None) -> tuple[np.ndarray, SequenceRecord]:
    """Render ``config`` into a (T, H, W, 3) uint8 stack and its annotated record."""
    seq = _render(config, name or f"synth_{config.seed:04d}")
    return seq.frames, seq.record


def render_sequence(config: SynthConfig, name: str | None = None) -> SyntheticSequence:
    """Like generate_sequence, also returning the target coverage masks."""
    return _render(config, name or f"synth_{config.seed:04d}", keep_alpha=True)


# -- presets ------------------------------------------------------------------------------


def random_config(rng: np.random.Generator, tiny: bool, frames: int, image_size=(320, 240),
                  seed: int = 0) -> SynthConfig:
    """Draw a config with a random mix of challenge attributes."""
    size = float(rng.uniform(10, 18)) if tiny else float(rng.uniform(28, 56))
    motion = str(rng.choice(MOTIONS, p=[0.6, 0.2, 0.2]))
    speed = float(rng.uniform(0.5, 3.0)) * (size / 16 if not tiny else 1.0)
    if motion == "fast":
        speed = size * float(rng.uniform(0.4, 0.9))
    return SynthConfig(
        image_size=tuple(image_size),
        object_size=round(size, 2),
        motion=motion,
        speed=round(speed, 2),
        blur_strength=int(rng.random() < 0.25) * int(rng.integers(1, 3)),
        occluder=(int(rng.integers(20, 40)), int(rng.integers(2, 5))) if rng.random() < 0.15 else None,
        occluder_fraction=1.0 if rng.random() < 0.5 else 0.5,
        distractor_count=int(rng.integers(1, 3)) if rng.random() < 0.25 else 0,
        illumination_drop=float(rng.choice([1.0, 0.75, 0.45], p=[0.7, 0.2, 0.1])),
        frames=frames,
        seed=seed,
        scale_rate=float(rng.choice([1.0, 1.015, 0.985], p=[0.8, 0.1, 0.1])),
        camera_jitter=float(rng.choice([0.0, 0.5], p=[0.85, 0.15])),
        clutter=int(rng.integers(3, 8)) if rng.random() < 0.2 else 0,
        class_label=str(rng.choice(["drone", "bird", "ball", "car", "person"])),
    )


def preset_configs(count: int, seed: int, tiny: bool, frames: int = 60,
                   image_size=(320, 240)) -> list[SynthConfig]:
    rng = np.random.default_rng(seed)
    return [random_config(rng, tiny, frames, image_size, seed=seed * 1000 + i) for i in range(count)]


def iter_preset(count: int, seed: int, tiny: bool, prefix: str, **kw) -> Iterator[SyntheticSequence]:
    for i, cfg in enumerate(preset_configs(count, seed, tiny, **kw)):
        yield render_sequence(cfg, f"{prefix}{i:03d}")


def write_dataset(root: str | Path, configs: list[SynthConfig], prefix: str = "seq") -> list[Path]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, cfg in enumerate(configs):
        frames, record = generate_sequence(cfg, f"{prefix}{i:03d}")
        paths.append(write_sequence(root, record, frames))
    return paths

