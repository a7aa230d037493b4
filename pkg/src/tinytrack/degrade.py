"""Low-resolution simulation for student inputs.

A batch's boxes fix a factor ``d = max(1, mean(sqrt(w*h)) / scale_divisor)``;
each crop is downsampled by ``1/d`` (bicubic) and brought back to the fixed
network input size with nearest or bilinear resampling picked at random.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import BoundingBox

UPSAMPLERS = ("nearest", "bilinear")


@dataclass(frozen=True)
class DegradeSpec:
    scale_divisor: float = 16.0
    network_input_size: int = 352
    seed: int = 0

    def __post_init__(self):
        if not self.scale_divisor > 0:
            raise ValueError("scale_divisor must be positive")
        if self.network_input_size <= 0:
            raise ValueError("network_input_size must be positive")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def _box_array(boxes) -> np.ndarray:
    if isinstance(boxes, torch.Tensor):
        return boxes.detach().cpu().double().numpy().reshape(-1, 4)
    rows = [b.as_list() if isinstance(b, BoundingBox) else list(b) for b in boxes]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def batch_scale_factor(gt_boxes: Iterable[BoundingBox] | Sequence[Sequence[float]] | torch.Tensor,
                       spec: DegradeSpec = DegradeSpec()) -> float:
    """Degradation factor for a batch; never below 1."""
    b = _box_array(gt_boxes)
    if len(b) == 0:
        raise ValueError("need at least one box")
    avg_side = float(np.mean(np.sqrt(b[:, 2] * b[:, 3])))
    return max(1.0, avg_side / spec.scale_divisor)


def degrade_tensor(images: torch.Tensor, d: float, spec: DegradeSpec = DegradeSpec(),
                   rng: np.random.Generator | None = None, mode: str | None = None) -> torch.Tensor:
    """Degrade a float (B, C, H, W) batch; one upsampler choice per call."""
    if d < 1:
        raise ValueError(f"degradation factor must be >= 1, got {d}")
    if images.dim() != 4:
        raise ValueError("expected a (B, C, H, W) tensor")
    h, w = images.shape[-2:]
    if h <= 0 or w <= 0:
        raise ValueError("image dimensions must be positive")
    if mode is None:
        rng = spec.rng() if rng is None else rng
        mode = UPSAMPLERS[int(rng.integers(2))]
    elif mode not in UPSAMPLERS:
        raise ValueError(f"unknown upsampler {mode!r}")

    x = images
    if d > 1:
        small = (max(1, int(round(h / d))), max(1, int(round(w / d))))
        x = F.interpolate(x, size=small, mode="bicubic", align_corners=False, antialias=True)
    size = (spec.network_input_size, spec.network_input_size)
    if mode == "nearest":
        return F.interpolate(x, size=size, mode="nearest")
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def degrade_image(image: np.ndarray, d: float, spec: DegradeSpec = DegradeSpec(),
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Degrade an HxW or HxWxC array; uint8 inputs are returned as uint8."""
    arr = np.asarray(image)
    if arr.ndim not in (2, 3) or arr.shape[0] <= 0 or arr.shape[1] <= 0:
        raise ValueError(f"bad image shape {arr.shape}")
    is_uint8 = arr.dtype == np.uint8
    x = torch.from_numpy(arr.astype(np.float64))
    x = x[None, None] if arr.ndim == 2 else x.permute(2, 0, 1)[None]
    y = degrade_tensor(x, d, spec, rng)[0]
    out = y[0].numpy() if arr.ndim == 2 else y.permute(1, 2, 0).numpy()
    if is_uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out


def laplacian_energy(image: np.ndarray) -> float:
    """Mean absolute 4-neighbour Laplacian over the interior."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 3:
        a = a.mean(axis=2)
    lap = 4 * a[1:-1, 1:-1] - a[:-2, 1:-1] - a[2:, 1:-1] - a[1:-1, :-2] - a[1:-1, 2:]
    return float(np.mean(np.abs(lap)))

