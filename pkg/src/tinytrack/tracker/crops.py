"""Square search-region crops resized to the network input, and the box mappings between frames."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F


def image_to_tensor(image: np.ndarray | torch.Tensor) -> torch.Tensor:
    """HxWx3 uint8 -> (3, H, W) float network input range (pixel / 255 - 0.5)."""
    if isinstance(image, torch.Tensor):
        return image
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return torch.from_numpy(arr.astype(np.float32) / 255.0 - 0.5).permute(2, 0, 1)


def crop_and_resize(image: torch.Tensor, center: tuple[float, float], side: float, out_size: int) -> torch.Tensor:
    """Bilinear crop of a ``side`` x ``side`` square around ``center``; borders are replicated.

    ``image`` is (3, H, W); returns (3, out_size, out_size).
    """
    _, H, W = image.shape
    cx, cy = center
    coords = (torch.arange(out_size, dtype=torch.float32) + 0.5) * (side / out_size)
    xs = cx - side / 2 + coords
    ys = cy - side / 2 + coords
    gx = 2 * xs / W - 1
    gy = 2 * ys / H - 1
    grid = torch.stack(torch.meshgrid(gy, gx, indexing="ij")[::-1], dim=-1)[None]
    out = F.grid_sample(image[None].float(), grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out[0]


def box_to_crop(box, center: tuple[float, float], side: float, out_size: int) -> np.ndarray:
    x, y, w, h = box
    scale = out_size / side
    x0, y0 = center[0] - side / 2, center[1] - side / 2
    return np.array([(x - x0) * scale, (y - y0) * scale, w * scale, h * scale])


def box_from_crop(box, center: tuple[float, float], side: float, out_size: int) -> np.ndarray:
    x, y, w, h = box
    scale = side / out_size
    x0, y0 = center[0] - side / 2, center[1] - side / 2
    return np.array([x0 + x * scale, y0 + y * scale, w * scale, h * scale])


def search_side(w: float, h: float, search_scale: float) -> float:
    return search_scale * math.sqrt(max(w, 1e-6) * max(h, 1e-6))


def gaussian_blur(image: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur of a (C, H, W) tensor."""
    radius = max(1, int(math.ceil(3 * sigma)))
    t = torch.arange(-radius, radius + 1, dtype=image.dtype)
    k = torch.exp(-t ** 2 / (2 * sigma ** 2))
    k = k / k.sum()
    c = image.shape[0]
    x = image[None]
    x = F.conv2d(F.pad(x, (radius, radius, 0, 0), mode="replicate"), k.reshape(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    x = F.conv2d(F.pad(x, (0, 0, radius, radius), mode="replicate"), k.reshape(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)
    return x[0]
