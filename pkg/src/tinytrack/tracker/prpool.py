"""Region pooling by dense bilinear sampling, differentiable in features and box coordinates."""
from __future__ import annotations

import torch
import torch.nn.functional as F

SAMPLES_PER_BIN = 4


def prpool(feat: torch.Tensor, boxes: torch.Tensor, bins: int | tuple[int, int] = 3,
           samples: int = SAMPLES_PER_BIN) -> torch.Tensor:
    """Pool ``feat`` (B, C, H, W) over ``boxes`` (B, K, 4) given as x, y, w, h in cell units.

    Cell (i, j) covers [j, j+1] x [i, i+1]; its value sits at the cell center.
    Each bin is the mean of a ``samples x samples`` grid of bilinear samples
    placed at the sub-bin centers. Outside the map the features are zero.
    Returns (B, K, C, n_h, n_w).
    """
    if isinstance(bins, int):
        bins = (bins, bins)
    nh, nw = bins
    if feat.dim() != 4 or boxes.dim() != 3 or boxes.shape[-1] != 4:
        raise ValueError(f"bad shapes feat={tuple(feat.shape)} boxes={tuple(boxes.shape)}")
    if boxes.shape[0] != feat.shape[0]:
        raise ValueError("feature and box batch sizes differ")
    if bool((boxes[..., 2] <= 0).any()) or bool((boxes[..., 3] <= 0).any()):
        raise ValueError("boxes must have positive area")
    B, C, H, W = feat.shape
    K = boxes.shape[1]
    dtype = feat.dtype

    # relative sample positions inside the box, in [0, 1]
    ry = (torch.arange(nh * samples, dtype=dtype, device=feat.device) + 0.5) / (nh * samples)
    rx = (torch.arange(nw * samples, dtype=dtype, device=feat.device) + 0.5) / (nw * samples)
    x0, y0, bw, bh = boxes.to(dtype).unbind(-1)
    px = x0[..., None] + bw[..., None] * rx          # (B, K, nw*s)
    py = y0[..., None] + bh[..., None] * ry          # (B, K, nh*s)
    gx = 2.0 * px / W - 1.0
    gy = 2.0 * py / H - 1.0
    grid = torch.stack(torch.broadcast_tensors(gx[:, :, None, :], gy[:, :, :, None]), dim=-1)
    grid = grid.reshape(B, K * nh * samples, nw * samples, 2)
    sampled = F.grid_sample(feat, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    sampled = sampled.reshape(B, C, K, nh, samples, nw, samples).mean(dim=(4, 6))
    return sampled.permute(0, 2, 1, 3, 4)


def image_to_cells(boxes: torch.Tensor, stride: float) -> torch.Tensor:
    return boxes / stride
