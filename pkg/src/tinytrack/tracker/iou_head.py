"""Probabilistic box regression head.

A reference ROI (first frame) produces a modulation vector; a candidate box
``y`` on a test feature map gets a confidence ``s(y, x)``. The confidences
define a density over boxes by a continuous softmax, approximated on a
uniform grid of box offsets ``u = (dcx / w, dcy / h, dlog w, dlog h)``
around a reference box.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .prpool import prpool

GRID_POINTS = 7
GRID_RANGE = 0.45
LABEL_SIGMA = 0.15
ROI_BINS = 3


class IoUHead(nn.Module):
    def __init__(self, in_channels: int, channels: int = 16, hidden: int = 64, bins: int = ROI_BINS):
        super().__init__()
        self.bins = bins
        self.feat = nn.Conv2d(in_channels, channels, 3, padding=1)
        flat = channels * bins * bins
        self.ref_fc = nn.Linear(flat, hidden)
        self.test_fc = nn.Linear(flat, hidden)
        self.fc1 = nn.Linear(hidden, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def features(self, backbone_feat: torch.Tensor) -> torch.Tensor:
        return F.relu(self.feat(backbone_feat))

    def modulation(self, ref_feat: torch.Tensor, ref_boxes: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) features and (B, 4) boxes in cell units -> (B, hidden)."""
        roi = prpool(ref_feat, ref_boxes[:, None], self.bins)[:, 0]
        return torch.sigmoid(self.ref_fc(roi.flatten(1)))

    def score(self, test_feat: torch.Tensor, boxes: torch.Tensor, modulation: torch.Tensor) -> torch.Tensor:
        """Confidence for each candidate: features (B, C, H, W), boxes (B, K, 4) cells -> (B, K)."""
        roi = prpool(test_feat, boxes, self.bins)
        h = F.relu(self.test_fc(roi.flatten(2)))
        h = h * modulation[:, None, :]
        h = F.relu(self.fc1(h))
        return self.fc2(h)[..., 0]


# -- box grids ---------------------------------------------------------------------


def offset_grid(points: int = GRID_POINTS, extent: float = GRID_RANGE, dtype=torch.float32) -> tuple[torch.Tensor, float]:
    """All ``points**4`` offsets on a uniform grid over [-extent, extent]^4 and the cell volume."""
    if points < 2:
        raise ValueError("need at least 2 grid points per dimension")
    axis = torch.linspace(-extent, extent, points, dtype=dtype)
    grid = torch.stack(torch.meshgrid(axis, axis, axis, axis, indexing="ij"), dim=-1).reshape(-1, 4)
    spacing = 2 * extent / (points - 1)
    return grid, spacing ** 4


def apply_offsets(boxes: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
    """Boxes (..., 4) x, y, w, h and offsets (..., K, 4) -> candidate boxes (..., K, 4)."""
    x, y, w, h = boxes[..., None, :].unbind(-1)
    cx = x + w / 2 + offsets[..., 0] * w
    cy = y + h / 2 + offsets[..., 1] * h
    nw = w * torch.exp(offsets[..., 2])
    nh = h * torch.exp(offsets[..., 3])
    return torch.stack([cx - nw / 2, cy - nh / 2, nw, nh], dim=-1)


def gaussian_grid_density(offsets: torch.Tensor, cell_volume: float, sigma: float = LABEL_SIGMA) -> torch.Tensor:
    """Label density p(y | y_gt): isotropic Gaussian in offset space, normalized on the grid."""
    if not sigma > 0 or not math.isfinite(sigma):
        raise ValueError(f"label sigma must be positive and finite, got {sigma}")
    logp = -(offsets ** 2).sum(-1) / (2 * sigma ** 2)
    p = torch.softmax(logp, dim=-1) / cell_volume
    if not bool(torch.isfinite(p).all()):
        raise ValueError("degenerate label distribution")
    return p


# -- density and loss --------------------------------------------------------------------


def density_from_scores(scores: torch.Tensor, cell_volume: float) -> torch.Tensor:
    """exp(s) / Z with Z the grid sum of exp(s) * cell volume, along the last dim."""
    if not bool(torch.isfinite(scores).all()):
        raise ValueError("non-finite scores")
    shifted = scores - scores.max(dim=-1, keepdim=True).values
    e = torch.exp(shifted)
    return e / (e.sum(dim=-1, keepdim=True) * cell_volume)


def predictive_density(head: IoUHead, test_feat: torch.Tensor, y_grid: torch.Tensor, modulation: torch.Tensor,
                       cell_volume: float) -> torch.Tensor:
    return density_from_scores(head.score(test_feat, y_grid, modulation), cell_volume)


def kl_from_scores(scores: torch.Tensor, label_density: torch.Tensor, cell_volume: float) -> torch.Tensor:
    """``log(sum exp(s) dy) - sum s p dy`` per row: the KL divergence without the label entropy."""
    if not bool(torch.isfinite(scores).all()):
        raise ValueError("non-finite scores")
    log_z = torch.logsumexp(scores, dim=-1) + math.log(cell_volume)
    return log_z - (scores * label_density).sum(-1) * cell_volume


def label_entropy_term(label_density: torch.Tensor, cell_volume: float) -> torch.Tensor:
    """``sum p log p dy``; adding it to the loss above gives the full KL divergence."""
    p = label_density
    return torch.where(p > 0, p * torch.log(p), torch.zeros_like(p)).sum(-1) * cell_volume


def kl_regression_loss(head: IoUHead, test_feat: torch.Tensor, gt_boxes: torch.Tensor, modulation: torch.Tensor,
                       label_sigma: float = LABEL_SIGMA, points: int = GRID_POINTS, extent: float = GRID_RANGE
                       ) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean KL regression loss over a batch; gt boxes (B, 4) in cell units.

    Also returns the candidate scores (B, points**4) for distillation.
    """
    offsets, vol = offset_grid(points, extent, dtype=test_feat.dtype)
    offsets = offsets.to(test_feat.device)
    candidates = apply_offsets(gt_boxes, offsets.expand(gt_boxes.shape[0], -1, -1))
    scores = head.score(test_feat, candidates, modulation)
    p = gaussian_grid_density(offsets, vol, label_sigma).expand_as(scores)
    return kl_from_scores(scores, p, vol).mean(), scores


# -- refinement -----------------------------------------------------------------------


def refine_box(head: IoUHead, test_feat: torch.Tensor, box: torch.Tensor, modulation: torch.Tensor,
               steps: int = 10, step_size: float = 1.0, max_halvings: int = 8,
               max_offset: float = 1.0) -> tuple[torch.Tensor, list[float]]:
    """Gradient ascent on the head's confidence over box offsets, halving on decrease.

    ``box`` is (4,) in cell units; returns the refined box and the score after every step.
    """
    u = torch.zeros(4, dtype=test_feat.dtype, device=test_feat.device)

    def score_at(offset: torch.Tensor) -> torch.Tensor:
        cand = apply_offsets(box[None], offset[None, None])
        return head.score(test_feat, cand, modulation)[0, 0]

    with torch.enable_grad():
        uv = u.clone().requires_grad_(True)
        current = score_at(uv)
        (grad,) = torch.autograd.grad(current, uv)
    history = [float(current.detach())]
    lr = step_size
    for _ in range(steps):
        accepted = False
        for _ in range(max_halvings + 1):
            cand = (u + lr * grad).clamp(-max_offset, max_offset)
            with torch.enable_grad():
                cv = cand.clone().requires_grad_(True)
                s = score_at(cv)
                (g,) = torch.autograd.grad(s, cv)
            if float(s.detach()) >= history[-1]:
                u, grad, accepted = cand.detach(), g, True
                history.append(float(s.detach()))
                break
            lr *= 0.5
        if not accepted:
            history.append(history[-1])
    return apply_offsets(box[None], u[None, None])[0, 0].detach(), history
