"""Toy tracking network: backbone, target-model classifier and box regression head."""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import iou_head as ih
from .prpool import prpool
from .target_model import (LABEL_SIGMA, SampleMemory, apply_filter, classification_loss, gaussian_label,
                           optimize_target_model, target_mask)


@dataclass(frozen=True)
class NetConfig:
    input_size: int = 352
    channels: int = 16
    blocks: int = 4
    cls_channels: int = 16
    filter_size: int = 3
    iou_channels: int = 16
    iou_hidden: int = 64
    n_iter: int = 5
    init_lambda: float = 0.1
    label_sigma: float = LABEL_SIGMA
    kl_points: int = ih.GRID_POINTS
    kl_extent: float = ih.GRID_RANGE
    kl_label_sigma: float = ih.LABEL_SIGMA
    roi_bins: int = ih.ROI_BINS

    def __post_init__(self):
        if not 3 <= self.blocks <= 4:
            raise ValueError("backbone has 3 or 4 blocks")
        if not 16 <= self.channels <= 64:
            raise ValueError("backbone channels must be within [16, 64]")
        if self.input_size % self.stride:
            raise ValueError(f"input_size must be a multiple of the stride {self.stride}")
        if self.filter_size % 2 == 0:
            raise ValueError("filter_size must be odd")

    @property
    def stride(self) -> int:
        return 16

    @property
    def feature_size(self) -> int:
        return self.input_size // self.stride

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeatureMap:
    values: torch.Tensor  # (B, C, H, W)
    stride: int

    def __post_init__(self):
        if self.stride <= 0:
            raise ValueError("stride must be positive")


class Backbone(nn.Module):
    """Plain conv stack with total stride 16; the last block is the trainable tail."""

    def __init__(self, channels: int = 16, blocks: int = 4):
        super().__init__()
        layers = []
        in_ch = 3
        # 3 blocks: 3x3 s2, 3x3 s2, 5x5 s4
        strides = [2, 2, 2, 2] if blocks == 4 else [2, 2, 4]
        for i, s in enumerate(strides):
            k = 3 if s == 2 else 5
            layers.append(nn.Conv2d(in_ch, channels, k, stride=s, padding=k // 2))
            in_ch = channels
        self.blocks = nn.ModuleList(layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, conv in enumerate(self.blocks):
            x = conv(x)
            if i < len(self.blocks) - 1:
                x = F.relu(x)
        return x


def _instance_norm(x: torch.Tensor) -> torch.Tensor:
    # unit mean energy per sample, keeps the target-model problem well scaled
    energy = (x ** 2).mean(dim=(-3, -2, -1), keepdim=True)
    return x / torch.sqrt(energy + 1e-5)


class TrackerNet(nn.Module):
    def __init__(self, config: NetConfig = NetConfig()):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config.channels, config.blocks)
        self.cls_feat = nn.Conv2d(config.channels, config.cls_channels, 3, padding=1)
        self.filter_init_scale = nn.Parameter(torch.tensor(0.1))
        self.log_lambda = nn.Parameter(torch.tensor(math.log(config.init_lambda)))
        self.iou_head = ih.IoUHead(config.channels, config.iou_channels, config.iou_hidden, config.roi_bins)

    # parameter groups with distinct learning rates
    def classifier_parameters(self):
        return [*self.cls_feat.parameters(), self.filter_init_scale, self.log_lambda]

    def box_parameters(self):
        return list(self.iou_head.parameters())

    def backbone_tail_parameters(self):
        return list(self.backbone.blocks[-1].parameters())

    @property
    def lam(self) -> torch.Tensor:
        return torch.exp(self.log_lambda)

    def extract_features(self, image: torch.Tensor) -> FeatureMap:
        if image.dim() == 3:
            image = image[None]
        s = self.config.input_size
        if image.dim() != 4 or image.shape[1] != 3 or tuple(image.shape[-2:]) != (s, s):
            raise ValueError(f"expected (B, 3, {s}, {s}) input, got {tuple(image.shape)}")
        return FeatureMap(self.backbone(image), self.config.stride)

    def classification_features(self, feat: torch.Tensor) -> torch.Tensor:
        return _instance_norm(self.cls_feat(feat))

    def initial_filter(self, cls_x: torch.Tensor, boxes_cells: torch.Tensor) -> torch.Tensor:
        """Mean ROI-pooled features of the training samples: (B, N, C, H, W), (B, N, 4) -> (B, C, k, k)."""
        B, N = cls_x.shape[:2]
        k = self.config.filter_size
        pooled = prpool(cls_x.flatten(0, 1), boxes_cells.flatten(0, 1)[:, None], k)[:, 0]
        return self.filter_init_scale * pooled.reshape(B, N, *pooled.shape[1:]).mean(dim=1) / (k * k)

    def labels_for(self, boxes_cells: torch.Tensor) -> torch.Tensor:
        centers = boxes_cells[..., :2] + boxes_cells[..., 2:] / 2
        fs = self.config.feature_size
        return gaussian_label(centers, (fs, fs), self.config.label_sigma)

    def forward_train(self, train_imgs: torch.Tensor, train_boxes: torch.Tensor, test_imgs: torch.Tensor,
                      test_boxes: torch.Tensor) -> dict:
        """Baseline losses and distillation signals on one batch.

        Images are (B, N, 3, S, S) network inputs, boxes (B, N, 4) in crop pixels.
        """
        cfg = self.config
        B, Ntr = train_imgs.shape[:2]
        Nte = test_imgs.shape[1]
        stride = cfg.stride
        feats = self.backbone(torch.cat([train_imgs.flatten(0, 1), test_imgs.flatten(0, 1)]))
        tr_feat = feats[: B * Ntr]
        te_feat = feats[B * Ntr:]
        tr_cells = train_boxes / stride
        te_cells = test_boxes / stride

        cls = self.classification_features(feats)
        tr_x = cls[: B * Ntr].reshape(B, Ntr, *cls.shape[1:])
        te_x = cls[B * Ntr:].reshape(B, Nte, *cls.shape[1:])
        tr_labels = self.labels_for(tr_cells)
        te_labels = self.labels_for(te_cells)

        f0 = self.initial_filter(tr_x, tr_cells)
        memory = SampleMemory(tr_x, tr_labels)
        iterates, _ = optimize_target_model(f0, memory, cfg.n_iter, lam=self.lam, differentiable=True, check=False)
        loss_cls = classification_loss(iterates, te_x, te_labels, target_mask(te_labels))
        final_scores = apply_filter(te_x, iterates[-1])

        # box regression: modulation from the first training frame of each sequence
        iou_tr = self.iou_head.features(tr_feat).reshape(B, Ntr, -1, *tr_feat.shape[-2:])
        iou_te = self.iou_head.features(te_feat)
        mod = self.iou_head.modulation(iou_tr[:, 0], tr_cells[:, 0])
        mod = mod.repeat_interleave(Nte, dim=0)
        loss_iou, iou_scores = ih.kl_regression_loss(
            self.iou_head, iou_te, te_cells.flatten(0, 1), mod, cfg.kl_label_sigma, cfg.kl_points, cfg.kl_extent)

        rois = prpool(te_feat, te_cells.flatten(0, 1)[:, None], cfg.roi_bins)[:, 0]
        return {
            "loss_cls": loss_cls,
            "loss_iou": loss_iou,
            "rois": rois,
            "scores": final_scores.flatten(0, 1),
            "iou_scores": iou_scores.flatten(),
        }


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
