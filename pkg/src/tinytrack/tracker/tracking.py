"""Online tracking: initial fit on augmented samples, per-frame localization, box refinement and model updates."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..dataset import BoundingBox, SequenceRecord
from ..metrics import TrackResult
from . import crops
from .iou_head import refine_box
from .network import TrackerNet
from .target_model import SampleMemory, TargetModel, apply_filter, optimize_target_model

UPDATE_SCHEDULED = "scheduled"
UPDATE_INTERFERENCE = "interference"


@dataclass(frozen=True)
class TrackerConfig:
    search_scale: float = 5.0
    n_iter: int = 5
    init_iter: int = 10
    update_interval: int = 20
    interference_ratio: float = 0.5
    interference_radius: float = 3.0
    detect_interference: bool = True
    memory_capacity: int = 50
    sample_lr: float = 0.01
    num_aug: int = 15
    aug_shift: float = 0.6
    refine_steps: int = 10
    refine_step_size: float = 1.0
    refine_halvings: int = 8
    refine_max_offset: float = 0.5
    num_candidates: int = 3
    candidate_jitter: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.update_interval < 1:
            raise ValueError("update_interval must be >= 1")
        if self.num_aug < 1:
            raise ValueError("need at least one initial sample")
        if self.num_candidates < 1:
            raise ValueError("need at least one candidate box")
        if self.search_scale <= 1:
            raise ValueError("search_scale must exceed 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrackerConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown tracker config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrackerState:
    target_model: TargetModel
    memory: SampleMemory
    modulation: torch.Tensor
    last_box: BoundingBox
    frames_since_update: int = 0
    frame_index: int = 0
    updates: list = field(default_factory=list)

    def reset_counter(self) -> None:
        self.frames_since_update = 0


# -- score map analysis ---------------------------------------------------------------------


def find_peak(score: torch.Tensor) -> tuple[float, float, float]:
    """Main peak of an (H, W) map as (x, y) in cell units and its value.

    The position is refined by the centroid of the positive scores in the
    3x3 neighbourhood of the maximum cell.
    """
    H, W = score.shape
    idx = int(torch.argmax(score))
    i, j = divmod(idx, W)
    peak = float(score[i, j])
    i0, i1, j0, j1 = max(0, i - 1), min(H, i + 2), max(0, j - 1), min(W, j + 2)
    patch = score[i0:i1, j0:j1].clamp_min(0)
    total = float(patch.sum())
    if total > 0:
        ys = torch.arange(i0, i1, dtype=score.dtype)[:, None] + 0.5
        xs = torch.arange(j0, j1, dtype=score.dtype)[None, :] + 0.5
        return float((patch * xs).sum()) / total, float((patch * ys).sum()) / total, peak
    return j + 0.5, i + 0.5, peak


def interference_peak(score: torch.Tensor, ratio: float = 0.5, radius: float = 3.0) -> float | None:
    """Strongest local maximum farther than ``radius`` cells from the main peak,
    if it exceeds ``ratio`` times the main peak; otherwise None."""
    H, W = score.shape
    main_idx = int(torch.argmax(score))
    mi, mj = divmod(main_idx, W)
    main = float(score[mi, mj])
    if main <= 0:
        return None
    pooled = F.max_pool2d(score[None, None], 3, stride=1, padding=1)[0, 0]
    is_max = score >= pooled
    ii, jj = torch.meshgrid(torch.arange(H), torch.arange(W), indexing="ij")
    far = ((ii - mi) ** 2 + (jj - mj) ** 2).to(score.dtype) > radius ** 2
    cand = score[is_max & far]
    if cand.numel() == 0:
        return None
    second = float(cand.max())
    return second if second > ratio * main else None


# -- augmentation -----------------------------------------------------------------------------


def augmentation_plan(num: int, seed: int = 0, shift: float = 0.6) -> list[tuple[str, float, float]]:
    """(kind, a, b) tuples: identity, flip, two blurs, compass shifts, then random shifts.

    Shifts are in units of the target size.
    """
    plan: list[tuple[str, float, float]] = [("identity", 0.0, 0.0), ("flip", 0.0, 0.0),
                                            ("blur", 1.0, 0.0), ("blur", 2.0, 0.0)]
    for k in range(8):
        a = k * math.pi / 4
        plan.append(("shift", shift * math.cos(a), shift * math.sin(a)))
    rng = np.random.default_rng(seed)
    while len(plan) < num:
        dx, dy = rng.uniform(-1, 1, size=2)
        plan.append(("shift", float(dx), float(dy)))
    return plan[:num]


def augmented_crops(image: torch.Tensor, box: BoundingBox, side: float, size: int,
                    plan: Sequence[tuple[str, float, float]]) -> tuple[torch.Tensor, torch.Tensor]:
    """Crops (N, 3, S, S) and target boxes in crop pixels (N, 4)."""
    cx, cy = box.center
    imgs, boxes = [], []
    for kind, a, b in plan:
        center = (cx, cy)
        if kind == "shift":
            center = (cx - a * box.w, cy - b * box.h)
        crop = crops.crop_and_resize(image, center, side, size)
        cb = crops.box_to_crop(box.as_list(), center, side, size)
        if kind == "flip":
            crop = crop.flip(-1)
            cb[0] = size - cb[0] - cb[2]
        elif kind == "blur":
            crop = crops.gaussian_blur(crop, a)
        imgs.append(crop)
        boxes.append(torch.tensor(cb, dtype=torch.float32))
    return torch.stack(imgs), torch.stack(boxes)


# -- tracker ------------------------------------------------------------------------------------


class Tracker:
    """Single-sequence tracker; owns mutable state, one instance per sequence."""

    def __init__(self, net: TrackerNet, config: TrackerConfig = TrackerConfig()):
        self.net = net.eval()
        self.config = config
        self.state: TrackerState | None = None
        self.image_size: tuple[int, int] | None = None

    @property
    def input_size(self) -> int:
        return self.net.config.input_size

    def _side(self, box: BoundingBox) -> float:
        side = crops.search_side(box.w, box.h, self.config.search_scale)
        W, H = self.image_size
        return float(min(max(side, 8.0), 2.0 * max(W, H)))

    def _features(self, imgs: torch.Tensor):
        feat = self.net.extract_features(imgs).values
        return feat, self.net.classification_features(feat), self.net.iou_head.features(feat)

    @torch.no_grad()
    def initialize(self, image, box: BoundingBox) -> TrackerState:
        cfg = self.config
        img = crops.image_to_tensor(image)
        self.image_size = (img.shape[2], img.shape[1])
        side = self._side(box)
        plan = augmentation_plan(cfg.num_aug, cfg.seed, cfg.aug_shift)
        imgs, boxes = augmented_crops(img, box, side, self.input_size, plan)
        _, cls, iou_feat = self._features(imgs)
        cells = boxes / self.net.config.stride
        labels = self.net.labels_for(cells)
        memory = SampleMemory(cls[None], labels[None], capacity=max(cfg.memory_capacity, cfg.num_aug),
                              permanent=cfg.num_aug)
        lam = float(self.net.lam)
        f0 = self.net.initial_filter(cls[None], cells[None])
        iterates, _ = optimize_target_model(f0, memory, cfg.init_iter, lam=lam)
        modulation = self.net.iou_head.modulation(iou_feat[:1], cells[:1])
        self.state = TrackerState(TargetModel(iterates[-1][0], lam), memory, modulation, box, frames_since_update=1)
        return self.state

    def _candidates(self, base: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed + 7919 * (self.state.frame_index + 1))
        out = [base]
        for _ in range(cfg.num_candidates - 1):
            u = torch.tensor(rng.normal(0.0, cfg.candidate_jitter, size=4), dtype=base.dtype)
            cx = base[0] + base[2] / 2 + u[0] * base[2]
            cy = base[1] + base[3] / 2 + u[1] * base[3]
            w, h = base[2] * torch.exp(u[2]), base[3] * torch.exp(u[3])
            out.append(torch.stack([cx - w / 2, cy - h / 2, w, h]))
        return torch.stack(out)

    def _clip(self, box: np.ndarray, fallback: BoundingBox) -> BoundingBox:
        if not np.all(np.isfinite(box)) or box[2] <= 0 or box[3] <= 0:
            return fallback
        W, H = self.image_size
        w = float(np.clip(box[2], 1.0, W))
        h = float(np.clip(box[3], 1.0, H))
        cx = float(np.clip(box[0] + box[2] / 2, 0.0, W))
        cy = float(np.clip(box[1] + box[3] / 2, 0.0, H))
        return BoundingBox.from_center(cx, cy, w, h)

    def track(self, image) -> BoundingBox:
        if self.state is None:
            raise RuntimeError("tracker is not initialized")
        cfg = self.config
        st = self.state
        st.frame_index += 1
        img = crops.image_to_tensor(image)
        last = st.last_box
        center = last.center
        side = self._side(last)
        S = self.input_size
        stride = self.net.config.stride

        with torch.no_grad():
            crop = crops.crop_and_resize(img, center, side, S)
            _, cls, iou_feat = self._features(crop[None])
            score = apply_filter(cls[None], st.target_model.filter[None])[0, 0]
        px, py, _ = find_peak(score)
        second = interference_peak(score, cfg.interference_ratio, cfg.interference_radius) \
            if cfg.detect_interference else None

        # candidate box at the peak with the previous size, in cell units
        last_crop = crops.box_to_crop(last.as_list(), center, side, S) / stride
        base = torch.tensor([px - last_crop[2] / 2, py - last_crop[3] / 2, last_crop[2], last_crop[3]],
                            dtype=torch.float32)
        new_box = last
        if cfg.refine_steps > 0:
            refined, finals = [], []
            for cand in self._candidates(base):
                b, hist = refine_box(self.net.iou_head, iou_feat, cand, st.modulation, cfg.refine_steps,
                                     cfg.refine_step_size, cfg.refine_halvings, cfg.refine_max_offset)
                refined.append(b)
                finals.append(hist[-1])
            order = np.argsort(finals)[::-1][: max(1, (len(finals) + 1) // 2)]
            box_cells = torch.stack([refined[k] for k in order]).mean(0)
        else:
            box_cells = base
        box_img = crops.box_from_crop((box_cells * stride).tolist(), center, side, S)
        new_box = self._clip(np.asarray(box_img, dtype=np.float64), last)

        # new training sample labelled at the estimated position in this crop
        nb = torch.tensor(crops.box_to_crop(new_box.as_list(), center, side, S) / stride, dtype=torch.float32)
        with torch.no_grad():
            label = self.net.labels_for(nb[None])[0]
            st.memory.add(cls[0], label, cfg.sample_lr)

        st.frames_since_update += 1
        reason = None
        if second is not None:
            reason = UPDATE_INTERFERENCE
        elif st.frames_since_update >= cfg.update_interval:
            reason = UPDATE_SCHEDULED
        if reason is not None:
            iterates, _ = optimize_target_model(st.target_model.filter, st.memory, cfg.n_iter,
                                                lam=st.target_model.lam)
            st.target_model = TargetModel(iterates[-1], st.target_model.lam)
            st.updates.append((st.frame_index, reason))
            st.reset_counter()
        st.last_box = new_box
        return new_box


def track_sequence(net: TrackerNet, frames: Iterable | SequenceRecord, init_box: BoundingBox | None = None,
                   config: TrackerConfig = TrackerConfig(), name: str | None = None,
                   tracker_name: str = "tracker") -> TrackResult:
    """One-pass evaluation run: initialize on the first frame, track the rest.

    ``frames`` is a SequenceRecord (its first annotation initializes) or an
    iterable of HxWx3 images together with ``init_box``.
    """
    if isinstance(frames, SequenceRecord):
        record = frames
        init_box = init_box or record.annotations[0].box
        name = name or record.name
        frames = (record.load_frame(i) for i in range(len(record)))
    if init_box is None:
        raise ValueError("init_box is required when frames are not a SequenceRecord")
    tracker = Tracker(net, config)
    boxes = []
    for i, frame in enumerate(frames):
        if i == 0:
            tracker.initialize(frame, init_box)
            boxes.append(init_box.as_list())
        else:
            boxes.append(tracker.track(frame).as_list())
    if not boxes:
        raise ValueError("empty frame sequence")
    updates = [[int(f), r] for f, r in tracker.state.updates]
    return TrackResult(name or "sequence", np.asarray(boxes), tracker_name, info={"updates": updates})
