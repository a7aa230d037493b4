"""Offline training: baseline pretraining and teacher/student distillation on crop pairs."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from ..dataset import SequenceRecord
from ..degrade import DegradeSpec, batch_scale_factor, degrade_tensor
from ..tracker import crops
from ..tracker.network import NetConfig, TrackerNet, parameter_checksum
from .losses import (TERMS, Discriminator, DistillGate, LossBundle, LossWeights, NumericGuardError,
                     consistency_loss, dis_loss, gen_loss, iou_distill_loss, score_distill_loss, total_loss)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2
    videos_per_epoch: int = 50
    batch_size: int = 2
    train_frames: int = 3
    test_frames: int = 3
    max_gap: int = 30
    search_scale: float = 5.0
    center_jitter_train: float = 0.1
    center_jitter_test: float = 0.5
    scale_jitter: float = 0.1
    lr_classifier: float = 5e-5
    lr_box: float = 5e-4
    lr_backbone_tail: float = 5e-5
    lr_backbone: float = 0.0
    lr_discriminator: float = 5e-4
    lr_decay: float = 0.2
    decay_every: int = 15
    terms: tuple[str, ...] = TERMS
    dis_weight: float = 1.0
    alpha: float = 100.0
    beta: float = 0.01
    gamma: float = 5.0
    delta: float = 2.0
    eta: float = 0.1
    scale_divisor: float = 16.0
    seed: int = 0
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.videos_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, videos_per_epoch and batch_size must be >= 1")
        if self.train_frames < 1 or self.test_frames < 1:
            raise ValueError("need at least one train and one test frame")
        if not 0 < self.lr_decay <= 1 or self.decay_every < 1:
            raise ValueError("bad learning-rate schedule")
        object.__setattr__(self, "terms", tuple(self.terms))
        unknown = set(self.terms) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown distillation terms {sorted(unknown)}")
        if isinstance(self.net, dict):
            object.__setattr__(self, "net", NetConfig(**self.net))

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.videos_per_epoch / self.batch_size)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma, self.delta, self.eta)

    @property
    def degrade_spec(self) -> DegradeSpec:
        return DegradeSpec(self.scale_divisor, self.net.input_size, self.seed)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "net" in d:
            net = d["net"]
            bad = set(net) - set(NetConfig.__dataclass_fields__)
            if bad:
                raise ValueError(f"unknown net config keys: {sorted(bad)}")
            d["net"] = NetConfig(**net)
        if "terms" in d:
            d["terms"] = tuple(d["terms"] or ())
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["terms"] = list(self.terms)
        return d


def learning_rate(base: float, epoch: int, decay: float = 0.2, every: int = 15) -> float:
    """Step schedule: ``base * decay ** (epoch // every)`` for 0-based epochs."""
    return base * decay ** (epoch // every)


# -- data -------------------------------------------------------------------------------


class PairSampler:
    """Draws train/test crop sets from annotated sequences.

    Each item picks a sequence, ``train_frames + test_frames`` frames within
    ``max_gap``, and crops a jittered search region around each target.
    """

    def __init__(self, sequences: Sequence[SequenceRecord], config: TrainConfig, seed: int | None = None):
        if not sequences:
            raise ValueError("no training sequences")
        self.sequences = list(sequences)
        self.config = config
        self.rng = np.random.default_rng(config.seed if seed is None else seed)
        self._frames: dict[tuple[int, int], np.ndarray] = {}

    def _frame(self, s: int, i: int) -> torch.Tensor:
        # cache raw uint8 frames (4x smaller than the float view)
        key = (s, i)
        if key not in self._frames:
            if len(self._frames) > 4096:
                self._frames.clear()
            self._frames[key] = self.sequences[s].load_frame(i)
        return crops.image_to_tensor(self._frames[key])

    def _crop(self, s: int, i: int, jitter: float) -> tuple[torch.Tensor, torch.Tensor]:
        cfg = self.config
        x, y, w, h = self.sequences[s].annotations[i].box.as_list()
        size = math.sqrt(w * h)
        cx = x + w / 2 + self.rng.uniform(-1, 1) * jitter * size
        cy = y + h / 2 + self.rng.uniform(-1, 1) * jitter * size
        side = cfg.search_scale * size * math.exp(self.rng.normal(0, cfg.scale_jitter))
        S = cfg.net.input_size
        img = crops.crop_and_resize(self._frame(s, i), (cx, cy), side, S)
        box = crops.box_to_crop((x, y, w, h), (cx, cy), side, S)
        return img, torch.tensor(box, dtype=torch.float32)

    def sample(self) -> dict[str, torch.Tensor]:
        cfg = self.config
        n = cfg.train_frames + cfg.test_frames
        out = {k: [] for k in ("train_imgs", "train_boxes", "test_imgs", "test_boxes")}
        for _ in range(cfg.batch_size):
            s = int(self.rng.integers(len(self.sequences)))
            T = len(self.sequences[s])
            span = min(T, cfg.max_gap + 1)
            start = int(self.rng.integers(T - span + 1))
            idx = self.rng.choice(span, size=n, replace=span < n) + start
            tr = sorted(idx[: cfg.train_frames])
            te = sorted(idx[cfg.train_frames:])
            for key, frames, jit in (("train", tr, cfg.center_jitter_train), ("test", te, cfg.center_jitter_test)):
                pairs = [self._crop(s, int(i), jit) for i in frames]
                out[f"{key}_imgs"].append(torch.stack([p[0] for p in pairs]))
                out[f"{key}_boxes"].append(torch.stack([p[1] for p in pairs]))
        return {k: torch.stack(v) for k, v in out.items()}


def degrade_batch(batch: dict[str, torch.Tensor], spec: DegradeSpec, rng: np.random.Generator) -> dict:
    """Student view of a batch: one degradation factor from all of its boxes."""
    boxes = torch.cat([batch["train_boxes"].flatten(0, 1), batch["test_boxes"].flatten(0, 1)])
    d = batch_scale_factor(boxes, spec)
    out = dict(batch)
    for key in ("train_imgs", "test_imgs"):
        x = batch[key]
        out[key] = degrade_tensor(x.flatten(0, 1), d, spec, rng).reshape(x.shape)
    out["scale_factor"] = d
    return out


def _forward(net: TrackerNet, batch: dict) -> dict:
    return net.forward_train(batch["train_imgs"], batch["train_boxes"], batch["test_imgs"], batch["test_boxes"])


# -- optimizers --------------------------------------------------------------------------------


def make_optimizer(net: TrackerNet, config: TrainConfig) -> torch.optim.Optimizer:
    """Adam with per-group learning rates; groups with lr 0 stay frozen."""
    tail = {id(p) for p in net.backbone_tail_parameters()}
    rest = [p for p in net.backbone.parameters() if id(p) not in tail]
    groups = [
        (net.classifier_parameters(), config.lr_classifier),
        (net.box_parameters(), config.lr_box),
        (net.backbone_tail_parameters(), config.lr_backbone_tail),
        (rest, config.lr_backbone),
    ]
    param_groups = []
    for params, lr in groups:
        for p in params:
            p.requires_grad_(lr > 0)
        if lr > 0:
            param_groups.append({"params": params, "lr": lr, "initial_lr": lr})
    return torch.optim.Adam(param_groups)


def make_scheduler(opt: torch.optim.Optimizer, config: TrainConfig) -> torch.optim.lr_scheduler.StepLR:
    return torch.optim.lr_scheduler.StepLR(opt, step_size=config.decay_every, gamma=config.lr_decay)


# -- steps ---------------------------------------------------------------------------------------


@dataclass
class StepOutput:
    bundle: LossBundle
    teacher: dict
    scale_factor: float


def _zero_like(x: torch.Tensor) -> torch.Tensor:
    return x.new_zeros(())


def compute_losses(teacher: TrackerNet, student: TrackerNet, discriminator: Discriminator | None,
                   batch: dict, student_batch: dict, config: TrainConfig) -> tuple[LossBundle, dict]:
    """Forward both networks and assemble every loss term (no parameter update)."""
    with torch.no_grad():
        t_out = _forward(teacher, batch)
    s_out = _forward(student, student_batch)
    gate = DistillGate.from_losses(s_out["loss_cls"], t_out["loss_cls"], s_out["loss_iou"], t_out["loss_iou"])
    zero = _zero_like(s_out["loss_cls"])
    use_feature = "feature" in config.terms and discriminator is not None
    bundle = LossBundle(
        l_cls=s_out["loss_cls"],
        l_iou=s_out["loss_iou"],
        l_gen=gen_loss(discriminator, s_out["rois"]) if use_feature else zero,
        l_dis=dis_loss(discriminator, t_out["rois"], s_out["rois"].detach()) if use_feature else zero,
        l_cons=consistency_loss(s_out["rois"], t_out["rois"]) if use_feature else zero,
        l_score_d=score_distill_loss(s_out["scores"], t_out["scores"]) if "score" in config.terms else zero,
        l_iou_d=iou_distill_loss(s_out["iou_scores"], t_out["iou_scores"]) if "iou" in config.terms else zero,
        gate=gate,
    )
    bundle.l_tot = total_loss(bundle, gate, config.weights, config.terms)
    return bundle, {"loss_cls": float(t_out["loss_cls"]), "loss_iou": float(t_out["loss_iou"])}


def train_step(teacher: TrackerNet, student: TrackerNet, discriminator: Discriminator | None, batch: dict,
               opt_student: torch.optim.Optimizer, opt_dis: torch.optim.Optimizer | None, config: TrainConfig,
               rng: np.random.Generator) -> StepOutput:
    """One simultaneous update of the student (by L_tot) and the discriminator (by L_dis).

    Raises NumericGuardError before touching any parameter if a loss is not finite.
    """
    student_batch = degrade_batch(batch, config.degrade_spec, rng)
    try:
        bundle, t_losses = compute_losses(teacher, student, discriminator, batch, student_batch, config)
        bundle.check()
    except NumericGuardError as exc:
        raise NumericGuardError(f"step aborted: {exc}") from exc
    opt_student.zero_grad(set_to_none=True)
    bundle.l_tot.backward()
    if discriminator is not None and opt_dis is not None and "feature" in config.terms:
        opt_dis.zero_grad(set_to_none=True)
        (config.dis_weight * bundle.l_dis).backward()
        opt_dis.step()
    opt_student.step()
    return StepOutput(bundle, t_losses, student_batch["scale_factor"])


def baseline_step(net: TrackerNet, batch: dict, opt: torch.optim.Optimizer, config: TrainConfig,
                  rng: np.random.Generator | None = None, degrade: bool = False) -> dict:
    if degrade:
        batch = degrade_batch(batch, config.degrade_spec, rng)
    out = _forward(net, batch)
    loss = config.alpha * out["loss_cls"] + config.beta * out["loss_iou"]
    if not bool(torch.isfinite(loss)):
        raise NumericGuardError(f"step aborted: non-finite baseline loss {float(loss)}")
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return {"loss": float(loss.detach()), "l_cls": float(out["loss_cls"].detach()), "l_iou": float(out["loss_iou"].detach())}


# -- loops -----------------------------------------------------------------------------------------


@dataclass
class TrainResult:
    net: TrackerNet
    discriminator: Discriminator | None
    history: list[dict]
    skipped: int
    config: TrainConfig
    teacher_checksum: str | None = None

    @property
    def steps(self) -> int:
        return len(self.history)

    def final_loss(self, key: str = "l_tot") -> float:
        return self.history[-1][key]


def _seed_all(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def train_baseline(config: TrainConfig, sequences: Sequence[SequenceRecord], net: TrackerNet | None = None,
                   degrade: bool = False, progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Train one network on the baseline objective ``alpha L_cls + beta L_iou``."""
    rng = _seed_all(config.seed)
    net = net if net is not None else TrackerNet(config.net)
    net.train()
    sampler = PairSampler(sequences, config)
    opt = make_optimizer(net, config)
    sched = make_scheduler(opt, config)
    history, skipped, step = [], 0, 0
    for epoch in range(config.epochs):
        for _ in range(config.steps_per_epoch):
            batch = sampler.sample()
            try:
                rec = baseline_step(net, batch, opt, config, rng, degrade)
            except NumericGuardError as exc:
                log.warning("%s", exc)
                skipped += 1
                continue
            step += 1
            rec.update(step=step, epoch=epoch, lr=opt.param_groups[0]["lr"])
            history.append(rec)
            if progress:
                progress(rec)
        sched.step()
    return TrainResult(net, None, history, skipped, config)


def train(config: TrainConfig, sequences: Sequence[SequenceRecord], teacher: TrackerNet,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Distill a student from a frozen teacher; the student starts as a copy of the teacher."""
    rng = _seed_all(config.seed)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    checksum = parameter_checksum(teacher)
    student = copy.deepcopy(teacher)
    student.train()
    discriminator = None
    opt_dis = None
    if "feature" in config.terms:
        roi_dim = config.net.channels * config.net.roi_bins ** 2
        discriminator = Discriminator(roi_dim)
        opt_dis = torch.optim.Adam(discriminator.parameters(), lr=config.lr_discriminator)
    opt = make_optimizer(student, config)
    sched = make_scheduler(opt, config)
    sampler = PairSampler(sequences, config)
    history, skipped, step = [], 0, 0
    for epoch in range(config.epochs):
        for _ in range(config.steps_per_epoch):
            batch = sampler.sample()
            try:
                out = train_step(teacher, student, discriminator, batch, opt, opt_dis, config, rng)
            except NumericGuardError as exc:
                log.warning("%s", exc)
                skipped += 1
                continue
            step += 1
            rec = out.bundle.as_floats()
            rec.update(step=step, epoch=epoch, lr=opt.param_groups[0]["lr"], scale_factor=out.scale_factor,
                       teacher_cls=out.teacher["loss_cls"], teacher_iou=out.teacher["loss_iou"])
            history.append(rec)
            if progress:
                progress(rec)
        sched.step()
    if parameter_checksum(teacher) != checksum:
        raise RuntimeError("teacher parameters changed during distillation")
    return TrainResult(student, discriminator, history, skipped, config, checksum)
