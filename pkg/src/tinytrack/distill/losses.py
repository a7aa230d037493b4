"""Distillation losses: adversarial and L1 feature terms, score and IoU L1 terms, reliability gates and the total objective."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

LOGIT_BOUND = 15.0
TERMS = ("feature", "score", "iou")


class NumericGuardError(FloatingPointError):
    pass


def _finite(name: str, value) -> None:
    v = value.detach() if isinstance(value, torch.Tensor) else torch.as_tensor(value)
    if not bool(torch.isfinite(v).all()):
        raise NumericGuardError(f"{name} is not finite: {v.tolist()}")


class Discriminator(nn.Module):
    """Three fully connected layers on flattened ROI features; sigmoid output strictly in (0, 1)."""

    def __init__(self, in_features: int, hidden: tuple[int, int] = (256, 64), slope: float = 0.1):
        super().__init__()
        self.fc1 = nn.Linear(in_features, hidden[0])
        self.fc2 = nn.Linear(hidden[0], hidden[1])
        self.fc3 = nn.Linear(hidden[1], 1)
        self.slope = slope

    def logits(self, rois: torch.Tensor) -> torch.Tensor:
        x = rois.flatten(1)
        x = F.leaky_relu(self.fc1(x), self.slope)
        x = F.leaky_relu(self.fc2(x), self.slope)
        z = self.fc3(x)[:, 0]
        # bounded logit keeps D away from exactly 0 or 1 in floating point
        return LOGIT_BOUND * torch.tanh(z / LOGIT_BOUND)

    def forward(self, rois: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(rois))


def _checked_logits(discriminator: Discriminator, rois: torch.Tensor) -> torch.Tensor:
    if rois.shape[0] == 0:
        raise ValueError("empty ROI batch")
    z = discriminator.logits(rois)
    d = torch.sigmoid(z.detach())
    if not bool(((d > 0) & (d < 1)).all()):
        raise NumericGuardError("discriminator output left (0, 1)")
    return z


def gen_loss(discriminator: Discriminator, student_rois: torch.Tensor) -> torch.Tensor:
    """``-sum_i log D(S_i)`` (unnormalized sum over the batch)."""
    z = _checked_logits(discriminator, student_rois)
    return -F.logsigmoid(z).sum()


def dis_loss(discriminator: Discriminator, teacher_rois: torch.Tensor, student_rois: torch.Tensor) -> torch.Tensor:
    """``-sum_i (log D(T_i) + log(1 - D(S_i)))``."""
    if teacher_rois.shape[0] != student_rois.shape[0]:
        raise ValueError(f"batch sizes differ: {teacher_rois.shape[0]} vs {student_rois.shape[0]}")
    zt = _checked_logits(discriminator, teacher_rois)
    zs = _checked_logits(discriminator, student_rois)
    return -(F.logsigmoid(zt) + F.logsigmoid(-zs)).sum()


def _batch_l1(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    if student.shape != teacher.shape:
        raise ValueError(f"shapes differ: {tuple(student.shape)} vs {tuple(teacher.shape)}")
    if student.shape[0] == 0:
        raise ValueError("empty batch")
    return (student - teacher).abs().flatten(1).sum(1).mean()


def consistency_loss(student_rois: torch.Tensor, teacher_rois: torch.Tensor) -> torch.Tensor:
    """``(1/N) sum_i ||S_i - T_i||_1`` with the elementwise absolute sum per ROI."""
    return _batch_l1(student_rois, teacher_rois)


def score_distill_loss(student_scores: torch.Tensor, teacher_scores: torch.Tensor) -> torch.Tensor:
    """``(1/N) sum_i ||S_i - T_i||_1`` over score maps (N, H, W)."""
    return _batch_l1(student_scores, teacher_scores)


def iou_distill_loss(student_ious: torch.Tensor, teacher_ious: torch.Tensor) -> torch.Tensor:
    """``(1/N) sum_i |S_i - T_i|`` over flat IoU score lists."""
    s, t = torch.as_tensor(student_ious), torch.as_tensor(teacher_ious)
    if s.dim() != 1 or s.shape != t.shape:
        raise ValueError(f"IoU lists differ in length: {tuple(s.shape)} vs {tuple(t.shape)}")
    if s.numel() == 0:
        raise ValueError("empty IoU list")
    return (s - t).abs().mean()


def _scalar(v) -> torch.Tensor:
    # python numbers keep double precision
    return v.detach() if isinstance(v, torch.Tensor) else torch.tensor(float(v), dtype=torch.float64)


def rdm(student_loss, teacher_loss) -> torch.Tensor:
    """Reliability gate ``max(0, student - teacher)`` as a constant (no gradient)."""
    s = _scalar(student_loss)
    t = _scalar(teacher_loss)
    _finite("student loss", s)
    _finite("teacher loss", t)
    return torch.clamp(s - t, min=0)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 100.0
    beta: float = 0.01
    gamma: float = 5.0
    delta: float = 2.0
    eta: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not v > 0 or not math.isfinite(v):
                raise ValueError(f"loss weight {f.name} must be positive, got {v}")


@dataclass
class DistillGate:
    rdm_iou: torch.Tensor | float = 0.0
    rdm_cls: torch.Tensor | float = 0.0

    def __post_init__(self):
        for name in ("rdm_iou", "rdm_cls"):
            v = getattr(self, name)
            v = _scalar(v)
            if not bool(torch.isfinite(v)) or float(v) < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {float(v)}")
            setattr(self, name, v)

    @classmethod
    def from_losses(cls, student_cls, teacher_cls, student_iou, teacher_iou) -> "DistillGate":
        return cls(rdm_iou=rdm(student_iou, teacher_iou), rdm_cls=rdm(student_cls, teacher_cls))


@dataclass
class LossBundle:
    l_cls: torch.Tensor
    l_iou: torch.Tensor
    l_gen: torch.Tensor
    l_dis: torch.Tensor
    l_cons: torch.Tensor
    l_score_d: torch.Tensor
    l_iou_d: torch.Tensor
    l_tot: torch.Tensor | None = None
    gate: DistillGate = field(default_factory=DistillGate)

    def check(self) -> None:
        for f in fields(self):
            if f.name == "gate":
                continue
            v = getattr(self, f.name)
            if v is not None:
                _finite(f.name, v)

    def as_floats(self) -> dict:
        out = {f.name: float(getattr(self, f.name).detach()) for f in fields(self)
               if f.name != "gate" and getattr(self, f.name) is not None}
        out["rdm_iou"] = float(self.gate.rdm_iou)
        out["rdm_cls"] = float(self.gate.rdm_cls)
        return out


def total_loss(parts: LossBundle, gate: DistillGate | None = None, weights: LossWeights = LossWeights(),
               terms: tuple[str, ...] = TERMS) -> torch.Tensor:
    """``alpha L_cls + beta L_iou + rdm_iou L_gen + gamma rdm_iou L_cons + delta rdm_cls L_score + eta rdm_iou L_iou_d``.

    ``terms`` selects which distillation levels take part (feature, score, iou).
    """
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise ValueError(f"unknown distillation terms {sorted(unknown)}")
    gate = parts.gate if gate is None else gate
    for name in ("l_cls", "l_iou", "l_gen", "l_cons", "l_score_d", "l_iou_d"):
        _finite(name, getattr(parts, name))
    w = weights
    total = w.alpha * parts.l_cls + w.beta * parts.l_iou
    if "feature" in terms:
        total = total + gate.rdm_iou * parts.l_gen + w.gamma * gate.rdm_iou * parts.l_cons
    if "score" in terms:
        total = total + w.delta * gate.rdm_cls * parts.l_score_d
    if "iou" in terms:
        total = total + w.eta * gate.rdm_iou * parts.l_iou_d
    _finite("total loss", total)
    return total

