"""Discriminative target model: a k x k x C filter fitted online by steepest descent.

Shapes used here (batched over B independent problems):

    samples x   (B, N, C, H, W)     classification features
    labels  c   (B, N, H, W)        Gaussian labels in [0, 1]
    weights     (B, N)              sample importance, normalized internally
    filter  f   (B, C, k, k)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

LABEL_SIGMA = 1.0
MASK_THRESHOLD = 0.05


class OptimizationError(RuntimeError):
    pass


@dataclass
class TargetModel:
    filter: torch.Tensor
    lam: float | torch.Tensor = 0.1

    def __post_init__(self):
        if not bool(torch.isfinite(self.filter).all()):
            raise ValueError("target model filter has non-finite weights")
        if float(self.lam) < 0:
            raise ValueError("lambda must be non-negative")


def gaussian_label(center: torch.Tensor, size: tuple[int, int], sigma: float = LABEL_SIGMA) -> torch.Tensor:
    """Gaussian label maps for ``center`` (..., 2) given as (x, y) in cell units.

    Cell (i, j) is evaluated at its center (j + 0.5, i + 0.5).
    """
    h, w = size
    dtype = center.dtype if center.is_floating_point() else torch.float32
    ys = torch.arange(h, dtype=dtype, device=center.device) + 0.5
    xs = torch.arange(w, dtype=dtype, device=center.device) + 0.5
    dx = xs - center[..., 0:1]
    dy = ys - center[..., 1:2]
    return torch.exp(-(dy[..., :, None] ** 2 + dx[..., None, :] ** 2) / (2 * sigma ** 2))


def target_mask(label: torch.Tensor, threshold: float = MASK_THRESHOLD) -> torch.Tensor:
    return (label > threshold).to(label.dtype)


def residual_hinge(score: torch.Tensor, label: torch.Tensor, mask: torch.Tensor | None = None,
                   threshold: float = MASK_THRESHOLD) -> torch.Tensor:
    """``score - label`` inside the target region, ``max(0, score)`` elsewhere."""
    if score.shape != label.shape:
        raise ValueError(f"score {tuple(score.shape)} and label {tuple(label.shape)} differ")
    if mask is None:
        mask = target_mask(label, threshold)
    return mask * (score - label) + (1 - mask) * F.relu(score)


def apply_filter(x: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
    """Correlate samples (B, N, C, H, W) with per-problem filters (B, C, k, k) -> (B, N, H, W)."""
    B, N, C, H, W = x.shape
    k = f.shape[-1]
    if f.shape != (B, C, k, k) or k % 2 == 0:
        raise ValueError(f"filter shape {tuple(f.shape)} incompatible with samples {tuple(x.shape)}")
    out = F.conv2d(x.permute(1, 0, 2, 3, 4).reshape(N, B * C, H, W), f, padding=k // 2, groups=B)
    return out.permute(1, 0, 2, 3)


@dataclass
class SampleMemory:
    """Training samples for the target model with positive importance weights."""

    x: torch.Tensor
    labels: torch.Tensor
    weights: torch.Tensor | None = None
    mask: torch.Tensor | None = None
    capacity: int = 50
    permanent: int = field(default=0)

    def __post_init__(self):
        if self.x.dim() == 4:
            self.x = self.x[None]
            self.labels = self.labels[None]
            if self.weights is not None:
                self.weights = self.weights[None]
            if self.mask is not None:
                self.mask = self.mask[None]
        if self.weights is None:
            self.weights = torch.ones(self.x.shape[:2], dtype=self.x.dtype, device=self.x.device)
        if self.x.shape[1] == 0:
            raise ValueError("memory needs at least one sample")
        if bool((self.weights <= 0).any()):
            raise ValueError("sample weights must be positive")
        if self.mask is None:
            self.mask = target_mask(self.labels)

    def __len__(self) -> int:
        return self.x.shape[1]

    def normalized_weights(self) -> torch.Tensor:
        return self.weights / self.weights.sum(dim=1, keepdim=True)

    def add(self, x: torch.Tensor, label: torch.Tensor, learning_rate: float = 0.01) -> None:
        """Insert one sample (single-problem memories only).

        Existing weights decay by ``1 - learning_rate``; the new sample gets
        ``learning_rate`` relative mass. When full, the lightest sample that is
        not one of the first ``permanent`` entries is replaced.
        """
        if self.x.shape[0] != 1:
            raise ValueError("add() supports single-problem memories")
        w = self.weights[0] / self.weights[0].sum() * (1 - learning_rate)
        new_w = w.new_tensor(learning_rate)
        x = x.to(self.x.dtype)[None, None]
        label = label.to(self.labels.dtype)[None, None]
        if len(self) < self.capacity:
            self.x = torch.cat([self.x, x], dim=1)
            self.labels = torch.cat([self.labels, label], dim=1)
            self.mask = torch.cat([self.mask, target_mask(label)], dim=1)
            self.weights = torch.cat([w, new_w.reshape(1)])[None]
            return
        candidates = w.clone()
        candidates[: self.permanent] = math.inf
        idx = int(torch.argmin(candidates))
        self.x[0, idx] = x[0, 0]
        self.labels[0, idx] = label[0, 0]
        self.mask[0, idx] = target_mask(label[0, 0])
        w[idx] = new_w
        self.weights = w[None]


def _lam_sq(lam, like: torch.Tensor) -> torch.Tensor:
    lam = torch.as_tensor(lam, dtype=like.dtype, device=like.device)
    return (lam ** 2).reshape(-1, *([1] * (like.dim() - 1))) if lam.dim() else lam ** 2


def model_loss(f: torch.Tensor | TargetModel, memory: SampleMemory, lam=None) -> torch.Tensor:
    """Per-problem loss ``sum_j w_j ||r(x_j * f, c_j)||^2 + ||lam f||^2`` with normalized w (uniform by default)."""
    if isinstance(f, TargetModel):
        f, lam = f.filter, f.lam if lam is None else lam
    lam = 0.1 if lam is None else lam
    if f.dim() == 3:
        f = f[None]
    scores = apply_filter(memory.x, f)
    r = residual_hinge(scores, memory.labels, memory.mask)
    data = (memory.normalized_weights() * (r ** 2).sum(dim=(-2, -1))).sum(dim=1)
    reg = (_lam_sq(lam, f) * f ** 2).sum(dim=(1, 2, 3))
    return data + reg


def _step_length(f: torch.Tensor, g: torch.Tensor, memory: SampleMemory, lam) -> torch.Tensor:
    # curvature of a quadratic that majorizes the loss: the hinge's second derivative is at most 2
    xg = apply_filter(memory.x, g)
    curv = (memory.normalized_weights() * (xg ** 2).sum(dim=(-2, -1))).sum(dim=1)
    curv = curv + (_lam_sq(lam, g) * g ** 2).sum(dim=(1, 2, 3))
    gg = (g ** 2).sum(dim=(1, 2, 3))
    alpha = gg / (2 * curv).clamp_min(torch.finfo(g.dtype).tiny)
    return torch.where(gg > 0, alpha, torch.zeros_like(alpha))


def optimize_target_model(f0: torch.Tensor | TargetModel, memory: SampleMemory, n_iter: int, lam=None,
                          differentiable: bool = False, check: bool = True
                          ) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    """Run ``n_iter`` steepest-descent steps with exact step length on a majorizing quadratic.

    Returns the iterates f^(0)..f^(n_iter) and their losses. The loss can
    only go down; an increase beyond rounding raises OptimizationError when
    ``check`` is set. With ``differentiable`` the iterates keep their graph.
    """
    if n_iter < 0:
        raise ValueError("n_iter must be >= 0")
    if isinstance(f0, TargetModel):
        f0, lam = f0.filter, f0.lam if lam is None else lam
    lam = 0.1 if lam is None else lam
    squeeze = f0.dim() == 3
    f = f0[None] if squeeze else f0
    if not differentiable:
        f = f.detach()
    iterates = [f]
    loss = model_loss(f, memory, lam)
    losses = [loss if differentiable else loss.detach()]
    for _ in range(n_iter):
        with torch.enable_grad():
            fv = f if differentiable and f.requires_grad else f.detach().requires_grad_(True)
            lv = model_loss(fv, memory, lam)
            (g,) = torch.autograd.grad(lv.sum(), fv, create_graph=differentiable)
        if not differentiable:
            g = g.detach()
        alpha = _step_length(f, g, memory, lam)
        f = f - alpha.reshape(-1, 1, 1, 1) * g
        new_loss = model_loss(f, memory, lam)
        if check:
            tol = torch.clamp(loss.detach().abs() * 64 * torch.finfo(f.dtype).eps, min=1e-9)
            if bool((new_loss.detach() > loss.detach() + tol).any()):
                raise OptimizationError(
                    f"target model loss increased: {loss.detach().tolist()} -> {new_loss.detach().tolist()}")
        loss = new_loss
        iterates.append(f)
        losses.append(loss if differentiable else loss.detach())
    if squeeze:
        iterates = [i[0] for i in iterates]
        losses = [l[0] for l in losses]
    return iterates, losses


def classification_loss(iterates: list[torch.Tensor], test_x: torch.Tensor, test_labels: torch.Tensor,
                        mask: torch.Tensor | None = None) -> torch.Tensor:
    """``1/N_iter * sum_{i=0..N_iter} sum_test ||r(x * f^(i), z)||^2``, averaged over problems.

    ``N_iter = len(iterates) - 1``; a lone iterate is divided by 1.
    """
    if not iterates:
        raise ValueError("need at least one iterate")
    if test_x.dim() == 4:
        test_x, test_labels = test_x[None], test_labels[None]
        mask = None if mask is None else mask[None]
        iterates = [f[None] if f.dim() == 3 else f for f in iterates]
    if test_x.shape[1] == 0:
        raise ValueError("empty test set")
    if mask is None:
        mask = target_mask(test_labels)
    total = 0.0
    for f in iterates:
        r = residual_hinge(apply_filter(test_x, f), test_labels, mask)
        total = total + (r ** 2).sum(dim=(1, 2, 3))
    n_iter = max(1, len(iterates) - 1)
    return (total / n_iter).mean()


def ridge_solution(x: torch.Tensor, y: torch.Tensor, lam: float) -> torch.Tensor:
    """Closed-form minimizer of ||x f - y||^2 + lam^2 ||f||^2 for a linear map x (M, P)."""
    p = x.shape[1]
    a = x.T @ x + lam ** 2 * torch.eye(p, dtype=x.dtype)
    return torch.linalg.solve(a, x.T @ y)
