"""Training losses, including the backward-only MSE.

``MseNoForward`` skips the forward loss computation entirely: it returns a
dummy zero scalar that participates in the graph, saves only the difference
array, and emits the exact analytic MSE gradient in the backward pass.
Downstream scaling (world size, grad scalers) composes through the upstream
gradient exactly as with the standard loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch
from torch import Tensor


class ShapeMismatchError(ValueError):
    pass


class LossKind(str, Enum):
    MSE = "mse"
    MSE_NO_FORWARD = "mse_no_forward"
    SMOOTH_L1 = "smooth_l1"
    L1 = "l1"


class Reduction(str, Enum):
    MEAN = "mean"
    SUM = "sum"


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind = LossKind.MSE_NO_FORWARD
    reduction: Reduction = Reduction.MEAN
    monitor_every: int = 20
    smooth_l1_beta: float = 1.0

    def __post_init__(self) -> None:
        if self.monitor_every < 1:
            raise ValueError(f"monitor_every must be >= 1, got {self.monitor_every}")


def _check_shapes(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")


def mse(pred: Tensor, target: Tensor, reduction: Reduction = Reduction.MEAN) -> Tensor:
    _check_shapes(pred, target)
    sq = (pred - target) ** 2
    return sq.mean() if Reduction(reduction) is Reduction.MEAN else sq.sum()


def l1(pred: Tensor, target: Tensor, reduction: Reduction = Reduction.MEAN) -> Tensor:
    _check_shapes(pred, target)
    ab = (pred - target).abs()
    return ab.mean() if Reduction(reduction) is Reduction.MEAN else ab.sum()


def smooth_l1(
    pred: Tensor, target: Tensor, beta: float = 1.0, reduction: Reduction = Reduction.MEAN
) -> Tensor:
    _check_shapes(pred, target)
    diff = (pred - target).abs()
    val = torch.where(diff < beta, 0.5 * diff**2 / beta, diff - 0.5 * beta)
    return val.mean() if Reduction(reduction) is Reduction.MEAN else val.sum()


class _MseNoForwardFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, pred: Tensor, target: Tensor, reduction: str):
        # Only the difference is needed for the backward pass; saving it now
        # halves the saved-tensor memory versus keeping pred and target.
        ctx.save_for_backward(pred - target)
        ctx.reduction = reduction
        return pred.new_zeros(())

    @staticmethod
    def backward(ctx, grad_output: Tensor):
        (difference,) = ctx.saved_tensors
        scaling = 2.0
        if ctx.reduction == "mean":
            scaling /= difference.numel()
        grad_pred = (grad_output * scaling) * difference
        return grad_pred, None, None


def mse_no_forward(
    pred: Tensor, target: Tensor, reduction: Reduction = Reduction.MEAN
) -> Tensor:
    """Dummy-forward MSE: returns an exact 0 scalar wired into the graph."""
    _check_shapes(pred, target)
    return _MseNoForwardFn.apply(pred, target, Reduction(reduction).value)


def mse_no_forward_grad(
    pred: Tensor,
    target: Tensor,
    reduction: Reduction = Reduction.MEAN,
    upstream_grad: float = 1.0,
) -> tuple[Tensor, Tensor]:
    """Functional form: (dummy scalar = 0, gradient w.r.t. pred).

    The gradient is upstream_grad * 2 * (pred - target), divided by the
    element count under mean reduction.  The target is a constant: no
    gradient is produced for it.
    """
    _check_shapes(pred, target)
    diff = pred.detach() - target.detach()
    scaling = 2.0 * upstream_grad
    if Reduction(reduction) is Reduction.MEAN:
        scaling /= diff.numel()
    return pred.new_zeros(()), scaling * diff


def compute_loss(
    pred: Tensor, target: Tensor, spec: LossSpec
) -> Tensor:
    kind = LossKind(spec.kind)
    if kind is LossKind.MSE:
        return mse(pred, target, spec.reduction)
    if kind is LossKind.MSE_NO_FORWARD:
        return mse_no_forward(pred, target, spec.reduction)
    if kind is LossKind.SMOOTH_L1:
        return smooth_l1(pred, target, spec.smooth_l1_beta, spec.reduction)
    if kind is LossKind.L1:
        return l1(pred, target, spec.reduction)
    raise ValueError(f"unknown loss kind {spec.kind!r}")


def monitor_loss(pred: Tensor, target: Tensor, spec: LossSpec) -> Tensor:
    """True forward loss used for periodic monitoring (no graph)."""
    with torch.no_grad():
        kind = LossKind(spec.kind)
        if kind in (LossKind.MSE, LossKind.MSE_NO_FORWARD):
            return mse(pred, target, spec.reduction)
        if kind is LossKind.SMOOTH_L1:
            return smooth_l1(pred, target, spec.smooth_l1_beta, spec.reduction)
        return l1(pred, target, spec.reduction)
