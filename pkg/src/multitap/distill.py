"""EMA teacher maintenance and multi-layer standardized target construction."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import torch
from torch import Tensor, nn

from .masking import WorkerBatchMasks
from .vit import LayerTap, TAP_PIXELS, ViTConfig


class TapNotCapturedError(KeyError):
    pass


class MergeOp(str, Enum):
    CONCAT = "concat_per_tap_zscore"
    AVERAGE = "average_restandardize"
    JOINT = "joint_zscore"


@dataclass(frozen=True)
class TargetSpec:
    """Which teacher representations are distilled and how they merge.

    ``concat_per_tap_zscore``: z-score each tap's vector, concatenate (the
    default).  ``average_restandardize``: z-score, average across taps, then
    z-score again (requires equal tap dims).  ``joint_zscore``: concatenate
    raw tap vectors, then z-score the whole vector once.
    """

    taps: tuple[LayerTap, ...]
    merge: MergeOp = MergeOp.CONCAT
    epsilon: float = 1e-6

    def __post_init__(self) -> None:
        if not self.taps:
            raise ValueError("TargetSpec needs at least one tap")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def output_dim(self, cfg: ViTConfig) -> int:
        dims = [t.dim(cfg) for t in self.taps]
        if MergeOp(self.merge) is MergeOp.AVERAGE:
            if len(set(dims)) != 1:
                raise ValueError("average merge requires taps of one dimensionality")
            return dims[0]
        return sum(dims)


def default_tap_set(depth: int) -> tuple[LayerTap, ...]:
    """Block-output taps at 1, 4, 8, 12, ... plus the final block.

    The progression starts at block 1 and then advances in steps of 4; when
    the depth is not on the progression the final block is appended so the
    deepest representation is always distilled.
    """
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    layers = [1] + [l for l in range(4, depth + 1, 4)]
    if layers[-1] != depth:
        layers.append(depth)
    return tuple(LayerTap("block_out", l) for l in layers)


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student, elementwise."""
    if not (0.0 <= momentum <= 1.0):
        raise ValueError(f"momentum must be in [0, 1], got {momentum}")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ValueError("teacher/student parameter names differ")
    for name, tp in t_params.items():
        if tp.shape != s_params[name].shape:
            raise ValueError(
                f"shape mismatch for {name}: {tp.shape} vs {s_params[name].shape}"
            )
    names = list(t_params)
    ts = [t_params[n] for n in names]
    ss = [s_params[n] for n in names]
    torch._foreach_mul_(ts, momentum)
    torch._foreach_add_(ts, ss, alpha=1.0 - momentum)


def zscore(v: Tensor, epsilon: float = 1e-6) -> Tensor:
    """(v - mean) / (population std + epsilon) over the last dimension."""
    mean = v.mean(dim=-1, keepdim=True)
    std = v.std(dim=-1, unbiased=False, keepdim=True)
    return (v - mean) / (std + epsilon)


@dataclass
class TargetBatch:
    """Distillation targets aligned row-for-row with predictor outputs.

    Row k of ``values`` corresponds to (sample_ids[k], region_ids[k],
    token_ids[k]); the ordering is sample-major, then region, then token
    index order inside the rectangle, identical to Predictor.forward.
    Tokens covered by several regions appear once per region occurrence.
    """

    values: Tensor
    sample_ids: Tensor
    region_ids: Tensor
    token_ids: Tensor


def build_targets(
    teacher_taps: dict[LayerTap, Tensor],
    masks: WorkerBatchMasks,
    spec: TargetSpec,
) -> TargetBatch:
    """Assemble per-masked-token target vectors from full-grid teacher taps.

    ``teacher_taps[tap]`` is [B, N, D_tap] over the full token grid.  Pixel
    taps are z-scored per patch (normalized-pixel targets); block taps are
    z-scored per token per tap.  All values are treated as constants.
    """
    for tap in spec.taps:
        if tap not in teacher_taps:
            raise TapNotCapturedError(str(tap))
    device = teacher_taps[spec.taps[0]].device
    batch = len(masks.samples)
    n_regions = len(masks.samples[0].regions)

    region_index = torch.stack(
        [
            torch.stack(
                [torch.as_tensor(ms.regions[r], dtype=torch.long) for r in range(n_regions)],
                dim=0,
            )
            for ms in masks.samples
        ],
        dim=0,
    ).to(device)  # [B, R, M]
    m = region_index.shape[-1]

    merge = MergeOp(spec.merge)
    pieces = []
    for tap in spec.taps:
        full = teacher_taps[tap]  # [B, N, D_tap]
        d = full.shape[-1]
        gather = region_index.reshape(batch, -1).unsqueeze(-1).expand(-1, -1, d)
        vals = torch.gather(full, 1, gather)  # [B, R*M, D_tap]
        if merge is MergeOp.JOINT:
            pieces.append(vals)
        else:
            pieces.append(zscore(vals, spec.epsilon))
    if merge is MergeOp.AVERAGE:
        merged = zscore(torch.stack(pieces, dim=0).mean(dim=0), spec.epsilon)
    elif merge is MergeOp.JOINT:
        merged = zscore(torch.cat(pieces, dim=-1), spec.epsilon)
    else:
        merged = torch.cat(pieces, dim=-1)

    values = merged.reshape(batch * n_regions * m, -1).detach()
    sample_ids = torch.arange(batch, device=device).repeat_interleave(n_regions * m)
    region_ids = (
        torch.arange(n_regions, device=device).repeat_interleave(m).repeat(batch)
    )
    token_ids = region_index.reshape(-1)
    return TargetBatch(
        values=values, sample_ids=sample_ids, region_ids=region_ids, token_ids=token_ids
    )
