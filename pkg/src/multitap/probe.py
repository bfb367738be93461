"""Frozen-encoder classification probes with a joint hyperparameter sweep.

Four probe heads over a frozen encoder's outputs:

* ``patch_mean``: mean of the patch embeddings -> batch norm -> linear;
* ``cls``: CLS embedding -> parameter-free layer norm -> linear;
* ``xattn``: cross-attention with a single learnable query over all kept
  tokens (patches, CLS, registers) -> linear;
* ``xblk``: ``xattn`` plus an MLP sub-block (residual) before the head.

All (lr, wd) grid configurations are trained simultaneously on shared
encoder features, which are computed once per augmented batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .config import TrainConfig
from .data import augment_probe, eval_transform
from .optim import AdamW
from .seeding import derive_seed
from .train import LrSchedule, lr_at
from .vit import Mlp, ViTEncoder, plain_layer_norm

PROBE_KINDS = ("patch_mean", "cls", "xattn", "xblk")

_PROBE_AUG_SALT = 0x70726F6265


class MissingClsError(ValueError):
    """CLS probe requested on an encoder without a CLS token."""


class PatchMeanProbe(nn.Module):
    def __init__(self, dim: int, classes: int):
        super().__init__()
        self.bn = nn.BatchNorm1d(dim)
        self.head = nn.Linear(dim, classes)

    def forward(self, states: Tensor, num_globals: int) -> Tensor:
        pooled = states[:, num_globals:].mean(dim=1)
        return self.head(self.bn(pooled))


class ClsProbe(nn.Module):
    def __init__(self, dim: int, classes: int):
        super().__init__()
        self.head = nn.Linear(dim, classes)

    def forward(self, states: Tensor, num_globals: int) -> Tensor:
        return self.head(plain_layer_norm(states[:, 0]))


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Parameter(torch.zeros(1, 1, dim))
        nn.init.trunc_normal_(self.q, std=0.02)
        self.kv = nn.Linear(dim, dim * 2)
        self.proj = nn.Linear(dim, dim)

    def forward(self, tokens: Tensor) -> Tensor:
        b, t, d = tokens.shape
        kv = self.kv(tokens).reshape(b, t, 2, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        q = self.q.expand(b, -1, -1).reshape(b, 1, self.heads, self.head_dim).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, 1, d)
        return self.proj(out)[:, 0]


class AttentiveProbe(nn.Module):
    """Single-query cross-attention probe; with_mlp adds the residual MLP."""

    def __init__(self, dim: int, heads: int, classes: int, with_mlp: bool):
        super().__init__()
        self.xattn = CrossAttention(dim, heads)
        self.with_mlp = with_mlp
        if with_mlp:
            self.norm = nn.LayerNorm(dim)
            self.mlp = Mlp(dim)
        self.head = nn.Linear(dim, classes)

    def forward(self, states: Tensor, num_globals: int) -> Tensor:
        x = self.xattn(states)
        if self.with_mlp:
            x = x + self.mlp(self.norm(x))
        return self.head(x)


def make_probe(kind: str, dim: int, heads: int, classes: int, has_cls: bool) -> nn.Module:
    if kind == "patch_mean":
        return PatchMeanProbe(dim, classes)
    if kind == "cls":
        if not has_cls:
            raise MissingClsError("encoder has no CLS token; CLS probe unavailable")
        return ClsProbe(dim, classes)
    if kind == "xattn":
        return AttentiveProbe(dim, heads, classes, with_mlp=False)
    if kind == "xblk":
        return AttentiveProbe(dim, heads, classes, with_mlp=True)
    raise ValueError(f"unknown probe kind {kind!r}")


def probe_forward(kind: str, probe: nn.Module, states: Tensor, num_globals: int) -> Tensor:
    """Logits for one probe given frozen encoder outputs."""
    return probe(states, num_globals)


@dataclass
class ProbeResult:
    kind: str
    rows: list[tuple[float, float, float]]  # (lr, wd, accuracy)
    best_lr: float
    best_wd: float
    best_accuracy: float


def train_probe(
    encoder: ViTEncoder,
    dataset,
    cfg: TrainConfig,
    seed: int | None = None,
) -> ProbeResult:
    """Train probes for every (lr, wd) grid cell on shared frozen features.

    The dataset's trailing ``val_fraction`` is held out; accuracy is top-1 on
    centre-crop eval views.  The encoder is never updated.
    """
    spec = cfg.probe
    seed = cfg.train.seed if seed is None else seed
    encoder = encoder.eval()
    encoder.requires_grad_(False)
    has_cls = cfg.model.cls_tokens > 0
    dim, heads = cfg.model.width, cfg.model.heads
    classes = dataset.num_classes
    side = cfg.data.image_side

    n = len(dataset)
    n_val = max(1, round(n * spec.val_fraction))
    train_idx = np.arange(n - n_val)
    val_idx = np.arange(n - n_val, n)

    torch.manual_seed(derive_seed(seed ^ _PROBE_AUG_SALT, 0, 1))
    grid = [(lr, wd) for lr in spec.lr_grid for wd in spec.wd_grid]
    probes = [make_probe(spec.kind, dim, heads, classes, has_cls) for _ in grid]
    opts = [
        AdamW(list(p.named_parameters()), betas=(0.9, 0.999), weight_decay=wd)
        for p, (_, wd) in zip(probes, grid)
    ]
    steps_per_epoch = max(1, len(train_idx) // spec.batch_size)
    total_steps = spec.epochs * steps_per_epoch
    warmup = min(spec.warmup_epochs * steps_per_epoch, total_steps - 1)
    schedules = [
        LrSchedule(
            lr_init=lr * 1e-3, lr_max=lr, lr_final=lr * 1e-3,
            warmup_steps=max(warmup, 1), total_steps=total_steps,
        )
        for (lr, _) in grid
    ]

    step = 0
    for epoch in range(spec.epochs):
        rng = np.random.Generator(
            np.random.PCG64(derive_seed(seed ^ _PROBE_AUG_SALT, epoch, 0))
        )
        order = rng.permutation(train_idx)
        for b in range(steps_per_epoch):
            idx = order[b * spec.batch_size : (b + 1) * spec.batch_size]
            if len(idx) == 0:
                continue
            images = np.stack(
                [
                    augment_probe(
                        dataset.image(int(i)),
                        derive_seed(seed ^ _PROBE_AUG_SALT, epoch, int(i)),
                        out_side=side,
                        mean=cfg.data.norm_mean,
                        std=cfg.data.norm_std,
                    )
                    for i in idx
                ]
            )
            labels = torch.as_tensor(dataset.labels[idx], dtype=torch.long)
            with torch.no_grad():
                res = encoder(torch.from_numpy(images))
            states = res.states.detach()
            for probe, opt, sched in zip(probes, opts, schedules):
                probe.train()
                logits = probe(states, res.num_globals)
                loss = F.cross_entropy(logits, labels)
                opt.zero_grad()
                loss.backward()
                opt.step(lr_at(step, sched))
            step += 1

    # Evaluation on the held-out split with centre-crop views.
    correct = np.zeros(len(grid), dtype=np.int64)
    bs = spec.batch_size
    for start in range(0, len(val_idx), bs):
        idx = val_idx[start : start + bs]
        images = np.stack(
            [
                eval_transform(
                    dataset.image(int(i)), out_side=side,
                    mean=cfg.data.norm_mean, std=cfg.data.norm_std,
                )
                for i in idx
            ]
        )
        labels = torch.as_tensor(dataset.labels[idx], dtype=torch.long)
        with torch.no_grad():
            res = encoder(torch.from_numpy(images))
            for k, probe in enumerate(probes):
                probe.eval()
                pred = probe(res.states, res.num_globals).argmax(dim=1)
                correct[k] += int((pred == labels).sum())
    accs = correct / len(val_idx)

    rows = [(lr, wd, float(acc)) for (lr, wd), acc in zip(grid, accs)]
    best = int(np.argmax(accs))
    return ProbeResult(
        kind=spec.kind,
        rows=rows,
        best_lr=grid[best][0],
        best_wd=grid[best][1],
        best_accuracy=float(accs[best]),
    )
