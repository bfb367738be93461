"""Pretraining orchestration.

Per step: the EMA teacher encodes the full images and the configured taps are
captured (no gradients); z-scored targets are assembled; the student encoder
sees only the visible tokens; the predictor fills in the four mask regions;
the loss gradient flows back; the optimizer updates the student; the teacher
is EMA-updated.  Masks depend only on (global seed, epoch, global batch
index) and augmentations only on (global seed, epoch, sample index), so a
checkpoint resume reproduces the uninterrupted run bit-exactly.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig, config_hash, config_to_dict, dump_config
from .data import augment_pretrain, load_image_folder, synthetic_shapes
from .distill import build_targets, ema_update
from .losses import LossKind, Reduction, compute_loss, monitor_loss
from .masking import WorkerBatchMasks, generate_worker_batch_masks
from .optim import AdamW
from .seeding import (
    AUGMENT_STREAM_SALT,
    INIT_STREAM_SALT,
    MASK_STREAM_SALT,
    SHUFFLE_STREAM_SALT,
    derive_seed,
)
from .vit import Predictor, ViTEncoder


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, checkpoint_path: Path | None = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


def warmup_epochs(total_epochs: int) -> int:
    """Warmup duration scaled to the run length: round(33 + 0.12 * E)."""
    if total_epochs < 1:
        raise ValueError(f"total_epochs must be >= 1, got {total_epochs}")
    return round(33 + 0.12 * total_epochs)


@dataclass(frozen=True)
class LrSchedule:
    lr_init: float
    lr_max: float
    lr_final: float
    warmup_steps: int
    total_steps: int
    stretch: float = 1.0


def lr_at(step: int, sched: LrSchedule) -> float:
    """Linear warmup then cosine annealing over a stretched horizon.

    The cosine runs from ``lr_max`` at the warmup boundary to ``lr_final`` at
    the end of the stretched horizon (stretch * total_steps - 1); with
    stretch > 1 only the prefix up to the real final step is traversed.
    """
    if not 0 <= step < sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps})")
    wu = sched.warmup_steps
    if step < wu:
        return sched.lr_init + (sched.lr_max - sched.lr_init) * (step / wu)
    horizon = sched.stretch * sched.total_steps - 1 - wu
    progress = (step - wu) / horizon if horizon > 0 else 1.0
    return sched.lr_final + (sched.lr_max - sched.lr_final) * 0.5 * (
        1.0 + math.cos(math.pi * progress)
    )


@dataclass
class StepMetrics:
    step: int
    lr: float
    loss: float | None
    grad_norm: float
    seen_fraction: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "lr": self.lr,
                "loss": self.loss,
                "grad_norm": self.grad_norm,
                "seen_fraction": self.seen_fraction,
                "wall_ms": self.wall_ms,
            }
        )


def build_dataset(cfg: TrainConfig):
    d = cfg.data
    if d.kind == "synthetic":
        return synthetic_shapes(
            n=d.num_samples,
            classes=d.num_classes,
            side=d.image_side,
            seed=derive_seed(cfg.train.seed, 0, 0x64617461),
        )
    return load_image_folder(d.root)


class Trainer:
    def __init__(self, cfg: TrainConfig, out_dir: str | Path):
        cfg.validate()
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.dataset = build_dataset(cfg)
        self.vit_cfg = cfg.vit_config()
        self.mask_cfg = cfg.mask_config()
        self.target_spec = cfg.target_spec()
        self.loss_spec = cfg.loss_spec()

        torch.manual_seed(derive_seed(cfg.train.seed ^ INIT_STREAM_SALT, 0, 0) % (1 << 63))
        self.encoder = ViTEncoder(self.vit_cfg)
        self.predictor = Predictor(cfg.predictor_config(), self.vit_cfg)
        self.teacher = copy.deepcopy(self.encoder)
        self.teacher.requires_grad_(False)

        self.optimizer = AdamW(
            [(f"encoder/{n}", p) for n, p in self.encoder.named_parameters()]
            + [(f"predictor/{n}", p) for n, p in self.predictor.named_parameters()],
            betas=(cfg.optim.beta1, cfg.optim.beta2),
            eps=cfg.optim.eps,
            weight_decay=cfg.optim.weight_decay,
        )

        n = len(self.dataset)
        batch = cfg.train.batch_size
        if n < batch:
            raise ConfigError(f"dataset of {n} samples is smaller than batch size {batch}")
        self.steps_per_epoch = n // batch
        total = cfg.train.epochs * self.steps_per_epoch
        if cfg.train.max_steps > 0:
            total = min(total, cfg.train.max_steps)
        self.total_steps = total

        wu_epochs = cfg.optim.warmup_epochs
        if wu_epochs < 0:
            wu_epochs = warmup_epochs(cfg.train.epochs)
        if not 0 < wu_epochs < cfg.train.epochs * cfg.optim.schedule_stretch:
            raise ConfigError(
                f"warmup epochs {wu_epochs} must lie in (0, epochs * stretch)"
            )
        scale = batch / cfg.optim.lr_reference_batch
        warmup_steps = min(wu_epochs * self.steps_per_epoch, max(total - 1, 1))
        self.schedule = LrSchedule(
            lr_init=cfg.optim.lr_init * scale,
            lr_max=cfg.optim.lr_max * scale,
            lr_final=cfg.optim.lr_final * scale,
            warmup_steps=warmup_steps,
            total_steps=total,
            stretch=cfg.optim.schedule_stretch,
        )

        self.worker_batch = cfg.train.worker_batch if cfg.train.worker_batch > 0 else batch
        self.step = 0  # completed steps
        self._hash = config_hash(cfg)

    # ---- data & masks ----------------------------------------------------

    def _epoch_order(self, epoch: int) -> np.ndarray:
        rng = np.random.Generator(
            np.random.PCG64(derive_seed(self.cfg.train.seed ^ SHUFFLE_STREAM_SALT, epoch, 0))
        )
        return rng.permutation(len(self.dataset))

    def assemble_batch(self, epoch: int, batch_index: int) -> tuple[torch.Tensor, list[WorkerBatchMasks]]:
        cfg = self.cfg
        order = self._epoch_order(epoch)
        b = cfg.train.batch_size
        indices = order[batch_index * b : (batch_index + 1) * b]
        images = np.stack(
            [
                augment_pretrain(
                    self.dataset.image(int(idx)),
                    derive_seed(cfg.train.seed ^ AUGMENT_STREAM_SALT, epoch, int(idx)),
                    out_side=cfg.data.image_side,
                    area_range=cfg.data.crop_area,
                    aspect_range=cfg.data.crop_aspect,
                    hflip=cfg.data.hflip,
                    mean=cfg.data.norm_mean,
                    std=cfg.data.norm_std,
                )
                for idx in indices
            ]
        )
        base = derive_seed(cfg.train.seed ^ MASK_STREAM_SALT, epoch, batch_index)
        chunks = []
        for j, start in enumerate(range(0, b, self.worker_batch)):
            size = min(self.worker_batch, b - start)
            chunks.append(
                generate_worker_batch_masks(derive_seed(base, 0, j), size, self.mask_cfg)
            )
        return torch.from_numpy(images), chunks

    # ---- one optimisation step -------------------------------------------

    def train_step(
        self, images: torch.Tensor, chunk_masks: list[WorkerBatchMasks]
    ) -> StepMetrics:
        t0 = time.perf_counter()
        cfg = self.cfg
        step_number = self.step + 1  # 1-based for logging/monitoring
        lr = lr_at(self.step, self.schedule)
        monitored = step_number % self.loss_spec.monitor_every == 0

        with torch.no_grad():
            teacher_res = self.teacher(images, taps=set(self.target_spec.taps))

        self.optimizer.zero_grad()
        mean_reduction = Reduction(self.loss_spec.reduction) is Reduction.MEAN
        chunk_losses: list[torch.Tensor] = []
        chunk_numels: list[int] = []
        monitor_parts: list[float] = []
        seen_parts: list[float] = []
        offset = 0
        for masks in chunk_masks:
            bc = len(masks.samples)
            sl = slice(offset, offset + bc)
            offset += bc
            taps_chunk = {tap: cap[sl] for tap, cap in teacher_res.captures.items()}
            targets = build_targets(taps_chunk, masks, self.target_spec)
            visible = torch.from_numpy(np.stack([ms.visible for ms in masks.samples]))
            student_res = self.encoder(images[sl], visible=visible)
            cls_state = student_res.cls_state if self.vit_cfg.cls_tokens else None
            regions = [
                torch.from_numpy(np.stack([ms.regions[r] for ms in masks.samples]))
                for r in range(len(masks.samples[0].regions))
            ]
            preds = self.predictor(cls_state, student_res.patch_states, visible, regions)
            chunk_losses.append(compute_loss(preds, targets.values, self.loss_spec))
            chunk_numels.append(preds.numel())
            seen_parts.append(masks.visible_len / self.mask_cfg.num_tokens * bc)
            if monitored:
                monitor_parts.append(float(monitor_loss(preds, targets.values, self.loss_spec)))
        total_numel = sum(chunk_numels)
        if mean_reduction:
            loss = sum(l * (n / total_numel) for l, n in zip(chunk_losses, chunk_numels))
        else:
            loss = sum(chunk_losses)
        loss.backward()
        grad_norm = self.optimizer.grad_norm()

        loss_value: float | None = None
        if monitored:
            if mean_reduction:
                loss_value = sum(
                    v * n for v, n in zip(monitor_parts, chunk_numels)
                ) / total_numel
            else:
                loss_value = sum(monitor_parts)
        bad_monitor = loss_value is not None and not math.isfinite(loss_value)
        if not math.isfinite(grad_norm) or bad_monitor:
            path = self.out_dir / f"diagnostic-step{step_number}.ckpt"
            self.save(path)
            raise NonFiniteLossError(
                f"non-finite {'loss' if bad_monitor else 'gradient'} at step {step_number}",
                checkpoint_path=path,
            )

        self.optimizer.step(lr)
        ema_update(self.teacher, self.encoder, cfg.optim.ema_momentum)
        self.step = step_number
        return StepMetrics(
            step=step_number,
            lr=lr,
            loss=loss_value,
            grad_norm=grad_norm,
            seen_fraction=sum(seen_parts) / images.shape[0],
            wall_ms=(time.perf_counter() - t0) * 1e3,
        )

    # ---- checkpointing -----------------------------------------------------

    def _arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, p in self.encoder.named_parameters():
            out[f"student/encoder/{name}"] = p.detach().numpy()
        for name, p in self.predictor.named_parameters():
            out[f"student/predictor/{name}"] = p.detach().numpy()
        for name, p in self.teacher.named_parameters():
            out[f"teacher/{name}"] = p.detach().numpy()
        for name, t in self.optimizer.state_arrays().items():
            out[name] = t.detach().numpy()
        return out

    def save(self, path: str | Path) -> None:
        extra = {
            "opt_t": self.optimizer.t,
            "torch_rng": torch.get_rng_state().numpy().tobytes().hex(),
        }
        save_checkpoint(
            path,
            step=self.step,
            config=config_to_dict(self.cfg),
            config_hash=self._hash,
            arrays=self._arrays(),
            extra=extra,
        )

    def load(self, path: str | Path) -> None:
        ckpt = load_checkpoint(path)
        if ckpt.config_hash != self._hash:
            raise ConfigError(
                "checkpoint was produced by a different config "
                f"({ckpt.config_hash[:12]} != {self._hash[:12]})"
            )
        restore_module(self.encoder, ckpt, "student/encoder/")
        restore_module(self.predictor, ckpt, "student/predictor/")
        restore_module(self.teacher, ckpt, "teacher/")
        self.optimizer.load_state_arrays(
            {
                name: torch.from_numpy(arr)
                for name, arr in ckpt.arrays.items()
                if name.startswith("opt/")
            },
            t=ckpt.extra["opt_t"],
        )
        rng_hex = ckpt.extra.get("torch_rng")
        if rng_hex:
            torch.set_rng_state(torch.frombuffer(bytearray.fromhex(rng_hex), dtype=torch.uint8))
        self.step = ckpt.step

    # ---- full run ----------------------------------------------------------

    def run(self, resume_from: str | Path | None = None) -> Path:
        (self.out_dir / "resolved-config.toml").write_text(dump_config(self.cfg))
        if resume_from is not None:
            self.load(resume_from)
        metrics_path = self.out_dir / "metrics.jsonl"
        every = self.cfg.train.checkpoint_every
        with open(metrics_path, "a") as metrics_file:
            while self.step < self.total_steps:
                epoch = self.step // self.steps_per_epoch
                batch_index = self.step % self.steps_per_epoch
                images, chunks = self.assemble_batch(epoch, batch_index)
                metrics = self.train_step(images, chunks)
                metrics_file.write(metrics.to_json() + "\n")
                if every > 0 and self.step % every == 0 and self.step < self.total_steps:
                    self.save(self.out_dir / f"checkpoint-step{self.step}.ckpt")
        final = self.out_dir / "checkpoint-final.ckpt"
        self.save(final)
        return final


def restore_module(module: torch.nn.Module, ckpt: Checkpoint, prefix: str) -> None:
    params = dict(module.named_parameters())
    found = {k[len(prefix):] for k in ckpt.arrays if k.startswith(prefix)}
    if found != set(params):
        raise ConfigError(f"checkpoint arrays under {prefix!r} do not match the module")
    with torch.no_grad():
        for name, p in params.items():
            p.copy_(torch.from_numpy(ckpt.arrays[prefix + name]))


@dataclass
class PretrainedBundle:
    cfg: TrainConfig
    encoder: ViTEncoder
    teacher: ViTEncoder
    predictor: Predictor
    step: int


def load_pretrained(path: str | Path) -> PretrainedBundle:
    """Rebuild the models of a checkpoint without a Trainer."""
    from .config import config_from_dict

    ckpt = load_checkpoint(path)
    cfg = config_from_dict(ckpt.config)
    vit = cfg.vit_config()
    encoder = ViTEncoder(vit)
    predictor = Predictor(cfg.predictor_config(), vit)
    teacher = ViTEncoder(vit)
    restore_module(encoder, ckpt, "student/encoder/")
    restore_module(predictor, ckpt, "student/predictor/")
    restore_module(teacher, ckpt, "teacher/")
    for module in (encoder, teacher, predictor):
        module.requires_grad_(False)
        module.eval()
    return PretrainedBundle(
        cfg=cfg, encoder=encoder, teacher=teacher, predictor=predictor, step=ckpt.step
    )
