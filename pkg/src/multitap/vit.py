"""Small vision transformer encoder and predictor with per-layer taps.

Pre-norm blocks (attention + GELU MLP, expansion 4), one CLS token and a
configurable number of register tokens, frozen 2-D sin-cos position
embeddings, and sparse visible-token processing.  Every block exposes its
internal states (attention residual, mid state, MLP residual, output) so any
of them can be captured as a distillation target.

The predictor processes the four mask regions in strictly separate forward
passes: tokens inside one region attend to the shared context (projected CLS
and visible-patch states) and to each other, never to another region's mask
tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn


class DimNotDivisibleError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


class BadIndexError(ValueError):
    pass


class EmptyRegionError(ValueError):
    pass


@dataclass(frozen=True)
class ViTConfig:
    image_side: int = 224
    patch_side: int = 16
    channels: int = 3
    depth: int = 12
    width: int = 768
    heads: int = 12
    registers: int = 4
    cls_tokens: int = 1

    def __post_init__(self) -> None:
        if self.image_side % self.patch_side:
            raise ShapeMismatchError(
                f"image side {self.image_side} not divisible by patch side {self.patch_side}"
            )
        if self.width % self.heads:
            raise ShapeMismatchError(f"width {self.width} not divisible by heads {self.heads}")
        if self.width % 4:
            raise DimNotDivisibleError(f"width {self.width} must be divisible by 4")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def num_patches(self) -> int:
        return self.grid_side**2

    @property
    def patch_dim(self) -> int:
        return self.patch_side**2 * self.channels

    @property
    def num_globals(self) -> int:
        return self.cls_tokens + self.registers


@dataclass(frozen=True)
class PredictorConfig:
    depth: int = 10
    width: int = 384
    heads: int = 16
    registers: int = 4
    output_dim: int = 3072

    def __post_init__(self) -> None:
        if self.width % self.heads:
            raise ShapeMismatchError(f"width {self.width} not divisible by heads {self.heads}")
        if self.width % 4:
            raise DimNotDivisibleError(f"width {self.width} must be divisible by 4")


# Tap kinds: intermediate representations that can serve as targets.
TAP_BLOCK_OUT = "block_out"
TAP_BLOCK_MID = "block_mid"
TAP_ATTN_RESIDUAL = "attn_residual"
TAP_MLP_RESIDUAL = "mlp_residual"
TAP_TOKENIZER = "tokenizer"
TAP_PIXELS = "pixels"

_BLOCK_KINDS = (TAP_BLOCK_OUT, TAP_BLOCK_MID, TAP_ATTN_RESIDUAL, TAP_MLP_RESIDUAL)


@dataclass(frozen=True, order=True)
class LayerTap:
    """One tappable representation: a block-level state, the tokenizer
    output (post position embedding), or raw per-patch pixels."""

    kind: str
    layer: int = 0

    def __post_init__(self) -> None:
        if self.kind in _BLOCK_KINDS:
            if self.layer < 1:
                raise BadIndexError(f"block tap needs layer >= 1, got {self.layer}")
        elif self.kind in (TAP_TOKENIZER, TAP_PIXELS):
            if self.layer != 0:
                raise BadIndexError(f"{self.kind} tap takes no layer index")
        else:
            raise BadIndexError(f"unknown tap kind {self.kind!r}")

    def dim(self, cfg: ViTConfig) -> int:
        return cfg.patch_dim if self.kind == TAP_PIXELS else cfg.width

    @classmethod
    def parse(cls, text: str) -> "LayerTap":
        """Parse 'block_out:4', 'tokenizer', 'pixels', ..."""
        if ":" in text:
            kind, _, layer = text.partition(":")
            return cls(kind=kind.strip(), layer=int(layer))
        return cls(kind=text.strip())

    def __str__(self) -> str:
        if self.kind in _BLOCK_KINDS:
            return f"{self.kind}:{self.layer}"
        return self.kind


def sincos_pos_embed(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """Frozen 2-D sin-cos table of shape [grid_h * grid_w, dim].

    The first half of ``dim`` encodes the row index, the second half the
    column index; each half is [sin, cos] over dim/4 geometric frequencies.
    """
    if dim % 4:
        raise DimNotDivisibleError(f"embedding dim {dim} must be divisible by 4")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)

    def one_axis(pos: np.ndarray) -> np.ndarray:
        out = np.outer(pos, omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    rows = np.repeat(np.arange(grid_h, dtype=np.float64), grid_w)
    cols = np.tile(np.arange(grid_w, dtype=np.float64), grid_h)
    return np.concatenate([one_axis(rows), one_axis(cols)], axis=1).astype(np.float32)


def patchify(images: Tensor, patch_side: int) -> Tensor:
    """[B, R, R, C] channel-last images -> [B, N, P*P*C] patch vectors.

    Patches are ordered row-major; within a patch, pixels are row-major with
    channels contiguous (matching the image layout).
    """
    if images.ndim != 4:
        raise ShapeMismatchError(f"expected [B, H, W, C], got {tuple(images.shape)}")
    b, hh, ww, c = images.shape
    if hh % patch_side or ww % patch_side:
        raise ShapeMismatchError(f"image {hh}x{ww} not divisible by patch {patch_side}")
    gh, gw = hh // patch_side, ww // patch_side
    x = images.reshape(b, gh, patch_side, gw, patch_side, c)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch_side * patch_side * c)


def unpatchify(patches: Tensor, patch_side: int, grid_h: int, grid_w: int, channels: int) -> Tensor:
    b = patches.shape[0]
    x = patches.reshape(b, grid_h, grid_w, patch_side, patch_side, channels)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, grid_h * patch_side, grid_w * patch_side, channels)


def _trunc_normal_(tensor: Tensor, std: float = 0.02) -> None:
    nn.init.trunc_normal_(tensor, std=std, a=-2 * std, b=2 * std)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, expansion: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * expansion)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(dim * expansion, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block exposing its internal states."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim)

    def forward(self, z: Tensor) -> Tensor:
        out, _ = self.forward_with_taps(z)
        return out

    def forward_with_taps(self, z: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
        r_attn = self.attn(self.norm1(z))
        z_mid = z + r_attn
        r_mlp = self.mlp(self.norm2(z_mid))
        z_out = z_mid + r_mlp
        taps = {
            TAP_ATTN_RESIDUAL: r_attn,
            TAP_BLOCK_MID: z_mid,
            TAP_MLP_RESIDUAL: r_mlp,
            TAP_BLOCK_OUT: z_out,
        }
        return z_out, taps


@dataclass
class EncodeResult:
    """Final hidden states plus any captured taps.

    ``states`` is [B, num_globals + T, width] with globals first.  Block and
    tokenizer captures cover the patch positions only, in the same order as
    the input patch sequence (full grid for the teacher, the visible subset
    for the student).  The pixels capture is [B, T, patch_dim].
    """

    states: Tensor
    captures: dict[LayerTap, Tensor]
    num_globals: int

    @property
    def cls_state(self) -> Tensor:
        return self.states[:, 0]

    @property
    def patch_states(self) -> Tensor:
        return self.states[:, self.num_globals :]


class ViTEncoder(nn.Module):
    """ViT over channel-last images with optional sparse visible subsets."""

    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_proj = nn.Linear(cfg.patch_dim, cfg.width)
        if cfg.cls_tokens:
            self.cls_token = nn.Parameter(torch.zeros(1, cfg.cls_tokens, cfg.width))
        else:
            self.cls_token = None
        if cfg.registers:
            self.register_tokens = nn.Parameter(torch.zeros(1, cfg.registers, cfg.width))
        else:
            self.register_tokens = None
        pos = sincos_pos_embed(cfg.grid_side, cfg.grid_side, cfg.width)
        self.register_buffer("pos_embed", torch.from_numpy(pos), persistent=False)
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads) for _ in range(cfg.depth))
        self._init_weights()

    def _init_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Linear):
                _trunc_normal_(m.weight)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        if self.cls_token is not None:
            _trunc_normal_(self.cls_token)
        if self.register_tokens is not None:
            _trunc_normal_(self.register_tokens)

    def forward(
        self,
        images: Tensor,
        visible: Tensor | None = None,
        taps: frozenset[LayerTap] | set[LayerTap] = frozenset(),
    ) -> EncodeResult:
        cfg = self.cfg
        patches = patchify(images, cfg.patch_side)
        if patches.shape[1] != cfg.num_patches:
            raise ShapeMismatchError(
                f"expected {cfg.num_patches} patches, got {patches.shape[1]}"
            )
        captures: dict[LayerTap, Tensor] = {}

        tokens = self.patch_proj(patches) + self.pos_embed.to(patches.dtype)
        if visible is not None:
            if visible.ndim != 2:
                raise BadIndexError("visible must be [B, V]")
            if int(visible.min()) < 0 or int(visible.max()) >= cfg.num_patches:
                raise BadIndexError("visible index out of range")
            gather = visible.unsqueeze(-1).expand(-1, -1, cfg.width)
            tokens = torch.gather(tokens, 1, gather)
            if LayerTap(TAP_PIXELS) in taps:
                pg = visible.unsqueeze(-1).expand(-1, -1, cfg.patch_dim)
                captures[LayerTap(TAP_PIXELS)] = torch.gather(patches, 1, pg)
        elif LayerTap(TAP_PIXELS) in taps:
            captures[LayerTap(TAP_PIXELS)] = patches
        if LayerTap(TAP_TOKENIZER) in taps:
            captures[LayerTap(TAP_TOKENIZER)] = tokens

        globals_ = []
        if self.cls_token is not None:
            globals_.append(self.cls_token.to(tokens.dtype).expand(tokens.shape[0], -1, -1))
        if self.register_tokens is not None:
            globals_.append(self.register_tokens.to(tokens.dtype).expand(tokens.shape[0], -1, -1))
        z = torch.cat(globals_ + [tokens], dim=1) if globals_ else tokens

        ng = cfg.num_globals
        for i, block in enumerate(self.blocks, start=1):
            z, block_taps = block.forward_with_taps(z)
            for kind in _BLOCK_KINDS:
                tap = LayerTap(kind, i)
                if tap in taps:
                    captures[tap] = block_taps[kind][:, ng:]
        return EncodeResult(states=z, captures=captures, num_globals=ng)


class Predictor(nn.Module):
    """Region-parallel predictor emitting the concatenated target vector.

    Per region the sequence is [predictor registers | projected CLS |
    projected visible patches | mask tokens]; a frozen sin-cos embedding at
    predictor width is added to patch-position tokens (visible and mask).
    Regions never share a forward pass, so predictions for one region are
    bitwise independent of every other region's membership.
    """

    def __init__(self, cfg: PredictorConfig, encoder_cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder_cfg = encoder_cfg
        self.input_proj = nn.Linear(encoder_cfg.width, cfg.width)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.width))
        if cfg.registers:
            self.register_tokens = nn.Parameter(torch.zeros(1, cfg.registers, cfg.width))
        else:
            self.register_tokens = None
        pos = sincos_pos_embed(encoder_cfg.grid_side, encoder_cfg.grid_side, cfg.width)
        self.register_buffer("pos_embed", torch.from_numpy(pos), persistent=False)
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.width)
        self.readout = nn.Linear(cfg.width, cfg.output_dim)
        self._init_weights()

    def _init_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Linear):
                _trunc_normal_(m.weight)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        _trunc_normal_(self.mask_token)
        if self.register_tokens is not None:
            _trunc_normal_(self.register_tokens)

    def forward_region(
        self, cls_state: Tensor | None, patch_states: Tensor, visible_pos: Tensor, region_pos: Tensor
    ) -> Tensor:
        """Predict one region: returns [B, |region|, output_dim]."""
        if region_pos.numel() == 0:
            raise EmptyRegionError("predictor region is empty")
        b = patch_states.shape[0]
        dtype = patch_states.dtype
        pos = self.pos_embed.to(dtype)
        ctx = self.input_proj(patch_states) + pos[visible_pos]
        parts = []
        if self.register_tokens is not None:
            parts.append(self.register_tokens.to(dtype).expand(b, -1, -1))
        if cls_state is not None:
            parts.append(self.input_proj(cls_state).unsqueeze(1))
        parts.append(ctx)
        masked = self.mask_token.to(dtype) + pos[region_pos]
        parts.append(masked)
        z = torch.cat(parts, dim=1)
        for block in self.blocks:
            z = block(z)
        n_mask = region_pos.shape[1]
        return self.readout(self.norm(z[:, -n_mask:]))

    def forward(
        self,
        cls_state: Tensor | None,
        patch_states: Tensor,
        visible_pos: Tensor,
        regions: list[Tensor],
    ) -> Tensor:
        """Predict all regions; rows ordered (sample, region, token).

        Returns [B * sum(|region|), output_dim], sample-major: for each
        sample, region 0's tokens in index order, then region 1's, ...
        """
        per_region = [
            self.forward_region(cls_state, patch_states, visible_pos, r) for r in regions
        ]
        stacked = torch.cat(per_region, dim=1)  # [B, sum M_r, out]
        return stacked.reshape(-1, self.cfg.output_dim)


def plain_layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Parameter-free layer norm over the last dimension."""
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)
