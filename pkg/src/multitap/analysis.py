"""Representation analysis over embedding dumps.

Inter-layer similarity as mean per-position Pearson correlation and as
linear CKA over flattened (image x token) samples, target-layer correlation
profiles, and spatial autocorrelation with azimuthal averaging.  Global
tokens are excluded: dumps carry patch tokens only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import EmbeddingDump


class MissingLayerError(KeyError):
    pass


class DegenerateLayerError(ValueError):
    pass


def _unit_rows(x: np.ndarray) -> np.ndarray:
    """Center and scale the last axis to unit population std.

    Zero-variance vectors become all-zero, so they contribute correlation 0
    wherever they appear (and are still counted in averages).
    """
    x = x.astype(np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    std = centered.std(axis=-1, keepdims=True)
    out = np.zeros_like(centered)
    np.divide(centered, std, out=out, where=std > 0)
    return out


def pearson_matrix(dump: EmbeddingDump) -> np.ndarray:
    """Mean Pearson correlation between layers at matching positions.

    Entry (a, b) averages, over every (image, token) position, the Pearson
    correlation between the two layers' embedding vectors at that position.
    The diagonal is exactly 1 by definition.
    """
    names = dump.layer_names
    units = {name: _unit_rows(dump.layers[name]) for name in names}
    dims = {name: dump.layers[name].shape[-1] for name in names}
    n_layers = len(names)
    out = np.eye(n_layers)
    for a in range(n_layers):
        ua = units[names[a]]
        for b in range(a + 1, n_layers):
            ub = units[names[b]]
            if dims[names[a]] != dims[names[b]]:
                raise DegenerateLayerError(
                    f"layers {names[a]} and {names[b]} have different widths"
                )
            r = float(np.mean(np.sum(ua * ub, axis=-1) / dims[names[a]]))
            out[a, b] = out[b, a] = r
    return out


def _linear_hsic(xc: np.ndarray, yc: np.ndarray) -> float:
    return float(np.sum((xc.T @ yc) ** 2))


def cka_matrix(dump: EmbeddingDump) -> np.ndarray:
    """Linear CKA between layers over column-centered (image*token, dim)."""
    names = dump.layer_names
    flats = {}
    norms = {}
    for name in names:
        arr = dump.layers[name].astype(np.float64)
        flat = arr.reshape(-1, arr.shape[-1])
        flat = flat - flat.mean(axis=0, keepdims=True)
        flats[name] = flat
        self_h = _linear_hsic(flat, flat)
        if self_h == 0.0:
            raise DegenerateLayerError(f"layer {name} is all-zero after centering")
        norms[name] = self_h
    n_layers = len(names)
    out = np.eye(n_layers)
    for a in range(n_layers):
        for b in range(a + 1, n_layers):
            h = _linear_hsic(flats[names[a]], flats[names[b]])
            val = h / np.sqrt(norms[names[a]] * norms[names[b]])
            out[a, b] = out[b, a] = val
    return out


def target_layer_profiles(
    dump: EmbeddingDump, tap_layer_names: list[str]
) -> dict[str, np.ndarray]:
    """Pearson-matrix rows for the distillation target layers."""
    matrix = pearson_matrix(dump)
    index = {name: i for i, name in enumerate(dump.layer_names)}
    profiles = {}
    for name in tap_layer_names:
        if name not in index:
            raise MissingLayerError(name)
        profiles[name] = matrix[index[name]]
    return profiles


@dataclass
class SpatialAutocorr:
    offsets: np.ndarray  # rows of (d_row, d_col, correlation)
    radial_distance: np.ndarray
    radial_correlation: np.ndarray


def spatial_autocorr(layer: np.ndarray, grid_h: int, grid_w: int) -> SpatialAutocorr:
    """Mean Pearson correlation between token pairs at each spatial offset.

    Offsets cover d_row in [0, grid_h) and d_col in (-grid_w, grid_w), with
    the redundant (0, negative) half omitted; correlation at an offset is the
    average over all valid token pairs and all images.  The radial profile is
    the plain mean over offsets sharing a Euclidean distance.
    """
    n_img, n_tok, dim = layer.shape
    if n_tok != grid_h * grid_w:
        raise ValueError(f"token count {n_tok} does not match {grid_h}x{grid_w}")
    units = _unit_rows(layer).reshape(n_img, grid_h, grid_w, dim)
    rows = []
    for dr in range(grid_h):
        for dc in range(-grid_w + 1, grid_w):
            if dr == 0 and dc < 0:
                continue
            r0 = slice(0, grid_h - dr)
            r1 = slice(dr, grid_h)
            if dc >= 0:
                c0, c1 = slice(0, grid_w - dc), slice(dc, grid_w)
            else:
                c0, c1 = slice(-dc, grid_w), slice(0, grid_w + dc)
            a = units[:, r0, c0]
            b = units[:, r1, c1]
            corr = float(np.mean(np.sum(a * b, axis=-1) / dim))
            rows.append((dr, dc, corr))
    offsets = np.array(rows, dtype=np.float64)
    dist = np.hypot(offsets[:, 0], offsets[:, 1]).round(9)
    uniq = np.unique(dist)
    radial = np.array([offsets[dist == d, 2].mean() for d in uniq])
    return SpatialAutocorr(offsets=offsets, radial_distance=uniq, radial_correlation=radial)


def compute_embedding_dump(
    encoder,
    dataset,
    cfg,
    n_images: int,
    source_hash: str = "",
    batch_size: int = 64,
) -> EmbeddingDump:
    """Encode eval views of the first ``n_images`` samples and collect the
    tokenizer output, every block output, and the layer-normed final state
    (patch tokens only)."""
    import torch

    from .data import eval_transform
    from .vit import LayerTap, plain_layer_norm

    vit = cfg.vit_config()
    n_images = min(n_images, len(dataset))
    taps = {LayerTap("tokenizer")} | {
        LayerTap("block_out", l) for l in range(1, vit.depth + 1)
    }
    names = ["tokenizer"] + [f"block_{l}" for l in range(1, vit.depth + 1)] + ["final"]
    parts: dict[str, list[np.ndarray]] = {name: [] for name in names}
    encoder = encoder.eval()
    for start in range(0, n_images, batch_size):
        idx = range(start, min(start + batch_size, n_images))
        images = np.stack(
            [
                eval_transform(
                    dataset.image(i), out_side=cfg.data.image_side,
                    mean=cfg.data.norm_mean, std=cfg.data.norm_std,
                )
                for i in idx
            ]
        )
        with torch.no_grad():
            res = encoder(torch.from_numpy(images), taps=taps)
            parts["tokenizer"].append(res.captures[LayerTap("tokenizer")].numpy())
            for l in range(1, vit.depth + 1):
                parts[f"block_{l}"].append(res.captures[LayerTap("block_out", l)].numpy())
            final = plain_layer_norm(res.captures[LayerTap("block_out", vit.depth)])
            parts["final"].append(final.numpy())
    layers = {name: np.concatenate(chunks, axis=0) for name, chunks in parts.items()}
    return EmbeddingDump(
        layer_names=names,
        layers=layers,
        grid_h=vit.grid_side,
        grid_w=vit.grid_side,
        source_hash=source_hash,
    )
