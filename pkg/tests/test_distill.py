import numpy as np
import pytest
import torch
from torch import nn

from multitap.distill import (
    MergeOp,
    TapNotCapturedError,
    TargetBatch,
    TargetSpec,
    build_targets,
    default_tap_set,
    ema_update,
    zscore,
)
from multitap.masking import MaskConfig, generate_worker_batch_masks
from multitap.vit import LayerTap, ViTConfig


class TestEmaUpdate:
    def _pair(self, t_val, s_val, dtype=torch.float64):
        t = nn.Linear(3, 3).to(dtype)
        s = nn.Linear(3, 3).to(dtype)
        with torch.no_grad():
            for p in t.parameters():
                p.fill_(t_val)
            for p in s.parameters():
                p.fill_(s_val)
        return t, s

    def test_momentum_one_keeps_teacher(self):
        t, s = self._pair(1.0, 0.0)
        ema_update(t, s, 1.0)
        assert all(torch.all(p == 1.0) for p in t.parameters())

    def test_momentum_zero_copies_student(self):
        t, s = self._pair(1.0, 0.5)
        ema_update(t, s, 0.0)
        assert all(torch.all(p == 0.5) for p in t.parameters())

    def test_two_updates_closed_form(self):
        t, s = self._pair(1.0, 0.0)
        ema_update(t, s, 0.9985)
        assert torch.allclose(t.weight, torch.full_like(t.weight, 0.9985))
        ema_update(t, s, 0.9985)
        assert torch.allclose(t.weight, torch.full_like(t.weight, 0.99700225), atol=1e-12, rtol=0)

    def test_thousand_step_closed_form(self):
        t, s = self._pair(1.0, 0.25)
        m = 0.9985
        for _ in range(1000):
            ema_update(t, s, m)
        expect = m**1000 * 1.0 + (1 - m**1000) * 0.25
        err = (t.weight - expect).abs().max().item()
        assert err < 1e-12

    def test_shape_mismatch_rejected(self):
        t = nn.Linear(3, 3)
        s = nn.Linear(3, 4)
        with pytest.raises(ValueError):
            ema_update(t, s, 0.5)


class TestZscore:
    def test_simple_vector(self):
        out = zscore(torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64), epsilon=1e-12)
        np.testing.assert_allclose(out.numpy(), [-1.224745, 0.0, 1.224745], atol=1e-5)

    def test_constant_vector_is_zero(self):
        out = zscore(torch.full((8,), 3.5))
        assert torch.all(out == 0)

    def test_idempotent(self):
        v = torch.randn(32, dtype=torch.float64)
        once = zscore(v, epsilon=1e-10)
        twice = zscore(once, epsilon=1e-10)
        assert (once - twice).abs().max() < 1e-5


class TestDefaultTapSet:
    @pytest.mark.parametrize(
        "depth,layers",
        [
            (12, (1, 4, 8, 12)),
            (24, (1, 4, 8, 12, 16, 20, 24)),
            (1, (1,)),
            (8, (1, 4, 8)),
            (10, (1, 4, 8, 10)),
        ],
    )
    def test_layers(self, depth, layers):
        taps = default_tap_set(depth)
        assert tuple(t.layer for t in taps) == layers
        assert all(t.kind == "block_out" for t in taps)


def _fake_taps(batch, n, dims, seed=0):
    g = torch.Generator().manual_seed(seed)
    return {tap: torch.randn(batch, n, d, generator=g, dtype=torch.float64) for tap, d in dims.items()}


class TestBuildTargets:
    def setup_method(self):
        self.cfg = MaskConfig(grid_h=8, grid_w=8)
        self.masks = generate_worker_batch_masks(seed=5, batch_size=3, cfg=self.cfg)

    def test_output_dims_match_tap_sum(self):
        vit12 = ViTConfig(image_side=224, patch_side=16, depth=12, width=768, heads=12)
        spec12 = TargetSpec(taps=default_tap_set(12))
        assert spec12.output_dim(vit12) == 3072
        vit24 = ViTConfig(image_side=224, patch_side=16, depth=24, width=1024, heads=16)
        spec24 = TargetSpec(taps=default_tap_set(24))
        assert spec24.output_dim(vit24) == 7168

    def test_concat_rows_and_alignment(self):
        taps = {LayerTap("block_out", 1): None, LayerTap("block_out", 2): None}
        taps = _fake_taps(3, 64, {t: 16 for t in taps})
        spec = TargetSpec(taps=tuple(taps))
        tb = build_targets(taps, self.masks, spec)
        m = len(self.masks.samples[0].regions[0])
        assert tb.values.shape == (3 * 4 * m, 32)
        # alignment: row k's value equals the tap values at (sample, token)
        k = 4 * m + 3  # sample 1, region 0, token 3
        s, r, tok = tb.sample_ids[k].item(), tb.region_ids[k].item(), tb.token_ids[k].item()
        assert s == 1 and r == 0
        assert tok == self.masks.samples[1].regions[0][3]
        expect = torch.cat([zscore(taps[t][s, tok], 1e-6) for t in spec.taps])
        torch.testing.assert_close(tb.values[k], expect)

    def test_single_tap_concat_equals_average(self):
        taps = _fake_taps(3, 64, {LayerTap("block_out", 1): 16})
        a = build_targets(taps, self.masks, TargetSpec(taps=tuple(taps), merge=MergeOp.CONCAT))
        b = build_targets(taps, self.masks, TargetSpec(taps=tuple(taps), merge=MergeOp.AVERAGE))
        assert (a.values - b.values).abs().max() < 1e-5

    def test_joint_zscore_standardizes_whole_vector(self):
        taps = _fake_taps(3, 64, {LayerTap("block_out", 1): 16, LayerTap("block_out", 2): 16})
        tb = build_targets(taps, self.masks, TargetSpec(taps=tuple(taps), merge=MergeOp.JOINT))
        means = tb.values.mean(dim=1)
        stds = tb.values.std(dim=1, unbiased=False)
        assert means.abs().max() < 1e-10
        assert (stds - 1).abs().max() < 1e-3

    def test_per_segment_standardization(self):
        taps = _fake_taps(3, 64, {LayerTap("block_out", 1): 16, LayerTap("block_out", 2): 16})
        tb = build_targets(taps, self.masks, TargetSpec(taps=tuple(taps)))
        seg = tb.values.reshape(-1, 2, 16)
        assert seg.mean(-1).abs().max() < 1e-5
        assert (seg.std(-1, unbiased=False) - 1).abs().max() < 1e-3

    def test_duplicate_tokens_kept_per_region_occurrence(self):
        # overlapping regions emit the same token once per region
        total = sum(len(r) for r in self.masks.samples[0].regions)
        taps = _fake_taps(3, 64, {LayerTap("block_out", 1): 16})
        tb = build_targets(taps, self.masks, TargetSpec(taps=tuple(taps)))
        per_sample = tb.values.shape[0] // 3
        assert per_sample == total

    def test_missing_tap_raises(self):
        taps = _fake_taps(3, 64, {LayerTap("block_out", 1): 16})
        spec = TargetSpec(taps=(LayerTap("block_out", 1), LayerTap("block_out", 3)))
        with pytest.raises(TapNotCapturedError):
            build_targets(taps, self.masks, spec)

    def test_average_requires_equal_dims(self):
        vit = ViTConfig(image_side=32, patch_side=4, depth=4, width=16, heads=2)
        spec = TargetSpec(
            taps=(LayerTap("block_out", 1), LayerTap("pixels")), merge=MergeOp.AVERAGE
        )
        with pytest.raises(ValueError):
            spec.output_dim(vit)

    def test_values_detached(self):
        taps = {
            LayerTap("block_out", 1): torch.randn(3, 64, 8, requires_grad=True)
        }
        tb = build_targets(taps, self.masks, TargetSpec(taps=tuple(taps)))
        assert not tb.values.requires_grad
