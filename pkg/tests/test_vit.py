import numpy as np
import pytest
import torch

from multitap.vit import (
    Block,
    EmptyRegionError,
    LayerTap,
    Predictor,
    PredictorConfig,
    ShapeMismatchError,
    ViTConfig,
    ViTEncoder,
    patchify,
    plain_layer_norm,
    sincos_pos_embed,
    unpatchify,
)

torch.manual_seed(0)

TINY = ViTConfig(image_side=12, patch_side=4, channels=1, depth=2, width=16, heads=2, registers=2)


class TestSincos:
    def test_origin_row(self):
        table = sincos_pos_embed(4, 4, 16)
        row0 = table[0]
        # layout per axis-half: [sin block, cos block]
        q = 16 // 4
        assert np.allclose(row0[:q], 0) and np.allclose(row0[q : 2 * q], 1)
        assert np.allclose(row0[2 * q : 3 * q], 0) and np.allclose(row0[3 * q :], 1)

    def test_rows_pairwise_distinct(self):
        table = sincos_pos_embed(64, 64, 8)
        uniq = np.unique(table, axis=0)
        assert uniq.shape[0] == table.shape[0]

    def test_pure_function(self):
        a = sincos_pos_embed(7, 5, 12)
        b = sincos_pos_embed(7, 5, 12)
        assert a.tobytes() == b.tobytes()

    def test_rejects_bad_dim(self):
        with pytest.raises(ValueError):
            sincos_pos_embed(4, 4, 10)


class TestPatchify:
    def test_two_by_two_example(self):
        img = torch.arange(1.0, 17.0).reshape(1, 4, 4, 1)
        patches = patchify(img, 2)
        assert patches[0, 0].tolist() == [1, 2, 5, 6]
        assert patches[0, 1].tolist() == [3, 4, 7, 8]

    def test_single_patch_is_flat_image(self):
        img = torch.randn(2, 4, 4, 3)
        patches = patchify(img, 4)
        assert patches.shape == (2, 1, 48)
        torch.testing.assert_close(patches[:, 0], img.reshape(2, -1))

    def test_round_trip(self):
        img = torch.randn(3, 8, 8, 3)
        rec = unpatchify(patchify(img, 2), 2, 4, 4, 3)
        torch.testing.assert_close(rec, img)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            patchify(torch.randn(1, 5, 5, 1), 2)


class TestBlock:
    def test_zeroed_residual_branches_give_identity(self):
        block = Block(dim=16, heads=2)
        with torch.no_grad():
            block.attn.proj.weight.zero_()
            block.attn.proj.bias.zero_()
            block.mlp.fc2.weight.zero_()
            block.mlp.fc2.bias.zero_()
        z = torch.randn(2, 5, 16)
        out, taps = block.forward_with_taps(z)
        torch.testing.assert_close(out, z)
        torch.testing.assert_close(taps["attn_residual"], torch.zeros_like(z))

    def test_tap_identities(self):
        block = Block(dim=16, heads=2)
        z = torch.randn(1, 4, 16)
        out, taps = block.forward_with_taps(z)
        torch.testing.assert_close(taps["block_mid"] + taps["mlp_residual"], taps["block_out"])
        torch.testing.assert_close(z + taps["attn_residual"], taps["block_mid"])
        torch.testing.assert_close(out, taps["block_out"])


class TestEncoder:
    def test_student_sequence_length(self):
        cfg = ViTConfig(image_side=32, patch_side=4, channels=3, depth=1, width=16, heads=2,
                        registers=4, cls_tokens=1)
        enc = ViTEncoder(cfg)
        images = torch.randn(2, 32, 32, 3)
        visible = torch.stack([torch.arange(52), torch.arange(5, 57)])
        res = enc(images, visible=visible)
        assert res.states.shape[1] == 57

    def test_block_out_tap_chains_to_next_block_input(self):
        enc = ViTEncoder(TINY)
        images = torch.randn(2, 12, 12, 1)
        res = enc(images, taps={LayerTap("block_out", 1), LayerTap("block_mid", 2),
                                LayerTap("attn_residual", 2)})
        out1 = res.captures[LayerTap("block_out", 1)]
        mid2 = res.captures[LayerTap("block_mid", 2)]
        attn2 = res.captures[LayerTap("attn_residual", 2)]
        torch.testing.assert_close(out1 + attn2, mid2)

    def test_final_tap_equals_final_states(self):
        enc = ViTEncoder(TINY)
        images = torch.randn(2, 12, 12, 1)
        res = enc(images, taps={LayerTap("block_out", TINY.depth)})
        torch.testing.assert_close(res.captures[LayerTap("block_out", TINY.depth)],
                                   res.patch_states)

    def test_bitwise_deterministic(self):
        enc = ViTEncoder(TINY)
        images = torch.randn(2, 12, 12, 1)
        visible = torch.stack([torch.arange(4), torch.arange(3, 7)])
        a = enc(images, visible=visible).states
        b = enc(images, visible=visible).states
        assert a.detach().numpy().tobytes() == b.detach().numpy().tobytes()

    def test_tokenizer_tap_matches_between_sparse_and_full(self):
        enc = ViTEncoder(TINY)
        images = torch.randn(2, 12, 12, 1)
        visible = torch.stack([torch.arange(4), torch.arange(2, 6)])
        full = enc(images, taps={LayerTap("tokenizer")}).captures[LayerTap("tokenizer")]
        sparse = enc(images, visible=visible, taps={LayerTap("tokenizer")}).captures[
            LayerTap("tokenizer")
        ]
        gathered = torch.gather(full, 1, visible.unsqueeze(-1).expand(-1, -1, TINY.width))
        assert gathered.detach().numpy().tobytes() == sparse.detach().numpy().tobytes()

    def test_bad_visible_index(self):
        enc = ViTEncoder(TINY)
        with pytest.raises(ValueError):
            enc(torch.randn(1, 12, 12, 1), visible=torch.tensor([[0, 99]]))


class TestPredictor:
    def setup_method(self):
        torch.manual_seed(1)
        self.pcfg = PredictorConfig(depth=2, width=8, heads=2, registers=2, output_dim=32)
        self.pred = Predictor(self.pcfg, TINY)
        self.cls = torch.randn(2, 16)
        self.patches = torch.randn(2, 4, 16)
        self.vis = torch.stack([torch.arange(4), torch.arange(2, 6)])

    def test_permuting_regions_permutes_outputs(self):
        regions = [torch.tensor([[0, 1], [2, 3]]), torch.tensor([[4, 5], [6, 7]])]
        out = self.pred(self.cls, self.patches, self.vis, regions).reshape(2, 2, 2, -1)
        out_swapped = self.pred(self.cls, self.patches, self.vis, regions[::-1]).reshape(2, 2, 2, -1)
        assert out[:, 0].detach().numpy().tobytes() == out_swapped[:, 1].detach().numpy().tobytes()
        assert out[:, 1].detach().numpy().tobytes() == out_swapped[:, 0].detach().numpy().tobytes()

    def test_region_independence_bitwise(self):
        region_a = torch.tensor([[0, 1], [2, 3]])
        region_b = torch.tensor([[4, 5], [6, 7]])
        region_b2 = torch.tensor([[8, 2], [0, 5]])
        out1 = self.pred(self.cls, self.patches, self.vis, [region_a, region_b])
        out2 = self.pred(self.cls, self.patches, self.vis, [region_a, region_b2])
        rows_a1 = out1.reshape(2, 4, -1)[:, :2]
        rows_a2 = out2.reshape(2, 4, -1)[:, :2]
        assert rows_a1.detach().numpy().tobytes() == rows_a2.detach().numpy().tobytes()

    def test_empty_region_raises(self):
        with pytest.raises(EmptyRegionError):
            self.pred.forward_region(self.cls, self.patches, self.vis, torch.empty(2, 0, dtype=torch.long))

    def test_paper_scale_readout_width(self):
        # depth-12 / width-768 encoder with four block-output taps of width
        # 768 each needs a 3072-wide readout.
        cfg = PredictorConfig(depth=1, width=8, heads=2, registers=0, output_dim=4 * 768)
        enc_cfg = ViTConfig(image_side=224, patch_side=16, depth=12, width=768, heads=12)
        pred = Predictor(cfg, enc_cfg)
        assert pred.readout.out_features == 3072


def test_plain_layer_norm_standardizes():
    x = torch.randn(5, 7, 16, dtype=torch.float64)
    y = plain_layer_norm(x)
    torch.testing.assert_close(y.mean(-1), torch.zeros(5, 7, dtype=torch.float64), atol=1e-12, rtol=0)
    torch.testing.assert_close(y.var(-1, unbiased=False), torch.ones(5, 7, dtype=torch.float64),
                               atol=1e-5, rtol=0)
