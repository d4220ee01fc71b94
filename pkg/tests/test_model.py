"""Network structure: backbone features, the hard-routing decoder block
against a per-pixel loop oracle, the two-stage cluster head identities,
and gradient checks for the head."""

import numpy as np
import pytest
import torch

from queryseg.errors import ConfigError, ShapeError
from queryseg.losses import seg_loss
from queryseg.model import (
    ClusterSegmenter,
    DecoderBlock,
    ModelConfig,
    hard_assignment,
)

from helpers import fd_grad, max_rel_err

TINY = ModelConfig(
    grid=(8, 8, 1),
    num_classes=3,
    num_queries=4,
    partition=(2, 1, 1),
    embed_dim=8,
    base_width=4,
    levels=2,
    block_strides=(2,),
    attn_heads=2,
    ffn_mult=2,
)


def _tiny_model(seed=0, dtype=torch.float32) -> ClusterSegmenter:
    torch.manual_seed(seed)
    model = ClusterSegmenter(TINY)
    return model.double() if dtype == torch.float64 else model


class TestConfig:
    def test_partition_must_sum(self):
        with pytest.raises(ConfigError):
            ModelConfig(num_queries=32, partition=(16, 4, 4))

    def test_grid_divisibility(self):
        with pytest.raises(ConfigError):
            ModelConfig(grid=(6, 64, 1), levels=3, num_queries=32, partition=(16, 4, 12))

    def test_block_stride_outside_pyramid(self):
        with pytest.raises(ConfigError):
            ModelConfig(
                grid=(8, 8, 1), levels=2, block_strides=(4,),
                num_queries=32, partition=(16, 4, 12),
            )

    def test_heads_divide_embed(self):
        with pytest.raises(ConfigError):
            ModelConfig(embed_dim=10, attn_heads=4, num_queries=32, partition=(16, 4, 12))


class TestExtractFeatures:
    def test_zero_image_finite(self):
        model = _tiny_model()
        feats = model.extract_features(torch.zeros(1, 1, 8, 8))
        assert torch.isfinite(feats.final).all()
        for t in feats.per_scale.values():
            assert torch.isfinite(t).all()

    def test_single_voxel_perturbation_changes_features(self):
        model = _tiny_model()
        x = torch.randn(1, 1, 8, 8)
        y = x.clone()
        y[0, 0, 3, 5] += 0.5
        fx = model.extract_features(x).final
        fy = model.extract_features(y).final
        assert not torch.equal(fx, fy)

    def test_deterministic_reruns(self):
        model = _tiny_model()
        x = torch.randn(2, 1, 8, 8)
        a = model.extract_features(x).final
        b = model.extract_features(x).final
        assert torch.equal(a, b)

    def test_shape_mismatch_raises(self):
        model = _tiny_model()
        with pytest.raises(ShapeError):
            model.extract_features(torch.zeros(1, 1, 8, 6))

    def test_scales_and_channels(self):
        model = _tiny_model()
        feats = model.extract_features(torch.randn(1, 1, 8, 8))
        assert set(feats.per_scale) == {1, 2}
        assert feats.per_scale[2].shape == (1, 8, 4, 4)  # base*2 channels at stride 2
        assert feats.final.shape == (1, 8, 8, 8)
        assert feats.final_flat.shape == (1, 64, 8)


class TestHardAssignment:
    def test_one_hot_columns(self):
        logits = torch.tensor([[[1.0, 5.0], [2.0, 1.0], [0.5, 4.9]]])
        hard = hard_assignment(logits)
        assert torch.equal(hard, torch.tensor([[[0.0, 1.0], [1.0, 0.0], [0.0, 0.0]]]))

    def test_tie_breaks_to_lowest_index(self):
        logits = torch.tensor([[[2.0], [2.0], [1.0]]])
        assert torch.equal(hard_assignment(logits)[0, :, 0], torch.tensor([1.0, 0.0, 0.0]))

    def test_no_gradient_path(self):
        logits = torch.randn(1, 3, 5, requires_grad=True)
        hard = hard_assignment(logits)
        assert not hard.requires_grad


class TestDecoderBlock:
    def _block(self, seed=0):
        torch.manual_seed(seed)
        return DecoderBlock(TINY, in_channels=8, stride=2).double()

    def test_cross_update_matches_loop_oracle(self):
        block = self._block()
        torch.manual_seed(1)
        queries = torch.randn(1, 4, 8, dtype=torch.float64)
        feats = torch.randn(1, 10, 8, dtype=torch.float64)

        q = block.q_proj(block.query_norm(queries))
        k = block.k_proj(feats)
        v = block.v_proj(feats)
        logits = q @ k.transpose(1, 2)
        update = hard_assignment(logits) @ v

        manual = torch.zeros(1, 4, 8, dtype=torch.float64)
        for pixel in range(10):
            winner = int(logits[0, :, pixel].argmax())
            manual[0, winner] += v[0, pixel]
        torch.testing.assert_close(update, manual, atol=1e-12, rtol=0)

    def test_unique_max_pixel_feeds_only_winner(self):
        block = self._block()
        queries = torch.randn(1, 4, 8, dtype=torch.float64)
        feats = torch.randn(1, 6, 8, dtype=torch.float64)
        q = block.q_proj(block.query_norm(queries))
        k = block.k_proj(feats)
        logits = q @ k.transpose(1, 2)
        routing = hard_assignment(logits)
        for pixel in range(6):
            column = routing[0, :, pixel]
            assert column.sum() == 1.0
            assert int(column.argmax()) == int(logits[0, :, pixel].argmax())

    def test_zero_value_projection_leaves_cross_residual_zero(self):
        block = self._block()
        with torch.no_grad():
            block.v_proj.weight.zero_()
        queries = torch.randn(1, 4, 8, dtype=torch.float64)
        feats = torch.randn(1, 10, 8, dtype=torch.float64)
        out, attn = block(queries, feats)

        # Expected: untouched queries flow straight into self-attention + FFN.
        y = block.self_norm(queries)
        mid = queries + block.self_attn(y, y, y, need_weights=False)[0]
        expected = mid + block.ffn(block.ffn_norm(mid))
        torch.testing.assert_close(out, expected, atol=1e-12, rtol=0)
        assert not torch.equal(out, queries)  # self-attention/FFN still act
        assert attn.hard.sum() == 10.0

    def test_channel_mismatch_raises(self):
        block = self._block()
        with pytest.raises(ShapeError):
            block(torch.randn(1, 4, 8).double(), torch.randn(1, 10, 5).double())


class TestClusterHead:
    def test_identity_queries_one_hot_pixels(self):
        model = _tiny_model(dtype=torch.float64)
        queries = torch.eye(8, dtype=torch.float64)[:4].unsqueeze(0)
        pixels = torch.eye(8, dtype=torch.float64)[[0, 1, 2, 3, 0]].unsqueeze(0)
        responses, assignments = model.cluster_assign(queries, pixels)
        for j, owner in enumerate([0, 1, 2, 3, 0]):
            column = responses[0, :, j]
            assert float(column[owner]) == 1.0
            assert float(column.sum()) == 1.0
            assert int(assignments[0, :, j].argmax()) == owner

    def test_assignment_columns_sum_to_one(self):
        model = _tiny_model()
        q = torch.randn(2, 4, 8)
        p = torch.randn(2, 25, 8)
        _, m = model.cluster_assign(q, p)
        colsum = m.sum(dim=1)
        assert float((colsum - 1).abs().max()) < 1e-5

    def test_assignment_matches_extended_precision_oracle(self):
        model = _tiny_model(dtype=torch.float64)
        torch.manual_seed(3)
        q = torch.randn(1, 3, 8, dtype=torch.float64)
        p = torch.randn(1, 5, 8, dtype=torch.float64)
        responses, assignments = model.cluster_assign(q, p)
        r = responses[0].numpy().astype(np.longdouble)
        e = np.exp(r - r.max(axis=0, keepdims=True))
        oracle = e / e.sum(axis=0, keepdims=True)
        assert np.abs(assignments[0].numpy() - oracle.astype(np.float64)).max() < 1e-9

    def test_zero_queries_zero_bias_mlp_gives_zero(self):
        model = _tiny_model()
        with torch.no_grad():
            for layer in model.class_mlp:
                if hasattr(layer, "bias") and layer.bias is not None:
                    layer.bias.zero_()
        out = model.classify_clusters(torch.zeros(1, 4, 8))
        assert torch.equal(out, torch.zeros(1, 4, 3))

    def test_classification_shape_and_row_locality(self):
        model = _tiny_model()
        q = torch.randn(1, 4, 8)
        base = model.classify_clusters(q)
        assert base.shape == (1, 4, 3)
        bumped = q.clone()
        bumped[0, 2] += 0.3
        out = model.classify_clusters(bumped)
        assert torch.equal(out[0, [0, 1, 3]], base[0, [0, 1, 3]])
        assert not torch.equal(out[0, 2], base[0, 2])


class TestForward:
    def test_output_shapes(self):
        model = _tiny_model()
        out = model(torch.randn(2, 1, 8, 8))
        assert out.query_responses.shape == (2, 4, 64)
        assert out.assignments.shape == (2, 4, 64)
        assert out.cluster_classes.shape == (2, 4, 3)
        assert out.seg_logits.shape == (2, 3, 64)
        assert len(out.aux_attention) == 1
        assert out.aux_attention[0].logits.shape == (2, 4, 16)

    def test_product_identity(self):
        model = _tiny_model()
        with torch.no_grad():
            out = model(torch.randn(1, 1, 8, 8))
        direct = out.cluster_classes.transpose(1, 2) @ out.assignments
        assert float((direct - out.seg_logits).abs().max()) < 1e-6

    def test_argmax_equivalence_r_vs_m(self):
        model = _tiny_model()
        out = model(torch.randn(3, 1, 8, 8))
        r_arg = out.query_responses.argmax(dim=1)
        m_arg = out.assignments.argmax(dim=1)
        assert torch.equal(r_arg, m_arg)

    def test_forward_deterministic(self):
        model = _tiny_model()
        x = torch.randn(1, 1, 8, 8)
        a = model(x)
        b = model(x)
        assert torch.equal(a.seg_logits, b.seg_logits)
        assert torch.equal(a.query_responses, b.query_responses)

    def test_backbone_head_shape(self):
        model = _tiny_model()
        logits = model.forward_backbone(torch.randn(2, 1, 8, 8))
        assert logits.shape == (2, 3, 64)


class TestHeadGradients:
    """Scalar loss over final logits; gradients w.r.t. queries, the
    classification MLP, and pixel features against central differences."""

    def _loss_fn(self, model, queries, pixels, gt):
        def compute():
            _, m = model.cluster_assign(queries, pixels)
            ck = model.classify_clusters(queries)
            z = ck.transpose(1, 2) @ m
            return seg_loss(z[0], gt)

        return compute

    def test_head_gradients_match_fd(self):
        for seed in range(3):
            model = _tiny_model(seed=seed, dtype=torch.float64)
            torch.manual_seed(10 + seed)
            queries = torch.randn(1, 4, 8, dtype=torch.float64, requires_grad=True)
            pixels = torch.randn(1, 20, 8, dtype=torch.float64, requires_grad=True)
            idx = torch.randint(0, 3, (20,))
            gt = torch.zeros(3, 20, dtype=torch.float64)
            gt[idx, torch.arange(20)] = 1.0

            compute = self._loss_fn(model, queries, pixels, gt)
            loss = compute()
            grads = torch.autograd.grad(
                loss, [queries, pixels, *model.class_mlp.parameters()]
            )
            with torch.no_grad():
                fd_q = fd_grad(compute, queries)
                fd_p = fd_grad(compute, pixels)
                fd_w = fd_grad(compute, next(model.class_mlp.parameters()))
            assert max_rel_err(grads[0].numpy(), fd_q.numpy()) < 1e-4, f"seed {seed}"
            assert max_rel_err(grads[1].numpy(), fd_p.numpy()) < 1e-4, f"seed {seed}"
            assert max_rel_err(grads[2].numpy(), fd_w.numpy()) < 1e-4, f"seed {seed}"
