import math

import numpy as np
import pytest
from oracles import attention_oracle, layout_mask_oracle, softmax_vector_oracle

from multishade.encoders import (
    BLANK_IMAGE_ID,
    Box,
    ImageAttribute,
    InstanceDescription,
    TextAttribute,
    encode_text,
    fourier_embed,
    grounding_mlp,
    make_grounding_embedding,
    rasterize_position,
)
from multishade.errors import CapacityError, InvalidArgumentError, ShapeError
from multishade.shading import (
    CrossAttnWeights,
    KVWeights,
    background_mask,
    enhance_attention,
    instance_shader,
    layout_attention,
    layout_attention_mask,
    merge_shaders,
    multimodal_enhance,
    refined_aggregate,
    refined_attention_maps,
    refined_instance_shading,
    refined_weight_maps,
    shading_aggregation,
)

NEG_INF = float("-inf")


def make_grounding(ctx, box, tokens):
    pos = grounding_mlp(fourier_embed(box, ctx.fourier_frequencies), ctx.grounding)
    return make_grounding_embedding(pos, encode_text(tokens, ctx.d_embed))


class TestEnhanceAttention:
    def test_zero_mask_zero_output(self, toy_ctx, toy_shader):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((3, 3, 4))
        G = make_grounding(toy_ctx, Box(0.1, 0.1, 0.9, 0.9), ["cat"])
        out = enhance_attention(X, G, np.zeros((3, 3)), toy_shader.ea_text)
        assert np.array_equal(out, np.zeros_like(X))

    def test_full_mask_is_unmasked_attention(self, toy_ctx, toy_shader):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((2, 3, 4))
        G = make_grounding(toy_ctx, Box(0, 0, 1, 1), ["red", "cat"])
        got = enhance_attention(X, G, np.ones((2, 3)), toy_shader.ea_text)
        w = toy_shader.ea_text
        flat = X.reshape(6, 4)
        expected = attention_oracle(
            flat @ w.wq + w.bq, G.vectors @ w.wk + w.bk, G.vectors @ w.wv + w.bv
        ).reshape(2, 3, 4)
        assert np.max(np.abs(got - expected)) <= 1e-10

    def test_masked_matches_oracle(self, toy_ctx, toy_shader):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((2, 2, 4))
        M = np.array([[1.0, 0.0], [0.0, 1.0]])
        G = make_grounding(toy_ctx, Box(0, 0, 0.5, 0.5), ["dog"])
        got = enhance_attention(X, G, M, toy_shader.ea_text)
        w = toy_shader.ea_text
        flat = X.reshape(4, 4)
        plain = attention_oracle(
            flat @ w.wq + w.bq, G.vectors @ w.wk + w.bk, G.vectors @ w.wv + w.bv
        ).reshape(2, 2, 4)
        assert np.max(np.abs(got - plain * M[:, :, None])) <= 1e-10

    def test_exact_zero_outside_mask(self, toy_ctx, toy_shader):
        rng = np.random.default_rng(3)
        for _ in range(10):
            X = rng.standard_normal((4, 4, 4)) * 10
            M = (rng.random((4, 4)) < 0.5).astype(float)
            G = make_grounding(toy_ctx, Box(0.2, 0.2, 0.8, 0.8), ["bird"])
            out = enhance_attention(X, G, M, toy_shader.ea_text)
            assert np.all(out[M == 0.0] == 0.0)

    def test_resolution_mismatch(self, toy_ctx, toy_shader):
        G = make_grounding(toy_ctx, Box(0, 0, 1, 1), ["cat"])
        with pytest.raises(ShapeError):
            enhance_attention(np.zeros((2, 2, 4)), G, np.zeros((3, 3)), toy_shader.ea_text)


class TestMultimodalEnhance:
    def test_null_pad_gives_zero_map(self, toy_ctx, toy_shader):
        rng = np.random.default_rng(4)
        X = rng.standard_normal((4, 4, 4))
        pad = InstanceDescription(TextAttribute([]), Box(0, 0, 0, 0))
        assert np.array_equal(
            multimodal_enhance(X, pad, toy_shader, toy_ctx), np.zeros_like(X)
        )

    def test_text_dispatch_matches_direct_call(self, toy_ctx, toy_shader):
        rng = np.random.default_rng(5)
        X = rng.standard_normal((4, 4, 4))
        box = Box(0.0, 0.0, 0.5, 1.0)
        inst = InstanceDescription(TextAttribute(["red", "cat"]), box)
        got = multimodal_enhance(X, inst, toy_shader, toy_ctx)
        G = make_grounding(toy_ctx, box, ["red", "cat"])
        M = rasterize_position(box, 4, 4)
        assert np.array_equal(got, enhance_attention(X, G, M, toy_shader.ea_text))

    def test_both_modalities_zero_outside_position(self, toy_ctx, toy_shader):
        rng = np.random.default_rng(6)
        X = rng.standard_normal((4, 4, 4))
        box = Box(0.0, 0.0, 0.5, 0.5)
        M = rasterize_position(box, 4, 4)
        for attr in (TextAttribute(["cat"]), ImageAttribute(BLANK_IMAGE_ID)):
            out = multimodal_enhance(X, InstanceDescription(attr, box), toy_shader, toy_ctx)
            assert np.all(out[M == 0.0] == 0.0)
            assert np.any(out[M == 1.0] != 0.0)

    def test_attribute_isolation_between_instances(self, toy_ctx, toy_shader):
        rng = np.random.default_rng(7)
        X = rng.standard_normal((4, 4, 4))
        a = InstanceDescription(TextAttribute(["cat"]), Box(0.0, 0.0, 0.5, 0.5))
        before = multimodal_enhance(X, a, toy_shader, toy_ctx)
        # a second instance with any attribute shares no state with the first
        b = InstanceDescription(TextAttribute(["zebra"]), Box(0.5, 0.5, 1.0, 1.0))
        multimodal_enhance(X, b, toy_shader, toy_ctx)
        after = multimodal_enhance(X, a, toy_shader, toy_ctx)
        assert np.array_equal(before, after)


class TestLayoutAttentionMask:
    def test_full_cover_instance_allows_everything(self):
        M = np.ones((2, 2))
        bg = background_mask([M], (2, 2))
        out = layout_attention_mask([M], bg)
        assert np.array_equal(out, np.zeros((4, 4)))

    def test_disjoint_instances_cross_pairs_masked(self):
        left = np.array([[1.0, 0.0], [1.0, 0.0]])
        right = np.array([[0.0, 1.0], [0.0, 1.0]])
        bg = background_mask([left, right], (2, 2))
        assert bg.sum() == 0  # empty background
        out = layout_attention_mask([left, right], bg)
        flat_left = left.reshape(-1) == 1.0
        for p in range(4):
            for q in range(4):
                if flat_left[p] != flat_left[q]:
                    assert out[p, q] == NEG_INF
                else:
                    assert out[p, q] == 0.0

    def test_overlapping_masks_match_bruteforce(self):
        a = np.array([[1.0, 1.0], [0.0, 0.0]])
        b = np.array([[0.0, 1.0], [0.0, 1.0]])
        bg = background_mask([a, b], (2, 2))
        got = layout_attention_mask([a, b], bg)
        assert np.array_equal(got, layout_mask_oracle([a, b, bg]))

    def test_symmetry_and_diagonal(self):
        rng = np.random.default_rng(8)
        maps = [(rng.random((3, 3)) < 0.4).astype(float) for _ in range(3)]
        bg = background_mask(maps, (3, 3))
        out = layout_attention_mask(maps, bg)
        assert np.array_equal(out, out.T)
        assert np.all(np.diag(out) == 0.0)

    def test_wrong_background_rejected(self):
        M = np.ones((2, 2))
        with pytest.raises(InvalidArgumentError):
            layout_attention_mask([M], np.ones((2, 2)))

    def test_resolution_mismatch(self):
        with pytest.raises(ShapeError):
            layout_attention_mask([np.ones((2, 2)), np.ones((3, 3))], np.zeros((2, 2)))


class TestLayoutAttention:
    def test_all_allowed_equals_plain_self_attention(self, toy_shader):
        rng = np.random.default_rng(9)
        X = rng.standard_normal((2, 2, 4))
        A = np.zeros((4, 4))
        got = layout_attention(X, A, toy_shader.la)
        w = toy_shader.la
        flat = X.reshape(4, 4)
        expected = attention_oracle(
            flat @ w.wq + w.bq, flat @ w.wk + w.bk, flat @ w.wv + w.bv
        ).reshape(2, 2, 4)
        assert np.max(np.abs(got - expected)) <= 1e-10

    def test_identity_projections_single_token(self):
        X = np.array([[[1.5, -2.0, 0.25, 4.0]]])
        out = layout_attention(X, np.zeros((1, 1)), CrossAttnWeights.identity(4))
        assert np.max(np.abs(out - X)) <= 1e-12

    def test_leakage_probe_disjoint_regions(self, toy_shader):
        # perturbing tokens exclusive to region B leaves region A untouched
        rng = np.random.default_rng(10)
        a_map = np.zeros((2, 2))
        a_map[:, 0] = 1.0
        b_map = np.zeros((2, 2))
        b_map[:, 1] = 1.0
        bg = background_mask([a_map, b_map], (2, 2))
        A_la = layout_attention_mask([a_map, b_map], bg)
        X = rng.standard_normal((2, 2, 4))
        base = layout_attention(X, A_la, toy_shader.la)
        X2 = X.copy()
        X2[:, 1, :] += rng.standard_normal((2, 4)) * 3.0
        moved = layout_attention(X2, A_la, toy_shader.la)
        assert np.array_equal(base[:, 0, :], moved[:, 0, :])


class TestBackgroundMask:
    def test_no_instances_all_ones(self):
        assert np.array_equal(background_mask([], (3, 4)), np.ones((3, 4)))

    def test_full_cover_all_zero(self):
        assert background_mask([np.ones((3, 3))], (3, 3)).sum() == 0

    def test_complement_of_union_cellwise(self):
        a = rasterize_position(Box(0.0, 0.0, 0.5, 0.5), 4, 4)
        b = rasterize_position(Box(0.25, 0.25, 1.0, 0.75), 4, 4)
        got = background_mask([a, b], (4, 4))
        for i in range(4):
            for j in range(4):
                assert got[i, j] == (0.0 if (a[i, j] or b[i, j]) else 1.0)


class TestShadingAggregation:
    def test_template_only(self, toy_shader):
        rng = np.random.default_rng(11)
        t = rng.standard_normal((3, 3, 4))
        fused, weights = shading_aggregation([], t, toy_shader.sac)
        assert weights.shape == (3, 3, 1)
        assert np.array_equal(weights, np.ones((3, 3, 1)))
        assert np.array_equal(fused, t @ toy_shader.sac.conv_w + toy_shader.sac.conv_b)

    def test_weights_normalized(self, toy_shader):
        rng = np.random.default_rng(12)
        for n in range(0, 5):
            xs = [rng.standard_normal((3, 3, 4)) for _ in range(n)]
            t = rng.standard_normal((3, 3, 4))
            _, weights = shading_aggregation(xs, t, toy_shader.sac)
            assert weights.shape == (3, 3, n + 1)
            assert np.all(weights >= 0.0)
            assert np.max(np.abs(weights.sum(axis=2) - 1.0)) <= 1e-6

    def test_recomposition_oracle(self, toy_shader):
        rng = np.random.default_rng(13)
        xs = [rng.standard_normal((2, 3, 4)) for _ in range(2)]
        t = rng.standard_normal((2, 3, 4))
        fused, weights = shading_aggregation(xs, t, toy_shader.sac)
        post = [x @ toy_shader.sac.conv_w + toy_shader.sac.conv_b for x in xs + [t]]
        expected = np.zeros_like(fused)
        for k, pm in enumerate(post):
            expected += weights[:, :, k : k + 1] * pm
        assert np.max(np.abs(fused - expected)) <= 1e-10

    def test_capacity_error(self, toy_shader):
        xs = [np.zeros((2, 2, 4))] * toy_shader.sac.capacity
        with pytest.raises(CapacityError):
            shading_aggregation(xs, np.zeros((2, 2, 4)), toy_shader.sac)

    def test_convexity_of_output(self, toy_shader):
        rng = np.random.default_rng(14)
        xs = [rng.standard_normal((3, 3, 4)) for _ in range(3)]
        t = rng.standard_normal((3, 3, 4))
        fused, _ = shading_aggregation(xs, t, toy_shader.sac)
        post = np.stack([x @ toy_shader.sac.conv_w + toy_shader.sac.conv_b for x in xs + [t]])
        assert np.all(fused >= post.min(axis=0) - 1e-12)
        assert np.all(fused <= post.max(axis=0) + 1e-12)


class TestRefinedShading:
    def frozen(self, rng):
        ca = CrossAttnWeights.seeded(4, 8, 4, 4, rng)
        ip = KVWeights.seeded(8, 4, 4, rng)
        return ca, ip

    def test_text_is_definitional(self, toy_ctx):
        rng = np.random.default_rng(15)
        ca, ip = self.frozen(rng)
        X = rng.standard_normal((2, 2, 4))
        got = refined_instance_shading(X, TextAttribute(["blue", "vase"]), ca, ip, toy_ctx)
        emb = encode_text(["blue", "vase"], 8)
        flat = X.reshape(4, 4)
        expected = attention_oracle(
            flat @ ca.wq + ca.bq, emb @ ca.wk + ca.bk, emb @ ca.wv + ca.bv
        ).reshape(2, 2, 4)
        assert np.max(np.abs(got - expected)) <= 1e-10

    def test_image_uses_projected_embeddings(self, toy_ctx):
        rng = np.random.default_rng(16)
        ca, ip = self.frozen(rng)
        X = rng.standard_normal((2, 2, 4))
        from multishade.encoders import project_image

        got = refined_instance_shading(X, ImageAttribute(BLANK_IMAGE_ID), ca, ip, toy_ctx)
        emb = project_image(
            toy_ctx.store.encode_image(BLANK_IMAGE_ID, 8, toy_ctx.n_image_tokens),
            toy_ctx.projector,
        )
        flat = X.reshape(4, 4)
        expected = attention_oracle(
            flat @ ca.wq + ca.bq, emb @ ip.wk + ip.bk, emb @ ip.wv + ip.bv
        ).reshape(2, 2, 4)
        assert np.max(np.abs(got - expected)) <= 1e-10

    def test_modalities_differ(self, toy_ctx):
        rng = np.random.default_rng(17)
        ca, ip = self.frozen(rng)
        X = rng.standard_normal((2, 2, 4))
        t = refined_instance_shading(X, TextAttribute(["bag"]), ca, ip, toy_ctx)
        i = refined_instance_shading(X, ImageAttribute(BLANK_IMAGE_ID), ca, ip, toy_ctx)
        assert np.any(t != i)


class TestRefinedAggregate:
    def test_no_instances_returns_global_bitexact(self):
        rng = np.random.default_rng(18)
        R = rng.standard_normal((3, 3, 4))
        out = refined_aggregate(R, [], [], alpha=1.0, beta=0.0)
        assert np.array_equal(out, R)

    def test_equal_weights_average(self):
        rng = np.random.default_rng(19)
        Rg = rng.standard_normal((2, 2, 3))
        R1 = rng.standard_normal((2, 2, 3))
        out = refined_aggregate(Rg, [R1], [np.ones((2, 2))], alpha=0.7, beta=0.7)
        assert np.max(np.abs(out - (Rg + R1) / 2.0)) <= 1e-12

    def test_overlap_pixel_matches_softmax_oracle(self):
        weights = refined_weight_maps(
            [np.ones((1, 1)), np.ones((1, 1))], alpha=1.0, beta=0.0, hw=(1, 1)
        )
        expected = softmax_vector_oracle([0.0, 1.0, 1.0])
        assert np.max(np.abs(weights[:, 0, 0] - expected)) <= 1e-10
        assert abs(weights[0, 0, 0] - 0.1554) <= 5e-5  # frozen hand value

    def test_partition_of_unity(self):
        rng = np.random.default_rng(20)
        maps = [(rng.random((4, 4)) < 0.5).astype(float) for _ in range(3)]
        weights = refined_weight_maps(maps, alpha=1.25, beta=0.5, hw=(4, 4))
        assert np.max(np.abs(weights.sum(axis=0) - 1.0)) <= 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            refined_aggregate(
                np.zeros((2, 2, 3)), [np.zeros((3, 3, 3))], [np.ones((3, 3))], 1.0, 0.0
            )


class TestMergeShaders:
    def test_zero_gamma_is_identity_on_refined(self):
        rng = np.random.default_rng(21)
        for _ in range(5):
            shape = tuple(rng.integers(1, 5, size=2)) + (int(rng.integers(1, 5)),)
            ri = rng.standard_normal(shape)
            rr = rng.standard_normal(shape)
            assert np.array_equal(merge_shaders(ri, rr, 0.0), rr)

    def test_large_gamma_saturates(self):
        rng = np.random.default_rng(22)
        ri = rng.standard_normal((2, 2, 2))
        rr = rng.standard_normal((2, 2, 2))
        assert np.max(np.abs(merge_shaders(ri, rr, 20.0) - (ri + rr))) <= 1e-8

    def test_tanh_hand_value(self):
        assert abs(math.tanh(0.5) - 0.46212) <= 5e-6
        ri = np.full((1, 1, 1), 2.0)
        rr = np.full((1, 1, 1), 1.0)
        out = merge_shaders(ri, rr, 0.5)
        assert abs(out[0, 0, 0] - (2.0 * math.tanh(0.5) + 1.0)) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            merge_shaders(np.zeros((1, 1, 2)), np.zeros((1, 1, 3)), 0.1)


class TestInstanceShaderPipeline:
    def test_null_pads_change_nothing(self, toy_ctx, toy_shader):
        rng = np.random.default_rng(23)
        X = rng.standard_normal((4, 4, 4))
        real = [
            InstanceDescription(TextAttribute(["red", "cat"]), Box(0.0, 0.0, 0.5, 0.5)),
            InstanceDescription(TextAttribute(["dog"]), Box(0.5, 0.5, 1.0, 1.0)),
        ]
        pads = [
            InstanceDescription(TextAttribute([]), Box(0, 0, 0, 0)) for _ in range(2)
        ]
        bare, w_bare = instance_shader(X, real, toy_shader, toy_ctx)
        padded, w_pad = instance_shader(X, real + pads, toy_shader, toy_ctx)
        assert np.array_equal(bare, padded)
        assert np.array_equal(w_bare, w_pad)

    def test_weights_cover_instances_plus_template(self, toy_ctx, toy_shader):
        rng = np.random.default_rng(24)
        X = rng.standard_normal((4, 4, 4))
        insts = [
            InstanceDescription(TextAttribute(["bird"]), Box(0.0, 0.0, 0.5, 1.0)),
        ]
        fused, weights = instance_shader(X, insts, toy_shader, toy_ctx)
        assert fused.shape == X.shape
        assert weights.shape == (4, 4, 2)


class TestRefinedAttentionMaps:
    def test_maps_are_probability_like(self, toy_ctx):
        rng = np.random.default_rng(25)
        ca = CrossAttnWeights.seeded(4, 8, 4, 4, rng)
        ip = KVWeights.seeded(8, 4, 4, rng)
        X = rng.standard_normal((3, 3, 4))
        insts = [
            InstanceDescription(TextAttribute(["cat"]), Box(0.0, 0.0, 0.5, 0.5)),
            InstanceDescription(ImageAttribute(BLANK_IMAGE_ID), Box(0.5, 0.0, 1.0, 1.0)),
        ]
        maps = refined_attention_maps(X, insts, ca, ip, toy_ctx)
        assert len(maps) == 2
        for m in maps:
            assert m.shape == (3, 3)
            assert np.all(m >= 0.0) and np.all(m <= 1.0)
