import math

import numpy as np
import pytest
import torch

from asiseg.fusion import (
    ImageEncoder,
    ImageFeatureMap,
    TextFusion,
    assign_by_intent,
    encode_image,
    image_to_tensor,
    scaled_dot_attention,
    similarity_maps,
    sincos_position_embedding,
    text_fuse,
    visual_fuse,
)
from fdcheck import check_gradients


def feature_map(values):
    t = torch.as_tensor(values, dtype=torch.float32)
    return ImageFeatureMap(values=t, source_size=(t.shape[0] * 8, t.shape[1] * 8))


# ---------------------------------------------------------------- text fusion


def test_text_fuse_shape_contract():
    fusion = TextFusion(d=64, seed=0)
    out = text_fuse(torch.randn(7, 64), torch.randn(7, 64), fusion)
    assert out.shape == (7, 64)


def test_text_fuse_dim_mismatch():
    fusion = TextFusion(d=64, seed=0)
    with pytest.raises(ValueError, match="d=64"):
        fusion(torch.randn(7, 32), torch.randn(7, 64))


def test_text_fuse_single_class_attention_weight_is_one():
    torch.manual_seed(1)
    fusion = TextFusion(d=8, seed=3)
    queries = torch.randn(1, 8)
    text = torch.randn(1, 8)
    _, attended_text, attended_query = fusion(queries, text, return_intermediates=True)
    # one key -> softmax weight exactly 1 -> attended side equals its value row
    assert torch.allclose(attended_text, fusion.v_query(queries), atol=1e-7)
    assert torch.allclose(attended_query, fusion.v_text(text), atol=1e-7)


def test_text_fuse_recomposition_oracle():
    torch.manual_seed(2)
    fusion = TextFusion(d=6, attn_dim=5, seed=7).double()
    queries = torch.randn(3, 6, dtype=torch.float64)
    text = torch.randn(3, 6, dtype=torch.float64)
    out, attended_text, attended_query = fusion(queries, text, return_intermediates=True)

    # independent step-by-step recomputation with explicit loops
    def attend(q_rows, k_rows, v_rows):
        result = torch.zeros(q_rows.shape[0], v_rows.shape[1], dtype=torch.float64)
        for i in range(q_rows.shape[0]):
            logits = torch.tensor(
                [float(q_rows[i] @ k_rows[j]) for j in range(k_rows.shape[0])]
            ) / math.sqrt(k_rows.shape[1])
            w = torch.exp(logits - logits.max())
            w = w / w.sum()
            for j in range(k_rows.shape[0]):
                result[i] += w[j] * v_rows[j]
        return result

    o_text = attend(fusion.q_text(text), fusion.k_query(queries), fusion.v_query(queries))
    o_query = attend(fusion.q_query(queries), fusion.k_text(text), fusion.v_text(text))
    assert torch.allclose(o_text, attended_text, atol=1e-10)
    assert torch.allclose(o_query, attended_query, atol=1e-10)
    assert torch.allclose(fusion.mlp(torch.cat([o_text, o_query], dim=-1)), out, atol=1e-10)


def test_attention_rows_sum_to_one_and_shift_invariant():
    torch.manual_seed(0)
    q, k, v = torch.randn(5, 4), torch.randn(6, 4), torch.randn(6, 4)
    _, weights = scaled_dot_attention(q, k, v, return_weights=True)
    assert torch.allclose(weights.sum(dim=-1), torch.ones(5), atol=1e-6)
    assert torch.all(weights >= 0)
    logits = q @ k.T / math.sqrt(4)
    shifted = torch.softmax(logits + 3.7, dim=-1)
    assert torch.allclose(shifted, torch.softmax(logits, dim=-1), atol=1e-6)


def test_text_fuse_gradients_match_finite_differences():
    fusion = TextFusion(d=4, attn_dim=4, seed=5).double()
    queries = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    text = torch.randn(3, 4, dtype=torch.float64)
    probe = torch.randn(3, 4, dtype=torch.float64)
    tensors = [queries] + list(fusion.parameters())

    def fn():
        return (fusion(queries, text) * probe).sum()

    check_gradients(fn, tensors)


# ---------------------------------------------------------------- image encoder


def test_encode_image_shape_and_determinism():
    rng = np.random.default_rng(0)
    image = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    enc = ImageEncoder(d=64, patch=8, seed=2)
    a = encode_image(image, enc)
    b = encode_image(image, enc)
    assert a.values.shape == (8, 8, 64)
    assert a.source_size == (64, 64)
    assert torch.equal(a.values, b.values)


def test_encode_image_indivisible_size():
    enc = ImageEncoder(d=64, patch=8)
    with pytest.raises(ValueError, match="divisible"):
        encode_image(np.zeros((60, 64, 3), dtype=np.uint8), enc)


def test_patch_embedding_is_patch_local():
    rng = np.random.default_rng(1)
    image = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    other = image.copy()
    other[16:24, 40:48] = 255 - other[16:24, 40:48]  # flip exactly patch (row 2, col 5)
    enc = ImageEncoder(d=64, patch=8, seed=0)
    with torch.no_grad():
        t0 = enc.patch_tokens(image_to_tensor(image))[0]
        t1 = enc.patch_tokens(image_to_tensor(other))[0]
    changed = (t0 - t1).abs().sum(dim=-1) > 0
    expected = torch.zeros(64, dtype=torch.bool)
    expected[2 * 8 + 5] = True
    assert torch.equal(changed, expected)
    # after the global attention blocks every position may move
    full0 = enc(image_to_tensor(image))[0]
    full1 = enc(image_to_tensor(other))[0]
    assert not torch.equal(full0[2, 5], full1[2, 5])


def test_position_embedding_needs_multiple_of_four():
    with pytest.raises(ValueError, match="divisible by 4"):
        sincos_position_embedding(2, 2, 6)
    assert sincos_position_embedding(3, 5, 8).shape == (15, 8)


# ---------------------------------------------------------------- similarity / fuse


def test_similarity_zero_query_gives_zero_map():
    f = feature_map(torch.randn(4, 4, 8))
    q = torch.zeros(3, 8)
    assert torch.all(similarity_maps(q, f) == 0)


def test_similarity_constant_field():
    v = torch.randn(8)
    f = feature_map(v.expand(4, 5, 8).clone())
    q = torch.randn(2, 8)
    sims = similarity_maps(q, f)
    for k in range(2):
        assert torch.allclose(sims[k], torch.full((4, 5), float(q[k] @ v)), atol=1e-5)


def test_similarity_brute_force_oracle():
    torch.manual_seed(4)
    f = feature_map(torch.randn(2, 2, 3))
    q = torch.randn(2, 3)
    sims = similarity_maps(q, f)
    for k in range(2):
        for y in range(2):
            for x in range(2):
                expect = sum(float(q[k, d]) * float(f.values[y, x, d]) for d in range(3))
                assert abs(float(sims[k, y, x]) - expect) < 1e-6


def test_similarity_dim_mismatch():
    with pytest.raises(ValueError, match="dim"):
        similarity_maps(torch.randn(2, 4), feature_map(torch.randn(2, 2, 8)))


def test_visual_fuse_zero_similarity_is_bitwise_identity():
    torch.manual_seed(5)
    f = feature_map(torch.randn(3, 4, 6))
    fused = visual_fuse(f, torch.zeros(5, 3, 4))
    for k in range(5):
        assert torch.equal(fused[k], f.values)


def test_visual_fuse_unit_similarity_doubles():
    f = feature_map(torch.randn(3, 3, 4))
    fused = visual_fuse(f, torch.ones(2, 3, 3))
    assert torch.allclose(fused[0], 2 * f.values, atol=0)


def test_visual_fuse_elementwise_oracle():
    torch.manual_seed(6)
    f = feature_map(torch.randn(2, 3, 4))
    sims = torch.randn(3, 2, 3)
    fused = visual_fuse(f, sims)
    for k in range(3):
        for y in range(2):
            for x in range(3):
                for d in range(4):
                    expect = float(f.values[y, x, d]) * float(sims[k, y, x]) + float(
                        f.values[y, x, d]
                    )
                    assert abs(float(fused[k, y, x, d]) - expect) < 1e-6


def test_visual_fuse_linear_in_features():
    torch.manual_seed(7)
    vals = torch.randn(3, 3, 5)
    sims = torch.randn(2, 3, 3)
    a = 2.75
    base = visual_fuse(feature_map(vals), sims)
    scaled = visual_fuse(feature_map(a * vals), sims)
    assert torch.allclose(scaled, a * base, atol=1e-5)


def test_visual_fuse_shape_mismatch():
    with pytest.raises(ValueError, match="grid"):
        visual_fuse(feature_map(torch.randn(2, 2, 4)), torch.randn(3, 2, 3))


def test_visual_fuse_gradient_matches_finite_differences():
    vals = torch.randn(3, 4, 3, dtype=torch.float64, requires_grad=True)
    sims = torch.randn(2, 3, 4, dtype=torch.float64, requires_grad=True)
    probe = torch.randn(2, 3, 4, 3, dtype=torch.float64)

    def fn():
        f = ImageFeatureMap(values=vals, source_size=(24, 32))
        return (visual_fuse(f, sims) * probe).sum()

    check_gradients(fn, [vals, sims])


# ---------------------------------------------------------------- partition


def test_assign_by_intent_orders_classes():
    feats = torch.arange(7 * 2 * 2 * 3, dtype=torch.float32).reshape(7, 2, 2, 3)
    part = assign_by_intent(feats, 2)
    assert torch.equal(part.required, feats[2])
    assert part.irrelevant_classes == [0, 1, 3, 4, 5, 6]
    assert torch.equal(part.irrelevant, feats[[0, 1, 3, 4, 5, 6]])


def test_assign_by_intent_single_class():
    feats = torch.randn(1, 2, 2, 4)
    part = assign_by_intent(feats, 0)
    assert part.irrelevant.shape == (0, 2, 2, 4)
    assert part.irrelevant_classes == []


def test_assign_by_intent_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        assign_by_intent(torch.randn(3, 2, 2, 4), 3)


def test_partition_reassembly_is_bitwise_identity():
    torch.manual_seed(8)
    feats = torch.randn(5, 3, 3, 6)
    for target in range(5):
        part = assign_by_intent(feats, target)
        assert torch.equal(part.reassemble(), feats)
