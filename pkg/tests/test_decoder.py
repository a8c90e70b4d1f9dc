import numpy as np
import pytest
import torch

from asiseg.decoder import MaskDecoder, decode_mask, dice_loss, dice_loss_probs, threshold
from asiseg.fusion import ImageFeatureMap
from asiseg.prompts import PromptPair
from fdcheck import check_gradients


def feature_map(h=8, w=8, d=64, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    vals = torch.randn(h, w, d, generator=g, dtype=torch.float32).to(dtype)
    return ImageFeatureMap(values=vals, source_size=(h * 8, w * 8))


def prompts_for(d=64, n_bg=6, seed=1, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return PromptPair(
        foreground=torch.randn(1, d, generator=g).to(dtype),
        background=torch.randn(n_bg, d, generator=g).to(dtype),
    )


def test_decode_mask_shape_contract():
    decoder = MaskDecoder(d=64, seed=0)
    logits = decode_mask(feature_map(), prompts_for(), decoder)
    assert logits.shape == (64, 64)
    assert torch.all(torch.isfinite(logits))


def test_decode_mask_deterministic():
    decoder = MaskDecoder(d=64, seed=0)
    f, p = feature_map(), prompts_for()
    assert torch.equal(decode_mask(f, p, decoder), decode_mask(f, p, decoder))


def test_decode_mask_rectangular_grid():
    decoder = MaskDecoder(d=64, seed=0)
    f = feature_map(h=4, w=6)
    logits = decode_mask(f, prompts_for(), decoder)
    assert logits.shape == (32, 48)


def test_decode_mask_without_background_prompts():
    decoder = MaskDecoder(d=64, seed=0)
    logits = decode_mask(feature_map(), prompts_for(n_bg=0), decoder)
    assert logits.shape == (64, 64)
    assert torch.all(torch.isfinite(logits))


def test_background_prompt_order_invariance():
    decoder = MaskDecoder(d=64, seed=3).double()
    f = feature_map(dtype=torch.float64, seed=5)
    pair = prompts_for(dtype=torch.float64, seed=6)
    base = decode_mask(f, pair, decoder)
    perm = torch.tensor([4, 0, 5, 2, 1, 3])
    shuffled = PromptPair(foreground=pair.foreground, background=pair.background[perm])
    again = decode_mask(f, shuffled, decoder)
    assert torch.max(torch.abs(base - again)) < 1e-6


def test_zero_foreground_prompts_rejected():
    with pytest.raises(ValueError, match="foreground"):
        PromptPair(foreground=torch.zeros(0, 64), background=torch.zeros(3, 64))


def test_decoder_width_mismatch():
    decoder = MaskDecoder(d=64, seed=0)
    with pytest.raises(ValueError, match="d=64"):
        decoder(torch.randn(8, 8, 32), prompts_for(d=32))


def test_decode_is_differentiable_wrt_features_and_prompts():
    decoder = MaskDecoder(d=64, seed=0)
    vals = torch.randn(8, 8, 64, requires_grad=True)
    fg = torch.randn(1, 64, requires_grad=True)
    bg = torch.randn(2, 64, requires_grad=True)
    f = ImageFeatureMap(values=vals, source_size=(64, 64))
    out = decode_mask(f, PromptPair(fg, bg), decoder).sum()
    grads = torch.autograd.grad(out, [vals, fg, bg])
    assert all(g is not None and torch.isfinite(g).all() for g in grads)


# ---------------------------------------------------------------- threshold


def test_threshold_all_negative_and_all_positive():
    assert np.all(threshold(torch.full((4, 4), -1.0)) == 0)
    assert np.all(threshold(torch.full((4, 4), 1.0)) == 1)


def test_threshold_mixed_example():
    logits = torch.tensor([[-1.0, 2.0], [0.5, -0.2]])
    assert np.array_equal(threshold(logits), np.array([[0, 1], [1, 0]], dtype=np.uint8))


def test_threshold_rejects_nonfinite():
    with pytest.raises(ValueError, match="finite"):
        threshold(torch.tensor([[np.inf, 0.0]]))


# ---------------------------------------------------------------- dice


def test_dice_perfect_overlap_near_zero():
    gt = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    logits = (gt * 2 - 1) * 30.0  # saturates the sigmoid
    assert float(dice_loss(logits, gt)) < 1e-5


def test_dice_disjoint_near_one():
    gt = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
    logits = torch.tensor([[-30.0, -30.0], [30.0, 30.0]])
    assert float(dice_loss(logits, gt)) > 1 - 1e-5


def test_dice_hand_example_two_thirds():
    # g = [1,1,0,0], p = [1,0,0,0]: dice = 2/(1+2), loss = 1/3
    p = torch.tensor([1.0, 0.0, 0.0, 0.0])
    g = torch.tensor([1.0, 1.0, 0.0, 0.0])
    loss = dice_loss_probs(p, g)
    assert abs(float(loss) - 1.0 / 3.0) < 1e-5
    saturated = dice_loss(torch.tensor([30.0, -30.0, -30.0, -30.0]), g)
    assert abs(float(saturated) - 1.0 / 3.0) < 1e-5


def test_dice_range_and_permutation_symmetry():
    rng = np.random.default_rng(0)
    for _ in range(25):
        logits = torch.tensor(rng.normal(size=(3, 5)) * 3)
        gt = torch.tensor(rng.integers(0, 2, size=(3, 5)).astype(np.float64))
        loss = float(dice_loss(logits, gt))
        assert 0.0 <= loss <= 1.0
        perm = rng.permutation(15)
        loss_p = float(dice_loss(logits.reshape(-1)[perm].reshape(3, 5),
                                 gt.reshape(-1)[perm].reshape(3, 5)))
        assert abs(loss - loss_p) < 1e-12


def test_dice_shape_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        dice_loss(torch.zeros(2, 2), torch.zeros(2, 3))


def test_dice_gradient_matches_finite_differences():
    logits = torch.randn(4, 4, dtype=torch.float64, requires_grad=True)
    gt = torch.tensor(np.random.default_rng(1).integers(0, 2, (4, 4)), dtype=torch.float64)

    def fn():
        return dice_loss(logits, gt)

    check_gradients(fn, [logits])
