"""Promptable mask decoder.

A miniature two-way transformer: prompt tokens (one learned mask token plus
typed foreground/background prompts) exchange information with the image
feature grid, the grid is upsampled back to input resolution with transposed
convolutions, and a hypernetwork head turns the token state into per-pixel
logits. Also hosts the dice loss used for segmentation training.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .fusion import ImageFeatureMap, sincos_position_embedding
from .prompts import PromptPair

DICE_EPS = 1e-6


class TwoWayLayer(nn.Module):
    """Token self-attention, token->image and image->token cross-attention."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(d)
        self.cross_t2i = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))
        self.norm3 = nn.LayerNorm(d)
        self.cross_i2t = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm4 = nn.LayerNorm(d)

    def forward(self, tokens, image, image_pe):
        tokens = self.norm1(tokens + self.self_attn(tokens, tokens, tokens,
                                                    need_weights=False)[0])
        tokens = self.norm2(tokens + self.cross_t2i(tokens, image + image_pe, image,
                                                    need_weights=False)[0])
        tokens = self.norm3(tokens + self.mlp(tokens))
        image = self.norm4(image + self.cross_i2t(image + image_pe, tokens, tokens,
                                                  need_weights=False)[0])
        return tokens, image


class MaskDecoder(nn.Module):
    """Prompt-conditioned mask head over an h x w x d feature grid.

    Foreground and background prompts are distinguished only by learned type
    embeddings, so the mask is invariant to background prompt order. A single
    wide-kernel transposed conv (kernel = stride = patch stride) undoes the
    whole upsampling in one linear step, and the logits combine that conv
    path with a prompt-affinity skip and a presence gate.
    """

    def __init__(self, d: int = 64, heads: int = 4, layers: int = 2, upscale: int = 8,
                 seed: int = 0, output_gain: float = 1.0, bias_init: float = -2.0,
                 upscale_channels: int = 16):
        super().__init__()
        if upscale & (upscale - 1):
            raise ValueError("upscale factor must be a power of two")
        self.d = d
        self.upscale = upscale
        self.output_gain = output_gain
        self.logit_bias = nn.Parameter(torch.tensor(float(bias_init)))
        # weight of the prompt-affinity skip (foreground-vs-background contrast
        # dotted with image features); localizes the commanded instrument from
        # the first optimizer steps while the conv path learns boundary detail
        self.affinity_scale = nn.Parameter(torch.tensor(4.0))
        # presence gate: global logit offset from the relative affinity peak,
        # so a command for an instrument that is not in view empties the mask
        self.presence_gain = nn.Parameter(torch.tensor(2.0))
        self.presence_ref = nn.Parameter(torch.tensor(0.0))
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.mask_token = nn.Parameter(torch.randn(1, d) * 0.1)
            self.type_foreground = nn.Parameter(torch.randn(d) * 0.1)
            self.type_background = nn.Parameter(torch.randn(d) * 0.1)
            self.layers = nn.ModuleList(TwoWayLayer(d, heads) for _ in range(layers))
            self.final_attn = nn.MultiheadAttention(d, heads, batch_first=True)
            self.final_norm = nn.LayerNorm(d)

            # one wide-kernel transposed conv undoes the whole patch stride:
            # a single linear map per cell stays trainable under the tiny-step
            # budget and can read sub-cell pixel structure straight out of the
            # (linear) patch embedding
            self.out_channels = upscale_channels
            self.upsampler = nn.ConvTranspose2d(
                d, upscale_channels, kernel_size=upscale, stride=upscale
            )
            self.hyper = nn.Sequential(
                nn.Linear(d, d), nn.GELU(), nn.Linear(d, upscale_channels)
            )

    def forward(self, features: torch.Tensor, prompts: PromptPair) -> torch.Tensor:
        """features [h, w, d] + prompts -> logits [h*upscale, w*upscale]."""
        if features.shape[-1] != self.d:
            raise ValueError(f"decoder built for d={self.d}, got {features.shape[-1]}")
        if prompts.foreground.shape[-1] != self.d:
            raise ValueError("prompt width must match decoder width")
        h, w, d = features.shape
        image = features.reshape(1, h * w, d)
        image_pe = sincos_position_embedding(h, w, d).to(features.dtype).unsqueeze(0)

        tokens = torch.cat(
            [
                self.mask_token,
                prompts.foreground + self.type_foreground,
                prompts.background + self.type_background,
            ],
            dim=0,
        ).unsqueeze(0)

        for layer in self.layers:
            tokens, image = layer(tokens, image, image_pe)
        tokens = self.final_norm(
            tokens + self.final_attn(tokens, image + image_pe, image, need_weights=False)[0]
        )

        n_fg = prompts.foreground.shape[0]
        readout = tokens[0, 0] + tokens[0, 1 : 1 + n_fg].mean(dim=0)
        weights = self.hyper(readout)  # [out_channels]

        grid = image.reshape(1, h, w, d).permute(0, 3, 1, 2)
        upscaled = self.upsampler(grid)  # [1, out_channels, H, W]
        logits = torch.einsum("c,chw->hw", weights, upscaled[0])

        # prompt-affinity skip: similarity of each cell to the foreground
        # prompt minus its similarity to the mean background prompt. The
        # standardized map carries where the commanded instrument would be.
        fg_map = features @ prompts.foreground.mean(dim=0)
        if prompts.background.shape[0] > 0:
            fg_map = fg_map - (features @ prompts.background.mean(dim=0))
        fg_map = fg_map - fg_map.mean()
        affinity = F.interpolate(
            (fg_map / fg_map.std().clamp_min(1e-8)).reshape(1, 1, h, w),
            scale_factor=self.upscale,
            mode="bilinear",
            align_corners=False,
        )[0, 0]

        # presence signal: the prompt maps share almost all of their content,
        # so everything is computed on difference maps (foreground response
        # minus each background response) in units of the difference spread.
        # The cellwise minimum asks where the foreground beats EVERY
        # irrelevant class at once; its spatial peak is high only when the
        # commanded instrument is actually in view, and the gate pushes the
        # whole mask down otherwise.
        fg_self = features @ prompts.foreground.mean(dim=0)
        fg_centered = fg_self - fg_self.mean()
        if prompts.background.shape[0] > 0:
            bg_maps = torch.einsum("hwd,md->mhw", features, prompts.background)
            bg_centered = bg_maps - bg_maps.mean(dim=(1, 2), keepdim=True)
            diffs = fg_centered.unsqueeze(0) - bg_centered
            margin = diffs.amin(dim=0) / diffs.std().clamp_min(1e-8)
        else:
            margin = fg_centered / fg_centered.std().clamp_min(1e-8)
        presence = margin.amax()

        # fixed gain keeps sigmoid responsive within the small-step budget;
        # the learned scalar bias sets the background operating point
        return (
            logits * (self.output_gain / math.sqrt(self.out_channels))
            + self.affinity_scale * affinity
            + self.presence_gain * (presence - self.presence_ref)
            + self.logit_bias
        )


def decode_mask(f: ImageFeatureMap, prompts: PromptPair, decoder: MaskDecoder) -> torch.Tensor:
    """Mask logits at source resolution for the prompted instrument."""
    if prompts.foreground.shape[0] < 1:
        raise ValueError("decode_mask requires at least one foreground prompt")
    logits = decoder(f.values, prompts)
    expect = (f.grid_size[0] * decoder.upscale, f.grid_size[1] * decoder.upscale)
    if tuple(logits.shape) != expect:
        raise ValueError(f"decoder produced {tuple(logits.shape)}, expected {expect}")
    return logits


def threshold(logits, t: float = 0.0) -> np.ndarray:
    """Binary mask: 1 where logits > t."""
    arr = logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else np.asarray(logits)
    if not np.all(np.isfinite(arr)):
        raise ValueError("logits must be finite")
    return (arr > t).astype(np.uint8)


def dice_loss_probs(probs: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Squared-denominator dice loss on probabilities in [0, 1]."""
    if probs.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(probs.shape)} vs {tuple(gt.shape)}")
    gt = gt.to(probs.dtype)
    inter = (probs * gt).sum()
    denom = (probs * probs).sum() + (gt * gt).sum()
    return 1.0 - (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)


def dice_loss(logits: torch.Tensor, gt) -> torch.Tensor:
    """Dice loss of sigmoid(logits) against a binary ground-truth mask."""
    gt_t = torch.as_tensor(gt)
    if logits.shape != gt_t.shape:
        raise ValueError(f"shape mismatch {tuple(logits.shape)} vs {tuple(gt_t.shape)}")
    return dice_loss_probs(torch.sigmoid(logits), gt_t)
