"""Intention-oriented multimodal fusion.

Learnable per-class queries are fused with text features through a mutual
cross-attention block, image features come from a small frozen patch
transformer, and per-class similarity maps turn both into a stack of
multimodal feature maps that the recognized intent partitions into required
and irrelevant halves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


def sincos_position_embedding(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine position embedding, shape [h*w, dim]."""
    if dim % 4 != 0:
        raise ValueError("position embedding dim must be divisible by 4")
    quarter = dim // 4
    omega = 1.0 / (10000.0 ** (np.arange(quarter, dtype=np.float64) / quarter))
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    out_y = ys.reshape(-1, 1) * omega[None, :]
    out_x = xs.reshape(-1, 1) * omega[None, :]
    emb = np.concatenate(
        [np.sin(out_y), np.cos(out_y), np.sin(out_x), np.cos(out_x)], axis=1
    )
    return torch.from_numpy(emb).to(torch.float32)


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                         return_weights: bool = False):
    """softmax(q k^T / sqrt(D)) v with D taken from the key width."""
    scale = 1.0 / math.sqrt(k.shape[-1])
    weights = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


class TextFusion(nn.Module):
    """Mutual cross-attention between learnable queries and text features.

    Each side projects to its own attention queries/keys/values; the two
    attended results are concatenated and reduced back to width d by an MLP.
    Single-head on purpose so the arithmetic matches the scalar formulas the
    tests check against.
    """

    def __init__(self, d: int = 64, attn_dim: int = 64, seed: int = 0):
        super().__init__()
        self.d = d
        self.attn_dim = attn_dim
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            # text side
            self.q_text = nn.Linear(d, attn_dim)
            self.k_text = nn.Linear(d, attn_dim)
            self.v_text = nn.Linear(d, d)
            # learnable-query side
            self.q_query = nn.Linear(d, attn_dim)
            self.k_query = nn.Linear(d, attn_dim)
            self.v_query = nn.Linear(d, d)
            self.mlp = nn.Sequential(nn.Linear(2 * d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))

    def forward(self, queries: torch.Tensor, text: torch.Tensor,
                return_intermediates: bool = False):
        if queries.shape[-1] != self.d or text.shape[-1] != self.d:
            raise ValueError(
                f"fusion built for d={self.d}, got queries {tuple(queries.shape)} "
                f"and text {tuple(text.shape)}"
            )
        attended_text = scaled_dot_attention(
            self.q_text(text), self.k_query(queries), self.v_query(queries)
        )
        attended_query = scaled_dot_attention(
            self.q_query(queries), self.k_text(text), self.v_text(text)
        )
        fused = self.mlp(torch.cat([attended_text, attended_query], dim=-1))
        if return_intermediates:
            return fused, attended_text, attended_query
        return fused


def text_fuse(queries: torch.Tensor, text: torch.Tensor, fusion: TextFusion) -> torch.Tensor:
    """K x d instrument query matrix from learnable queries and text features."""
    return fusion(queries, text)


class ResidualSelfAttentionBlock(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


@dataclass
class ImageFeatureMap:
    """h x w x d feature grid plus the source image size it came from."""

    values: torch.Tensor
    source_size: tuple

    @property
    def grid_size(self) -> tuple:
        return (self.values.shape[0], self.values.shape[1])

    @property
    def tokens(self) -> torch.Tensor:
        """Row-major flattened view, shape [h*w, d]."""
        return self.values.reshape(-1, self.values.shape[-1])


class ImageEncoder(nn.Module):
    """Patch embedding plus two residual self-attention blocks.

    Stands in for a frozen pretrained backbone: 8x8 patches are linearly
    projected to d, given fixed sine/cosine positions, and mixed globally by
    the attention blocks. Frozen after seeded initialization by default.
    """

    def __init__(self, d: int = 64, patch: int = 8, heads: int = 4, seed: int = 0,
                 frozen: bool = True):
        super().__init__()
        self.d = d
        self.patch = patch
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.patch_embed = nn.Conv2d(3, d, kernel_size=patch, stride=patch)
            self.blocks = nn.ModuleList(
                [ResidualSelfAttentionBlock(d, heads) for _ in range(2)]
            )
        if frozen:
            self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """[B, 3, H, W] float in [-1, 1] -> [B, h, w, d]."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected [B, 3, H, W], got {tuple(x.shape)}")
        if x.shape[2] % self.patch or x.shape[3] % self.patch:
            raise ValueError(
                f"image size {tuple(x.shape[2:])} not divisible by patch stride {self.patch}"
            )
        feat = self.patch_embed(x)  # [B, d, h, w]
        b, d, h, w = feat.shape
        tokens = feat.flatten(2).transpose(1, 2)  # [B, h*w, d]
        tokens = tokens + sincos_position_embedding(h, w, d).to(tokens.dtype)
        for block in self.blocks:
            tokens = block(tokens)
        return tokens.reshape(b, h, w, d)

    def patch_tokens(self, x: torch.Tensor) -> torch.Tensor:
        """Patch-embedding output before attention mixing, [B, h*w, d]."""
        feat = self.patch_embed(x)
        return feat.flatten(2).transpose(1, 2)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """uint8 H x W x 3 image -> float tensor [1, 3, H, W] scaled to [-1, 1]."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got {image.shape}")
    x = torch.from_numpy(np.array(image, copy=True)).to(torch.float32) / 255.0
    return ((x - 0.5) / 0.5).permute(2, 0, 1).unsqueeze(0)


def encode_image(image: np.ndarray, encoder: ImageEncoder) -> ImageFeatureMap:
    values = encoder(image_to_tensor(image))[0]
    return ImageFeatureMap(values=values, source_size=(image.shape[0], image.shape[1]))


def similarity_maps(q: torch.Tensor, f: ImageFeatureMap) -> torch.Tensor:
    """S[k, y, x] = <q_k, f[y, x]>, shape [K, h, w]."""
    if q.shape[-1] != f.values.shape[-1]:
        raise ValueError(
            f"query dim {q.shape[-1]} != feature dim {f.values.shape[-1]}"
        )
    return torch.einsum("kd,hwd->khw", q, f.values)


def visual_fuse(f: ImageFeatureMap, sims: torch.Tensor) -> torch.Tensor:
    """Multimodal feature stack [K, h, w, d]: slice k is f * S_k + f."""
    if sims.shape[1:] != f.values.shape[:2]:
        raise ValueError(
            f"similarity grid {tuple(sims.shape[1:])} != feature grid "
            f"{tuple(f.values.shape[:2])}"
        )
    return f.values.unsqueeze(0) * sims.unsqueeze(-1) + f.values.unsqueeze(0)


@dataclass
class IntentPartition:
    """Multimodal features split around the commanded class."""

    required: torch.Tensor          # [h, w, d]
    irrelevant: torch.Tensor        # [K-1, h, w, d], ascending class order
    target_class: int
    irrelevant_classes: list

    def reassemble(self) -> torch.Tensor:
        """Inverse of assign_by_intent; reproduces the source stack exactly."""
        k = len(self.irrelevant_classes) + 1
        out = self.required.new_empty((k,) + tuple(self.required.shape))
        out[self.target_class] = self.required
        for row, cls in enumerate(self.irrelevant_classes):
            out[cls] = self.irrelevant[row]
        return out


def assign_by_intent(features: torch.Tensor, target_class: int) -> IntentPartition:
    """Split the K feature maps into the commanded one and all others."""
    k = features.shape[0]
    if not 0 <= target_class < k:
        raise ValueError(f"target class {target_class} out of range [0, {k})")
    rest = [i for i in range(k) if i != target_class]
    if rest:
        irrelevant = features[rest].clone()
    else:
        irrelevant = features.new_zeros((0,) + tuple(features.shape[1:]))
    return IntentPartition(
        required=features[target_class].clone(),
        irrelevant=irrelevant,
        target_class=target_class,
        irrelevant_classes=rest,
    )
