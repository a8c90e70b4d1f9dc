"""Contrastive learning prompt encoder.

Required-instrument tokens are sharpened against the irrelevant ones through
cross-attention with an inverse residual, pooled features are pulled toward
ground-truth-pooled image embeddings by an InfoNCE-style loss, and the refined
features are projected into foreground/background prompts for the decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .fusion import ImageFeatureMap, IntentPartition, scaled_dot_attention


class DistinguishingAttention(nn.Module):
    """Cross-attention from one token sequence onto another.

    Queries come from the first argument, keys/values from the second, so the
    same module serves both directions of the mutual refinement.
    """

    def __init__(self, d: int = 64, attn_dim: int = 64, seed: int = 0):
        super().__init__()
        self.d = d
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.q_proj = nn.Linear(d, attn_dim)
            self.k_proj = nn.Linear(d, attn_dim)
            self.v_proj = nn.Linear(d, d)
        # identity-initialized values: the downstream inverse residual then
        # subtracts attended counterpart content (not a random mix of it)
        # from the very first steps
        with torch.no_grad():
            self.v_proj.weight.copy_(torch.eye(d))
            self.v_proj.bias.zero_()

    def forward(self, fp: torch.Tensor, fn: torch.Tensor, return_weights: bool = False):
        if fp.shape[-1] != self.d or fn.shape[-1] != self.d:
            raise ValueError(
                f"attention built for d={self.d}, got {tuple(fp.shape)} vs {tuple(fn.shape)}"
            )
        if fn.shape[0] == 0:
            raise ValueError("key/value sequence is empty; caller must handle K=1")
        return scaled_dot_attention(
            self.q_proj(fp), self.k_proj(fn), self.v_proj(fn), return_weights=return_weights
        )


def distinguishing_attention(fp: torch.Tensor, fn: torch.Tensor,
                             attn: DistinguishingAttention) -> torch.Tensor:
    """Attend required tokens fp over irrelevant tokens fn; output matches fp's shape."""
    return attn(fp, fn)


def inverse_residual(p: torch.Tensor, attn_out: torch.Tensor) -> torch.Tensor:
    """Subtract the attended (confusable) content: p - attn_out, elementwise."""
    if p.shape != attn_out.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(attn_out.shape)}")
    return p - attn_out


@dataclass
class RefinedFeatures:
    """Refined required tokens and the per-class refined irrelevant tokens."""

    required_refined: torch.Tensor    # [T, d]
    irrelevant_refined: torch.Tensor  # [K-1, T, d]
    irrelevant_classes: list


def refine_partition(partition: IntentPartition, attn: DistinguishingAttention) -> RefinedFeatures:
    """Mutual refinement of an intent partition.

    The required map is flattened to tokens P and refined as P minus its
    attention over the concatenation of all irrelevant tokens; each irrelevant
    map is symmetrically refined against P. With no irrelevant classes the
    required tokens pass through unchanged.
    """
    d = partition.required.shape[-1]
    p = partition.required.reshape(-1, d)
    n_irr = partition.irrelevant.shape[0]
    if n_irr == 0:
        return RefinedFeatures(
            required_refined=p,
            irrelevant_refined=partition.irrelevant.reshape(0, p.shape[0], d),
            irrelevant_classes=[],
        )
    neg = partition.irrelevant.reshape(n_irr, -1, d)
    p_star = inverse_residual(p, attn(p, neg.reshape(-1, d)))
    # batched symmetric direction: every irrelevant class attends over P
    n_star = inverse_residual(neg, attn(neg, p.unsqueeze(0).expand(n_irr, -1, -1)))
    return RefinedFeatures(
        required_refined=p_star,
        irrelevant_refined=n_star,
        irrelevant_classes=list(partition.irrelevant_classes),
    )


@dataclass
class ClassPooledEmbeddings:
    """Mean image feature per class under its downsampled ground-truth mask."""

    values: torch.Tensor       # [K, d]
    present_mask: torch.Tensor  # [K] bool


def pool_gt_features(f: ImageFeatureMap, gt_masks) -> ClassPooledEmbeddings:
    """Pool image features under per-class binary masks.

    Masks of shape [K, H, W] are max-pooled down to the feature grid (a class
    occupies a cell if any of its pixels fall there); absent classes get a
    zero row and a False flag.
    """
    masks = torch.as_tensor(gt_masks)
    if masks.ndim != 3:
        raise ValueError(f"expected [K, H, W] masks, got {tuple(masks.shape)}")
    uniq = torch.unique(masks)
    if not bool(torch.isin(uniq, torch.tensor([0, 1], dtype=masks.dtype)).all()):
        raise ValueError("masks must be binary (values 0/1)")
    h, w = f.grid_size
    k, mh, mw = masks.shape
    if mh % h or mw % w:
        raise ValueError(
            f"mask size {(mh, mw)} is not an integer multiple of feature grid {(h, w)}"
        )
    fh, fw = mh // h, mw // w
    down = masks.reshape(k, h, fh, w, fw).amax(dim=(2, 4)).to(torch.bool)
    tokens = f.values  # [h, w, d]
    d = tokens.shape[-1]
    rows = tokens.new_zeros((k, d))
    present = torch.zeros(k, dtype=torch.bool)
    for c in range(k):
        sel = down[c]
        if bool(sel.any()):
            rows[c] = tokens[sel].mean(dim=0)
            present[c] = True
    return ClassPooledEmbeddings(values=rows, present_mask=present)


def contrastive_loss(p_pooled: torch.Tensor, v: ClassPooledEmbeddings, target: int,
                     tau: float):
    """InfoNCE over present classes at temperature tau.

    The anchor is the pooled refined required feature, the positive is the
    target class's ground-truth-pooled embedding, and the negatives are the
    other present classes. Returns None when the target class has no pixels
    (the sample is skipped by the batch mean).
    """
    if tau <= 0:
        raise ValueError("temperature tau must be > 0")
    if not bool(v.present_mask[target]):
        return None
    present = torch.nonzero(v.present_mask, as_tuple=False).flatten()
    logits = (v.values[present] @ p_pooled) / tau
    pos = (present == target).nonzero(as_tuple=False).flatten()[0]
    return torch.logsumexp(logits, dim=0) - logits[pos]


class PromptProjection(nn.Module):
    """Shared linear map from fused feature width to decoder prompt width.

    Identity-initialized when the widths match, so prompts start out as the
    pooled refined features themselves and drift from there under training.
    """

    def __init__(self, d: int = 64, d_prompt: int = 64, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.proj = nn.Linear(d, d_prompt)
        if d == d_prompt:
            with torch.no_grad():
                self.proj.weight.copy_(torch.eye(d))
                self.proj.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x)


@dataclass
class PromptPair:
    """Sparse prompt embeddings for the decoder."""

    foreground: torch.Tensor  # [m_f, d_prompt]
    background: torch.Tensor  # [m_b, d_prompt]

    def __post_init__(self):
        if self.foreground.shape[0] < 1:
            raise ValueError("at least one foreground prompt is required")


def emit_prompts(refined: RefinedFeatures, proj: PromptProjection,
                 use_refined_background: bool = True,
                 raw_irrelevant: torch.Tensor | None = None) -> PromptPair:
    """One foreground prompt from pooled required tokens, one background prompt
    per irrelevant class from its pooled tokens."""
    fg = proj(refined.required_refined.mean(dim=0, keepdim=True))
    if use_refined_background:
        neg = refined.irrelevant_refined
    else:
        if raw_irrelevant is None:
            raise ValueError("raw background requested but raw_irrelevant not given")
        neg = raw_irrelevant.reshape(raw_irrelevant.shape[0], -1, raw_irrelevant.shape[-1])
    if neg.shape[0] == 0:
        bg = fg.new_zeros((0, fg.shape[-1]))
    else:
        bg = proj(neg.mean(dim=1))
    return PromptPair(foreground=fg, background=bg)
