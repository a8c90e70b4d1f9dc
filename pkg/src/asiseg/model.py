"""End-to-end model assembly and checkpoint serialization.

Wires the audio front end, description bank, fusion, prompt encoder, and mask
decoder into one module and keeps track of which parameter groups are frozen.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from . import audio as audio_mod
from .audio import AudioClip, AudioEncoder, IntentClassifier, IntentLabel, MelConfig, NormStats
from .bank import DescriptionBank, HashedTextEncoder, default_bank, encode_descriptions
from .decoder import MaskDecoder, decode_mask
from .errors import CheckpointError
from .fusion import (
    ImageEncoder,
    ImageFeatureMap,
    TextFusion,
    assign_by_intent,
    encode_image,
    similarity_maps,
    visual_fuse,
)
from .prompts import DistinguishingAttention, PromptProjection, emit_prompts, refine_partition

CHECKPOINT_FORMAT_VERSION = 1

FROZEN_GROUPS = ("image_encoder", "audio_encoder")
TRAINABLE_GROUPS = (
    "queries",
    "text_fusion",
    "classifier",
    "distinguish",
    "prompt_proj",
    "decoder",
)


@dataclass
class ModelConfig:
    num_classes: int = 7
    d: int = 64
    attn_dim: int = 64
    d_audio: int = 64
    n_mels: int = 80
    patch: int = 8
    decoder_heads: int = 4
    decoder_layers: int = 2
    seed: int = 0
    use_bank: bool = True
    refined_background: bool = True
    norm_mode: str = "mean"

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")


class AsiSegModel(nn.Module):
    """Audio command -> intent -> fused features -> prompts -> mask.

    The image, audio, and text encoders mirror frozen pretrained backbones:
    they are seeded, deterministic, and excluded from optimization unless the
    training config explicitly unfreezes them. Everything else (queries,
    fusion, classifier, prompt encoder, decoder) is trainable.
    """

    def __init__(self, config: ModelConfig, bank: DescriptionBank | None = None):
        super().__init__()
        self.config = config
        if bank is None:
            bank = default_bank()
        if bank.num_classes != config.num_classes:
            raise ValueError(
                f"bank has {bank.num_classes} classes, model configured for "
                f"{config.num_classes}"
            )
        self.class_names = bank.class_names
        self.mel_config = MelConfig(n_mels=config.n_mels)
        self.norm_stats: NormStats | None = None

        k, d = config.num_classes, config.d
        self.image_encoder = ImageEncoder(d=d, patch=config.patch, seed=config.seed + 1)
        self.audio_encoder = AudioEncoder(
            n_mels=config.n_mels, embed_dim=config.d_audio, seed=config.seed + 2
        )
        self.classifier = IntentClassifier(config.d_audio, k)

        text_encoder = HashedTextEncoder(feature_dim=d, seed=config.seed + 3)
        self.register_buffer("text_features", encode_descriptions(bank, text_encoder))

        with torch.random.fork_rng():
            torch.manual_seed(config.seed + 4)
            self.queries = nn.Parameter(torch.randn(k, d) * 0.1)
        # built even when the bank is disabled so checkpoints keep a stable
        # key set; instrument_queries() skips it in that case
        self.text_fusion = TextFusion(d=d, attn_dim=config.attn_dim, seed=config.seed + 5)
        self.distinguish = DistinguishingAttention(d=d, attn_dim=config.attn_dim,
                                                   seed=config.seed + 6)
        self.prompt_proj = PromptProjection(d=d, d_prompt=d, seed=config.seed + 7)
        self.decoder = MaskDecoder(
            d=d,
            heads=config.decoder_heads,
            layers=config.decoder_layers,
            upscale=config.patch,
            seed=config.seed + 8,
        )

    # -- parameter bookkeeping -------------------------------------------

    def set_encoder_freeze(self, frozen: bool) -> None:
        self.image_encoder.requires_grad_(not frozen)
        self.audio_encoder.requires_grad_(not frozen)

    def param_partition(self) -> dict:
        """Named frozen vs trainable groups; disjoint and exhaustive."""
        groups = {"frozen": {}, "trainable": {}}
        named = {
            "image_encoder": self.image_encoder,
            "audio_encoder": self.audio_encoder,
            "classifier": self.classifier,
            "text_fusion": self.text_fusion,
            "distinguish": self.distinguish,
            "prompt_proj": self.prompt_proj,
            "decoder": self.decoder,
        }
        for name, module in named.items():
            params = list(module.parameters())
            side = "frozen" if params and not params[0].requires_grad else "trainable"
            groups[side][name] = params
        groups["trainable"]["queries"] = [self.queries]
        return groups

    def trainable_parameters(self):
        for params in self.param_partition()["trainable"].values():
            yield from params

    def encoder_checksum(self) -> str:
        """Stable digest of all encoder parameter bytes."""
        import hashlib

        h = hashlib.sha256()
        for module in (self.image_encoder, self.audio_encoder):
            for _, p in sorted(module.state_dict().items()):
                h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    # -- forward pieces ----------------------------------------------------

    def set_norm_stats(self, stats: NormStats) -> None:
        self.norm_stats = stats

    def instrument_queries(self) -> torch.Tensor:
        if self.config.use_bank:
            return self.text_fusion(self.queries, self.text_features)
        return self.queries

    def image_features(self, image) -> ImageFeatureMap:
        return encode_image(image, self.image_encoder)

    def audio_embedding(self, clip: AudioClip) -> torch.Tensor:
        if self.norm_stats is None:
            raise ValueError("normalization stats not set; fit or load them first")
        mel = audio_mod.compute_mel(clip, self.mel_config)
        norm = audio_mod.normalize_mel(mel, self.norm_stats, mode=self.config.norm_mode)
        return audio_mod.encode_audio(norm, self.audio_encoder)

    def intent_from_clip(self, clip: AudioClip) -> IntentLabel:
        emb = self.audio_embedding(clip)
        return audio_mod.classify_intent(emb, self.classifier, self.class_names)

    def segment_target(self, f: ImageFeatureMap, target_class: int,
                       queries: torch.Tensor | None = None):
        """Mask logits for one commanded class; returns (logits, refined, partition).

        queries may be passed in when the caller evaluates many targets against
        the same parameter state.
        """
        q = self.instrument_queries() if queries is None else queries
        sims = similarity_maps(q, f)
        fused = visual_fuse(f, sims)
        partition = assign_by_intent(fused, target_class)
        refined = refine_partition(partition, self.distinguish)
        prompts = emit_prompts(
            refined,
            self.prompt_proj,
            use_refined_background=self.config.refined_background,
            raw_irrelevant=partition.irrelevant,
        )
        logits = decode_mask(f, prompts, self.decoder)
        return logits, refined, partition

    def segment_with_audio(self, image, clip: AudioClip):
        """Full pipeline: audio -> intent -> prompts -> mask logits."""
        label = self.intent_from_clip(clip)
        f = self.image_features(image)
        logits, _, _ = self.segment_target(f, label.class_index)
        return logits, label


def save_checkpoint(model: AsiSegModel, path) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "K": model.config.num_classes,
        "d": model.config.d,
        "seeds": {"model": model.config.seed},
        "config": asdict(model.config),
        "class_names": list(model.class_names),
        "norm_stats": None
        if model.norm_stats is None
        else {
            "mu": model.norm_stats.mu,
            "min": model.norm_stats.min_val,
            "max": model.norm_stats.max_val,
            "n_mels": model.norm_stats.n_mels,
        },
        "state_dict": model.state_dict(),
    }
    torch.save(payload, str(path))


def load_checkpoint(path, bank: DescriptionBank | None = None) -> AsiSegModel:
    try:
        payload = torch.load(str(path), map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format_version {version} != supported {CHECKPOINT_FORMAT_VERSION}"
        )
    config = ModelConfig(**payload["config"])
    if bank is not None and bank.num_classes != config.num_classes:
        raise ValueError(
            f"checkpoint was trained for K={config.num_classes} but the bank "
            f"defines {bank.num_classes} classes"
        )
    model = AsiSegModel(config, bank=bank)
    model.class_names = payload["class_names"]
    model.load_state_dict(payload["state_dict"])
    ns = payload.get("norm_stats")
    if ns is not None:
        model.norm_stats = NormStats(
            mu=ns["mu"], min_val=ns["min"], max_val=ns["max"], n_mels=ns["n_mels"]
        )
    return model
