"""Training loop, segmentation metrics, and robustness sweep.

Training optimizes the queries, fusion, classifier, prompt encoder, and
decoder with Adam while the image/audio encoders stay frozen (their features
and the ground-truth pooled embeddings are precomputed once). Evaluation
drives the full audio pipeline: every measured mask comes from a synthesized
or stored spoken command, never from the ground-truth class directly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .audio import compute_mel, fit_norm_stats, perturb_audio
from .data import SceneSample, command_seed, synth_command_audio
from .decoder import dice_loss, threshold
from .errors import TrainingDivergedError
from .model import AsiSegModel
from .prompts import ClassPooledEmbeddings, contrastive_loss, pool_gt_features


def _unit_rows(t: torch.Tensor) -> torch.Tensor:
    return t / t.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def contrastive_term(refined_required: torch.Tensor, pooled: ClassPooledEmbeddings,
                     target: int, tau: float):
    """Sample contrastive loss on centered, direction-normalized embeddings.

    The ground-truth pooled rows share a large common feature component, so
    they (and the anchor) are first centered by the mean over present classes
    and then L2-normalized: at tau around 0.07 the objective then demands real
    geometric separation along class-specific directions instead of being
    satisfied by tiny shifts of large raw dot products.
    """
    present = pooled.present_mask
    if not bool(present[target]):
        return None
    center = pooled.values[present].mean(dim=0)
    anchor = _unit_rows(refined_required.mean(dim=0) - center)
    v = ClassPooledEmbeddings(values=_unit_rows(pooled.values - center),
                              present_mask=present)
    return contrastive_loss(anchor, v, target, tau)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 30
    tau: float = 0.07
    seed: int = 0
    freeze_encoders: bool = True
    use_contrastive: bool = True
    # fraction of samples per epoch trained on a command for an instrument
    # that is NOT in the frame (dice against the empty mask, contrastive term
    # skipped); teaches the decoder to stay silent for absent classes, which
    # the per-class composition of semantic evaluation depends on
    absent_target_fraction: float = 0.25

    def __post_init__(self):
        # learning_rate 0 is allowed so the zero-step contract stays testable
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.absent_target_fraction < 1.0:
            raise ValueError("absent_target_fraction must be in [0, 1)")


def total_loss(dice, cl):
    """Unweighted sum of the segmentation and contrastive terms."""
    return dice + cl


def compute_iou(pred, gt) -> float:
    """Intersection over union of two binary masks; empty vs empty is 1.0."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


@dataclass
class MetricsReport:
    challenge_iou: float
    iou: float
    mc_iou: float
    per_class_iou: list
    n_frames: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "challenge_iou": self.challenge_iou,
                "iou": self.iou,
                "mc_iou": self.mc_iou,
                "n_frames": self.n_frames,
                "per_class_iou": self.per_class_iou,
            },
            sort_keys=True,
        )

    def to_table(self, class_names=None) -> str:
        rows = [("challenge_iou", self.challenge_iou), ("iou", self.iou),
                ("mc_iou", self.mc_iou)]
        for k, v in enumerate(self.per_class_iou):
            name = class_names[k] if class_names else f"class_{k}"
            rows.append((name, v))
        width = max(len(r[0]) for r in rows)
        lines = [f"{'metric':<{width}}  value", f"{'-' * width}  -----"]
        for name, value in rows:
            text = "n/a" if value is None else f"{value:.4f}"
            lines.append(f"{name:<{width}}  {text}")
        lines.append(f"{'n_frames':<{width}}  {self.n_frames}")
        return "\n".join(lines)


def aggregate_records(records, n_frames: int, num_classes: int) -> MetricsReport:
    """Fold (frame, class, iou) records into the three dataset metrics."""
    per_class = []
    for k in range(num_classes):
        vals = [r[2] for r in records if r[1] == k]
        per_class.append(float(np.mean(vals)) if vals else None)
    evaluated = [v for v in per_class if v is not None]
    mc = float(np.mean(evaluated)) if evaluated else 0.0
    overall = float(np.mean([r[2] for r in records])) if records else 0.0
    frame_means = []
    for i in range(n_frames):
        vals = [r[2] for r in records if r[0] == i]
        if vals:
            frame_means.append(float(np.mean(vals)))
    challenge = float(np.mean(frame_means)) if frame_means else 0.0
    return MetricsReport(
        challenge_iou=challenge,
        iou=overall,
        mc_iou=mc,
        per_class_iou=per_class,
        n_frames=n_frames,
    )


def command_clip(sample: SceneSample, class_index: int, num_classes: int,
                 mispronounce_level: float = 0.0):
    """Stored command audio when available, synthesized otherwise.

    The synthesis seed is a stable function of (frame id, class), which is the
    same seed generation used, so a level-0 resynthesis reproduces the stored
    waveform.
    """
    if mispronounce_level == 0.0 and class_index in sample.audio_per_class:
        return sample.audio_per_class[class_index]
    return synth_command_audio(
        class_index,
        command_seed(sample.sample_id, class_index),
        mispronounce_level,
        num_classes,
    )


def _derived_seed(*parts) -> int:
    digest = hashlib.blake2b("/".join(str(p) for p in parts).encode(), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def fit_stats_from_samples(model: AsiSegModel, samples) -> None:
    """Fit dataset-level mel stats from every present-class command."""
    mels = []
    for s in samples:
        for k in s.present_classes:
            mels.append(compute_mel(command_clip(s, k, model.config.num_classes),
                                    model.mel_config))
    model.set_norm_stats(fit_norm_stats(mels))


def train(model: AsiSegModel, samples, config: TrainConfig, log_path=None) -> list:
    """Optimize the trainable groups; returns the per-epoch loss log.

    Frozen groups are bitwise untouched. The objective per batch is
    dice + contrastive (+ cross-entropy for the intent classifier, which gets
    no gradient from the segmentation terms because training conditions on the
    ground-truth target class).
    """
    samples = list(samples)
    if not samples:
        raise ValueError("training dataset is empty")
    torch.manual_seed(config.seed)
    model.set_encoder_freeze(config.freeze_encoders)
    if model.norm_stats is None:
        fit_stats_from_samples(model, samples)

    n = len(samples)
    k = model.config.num_classes
    masks_t = [torch.from_numpy(s.masks) for s in samples]

    frozen = config.freeze_encoders
    feats = [None] * n
    pooled = [None] * n
    audio_emb = {}

    def embedding_for(i, c):
        if not frozen:
            return model.audio_embedding(command_clip(samples[i], c, k))
        if (i, c) not in audio_emb:
            with torch.no_grad():
                audio_emb[(i, c)] = model.audio_embedding(command_clip(samples[i], c, k))
        return audio_emb[(i, c)]

    if frozen:
        with torch.no_grad():
            for i, s in enumerate(samples):
                feats[i] = model.image_features(s.image)
                pooled[i] = pool_gt_features(feats[i], masks_t[i])

    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=config.learning_rate)
    log = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, 1000 + epoch])
        order = rng.permutation(n)
        targets = []
        for s in samples:
            absent = [c for c in range(k) if c not in s.present_classes]
            if absent and rng.random() < config.absent_target_fraction:
                targets.append(int(rng.choice(absent)))
            else:
                targets.append(int(rng.choice(s.present_classes)))
        sums = {"dice": 0.0, "cl": 0.0, "intent_ce": 0.0}
        n_batches = 0
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            optimizer.zero_grad()
            q = model.instrument_queries()
            dice_terms, cl_terms, ce_embs, ce_targets = [], [], [], []
            for i in batch:
                s = samples[i]
                target = targets[i]
                if frozen:
                    f, v = feats[i], pooled[i]
                else:
                    f = model.image_features(s.image)
                    v = pool_gt_features(f, masks_t[i])
                emb = embedding_for(i, target)
                logits, refined, _ = model.segment_target(f, target, queries=q)
                dice_terms.append(dice_loss(logits, masks_t[i][target]))
                if config.use_contrastive:
                    cl = contrastive_term(refined.required_refined, v, target, config.tau)
                    if cl is not None:
                        cl_terms.append(cl)
                ce_embs.append(emb)
                ce_targets.append(target)

            dice_mean = torch.stack(dice_terms).mean()
            cl_mean = (
                torch.stack(cl_terms).mean()
                if cl_terms
                else dice_mean.new_zeros(())
            )
            ce = F.cross_entropy(
                model.classifier(torch.stack(ce_embs)), torch.tensor(ce_targets)
            )
            batch_loss = total_loss(dice_mean, cl_mean) + ce
            if not torch.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches} "
                    f"(samples {batch.tolist()})",
                    epoch=epoch,
                    batch=n_batches,
                )
            batch_loss.backward()
            optimizer.step()
            sums["dice"] += float(dice_mean.detach())
            sums["cl"] += float(cl_mean.detach())
            sums["intent_ce"] += float(ce.detach())
            n_batches += 1

        entry = {
            "epoch": epoch,
            "dice": sums["dice"] / n_batches,
            "cl": sums["cl"] / n_batches,
            "total": (sums["dice"] + sums["cl"]) / n_batches,
            "lr": config.learning_rate,
            "intent_ce": sums["intent_ce"] / n_batches,
        }
        log.append(entry)
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for entry in log:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return log


# --------------------------------------------------------------------------
# evaluation


def evaluate_intention_detailed(model: AsiSegModel, samples, *,
                                mispronounce_level: float = 0.0,
                                perturb_kind: str | None = None,
                                perturb_magnitude: float = 0.0,
                                seed: int = 0):
    """Issue each present class's command, segment, score against that class.

    Returns (MetricsReport, intent_accuracy). The partition target is always
    the classifier's prediction, so misrecognized commands hurt IoU.
    """
    samples = list(samples)
    k = model.config.num_classes
    records = []
    n_commands = 0
    n_correct = 0
    with torch.no_grad():
        q = model.instrument_queries()
        for i, s in enumerate(samples):
            f = model.image_features(s.image)
            for c in s.present_classes:
                clip = command_clip(s, c, k, mispronounce_level)
                if perturb_kind is not None and perturb_magnitude > 0:
                    clip = perturb_audio(clip, perturb_kind, perturb_magnitude,
                                         seed=_derived_seed(seed, i, c, perturb_kind))
                label = model.intent_from_clip(clip)
                n_commands += 1
                n_correct += int(label.class_index == c)
                logits, _, _ = model.segment_target(f, label.class_index, queries=q)
                records.append((i, c, compute_iou(threshold(logits), s.masks[c])))
    report = aggregate_records(records, len(samples), k)
    accuracy = n_correct / n_commands if n_commands else 0.0
    return report, accuracy


def evaluate_intention(model: AsiSegModel, samples, **kwargs) -> MetricsReport:
    return evaluate_intention_detailed(model, samples, **kwargs)[0]


def evaluate_semantic(model: AsiSegModel, samples, background_threshold: float = 0.0,
                      mispronounce_level: float = 0.0) -> MetricsReport:
    """Command every class per frame, compose a label map by per-pixel argmax.

    Pixels where every class's logit is <= background_threshold stay
    background; metrics cover the classes present in each frame.
    """
    samples = list(samples)
    k = model.config.num_classes
    records = []
    with torch.no_grad():
        q = model.instrument_queries()
        for i, s in enumerate(samples):
            f = model.image_features(s.image)
            per_class_logits = []
            for c in range(k):
                clip = command_clip(s, c, k, mispronounce_level)
                label = model.intent_from_clip(clip)
                logits, _, _ = model.segment_target(f, label.class_index, queries=q)
                per_class_logits.append(logits.numpy())
            stack = np.stack(per_class_logits)  # [K, H, W]
            winner = np.argmax(stack, axis=0)
            foreground = np.max(stack, axis=0) > background_threshold
            for c in s.present_classes:
                pred = (winner == c) & foreground
                records.append((i, c, compute_iou(pred, s.masks[c])))
    return aggregate_records(records, len(samples), k)


def robustness_sweep(model: AsiSegModel, samples, kinds, magnitudes, seed: int = 0) -> list:
    """Intent accuracy and mc IoU on a perturbation grid.

    kinds may be any perturb_audio kind plus "mispronounce", which resynthesizes
    the command at the given garbling level instead of filtering the waveform.
    Magnitude 0 always reproduces the clean evaluation.
    """
    rows = []
    for kind in kinds:
        for magnitude in magnitudes:
            if kind == "mispronounce":
                report, acc = evaluate_intention_detailed(
                    model, samples, mispronounce_level=magnitude
                )
            else:
                report, acc = evaluate_intention_detailed(
                    model, samples, perturb_kind=kind, perturb_magnitude=magnitude,
                    seed=seed,
                )
            rows.append(
                {
                    "kind": kind,
                    "magnitude": magnitude,
                    "intent_accuracy": acc,
                    "mc_iou": report.mc_iou,
                }
            )
    return rows
