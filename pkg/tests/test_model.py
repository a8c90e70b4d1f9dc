import pytest
import torch

from asiseg.audio import NormStats
from asiseg.bank import default_bank
from asiseg.errors import CheckpointError
from asiseg.model import AsiSegModel, ModelConfig, load_checkpoint, save_checkpoint


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(num_classes=0)


def test_bank_size_must_match_config():
    with pytest.raises(ValueError, match="classes"):
        AsiSegModel(ModelConfig(num_classes=5), bank=default_bank())


def test_param_partition_disjoint_and_exhaustive():
    model = AsiSegModel(ModelConfig(seed=0))
    groups = model.param_partition()
    assert set(groups["frozen"]) == {"image_encoder", "audio_encoder"}
    assert set(groups["trainable"]) == {
        "classifier", "text_fusion", "distinguish", "prompt_proj", "decoder", "queries",
    }
    counted = sum(p.numel() for side in groups.values() for ps in side.values() for p in ps)
    total = sum(p.numel() for p in model.parameters())
    assert counted == total


def test_encoder_checksum_tracks_encoder_bytes():
    model = AsiSegModel(ModelConfig(seed=0))
    before = model.encoder_checksum()
    assert before == model.encoder_checksum()
    with torch.no_grad():
        next(model.image_encoder.parameters()).add_(1.0)
    assert model.encoder_checksum() != before


def test_instrument_queries_bank_toggle():
    with_bank = AsiSegModel(ModelConfig(seed=0, use_bank=True))
    without = AsiSegModel(ModelConfig(seed=0, use_bank=False))
    assert torch.equal(without.instrument_queries(), without.queries)
    assert not torch.equal(with_bank.instrument_queries(), with_bank.queries)


def test_checkpoint_round_trip(tmp_path):
    model = AsiSegModel(ModelConfig(seed=3))
    model.set_norm_stats(NormStats(mu=-4.0, min_val=-23.0, max_val=5.0, n_mels=80))
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    again = load_checkpoint(path)
    assert again.config == model.config
    assert again.class_names == model.class_names
    assert again.norm_stats.mu == -4.0
    for k, v in model.state_dict().items():
        assert torch.equal(again.state_dict()[k], v), k


def test_checkpoint_version_mismatch(tmp_path):
    model = AsiSegModel(ModelConfig(seed=0))
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    payload = torch.load(path, weights_only=False)
    payload["format_version"] = 99
    torch.save(payload, path)
    with pytest.raises(CheckpointError, match="format_version"):
        load_checkpoint(path)


def test_checkpoint_corrupt_file(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(path)


def test_checkpoint_bank_k_mismatch(tmp_path):
    from asiseg.bank import DescriptionBank, InstrumentDescription

    model = AsiSegModel(ModelConfig(seed=0))
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    small = DescriptionBank(
        [InstrumentDescription(i, f"c{i}", f"tool number {i}") for i in range(3)]
    )
    with pytest.raises(ValueError, match="K=7"):
        load_checkpoint(path, bank=small)


def test_segment_with_audio_pipeline(tiny_trained_model, mini_val):
    sample = mini_val[0]
    target = sample.present_classes[0]
    clip = sample.audio_per_class[target]
    logits, label = tiny_trained_model.segment_with_audio(sample.image, clip)
    assert logits.shape == sample.image.shape[:2]
    assert 0 <= label.class_index < 7
    assert abs(label.probabilities.sum() - 1.0) < 1e-6


def test_audio_embedding_requires_stats():
    model = AsiSegModel(ModelConfig(seed=0))
    from asiseg.data import synth_command_audio

    with pytest.raises(ValueError, match="stats"):
        model.audio_embedding(synth_command_audio(0, seed=0))
