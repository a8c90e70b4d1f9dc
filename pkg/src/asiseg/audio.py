"""Audio command front end.

Turns raw 16 kHz waveforms into normalized log-mel spectrograms, embeds them
with a frozen convolutional encoder, and classifies the commanded instrument.
Also provides the perturbation tooling used by the robustness sweep.
"""

from __future__ import annotations

import json
import math
import wave
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

REQUIRED_SAMPLE_RATE = 16000

# Floor applied to mel filterbank power before taking the log.
LOG_FLOOR = 1e-10


@dataclass
class AudioClip:
    """Mono waveform at 16 kHz, samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int = REQUIRED_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("AudioClip needs a non-empty 1-D sample array")
        if self.sample_rate_hz != REQUIRED_SAMPLE_RATE:
            raise ValueError(
                f"sample rate must be {REQUIRED_SAMPLE_RATE} Hz, got {self.sample_rate_hz}"
            )
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip samples must be finite")
        if np.max(np.abs(self.samples)) > 1.0 + 1e-12:
            raise ValueError("AudioClip samples must lie in [-1, 1]")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class MelConfig:
    """Log-mel front-end geometry (25 ms window / 10 ms hop defaults)."""

    n_mels: int = 80
    window_samples: int = 400
    hop_samples: int = 160
    fft_size: int = 512

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not (0 < self.hop_samples <= self.window_samples <= self.fft_size):
            raise ValueError("need 0 < hop_samples <= window_samples <= fft_size")


@dataclass
class MelSpectrogram:
    """Log-mel matrix [n_mels x frames]."""

    values: np.ndarray
    config: MelConfig

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class NormStats:
    """Dataset-level mean and extrema of log-mel values."""

    mu: float
    min_val: float
    max_val: float
    n_mels: int = 80

    def __post_init__(self):
        if not (self.min_val <= self.mu <= self.max_val):
            raise ValueError("need min_val <= mu <= max_val")

    def to_json(self) -> str:
        return json.dumps(
            {"mu": self.mu, "min": self.min_val, "max": self.max_val, "n_mels": self.n_mels},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "NormStats":
        obj = json.loads(text)
        return cls(mu=obj["mu"], min_val=obj["min"], max_val=obj["max"], n_mels=obj["n_mels"])


@dataclass
class NormalizedMel:
    values: np.ndarray
    stats_used: NormStats


@dataclass
class IntentLabel:
    """Recognized instrument class with its probability simplex."""

    class_index: int
    class_name: str
    probabilities: np.ndarray

    def to_json(self) -> str:
        return json.dumps(
            {
                "class_index": self.class_index,
                "class_name": self.class_name,
                "probabilities": [float(p) for p in self.probabilities],
            },
            sort_keys=True,
        )


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, fft_size: int, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
    """Triangular mel filters over [0, sr/2].

    Returns (filters [n_mels x fft_size//2+1], center_frequencies_hz [n_mels]).
    """
    n_bins = fft_size // 2 + 1
    bin_freqs = np.arange(n_bins, dtype=np.float64) * sample_rate / fft_size
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    filters = np.zeros((n_mels, n_bins), dtype=np.float64)
    for m in range(n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (bin_freqs - lo) / (ctr - lo)
        falling = (hi - bin_freqs) / (hi - ctr)
        filters[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return filters, hz_pts[1:-1].copy()


def _hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def compute_mel(clip: AudioClip, config: MelConfig = MelConfig()) -> MelSpectrogram:
    """Log-mel spectrogram with center zero-padding.

    Frame count is 1 + floor(n_samples / hop_samples); a fft_size-long analysis
    frame is taken every hop, with the Hann window centered inside it.
    """
    n = clip.samples.size
    if n < config.window_samples:
        raise ValueError(
            f"input too short: {n} samples < one analysis window ({config.window_samples})"
        )
    pad = config.fft_size // 2
    padded = np.concatenate(
        [np.zeros(pad), clip.samples.astype(np.float64), np.zeros(pad)]
    )
    n_frames = 1 + n // config.hop_samples

    window = np.zeros(config.fft_size, dtype=np.float64)
    off = (config.fft_size - config.window_samples) // 2
    window[off : off + config.window_samples] = _hann_periodic(config.window_samples)

    starts = np.arange(n_frames) * config.hop_samples
    idx = starts[:, None] + np.arange(config.fft_size)[None, :]
    frames = padded[idx] * window  # [frames x fft_size]

    spectrum = np.fft.rfft(frames, n=config.fft_size, axis=1)
    power = np.abs(spectrum) ** 2  # [frames x bins]
    filters, _ = mel_filterbank(config.n_mels, config.fft_size, clip.sample_rate_hz)
    mel_power = power @ filters.T  # [frames x n_mels]
    values = np.log(np.maximum(mel_power.T, LOG_FLOOR))
    return MelSpectrogram(values=values, config=config)


def fit_norm_stats(mels) -> NormStats:
    """Global mean / min / max over a collection of mel spectrograms."""
    mels = list(mels)
    if not mels:
        raise ValueError("cannot fit normalization stats on an empty collection")
    total = 0.0
    count = 0
    lo = math.inf
    hi = -math.inf
    for mel in mels:
        v = mel.values
        total += float(v.sum())
        count += v.size
        lo = min(lo, float(v.min()))
        hi = max(hi, float(v.max()))
    return NormStats(mu=total / count, min_val=lo, max_val=hi, n_mels=mels[0].config.n_mels)


def normalize_mel(mel: MelSpectrogram, stats: NormStats, mode: str = "mean") -> NormalizedMel:
    """Rescale a mel matrix by dataset stats.

    mode "mean":   2 * (x - mu) / (max - min) - 1   (maps mu to -1; range not
                   guaranteed to stay inside [-1, 1])
    mode "minmax": 2 * (x - min) / (max - min) - 1  (maps [min, max] to [-1, 1])
    """
    if mel.config.n_mels != stats.n_mels:
        raise ValueError(f"stats fitted for n_mels={stats.n_mels}, mel has {mel.config.n_mels}")
    span = stats.max_val - stats.min_val
    if span <= 0:
        raise ValueError("degenerate normalization stats: min_val == max_val")
    if mode == "mean":
        anchor = stats.mu
    elif mode == "minmax":
        anchor = stats.min_val
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    values = 2.0 * (mel.values - anchor) / span - 1.0
    return NormalizedMel(values=values, stats_used=stats)


class AudioEncoder(nn.Module):
    """Three strided conv blocks over the mel matrix, pooled to an embedding.

    Pooling averages over time only: command identity lives in which mel bands
    are active, and pooling the frequency axis away was measured to collapse
    class separability. The pooled channel-by-band grid is projected to
    embed_dim and standardized (parameter-free). Frozen after seeded
    initialization by default, standing in for a pretrained audio backbone;
    external encoders can be swapped in as long as they map
    [B, 1, n_mels, frames] to [B, embed_dim].
    """

    def __init__(self, n_mels: int = 80, embed_dim: int = 64, seed: int = 0, frozen: bool = True):
        super().__init__()
        self.n_mels = n_mels
        self.embed_dim = embed_dim
        bands_out = (n_mels + 7) // 8  # three stride-2 stages
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.blocks = nn.Sequential(
                nn.Conv2d(1, 16, kernel_size=3, stride=2, padding=1),
                nn.GELU(),
                nn.Conv2d(16, 32, kernel_size=3, stride=2, padding=1),
                nn.GELU(),
                nn.Conv2d(32, 64, kernel_size=3, stride=2, padding=1),
                nn.GELU(),
            )
            self.proj = nn.Linear(64 * bands_out, embed_dim)
        self.out_norm = nn.LayerNorm(embed_dim, elementwise_affine=False)
        if frozen:
            self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.n_mels:
            raise ValueError(
                f"expected input [B, 1, {self.n_mels}, frames], got {tuple(x.shape)}"
            )
        h = self.blocks(x).mean(dim=3)  # pool time -> [B, C, bands]
        return self.out_norm(self.proj(h.flatten(1)))


def encode_audio(norm: NormalizedMel, encoder: AudioEncoder) -> torch.Tensor:
    """Embed one normalized mel matrix; returns a length-embed_dim vector."""
    x = torch.from_numpy(np.ascontiguousarray(norm.values)).to(torch.float32)
    x = x.unsqueeze(0).unsqueeze(0)
    return encoder(x)[0]


class IntentClassifier(nn.Module):
    """Linear head + softmax over K instrument classes.

    Zero-initialized so an untrained head yields the uniform distribution, with
    a fixed logit gain so the pinned small-step optimizer budget still reaches
    decisive probabilities (the gain is a reparameterization; it could be
    folded into the weights).
    """

    LOGIT_GAIN = 16.0

    def __init__(self, embed_dim: int, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.linear = nn.Linear(embed_dim, num_classes)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        return self.linear(embedding) * self.LOGIT_GAIN


def classify_intent(embedding: torch.Tensor, classifier: IntentClassifier,
                    class_names=None) -> IntentLabel:
    """Softmax the classifier logits; argmax ties break to the lowest index."""
    with torch.no_grad():
        logits = classifier(embedding.reshape(1, -1))[0].double().numpy()
    if class_names is not None and len(class_names) != logits.size:
        raise ValueError(
            f"classifier has {logits.size} classes but {len(class_names)} names were given"
        )
    z = logits - logits.max()
    p = np.exp(z)
    p /= p.sum()
    idx = int(np.argmax(p))  # first maximum wins on ties
    name = class_names[idx] if class_names is not None else str(idx)
    return IntentLabel(class_index=idx, class_name=name, probabilities=p)


def perturb_audio(clip: AudioClip, kind: str, magnitude: float, seed: int = 0) -> AudioClip:
    """Degrade a command waveform for robustness measurement.

    kinds:
      noise        additive white noise with rms = magnitude * signal rms
                   (magnitude 0.1 corresponds to 20 dB SNR)
      time_warp    resample to length round(n * (1 + magnitude * u)), u ~ U(-1, 1)
      segment_swap exchange two disjoint segments of length magnitude * n

    magnitude 0 returns the input samples unchanged for every kind.
    """
    if magnitude < 0:
        raise ValueError("magnitude must be >= 0")
    if kind not in ("noise", "time_warp", "segment_swap"):
        raise ValueError(f"unknown perturbation kind {kind!r}")
    x = clip.samples
    if magnitude == 0:
        return AudioClip(samples=x.copy(), sample_rate_hz=clip.sample_rate_hz)
    rng = np.random.default_rng(seed)
    if kind == "noise":
        signal_rms = float(np.sqrt(np.mean(x**2)))
        noise = rng.standard_normal(x.size)
        noise *= magnitude * signal_rms / max(float(np.sqrt(np.mean(noise**2))), 1e-20)
        out = x + noise
    elif kind == "time_warp":
        rate = 1.0 + magnitude * rng.uniform(-1.0, 1.0)
        new_n = max(2, int(round(x.size * rate)))
        grid = np.linspace(0.0, x.size - 1.0, new_n)
        out = np.interp(grid, np.arange(x.size), x)
    else:  # segment_swap
        seg = max(1, int(round(magnitude * x.size)))
        seg = min(seg, x.size // 2)
        out = x.copy()
        a = int(rng.integers(0, x.size - 2 * seg + 1))
        b = int(rng.integers(a + seg, x.size - seg + 1))
        out[a : a + seg], out[b : b + seg] = x[b : b + seg].copy(), x[a : a + seg].copy()
    return AudioClip(samples=np.clip(out, -1.0, 1.0), sample_rate_hz=clip.sample_rate_hz)


def read_wav(path) -> AudioClip:
    """Load a 16-bit PCM mono 16 kHz WAV; other formats are rejected."""
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono WAV, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
        if wf.getframerate() != REQUIRED_SAMPLE_RATE:
            raise ValueError(
                f"{path}: expected {REQUIRED_SAMPLE_RATE} Hz, got {wf.getframerate()} "
                "(resampling is intentionally not performed)"
            )
        raw = wf.readframes(wf.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples=samples)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate_hz)
        wf.writeframes(pcm.tobytes())
