"""Deterministic synthetic benchmark, dataset loaders, and manifests.

Every frame holds 1..max_instruments non-overlapping filled polygons; class k
always draws from the same shape family (a (k+3)-gon), color, and stripe
texture, and carries one synthesized spoken-command waveform per present
class. Everything is a pure function of the config seed so a regenerated tree
is byte-identical. The on-disk layout doubles as the external-dataset layout:
<root>/<split>/images/<id>.png plus per-class binary masks under
<root>/<split>/masks/<class_index>/<id>.png.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .audio import AudioClip, read_wav, write_wav
from .errors import DatasetError

SAMPLE_RATE = 16000

CLASS_COLORS = np.array(
    [
        [220, 60, 50],    # red
        [60, 200, 70],    # green
        [70, 90, 220],    # blue
        [230, 200, 60],   # yellow
        [200, 70, 200],   # magenta
        [60, 210, 210],   # cyan
        [240, 140, 50],   # orange
        [160, 160, 160],  # extra classes reuse gray-ish tones
        [120, 60, 20],
        [20, 100, 60],
    ],
    dtype=np.float64,
)

BACKGROUND_RGB = np.array([45.0, 48.0, 52.0])


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 7
    image_size: int = 64
    n_train: int = 300
    n_val: int = 60
    max_instruments_per_frame: int = 3
    noise_level: float = 0.03
    seed: int = 7

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.image_size % 8:
            raise ValueError("image_size must be divisible by the encoder stride (8)")
        if not 1 <= self.max_instruments_per_frame <= self.num_classes:
            raise ValueError("max_instruments_per_frame must be in [1, num_classes]")


@dataclass
class SceneSample:
    """One frame: image, per-class masks, and optional command audio."""

    sample_id: str
    image: np.ndarray                 # [H, W, 3] uint8
    masks: np.ndarray                 # [K, H, W] uint8 in {0, 1}
    present_classes: tuple
    audio_per_class: dict = field(default_factory=dict)

    def __post_init__(self):
        nonempty = tuple(int(k) for k in range(self.masks.shape[0]) if self.masks[k].any())
        if tuple(self.present_classes) != nonempty:
            raise DatasetError(
                f"{self.sample_id}: present_classes {self.present_classes} does not match "
                f"non-empty masks {nonempty}"
            )

    @property
    def num_classes(self) -> int:
        return self.masks.shape[0]


@dataclass
class DatasetManifest:
    root: str
    split: str
    ids: list
    checksum: str
    files: dict


# --------------------------------------------------------------------------
# shape rendering


def polygon_vertices(class_index: int, cx: float, cy: float, radius: float,
                     rotation: float) -> np.ndarray:
    n = class_index + 3
    angles = rotation + 2.0 * np.pi * np.arange(n) / n
    return np.stack([cx + radius * np.cos(angles), cy + radius * np.sin(angles)], axis=1)


def rasterize_polygon(height: int, width: int, vertices: np.ndarray) -> np.ndarray:
    """Even-odd polygon fill evaluated at integer pixel centers."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    inside = np.zeros((height, width), dtype=bool)
    n = vertices.shape[0]
    for i in range(n):
        x1, y1 = vertices[i]
        x2, y2 = vertices[(i + 1) % n]
        crosses = (y1 > ys) != (y2 > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = (x2 - x1) * (ys - y1) / (y2 - y1) + x1
        inside ^= crosses & (xs < x_at)
    return inside.astype(np.uint8)


def render_masks(shape_params: list, num_classes: int, image_size: int) -> np.ndarray:
    """Per-class masks from stored shape parameters (exact regeneration)."""
    masks = np.zeros((num_classes, image_size, image_size), dtype=np.uint8)
    for sp in shape_params:
        verts = polygon_vertices(sp["class_index"], sp["cx"], sp["cy"], sp["radius"],
                                 sp["rotation"])
        masks[sp["class_index"]] |= rasterize_polygon(image_size, image_size, verts)
    return masks


def _paint_image(shape_params: list, masks: np.ndarray, image_size: int,
                 noise_level: float, rng: np.random.Generator) -> np.ndarray:
    size = image_size
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = BACKGROUND_RGB
    img += (10.0 * ys / size)[..., None]  # gentle vertical light gradient
    for sp in shape_params:
        k = sp["class_index"]
        theta = np.pi * k / 7.0
        freq = 0.18 + 0.04 * (k % 4)
        stripes = 0.85 + 0.15 * np.sin(2.0 * np.pi * freq * (xs * np.cos(theta)
                                                             + ys * np.sin(theta)))
        color = CLASS_COLORS[k % len(CLASS_COLORS)] * sp["brightness"]
        sel = masks[k].astype(bool)
        img[sel] = (color[None, :] * stripes[sel][:, None])
    img += rng.standard_normal(img.shape) * noise_level * 255.0
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def _place_shapes(rng: np.random.Generator, config: SynthConfig) -> list:
    size = config.image_size
    scale = size / 64.0
    n_shapes = int(rng.integers(1, config.max_instruments_per_frame + 1))
    classes = sorted(int(c) for c in rng.choice(config.num_classes, n_shapes, replace=False))
    placed = []
    for k in classes:
        radius = float(rng.uniform(9.0, 14.0)) * scale
        while radius >= 4.0:
            ok = False
            for _ in range(60):
                cx = float(rng.uniform(radius + 2, size - radius - 2))
                cy = float(rng.uniform(radius + 2, size - radius - 2))
                if all(
                    np.hypot(cx - p["cx"], cy - p["cy"]) >= radius + p["radius"] + 2.0
                    for p in placed
                ):
                    ok = True
                    break
            if ok:
                break
            radius *= 0.85
        placed.append(
            {
                "class_index": k,
                "cx": cx,
                "cy": cy,
                "radius": radius,
                "rotation": float(rng.uniform(0.0, 2.0 * np.pi)),
                "brightness": float(rng.uniform(0.85, 1.1)),
            }
        )
    return placed


# --------------------------------------------------------------------------
# command audio


def command_seed(sample_id: str, class_index: int) -> int:
    """Stable per-(frame, class) audio seed; shared by generation and eval."""
    digest = hashlib.blake2b(f"{sample_id}/{class_index}".encode(), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def synth_command_audio(class_index: int, seed: int, mispronounce_level: float = 0.0,
                        num_classes: int | None = None) -> AudioClip:
    """1-second spoken-command stand-in for one instrument class.

    Each class owns a fundamental plus a harmonic amplitude pattern, played as
    five amplitude-modulated segments. mispronounce_level > 0 jitters the
    component frequencies/amplitudes and swaps adjacent segments, emulating a
    garbled instrument name; level 0 is the canonical command.
    """
    if mispronounce_level < 0:
        raise ValueError("mispronounce_level must be >= 0")
    upper = num_classes if num_classes is not None else 21
    if not 0 <= class_index < upper:
        raise ValueError(f"class_index {class_index} out of range [0, {upper})")
    rng = np.random.default_rng([seed, class_index])
    n = SAMPLE_RATE
    k = class_index
    freqs = np.array([1.0, 2.0, 3.0]) * (320.0 + 110.0 * k)
    amps = np.array([1.0, 0.55 + 0.15 * (k % 3), 0.3 + 0.1 * ((k + 1) % 4)])
    phases = rng.uniform(0.0, 2.0 * np.pi, 3)

    if mispronounce_level > 0:
        freqs = freqs * (1.0 + 0.2 * mispronounce_level * rng.uniform(-1.0, 1.0, 3))
        amps = np.maximum(amps * (1.0 + 0.3 * mispronounce_level * rng.uniform(-1.0, 1.0, 3)),
                          0.05)

    n_segments = 5
    order = list(range(n_segments))
    if mispronounce_level > 0:
        for _ in range(int(round(4 * mispronounce_level))):
            i = int(rng.integers(0, n_segments - 1))
            order[i], order[i + 1] = order[i + 1], order[i]

    seg_len = n // n_segments
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(160) / 160.0)
    envelope = np.ones(seg_len)
    envelope[:160] = ramp
    envelope[-160:] = ramp[::-1]

    pieces = []
    for pos, seg_id in enumerate(order):
        t = np.arange(pos * seg_len, (pos + 1) * seg_len, dtype=np.float64) / SAMPLE_RATE
        seg = np.zeros(seg_len)
        for i in range(3):
            gain = 1.0 + 0.3 * np.sin(2.0 * np.pi * (seg_id * (i + 1) + k) / n_segments)
            seg += amps[i] * gain * np.sin(2.0 * np.pi * freqs[i] * t + phases[i])
        pieces.append(seg * envelope)
    x = np.concatenate(pieces)
    x *= 0.7 / max(float(np.max(np.abs(x))), 1e-12)
    x += 0.01 * rng.standard_normal(n)
    return AudioClip(samples=np.clip(x, -1.0, 1.0))


# --------------------------------------------------------------------------
# on-disk layout


def _split_dirs(root: Path, split: str) -> dict:
    base = root / split
    return {
        "base": base,
        "images": base / "images",
        "masks": base / "masks",
        "audio": base / "audio",
        "params": base / "params",
    }


def _sample_files(split: str, sample_id: str, num_classes: int, present) -> list:
    rel = [f"{split}/images/{sample_id}.png", f"{split}/params/{sample_id}.json"]
    rel += [f"{split}/masks/{k}/{sample_id}.png" for k in range(num_classes)]
    rel += [f"{split}/audio/{k}/{sample_id}.wav" for k in present]
    return rel


def _hash_file(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _files_checksum(files: dict) -> str:
    h = hashlib.sha256()
    for rel in sorted(files):
        h.update(f"{rel}  {files[rel]}\n".encode())
    return h.hexdigest()


def write_manifest(root, split: str, ids: list, file_list: list) -> DatasetManifest:
    root = Path(root)
    files = {rel: _hash_file(root / rel) for rel in file_list}
    manifest = DatasetManifest(
        root=str(root), split=split, ids=list(ids), checksum=_files_checksum(files), files=files
    )
    payload = {
        "format": 1,
        "split": split,
        "ids": manifest.ids,
        "files": manifest.files,
        "checksum": manifest.checksum,
    }
    with open(root / split / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest


def read_manifest(root, split: str) -> DatasetManifest:
    path = Path(root) / split / "manifest.json"
    if not path.exists():
        raise DatasetError(f"no manifest at {path}")
    obj = json.loads(path.read_text("utf-8"))
    return DatasetManifest(
        root=str(root), split=split, ids=list(obj["ids"]), checksum=obj["checksum"],
        files=dict(obj["files"]),
    )


def verify_manifest(manifest: DatasetManifest) -> None:
    """Re-hash every listed file; any byte change raises DatasetError."""
    root = Path(manifest.root)
    if _files_checksum(manifest.files) != manifest.checksum:
        raise DatasetError(f"{manifest.split}: manifest checksum does not match file table")
    for rel, expect in manifest.files.items():
        path = root / rel
        if not path.exists():
            raise DatasetError(f"{manifest.split}: listed file missing: {rel}")
        if _hash_file(path) != expect:
            raise DatasetError(f"{manifest.split}: content changed: {rel}")


def _save_png(path: Path, array: np.ndarray, mode: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array, mode=mode).save(path, format="PNG")


def save_mask_png(path, mask: np.ndarray) -> None:
    """Binary {0,1} mask -> 8-bit grayscale 0/255 PNG."""
    _save_png(Path(path), (mask.astype(np.uint8) * 255), "L")


def load_mask_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    values = set(np.unique(arr).tolist())
    if not values <= {0, 255}:
        raise DatasetError(f"{path}: mask is not binary 0/255 (found values {sorted(values)})")
    return (arr == 255).astype(np.uint8)


def load_image_png(path) -> np.ndarray:
    return np.array(Image.open(path).convert("RGB"), dtype=np.uint8)


def generate_dataset(config: SynthConfig, root) -> list:
    """Write the synthetic benchmark under root; returns one manifest per split."""
    root = Path(root)
    manifests = []
    for split_idx, (split, count) in enumerate(
        [("train", config.n_train), ("val", config.n_val)]
    ):
        dirs = _split_dirs(root, split)
        for d in dirs.values():
            d.mkdir(parents=True, exist_ok=True)
        ids, file_list = [], []
        for idx in range(count):
            sample_id = f"{split}_{idx:04d}"
            rng = np.random.default_rng([config.seed, split_idx, idx])
            shapes = _place_shapes(rng, config)
            masks = render_masks(shapes, config.num_classes, config.image_size)
            image = _paint_image(shapes, masks, config.image_size, config.noise_level, rng)
            present = sorted({sp["class_index"] for sp in shapes})

            _save_png(dirs["images"] / f"{sample_id}.png", image, "RGB")
            for k in range(config.num_classes):
                save_mask_png(dirs["masks"] / str(k) / f"{sample_id}.png", masks[k])
            for k in present:
                clip = synth_command_audio(k, command_seed(sample_id, k), 0.0,
                                           config.num_classes)
                wav_path = dirs["audio"] / str(k) / f"{sample_id}.wav"
                wav_path.parent.mkdir(parents=True, exist_ok=True)
                write_wav(wav_path, clip)
            params = {
                "format": 1,
                "sample_id": sample_id,
                "num_classes": config.num_classes,
                "image_size": config.image_size,
                "classes": present,
                "shapes": shapes,
            }
            with open(dirs["params"] / f"{sample_id}.json", "w", encoding="utf-8") as fh:
                json.dump(params, fh, sort_keys=True, indent=1)
                fh.write("\n")
            ids.append(sample_id)
            file_list.extend(
                _sample_files(split, sample_id, config.num_classes, present)
            )
        manifests.append(write_manifest(root, split, ids, file_list))
    return manifests


def _mask_class_dirs(masks_dir: Path) -> list:
    if not masks_dir.is_dir():
        raise DatasetError(f"missing masks directory {masks_dir}")
    dirs = sorted(int(p.name) for p in masks_dir.iterdir() if p.is_dir() and p.name.isdigit())
    if dirs != list(range(len(dirs))) or not dirs:
        raise DatasetError(
            f"mask class directories under {masks_dir} must be contiguous 0..K-1, got {dirs}"
        )
    return dirs


def _load_frames(root: Path, split: str, ids: list, with_audio: bool) -> list:
    dirs = _split_dirs(root, split)
    classes = _mask_class_dirs(dirs["masks"])
    samples = []
    for sample_id in ids:
        img_path = dirs["images"] / f"{sample_id}.png"
        if not img_path.exists():
            raise DatasetError(f"{split}: missing image for listed frame {sample_id}")
        image = load_image_png(img_path)
        masks = []
        for k in classes:
            mask_path = dirs["masks"] / str(k) / f"{sample_id}.png"
            if not mask_path.exists():
                raise DatasetError(
                    f"{split}: missing mask for listed frame {sample_id}, class {k}"
                )
            masks.append(load_mask_png(mask_path))
        masks = np.stack(masks)
        audio = {}
        if with_audio:
            for k in classes:
                wav_path = dirs["audio"] / str(k) / f"{sample_id}.wav"
                if wav_path.exists():
                    audio[k] = read_wav(wav_path)
        present = tuple(int(k) for k in classes if masks[k].any())
        samples.append(
            SceneSample(
                sample_id=sample_id,
                image=image,
                masks=masks,
                present_classes=present,
                audio_per_class=audio,
            )
        )
    return samples


def load_split(root, split: str, verify: bool = False) -> list:
    """Load one generated split via its manifest."""
    manifest = read_manifest(root, split)
    if verify:
        verify_manifest(manifest)
    return _load_frames(Path(root), split, manifest.ids, with_audio=True)


def load_endovis(root, split_spec) -> list:
    """Load an external-format dataset from a split-spec file.

    The spec file is JSON {"name": <split dir>, "ids": [frame ids]}. Frames
    are paired with per-class binary masks; command audio is synthesized (or
    supplied as WAVs) at evaluation time, so audio_per_class stays empty here.
    """
    spec = json.loads(Path(split_spec).read_text("utf-8"))
    name = spec.get("name") or spec.get("split")
    if not name or "ids" not in spec:
        raise DatasetError(f"{split_spec}: split spec needs 'name' and 'ids'")
    ids = list(spec["ids"])
    if not ids:
        warnings.warn(f"{split_spec}: empty id list, returning empty dataset")
        return []
    return _load_frames(Path(root), name, ids, with_audio=False)
