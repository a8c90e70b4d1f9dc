"""Instrument description bank and its frozen text encoder.

The bank stores one free-text description per instrument class; the encoder
turns each description into a row of a K x d feature matrix. The default
encoder is a deterministic hashed bag-of-tokens projection so identical text
always yields identical rows, with no external weights required.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from importlib import resources

import numpy as np
import torch

from .errors import SchemaError

DEFAULT_NUM_CLASSES = 7

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass
class InstrumentDescription:
    class_index: int
    class_name: str
    description: str

    def __post_init__(self):
        if not self.class_name:
            raise SchemaError("class_name must be non-empty")
        if not self.description or not self.description.strip():
            raise SchemaError(f"description for class {self.class_index} must be non-empty")


@dataclass
class DescriptionBank:
    """Ordered list of K descriptions, one per class index 0..K-1."""

    entries: list

    def __post_init__(self):
        for i, entry in enumerate(self.entries):
            if entry.class_index != i:
                raise SchemaError(
                    f"bank entries must cover class indices 0..K-1 in order; "
                    f"position {i} holds class_index {entry.class_index}"
                )
        if not self.entries:
            raise SchemaError("bank must contain at least one entry")

    @property
    def num_classes(self) -> int:
        return len(self.entries)

    @property
    def class_names(self) -> list:
        return [e.class_name for e in self.entries]


def _parse_bank_obj(obj) -> DescriptionBank:
    if not isinstance(obj, list) or not obj:
        raise SchemaError("bank file must be a non-empty JSON array")
    by_index = {}
    for item in obj:
        if not isinstance(item, dict):
            raise SchemaError("bank entries must be JSON objects")
        try:
            idx = int(item["class_index"])
            name = str(item["class_name"])
            desc = str(item["description"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bank entry missing or malformed field: {exc}") from exc
        if idx in by_index:
            raise SchemaError(f"duplicate class_index {idx} in bank file")
        by_index[idx] = InstrumentDescription(idx, name, desc)
    k = len(by_index)
    missing = [i for i in range(k) if i not in by_index]
    if missing:
        raise SchemaError(f"bank class indices must be contiguous from 0; missing {missing}")
    return DescriptionBank(entries=[by_index[i] for i in range(k)])


def load_bank(path, expected_classes: int | None = None) -> DescriptionBank:
    """Read and validate a bank JSON file.

    Raises SchemaError for malformed content and ValueError if the bank size
    disagrees with expected_classes.
    """
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip():
        raise SchemaError(f"{path} is empty")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path} is not valid JSON: {exc}") from exc
    bank = _parse_bank_obj(obj)
    if expected_classes is not None and bank.num_classes != expected_classes:
        raise ValueError(
            f"bank defines {bank.num_classes} classes but the run is configured for "
            f"{expected_classes}"
        )
    return bank


def default_bank() -> DescriptionBank:
    """Bundled seven-class bank (EndoVis-style instrument categories)."""
    text = resources.files("asiseg").joinpath("assets/default_bank.json").read_text("utf-8")
    return _parse_bank_obj(json.loads(text))


def _token_bin(token: str, n_bins: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % n_bins


class HashedTextEncoder:
    """Frozen hashed bag-of-tokens text encoder.

    Lowercased alphanumeric tokens are hashed into n_bins count buckets, the
    counts are projected with a seeded random matrix, and the result is
    L2-normalized. Rows depend only on their own description text.
    """

    def __init__(self, feature_dim: int = 64, n_bins: int = 1024, seed: int = 0):
        self.feature_dim = feature_dim
        self.n_bins = n_bins
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((n_bins, feature_dim)) / np.sqrt(n_bins)

    def encode_text(self, text: str) -> np.ndarray:
        counts = np.zeros(self.n_bins, dtype=np.float64)
        for token in _TOKEN_RE.findall(text.lower()):
            counts[_token_bin(token, self.n_bins)] += 1.0
        feat = counts @ self.projection
        norm = float(np.linalg.norm(feat))
        if norm > 0:
            feat = feat / norm
        return feat


def encode_descriptions(bank: DescriptionBank, encoder: HashedTextEncoder) -> torch.Tensor:
    """K x d text feature matrix; row k is a function of entry k only."""
    rows = [encoder.encode_text(e.description) for e in bank.entries]
    return torch.from_numpy(np.stack(rows)).to(torch.float32)
