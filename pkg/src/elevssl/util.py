"""Deterministic hashing and RNG-stream derivation shared across the package."""

from __future__ import annotations

import hashlib
import json

import numpy as np
import torch


def canonical_json(obj) -> str:
    """Stable JSON encoding (sorted keys, no whitespace) used for hashing."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """sha256 of the canonical JSON form of a config dict."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def _fold_key(key) -> int:
    if isinstance(key, (int, np.integer)):
        # SeedSequence wants nonnegative entropy words
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(*keys) -> np.random.Generator:
    """Independent numpy generator for the stream named by `keys`.

    Streams are a pure function of the key tuple, so any (seed, purpose,
    epoch, index) combination yields the same draws regardless of how many
    other streams were created before it.
    """
    return np.random.default_rng(np.random.SeedSequence([_fold_key(k) for k in keys]))


def derive_torch_generator(*keys) -> torch.Generator:
    """Seeded torch generator for the stream named by `keys`."""
    seq = np.random.SeedSequence([_fold_key(k) for k in keys])
    gen = torch.Generator()
    gen.manual_seed(int(seq.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF))
    return gen
