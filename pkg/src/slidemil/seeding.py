"""Seed plumbing: one master seed fans out into named substreams."""

import hashlib

import numpy as np


def substream_seed(master_seed: int, name: str) -> int:
    """Derive a stable 63-bit seed for a named substream of the master seed."""
    digest = hashlib.sha256(f"{master_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def substream_rng(master_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(master_seed, name))
