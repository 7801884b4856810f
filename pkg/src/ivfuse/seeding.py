"""Root-seed expansion: every subsystem draws from its own derived stream."""

import zlib

import numpy as np


def derive_seed(root: int, name: str) -> int:
    """Independent 32-bit seed for subsystem ``name`` under ``root``."""
    seq = np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def record_mask_seed(root: int, stem: str, modality: str) -> int:
    """Seed of the synthetic mask for one record and modality."""
    return derive_seed(root, f"mask:{stem}.{modality}")
