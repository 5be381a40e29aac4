# src/app/core/seeding.py
import hashlib

import numpy as np


def derive_seed(root_seed: int, label: str) -> int:
    """
    Derive a stable 63-bit sub-seed from the root seed and a label.

    Every random component (corpus, noise, init, routing, mc, eval) draws from
    its own labelled stream so it can be reproduced on its own.
    """
    digest = hashlib.sha256(f"{int(root_seed)}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def make_rng(root_seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root_seed, label))
