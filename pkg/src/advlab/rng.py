"""Deterministic seed derivation.

All randomness in a run flows from one root seed. Each consumer (data
order, mixup alpha, random starts, parameter init, ...) derives its own
stream by name so that changing one consumer never perturbs another.
"""

import hashlib

import numpy as np
import torch


def seed_for(root_seed: int, *labels) -> int:
    """Derive a child seed from a root seed and a label path."""
    h = hashlib.sha256()
    h.update(str(int(root_seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little") % (2**63 - 1)


def np_rng(root_seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(seed_for(root_seed, *labels))


def torch_rng(root_seed: int, *labels) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed_for(root_seed, *labels))
    return g
