"""Counter-based random streams, derived from one root seed.

Every random draw in the package flows through :func:`stream`, a Philox4x64
generator keyed by SHA-256 of the labeled derivation path
``(root_seed, label, *indices)``. Streams are therefore reproducible and
independent of evaluation order: the generator for (seed=7, "generate",
step=12, seq=3) is the same whether or not any other stream was used first.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_words(root_seed: int, label: str, indices: tuple[int, ...]) -> np.ndarray:
    path = f"{root_seed}|{label}|" + "|".join(str(i) for i in indices)
    digest = hashlib.sha256(path.encode("utf-8")).digest()
    return np.frombuffer(digest[:32], dtype=np.uint64)


def stream(root_seed: int, label: str, *indices: int) -> np.random.Generator:
    """Independent generator for the given derivation path."""
    return np.random.Generator(np.random.Philox(key=_key_words(root_seed, label, indices)))
