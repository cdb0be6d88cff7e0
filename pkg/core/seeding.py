import hashlib
from typing import Union

import numpy as np

SeedKey = Union[int, str]


def _key_to_int(key: SeedKey) -> int:
    if isinstance(key, bool):
        raise TypeError("seed keys must be int or str")
    if isinstance(key, int):
        if key < 0:
            raise ValueError(f"seed keys must be non-negative, got {key}")
        return key
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(seed: int, *keys: SeedKey) -> int:
    """
    Derive a 64-bit child seed from a root seed and a path of named keys.

    ``derive_seed(s, "sample", "img_001", 2)`` is stable across processes,
    thread counts and evaluation order.
    """
    entropy = [_key_to_int(seed), *(_key_to_int(k) for k in keys)]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)
