"""Named random substreams derived from the single run seed."""
from __future__ import annotations

import hashlib

import numpy as np

STREAMS = ("split", "init", "shuffle", "augment", "phantom")


def substream_seed(seed: int, name: str, *keys) -> int:
    if name not in STREAMS:
        raise ValueError(f"unknown random substream {name!r}; expected one of {STREAMS}")
    token = ":".join([str(int(seed)), name, *map(str, keys)]).encode()
    return int.from_bytes(hashlib.sha256(token).digest()[:8], "little") >> 1


def substream(seed: int, name: str, *keys) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, name, *keys))
