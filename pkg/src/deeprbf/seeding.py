"""Hierarchical seed derivation.

A child seed is a hash of the master seed and a path of names, so adding a new
consumer (say, another sweep cell) never shifts the seeds of existing ones.
"""

import hashlib


def derive_seed(master: int, *path) -> int:
    key = repr((int(master),) + tuple(str(p) for p in path)).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1
