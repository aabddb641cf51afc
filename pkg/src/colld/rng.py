"""Named random streams derived from one root seed.

Every consumer asks for ``stream(root, name, *keys)``; the same arguments always
give the same generator, so a run can resume at any step without carrying
generator state around.
"""
import zlib

import numpy as np

STREAMS = ("data", "mask", "distractors", "init_teacher", "init_student", "init_heads", "collapse",
           "split", "probe", "eval")


def stream(root_seed: int, name: str, *keys: int) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    tag = zlib.crc32(name.encode())
    return np.random.default_rng([int(root_seed), tag, *(int(k) for k in keys)])
