"""Named random streams derived from a single root seed.

Every component asks for its own stream, e.g. ``numpy_rng(seed, "pairs", source_id)``,
so that adding a consumer never shifts the numbers another consumer sees and
per-item streams do not depend on scheduling order.
"""

import hashlib

import numpy as np
import torch


def _key_words(key):

    if isinstance(key, (int, np.integer)) and key >= 0:
        return [int(key) & 0xFFFFFFFF, int(key) >> 32]

    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def seed_sequence(root_seed, name, *keys):

    spawn_key = []
    for key in (name,) + keys:
        spawn_key.extend(_key_words(key))

    return np.random.SeedSequence(entropy=int(root_seed), spawn_key=tuple(spawn_key))


def derive_seed(root_seed, name, *keys):
    """Return a 63-bit integer seed for the named stream."""

    state = seed_sequence(root_seed, name, *keys).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def numpy_rng(root_seed, name, *keys):

    return np.random.default_rng(seed_sequence(root_seed, name, *keys))


def torch_generator(root_seed, name, *keys, device="cpu"):

    gen = torch.Generator(device=device)
    gen.manual_seed(derive_seed(root_seed, name, *keys))
    return gen


def set_deterministic(enabled=True):
    """Toggle deterministic torch kernels; returns whether they are active."""

    torch.use_deterministic_algorithms(bool(enabled), warn_only=True)
    return torch.are_deterministic_algorithms_enabled()
