"""Named random sub-streams derived from one root seed."""

import zlib

import numpy as np
import torch


def _key(name):
    return zlib.crc32(str(name).encode("utf-8"))


def seed_sequence(seed, *names):
    return np.random.SeedSequence([int(seed)] + [_key(n) for n in names])


def rng_for(seed, *names):
    """numpy Generator for the sub-stream ``names`` of ``seed``."""
    return np.random.default_rng(seed_sequence(seed, *names))


def derive_seed(seed, *names):
    """A 31-bit integer seed for the sub-stream ``names`` of ``seed``."""
    return int(seed_sequence(seed, *names).generate_state(1)[0] & 0x7FFFFFFF)


def torch_generator(seed, *names):
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, *names))
    return g
