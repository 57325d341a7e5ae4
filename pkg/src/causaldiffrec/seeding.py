"""Named random substreams derived from one global seed.

Every stochastic component (negative sampling, graph edits, latent noise,
diffusion noise, batching) pulls from its own named stream so that adding
or reordering consumers of one stream never changes the draws of another.
"""

import hashlib
import os

import numpy as np
import torch

ENV_SEED_VAR = "CAUSALDIFFREC_SEED"
DEFAULT_SEED = 0


def resolve_seed(seed: int | None) -> int:
    """Explicit seed wins, then the environment variable, then 0."""
    if seed is not None:
        return int(seed)
    env = os.environ.get(ENV_SEED_VAR)
    if env is not None:
        return int(env)
    return DEFAULT_SEED


def substream_seed(seed: int, name: str) -> int:
    """Derive a 63-bit child seed from (seed, name) via a keyed hash."""
    digest = hashlib.blake2b(f"{seed}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & ((1 << 63) - 1)


def numpy_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, name))


def torch_generator(seed: int, name: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(substream_seed(seed, name))
    return gen
