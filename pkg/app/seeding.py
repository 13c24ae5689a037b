"""
Seed derivation and parameter hashing.

One global seed expands into per-stage seeds through a hash chain:

    derive_seed(seed, "codec")              -> codec training
    derive_seed(seed, "synthesis", target)  -> synthesis for one target

so any stage can be rerun on its own without colliding with another
stage's random stream.
"""
import hashlib
from contextlib import contextmanager
from typing import Iterator

import numpy as np
import torch

SEED_MASK = (1 << 63) - 1


def derive_seed(seed: int, *labels) -> int:
    """Child seed: sha256("{seed}/{label}/...") truncated to 63 bits"""
    text = "/".join([str(int(seed))] + [str(label) for label in labels])
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
    return int(digest[:16], 16) & SEED_MASK


def numpy_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def torch_generator(seed: int) -> torch.Generator:
    generator = torch.Generator(device="cpu")
    generator.manual_seed(seed & SEED_MASK)
    return generator


@contextmanager
def seeded(seed: int) -> Iterator[None]:
    """Seed torch's global RNG for module construction without leaking state"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed & SEED_MASK)
        yield


def params_hash(module: torch.nn.Module) -> str:
    """SHA-256 over a module's state dict, keys sorted"""
    digest = hashlib.sha256()
    state = module.state_dict()
    for key in sorted(state):
        tensor = state[key].detach().cpu().contiguous()
        digest.update(key.encode("utf-8"))
        digest.update(str(tuple(tensor.shape)).encode("utf-8"))
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()[:16]
