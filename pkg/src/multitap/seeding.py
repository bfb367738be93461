"""Deterministic seed derivation.

Every source of randomness in the project derives from a single 64-bit
global seed through :func:`derive_seed`.  Masks use the (global seed, epoch,
global batch index) path; per-sample augmentations use the (global seed,
epoch, sample index) path.  The two paths are domain-separated by salting
the global seed so that (epoch, index) collisions between them are harmless.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1

# splitmix64 increment / finalizer constants (Steele et al.).
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# Domain salts, xor-ed into the global seed by callers that need
# independent streams for the same (epoch, index) pair.
MASK_STREAM_SALT = 0x6D61736B73747231  # mask generation per (epoch, batch)
AUGMENT_STREAM_SALT = 0x6175676D656E74  # augmentation per (epoch, sample)
SHUFFLE_STREAM_SALT = 0x73687566666C65  # sample-order shuffle per epoch
INIT_STREAM_SALT = 0x696E697470617273  # parameter initialisation


def splitmix64(x: int) -> int:
    """One round of the splitmix64 finalizer (64-bit avalanche mix)."""
    x = (x + _GAMMA) & _MASK64
    x = ((x ^ (x >> 30)) * _MIX1) & _MASK64
    x = ((x ^ (x >> 27)) * _MIX2) & _MASK64
    return x ^ (x >> 31)


def derive_seed(global_seed: int, epoch: int, index: int) -> int:
    """Map (global seed, epoch, index) to a 64-bit stream seed.

    The triple is folded through three chained splitmix64 rounds so that any
    single-bit change to any component avalanches through the output.
    Distinct triples collide only with probability ~2^-64.
    """
    h = splitmix64(global_seed & _MASK64)
    h = splitmix64(h ^ (epoch & _MASK64))
    h = splitmix64(h ^ (index & _MASK64))
    return h
