"""Hierarchical deterministic random streams.

Every random draw in the package flows from a single 64-bit root seed.
Sub-streams are addressed by a path of tags (component, task index, epoch,
chain index, ...), so changing how much randomness one component consumes
never perturbs any other component's stream.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_int(tag) -> int:
    """Map a path tag (int or str) to a stable 64-bit integer."""
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    if isinstance(tag, str):
        digest = hashlib.blake2s(tag.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"seed tag must be int or str, got {type(tag).__name__}")


def seed_seq(root: int, *tags) -> np.random.SeedSequence:
    """SeedSequence for the stream addressed by (root, *tags)."""
    return np.random.SeedSequence([int(root) & _MASK64] + [_tag_int(t) for t in tags])


def child_seed(root: int, *tags) -> int:
    """A 64-bit integer seed for the stream addressed by (root, *tags).

    Useful when a sub-seed must be stored in a config or report.
    """
    return int(seed_seq(root, *tags).generate_state(1, np.uint64)[0])


def make_rng(root: int, *tags) -> np.random.Generator:
    """Generator for the stream addressed by (root, *tags)."""
    return np.random.default_rng(seed_seq(root, *tags))
