"""Hierarchical RNG derivation so every pipeline stage is independently reproducible.

A single experiment seed is split into child streams keyed by a path of
labels, e.g. ``rng_from(seed, "eval", domain_id, episode_index)``. String
components are hashed to integers so the derivation is stable across runs
and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _component_to_int(component: int | str) -> int:
    if isinstance(component, bool):
        raise TypeError("seed path components must be int or str, not bool")
    if isinstance(component, int):
        if component < 0:
            raise ValueError(f"seed path components must be non-negative, got {component}")
        return component
    digest = hashlib.sha256(component.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_from(seed: int, *path: int | str) -> np.random.Generator:
    """Derive a generator from ``seed`` and a stage/index path.

    Equal (seed, path) pairs always yield identical streams; any difference
    in a component yields an independent stream.
    """
    entropy = [_component_to_int(seed)] + [_component_to_int(c) for c in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))
