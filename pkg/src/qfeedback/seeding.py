"""Deterministic random-number plumbing.

Every stochastic routine in this package takes an explicit ``seed``
argument. A seed may be an integer, a ``numpy.random.SeedSequence``, an
already-built ``numpy.random.Generator``, or ``None`` (fresh entropy).
Reproducible runs derive all child streams from a single 64-bit root
seed via ``SeedSequence.spawn``, split in the order

    root -> scenario -> trial -> step

so results are independent of worker-pool size or evaluation order.
"""

from __future__ import annotations

import numpy as np

SeedLike = "int | np.random.SeedSequence | np.random.Generator | None"


def as_generator(seed=None) -> np.random.Generator:
    """Coerce an int, SeedSequence, Generator, or None into a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn_seeds(seed, n: int) -> list[np.random.SeedSequence]:
    """Split one root seed into ``n`` independent child seed sequences."""
    if isinstance(seed, np.random.SeedSequence):
        root = seed
    elif isinstance(seed, np.random.Generator):
        raise TypeError("cannot spawn children from a live Generator; pass the seed")
    else:
        root = np.random.SeedSequence(seed)
    return root.spawn(n)
