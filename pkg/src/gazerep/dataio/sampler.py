"""Class-balanced index stream for fine-tuning."""
from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np


def balanced_sampler(labels: Sequence[str], classes: Sequence[str], background: str,
                     rng: np.random.Generator) -> Iterator[int]:
    """Endless stream alternating a foreground draw and a background draw.

    The foreground draw picks a class uniformly, then a sample of that class
    uniformly; the background draw picks a background sample uniformly. With a
    single foreground class this is strict alternation.
    """
    fg_classes = [c for c in classes if c != background]
    pools = {c: np.flatnonzero(np.asarray([lab == c for lab in labels])) for c in fg_classes}
    bg_pool = np.flatnonzero(np.asarray([lab == background for lab in labels]))
    empty = [c for c, pool in pools.items() if len(pool) == 0]
    if empty:
        raise ValueError(f"balanced_sampler: no samples for class(es) {', '.join(empty)}")
    if len(bg_pool) == 0:
        raise ValueError(f"balanced_sampler: no samples for background class {background!r}")
    while True:
        pool = pools[fg_classes[rng.integers(len(fg_classes))]]
        yield int(pool[rng.integers(len(pool))])
        yield int(bg_pool[rng.integers(len(bg_pool))])
