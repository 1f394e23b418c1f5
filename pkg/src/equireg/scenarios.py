"""Source/target pair construction for the four evaluation scenarios."""
from __future__ import annotations

import numpy as np

from .geometry import RigidTransform, Scenario, crop_partial, jitter
from .shapes import ShapeModel, sample_surface

PARTIAL_KEEP = 0.75


def make_pair(shape: ShapeModel, scenario, transform: RigidTransform,
              rng: np.random.Generator, n_points: int = 1024, crop_method: str = "fps"):
    """Return (source, target) with target ≈ transform(source), shuffled.

    clean: permuted exact copy. noisy: both clouds jittered independently.
    independent: two separate surface draws. partial: two separate crops of
    one draw.
    """
    scenario = Scenario(scenario)
    base = sample_surface(shape, n_points, rng)
    if scenario is Scenario.CLEAN:
        src, tgt = base, base
    elif scenario is Scenario.NOISY:
        src, tgt = jitter(base, rng), jitter(base, rng)
    elif scenario is Scenario.INDEPENDENT:
        src, tgt = base, sample_surface(shape, n_points, rng)
    else:
        src = crop_partial(base, PARTIAL_KEEP, rng, crop_method)
        tgt = crop_partial(base, PARTIAL_KEEP, rng, crop_method)
    tgt = transform.apply(tgt[rng.permutation(len(tgt))])
    return src, tgt
