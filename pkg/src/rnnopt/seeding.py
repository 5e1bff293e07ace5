"""Deterministic seed splitting.

Every random stream in the package derives from a master seed plus a tuple
of integer stream ids, fed to numpy's SeedSequence as entropy. Runs are
therefore reproducible independent of worker count or scheduling.
"""

from __future__ import annotations

import numpy as np

# Stream-id tags, kept distinct so unrelated consumers never collide.
INIT = 1       # policy parameter initialisation
FUNC = 2       # GP training/evaluation function draws
RUNTIME = 3    # simulated per-query runtimes
SEARCH = 4     # baseline proposal randomness (random search, EI candidates)
PERTURB = 5    # benchmark instance perturbations


def stream(master, *ids) -> tuple[int, ...]:
    if isinstance(master, (tuple, list)):
        return (*(int(m) for m in master), *(int(i) for i in ids))
    return (int(master), *(int(i) for i in ids))


def rng(master, *ids) -> np.random.Generator:
    return np.random.default_rng(stream(master, *ids))
