"""Counter-based random streams keyed by (master seed, replicate, role).

Each stream is a Philox generator seeded from a ``SeedSequence`` whose
spawn key is ``(replicate, role)``. A replicate therefore draws the same
numbers whichever worker runs it and in whatever order.
"""

from enum import IntEnum

import numpy as np

__all__ = ["Role", "stream", "seed_record"]

_SEED_MASK = (1 << 64) - 1


class Role(IntEnum):
    FIELD = 0
    TILDE = 1
    CONDITION = 2
    CALIBRATION = 3
    BOOTSTRAP = 4
    PIVOTAL = 5
    GEOMETRY = 6


def stream(master_seed, replicate=0, role=Role.FIELD):
    """Independent ``numpy.random.Generator`` for one work item."""
    ss = np.random.SeedSequence(int(master_seed) & _SEED_MASK,
                                spawn_key=(int(replicate), int(role)))
    return np.random.Generator(np.random.Philox(ss))


def seed_record(master_seed, replicate=0, role=Role.FIELD):
    return {"master": int(master_seed) & _SEED_MASK, "replicate": int(replicate),
            "role": Role(role).name}
