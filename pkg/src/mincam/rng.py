"""Named, counter-based random substreams.

Every random draw in the package comes from a Philox generator keyed by a
global seed, a textual tag and optional integer counters, so that any
sample can be regenerated in isolation and results do not depend on the
order in which work is scheduled.
"""

import hashlib

import numpy as np

DATA = "data"
MASK_INIT = "mask-init"
NET_INIT = "net-init"
TRAIN_NOISE = "train-noise"
EVAL_NOISE = "eval-noise"
SHUFFLE = "shuffle"


def _tag_key(tag):
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed, tag, *counters):
    """Return a generator keyed by ``(seed, tag, *counters)``."""
    key = (_tag_key(tag),) + tuple(int(c) for c in counters)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, tag, *counters):
    """Derive a 63-bit integer seed for a named child stream."""
    return int(substream(seed, tag, *counters).integers(0, 2**63 - 1))
