"""Counter-based random streams.

Every stochastic quantity in the simulator is drawn from its own Philox
stream keyed by (seed, device, round, purpose).  Keyed streams, rather
than one sequential generator, are what make paired comparisons work:
two schemes replayed under the same seed see bit-identical channel
realizations no matter how much other randomness each consumes.
"""

import numpy as np

# Purpose tags.  Keep values stable: they are part of the stream key and
# therefore of the reproducibility contract.
FADING = 0
NOISE = 1
MINIBATCH = 2
COIN = 3
INIT = 4
DATA = 5
DEPLOY = 6

_MAX_DEVICE = 1 << 16
_MAX_ROUND = 1 << 40
_MAX_PURPOSE = 1 << 8


def stream(seed: int, device: int = 0, round_index: int = 0, purpose: int = 0) -> np.random.Generator:
    """Return the generator for one (seed, device, round, purpose) cell.

    Calling twice with the same key yields bit-identical draws; changing
    any key component yields an independent Philox stream.
    """
    if not 0 <= seed < (1 << 63):
        raise ValueError(f"seed must be in [0, 2^63), got {seed}")
    if not 0 <= device < _MAX_DEVICE:
        raise ValueError(f"device index out of range: {device}")
    if not 0 <= round_index < _MAX_ROUND:
        raise ValueError(f"round index out of range: {round_index}")
    if not 0 <= purpose < _MAX_PURPOSE:
        raise ValueError(f"purpose tag out of range: {purpose}")
    lo = np.uint64(device) | (np.uint64(round_index) << np.uint64(16)) | (np.uint64(purpose) << np.uint64(56))
    key = np.array([np.uint64(seed), lo], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
