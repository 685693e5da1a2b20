"""Counter-based random streams keyed by (seed, chain, iteration, block)"""

import numpy as np

# Update blocks inside one sweep. Values are part of the stream key and must not change.
BLOCK_RHO = 0
BLOCK_LABELS = 1
BLOCK_STICKS = 2
BLOCK_KAPPA = 3
BLOCK_IMPUTE = 4
BLOCK_ATOMS = 5
BLOCK_ALPHA = 6
BLOCK_SIGMA_S2 = 7
BLOCK_DELTA = 8
BLOCK_GAMMA = 9
BLOCK_ZETA = 10
BLOCK_SIGMA2 = 11
BLOCK_INIT = 12
BLOCK_ESTIMAND = 13


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent Philox generator for the given key path"""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


class ChainStreams:
    """Hands out one generator per (iteration, block) for a single chain"""

    def __init__(self, seed: int, chain: int):
        self.seed = int(seed)
        self.chain = int(chain)

    def block(self, iteration: int, block: int) -> np.random.Generator:
        return stream(self.seed, self.chain, iteration, block)
