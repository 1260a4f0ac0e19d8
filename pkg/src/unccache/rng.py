"""SplitMix64 stream and Box-Muller normals.

The generator is counter based: output ``i`` (0-based) of a stream seeded with
``s`` is ``mix(s + (i + 1) * GAMMA mod 2**64)``, which lets numpy produce long
runs without a Python loop. Constants:

* GAMMA = 0x9E3779B97F4A7C15
* mix(z): z = (z ^ z >> 30) * 0xBF58476D1CE4E5B9
          z = (z ^ z >> 27) * 0x94D049BB133111EB
          return z ^ z >> 31
* uniform(u64) = ((u64 >> 11) + 1) * 2**-53, in (0, 1]
* normals come in pairs from consecutive uniforms (u1, u2):
  r = sqrt(-2 ln u1), z0 = r cos(2 pi u2), z1 = r sin(2 pi u2)
"""
import numpy as np

GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
MASK = (1 << 64) - 1


def splitmix64_scalar(state: int) -> tuple[int, int]:
    """One step of the reference recurrence: returns (new_state, output)."""
    state = (state + GAMMA) & MASK
    z = state
    z = ((z ^ (z >> 30)) * MIX1) & MASK
    z = ((z ^ (z >> 27)) * MIX2) & MASK
    return state, z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.seed = seed & MASK
        self.counter = 0

    def u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * np.uint64(GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int) -> np.ndarray:
        bits = self.u64(n) >> np.uint64(11)
        return (bits.astype(np.float64) + 1.0) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return z[:n]
