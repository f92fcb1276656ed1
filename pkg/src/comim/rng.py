"""Named deterministic RNG streams.

Each consumer (parameter init, batch order, mask sampling, augmentation) gets
its own PCG64 stream derived from the run seed, so toggling one consumer on
or off never shifts the draws seen by another. Stream states serialize to
u64 vectors for bit-exact checkpoint resume.
"""

import numpy as np

STREAM_NAMES = ("init", "data", "mask", "augment")

_MASK64 = (1 << 64) - 1


class RngStreams:
    """Independent generators keyed by stream name, all derived from one seed."""

    def __init__(self, seed):
        self.seed = int(seed)
        self._gen = {}
        for i, name in enumerate(STREAM_NAMES):
            ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(i,))
            self._gen[name] = np.random.Generator(np.random.PCG64(ss))

    def __getitem__(self, name):
        return self._gen[name]

    def state_vector(self, name):
        """Stream state as six u64 words (PCG64 state, inc, uint32 cache)."""
        st = self._gen[name].bit_generator.state
        s = st["state"]["state"]
        inc = st["state"]["inc"]
        return np.array(
            [s & _MASK64, (s >> 64) & _MASK64, inc & _MASK64, (inc >> 64) & _MASK64,
             st["has_uint32"], st["uinteger"]],
            dtype=np.uint64,
        )

    def restore(self, name, vec):
        vec = np.asarray(vec, dtype=np.uint64)
        if vec.shape != (6,):
            raise ValueError(f"stream state for {name!r} must be 6 words, got shape {vec.shape}")
        w = [int(x) for x in vec]
        self._gen[name].bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": w[0] | (w[1] << 64), "inc": w[2] | (w[3] << 64)},
            "has_uint32": w[4],
            "uinteger": w[5],
        }


def truncated_normal(rng, shape, std=0.02, cutoff=2.0, dtype=np.float32):
    """Normal draws with |z| > cutoff resampled (not clipped), scaled by std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > cutoff
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > cutoff
    return (out * std).astype(dtype)
