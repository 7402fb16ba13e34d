"""Counter-based random streams keyed by (seed, realization, link, purpose)."""

from dataclasses import dataclass

import numpy as np

PURPOSES = {
    "geometry": 1,
    "arrival": 2,
    "access": 3,
    "channel": 4,
}

ALL_LINKS = -1


@dataclass(frozen=True)
class StreamId:
    realization: int
    link: int
    purpose: str
    attempt: int = 0


@dataclass(frozen=True)
class RngContract:
    """Deterministic stream factory.

    Each stream is a Philox generator whose key is derived from the master
    seed and the StreamId, so the draws a stream produces never depend on
    which worker asks for it or in which order. Streams for `ALL_LINKS`
    hand out one value per link per slot, column `i` belonging to link `i`.
    """

    master_seed: int

    def key(self, stream_id):
        if stream_id.purpose not in PURPOSES:
            raise KeyError(f"unknown stream purpose {stream_id.purpose!r}")
        entropy = [
            int(self.master_seed),
            int(stream_id.realization),
            int(stream_id.link) + 1,
            PURPOSES[stream_id.purpose],
            int(stream_id.attempt),
        ]
        return np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint64)

    def generator(self, stream_id):
        return np.random.Generator(np.random.Philox(key=self.key(stream_id)))

    def stream(self, realization, purpose, link=ALL_LINKS, attempt=0):
        return self.generator(StreamId(realization, link, purpose, attempt))
