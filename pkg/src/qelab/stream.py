"""Time-tagged photon event streams.

Channels 0 and 1 are the two detectors of the HBT setup; channel 2 carries
the laser trigger. Times are integer picoseconds.
"""
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

DETECTOR_CHANNELS = (0, 1)
TRIGGER_CHANNEL = 2


@dataclass(frozen=True, eq=False)
class TimestampStream:
    channels: np.ndarray
    times_ps: np.ndarray
    duration_ps: int

    def __post_init__(self):
        ch = np.ascontiguousarray(self.channels, dtype=np.uint8)
        t = np.ascontiguousarray(self.times_ps, dtype=np.int64)
        if ch.shape != t.shape or ch.ndim != 1:
            raise InvalidInputError("channels and times must be 1-D arrays of equal length")
        duration = int(self.duration_ps)
        if duration < 0:
            raise InvalidInputError("duration_ps must be non-negative")
        if t.size:
            if t[0] < 0 or np.any(np.diff(t) < 0):
                raise InvalidInputError("times must be non-negative and non-decreasing")
            if t[-1] > duration:
                raise InvalidInputError("event time exceeds duration_ps")
        ch.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "times_ps", t)
        object.__setattr__(self, "duration_ps", duration)

    def __len__(self):
        return self.times_ps.size

    def __eq__(self, other):
        if not isinstance(other, TimestampStream):
            return NotImplemented
        return (self.duration_ps == other.duration_ps
                and np.array_equal(self.channels, other.channels)
                and np.array_equal(self.times_ps, other.times_ps))

    @property
    def channel_ids(self):
        return frozenset(int(c) for c in np.unique(self.channels))

    def times(self, channel):
        """Sorted event times of one channel."""
        return self.times_ps[self.channels == channel]

    @classmethod
    def from_channels(cls, per_channel, duration_ps):
        """Merge ``{channel: times}`` into one time-ordered stream.

        Equal times are ordered by channel so the merge is deterministic.
        """
        chans, times = [], []
        for c in sorted(per_channel):
            t = np.asarray(per_channel[c], dtype=np.int64)
            times.append(t)
            chans.append(np.full(t.size, c, dtype=np.uint8))
        if not times:
            return cls(np.zeros(0, np.uint8), np.zeros(0, np.int64), duration_ps)
        t = np.concatenate(times)
        c = np.concatenate(chans)
        order = np.lexsort((c, t))
        return cls(c[order], t[order], duration_ps)

    def shifted(self, offset_ps):
        return TimestampStream(self.channels, self.times_ps + offset_ps,
                               self.duration_ps + offset_ps)
