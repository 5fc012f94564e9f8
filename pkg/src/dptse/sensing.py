"""Fixed-sensor plus rotating connected-vehicle (CV) measurement model.

The full measurement vector ``h(x)`` interleaves density and speed per segment
in the same order as the state, so a measurement of ``(segment, kind)`` is row
``2 * segment + kind`` of ``h``. A :class:`MeasurementBatch` is therefore a set
of rows of ``h`` plus values; the selection matrix ``C[k]`` is implied.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .arz import ArzParams, _dp, speed

DENSITY, SPEED = 0, 1


@dataclass(frozen=True)
class SensorSchedule:
    n_mainline: int
    fixed_segments: tuple[int, ...]
    cv_initial_segments: tuple[int, ...] = ()
    rotation_period: int = 4

    def __post_init__(self):
        object.__setattr__(self, "fixed_segments", tuple(sorted(set(self.fixed_segments))))
        object.__setattr__(self, "cv_initial_segments", tuple(self.cv_initial_segments))
        if len(set(self.cv_initial_segments)) != len(self.cv_initial_segments):
            raise ValueError("duplicate CV segments")
        if any(not 0 <= s < self.n_mainline for s in self.cv_initial_segments):
            raise ValueError("CV segments must be mainline segments")
        if self.rotation_period < 1:
            raise ValueError("rotation_period must be >= 1")

    @property
    def cv_segment_count(self) -> int:
        return len(self.cv_initial_segments)

    def max_sensed(self) -> int:
        """Largest number of distinct segments sensed at one time step."""
        period = self.n_mainline * self.rotation_period
        return max(len(active_segments(self, k)) for k in range(0, period, self.rotation_period))


def advance_schedule(schedule: SensorSchedule, k: int) -> tuple[int, ...]:
    """CV segments queried at step ``k``.

    Every ``rotation_period`` steps each segment moves one segment downstream,
    wrapping from the last mainline segment to the first.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    shift = k // schedule.rotation_period
    return tuple(sorted((s + shift) % schedule.n_mainline for s in schedule.cv_initial_segments))


def active_segments(schedule: SensorSchedule, k: int) -> tuple[int, ...]:
    return tuple(sorted(set(schedule.fixed_segments) | set(advance_schedule(schedule, k))))


@dataclass(frozen=True)
class MeasurementBatch:
    k: int
    segments: np.ndarray
    kinds: np.ndarray
    values: np.ndarray

    @property
    def rows(self) -> np.ndarray:
        return 2 * self.segments + self.kinds

    @property
    def n_p(self) -> int:
        return len(self.values)

    @property
    def entries(self) -> list[tuple[int, str, float]]:
        names = ("density", "speed")
        return [(int(s), names[int(t)], float(v))
                for s, t, v in zip(self.segments, self.kinds, self.values)]

    def selection(self, n_rows: int) -> np.ndarray:
        """Explicit ``C[k]`` picking the batch rows out of ``h(x)``."""
        C = np.zeros((self.n_p, n_rows))
        C[np.arange(self.n_p), self.rows] = 1.0
        return C

    def with_values(self, values) -> "MeasurementBatch":
        return MeasurementBatch(self.k, self.segments, self.kinds, np.asarray(values, dtype=float))


def h_full(x, p: ArzParams) -> np.ndarray:
    """Density and speed of every segment, interleaved like the state."""
    x = np.asarray(x, dtype=float)
    out = np.array(x, copy=True)
    out[..., 1::2] = speed(x[..., 0::2], x[..., 1::2], p)
    return out


def h_jacobian(x, p: ArzParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = len(x)
    J = np.zeros((n, n))
    idx = np.arange(0, n, 2)
    J[idx, idx] = 1.0
    rho, psi = x[0::2], x[1::2]
    ok = rho > p.rho_floor
    r = np.where(ok, rho, 1.0)
    J[idx + 1, idx] = np.where(ok, -psi / r**2 - _dp(np.clip(rho, 0, None), p), 0.0)
    J[idx + 1, idx + 1] = np.where(ok, 1.0 / r, 0.0)
    return J


def measure(x, schedule: SensorSchedule, k: int, p: ArzParams) -> MeasurementBatch:
    """Noise-free density and speed for every segment sensed at step ``k``."""
    segs = np.array(active_segments(schedule, k), dtype=int)
    segments = np.repeat(segs, 2)
    kinds = np.tile([DENSITY, SPEED], len(segs))
    values = h_full(x, p)[2 * segments + kinds]
    return MeasurementBatch(k, segments, kinds, values)


def spread_segments(count: int, n_mainline: int) -> tuple[int, ...]:
    """``count`` mainline segments placed as evenly as possible, starting at 0."""
    if not 0 <= count <= n_mainline:
        raise ValueError(f"cannot place {count} CV segments on {n_mainline}")
    return tuple(int(np.floor(i * n_mainline / count + 0.5)) for i in range(count))


def max_cyclic_gap(segments, n_mainline: int) -> int:
    s = sorted(segments)
    if not s:
        return n_mainline
    gaps = [b - a for a, b in zip(s, s[1:])] + [s[0] + n_mainline - s[-1]]
    return max(gaps)


__all__ = [
    "DENSITY", "SPEED", "SensorSchedule", "MeasurementBatch", "advance_schedule",
    "active_segments", "h_full", "h_jacobian", "measure", "spread_segments", "max_cyclic_gap",
]
