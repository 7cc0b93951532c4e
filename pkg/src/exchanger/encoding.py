"""Temporal position embeddings from acquisition timestamps.

Two time axes are supported: calendar day-of-year and accumulated growing
degree days (thermal time). Both feed the same interleaved sine/cosine
embedding; only the meaning of the timestamps differs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError


@dataclass
class TimeAxis:
    """Acquisition times of one sample plus a per-step validity flag.

    Timestamps need not be sorted: a sample is a set of acquisitions.
    """

    timestamps: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float32).reshape(-1)
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.timestamps.shape, dtype=bool)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool).reshape(-1)
        if self.valid_mask.shape != self.timestamps.shape:
            raise DataError(
                f"time axis: {self.timestamps.size} timestamps but {self.valid_mask.size} mask entries"
            )
        valid = self.timestamps[self.valid_mask]
        if not np.all(np.isfinite(valid)) or np.any(valid < 0):
            raise DataError("time axis: valid timestamps must be finite and >= 0")

    def __len__(self) -> int:
        return self.timestamps.size

    @property
    def n_valid(self) -> int:
        return int(self.valid_mask.sum())

    def subset(self, index: np.ndarray) -> "TimeAxis":
        return TimeAxis(self.timestamps[index], self.valid_mask[index])


def _fourier_rows(t: np.ndarray, d_pe: int, max_period: float) -> np.ndarray:
    if d_pe <= 0 or d_pe % 2:
        raise ConfigError(f"positional embedding width must be a positive even integer, got {d_pe}")
    if max_period <= 0:
        raise ConfigError(f"max_period must be positive, got {max_period}")
    i = np.arange(d_pe // 2, dtype=np.float64)
    omega = np.power(float(max_period), 2.0 * i / d_pe)
    angles = np.asarray(t, dtype=np.float64)[..., None] / omega
    out = np.empty(angles.shape[:-1] + (d_pe,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def sinusoidal_pe(time: TimeAxis, d_pe: int, max_period: float = 10000.0) -> np.ndarray:
    """Row k is ``[sin(t_k/w_0), cos(t_k/w_0), sin(t_k/w_1), ...]`` with
    ``w_i = max_period ** (2i / d_pe)``. Invalid steps give zero rows."""
    rows = _fourier_rows(time.timestamps, d_pe, max_period)
    rows[~time.valid_mask] = 0.0
    return rows.astype(np.float32)


def gdd_accumulate(
    daily_tmin: np.ndarray,
    daily_tmax: np.ndarray,
    t_base: float,
    acquisition_days: np.ndarray,
) -> TimeAxis:
    """Growing degree days accumulated up to (and including) each acquisition day.

    Day indices are 1-based positions into the temperature records.
    """
    tmin = np.asarray(daily_tmin, dtype=np.float64)
    tmax = np.asarray(daily_tmax, dtype=np.float64)
    if tmin.shape != tmax.shape or tmin.ndim != 1:
        raise DataError(f"temperature records must be 1-D and aligned, got {tmin.shape} and {tmax.shape}")
    days = np.asarray(acquisition_days)
    if days.size and (days.min() < 1 or days.max() > tmin.size):
        raise DataError(
            f"acquisition days span [{days.min()}, {days.max()}] but temperatures cover days 1..{tmin.size}"
        )
    excess = np.maximum(0.0, (tmin + tmax) / 2.0 - t_base)
    cumulative = np.cumsum(excess)
    gdd = cumulative[days.astype(int) - 1] if days.size else np.zeros(0)
    return TimeAxis(gdd, np.ones(gdd.shape, dtype=bool))


def thermal_pe(gdd_axis: TimeAxis, d_pe: int, max_gdd_period: float = 10000.0) -> np.ndarray:
    """Fourier thermal positional encoding: the calendar embedding applied to degree-days."""
    return sinusoidal_pe(gdd_axis, d_pe, max_gdd_period)
