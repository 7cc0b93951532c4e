"""Pixel-set and grid SITS samples, a synthetic phenology generator, and the
``SITS1`` binary dataset format.

Values are stored time-major: ``T x C x N_pix`` for pixel sets and
``T x C x H x W`` for grids.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoding import TimeAxis
from .errors import ConfigError, DataError, FormatError

MAGIC = b"SITS1"
FORMAT_VERSION = 1
IGNORE_LABEL = 255
NO_BAG_LABEL = 0xFFFFFFFF


@dataclass
class PixelSetSample:
    values: np.ndarray  # T x C x N_pix
    time: TimeAxis
    label: int
    parcel_id: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise DataError(f"pixel-set values must be T x C x N_pix, got shape {self.values.shape}")
        if self.values.shape[0] != len(self.time):
            raise DataError(f"{self.values.shape[0]} value rows but {len(self.time)} timestamps")
        if self.values.shape[1] < 1 or self.values.shape[2] < 1:
            raise DataError(f"pixel-set needs C >= 1 and N_pix >= 1, got shape {self.values.shape}")

    @property
    def n_pix(self) -> int:
        return self.values.shape[2]


@dataclass
class GridSample:
    values: np.ndarray  # T x C x H x W
    time: TimeAxis
    semantic_labels: np.ndarray  # H x W
    sample_id: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.semantic_labels = np.asarray(self.semantic_labels, dtype=np.int64)
        if self.values.ndim != 4:
            raise DataError(f"grid values must be T x C x H x W, got shape {self.values.shape}")
        if self.values.shape[0] != len(self.time):
            raise DataError(f"{self.values.shape[0]} value frames but {len(self.time)} timestamps")
        if self.semantic_labels.shape != self.values.shape[2:]:
            raise DataError(
                f"label map {self.semantic_labels.shape} does not match grid {self.values.shape[2:]}"
            )


@dataclass
class Dataset:
    kind: str  # "pixelset" | "grid"
    samples: list
    class_names: list[str]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


# ---------------------------------------------------------------------------
# synthetic phenology
# ---------------------------------------------------------------------------

@dataclass
class ClassPrior:
    """Mean and jitter (std) of each double-logistic parameter for one crop."""

    amplitude: tuple[float, float] = (0.7, 0.06)
    start: tuple[float, float] = (120.0, 6.0)
    end: tuple[float, float] = (220.0, 6.0)
    growth: tuple[float, float] = (0.08, 0.01)
    senescence: tuple[float, float] = (0.08, 0.01)
    base: tuple[float, float] = (0.1, 0.02)


def default_class_priors() -> list[ClassPrior]:
    # Pairs (0, 1) and (3, 4) share amplitude and season length and differ
    # only in timing, so they are separable only through acquisition dates.
    short = {"amplitude": (0.45, 0.04), "growth": (0.12, 0.015), "senescence": (0.12, 0.015)}
    return [
        ClassPrior(amplitude=(0.7, 0.04), start=(100.0, 5.0), end=(190.0, 5.0)),
        ClassPrior(amplitude=(0.7, 0.04), start=(170.0, 5.0), end=(260.0, 5.0)),
        ClassPrior(amplitude=(0.8, 0.04), start=(90.0, 5.0), end=(280.0, 5.0), growth=(0.05, 0.008)),
        ClassPrior(start=(100.0, 5.0), end=(140.0, 5.0), **short),
        ClassPrior(start=(220.0, 5.0), end=(260.0, 5.0), **short),
    ]


@dataclass
class SynthConfig:
    class_priors: list[ClassPrior] = field(default_factory=default_class_priors)
    class_names: list[str] | None = None
    t_range: tuple[int, int] = (20, 40)
    season: tuple[int, int] = (0, 365)
    channel_gain: tuple[float, ...] = (1.0, 0.6, -0.4, 0.8)
    channel_offset: tuple[float, ...] = (0.05, 0.1, 0.55, 0.1)
    noise: float = 0.02
    pixel_offset: float = 0.02
    cloud_prob: float = 0.05
    n_pix: int = 8
    grid_size: tuple[int, int] = (12, 12)
    parcels_per_grid: tuple[int, int] = (2, 6)

    @property
    def num_classes(self) -> int:
        return len(self.class_priors)

    @property
    def channels(self) -> int:
        return len(self.channel_gain)

    def names(self) -> list[str]:
        return list(self.class_names) if self.class_names else [f"crop{k}" for k in range(self.num_classes)]

    def validate(self) -> None:
        lo, hi = self.t_range
        if not (10 <= lo <= hi <= 64):
            raise ConfigError(f"t_range must lie within [10, 64], got {self.t_range}")
        if self.season[1] - self.season[0] < hi:
            raise ConfigError(f"season {self.season} has fewer days than the longest series {hi}")
        if len(self.channel_offset) != len(self.channel_gain) or not self.channel_gain:
            raise ConfigError("channel_gain and channel_offset must be non-empty and equally long")
        if not self.class_priors:
            raise ConfigError("at least one class prior is required")
        if self.n_pix < 1:
            raise ConfigError(f"n_pix must be >= 1, got {self.n_pix}")
        if not 0.0 <= self.cloud_prob < 1.0:
            raise ConfigError(f"cloud_prob must be in [0, 1), got {self.cloud_prob}")
        days = np.arange(*self.season, dtype=np.float64)
        for k, prior in enumerate(self.class_priors):
            for sign in (-3.0, 3.0):
                params = {name: mu + sign * sd for name, (mu, sd) in asdict(prior).items()}
                curve = double_logistic(days, **params)
                if not np.all(np.isfinite(curve)):
                    raise ConfigError(f"class {k} prior produces non-finite curves")
                bands = channel_response(curve, self)
                if bands.min() < -0.05 or bands.max() > 1.5:
                    raise ConfigError(f"class {k} prior leaves the reflectance range [0, 1.5]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthConfig":
        raw = dict(raw)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown synthetic-data fields: {sorted(unknown)}")
        if "class_priors" in raw:
            raw["class_priors"] = [
                ClassPrior(**{k: tuple(v) for k, v in p.items()}) for p in raw["class_priors"]
            ]
        for key in ("t_range", "season", "channel_gain", "channel_offset", "grid_size", "parcels_per_grid"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)


def double_logistic(t, amplitude, start, end, growth, senescence, base):
    """Green-up at ``start`` and senescence at ``end`` on top of ``base``."""
    t = np.asarray(t, dtype=np.float64)
    rise = 0.5 * (1.0 + np.tanh(0.5 * growth * (t - start)))
    fall = 0.5 * (1.0 + np.tanh(0.5 * senescence * (t - end)))
    return amplitude * (rise - fall) + base


def channel_response(curve: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """Map a vegetation curve (..., T) to reflectances (..., T, C)."""
    gain = np.asarray(cfg.channel_gain)
    offset = np.asarray(cfg.channel_offset)
    return curve[..., None] * gain + offset


def _draw_params(prior: ClassPrior, rng: np.random.Generator) -> dict:
    return {name: rng.normal(mu, sd) for name, (mu, sd) in asdict(prior).items()}


def _draw_time(cfg: SynthConfig, rng: np.random.Generator) -> TimeAxis:
    length = int(rng.integers(cfg.t_range[0], cfg.t_range[1] + 1))
    days = np.sort(rng.choice(np.arange(*cfg.season), size=length, replace=False))
    mask = rng.random(length) >= cfg.cloud_prob
    if not mask.any():
        mask[rng.integers(length)] = True
    return TimeAxis(days.astype(np.float32), mask)


def _cloud_fill(values: np.ndarray, mask: np.ndarray) -> None:
    # obstructed acquisitions look bright and flat; consumers must ignore them
    values[~mask] = 0.9


def _sample_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), int(index)])


def _pixelset_sample(cfg: SynthConfig, label: int, index: int, seed: int) -> PixelSetSample:
    rng = _sample_rng(seed, index, 0)
    time = _draw_time(cfg, rng)
    params = _draw_params(cfg.class_priors[label], rng)
    curve = double_logistic(time.timestamps, **params)  # T
    bands = channel_response(curve, cfg)  # T x C
    offsets = rng.normal(0.0, cfg.pixel_offset, size=(cfg.channels, cfg.n_pix))
    noise = rng.normal(0.0, cfg.noise, size=(len(time), cfg.channels, cfg.n_pix)) if cfg.noise > 0 else 0.0
    values = bands[:, :, None] + offsets[None] + noise
    _cloud_fill(values, time.valid_mask)
    return PixelSetSample(values.astype(np.float32), time, label, parcel_id=index)


def _background_series(days: np.ndarray, rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    # bare soil: low and nearly flat with a weak seasonal wobble
    level = rng.normal(0.12, 0.02, size=shape)
    wobble = 0.03 * np.sin(2 * np.pi * days / 365.0 + rng.uniform(0, 2 * np.pi))
    return level[None] + wobble.reshape((-1,) + (1,) * len(shape))


def _grid_sample(cfg: SynthConfig, index: int, seed: int) -> GridSample:
    rng = _sample_rng(seed, index, 1)
    height, width = cfg.grid_size
    time = _draw_time(cfg, rng)
    n_t, n_c = len(time), cfg.channels
    background = cfg.num_classes
    labels = np.full((height, width), background, dtype=np.int64)
    curves = _background_series(time.timestamps, rng, (height, width))  # T x H x W
    n_parcels = int(rng.integers(cfg.parcels_per_grid[0], cfg.parcels_per_grid[1] + 1))
    for _ in range(n_parcels):
        k = int(rng.integers(cfg.num_classes))
        ph = int(rng.integers(2, max(3, height // 2) + 1))
        pw = int(rng.integers(2, max(3, width // 2) + 1))
        top = int(rng.integers(0, height - ph + 1))
        left = int(rng.integers(0, width - pw + 1))
        params = _draw_params(cfg.class_priors[k], rng)
        labels[top:top + ph, left:left + pw] = k
        curves[:, top:top + ph, left:left + pw] = double_logistic(time.timestamps, **params)[:, None, None]
    bands = np.moveaxis(channel_response(curves, cfg), -1, 1)  # T x C x H x W
    offsets = rng.normal(0.0, cfg.pixel_offset, size=(n_c, height, width))
    noise = rng.normal(0.0, cfg.noise, size=(n_t, n_c, height, width)) if cfg.noise > 0 else 0.0
    values = bands + offsets[None] + noise
    _cloud_fill(values, time.valid_mask)
    return GridSample(values.astype(np.float32), time, labels, sample_id=index)


def generate_pixelset(cfg: SynthConfig, n_samples: int, seed: int) -> Dataset:
    cfg.validate()
    order = np.random.default_rng([int(seed), 2]).permutation(n_samples)
    labels = order % cfg.num_classes
    samples = [_pixelset_sample(cfg, int(labels[i]), i, seed) for i in range(n_samples)]
    return Dataset("pixelset", samples, cfg.names())


def generate_grid(cfg: SynthConfig, n_samples: int, seed: int) -> Dataset:
    cfg.validate()
    samples = [_grid_sample(cfg, i, seed) for i in range(n_samples)]
    return Dataset("grid", samples, cfg.names() + ["background"])


def generate_synthetic(cfg: SynthConfig, n_samples: int, seed: int, n_grid: int | None = None) -> tuple[Dataset, Dataset]:
    """Pixel-set dataset plus a grid dataset painted from the same class priors.

    Each sample draws from its own generator keyed on ``(seed, index)`` so
    samples can be produced independently and in any order.
    """
    if n_grid is None:
        n_grid = max(1, n_samples // 10)
    return generate_pixelset(cfg, n_samples, seed), generate_grid(cfg, n_grid, seed)


# ---------------------------------------------------------------------------
# conversions and augmentation
# ---------------------------------------------------------------------------

def _as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def grid_to_pixelset(g: GridSample, parcel_mask: np.ndarray, n_pix: int, seed=0, parcel_id: int = 0) -> PixelSetSample:
    """Flatten the pixels selected by ``parcel_mask`` into an unordered pixel set.

    Parcels with at least ``n_pix`` pixels are subsampled without replacement;
    smaller ones are sampled with replacement.
    """
    parcel_mask = np.asarray(parcel_mask, dtype=bool)
    if parcel_mask.shape != g.semantic_labels.shape:
        raise DataError(f"parcel mask {parcel_mask.shape} does not match grid {g.semantic_labels.shape}")
    rows, cols = np.nonzero(parcel_mask)
    if rows.size == 0:
        raise DataError("parcel mask selects no pixels")
    rng = _as_rng(seed)
    pick = rng.choice(rows.size, size=n_pix, replace=rows.size < n_pix)
    values = g.values[:, :, rows[pick], cols[pick]]
    parcel_labels = g.semantic_labels[rows, cols]
    label = int(np.bincount(parcel_labels[parcel_labels >= 0]).argmax())
    return PixelSetSample(values, TimeAxis(g.time.timestamps.copy(), g.time.valid_mask.copy()), label, parcel_id)


def temporal_dropout(sample, rate_low: float, rate_high: float, seed=None):
    """Drop a random fraction ``r ~ U[rate_low, rate_high]`` of the valid steps.

    ``ceil((1 - r) * T_valid)`` valid steps survive (at least one). Invalid
    steps are left in place so a zero rate returns the sample unchanged.
    """
    if not 0.0 <= rate_low <= rate_high < 1.0:
        raise ConfigError(f"dropout rates need 0 <= low <= high < 1, got ({rate_low}, {rate_high})")
    rng = _as_rng(seed)
    rate = rng.uniform(rate_low, rate_high) if rate_high > rate_low else rate_low
    valid = np.flatnonzero(sample.time.valid_mask)
    n_keep = max(1, math.ceil((1.0 - rate) * valid.size - 1e-9))
    if n_keep >= valid.size:
        return sample
    kept_valid = rng.choice(valid, size=n_keep, replace=False)
    keep = np.sort(np.concatenate([kept_valid, np.flatnonzero(~sample.time.valid_mask)]))
    time = sample.time.subset(keep)
    if isinstance(sample, PixelSetSample):
        return PixelSetSample(sample.values[keep], time, sample.label, sample.parcel_id)
    return GridSample(sample.values[keep], time, sample.semantic_labels, sample.sample_id)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    values: np.ndarray  # B x T x C x N  or  B x T x C x H x W
    timestamps: np.ndarray  # B x T
    mask: np.ndarray  # B x T
    labels: np.ndarray  # B  or  B x H x W


def collate(samples: Sequence) -> Batch:
    """Pad a list of samples of one kind to a common length along time."""
    if not samples:
        raise DataError("cannot collate an empty batch")
    t_max = max(len(s.time) for s in samples)
    first = samples[0].values
    values = np.zeros((len(samples), t_max) + first.shape[1:], dtype=np.float32)
    stamps = np.zeros((len(samples), t_max), dtype=np.float32)
    mask = np.zeros((len(samples), t_max), dtype=bool)
    for i, s in enumerate(samples):
        if s.values.shape[1:] != first.shape[1:]:
            raise DataError(f"cannot batch samples of shapes {first.shape[1:]} and {s.values.shape[1:]}")
        n = len(s.time)
        values[i, :n] = s.values
        stamps[i, :n] = s.time.timestamps
        mask[i, :n] = s.time.valid_mask
    if isinstance(samples[0], PixelSetSample):
        labels = np.array([s.label for s in samples], dtype=np.int64)
    else:
        labels = np.stack([s.semantic_labels for s in samples])
    return Batch(values, stamps, mask, labels)


# ---------------------------------------------------------------------------
# SITS1 file format
# ---------------------------------------------------------------------------

_U32 = struct.Struct("<I")


def _header(dataset: Dataset) -> dict:
    return {
        "version": FORMAT_VERSION,
        "format": dataset.kind,
        "count": len(dataset),
        "class_names": list(dataset.class_names),
        "meta": dataset.meta,
    }


def dataset_to_bytes(dataset: Dataset) -> bytes:
    if dataset.kind not in ("pixelset", "grid"):
        raise ConfigError(f"unknown dataset kind {dataset.kind!r}")
    parts = [MAGIC, b"\n", json.dumps(_header(dataset), sort_keys=True, separators=(",", ":")).encode("utf-8"), b"\n"]
    for s in dataset.samples:
        t, c = s.values.shape[:2]
        if dataset.kind == "pixelset":
            ident, label, dims = s.parcel_id, s.label, (s.values.shape[2],)
        else:
            ident, label, dims = s.sample_id, NO_BAG_LABEL, s.values.shape[2:]
        for n in (ident, label, t, c, *dims):
            parts.append(_U32.pack(int(n)))
        parts.append(s.time.valid_mask.astype(np.uint8).tobytes())
        parts.append(np.ascontiguousarray(s.time.timestamps, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(s.values, dtype="<f4").tobytes())
        if dataset.kind == "grid":
            parts.append(np.ascontiguousarray(s.semantic_labels, dtype="<i4").tobytes())
    return b"".join(parts)


def write_dataset(path, dataset: Dataset) -> None:
    Path(path).write_bytes(dataset_to_bytes(dataset))


class _Reader:
    def __init__(self, buf: bytes, offset: int):
        self.buf = buf
        self.pos = offset

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(
                f"{what}: needs {n} bytes at offset {self.pos} but only {len(self.buf) - self.pos} remain"
            )
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def dataset_from_bytes(buf: bytes) -> Dataset:
    if not buf.startswith(MAGIC + b"\n"):
        raise FormatError(f"magic: expected {MAGIC!r}, found {buf[:len(MAGIC)]!r}")
    end = buf.find(b"\n", len(MAGIC) + 1)
    if end < 0:
        raise FormatError("header: missing newline after JSON header")
    try:
        header = json.loads(buf[len(MAGIC) + 1:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header: not valid JSON ({exc})") from None
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"version: expected {FORMAT_VERSION}, found {header.get('version')!r}")
    kind = header.get("format")
    if kind not in ("pixelset", "grid"):
        raise FormatError(f"format: expected 'pixelset' or 'grid', found {kind!r}")
    count = header.get("count")
    if not isinstance(count, int) or count < 0:
        raise FormatError(f"count: expected a non-negative integer, found {count!r}")
    reader = _Reader(buf, end + 1)
    samples = []
    for i in range(count):
        where = f"record {i}"
        ident = reader.u32(f"{where} parcel_id")
        label = reader.u32(f"{where} label")
        t = reader.u32(f"{where} T")
        c = reader.u32(f"{where} C")
        dims = (reader.u32(f"{where} N_pix"),) if kind == "pixelset" else (reader.u32(f"{where} H"), reader.u32(f"{where} W"))
        if t == 0 or c == 0 or 0 in dims:
            raise FormatError(f"{where} length fields: zero-sized dimension in T={t}, C={c}, dims={dims}")
        mask = np.frombuffer(reader.take(t, f"{where} mask"), dtype=np.uint8)
        if np.any(mask > 1):
            raise FormatError(f"{where} mask: bytes must be 0 or 1")
        stamps = np.frombuffer(reader.take(4 * t, f"{where} timestamps"), dtype="<f4").astype(np.float32)
        n_values = t * c * int(np.prod(dims))
        values = np.frombuffer(reader.take(4 * n_values, f"{where} values"), dtype="<f4")
        values = values.astype(np.float32).reshape((t, c) + dims)
        try:
            time = TimeAxis(stamps, mask.astype(bool))
        except DataError as exc:
            raise FormatError(f"{where} timestamps: {exc}") from None
        if kind == "pixelset":
            samples.append(PixelSetSample(values, time, int(label), int(ident)))
        else:
            labels = np.frombuffer(reader.take(4 * dims[0] * dims[1], f"{where} labels"), dtype="<i4")
            samples.append(GridSample(values, time, labels.reshape(dims).astype(np.int64), int(ident)))
    if reader.pos != len(buf):
        raise FormatError(f"count: {len(buf) - reader.pos} trailing bytes after {count} records")
    return Dataset(kind, samples, list(header.get("class_names", [])), header.get("meta", {}))


def read_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


def content_hash(path) -> str:
    """Git blob id of the file: ``sha1(b"blob <size>\\0" + content)``."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
