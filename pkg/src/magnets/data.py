"""Synthetic regression benchmarks with known relevant time steps, and their file format.

Every channel is a sum of Gaussian bumps. Targets are areas under one channel
restricted to the time steps where a condition holds; ``gt_mask`` marks those
steps.

Binary layout (little-endian)::

    "MGTS" | version u32 | flags u32 | n u32 | c u32 | t u32
    | name_len u32 | name utf-8 | x f32[n*c*t] | y f32[n] | gt u8[n*c*t]? | crc32 u32

``flags`` bit 0 says whether the ground-truth block is present; the CRC covers
every byte before it.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MAGIC = b"MGTS"
VERSION = 1
FLAG_GT = 1

DATASETS = ("univariate", "bivariate", "trivariate1", "trivariate2")
CHANNELS = {"univariate": 1, "bivariate": 2, "trivariate1": 3, "trivariate2": 3}
FULL_COUNTS = (50_000, 10_000)
_SPLIT_STREAM = {"train": 0, "test": 1}


class DatasetFormatError(ValueError):
    """Base class for unreadable dataset files."""

    code = "format"


class BadMagicError(DatasetFormatError):
    code = "bad-magic"


class VersionMismatchError(DatasetFormatError):
    code = "version"


class TruncatedFileError(DatasetFormatError):
    code = "truncated"


class ChecksumError(DatasetFormatError):
    code = "checksum"


@dataclass
class TimeSeriesDataset:
    x: np.ndarray  # [n, c, t]
    y: np.ndarray  # [n]
    gt_mask: np.ndarray | None = None  # [n, c, t] of 0/1
    name: str = ""
    split: str = "train"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim != 3 or self.y.shape != (self.x.shape[0],):
            raise ValueError(f"inconsistent shapes x={self.x.shape} y={self.y.shape}")
        if self.gt_mask is not None:
            self.gt_mask = np.asarray(self.gt_mask, dtype=np.uint8)
            if self.gt_mask.shape != self.x.shape:
                raise ValueError("gt_mask must match x")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def c(self) -> int:
        return self.x.shape[1]

    @property
    def t(self) -> int:
        return self.x.shape[2]

    def subset(self, idx) -> "TimeSeriesDataset":
        gt = None if self.gt_mask is None else self.gt_mask[idx]
        return replace(self, x=self.x[idx], y=self.y[idx], gt_mask=gt)


@dataclass
class GeneratorConfig:
    seed: int = 0
    n_train: int = FULL_COUNTS[0]
    n_test: int = FULL_COUNTS[1]
    t: int = 128
    bumps: int = 4
    amplitude: tuple[float, float] = (0.3, 1.0)
    width: tuple[float, float] | None = None  # default (t/32, t/8)
    coeffs: tuple[float, float, float] = (1.0, 5.0, -2.0)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        lo, hi = self.amplitude
        if not 0 < lo <= hi <= 1.2:
            raise ValueError(f"amplitude range {self.amplitude} must lie in (0, 1.2]")
        if self.width is None:
            self.width = (self.t / 32, self.t / 8)
        if self.width[0] <= 0 or self.width[1] < self.width[0]:
            raise ValueError(f"invalid width range {self.width}")

    @classmethod
    def scaled(cls, scale: float, **kw) -> "GeneratorConfig":
        """Table-sized counts multiplied by ``scale`` (0.1 gives 5 000 / 1 000)."""
        return cls(n_train=int(round(FULL_COUNTS[0] * scale)),
                   n_test=int(round(FULL_COUNTS[1] * scale)), **kw)


# ---------------------------------------------------------------- signals


def bump_signal(t: int, centers, widths, amplitudes) -> np.ndarray:
    """Sum of Gaussian bumps on the grid 0..t-1, clipped below at 0."""
    grid = np.arange(t, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)[:, None]
    widths = np.asarray(widths, dtype=np.float64)[:, None]
    amplitudes = np.asarray(amplitudes, dtype=np.float64)[:, None]
    out = (amplitudes * np.exp(-0.5 * ((grid - centers) / widths) ** 2)).sum(axis=0)
    return np.maximum(out, 0.0)


def generate_signal(rng, t: int, bumps: int = 4, amplitude=(0.3, 1.0), width=None) -> np.ndarray:
    if t < 16:
        raise ValueError("series must have at least 16 steps")
    if width is None:
        width = (t / 32, t / 8)
    centers = rng.uniform(0, t, size=bumps)
    widths = rng.uniform(*width, size=bumps)
    amps = rng.uniform(*amplitude, size=bumps)
    return bump_signal(t, centers, widths, amps)


def _sample_rng(seed: int, split: str, index: int):
    return np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_STREAM[split], index]))


def _signals(cfg: GeneratorConfig, n: int, channels: int, split: str) -> np.ndarray:
    x = np.empty((n, channels, cfg.t))
    for i in range(n):
        rng = _sample_rng(cfg.seed, split, i)
        for ch in range(channels):
            x[i, ch] = generate_signal(rng, cfg.t, cfg.bumps, cfg.amplitude, cfg.width)
    # values are stored as float32 on disk; targets are computed from that grid
    return x.astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------- target rules


def univariate_rule(x: np.ndarray):
    cond = x[:, 0] > 0.5
    y = (x[:, 0] * cond).sum(axis=1)
    return y, cond[:, None, :].astype(np.uint8)


def bivariate_rule(x: np.ndarray):
    cond = x[:, 1] > 0.5
    y = (x[:, 0] * cond).sum(axis=1)
    return y, np.repeat(cond[:, None, :], 2, axis=1).astype(np.uint8)


def trivariate1_rule(x: np.ndarray):
    cond = x[:, 1] > x[:, 2]
    y = (x[:, 0] * cond).sum(axis=1)
    return y, np.repeat(cond[:, None, :], 3, axis=1).astype(np.uint8)


def trivariate2_rule(x: np.ndarray, coeffs=(1.0, 5.0, -2.0)):
    """Cyclic pairing: channel i counts where channel i+1 exceeds channel i+2."""
    a, b, c = coeffs
    x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
    r1, r2, r3 = x2 > x3, x3 > x1, x1 > x2
    y = a * (x1 * r1).sum(axis=1) + b * (x2 * r2).sum(axis=1) + c * (x3 * r3).sum(axis=1)
    union = r1 | r2 | r3
    return y, np.repeat(union[:, None, :], 3, axis=1).astype(np.uint8)


def target_rule(name: str, x: np.ndarray, coeffs=(1.0, 5.0, -2.0)):
    """Return ``(y, gt_mask)`` for dataset ``name``."""
    if name == "univariate":
        return univariate_rule(x)
    if name == "bivariate":
        return bivariate_rule(x)
    if name == "trivariate1":
        return trivariate1_rule(x)
    if name == "trivariate2":
        return trivariate2_rule(x, coeffs)
    raise ValueError(f"unknown dataset {name!r}; expected one of {', '.join(DATASETS)}")


def make_dataset(name: str, cfg: GeneratorConfig, split: str = "train") -> TimeSeriesDataset:
    if name not in CHANNELS:
        raise ValueError(f"unknown dataset {name!r}; expected one of {', '.join(DATASETS)}")
    n = cfg.n_train if split == "train" else cfg.n_test
    x = _signals(cfg, n, CHANNELS[name], split)
    y, gt = target_rule(name, x, cfg.coeffs)
    return TimeSeriesDataset(x=x, y=y, gt_mask=gt, name=name, split=split)


def make_univariate(cfg: GeneratorConfig, split: str = "train") -> TimeSeriesDataset:
    return make_dataset("univariate", cfg, split)


def make_bivariate(cfg: GeneratorConfig, split: str = "train") -> TimeSeriesDataset:
    return make_dataset("bivariate", cfg, split)


def make_trivariate1(cfg: GeneratorConfig, split: str = "train") -> TimeSeriesDataset:
    return make_dataset("trivariate1", cfg, split)


def make_trivariate2(cfg: GeneratorConfig, split: str = "train") -> TimeSeriesDataset:
    return make_dataset("trivariate2", cfg, split)


def make_splits(name: str, cfg: GeneratorConfig) -> tuple[TimeSeriesDataset, TimeSeriesDataset]:
    return make_dataset(name, cfg, "train"), make_dataset(name, cfg, "test")


def pad_to_multiple(x: np.ndarray, multiple: int = 8) -> tuple[np.ndarray, int]:
    """Right-pad the time axis with zeros; returns the padded array and the valid length."""
    t = x.shape[-1]
    extra = (-t) % multiple
    if extra == 0:
        return x, t
    pad = [(0, 0)] * (x.ndim - 1) + [(0, extra)]
    return np.pad(x, pad), t


# ---------------------------------------------------------------- serialization


def dataset_bytes(ds: TimeSeriesDataset) -> bytes:
    name = ds.name.encode("utf-8")
    flags = FLAG_GT if ds.gt_mask is not None else 0
    parts = [
        MAGIC,
        struct.pack("<6I", VERSION, flags, ds.n, ds.c, ds.t, len(name)),
        name,
        np.ascontiguousarray(ds.x, dtype="<f4").tobytes(),
        np.ascontiguousarray(ds.y, dtype="<f4").tobytes(),
    ]
    if ds.gt_mask is not None:
        parts.append(np.ascontiguousarray(ds.gt_mask, dtype=np.uint8).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def dataset_from_bytes(raw: bytes, split: str = "train") -> TimeSeriesDataset:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError("not an MGTS file")
    if len(raw) < 28:
        raise TruncatedFileError("header truncated")
    version, flags, n, c, t, name_len = struct.unpack("<6I", raw[4:28])
    if version != VERSION:
        raise VersionMismatchError(f"MGTS version {version}, expected {VERSION}")
    cells = n * c * t
    expected = 28 + name_len + 4 * cells + 4 * n + (cells if flags & FLAG_GT else 0) + 4
    if len(raw) < expected:
        raise TruncatedFileError(f"expected {expected} bytes, found {len(raw)}")
    body = raw[: expected - 4]
    (crc,) = struct.unpack("<I", raw[expected - 4: expected])
    if zlib.crc32(body) != crc:
        raise ChecksumError("MGTS checksum mismatch")
    pos = 28
    name = body[pos: pos + name_len].decode("utf-8")
    pos += name_len
    x = np.frombuffer(body, dtype="<f4", count=cells, offset=pos).reshape(n, c, t)
    pos += 4 * cells
    y = np.frombuffer(body, dtype="<f4", count=n, offset=pos)
    pos += 4 * n
    gt = None
    if flags & FLAG_GT:
        gt = np.frombuffer(body, dtype=np.uint8, count=cells, offset=pos).reshape(n, c, t).copy()
    return TimeSeriesDataset(x=x.astype(np.float64), y=y.astype(np.float64), gt_mask=gt,
                             name=name, split=split)


def save_dataset(ds: TimeSeriesDataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def load_dataset(path, split: str | None = None) -> TimeSeriesDataset:
    path = Path(path)
    if split is None:
        split = "test" if "test" in path.stem else "train"
    return dataset_from_bytes(path.read_bytes(), split)
