"""Multichannel signal blocks, the .cafesig on-disk format, normalization.

Blocks hold float64 in memory and float32 on disk. The binary layout is::

    magic 'CAFE' | version u16 LE | C u32 LE | T u32 LE | sample_rate f64 LE
    | C*T float32 LE, row-major

so a block is parseable with nothing but a struct reader.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"CAFE"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIId")

STD_FLOOR = 1e-8  # keeps dead channels from dividing by ~0


class FormatError(ValueError):
    """Raised for malformed or inconsistent on-disk data."""


@dataclass(frozen=True)
class SignalBlock:
    """Dense (C,T) float64 signal; immutable after construction."""

    data: np.ndarray
    sample_rate_hz: float = 1.0

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"signal block must be (C,T) with C,T >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            bad = np.argwhere(~np.isfinite(arr))[0]
            raise ValueError(f"non-finite sample at channel {bad[0]}, index {bad[1]}")
        if not self.sample_rate_hz > 0:
            raise ValueError("sample_rate_hz must be positive")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def c(self) -> int:
        return self.data.shape[0]

    @property
    def t(self) -> int:
        return self.data.shape[1]


def save_block(block: SignalBlock, path) -> None:
    payload = block.data.astype("<f4").tobytes()
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, block.c, block.t, block.sample_rate_hz)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_block(path) -> SignalBlock:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, c, t, rate = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * c * t
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {c}x{t}, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(c, t)
    finite = np.isfinite(data)
    if not finite.all():
        bad = np.argwhere(~finite)[0]
        raise FormatError(f"{path}: non-finite sample at channel {bad[0]}, index {bad[1]}")
    return SignalBlock(data=data.astype(np.float64), sample_rate_hz=rate)


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean and (floored) standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValueError("stats must be matching 1-d arrays")
        if not np.all(std > 0):
            raise ValueError("std must be positive everywhere")
        mean.flags.writeable = False
        std.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def c(self) -> int:
        return self.mean.shape[0]


def fit_stats(blocks) -> ChannelStats:
    """Pooled per-channel mean/std across blocks (time axes concatenated)."""
    blocks = list(blocks)
    if not blocks:
        raise ValueError("need at least one block to fit stats")
    c = blocks[0].c
    for b in blocks:
        if b.c != c:
            raise ValueError(f"channel-count mismatch: {b.c} vs {c}")
    total = sum(b.t for b in blocks)
    mean = np.zeros(c)
    for b in blocks:
        mean += b.data.sum(axis=1)
    mean /= total
    var = np.zeros(c)
    for b in blocks:
        d = b.data - mean[:, None]
        var += (d * d).sum(axis=1)
    var /= total
    std = np.maximum(np.sqrt(var), STD_FLOOR)
    return ChannelStats(mean=mean, std=std)


def apply_normalize(block: SignalBlock, stats: ChannelStats) -> SignalBlock:
    if block.c != stats.c:
        raise ValueError(f"channel-count mismatch: block {block.c} vs stats {stats.c}")
    data = (block.data - stats.mean[:, None]) / stats.std[:, None]
    return SignalBlock(data=data, sample_rate_hz=block.sample_rate_hz)


def apply_denormalize(block: SignalBlock, stats: ChannelStats) -> SignalBlock:
    if block.c != stats.c:
        raise ValueError(f"channel-count mismatch: block {block.c} vs stats {stats.c}")
    data = block.data * stats.std[:, None] + stats.mean[:, None]
    return SignalBlock(data=data, sample_rate_hz=block.sample_rate_hz)
