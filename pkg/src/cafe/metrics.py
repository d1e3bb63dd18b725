"""Reconstruction fidelity metrics and ablation bookkeeping.

All metrics are restricted to an explicit channel set; by convention that is
the missing-channel set (anchors are copied verbatim, so scoring them would
only dilute the numbers).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

SNR_CAP_DB = 120.0


def _rows(arr, channel_set):
    arr = np.asarray(arr, dtype=np.float64)
    idx = sorted(int(i) for i in channel_set)
    if len(idx) == 0:
        raise ValueError("empty channel set")
    if idx[0] < 0 or idx[-1] >= arr.shape[0]:
        raise ValueError(f"channel index out of range 0..{arr.shape[0] - 1}")
    return arr[idx]


def nmse(pred, target, channel_set) -> float:
    """Error energy over target energy, pooled across the channel set."""
    p = _rows(pred, channel_set)
    t = _rows(target, channel_set)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    te = float((t * t).sum())
    if te == 0.0:
        raise ValueError("target has zero energy on the evaluated channels")
    d = p - t
    return float((d * d).sum()) / te


def nmse_per_channel(pred, target, channel_set) -> float:
    """Mean of per-channel NMSE; sensitivity variant of the pooled default."""
    idx = sorted(int(i) for i in channel_set)
    vals = [nmse(pred, target, [i]) for i in idx]
    return float(np.mean(vals))


def pcc(pred, target, channel_set) -> float:
    """Per-channel Pearson correlation over time, averaged across the set.

    Zero-variance channels contribute 0 (with a warning) rather than NaN.
    """
    p = _rows(pred, channel_set)
    t = _rows(target, channel_set)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    vals = []
    for i in range(p.shape[0]):
        pc = p[i] - p[i].mean()
        tc = t[i] - t[i].mean()
        denom = np.sqrt((pc * pc).sum() * (tc * tc).sum())
        if denom == 0.0:
            warnings.warn("zero-variance channel in PCC; treating as 0")
            vals.append(0.0)
        else:
            vals.append(float((pc * tc).sum() / denom))
    return float(np.mean(vals))


def snr_db(pred, target, channel_set) -> float:
    """10*log10(target energy / error energy); identically -10*log10(NMSE)."""
    v = nmse(pred, target, channel_set)
    if v == 0.0:
        return SNR_CAP_DB
    return float(min(-10.0 * np.log10(v), SNR_CAP_DB))


# ---------------------------------------------------------------------------
# spectral distortion


@dataclass(frozen=True)
class StftConfig:
    window: int = 64
    hop: int = 32

    def __post_init__(self):
        if self.window < 2 or self.hop < 1:
            raise ValueError("window must be >= 2 and hop >= 1")


def _hann(n):
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_power(x, cfg: StftConfig) -> np.ndarray:
    """One-sided STFT power spectrogram per channel: (C, frames, bins)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    t = x.shape[-1]
    if t < cfg.window:
        raise ValueError(f"signal length {t} shorter than window {cfg.window}")
    win = _hann(cfg.window)
    n_frames = 1 + (t - cfg.window) // cfg.hop
    frames = np.stack(
        [x[:, i * cfg.hop : i * cfg.hop + cfg.window] * win for i in range(n_frames)],
        axis=1,
    )
    spec = np.fft.rfft(frames, axis=-1)
    return (spec.real**2 + spec.imag**2).astype(np.float64)


def spec_mae(pred, target, channel_set, cfg: StftConfig | None = None) -> float:
    """Mean absolute difference between STFT power spectrograms."""
    cfg = cfg or StftConfig()
    p = stft_power(_rows(pred, channel_set), cfg)
    t = stft_power(_rows(target, channel_set), cfg)
    return float(np.abs(p - t).mean())


def gain(orig: float, ar: float, lower_is_better: bool) -> float:
    """Relative improvement in percent, oriented so positive means better."""
    if orig == 0.0:
        raise ValueError("gain undefined for a zero baseline")
    if lower_is_better:
        return 100.0 * (orig - ar) / orig
    return 100.0 * (ar - orig) / orig


# ---------------------------------------------------------------------------
# per-run report


@dataclass
class MetricsReport:
    nmse: float
    pcc: float
    snr_db: float
    spec_mae: float
    per_group_nmse: list[float] = field(default_factory=list)
    cumulative_nmse: list[float] = field(default_factory=list)
    channel_set: tuple[int, ...] = ()

    def __post_init__(self):
        if self.per_group_nmse and not self.cumulative_nmse:
            self.cumulative_nmse = list(np.cumsum(self.per_group_nmse))

    FIELDS = ("nmse", "pcc", "snr_db", "spec_mae")

    def to_json_line(self) -> str:
        rec = {
            "nmse": self.nmse,
            "pcc": self.pcc,
            "snr_db": self.snr_db,
            "spec_mae": self.spec_mae,
            "per_group_nmse": list(self.per_group_nmse),
            "cumulative_nmse": list(self.cumulative_nmse),
            "channel_set": list(self.channel_set),
        }
        return json.dumps(rec, sort_keys=False)


def evaluate_block(pred, target, channel_set, groups=None, stft_cfg=None) -> MetricsReport:
    """Full report for one reconstructed block against its reference."""
    per_group = []
    if groups:
        per_group = [nmse(pred, target, g) for g in groups]
    return MetricsReport(
        nmse=nmse(pred, target, channel_set),
        pcc=pcc(pred, target, channel_set),
        snr_db=snr_db(pred, target, channel_set),
        spec_mae=spec_mae(pred, target, channel_set, stft_cfg),
        per_group_nmse=per_group,
        channel_set=tuple(sorted(int(i) for i in channel_set)),
    )
