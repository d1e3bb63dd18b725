"""Synthetic multichannel generators with distance-decaying cross-channel
dependence, plus anchor-noise injection and on-disk dataset assembly.

The correlated generator mixes band-limited latent sources into channels
through a Gaussian radial kernel, so nearby sensors share sources strongly
and distant ones weakly. The linear generator makes each missing channel an
exact fixed linear combination of the anchors; a sanity task a one-shot
model should solve nearly perfectly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .montage import (
    LayoutSpec,
    Montage,
    load_layout,
    load_montage,
    make_layout,
    missing_channels,
    save_layout,
    save_montage,
)
from .signals import SignalBlock, load_block, save_block

MONTAGE_KINDS = ("grid", "ring", "scalp")
GEN_KINDS = ("correlated", "linear")

_N_SINUSOIDS = 16


@dataclass(frozen=True)
class GenConfig:
    c_h: int = 32
    t: int = 128
    sample_rate_hz: float = 128.0
    n_sources: int = 8
    spatial_sigma: float = 0.4
    source_band: tuple[float, float] = (2.0, 30.0)
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.c_h < 2 or self.t < 1:
            raise ValueError("need c_h >= 2 and t >= 1")
        if self.n_sources < 1:
            raise ValueError("need at least one source")
        if not self.spatial_sigma > 0:
            raise ValueError("spatial_sigma must be positive")
        lo, hi = self.source_band
        if not (0 < lo < hi <= self.sample_rate_hz / 2):
            raise ValueError("source band must satisfy 0 < lo < hi <= Nyquist")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")


def gen_montage(kind: str, c_h: int, seed: int = 0) -> Montage:
    """Deterministic montage coordinates for the given family."""
    if kind not in MONTAGE_KINDS:
        raise ValueError(f"montage kind must be one of {MONTAGE_KINDS}")
    labels = tuple(f"CH{i:02d}" for i in range(c_h))
    if kind == "grid":
        if c_h < 4:
            raise ValueError("grid montage needs at least 4 channels")
        n_cols = math.ceil(math.sqrt(c_h))
        n_rows = math.ceil(c_h / n_cols)
        pos = []
        for i in range(c_h):
            r, c = divmod(i, n_cols)
            x = c / (n_cols - 1) if n_cols > 1 else 0.0
            y = r / (n_rows - 1) if n_rows > 1 else 0.0
            pos.append([x, y, 0.0])
        return Montage(channel_ids=labels, positions=np.array(pos))
    if kind == "ring":
        ang = 2.0 * np.pi * np.arange(c_h) / c_h
        pos = np.stack([np.cos(ang), np.sin(ang), np.zeros(c_h)], axis=1)
        return Montage(channel_ids=labels, positions=pos)
    # scalp: jittered Fibonacci points on a spherical cap, unit radius
    rng = np.random.default_rng(seed)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    cap = np.cos(np.deg2rad(75.0))  # polar extent of the cap
    pos = []
    for i in range(c_h):
        z = 1.0 - (1.0 - cap) * (i + 0.5) / c_h
        r = np.sqrt(max(0.0, 1.0 - z * z))
        theta = golden * i + 0.05 * rng.standard_normal()
        pos.append([r * np.cos(theta), r * np.sin(theta), z])
    return Montage(channel_ids=labels, positions=np.array(pos))


def _band_noise(rng, n_signals, cfg: GenConfig) -> np.ndarray:
    """Rows of band-limited noise: sums of random-phase sinusoids, unit-ish
    variance."""
    tau = np.arange(cfg.t) / cfg.sample_rate_hz
    lo, hi = cfg.source_band
    freqs = rng.uniform(lo, hi, size=(n_signals, _N_SINUSOIDS))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(n_signals, _N_SINUSOIDS))
    waves = np.sin(2.0 * np.pi * freqs[:, :, None] * tau[None, None, :] + phases[:, :, None])
    return waves.sum(axis=1) / np.sqrt(_N_SINUSOIDS / 2.0)


def gen_block(montage: Montage, cfg: GenConfig, seed: int | None = None) -> SignalBlock:
    """Latent sources mixed through a Gaussian radial kernel plus white noise."""
    if montage.c_h != cfg.c_h:
        raise ValueError(f"montage has {montage.c_h} channels, config says {cfg.c_h}")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    lo = montage.positions.min(axis=0)
    hi = montage.positions.max(axis=0)
    q = rng.uniform(lo, hi, size=(cfg.n_sources, 3))
    sources = _band_noise(rng, cfg.n_sources, cfg)
    d = montage.positions[:, None, :] - q[None, :, :]
    w = np.exp(-(d * d).sum(axis=2) / (2.0 * cfg.spatial_sigma**2))
    data = w @ sources
    if cfg.noise_std > 0:
        data = data + cfg.noise_std * rng.standard_normal(data.shape)
    return SignalBlock(data=data, sample_rate_hz=cfg.sample_rate_hz)


def linear_mixing_matrix(montage: Montage, layout: LayoutSpec, cfg: GenConfig) -> np.ndarray:
    """Fixed (N_missing, C_L) weights: distance kernel, rows normalized."""
    miss = list(missing_channels(montage, layout))
    obs = list(layout.observed)
    d = montage.positions[miss][:, None, :] - montage.positions[obs][None, :, :]
    w = np.exp(-(d * d).sum(axis=2) / (2.0 * cfg.spatial_sigma**2))
    return w / w.sum(axis=1, keepdims=True)


def gen_linear_block(
    montage: Montage, layout: LayoutSpec, cfg: GenConfig, seed: int | None = None
) -> SignalBlock:
    """Anchors carry independent band-limited noise; every missing channel is
    the stored linear combination of the anchors (plus optional noise)."""
    if montage.c_h != cfg.c_h:
        raise ValueError(f"montage has {montage.c_h} channels, config says {cfg.c_h}")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    obs = list(layout.observed)
    miss = list(missing_channels(montage, layout))
    anchors = _band_noise(rng, len(obs), cfg)
    mix = linear_mixing_matrix(montage, layout, cfg)
    data = np.zeros((montage.c_h, cfg.t))
    data[obs] = anchors
    data[miss] = mix @ anchors
    if cfg.noise_std > 0:
        data = data + cfg.noise_std * rng.standard_normal(data.shape)
    return SignalBlock(data=data, sample_rate_hz=cfg.sample_rate_hz)


def inject_anchor_noise(x_l: SignalBlock, snr_db_level: float, seed: int = 0) -> SignalBlock:
    """Add white Gaussian noise scaled so the anchor-set SNR hits the target.

    ``math.inf`` is the no-noise sentinel.
    """
    if not np.all(np.isfinite(x_l.data)):
        raise ValueError("anchor block contains non-finite samples")
    if math.isinf(snr_db_level):
        return x_l
    rng = np.random.default_rng(seed)
    sig_power = float((x_l.data**2).mean())
    noise_power = sig_power / (10.0 ** (snr_db_level / 10.0))
    noise = np.sqrt(noise_power) * rng.standard_normal(x_l.data.shape)
    return SignalBlock(data=x_l.data + noise, sample_rate_hz=x_l.sample_rate_hz)


# ---------------------------------------------------------------------------
# dataset directories


def _sample_seed(base_seed: int, split_idx: int, i: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([base_seed, split_idx, i])


def make_dataset(
    montage: Montage,
    layout: LayoutSpec,
    gen_kind: str,
    n_train: int,
    n_val: int,
    n_test: int,
    cfg: GenConfig,
    out_dir,
    force: bool = False,
) -> Path:
    """Write montage.csv, layout.txt, manifest.txt and per-split .cafesig
    blocks; splits are disjoint by seed stream."""
    if gen_kind not in GEN_KINDS:
        raise ValueError(f"gen kind must be one of {GEN_KINDS}")
    if n_train < 1:
        raise ValueError("need at least one training sample")
    if n_val < 0 or n_test < 0:
        raise ValueError("split sizes must be nonnegative")
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ValueError(f"{out} exists and is not empty (use force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    save_montage(montage, out / "montage.csv")
    save_layout(layout, montage, out / "layout.txt")
    if gen_kind == "linear":
        np.save(out / "mixing.npy", linear_mixing_matrix(montage, layout, cfg))
    manifest = {
        "kind": gen_kind,
        "n_train": str(n_train),
        "n_val": str(n_val),
        "n_test": str(n_test),
        "c_h": str(cfg.c_h),
        "t": str(cfg.t),
        "sample_rate_hz": repr(cfg.sample_rate_hz),
        "n_sources": str(cfg.n_sources),
        "spatial_sigma": repr(cfg.spatial_sigma),
        "band_lo": repr(cfg.source_band[0]),
        "band_hi": repr(cfg.source_band[1]),
        "noise_std": repr(cfg.noise_std),
        "seed": str(cfg.seed),
    }
    with open(out / "manifest.txt", "w", encoding="utf-8") as fh:
        for key, val in manifest.items():
            fh.write(f"{key} = {val}\n")
    for split_idx, (name, count) in enumerate(
        (("train", n_train), ("val", n_val), ("test", n_test))
    ):
        split_dir = out / name
        split_dir.mkdir(exist_ok=True)
        for i in range(count):
            seed = _sample_seed(cfg.seed, split_idx, i)
            if gen_kind == "linear":
                block = gen_linear_block(montage, layout, cfg, seed=seed)
            else:
                block = gen_block(montage, cfg, seed=seed)
            save_block(block, split_dir / f"{i:04d}.cafesig")
    return out


def load_manifest(path) -> dict[str, str]:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            key, _, val = line.partition(" = ")
            if key.strip():
                out[key.strip()] = val.strip()
    return out


@dataclass
class Dataset:
    root: Path
    montage: Montage
    layout: LayoutSpec
    manifest: dict[str, str]

    def split(self, name: str) -> list[SignalBlock]:
        split_dir = self.root / name
        if not split_dir.is_dir():
            return []
        return [load_block(p) for p in sorted(split_dir.glob("*.cafesig"))]

    def gen_config(self) -> GenConfig:
        m = self.manifest
        return GenConfig(
            c_h=int(m["c_h"]),
            t=int(m["t"]),
            sample_rate_hz=float(m["sample_rate_hz"]),
            n_sources=int(m["n_sources"]),
            spatial_sigma=float(m["spatial_sigma"]),
            source_band=(float(m["band_lo"]), float(m["band_hi"])),
            noise_std=float(m["noise_std"]),
            seed=int(m["seed"]),
        )


def load_dataset(root) -> Dataset:
    root = Path(root)
    montage = load_montage(root / "montage.csv")
    layout = load_layout(root / "layout.txt", montage)
    manifest = load_manifest(root / "manifest.txt")
    return Dataset(root=root, montage=montage, layout=layout, manifest=manifest)
