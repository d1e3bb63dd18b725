"""End-to-end experiment drivers: reconstruct/evaluate a trained model on a
dataset, and the three ablation matrices (ordering, granularity, rollout
scheme). The CLI is a thin wrapper around these."""

from __future__ import annotations

import math
from dataclasses import replace
from fractions import Fraction

import numpy as np

from . import metrics as mx
from .montage import missing_channels
from .predictor import ModelArtifact
from .rollout import run_inference_batch, run_oneshot_batch
from .signals import SignalBlock
from .synthdata import Dataset, inject_anchor_noise
from .training import TrainConfig, fit


def reconstruct_batch(
    artifact: ModelArtifact,
    blocks: list[SignalBlock],
    mode: str = "rollout",
    noise_snr_db: float = math.inf,
    noise_seed: int = 0,
):
    """Reconstruct raw-scale estimates from the anchor rows of HD blocks.

    Anchors are (optionally) noise-injected in raw units, normalized with the
    artifact's training stats, rolled out in normalized space, denormalized,
    and finally overwritten with the exact raw anchor values.

    Returns (estimates, references, anchors_used) as (B,C_H,T)/(B,C_H,T)/
    (B,C_L,T) arrays.
    """
    if mode not in ("rollout", "oneshot"):
        raise ValueError("mode must be 'rollout' or 'oneshot'")
    layout = artifact.layout
    obs = list(layout.observed)
    raw = np.stack([b.data for b in blocks])
    rate = blocks[0].sample_rate_hz
    anchors_raw = raw[:, obs, :]
    if not math.isinf(noise_snr_db):
        noisy = []
        for i in range(anchors_raw.shape[0]):
            blk = SignalBlock(data=anchors_raw[i], sample_rate_hz=rate)
            seed = np.random.SeedSequence([noise_seed, i])
            noisy.append(inject_anchor_noise(blk, noise_snr_db, seed=seed).data)
        anchors_raw = np.stack(noisy)
    mean = artifact.stats.mean
    std = artifact.stats.std
    anchors_norm = (anchors_raw - mean[obs][None, :, None]) / std[obs][None, :, None]
    if mode == "rollout":
        est_norm = run_inference_batch(artifact.params, anchors_norm, layout, artifact.schedule)
    else:
        est_norm = run_oneshot_batch(artifact.params, anchors_norm, layout)
    est_raw = est_norm * std[None, :, None] + mean[None, :, None]
    est_raw[:, obs, :] = anchors_raw
    return est_raw, raw, anchors_raw


def evaluate_batch(estimates, references, channel_set, groups=None, stft_cfg=None) -> mx.MetricsReport:
    """Sample-averaged metrics over an explicit channel set."""
    n = estimates.shape[0]
    if stft_cfg is None:
        t = estimates.shape[2]
        win = 64 if t >= 64 else max(2, t)
        stft_cfg = mx.StftConfig(window=win, hop=max(1, win // 2))
    reports = [
        mx.evaluate_block(estimates[i], references[i], channel_set, groups=groups, stft_cfg=stft_cfg)
        for i in range(n)
    ]
    per_group = []
    if groups:
        per_group = [
            float(np.mean([r.per_group_nmse[g] for r in reports])) for g in range(len(groups))
        ]
    return mx.MetricsReport(
        nmse=float(np.mean([r.nmse for r in reports])),
        pcc=float(np.mean([r.pcc for r in reports])),
        snr_db=float(np.mean([r.snr_db for r in reports])),
        spec_mae=float(np.mean([r.spec_mae for r in reports])),
        per_group_nmse=per_group,
        channel_set=tuple(sorted(int(i) for i in channel_set)),
    )


def evaluate_artifact(
    artifact: ModelArtifact,
    blocks: list[SignalBlock],
    mode: str = "rollout",
    noise_snr_db: float = math.inf,
    noise_seed: int = 0,
) -> mx.MetricsReport:
    est, raw, _ = reconstruct_batch(artifact, blocks, mode, noise_snr_db, noise_seed)
    miss = artifact.schedule.all_missing()
    groups = artifact.schedule.groups if mode == "rollout" else None
    return evaluate_batch(est, raw, miss, groups=groups)


def train_on_dataset(dataset: Dataset, cfg: TrainConfig):
    splits = {"train": dataset.split("train")}
    val = dataset.split("val")
    if val:
        splits["val"] = val
    return fit(splits, dataset.montage, dataset.layout, cfg)


# ---------------------------------------------------------------------------
# ablation matrices (shared seeds across conditions)


def parse_schedule_sizes(text: str, n_missing: int) -> list[int]:
    """Parse one granularity condition: 'AxB' means B steps of A channels,
    'a-b-c' lists explicit per-step sizes. Sizes must sum to N."""
    text = text.strip().lower()
    if "x" in text:
        a, _, b = text.partition("x")
        sizes = [int(a)] * int(b)
    else:
        sizes = [int(s) for s in text.split("-")]
    if sum(sizes) != n_missing:
        raise ValueError(
            f"schedule {text!r} covers {sum(sizes)} channels, need {n_missing}"
        )
    return sizes


def sizes_to_config(cfg: TrainConfig, sizes: list[int]) -> TrainConfig:
    n = sum(sizes)
    cum = np.cumsum(sizes)[:-1]
    fractions = tuple(Fraction(int(c), n) for c in cum)
    return replace(cfg, n_groups=len(sizes), split_fractions=fractions)


def run_order_ablation(dataset: Dataset, base_cfg: TrainConfig, seeds) -> list[dict]:
    test = dataset.split("test")
    rows = []
    for order in ("proximal", "distal", "random"):
        for seed in seeds:
            cfg = replace(base_cfg, order_kind=order, seed=int(seed), order_seed=int(seed))
            artifact, _ = train_on_dataset(dataset, cfg)
            rep = evaluate_artifact(artifact, test)
            rows.append(
                {
                    "order": order,
                    "seed": int(seed),
                    "nmse": rep.nmse,
                    "pcc": rep.pcc,
                    "snr_db": rep.snr_db,
                    "spec_mae": rep.spec_mae,
                }
            )
    return rows


def run_granularity_ablation(dataset: Dataset, base_cfg: TrainConfig, schedules, seeds) -> list[dict]:
    test = dataset.split("test")
    n_missing = len(missing_channels(dataset.montage, dataset.layout))
    rows = []
    for text in schedules:
        sizes = parse_schedule_sizes(text, n_missing)
        for seed in seeds:
            cfg = sizes_to_config(replace(base_cfg, seed=int(seed)), sizes)
            artifact, _ = train_on_dataset(dataset, cfg)
            rep = evaluate_artifact(artifact, test)
            rows.append(
                {
                    "schedule": text.strip(),
                    "seed": int(seed),
                    "n_groups": len(sizes),
                    "nmse": rep.nmse,
                    "pcc": rep.pcc,
                    "snr_db": rep.snr_db,
                    "spec_mae": rep.spec_mae,
                }
            )
    return rows


def run_scheme_ablation(
    dataset: Dataset, base_cfg: TrainConfig, seeds, schemes=("tf", "ss", "rollout")
) -> list[dict]:
    test = dataset.split("test")
    rows = []
    for scheme in schemes:
        for seed in seeds:
            cfg = replace(base_cfg, scheme=scheme, seed=int(seed))
            artifact, _ = train_on_dataset(dataset, cfg)
            rep = evaluate_artifact(artifact, test)
            for g, (step_nmse, cum) in enumerate(
                zip(rep.per_group_nmse, rep.cumulative_nmse), start=1
            ):
                rows.append(
                    {
                        "scheme": scheme,
                        "seed": int(seed),
                        "step": g,
                        "step_nmse": float(step_nmse),
                        "cumulative_nmse": float(cum),
                    }
                )
    return rows


def run_noise_sweep(artifact: ModelArtifact, blocks, snr_levels_db, noise_seed: int = 0) -> list[dict]:
    rows = []
    for snr in snr_levels_db:
        rep = evaluate_artifact(artifact, blocks, noise_snr_db=snr, noise_seed=noise_seed)
        rows.append({"anchor_snr_db": float(snr), "nmse": rep.nmse, "snr_db": rep.snr_db})
    return rows
