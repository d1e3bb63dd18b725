"""Next-group supervised training: teacher forcing, epoch-cached scheduled
sampling, and pure-rollout conditioning, with SGD/Adam updates.

The per-step contexts of a batch are all built before the forward pass (the
sampling cache is frozen with respect to the current parameters), stacked
along the batch axis, and pushed through one forward/backward. The loss at
step g touches only that step's target group.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import predictor as pred
from .montage import GroupSchedule, LayoutSpec, Montage, build_schedule
from .predictor import ModelArtifact, PredictorHyper, PredictorParams
from .rollout import run_inference_batch
from .signals import ChannelStats, SignalBlock, apply_normalize, fit_stats

SCHEMES = ("tf", "ss", "rollout")
OPTIMIZER_KINDS = ("adam", "sgd")

_Z_STREAM = 0x5A
_SHUFFLE_STREAM = 0x5F


@dataclass(frozen=True)
class TrainConfig:
    backbone: str = "conv"
    n_groups: int = 3
    split_fractions: tuple = (Fraction(1, 6), Fraction(1, 2))
    order_kind: str = "proximal"
    order_seed: int | None = None
    pi: float = 0.95
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer_kind: str = "adam"
    seed: int = 0
    scheme: str = "ss"
    input_mode: str = "mask_appended"
    hyper: PredictorHyper = field(default_factory=PredictorHyper)
    pi_decay: float = 0.0  # optional linear decay per epoch; 0 keeps pi constant

    def __post_init__(self):
        if not 0.0 <= self.pi <= 1.0:
            raise ValueError("pi must lie in [0,1]")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size, learning_rate must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.optimizer_kind not in OPTIMIZER_KINDS:
            raise ValueError(f"optimizer must be one of {OPTIMIZER_KINDS}")
        if self.n_groups < 1:
            raise ValueError("need at least one group")
        if self.pi_decay < 0:
            raise ValueError("pi_decay must be nonnegative")

    def effective_pi(self, epoch: int) -> float:
        return max(0.0, self.pi - self.pi_decay * epoch)

    def echo(self) -> dict[str, str]:
        out = {
            "backbone": self.backbone,
            "n_groups": str(self.n_groups),
            "split_fractions": ",".join(str(Fraction(f)) for f in self.split_fractions),
            "order_kind": self.order_kind,
            "order_seed": "" if self.order_seed is None else str(self.order_seed),
            "pi": repr(self.pi),
            "epochs": str(self.epochs),
            "batch_size": str(self.batch_size),
            "learning_rate": repr(self.learning_rate),
            "optimizer_kind": self.optimizer_kind,
            "seed": str(self.seed),
            "scheme": self.scheme,
            "input_mode": self.input_mode,
            "pi_decay": repr(self.pi_decay),
        }
        for name in ("hidden", "feat", "conv_width", "kernel", "ff"):
            out[f"hyper.{name}"] = str(getattr(self.hyper, name))
        return out


@dataclass
class EpochCache:
    """Per-sample predicted missing groups from the previous epoch's rollout."""

    group_rows: list[np.ndarray]  # per group g: (n_samples, |U_g|, T)
    epoch_tag: int
    snapshot_hash: str

    def sample_groups(self, i: int) -> list[np.ndarray]:
        return [rows[i] for rows in self.group_rows]


def params_hash(params: PredictorParams) -> str:
    h = hashlib.sha256()
    for name in params.tensors:
        h.update(name.encode())
        h.update(np.ascontiguousarray(params.tensors[name], dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# context construction


def step_mask(layout: LayoutSpec, schedule: GroupSchedule, g: int, c_h: int) -> np.ndarray:
    """Visibility mask for step g (1-based): anchors plus groups before g."""
    if not 1 <= g <= schedule.n_groups:
        raise ValueError(f"step must be in 1..{schedule.n_groups}")
    mask = np.zeros(c_h)
    mask[list(layout.observed)] = 1.0
    for k in range(g - 1):
        mask[list(schedule.groups[k])] = 1.0
    return mask


def build_tf_context(sample, schedule: GroupSchedule, g: int, layout: LayoutSpec):
    """Step-g context with ground-truth history; returns (context, mask)."""
    data = sample.data if isinstance(sample, SignalBlock) else np.asarray(sample)
    c_h = data.shape[0]
    mask = step_mask(layout, schedule, g, c_h)
    ctx = np.zeros_like(data)
    obs = list(layout.observed)
    ctx[obs] = data[obs]
    for k in range(g - 1):
        grp = list(schedule.groups[k])
        ctx[grp] = data[grp]
    return ctx, mask


def build_ss_context(sample, schedule: GroupSchedule, g: int, layout: LayoutSpec, cache_groups, z_draws):
    """Step-g context with mixed history: group k uses ground truth iff
    z_draws[k] is 1, otherwise the cached prediction from the last epoch."""
    data = sample.data if isinstance(sample, SignalBlock) else np.asarray(sample)
    c_h = data.shape[0]
    mask = step_mask(layout, schedule, g, c_h)
    ctx = np.zeros_like(data)
    obs = list(layout.observed)
    ctx[obs] = data[obs]
    if g - 1 > len(z_draws):
        raise ValueError(f"need {g - 1} mixing draws for step {g}")
    for k in range(g - 1):
        grp = list(schedule.groups[k])
        if z_draws[k]:
            ctx[grp] = data[grp]
        else:
            if cache_groups is None or k >= len(cache_groups):
                raise ValueError(f"missing cache entry for group {k}")
            ctx[grp] = cache_groups[k]
    return ctx, mask


def draw_z(seed: int, epoch: int, sample_idx: int, k: int, pi: float) -> int:
    """Counter-based Bernoulli(pi) draw keyed by (epoch, sample, group)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, _Z_STREAM, epoch, sample_idx, k]))
    return 1 if rng.random() < pi else 0


def refresh_cache(
    params: PredictorParams,
    train_arrays: np.ndarray,
    layout: LayoutSpec,
    schedule: GroupSchedule,
    epoch_tag: int,
    chunk: int = 64,
) -> EpochCache:
    """Roll the frozen snapshot over every training sample (self-conditioned,
    no ground-truth history) and store each predicted group."""
    obs = list(layout.observed)
    anchors = train_arrays[:, obs, :]
    _, group_rows = run_inference_batch(
        params, anchors, layout, schedule, chunk=chunk, collect_groups=True
    )
    return EpochCache(group_rows=group_rows, epoch_tag=epoch_tag, snapshot_hash=params_hash(params))


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def sgd_step(tensors: dict, grads: dict, state: OptimizerState, lr: float) -> None:
    for name, g in grads.items():
        if tensors[name].shape != g.shape:
            raise ValueError(f"grad shape mismatch for {name}")
        tensors[name] -= lr * g
    state.t += 1


def adam_step(tensors: dict, grads: dict, state: OptimizerState, lr: float) -> None:
    state.t += 1
    t = state.t
    for name, g in grads.items():
        if tensors[name].shape != g.shape:
            raise ValueError(f"grad shape mismatch for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(tensors[name])
            state.v[name] = np.zeros_like(tensors[name])
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * (g * g)
        mhat = m / (1 - ADAM_BETA1**t)
        vhat = v / (1 - ADAM_BETA2**t)
        tensors[name] -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


def optimizer_step(tensors, grads, state: OptimizerState, lr: float) -> None:
    if state.kind == "adam":
        adam_step(tensors, grads, state, lr)
    else:
        sgd_step(tensors, grads, state, lr)


# ---------------------------------------------------------------------------
# epoch loop


def _batch_contexts(arrays, indices, schedule, layout, scheme_now, cache, cfg, epoch):
    """Contexts/masks for one batch, all G steps stacked step-major.

    Returns (contexts (G*B,C,T), masks (G*B,C), entry list of (sample, g))
    where rows g*B..(g+1)*B-1 hold step g+1 for the whole batch.
    """
    g_total = schedule.n_groups
    b = len(indices)
    c_h, t_len = arrays.shape[1], arrays.shape[2]
    obs = list(layout.observed)
    batch = arrays[indices]
    if scheme_now == "tf":
        z = np.ones((b, max(g_total - 1, 1)), dtype=bool)
    elif scheme_now == "rollout":
        z = np.zeros((b, max(g_total - 1, 1)), dtype=bool)
    else:
        pi_e = cfg.effective_pi(epoch)
        z = np.array(
            [
                [draw_z(cfg.seed, epoch, int(i), k, pi_e) for k in range(max(g_total - 1, 1))]
                for i in indices
            ],
            dtype=bool,
        )
    history = None
    if scheme_now != "tf" and g_total > 1:
        history = []
        for k in range(g_total - 1):
            grp = list(schedule.groups[k])
            truth = batch[:, grp, :]
            cached = cache.group_rows[k][indices]
            history.append(np.where(z[:, k][:, None, None], truth, cached))
    ctxs = np.zeros((g_total * b, c_h, t_len))
    masks = np.zeros((g_total * b, c_h))
    entry = []
    for g in range(1, g_total + 1):
        sl = slice((g - 1) * b, g * b)
        ctxs[sl][:, obs, :] = batch[:, obs, :]
        masks[sl][:, obs] = 1.0
        for k in range(g - 1):
            grp = list(schedule.groups[k])
            rows = batch[:, grp, :] if scheme_now == "tf" else history[k]
            ctxs[sl.start : sl.stop, grp, :] = rows
            masks[sl.start : sl.stop, grp] = 1.0
        entry.extend((int(i), g) for i in indices)
    return ctxs, masks, entry


def train_epoch(
    params: PredictorParams,
    arrays: np.ndarray,
    cfg: TrainConfig,
    schedule: GroupSchedule,
    layout: LayoutSpec,
    cache: EpochCache | None,
    epoch: int,
    opt_state: OptimizerState,
):
    """One pass over the training arrays; mutates params/opt_state in place.

    Returns per-step mean losses (length G). Epoch 0 always runs teacher
    forcing: the sampling cache does not exist before the first refresh.
    """
    n = arrays.shape[0]
    g_total = schedule.n_groups
    scheme_now = "tf" if epoch == 0 else cfg.scheme
    if scheme_now != "tf" and cache is None:
        raise ValueError(f"scheme {scheme_now!r} needs a populated cache at epoch {epoch}")
    t_len = arrays.shape[2]
    group_sizes = [len(g) for g in schedule.groups]
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence([cfg.seed, _SHUFFLE_STREAM, epoch])
    )
    order = shuffle_rng.permutation(n)
    step_loss_sums = np.zeros(g_total)
    for lo in range(0, n, cfg.batch_size):
        idx = order[lo : lo + cfg.batch_size]
        ctxs, masks, _ = _batch_contexts(
            arrays, idx, schedule, layout, scheme_now, cache, cfg, epoch
        )
        est, fcache = pred.forward_many(params, ctxs, masks)
        upstream = np.zeros_like(est)
        b = len(idx)
        batch = arrays[idx]
        batch_loss = 0.0
        for g in range(g_total):
            grp = list(schedule.groups[g])
            sl = slice(g * b, (g + 1) * b)
            diff = est[sl][:, grp, :] - batch[:, grp, :]
            denom = group_sizes[g] * t_len
            per_sample = (diff * diff).sum(axis=(1, 2)) / denom
            step_loss_sums[g] += float(per_sample.sum())
            batch_loss += float(per_sample.sum())
            upstream[sl.start : sl.stop, grp, :] = (2.0 / (denom * b)) * diff
        if not np.isfinite(batch_loss):
            raise RuntimeError(
                f"non-finite loss at epoch {epoch}, batch starting {lo} "
                f"(scheme {scheme_now}, loss {batch_loss})"
            )
        grads = pred.backward_many(params, fcache, upstream)
        optimizer_step(params.tensors, grads, opt_state, cfg.learning_rate)
    return step_loss_sums / n


def _validation_nmse(params, val_arrays, layout, schedule):
    obs = list(layout.observed)
    miss = list(schedule.all_missing())
    recon = run_inference_batch(params, val_arrays[:, obs, :], layout, schedule)
    diffs = recon[:, miss, :] - val_arrays[:, miss, :]
    num = (diffs * diffs).sum(axis=(1, 2))
    den = (val_arrays[:, miss, :] ** 2).sum(axis=(1, 2))
    den = np.where(den == 0.0, 1.0, den)
    return float((num / den).mean())


def fit(dataset, montage: Montage, layout: LayoutSpec, cfg: TrainConfig):
    """Train a predictor; returns (ModelArtifact, training-log rows).

    ``dataset`` maps split names to lists of SignalBlocks; "train" is
    required, "val" optional. Normalization stats come from the training
    split only and ship with the artifact. The log has one row per epoch
    with per-step losses.
    """
    train_blocks = dataset.get("train", [])
    if not train_blocks:
        raise ValueError("dataset needs a non-empty train split")
    c_h = montage.c_h
    for b in train_blocks:
        if b.c != c_h:
            raise ValueError(f"block has {b.c} channels, montage has {c_h}")
    t_len = train_blocks[0].t
    if any(b.t != t_len for b in train_blocks):
        raise ValueError("all training blocks must share T")
    rate = train_blocks[0].sample_rate_hz

    stats = fit_stats(train_blocks)
    train_arrays = np.stack([apply_normalize(b, stats).data for b in train_blocks])
    val_blocks = dataset.get("val", [])
    val_arrays = (
        np.stack([apply_normalize(b, stats).data for b in val_blocks]) if val_blocks else None
    )

    order_seed = cfg.order_seed if cfg.order_seed is not None else cfg.seed
    schedule = build_schedule(
        montage, layout, cfg.n_groups, cfg.split_fractions, cfg.order_kind, seed=order_seed
    )
    params = pred.init_params(
        cfg.backbone, c_h, t_len, cfg.hyper, seed=cfg.seed, input_mode=cfg.input_mode
    )
    opt_state = OptimizerState(kind=cfg.optimizer_kind)

    needs_cache = cfg.scheme in ("ss", "rollout")
    cache = None
    log_rows = []
    for epoch in range(cfg.epochs):
        step_losses = train_epoch(
            params, train_arrays, cfg, schedule, layout, cache, epoch, opt_state
        )
        if needs_cache:
            cache = refresh_cache(params, train_arrays, layout, schedule, epoch_tag=epoch)
        row = {"epoch": epoch}
        for g in range(schedule.n_groups):
            row[f"loss_g{g + 1}"] = float(step_losses[g])
        row["loss_total"] = float(step_losses.sum())
        row["val_nmse"] = (
            _validation_nmse(params, val_arrays, layout, schedule)
            if val_arrays is not None
            else ""
        )
        log_rows.append(row)

    artifact = ModelArtifact(
        params=params,
        stats=stats,
        schedule=schedule,
        layout=layout,
        sample_rate_hz=rate,
        config_echo=cfg.echo(),
    )
    return artifact, log_rows


def log_to_csv_lines(log_rows) -> list[str]:
    if not log_rows:
        return []
    header = list(log_rows[0].keys())
    lines = [",".join(header)]
    for row in log_rows:
        vals = []
        for key in header:
            v = row[key]
            vals.append(repr(v) if isinstance(v, float) else str(v))
        lines.append(",".join(vals))
    return lines
