"""Group-wise autoregressive reconstruction engine.

State evolves over G steps: anchors are placed once and never overwritten,
each step's context zeroes everything outside the visible set, the predictor
fills the current group, and the visible set grows by that group.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import predictor as pred
from .montage import GroupSchedule, LayoutSpec
from .signals import SignalBlock


@dataclass(frozen=True)
class RolloutState:
    """Assembled full-montage tensor plus the mask for the *next* step.

    ``assembled`` may carry stale values on hidden rows between steps; they
    are zeroed when the context is formed, never fed to the predictor.
    """

    assembled: np.ndarray  # (C_H, T)
    anchors: np.ndarray  # (C_L, T), pristine anchor rows
    visible: np.ndarray  # (C_H,) float 0/1
    step: int
    layout: LayoutSpec
    schedule: GroupSchedule
    sample_rate_hz: float = 1.0

    @property
    def n_steps(self) -> int:
        return self.schedule.n_groups


def init_state(x_l: SignalBlock, layout: LayoutSpec, schedule: GroupSchedule) -> RolloutState:
    """Place anchors at their canonical rows, zero-fill the rest."""
    obs = list(layout.observed)
    if x_l.c != len(obs):
        raise ValueError(f"anchor block has {x_l.c} rows, layout expects {len(obs)}")
    miss = schedule.all_missing()
    c_h = len(obs) + len(miss)
    if set(obs) | set(miss) != set(range(c_h)):
        raise ValueError("layout and schedule do not cover a full montage")
    assembled = np.zeros((c_h, x_l.t))
    assembled[obs] = x_l.data
    visible = np.zeros(c_h)
    visible[obs] = 1.0
    return RolloutState(
        assembled=assembled,
        anchors=x_l.data.copy(),
        visible=visible,
        step=0,
        layout=layout,
        schedule=schedule,
        sample_rate_hz=x_l.sample_rate_hz,
    )


def make_context(state: RolloutState) -> SignalBlock:
    """Zero every channel outside the current visible set."""
    if state.step >= state.n_steps:
        raise ValueError(f"rollout already finished ({state.n_steps} steps)")
    return SignalBlock(
        data=state.assembled * state.visible[:, None],
        sample_rate_hz=state.sample_rate_hz,
    )


def merge_step(state: RolloutState, estimate: SignalBlock | np.ndarray) -> RolloutState:
    """Write the predictor output into the current target group only."""
    est = estimate.data if isinstance(estimate, SignalBlock) else np.asarray(estimate)
    if est.shape != state.assembled.shape:
        raise ValueError(f"estimate shape {est.shape} != {state.assembled.shape}")
    if state.step >= state.n_steps:
        raise ValueError(f"rollout already finished ({state.n_steps} steps)")
    group = list(state.schedule.groups[state.step])
    assembled = state.assembled.copy()
    assembled[group] = est[group]
    assembled[list(state.layout.observed)] = state.anchors  # anchors stay exact
    visible = state.visible.copy()
    visible[group] = 1.0
    return RolloutState(
        assembled=assembled,
        anchors=state.anchors,
        visible=visible,
        step=state.step + 1,
        layout=state.layout,
        schedule=state.schedule,
        sample_rate_hz=state.sample_rate_hz,
    )


def run_inference(
    params,
    x_l: SignalBlock,
    layout: LayoutSpec,
    schedule: GroupSchedule,
    forward_fn=None,
) -> SignalBlock:
    """Sequential G-step rollout conditioned only on anchors and own output.

    ``forward_fn(params, context_block, visible_mask) -> (C_H,T) array`` may
    replace the predictor forward (used for stub-based testing).
    """
    if forward_fn is None:
        forward_fn = lambda p, ctx, m: pred.forward(p, ctx, m).estimate.data
    state = init_state(x_l, layout, schedule)
    for _ in range(schedule.n_groups):
        ctx = make_context(state)
        est = forward_fn(params, ctx, state.visible)
        state = merge_step(state, est)
    return SignalBlock(data=state.assembled, sample_rate_hz=x_l.sample_rate_hz)


def run_inference_batch(
    params,
    anchors: np.ndarray,
    layout: LayoutSpec,
    schedule: GroupSchedule,
    chunk: int = 64,
    collect_groups: bool = False,
):
    """Vectorized rollout over many samples sharing one layout/schedule.

    anchors is (B, C_L, T); returns (B, C_H, T). With ``collect_groups`` the
    per-step predicted rows are returned too, as one (B, |U_g|, T) array per
    group (this is what the scheduled-sampling cache stores).
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    b, c_l, t = anchors.shape
    obs = list(layout.observed)
    if c_l != len(obs):
        raise ValueError(f"anchor batch has {c_l} rows, layout expects {len(obs)}")
    c_h = params.c_h
    out = np.zeros((b, c_h, t))
    group_rows = [np.zeros((b, len(g), t)) for g in schedule.groups] if collect_groups else None
    for lo in range(0, b, chunk):
        hi = min(lo + chunk, b)
        assembled = np.zeros((hi - lo, c_h, t))
        assembled[:, obs, :] = anchors[lo:hi]
        visible = np.zeros(c_h)
        visible[obs] = 1.0
        for g, group in enumerate(schedule.groups):
            ctx = assembled * visible[None, :, None]
            masks = np.repeat(visible[None, :], hi - lo, axis=0)
            est, _ = pred.forward_many(params, ctx, masks)
            grp = list(group)
            assembled[:, grp, :] = est[:, grp, :]
            assembled[:, obs, :] = anchors[lo:hi]
            visible = visible.copy()
            visible[grp] = 1.0
            if collect_groups:
                group_rows[g][lo:hi] = est[:, grp, :]
        out[lo:hi] = assembled
    if collect_groups:
        return out, group_rows
    return out


def run_oneshot_batch(params, anchors: np.ndarray, layout: LayoutSpec, chunk: int = 64):
    """Vectorized single-pass reconstruction over many samples."""
    anchors = np.asarray(anchors, dtype=np.float64)
    b, c_l, t = anchors.shape
    obs = list(layout.observed)
    if c_l != len(obs):
        raise ValueError(f"anchor batch has {c_l} rows, layout expects {len(obs)}")
    c_h = params.c_h
    out = np.zeros((b, c_h, t))
    visible = np.zeros(c_h)
    visible[obs] = 1.0
    for lo in range(0, b, chunk):
        hi = min(lo + chunk, b)
        ctx = np.zeros((hi - lo, c_h, t))
        ctx[:, obs, :] = anchors[lo:hi]
        masks = np.repeat(visible[None, :], hi - lo, axis=0)
        est, _ = pred.forward_many(params, ctx, masks)
        est = est.copy()
        est[:, obs, :] = anchors[lo:hi]
        out[lo:hi] = est
    return out


def run_oneshot(params, x_l: SignalBlock, layout: LayoutSpec, forward_fn=None) -> SignalBlock:
    """Single forward pass on the anchors-only context; all missing channels
    are taken from that one estimate."""
    if forward_fn is None:
        forward_fn = lambda p, ctx, m: pred.forward(p, ctx, m).estimate.data
    obs = list(layout.observed)
    if x_l.c != len(obs):
        raise ValueError(f"anchor block has {x_l.c} rows, layout expects {len(obs)}")
    c_h = params.c_h
    assembled = np.zeros((c_h, x_l.t))
    assembled[obs] = x_l.data
    visible = np.zeros(c_h)
    visible[obs] = 1.0
    ctx = SignalBlock(data=assembled, sample_rate_hz=x_l.sample_rate_hz)
    est = forward_fn(params, ctx, visible)
    out = np.asarray(est).copy()
    out[obs] = x_l.data
    return SignalBlock(data=out, sample_rate_hz=x_l.sample_rate_hz)
