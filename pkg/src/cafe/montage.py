"""Sensor geometry, observed-channel layouts, and rollout group schedules.

A montage fixes the canonical channel order and 3-d coordinates. A layout
names the observed (anchor) subset; the complement is what reconstruction
targets. The group schedule partitions the missing channels into ordered
blocks by their mean distance to the anchors.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

ORDER_KINDS = ("proximal", "distal", "random")


@dataclass(frozen=True)
class Montage:
    """Canonical sensor set: unique labels plus 3-d positions (C_H, 3)."""

    channel_ids: tuple[str, ...]
    positions: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be (C,3), got {pos.shape}")
        if len(self.channel_ids) != pos.shape[0]:
            raise ValueError("channel_ids and positions disagree in length")
        if len(set(self.channel_ids)) != len(self.channel_ids):
            raise ValueError("channel_ids must be unique")
        if pos.shape[0] < 2:
            raise ValueError("montage needs at least 2 channels")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        pos.flags.writeable = False
        object.__setattr__(self, "channel_ids", tuple(self.channel_ids))
        object.__setattr__(self, "positions", pos)

    @property
    def c_h(self) -> int:
        return len(self.channel_ids)

    def content_hash(self) -> str:
        """sha256 over labels and raw coordinate bytes; identifies geometry."""
        h = hashlib.sha256()
        for label, p in zip(self.channel_ids, self.positions):
            h.update(label.encode("utf-8"))
            h.update(b"\x00")
            h.update(np.asarray(p, dtype="<f8").tobytes())
        return h.hexdigest()

    def diameter(self) -> float:
        d = self.positions[:, None, :] - self.positions[None, :, :]
        return float(np.sqrt((d * d).sum(axis=2)).max())


@dataclass(frozen=True)
class LayoutSpec:
    """Observed (anchor) channel indices, sorted, tied to a montage hash."""

    observed: tuple[int, ...]
    montage_ref: str

    def __post_init__(self):
        obs = tuple(sorted(int(i) for i in self.observed))
        if len(obs) == 0:
            raise ValueError("layout needs at least one observed channel")
        if len(set(obs)) != len(obs):
            raise ValueError("observed indices must be distinct")
        if obs[0] < 0:
            raise ValueError("observed indices must be nonnegative")
        object.__setattr__(self, "observed", obs)


def make_layout(montage: Montage, observed) -> LayoutSpec:
    obs = tuple(sorted(int(i) for i in observed))
    if obs and obs[-1] >= montage.c_h:
        raise ValueError(f"observed index {obs[-1]} out of range for C_H={montage.c_h}")
    if len(obs) >= montage.c_h:
        raise ValueError("layout must leave at least one channel missing")
    return LayoutSpec(observed=obs, montage_ref=montage.content_hash())


def missing_channels(montage: Montage, layout: LayoutSpec) -> tuple[int, ...]:
    obs = set(layout.observed)
    return tuple(i for i in range(montage.c_h) if i not in obs)


@dataclass(frozen=True)
class GroupSchedule:
    """Ordered disjoint partition of the missing channels into rollout groups."""

    groups: tuple[tuple[int, ...], ...]
    order_kind: str
    split_fractions: tuple[Fraction, ...]
    order_seed: int | None = None

    def __post_init__(self):
        if self.order_kind not in ORDER_KINDS:
            raise ValueError(f"order_kind must be one of {ORDER_KINDS}")
        flat = [i for grp in self.groups for i in grp]
        if len(set(flat)) != len(flat):
            raise ValueError("groups must be pairwise disjoint")
        if any(len(grp) == 0 for grp in self.groups):
            raise ValueError("every group must be non-empty")
        fr = tuple(self.split_fractions)
        if len(fr) != len(self.groups) - 1:
            raise ValueError("need G-1 split fractions")
        if any(not (0 < f < 1) for f in fr):
            raise ValueError("split fractions must lie in (0,1)")
        if any(fr[i] >= fr[i + 1] for i in range(len(fr) - 1)):
            raise ValueError("split fractions must be strictly increasing")
        object.__setattr__(self, "groups", tuple(tuple(int(i) for i in g) for g in self.groups))
        object.__setattr__(self, "split_fractions", fr)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def all_missing(self) -> tuple[int, ...]:
        return tuple(sorted(i for grp in self.groups for i in grp))


def as_fraction(x) -> Fraction:
    """Coerce to an exact rational; floats snap to the nearest small ratio."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, str):
        return Fraction(x)
    if isinstance(x, float):
        return Fraction(x).limit_denominator(10**9)
    raise TypeError(f"cannot interpret {x!r} as a fraction")


def anchor_distance(montage: Montage, layout: LayoutSpec, u: int) -> float:
    """Mean Euclidean distance from missing channel ``u`` to all anchors."""
    if not 0 <= u < montage.c_h:
        raise ValueError(f"channel index {u} out of range for C_H={montage.c_h}")
    if u in layout.observed:
        raise ValueError(f"channel {u} is observed, not missing")
    anchors = montage.positions[list(layout.observed)]
    d = anchors - montage.positions[u][None, :]
    return float(np.sqrt((d * d).sum(axis=1)).sum() / len(layout.observed))


def _ordered_missing(montage, layout, order_kind, seed):
    miss = list(missing_channels(montage, layout))
    if order_kind == "random":
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(miss))
        return [miss[i] for i in perm]
    dist = {u: anchor_distance(montage, layout, u) for u in miss}
    ordered = sorted(miss, key=lambda u: (dist[u], u))
    if order_kind == "distal":
        ordered = ordered[::-1]
    return ordered


def _cut_boundaries(fractions, n, g):
    bounds = [int((f * n).__floor__()) for f in fractions]
    # Guarantee non-empty groups: push boundaries right as little as possible,
    # clamping from the right so the tail groups keep at least one channel.
    fixed = []
    prev = 0
    for i, b in enumerate(bounds):
        b = max(b, prev + 1)
        b = min(b, n - (g - 1 - i))
        fixed.append(b)
        prev = b
    return [0] + fixed + [n]


def build_schedule(
    montage: Montage,
    layout: LayoutSpec,
    g: int,
    split_fractions,
    order_kind: str = "proximal",
    seed: int | None = None,
) -> GroupSchedule:
    """Distance-sort the missing channels and cut into G consecutive groups.

    Sorting is ascending mean anchor distance for the proximal order (ties
    broken by ascending channel index), the reverse of that sequence for the
    distal order, or a seeded uniform shuffle. Boundary indices are
    floor(beta_g * N) over exact rationals.
    """
    if order_kind not in ORDER_KINDS:
        raise ValueError(f"order_kind must be one of {ORDER_KINDS}")
    if g < 1:
        raise ValueError("need at least one group")
    fractions = tuple(as_fraction(f) for f in split_fractions)
    if len(fractions) != g - 1:
        raise ValueError(f"need {g - 1} split fractions for G={g}, got {len(fractions)}")
    ordered = _ordered_missing(montage, layout, order_kind, seed)
    n = len(ordered)
    if n < g:
        raise ValueError(f"cannot split {n} missing channels into {g} groups")
    bounds = _cut_boundaries(fractions, n, g)
    groups = tuple(tuple(ordered[bounds[i] : bounds[i + 1]]) for i in range(g))
    return GroupSchedule(
        groups=groups,
        order_kind=order_kind,
        split_fractions=fractions,
        order_seed=seed if order_kind == "random" else None,
    )


def schedule_from_sizes(montage, layout, sizes, order_kind="proximal", seed=None):
    """Build a schedule from explicit per-group sizes (must sum to N)."""
    miss = missing_channels(montage, layout)
    n = len(miss)
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes):
        raise ValueError("group sizes must be positive")
    if sum(sizes) != n:
        raise ValueError(f"group sizes sum to {sum(sizes)}, but {n} channels are missing")
    if len(sizes) == 1:
        return build_schedule(montage, layout, 1, (), order_kind, seed)
    cum = np.cumsum(sizes)[:-1]
    fractions = [Fraction(int(c), n) for c in cum]
    return build_schedule(montage, layout, len(sizes), fractions, order_kind, seed)


def select_ld_layout(montage: Montage, c_l: int, seed: int = 0) -> LayoutSpec:
    """Greedy farthest-point anchor selection.

    Starts from the channel nearest the geometric centroid, then repeatedly
    adds the channel maximizing its minimum distance to the chosen set. The
    seed only breaks exact ties.
    """
    if not 1 <= c_l < montage.c_h:
        raise ValueError(f"need 1 <= C_L < C_H, got C_L={c_l}, C_H={montage.c_h}")
    rng = np.random.default_rng(seed)
    pos = montage.positions
    centroid = pos.mean(axis=0)
    d0 = np.sqrt(((pos - centroid) ** 2).sum(axis=1))
    chosen = [_argmin_tiebreak(d0, rng)]
    mind = np.sqrt(((pos - pos[chosen[0]]) ** 2).sum(axis=1))
    while len(chosen) < c_l:
        mind[chosen] = -1.0  # never re-pick
        nxt = _argmax_tiebreak(mind, rng)
        chosen.append(nxt)
        dn = np.sqrt(((pos - pos[nxt]) ** 2).sum(axis=1))
        mind = np.minimum(mind, dn)
    return make_layout(montage, chosen)


def _argmin_tiebreak(values, rng):
    best = values.min()
    ties = np.flatnonzero(values == best)
    return int(ties[0] if ties.size == 1 else rng.choice(ties))


def _argmax_tiebreak(values, rng):
    best = values.max()
    ties = np.flatnonzero(values == best)
    return int(ties[0] if ties.size == 1 else rng.choice(ties))


# ---------------------------------------------------------------------------
# on-disk formats: montage CSV and layout label list


def save_montage(montage: Montage, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "x", "y", "z"])
        for label, p in zip(montage.channel_ids, montage.positions):
            writer.writerow([label, repr(float(p[0])), repr(float(p[1])), repr(float(p[2]))])


def load_montage(path) -> Montage:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty montage file") from None
        if [h.strip().lower() for h in header] != ["label", "x", "y", "z"]:
            raise ValueError(f"{path}: expected header 'label,x,y,z', got {header}")
        labels, coords = [], []
        for row in reader:
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"{path}: malformed row {row}")
            labels.append(row[0])
            coords.append([float(row[1]), float(row[2]), float(row[3])])
    return Montage(channel_ids=tuple(labels), positions=np.array(coords))


def save_layout(layout: LayoutSpec, montage: Montage, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in layout.observed:
            fh.write(montage.channel_ids[i] + "\n")


def load_layout(path, montage: Montage) -> LayoutSpec:
    label_to_idx = {lab: i for i, lab in enumerate(montage.channel_ids)}
    observed = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            lab = line.strip()
            if not lab:
                continue
            if lab not in label_to_idx:
                raise ValueError(f"{path}: unknown channel label {lab!r}")
            observed.append(label_to_idx[lab])
    return make_layout(montage, observed)
