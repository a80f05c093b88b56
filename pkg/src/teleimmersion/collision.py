"""Axis-aligned bounding boxes, closed-interval overlap and Sweep and Prune."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from .errors import EmptyGeometryError, FormatError, IdentifierError

DEFAULT_JOINT_PADDING = 0.03


@dataclass(frozen=True)
class Aabb:
    min: tuple[float, float, float]
    max: tuple[float, float, float]
    body_id: int = 0

    def __post_init__(self):
        lo = tuple(float(c) for c in self.min)
        hi = tuple(float(c) for c in self.max)
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError("AABB corners must be 3-vectors")
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"AABB min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def translated(self, offset) -> "Aabb":
        o = [float(c) for c in offset]
        return Aabb(
            tuple(a + d for a, d in zip(self.min, o)),
            tuple(b + d for b, d in zip(self.max, o)),
            self.body_id,
        )

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.min) + np.asarray(self.max))

    @property
    def half_extents(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.max) - np.asarray(self.min))


@dataclass(frozen=True)
class Joint:
    label: str
    position: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(c) for c in self.position))


@dataclass(frozen=True)
class BodyModel:
    body_id: int
    client_id: int
    joints: tuple[Joint, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(self.joints))
        if not all(np.all(np.isfinite(j.position)) for j in self.joints):
            raise ValueError("joint coordinates must be finite")

    def positions(self) -> np.ndarray:
        return np.array([j.position for j in self.joints], dtype=np.float64).reshape(-1, 3)


class CollisionEvent(NamedTuple):
    body_id: int
    joint_index: int
    joint_label: str
    other_is_body: bool
    other_id: int

    def sort_key(self):
        return (self.body_id, self.joint_index, self.other_id, self.other_is_body)


def aabb_of_points(points, padding: float = 0.0, body_id: int = 0) -> Aabb:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyGeometryError("cannot bound an empty point set")
    if padding < 0:
        raise ValueError("padding must be non-negative")
    return Aabb(tuple(pts.min(axis=0) - padding), tuple(pts.max(axis=0) + padding), body_id)


def overlap(a: Aabb, b: Aabb) -> bool:
    """Closed-interval overlap on x, y and z.

    Boxes overlap exactly when their projections onto every coordinate axis
    (and hence every coordinate plane) overlap.
    """
    return all(a.min[k] <= b.max[k] and b.min[k] <= a.max[k] for k in range(3))


def brute_force_pairs(boxes: Sequence[Aabb]) -> set[tuple[int, int]]:
    """O(n^2) reference: every overlapping ``(id_a, id_b)`` with ``id_a < id_b``."""
    out = set()
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if overlap(boxes[i], boxes[j]):
                a, b = boxes[i].body_id, boxes[j].body_id
                out.add((a, b) if a < b else (b, a))
    return out


@dataclass
class SweepState:
    """Per-axis endpoint orderings kept across updates.

    ``order[k]`` is a permutation over the ``2n`` endpoints (index ``i`` is
    box ``i``'s min, ``n + i`` its max) that sorts them along axis ``k``.
    Reusing the previous permutation means a scene that moved a little is
    already almost sorted, so the re-sort does close to linear work.
    """

    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    order: list[np.ndarray] = field(default_factory=list)
    pairs: set[tuple[int, int]] = field(default_factory=set)
    resorts: int = 0

    def endpoints(self, axis: int, lo: np.ndarray, hi: np.ndarray) -> list[tuple[float, int, bool]]:
        """Sorted ``(value, box id, is_min)`` list for one axis."""
        n = len(self.ids)
        vals = np.concatenate((lo[:, axis], hi[:, axis]))
        return [(float(vals[e]), int(self.ids[e % n]), bool(e < n)) for e in self.order[axis]]


@dataclass(eq=False)
class BoxSet:
    """Array form of a list of AABBs: ``lo``/``hi`` are ``(n, 3)``, ``ids`` ``(n,)``."""

    lo: np.ndarray
    hi: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(-1, 3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(-1, 3)
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if not (len(self.lo) == len(self.hi) == len(self.ids)):
            raise ValueError("lo, hi and ids must have the same length")
        if np.any(self.lo > self.hi):
            raise ValueError("box min exceeds max")

    @classmethod
    def from_boxes(cls, boxes: Sequence[Aabb]) -> "BoxSet":
        n = len(boxes)
        return cls(
            np.array([b.min for b in boxes], dtype=np.float64).reshape(n, 3),
            np.array([b.max for b in boxes], dtype=np.float64).reshape(n, 3),
            np.fromiter((b.body_id for b in boxes), dtype=np.int64, count=n),
        )

    def __len__(self):
        return len(self.ids)

    def to_boxes(self) -> list[Aabb]:
        return [Aabb(tuple(l), tuple(h), int(i)) for l, h, i in zip(self.lo, self.hi, self.ids)]


def _coherent_sort(prev: Optional[np.ndarray], values: np.ndarray, is_max: np.ndarray) -> np.ndarray:
    """Order endpoints by value (mins before maxes on ties), starting from ``prev``."""
    if prev is None or len(prev) != len(values):
        return np.lexsort((is_max, values))
    v = values[prev]
    m = is_max[prev]
    dv = np.diff(v)
    if np.all((dv > 0) | ((dv == 0) & (np.diff(m.astype(np.int8)) >= 0))):
        return prev
    # stable sort of an almost-sorted key is run-adaptive (timsort)
    step = np.lexsort((m, v))
    return prev[step]


def sweep_prune_update(
    state: SweepState,
    boxes: Union[Sequence[Aabb], BoxSet],
    active: Optional[np.ndarray] = None,
) -> set[tuple[int, int]]:
    """Re-sort the endpoint lists and return every overlapping id pair ``(i, j)``, ``i < j``.

    With a boolean ``active`` mask only pairs involving at least one active
    box are reported, which keeps few moving boxes against a large static
    scene cheap.
    """
    if not isinstance(boxes, BoxSet):
        boxes = BoxSet.from_boxes(boxes)
    n = len(boxes)
    ids, lo, hi = boxes.ids, boxes.lo, boxes.hi
    if len(np.unique(ids)) != n:
        raise IdentifierError("box ids must be unique")
    same_boxes = len(state.ids) == n and np.array_equal(state.ids, ids)
    is_max = np.concatenate((np.zeros(n, dtype=bool), np.ones(n, dtype=bool)))
    orders = []
    for k in range(3):
        prev = state.order[k] if same_boxes and len(state.order) == 3 else None
        orders.append(_coherent_sort(prev, np.concatenate((lo[:, k], hi[:, k])), is_max))
    state.ids = ids
    state.order = orders
    state.resorts += 1
    if active is not None:
        active = np.asarray(active, dtype=bool).reshape(-1)
        if active.shape != (n,):
            raise ValueError("active mask must have one entry per box")
    state.pairs = _sweep(ids, lo, hi, orders, active)
    return set(state.pairs)


def _sweep(ids, lo, hi, orders, active=None) -> set[tuple[int, int]]:
    n = len(ids)
    if n < 2:
        return set()
    # sweep the axis with the largest spread of box centres; prune with the other two
    axis = int(np.argmax((lo + hi).std(axis=0)))
    order = orders[axis]
    mins_sorted = order[order < n]  # box indices by min value (ties: stable)
    starts = lo[mins_sorted, axis]
    if active is not None:
        return _sweep_active(ids, lo, hi, axis, mins_sorted, starts, active)
    ends = hi[mins_sorted, axis]
    # for the box at sweep position p, candidates are later boxes whose min <= its max
    stop = np.searchsorted(starts, ends, side="right")
    counts = stop - np.arange(n) - 1
    counts = np.maximum(counts, 0)
    total = int(counts.sum())
    if total == 0:
        return set()
    first = np.repeat(np.arange(n), counts)
    offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    second = first + 1 + offsets
    a = mins_sorted[first]
    b = mins_sorted[second]
    keep = np.ones(total, dtype=bool)
    for k in range(3):
        if k == axis:
            continue
        keep &= (lo[a, k] <= hi[b, k]) & (lo[b, k] <= hi[a, k])
    ia, ib = ids[a[keep]], ids[b[keep]]
    pa, pb = np.minimum(ia, ib), np.maximum(ia, ib)
    return set(zip(pa.tolist(), pb.tolist()))


def _sweep_active(ids, lo, hi, axis, mins_sorted, starts, active) -> set[tuple[int, int]]:
    act = np.flatnonzero(active)
    # every box whose min does not exceed an active box's max is an axis candidate
    counts = np.searchsorted(starts, hi[act, axis], side="right")
    total = int(counts.sum())
    if total == 0:
        return set()
    first = np.repeat(act, counts)
    offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    other = mins_sorted[offsets]
    keep = (other != first) & (hi[other, axis] >= lo[first, axis])
    for k in range(3):
        if k != axis:
            keep &= (lo[first, k] <= hi[other, k]) & (lo[other, k] <= hi[first, k])
    ia, ib = ids[first[keep]], ids[other[keep]]
    pa, pb = np.minimum(ia, ib), np.maximum(ia, ib)
    return set(zip(pa.tolist(), pb.tolist()))


def detect_interactions(
    bodies: Sequence[BodyModel],
    scene: Union[Sequence[Aabb], BoxSet],
    joint_padding: float = DEFAULT_JOINT_PADDING,
    state: Optional[SweepState] = None,
) -> list[CollisionEvent]:
    """Joint-vs-scene and joint-vs-other-body contacts, sorted by
    ``(body_id, joint index, other id)``.

    Each joint becomes a cube of half-side ``joint_padding``. A joint touching
    several joints of one other body yields a single event for that body.
    Scene box ids are reported as ``other_id``; pass a prebuilt
    :class:`BoxSet` to skip per-call conversion of large static scenes.
    """
    if joint_padding < 0:
        raise ValueError("padding must be non-negative")
    if not isinstance(scene, BoxSet):
        scene = BoxSet.from_boxes(scene)
    ns = len(scene)
    owners = [(b.body_id, j, jt.label) for b in bodies for j, jt in enumerate(b.joints)]
    if not owners:
        return []
    jp = np.concatenate([b.positions() for b in bodies])
    lo = np.concatenate((scene.lo, jp - joint_padding))
    hi = np.concatenate((scene.hi, jp + joint_padding))
    boxes = BoxSet(lo, hi, np.arange(ns + len(owners)))
    active = np.arange(ns + len(owners)) >= ns
    pairs = sweep_prune_update(state if state is not None else SweepState(), boxes, active)
    events = set()
    for a, b in pairs:
        if b < ns:
            continue  # scene-scene
        body_b, jb, label_b = owners[b - ns]
        if a < ns:
            events.add(CollisionEvent(body_b, jb, label_b, False, int(scene.ids[a])))
            continue
        body_a, ja, label_a = owners[a - ns]
        if body_a != body_b:
            events.add(CollisionEvent(body_a, ja, label_a, True, body_b))
            events.add(CollisionEvent(body_b, jb, label_b, True, body_a))
    return sorted(events, key=CollisionEvent.sort_key)


def load_boxes(path) -> list[Aabb]:
    """Text scene: one ``id min_x min_y min_z max_x max_y max_z`` box per line."""
    try:
        text = Path(path).read_text(encoding="ascii")
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"cannot read scene {path}: {exc}") from exc
    boxes = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 7:
            raise FormatError(f"{path}:{n}: expected 7 fields, got {len(parts)}")
        try:
            bid = int(parts[0])
            vals = [float(p) for p in parts[1:]]
            if not all(np.isfinite(vals)):
                raise ValueError("non-finite coordinate")
            boxes.append(Aabb(tuple(vals[:3]), tuple(vals[3:]), bid))
        except ValueError as exc:
            raise FormatError(f"{path}:{n}: {exc}") from exc
    if len({b.body_id for b in boxes}) != len(boxes):
        raise FormatError(f"{path}: duplicate box ids")
    return boxes
