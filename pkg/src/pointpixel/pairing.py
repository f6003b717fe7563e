"""Anchor/positive/disturbed-negative batches with a progressive hardness bound.

A disturbed negative re-pairs the geometry of point k (view 2) with the color
of another point d(k). Its hardness is the reciprocal view-1 distance between
k and d(k); d(k) is drawn uniformly among points whose hardness exceeds the
current bound, i.e. points strictly inside radius 1/bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ContractError, DegeneratePairError

MIN_DISTANCE = 1e-9
HARDNESS_MODES = ("progressive", "easy", "hard")


def hardness(p, q) -> float:
    d = float(np.linalg.norm(np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64)))
    if d < MIN_DISTANCE:
        raise DegeneratePairError(f"points are {d:g} m apart; hardness undefined")
    return 1.0 / d


@dataclass(frozen=True)
class HardnessSchedule:
    h0: float
    slope: float
    epsilon: float

    def __post_init__(self):
        if not (self.h0 > 0 and self.slope >= 0 and self.epsilon >= self.h0):
            raise ConfigError(f"invalid hardness schedule {self}")
        if not all(math.isfinite(v) for v in (self.h0, self.slope, self.epsilon)):
            raise ConfigError("hardness schedule values must be finite")

    @classmethod
    def default(cls, extent: float, total_iters: int) -> "HardnessSchedule":
        h0, eps = 1.0 / extent, 20.0 / extent
        span = 0.8 * max(total_iters, 1)
        return cls(h0, (eps - h0) / span, eps)

    @classmethod
    def for_mode(cls, mode: str, base: "HardnessSchedule") -> "HardnessSchedule":
        """Easy pins the bound at h(0), Hard at epsilon, Progressive keeps the ramp."""
        if mode == "progressive":
            return base
        if mode == "easy":
            return cls(base.h0, 0.0, base.epsilon)
        if mode == "hard":
            return cls(base.epsilon, 0.0, base.epsilon)
        raise ConfigError(f"unknown hardness mode {mode!r}")

    def crossing_iteration(self) -> int | None:
        """First iteration at which the linear ramp reaches epsilon (None if never)."""
        h0, slope, eps = Fraction(self.h0), Fraction(self.slope), Fraction(self.epsilon)
        if h0 >= eps:
            return 0
        if slope == 0:
            return None
        return math.ceil((eps - h0) / slope)


def hardness_bound(k: int, s: HardnessSchedule) -> float:
    if k < 0:
        raise ContractError("iteration must be >= 0")
    # exact rational evaluation, rounded once
    ramp = Fraction(s.h0) + Fraction(s.slope) * k
    return float(min(ramp, Fraction(s.epsilon)))


class SpatialGrid:
    """Uniform hash grid for strict-radius queries over a fixed point set."""

    def __init__(self, points: np.ndarray, cell: float):
        if not cell > 0:
            raise ContractError("grid cell size must be positive")
        self.points = np.asarray(points, dtype=np.float64)
        self.cell = float(cell)
        keys = np.floor(self.points / self.cell).astype(np.int64)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        order = np.argsort(inverse.ravel(), kind="stable")
        bounds = np.searchsorted(inverse.ravel()[order], np.arange(len(uniq) + 1))
        self.cell_keys = uniq
        self._members = [order[bounds[c]:bounds[c + 1]] for c in range(len(uniq))]
        self._lookup = {tuple(k): c for c, k in enumerate(uniq.tolist())}

    def query(self, center: np.ndarray, radius: float) -> np.ndarray:
        """Sorted indices of points with distance to ``center`` strictly below ``radius``."""
        key = np.floor(np.asarray(center) / self.cell).astype(np.int64)
        reach = int(math.ceil(radius / self.cell))
        if reach <= 1:
            cells = []
            for dx in range(-reach, reach + 1):
                for dy in range(-reach, reach + 1):
                    for dz in range(-reach, reach + 1):
                        c = self._lookup.get((key[0] + dx, key[1] + dy, key[2] + dz))
                        if c is not None:
                            cells.append(c)
        else:
            near = np.all(np.abs(self.cell_keys - key) <= reach, axis=1)
            cells = np.flatnonzero(near).tolist()
        if not cells:
            return np.empty(0, dtype=np.int64)
        idx = np.concatenate([self._members[c] for c in cells])
        d = np.linalg.norm(self.points[idx] - center, axis=1)
        return np.sort(idx[d < radius])


class Disturbance(NamedTuple):
    j: int
    fallback: bool


def disturbance_candidates(i: int, points1: np.ndarray, bound: float, grid: SpatialGrid | None = None) -> np.ndarray:
    radius = 1.0 / bound
    if grid is None:
        idx = np.flatnonzero(np.linalg.norm(points1 - points1[i], axis=1) < radius)
    else:
        idx = grid.query(points1[i], radius)
    d = np.linalg.norm(points1[idx] - points1[i], axis=1)
    # coincident points have no defined hardness
    return idx[(idx != i) & (d >= MIN_DISTANCE)]


def nearest_neighbor(i: int, points1: np.ndarray) -> int:
    d = np.linalg.norm(points1 - points1[i], axis=1)
    d[i] = np.inf
    d[d < MIN_DISTANCE] = np.inf
    j = int(np.argmin(d))  # first minimum -> lowest index on ties
    if not np.isfinite(d[j]):
        raise DegeneratePairError(f"point {i} has no neighbor at a positive distance")
    return j


def sample_disturbance(i: int, points1: np.ndarray, bound: float, rng: np.random.Generator,
                       grid: SpatialGrid | None = None) -> Disturbance:
    if points1.shape[0] < 2:
        raise ContractError("need at least 2 points to disturb a pairing")
    if not bound > 0:
        raise ContractError("hardness bound must be positive")
    cand = disturbance_candidates(i, points1, bound, grid)
    if len(cand) == 0:
        return Disturbance(nearest_neighbor(i, points1), True)
    return Disturbance(int(cand[rng.integers(len(cand))]), False)


@dataclass(frozen=True, eq=False)
class PairBatch:
    anchor_idx: np.ndarray  # view-1 point indices
    positive_idx: np.ndarray  # view-2 point indices matched to the anchors
    disturb_idx: np.ndarray  # d(k): view-2 point whose color is spliced onto positive k
    iteration: int
    bound: float
    fallback: np.ndarray  # True where the empty-candidate fallback fired

    @property
    def size(self) -> int:
        return len(self.anchor_idx)

    @property
    def n_fallbacks(self) -> int:
        return int(self.fallback.sum())

    def same_as(self, other: "PairBatch") -> bool:
        return (self.iteration == other.iteration and self.bound == other.bound
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("anchor_idx", "positive_idx", "disturb_idx", "fallback")))


def build_pair_batch(points1: np.ndarray, corr: np.ndarray, k: int, batch_size: int,
                     schedule: HardnessSchedule, rng: np.random.Generator) -> PairBatch:
    """Sample a batch from the correspondence set ``corr`` (M x 2 point indices).

    Disturbances are drawn among corresponded points only, using view-1
    coordinates ``points1``; one d(k) per batch element.
    """
    corr = np.asarray(corr, dtype=np.int64)
    if batch_size < 2:
        raise ContractError("batch size must be >= 2")
    if batch_size > len(corr):
        raise ContractError(f"batch size {batch_size} exceeds {len(corr)} correspondences")
    bound = hardness_bound(k, schedule)
    sel = rng.choice(len(corr), size=batch_size, replace=False)
    local_pts = points1[corr[:, 0]]
    grid = SpatialGrid(local_pts, 1.0 / schedule.epsilon)
    picks = [sample_disturbance(int(s), local_pts, bound, rng, grid) for s in sel]
    disturb = corr[[p.j for p in picks], 1]
    return PairBatch(
        anchor_idx=corr[sel, 0],
        positive_idx=corr[sel, 1],
        disturb_idx=disturb,
        iteration=k,
        bound=bound,
        fallback=np.array([p.fallback for p in picks]),
    )
