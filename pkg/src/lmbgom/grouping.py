"""Track/observation partitioning for the parallel group update."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rfs import Label, LmbDensity, Track

MODES = ("tbd-distance", "acoustic-radius", "vor-intersection")


@dataclass(frozen=True)
class GroupingConfig:
    mode: str = "tbd-distance"
    confidence: float = 0.99
    tbd_threshold: float = 10.0
    acoustic_radius: float = 45.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"grouping mode must be one of {MODES}")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.tbd_threshold <= 0 or self.acoustic_radius <= 0:
            raise ValueError("grouping thresholds must be positive")


@dataclass(frozen=True, eq=False)
class Group:
    labels: tuple[Label, ...]
    observations: np.ndarray


@dataclass(frozen=True, eq=False)
class TrackPartition:
    groups: tuple[Group, ...]
    residual: np.ndarray

    def describe(self) -> list[dict]:
        """Plain-data dump: group id, labels, and observation index ranges."""
        return [
            {"group": i, "labels": [l.as_list() for l in g.labels], "observations": index_ranges(g.observations)}
            for i, g in enumerate(self.groups)
        ]


def index_ranges(idx) -> list[list[int]]:
    """Compress sorted indices into inclusive ``[start, stop]`` runs."""
    idx = np.asarray(idx, dtype=int)
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) != 1)
    starts = np.r_[idx[0], idx[breaks + 1]]
    stops = np.r_[idx[breaks], idx[-1]]
    return [[int(a), int(b)] for a, b in zip(starts, stops)]


def weighted_quantile(values, weights, q) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    v = np.asarray(values)[order]
    cdf = np.cumsum(np.asarray(weights)[order])
    cdf /= cdf[-1]
    return v[np.minimum(np.searchsorted(cdf, q, side="left"), len(v) - 1)]


def hdr_box(track: Track, confidence: float) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned position box holding the central ``confidence`` mass per axis."""
    q = np.array([(1.0 - confidence) / 2.0, (1.0 + confidence) / 2.0])
    lo, hi = np.empty(2), np.empty(2)
    for axis in range(2):
        lo[axis], hi[axis] = weighted_quantile(track.states[:, axis], track.weights, q)
    return lo, hi


def track_vor(track: Track, sensor, confidence: float = 0.99, radius: float | None = None) -> np.ndarray:
    lo, hi = hdr_box(track, confidence)
    pos = track.states[:, :2]
    inside = np.all((pos >= lo) & (pos <= hi), axis=1)
    return sensor.vor(pos[inside], radius)


def mean_position(track: Track) -> np.ndarray:
    return track.weights @ track.states[:, :2]


def coupled(a: Track, b: Track, config: GroupingConfig, sensor=None) -> bool:
    if config.mode == "tbd-distance":
        return bool(np.linalg.norm(mean_position(a) - mean_position(b)) <= config.tbd_threshold)
    if config.mode == "acoustic-radius":
        beta = config.acoustic_radius
        ra = sensor.vor(mean_position(a), beta)
        rb = sensor.vor(mean_position(b), beta)
        return bool(np.intersect1d(ra, rb).size)
    ra = track_vor(a, sensor, config.confidence, config.acoustic_radius)
    rb = track_vor(b, sensor, config.confidence, config.acoustic_radius)
    return bool(np.intersect1d(ra, rb).size)


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i, j):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def _components(uf: _UnionFind, n: int) -> list[list[int]]:
    comps: dict[int, list[int]] = {}
    for i in range(n):
        comps.setdefault(uf.find(i), []).append(i)
    return sorted(comps.values())


def partition_tracks(lmb: LmbDensity, sensor, frame, config: GroupingConfig, labels=None) -> TrackPartition:
    """Connected components of the coupling graph plus their observation subsets.

    Components whose observation regions overlap are merged until the
    subsets are pairwise disjoint.
    """
    n_obs = frame if isinstance(frame, (int, np.integer)) else len(frame)
    labels = tuple(sorted(lmb.tracks if labels is None else labels))
    all_obs = np.arange(n_obs)
    if not labels:
        return TrackPartition((), all_obs)
    tracks = [lmb.tracks[l] for l in labels]
    n = len(tracks)
    uf = _UnionFind(n)
    radius = config.acoustic_radius
    if config.mode == "vor-intersection":
        regions = [track_vor(t, sensor, config.confidence, radius) for t in tracks]
        for i in range(n):
            for j in range(i + 1, n):
                if np.intersect1d(regions[i], regions[j]).size:
                    uf.union(i, j)
    else:
        for i in range(n):
            for j in range(i + 1, n):
                if uf.find(i) != uf.find(j) and coupled(tracks[i], tracks[j], config, sensor):
                    uf.union(i, j)
        regions = [track_vor(t, sensor, config.confidence, radius) for t in tracks]
    while True:
        comps = _components(uf, n)
        obs = [np.unique(np.concatenate([regions[i] for i in c])) for c in comps]
        merged = False
        for a in range(len(comps)):
            for b in range(a + 1, len(comps)):
                if np.intersect1d(obs[a], obs[b]).size:
                    uf.union(comps[a][0], comps[b][0])
                    merged = True
        if not merged:
            break
    groups = tuple(Group(tuple(labels[i] for i in c), o) for c, o in zip(comps, obs))
    used = np.unique(np.concatenate([g.observations for g in groups])) if groups else np.zeros(0, int)
    return TrackPartition(groups, np.setdiff1d(all_obs, used))
