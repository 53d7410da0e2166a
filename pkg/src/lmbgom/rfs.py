"""Labeled random-finite-set densities and the moment-matching LMB collapse.

Two representations are used throughout:

* :class:`LmoDensity` - a mixture over label sets ``I`` with weights
  ``omega(I)``, each carrying a joint particle cloud over the kinematic
  states of the labels in ``I``.
* :class:`LmbDensity` - independent tracks, each an existence probability
  plus a single-object particle cloud.

Particle clouds may also hold an enumerated finite state space (distinct
states with their probabilities as weights), in which case every operation
here is exact.
"""
from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import total_ordering
from typing import Iterable, Mapping

import numpy as np

from .smc import as_generator

MAX_ENUMERATED_LABELS = 20
WEIGHT_TOL = 1e-9
TINY_EXISTENCE = 1e-12


class TooManyLabelsError(ValueError):
    """Hypothesis enumeration requested over more labels than allowed."""


@total_ordering
@dataclass(frozen=True)
class Label:
    """Track identity: ``(birth_time, birth_index)``, ordered lexicographically."""

    birth_time: int
    birth_index: int

    def __post_init__(self):
        if self.birth_time < 0 or self.birth_index < 1:
            raise ValueError(f"invalid label {self.birth_time, self.birth_index}")

    def __lt__(self, other):
        return (self.birth_time, self.birth_index) < (other.birth_time, other.birth_index)

    def __repr__(self):
        return f"L({self.birth_time},{self.birth_index})"

    def as_list(self) -> list[int]:
        return [self.birth_time, self.birth_index]


LabelSet = tuple  # sorted tuple of Labels


def label_set(labels: Iterable[Label]) -> tuple[Label, ...]:
    out = tuple(sorted(labels))
    if len(set(out)) != len(out):
        raise ValueError("duplicate labels in label set")
    return out


@dataclass(frozen=True, eq=False)
class LabeledState:
    kinematic: tuple[float, ...]
    label: Label

    def __post_init__(self):
        kin = tuple(float(v) for v in self.kinematic)
        if not all(math.isfinite(v) for v in kin):
            raise ValueError("kinematic state must be finite")
        object.__setattr__(self, "kinematic", kin)

    @property
    def position(self) -> np.ndarray:
        return np.asarray(self.kinematic[:2])

    def __eq__(self, other):
        return isinstance(other, LabeledState) and (self.kinematic, self.label) == (
            other.kinematic,
            other.label,
        )

    def __hash__(self):
        return hash((self.kinematic, self.label))


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def _check_weights(w: np.ndarray, what: str):
    if w.ndim != 1 or w.size == 0:
        raise ValueError(f"{what}: weights must be a non-empty vector")
    if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
        raise ValueError(f"{what}: weights must be non-negative and sum to 1 (got {w.sum()!r})")


@dataclass(frozen=True, eq=False)
class JointParticleSet:
    """Weighted joint particles for one label set.

    ``states[j, k]`` is the kinematic vector of ``labels[k]`` in particle ``j``.
    """

    labels: tuple[Label, ...]
    weights: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        labels = tuple(self.labels)
        if list(labels) != sorted(labels) or len(set(labels)) != len(labels):
            raise ValueError("labels must be sorted and distinct")
        w = _frozen(self.weights)
        s = _frozen(self.states)
        if s.ndim != 3 or s.shape[0] != w.shape[0] or s.shape[1] != len(labels):
            raise ValueError(f"states shape {s.shape} inconsistent with {len(labels)} labels, {w.shape[0]} particles")
        _check_weights(w, "JointParticleSet")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "states", s)

    @classmethod
    def empty(cls, dim: int = 4) -> "JointParticleSet":
        return cls((), np.ones(1), np.zeros((1, 0, dim)))

    @property
    def n_particles(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    def marginal(self, label: Label) -> tuple[np.ndarray, np.ndarray]:
        """Project onto one label's coordinate block, keeping the weights."""
        k = self.labels.index(label)
        return self.weights, self.states[:, k, :]


@dataclass(frozen=True)
class Hypothesis:
    weight: float
    joint: JointParticleSet


@dataclass(frozen=True, eq=False)
class LmoDensity:
    """Mixture ``{I: (omega(I), P^(I))}`` over label sets."""

    hypotheses: Mapping[tuple[Label, ...], Hypothesis]

    def __post_init__(self):
        hyps = dict(self.hypotheses)
        if not hyps:
            raise ValueError("an LMO density needs at least one hypothesis")
        total = 0.0
        for key, hyp in hyps.items():
            if tuple(key) != hyp.joint.labels:
                raise ValueError(f"hypothesis key {key} does not match its joint labels")
            if not 0.0 <= hyp.weight <= 1.0 + WEIGHT_TOL:
                raise ValueError("hypothesis weight outside [0, 1]")
            total += hyp.weight
        if abs(total - 1.0) > WEIGHT_TOL:
            raise ValueError(f"hypothesis weights sum to {total}, not 1")
        object.__setattr__(self, "hypotheses", hyps)

    @classmethod
    def from_weights(cls, items: Mapping[tuple[Label, ...], tuple[float, JointParticleSet]]):
        return cls({label_set(k): Hypothesis(float(w), j) for k, (w, j) in items.items()})

    @property
    def labels(self) -> tuple[Label, ...]:
        return tuple(sorted({l for key in self.hypotheses for l in key}))

    @property
    def dim(self) -> int:
        return next(iter(self.hypotheses.values())).joint.dim

    def weight(self, labels: Iterable[Label]) -> float:
        hyp = self.hypotheses.get(label_set(labels))
        return 0.0 if hyp is None else hyp.weight


@dataclass(frozen=True, eq=False)
class Track:
    """Bernoulli component: existence probability and single-object cloud."""

    existence: float
    weights: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        r = float(self.existence)
        if not -WEIGHT_TOL <= r <= 1.0 + WEIGHT_TOL:
            raise ValueError(f"existence {r} outside [0, 1]")
        w = _frozen(self.weights)
        s = _frozen(self.states)
        if s.ndim != 2 or s.shape[0] != w.shape[0]:
            raise ValueError("track states must be (n_particles, dim)")
        _check_weights(w, "Track")
        object.__setattr__(self, "existence", min(max(r, 0.0), 1.0))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "states", s)

    @property
    def n_particles(self) -> int:
        return self.weights.shape[0]

    def mean(self) -> np.ndarray:
        return self.weights @ self.states


@dataclass(frozen=True, eq=False)
class LmbDensity:
    tracks: Mapping[Label, Track] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "tracks", dict(sorted(dict(self.tracks).items())))

    @property
    def labels(self) -> tuple[Label, ...]:
        return tuple(self.tracks)

    def __len__(self):
        return len(self.tracks)

    def existence(self, label: Label) -> float:
        return self.tracks[label].existence

    def subset(self, labels: Iterable[Label]) -> "LmbDensity":
        return LmbDensity({l: self.tracks[l] for l in labels})

    def union(self, other: "LmbDensity") -> "LmbDensity":
        overlap = set(self.tracks) & set(other.tracks)
        if overlap:
            raise ValueError(f"label collision in union: {sorted(overlap)}")
        return LmbDensity({**self.tracks, **other.tracks})


@dataclass(frozen=True, eq=False)
class LabeledPhd:
    """Per-label weighted clouds whose total weight is the label's PHD mass."""

    per_label: Mapping[Label, tuple[np.ndarray, np.ndarray]]

    def mass(self, label: Label) -> float:
        cloud = self.per_label.get(label)
        return 0.0 if cloud is None else float(cloud[0].sum())

    @property
    def labels(self) -> tuple[Label, ...]:
        return tuple(sorted(self.per_label))

    def as_discrete(self) -> dict[Label, dict[tuple, float]]:
        return {l: discrete_masses(w, s) for l, (w, s) in self.per_label.items()}


def discrete_masses(weights, states) -> dict[tuple, float]:
    """Sum weights of identical state rows; keys are the rows as tuples."""
    out: dict[tuple, float] = defaultdict(float)
    states = np.asarray(states)
    for w, s in zip(np.asarray(weights), states.reshape(states.shape[0], -1)):
        out[tuple(s.tolist())] += float(w)
    return dict(out)


def bernoulli_weights(existences: Mapping[Label, float]) -> dict[tuple[Label, ...], float]:
    """``omega(I)`` of independent Bernoullis for every subset ``I``."""
    labels = tuple(sorted(existences))
    if len(labels) > MAX_ENUMERATED_LABELS:
        raise TooManyLabelsError(f"{len(labels)} labels exceeds enumeration cap {MAX_ENUMERATED_LABELS}")
    out = {}
    for mask in itertools.product((False, True), repeat=len(labels)):
        w = 1.0
        for present, l in zip(mask, labels):
            r = existences[l]
            w *= r if present else 1.0 - r
        out[tuple(l for present, l in zip(mask, labels) if present)] = w
    return out


def product_joint(tracks: list[Track], labels: tuple[Label, ...], n_particles=None, rng=None) -> JointParticleSet:
    """Joint cloud of independent tracks.

    With ``n_particles=None`` the full Cartesian product is formed (exact for
    enumerated clouds); otherwise each track is resampled independently.
    """
    if not tracks:
        dim = 4
        return JointParticleSet.empty(dim)
    if n_particles is None:
        grids = np.meshgrid(*[np.arange(t.n_particles) for t in tracks], indexing="ij")
        idx = [g.ravel() for g in grids]
        weights = np.prod([t.weights[i] for t, i in zip(tracks, idx)], axis=0)
        weights = weights / weights.sum()
    else:
        gen = as_generator(rng)
        idx = [gen.choice(t.n_particles, size=n_particles, p=t.weights) for t in tracks]
        weights = np.full(n_particles, 1.0 / n_particles)
    states = np.stack([t.states[i] for t, i in zip(tracks, idx)], axis=1)
    return JointParticleSet(labels, weights, states)


def lmb_to_lmo(lmb: LmbDensity, n_particles: int | None = None, rng=None, dim: int = 4) -> LmoDensity:
    """Expand an LMB density into its label-set mixture.

    Zero-weight hypotheses (from ``r`` equal to 0 or 1) are omitted.
    """
    weights = bernoulli_weights({l: t.existence for l, t in lmb.tracks.items()})
    if lmb.tracks:
        dim = next(iter(lmb.tracks.values())).states.shape[1]
    gen = None if n_particles is None else as_generator(rng)
    hyps = {}
    for key, w in weights.items():
        if w <= 0.0:
            continue
        if key:
            joint = product_joint([lmb.tracks[l] for l in key], key, n_particles, gen)
        else:
            joint = JointParticleSet.empty(dim)
        hyps[key] = Hypothesis(w, joint)
    total = sum(h.weight for h in hyps.values())
    return LmoDensity({k: Hypothesis(h.weight / total, h.joint) for k, h in hyps.items()})


def labeled_phd_lmo(lmo: LmoDensity) -> LabeledPhd:
    pieces: dict[Label, list] = defaultdict(list)
    for key, hyp in lmo.hypotheses.items():
        for label in key:
            w, s = hyp.joint.marginal(label)
            pieces[label].append((hyp.weight * w, s))
    return LabeledPhd(
        {
            l: (np.concatenate([p[0] for p in ps]), np.concatenate([p[1] for p in ps]))
            for l, ps in sorted(pieces.items())
        }
    )


def labeled_phd_lmb(lmb: LmbDensity) -> LabeledPhd:
    return LabeledPhd({l: (t.existence * t.weights, t.states) for l, t in lmb.tracks.items()})


def best_lmb_approx(lmo: LmoDensity, min_existence: float = TINY_EXISTENCE) -> LmbDensity:
    """LMB density matching the labeled PHD of ``lmo`` (the KLD minimizer).

    Each track pools its coordinate block from every hypothesis containing
    it, weighted by ``omega(I) * w_j``. Tracks with existence below
    ``min_existence`` are dropped.
    """
    tracks = {}
    for label, (w, s) in labeled_phd_lmo(lmo).per_label.items():
        r = float(w.sum())
        if r < min_existence:
            continue
        tracks[label] = Track(min(r, 1.0), w / r, s)
    return LmbDensity(tracks)


def _discrete_lmo(lmo: LmoDensity) -> dict[tuple, float]:
    out: dict[tuple, float] = defaultdict(float)
    for key, hyp in lmo.hypotheses.items():
        for state, m in discrete_masses(hyp.joint.weights, hyp.joint.states).items():
            out[(key, state)] += hyp.weight * m
    return out


def kld_discrete(p_lmo: LmoDensity, q_lmo: LmoDensity) -> float:
    """KL divergence between two LMO densities on an enumerated state space."""
    p = _discrete_lmo(p_lmo)
    q = _discrete_lmo(q_lmo)
    total = 0.0
    for key, pv in p.items():
        if pv <= 0.0:
            continue
        qv = q.get(key, 0.0)
        if qv <= 0.0:
            return math.inf
        total += pv * math.log(pv / qv)
    return total


def extract_estimates(lmb: LmbDensity, existence_threshold: float = 0.5) -> set[LabeledState]:
    return {
        LabeledState(tuple(t.mean()), l)
        for l, t in lmb.tracks.items()
        if t.existence > existence_threshold
    }


def cardinality_distribution(lmo: LmoDensity) -> list[float]:
    n_max = max(len(k) for k in lmo.hypotheses)
    out = [0.0] * (n_max + 1)
    for key, hyp in lmo.hypotheses.items():
        out[len(key)] += hyp.weight
    return out


def lmb_cardinality_distribution(lmb: LmbDensity) -> list[float]:
    """Poisson-binomial cardinality of an LMB density."""
    dist = np.array([1.0])
    for t in lmb.tracks.values():
        dist = np.convolve(dist, [1.0 - t.existence, t.existence])
    return dist.tolist()


def merge_duplicates(weights, states) -> tuple[np.ndarray, np.ndarray]:
    """Collapse identical particles (leading axis) by summing their weights."""
    states = np.asarray(states)
    flat = states.reshape(states.shape[0], -1)
    uniq, inverse = np.unique(flat, axis=0, return_inverse=True)
    merged = np.bincount(inverse.ravel(), weights=np.asarray(weights, float), minlength=len(uniq))
    return merged, uniq.reshape((len(uniq),) + states.shape[1:])
