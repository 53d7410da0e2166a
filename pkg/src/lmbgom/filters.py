"""LMO-GOM, LMB-GOM and grouped LMB-GOM recursions.

Every step is a pure function of its inputs and a :class:`RandomStream`.
Randomness is drawn from children keyed by labels or label sets, never by
loop position, so the grouped update consumes exactly the same draws for a
track whichever group (or thread) processes it.

With ``FilterConfig(exact=True)`` sampling is replaced by exhaustive
enumeration. This requires a :class:`FiniteMotionModel` and enumerated birth
supports, and turns every step into exact arithmetic on discrete toys.
"""
from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .grouping import GroupingConfig, TrackPartition, partition_tracks
from .motion import BirthModel, sample_birth
from .rfs import (
    MAX_ENUMERATED_LABELS,
    Hypothesis,
    JointParticleSet,
    Label,
    LmbDensity,
    LmoDensity,
    TooManyLabelsError,
    Track,
    bernoulli_weights,
    best_lmb_approx,
    merge_duplicates,
    product_joint,
)
from .smc import RandomStream, normalize_log, systematic_indices

log = logging.getLogger(__name__)


class DegenerateFrameError(RuntimeError):
    """Every hypothesis received zero likelihood for a frame."""

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        super().__init__(f"all hypotheses degenerate at frame {step}" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class FilterConfig:
    n_particles: int = 1000
    hypothesis_weight_floor: float = 1e-4
    max_hypotheses: int = 100
    existence_floor: float = 1e-3
    extraction_threshold: float = 0.5
    # Tracks whose existence falls below this after a full step are removed.
    prune_existence: float = 1e-3
    # None resamples after every update; a number resamples when ESS/N < it.
    ess_threshold: float | None = None
    exact: bool = False
    max_workers: int = 1

    def __post_init__(self):
        if self.n_particles < 1 or self.max_hypotheses < 1:
            raise ValueError("particle and hypothesis counts must be positive")
        for name in ("hypothesis_weight_floor", "existence_floor", "prune_existence"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")


class FunctionLikelihood:
    """Adapter turning ``fn(frame, states) -> log g`` into the batched surface.

    ``states`` passed to ``fn`` has shape ``(n, d)`` in label order.
    """

    def __init__(self, fn):
        self.fn = fn

    def log_likelihood(self, frame, states, mask=None):
        return np.array([self.fn(frame, s) for s in np.asarray(states)], dtype=float)


def as_stream(rng) -> RandomStream:
    if isinstance(rng, RandomStream):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RandomStream(int(rng))
    raise TypeError("filters need a RandomStream (or an integer seed)")


def _key(labels) -> tuple:
    return tuple((l.birth_time, l.birth_index) for l in labels)


def _step_of(frame, step):
    return getattr(frame, "step", 0) if step is None else step


# --------------------------------------------------------------------------
# LMO-GOM
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PredictedWeightTable:
    """``omega_+`` per predicted label set, plus the survival bookkeeping."""

    weights: dict
    survival_weights: dict  # omega_S(J)
    birth_labels: tuple
    # (prior key, J) -> per-particle survival factors of that prior hypothesis
    factors: dict

    def __getitem__(self, key):
        return self.weights[key]


def _subsets(labels):
    for r in range(len(labels) + 1):
        yield from itertools.combinations(labels, r)


def _survival_factors(states: np.ndarray, keep: np.ndarray, motion) -> np.ndarray:
    """Per-particle ``prod p_S (kept) * prod (1 - p_S) (dropped)``."""
    if states.shape[1] == 0:
        return np.ones(states.shape[0])
    ps = np.broadcast_to(np.asarray(motion.survival_prob(states), float), states.shape[:2])
    return np.prod(np.where(keep, ps, 1.0 - ps), axis=1)


def lmo_predicted_weights(prior: LmoDensity, birth: BirthModel, motion, cfg: FilterConfig, step: int = 1) -> PredictedWeightTable:
    omega_s: dict = {}
    factors: dict = {}
    for key, hyp in prior.hypotheses.items():
        if len(key) > MAX_ENUMERATED_LABELS:
            raise TooManyLabelsError(f"hypothesis of {len(key)} labels exceeds the enumeration cap")
        for J in _subsets(key):
            keep = np.array([l in J for l in key], dtype=bool)
            f = _survival_factors(hyp.joint.states, keep, motion)
            eta = float(hyp.joint.weights @ f)
            factors[(key, J)] = f
            if eta > 0.0:
                omega_s[J] = omega_s.get(J, 0.0) + hyp.weight * eta
    birth_labels = birth.labels_at(step)
    omega_b = bernoulli_weights({l: c.existence for l, c in zip(birth_labels, birth.components)})
    weights = {}
    for J, ws in omega_s.items():
        for B, wb in omega_b.items():
            if ws * wb > 0.0:
                weights[tuple(sorted(J + B))] = ws * wb
    # Gate labels by predicted marginal existence, then renormalize.
    marg: dict = {}
    for key, w in weights.items():
        for l in key:
            marg[l] = marg.get(l, 0.0) + w
    dropped = {l for l, r in marg.items() if r < cfg.existence_floor}
    if dropped:
        weights = {k: w for k, w in weights.items() if not dropped.intersection(k)}
    total = sum(weights.values())
    weights = {k: w / total for k, w in sorted(weights.items())}
    return PredictedWeightTable(weights, omega_s, birth_labels, factors)


def _proposal_pool(prior: LmoDensity, table: PredictedWeightTable, J: tuple):
    """All ``(prior hypothesis, particle)`` pairs feeding survivor set ``J``.

    Returns the survivors' prior states ``(K, |J|, d)`` and the normalized
    auxiliary-variable probabilities ``(K,)``.
    """
    states, probs = [], []
    for key, hyp in prior.hypotheses.items():
        if not set(J) <= set(key):
            continue
        p = hyp.weight * hyp.joint.weights * table.factors[(key, J)]
        if not np.any(p > 0):
            continue
        pos = [key.index(l) for l in J]
        states.append(hyp.joint.states[:, pos, :])
        probs.append(p)
    states = np.concatenate(states)
    probs = np.concatenate(probs)
    return states, probs / probs.sum()


def _enumerate_successors(motion, states: np.ndarray, probs: np.ndarray):
    """Exact transition of every survivor particle (finite motion models)."""
    out_s, out_p = [], []
    for s, p in zip(states, probs):
        supports = [motion.transition_support(x) for x in s]
        for combo in itertools.product(*[range(len(sp[1])) for sp in supports]):
            out_s.append(np.stack([supports[k][0][c] for k, c in enumerate(combo)]))
            out_p.append(p * np.prod([supports[k][1][c] for k, c in enumerate(combo)]))
    return np.array(out_s), np.array(out_p)


def _birth_joint(births: LmbDensity, labels, n, exact, stream):
    tracks = [births.tracks[l] for l in labels]
    if exact:
        joint = product_joint(tracks, tuple(labels))
    else:
        joint = product_joint(tracks, tuple(labels), n, stream.generator())
    return joint.weights, joint.states


def _sample_hypothesis(prior, table, births, I_plus, motion, cfg, stream):
    """Draw proposal particles for one predicted label set.

    Returns ``(proposal weights, states)``; proposal weights already carry
    the auxiliary-variable probabilities so that ``sum(q * g)`` estimates
    ``eta_Upsilon(I_+)``.
    """
    J = tuple(l for l in I_plus if l not in table.birth_labels)
    B = tuple(l for l in I_plus if l in table.birth_labels)
    dim = prior.dim
    n = cfg.n_particles
    gen = stream.child("survivors").generator()
    if J:
        pool_states, pool_probs = _proposal_pool(prior, table, J)
        if cfg.exact:
            surv, q = _enumerate_successors(motion, pool_states, pool_probs)
        else:
            idx = gen.choice(len(pool_probs), size=n, p=pool_probs)
            surv = motion.propagate(pool_states[idx], gen)
            q = np.full(n, 1.0 / n)
    else:
        surv, q = np.zeros((1, 0, dim)), np.ones(1)
    if B:
        bw, bs = _birth_joint(births, B, n, cfg.exact, stream.child("births"))
        if cfg.exact:
            ns, nb = len(q), len(bw)
            surv = np.concatenate([np.repeat(surv, nb, axis=0), np.tile(bs, (ns, 1, 1))], axis=1)
            q = np.repeat(q, nb) * np.tile(bw, ns)
        else:
            if surv.shape[0] == 1:
                surv = np.repeat(surv, n, axis=0)
                q = np.full(n, 1.0 / n)
            surv = np.concatenate([surv, bs], axis=1)
    if cfg.exact:
        q, surv = merge_duplicates(q, surv)
    return q, surv


def _truncate(post: dict, cfg: FilterConfig) -> dict:
    items = sorted(post.items(), key=lambda kv: -kv[1][0])
    kept = [(k, v) for k, v in items if v[0] >= cfg.hypothesis_weight_floor][: cfg.max_hypotheses]
    if not kept:
        kept = items[:1]
    total = sum(v[0] for _, v in kept)
    return {k: (v[0] / total, v[1]) for k, v in sorted(kept)}


def _posterior_cloud(q, log_g, states, labels, cfg, stream):
    """Bayes-weighted joint cloud and ``log eta`` for one hypothesis."""
    with np.errstate(divide="ignore"):
        lw = np.log(q) + log_g
    w, log_eta = normalize_log(lw)
    if not cfg.exact:
        n = cfg.n_particles
        ess = 1.0 / np.sum(w * w)
        if cfg.ess_threshold is None or ess < cfg.ess_threshold * n:
            idx = systematic_indices(w, n, stream.child("resample").generator())
            states, w = states[idx], np.full(n, 1.0 / n)
    return JointParticleSet(tuple(labels), w, states), log_eta


def lmo_gom_step(prior: LmoDensity, birth: BirthModel, motion, likelihood, frame, cfg: FilterConfig, rng, step: int | None = None) -> LmoDensity:
    """One exact-form prediction + update of the full labeled multi-object density."""
    step = _step_of(frame, step)
    stream = as_stream(rng)
    table = lmo_predicted_weights(prior, birth, motion, cfg, step)
    n_birth = None if cfg.exact else cfg.n_particles
    births = sample_birth(birth, step, n_birth, stream.child("birth"))
    post = {}
    for I_plus, w_plus in table.weights.items():
        hs = stream.child("hyp", _key(I_plus))
        q, states = _sample_hypothesis(prior, table, births, I_plus, motion, cfg, hs)
        log_g = likelihood.log_likelihood(frame, states)
        try:
            joint, log_eta = _posterior_cloud(q, log_g, states, I_plus, cfg, hs)
        except ValueError:
            log.warning("hypothesis %s degenerate at frame %d; dropped", I_plus, step)
            continue
        post[I_plus] = (log_eta + math.log(w_plus), joint)
    if not post:
        raise DegenerateFrameError(step)
    keys = list(post)
    omega, _ = normalize_log([post[k][0] for k in keys])
    post = _truncate({k: (float(o), post[k][1]) for k, o in zip(keys, omega)}, cfg)
    return LmoDensity({k: Hypothesis(w, j) for k, (w, j) in post.items()})


# --------------------------------------------------------------------------
# LMB-GOM
# --------------------------------------------------------------------------


def gaussian_track(mean, cov, existence: float, n_particles: int, rng) -> Track:
    gen = as_stream(rng).generator() if not isinstance(rng, np.random.Generator) else rng
    mean = np.asarray(mean, float)
    vals, vecs = np.linalg.eigh(np.asarray(cov, float))
    factor = vecs * np.sqrt(np.clip(vals, 0, None))
    states = mean + gen.standard_normal((n_particles, mean.size)) @ factor.T
    return Track(existence, np.full(n_particles, 1.0 / n_particles), states)


def lmb_predict(prior: LmbDensity, birth: BirthModel, motion, cfg: FilterConfig, rng, step: int = 1) -> LmbDensity:
    stream = as_stream(rng)
    tracks = {}
    for label, t in prior.tracks.items():
        ps = np.broadcast_to(np.asarray(motion.survival_prob(t.states), float), t.weights.shape)
        w = t.weights * ps
        eta = float(w.sum())
        if eta <= 0.0 or t.existence * eta <= 0.0:
            continue
        w = w / eta
        if cfg.exact:
            nxt, p = _enumerate_successors(motion, t.states[:, None, :], w)
            p, nxt = merge_duplicates(p, nxt[:, 0, :])
            tracks[label] = Track(t.existence * eta, p / p.sum(), nxt)
        else:
            gen = stream.child("propagate", _key([label])).generator()
            tracks[label] = Track(t.existence * eta, w, motion.propagate(t.states, gen))
    n_birth = None if cfg.exact else cfg.n_particles
    return LmbDensity(tracks).union(sample_birth(birth, step, n_birth, stream.child("birth")))


def gated_labels(lmb: LmbDensity, cfg: FilterConfig) -> tuple[Label, ...]:
    return tuple(l for l, t in lmb.tracks.items() if t.existence >= cfg.existence_floor)


def lmb_gom_update(predicted: LmbDensity, likelihood, frame, cfg: FilterConfig, rng, mask=None, step: int | None = None) -> LmbDensity:
    """Best-LMB approximation of the exact posterior of an LMB prediction.

    Labels below ``existence_floor`` skip the enumeration and are returned
    unchanged. ``mask`` restricts the likelihood to an observation subset.
    """
    step = _step_of(frame, step)
    stream = as_stream(rng)
    gated = gated_labels(predicted, cfg)
    if len(gated) > MAX_ENUMERATED_LABELS:
        raise TooManyLabelsError(f"{len(gated)} gated labels exceed the enumeration cap; use grouping")
    omega_plus = bernoulli_weights({l: predicted.tracks[l].existence for l in gated})
    dim = next(iter(predicted.tracks.values())).states.shape[1] if predicted.tracks else 4
    post_log, joints = [], []
    for I, w_plus in omega_plus.items():
        if w_plus <= 0.0:
            continue
        hs = stream.child("hyp", _key(I))
        tracks = [predicted.tracks[l] for l in I]
        if not I:
            joint = JointParticleSet.empty(dim)
        elif cfg.exact:
            joint = product_joint(tracks, I)
        else:
            joint = product_joint(tracks, I, cfg.n_particles, hs.child("draw").generator())
        log_g = likelihood.log_likelihood(frame, joint.states, mask)
        with np.errstate(divide="ignore"):
            lw = np.log(joint.weights) + log_g
        try:
            w, log_eta = normalize_log(lw)
        except ValueError:
            continue
        post_log.append(log_eta + math.log(w_plus))
        joints.append(JointParticleSet(I, w, joint.states))
    if not joints:
        raise DegenerateFrameError(step)
    omega, _ = normalize_log(post_log)
    keep = omega > 0
    total = omega[keep].sum()
    lmo = LmoDensity({j.labels: Hypothesis(float(o / total), j) for o, j, k in zip(omega, joints, keep) if k})
    collapsed = best_lmb_approx(lmo)
    out = {}
    for label, t in collapsed.tracks.items():
        if cfg.exact:
            w, s = merge_duplicates(t.weights, t.states)
            out[label] = Track(t.existence, w / w.sum(), s)
        else:
            idx = systematic_indices(t.weights, cfg.n_particles, stream.child("resample", _key([label])).generator())
            out[label] = Track(t.existence, np.full(cfg.n_particles, 1.0 / cfg.n_particles), t.states[idx])
    for label in predicted.tracks:
        if label not in gated:
            out[label] = predicted.tracks[label]
    return LmbDensity(out)


def prune_tracks(lmb: LmbDensity, cfg: FilterConfig) -> LmbDensity:
    return LmbDensity({l: t for l, t in lmb.tracks.items() if t.existence >= cfg.prune_existence})


def lmb_gom_step(prior: LmbDensity, birth: BirthModel, motion, likelihood, frame, cfg: FilterConfig, rng, step: int | None = None) -> LmbDensity:
    step = _step_of(frame, step)
    stream = as_stream(rng)
    predicted = lmb_predict(prior, birth, motion, cfg, stream.child("predict"), step)
    updated = lmb_gom_update(predicted, likelihood, frame, cfg, stream.child("update"), step=step)
    return prune_tracks(updated, cfg)


@dataclass(frozen=True, eq=False)
class GroupedStepInfo:
    partition: TrackPartition
    failed_groups: tuple[int, ...] = ()


def g_lmb_gom_step(
    prior: LmbDensity,
    birth: BirthModel,
    motion,
    sensor,
    frame,
    grouping: GroupingConfig,
    cfg: FilterConfig,
    rng,
    step: int | None = None,
    info: list | None = None,
) -> LmbDensity:
    """Grouped LMB-GOM step; a single group reduces exactly to :func:`lmb_gom_step`.

    If ``info`` is a list, a :class:`GroupedStepInfo` is appended to it.
    """
    step = _step_of(frame, step)
    stream = as_stream(rng)
    predicted = lmb_predict(prior, birth, motion, cfg, stream.child("predict"), step)
    update_stream = stream.child("update")
    gated = gated_labels(predicted, cfg)
    partition = partition_tracks(predicted, sensor, frame, grouping, gated)
    groups = partition.groups
    if len(groups) <= 1:
        updated = lmb_gom_update(predicted, sensor, frame, cfg, update_stream, step=step)
        if info is not None:
            info.append(GroupedStepInfo(partition))
        return prune_tracks(updated, cfg)

    def run(group):
        sub = predicted.subset(group.labels)
        try:
            return lmb_gom_update(sub, sensor, frame, cfg, update_stream, mask=group.observations, step=step)
        except DegenerateFrameError:
            log.warning("group %s degenerate at frame %d; keeping predicted tracks", group.labels, step)
            return None

    if cfg.max_workers > 1:
        with ThreadPoolExecutor(cfg.max_workers) as pool:
            results = list(pool.map(run, groups))
    else:
        results = [run(g) for g in groups]
    out = {l: t for l, t in predicted.tracks.items() if l not in gated}
    failed = []
    for i, (group, res) in enumerate(zip(groups, results)):
        if res is None:
            failed.append(i)
            res = predicted.subset(group.labels)
        out.update(res.tracks)
    if info is not None:
        info.append(GroupedStepInfo(partition, tuple(failed)))
    return prune_tracks(LmbDensity(out), cfg)
