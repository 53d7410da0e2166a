"""Standard multi-object transition: survival, linear-Gaussian motion, LMB births."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rfs import Label, LabeledState, LmbDensity, Track
from .smc import as_generator

DEFAULT_SURVIVAL = 0.98
SINGULAR_REGULARIZATION = 1e-12


def cv_matrices(dt: float, sigma_v: float) -> tuple[np.ndarray, np.ndarray]:
    """Constant-velocity ``F`` and ``Q`` for the state ``[px, py, vx, vy]``."""
    i2 = np.eye(2)
    F = np.block([[i2, dt * i2], [np.zeros((2, 2)), i2]])
    Q = sigma_v**2 * np.block(
        [[dt**4 / 3 * i2, dt**3 / 2 * i2], [dt**3 / 2 * i2, dt**2 * i2]]
    )
    return F, Q


def _psd_factor(Q: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(Q)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _as_array(x) -> np.ndarray:
    if isinstance(x, LabeledState):
        return np.asarray(x.kinematic)
    return np.asarray(x, dtype=float)


@dataclass(frozen=True, eq=False)
class MotionModel:
    F: np.ndarray
    Q: np.ndarray
    survival: float = DEFAULT_SURVIVAL
    dt: float = 1.0
    _factor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        F = np.array(self.F, dtype=float)
        Q = np.array(self.Q, dtype=float)
        if not np.allclose(Q, Q.T):
            raise ValueError("process noise must be symmetric")
        if np.linalg.eigvalsh(Q).min() < -1e-12:
            raise ValueError("process noise must be positive semi-definite")
        if not 0.0 <= self.survival <= 1.0:
            raise ValueError("survival probability must lie in [0, 1]")
        for a in (F, Q):
            a.setflags(write=False)
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "_factor", _psd_factor(Q))

    @classmethod
    def constant_velocity(cls, dt: float = 1.0, sigma_v: float = 0.0, survival: float = DEFAULT_SURVIVAL):
        F, Q = cv_matrices(dt, sigma_v)
        return cls(F, Q, survival, dt)

    @property
    def dim(self) -> int:
        return self.F.shape[0]

    def propagate(self, x, rng=None) -> np.ndarray:
        """Draw ``x+ ~ N(Fx, Q)``; works on any leading batch shape."""
        x = _as_array(x)
        mean = x @ self.F.T
        if not np.any(self._factor):
            return mean
        noise = as_generator(rng).standard_normal(x.shape)
        return mean + noise @ self._factor.T

    def transition_density(self, x_next, x) -> np.ndarray:
        x_next, x = _as_array(x_next), _as_array(x)
        Q = self.Q
        if np.linalg.matrix_rank(Q) < Q.shape[0]:
            Q = Q + SINGULAR_REGULARIZATION * np.eye(Q.shape[0])
        diff = x_next - x @ self.F.T
        sol = np.linalg.solve(Q, diff[..., None])[..., 0]
        maha = np.sum(diff * sol, axis=-1)
        _, logdet = np.linalg.slogdet(Q)
        d = Q.shape[0]
        return np.exp(-0.5 * (maha + logdet + d * np.log(2 * np.pi)))

    def survival_prob(self, x) -> np.ndarray | float:
        """Survival probability; constant, but keeps the state argument."""
        x = _as_array(x)
        if x.ndim <= 1:
            return self.survival
        return np.full(x.shape[:-1], self.survival)


@dataclass(frozen=True, eq=False)
class FiniteMotionModel:
    """Markov chain on an enumerated list of kinematic states.

    Used for exact checks: :meth:`transition_support` lists every successor
    with its probability, so filters can enumerate instead of sampling.
    """

    states: np.ndarray
    transition: np.ndarray
    survival: float | np.ndarray = DEFAULT_SURVIVAL

    def __post_init__(self):
        s = np.array(self.states, dtype=float)
        T = np.array(self.transition, dtype=float)
        if T.shape != (len(s), len(s)) or not np.allclose(T.sum(axis=1), 1.0):
            raise ValueError("transition must be a row-stochastic square matrix")
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "transition", T)
        object.__setattr__(self, "survival", np.broadcast_to(np.asarray(self.survival, float), (len(s),)).copy())

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def index_of(self, x) -> np.ndarray:
        x = _as_array(x)
        d = np.abs(x[..., None, :] - self.states).sum(axis=-1)
        idx = d.argmin(axis=-1)
        if np.any(d.min(axis=-1) > 1e-9):
            raise ValueError("state not in the enumerated space")
        return idx

    def propagate(self, x, rng=None) -> np.ndarray:
        idx = np.atleast_1d(self.index_of(x))
        gen = as_generator(rng)
        cdf = np.cumsum(self.transition[idx.ravel()], axis=1)
        u = gen.random(idx.size)[:, None]
        nxt = np.minimum((u >= cdf).sum(axis=1), len(self.states) - 1)
        return self.states[nxt].reshape(_as_array(x).shape)

    def transition_support(self, x) -> tuple[np.ndarray, np.ndarray]:
        row = self.transition[int(self.index_of(x))]
        keep = row > 0
        return self.states[keep], row[keep]

    def transition_density(self, x_next, x) -> np.ndarray:
        return self.transition[self.index_of(x), self.index_of(x_next)]

    def survival_prob(self, x) -> np.ndarray | float:
        idx = self.index_of(x)
        out = self.survival[idx]
        return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True, eq=False)
class BirthComponent:
    existence: float
    mean: np.ndarray
    cov: np.ndarray
    # Optional enumerated support (states, probabilities) replacing the Gaussian.
    support: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        if not 0.0 <= self.existence <= 1.0:
            raise ValueError("birth existence must lie in [0, 1]")
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float))


@dataclass(frozen=True)
class BirthModel:
    components: tuple[BirthComponent, ...] = ()

    @staticmethod
    def label(step: int, i: int) -> Label:
        return Label(step, i + 1)

    def labels_at(self, step: int) -> tuple[Label, ...]:
        return tuple(self.label(step, i) for i in range(len(self.components)))


def acoustic_birth_model(existence: float = 0.02, means=((50, 180, 0, 0), (200, 105, 0, 0)), var: float = 2.0) -> BirthModel:
    """Two-component LMB birth with diagonal covariance ``var * I``."""
    return BirthModel(
        tuple(BirthComponent(existence, np.asarray(m, float), var * np.eye(4)) for m in means)
    )


def sample_birth(birth: BirthModel, step: int, n_particles: int | None, rng=None) -> LmbDensity:
    """Birth tracks for ``step``, labelled ``(step, i)``.

    Enumerated-support components are returned exactly when
    ``n_particles`` is None; Gaussian components need ``n_particles``.
    """
    gen = as_generator(rng) if birth.components else None
    tracks = {}
    for i, comp in enumerate(birth.components):
        label = birth.label(step, i)
        if comp.support is not None:
            states, probs = (np.asarray(a, float) for a in comp.support)
            if n_particles is None:
                tracks[label] = Track(comp.existence, probs / probs.sum(), states)
                continue
            idx = gen.choice(len(probs), size=n_particles, p=probs / probs.sum())
            tracks[label] = Track(comp.existence, np.full(n_particles, 1.0 / n_particles), states[idx])
            continue
        if n_particles is None:
            raise ValueError("Gaussian birth components need a particle count")
        draws = comp.mean + gen.standard_normal((n_particles, comp.mean.size)) @ _psd_factor(comp.cov).T
        tracks[label] = Track(comp.existence, np.full(n_particles, 1.0 / n_particles), draws)
    return LmbDensity(tracks)
