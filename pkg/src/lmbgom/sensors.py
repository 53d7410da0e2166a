"""Generic-observation-model sensors: pixel TBD imagery and acoustic amplitudes.

Both sensors expose the same batched surface used by the filters:

``log_likelihood(frame, states, mask=None)``
    ``states`` has shape ``(N, n, d)`` (N joint particles of n objects);
    returns ``(N,)`` values of ``log g(z_S | X)`` where ``S`` is the
    observation subset selected by ``mask`` (all observations by default).
``vor(positions, radius=None)``
    sorted observation indices that objects at ``positions`` can influence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rfs import LabeledState
from .smc import as_generator

LOG_2PI = math.log(2.0 * math.pi)


class FrameMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ObservationFrame:
    """One time step of sensor output."""

    kind: str  # "tbd" or "acoustic"
    z: np.ndarray
    step: int = 0

    def __post_init__(self):
        if self.kind not in ("tbd", "acoustic"):
            raise ValueError(f"unknown frame kind {self.kind!r}")
        z = np.array(self.z, dtype=float).ravel()
        z.setflags(write=False)
        object.__setattr__(self, "z", z)

    def __len__(self):
        return self.z.size


def _states_array(X) -> np.ndarray:
    """Coerce a list of LabeledStates / vectors to an ``(n, d)`` array."""
    if isinstance(X, np.ndarray):
        return X.reshape(-1, X.shape[-1]) if X.size else np.zeros((0, 4))
    rows = [x.kinematic if isinstance(x, LabeledState) else x for x in X]
    return np.asarray(rows, dtype=float).reshape(len(rows), -1) if rows else np.zeros((0, 4))


def _mask_vector(mask, n: int) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask)
    if mask.dtype == bool:
        if mask.size != n:
            raise FrameMismatchError("mask length differs from the observation count")
        return mask
    out = np.zeros(n, dtype=bool)
    out[mask.astype(int)] = True
    return out


@dataclass(frozen=True)
class PixelGrid:
    width: int
    height: int
    dx: float = 1.0
    dy: float = 1.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or self.dx <= 0 or self.dy <= 0:
            raise ValueError("grid sizes and cell lengths must be positive")

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def cell_index(self, a, b):
        """Row-major flat index of column ``a`` and row ``b``."""
        return np.asarray(b) * self.width + np.asarray(a)

    def cell_coords(self, j):
        j = np.asarray(j)
        return j % self.width, j // self.width

    def nearest_cell(self, px, py):
        return np.rint(np.asarray(px) / self.dx).astype(int), np.rint(np.asarray(py) / self.dy).astype(int)


def peak_intensity(grid: PixelGrid, source_intensity: float, blur_var: float) -> float:
    return grid.dx * grid.dy * source_intensity / (2.0 * math.pi * blur_var)


def noise_var_for_snr(peak: float, snr_db: float) -> float:
    """Noise variance giving ``10 log10(peak^2 / var) = snr_db``."""
    return peak**2 / 10.0 ** (snr_db / 10.0)


def snr_db(peak: float, noise_var: float) -> float:
    return 10.0 * math.log10(peak**2 / noise_var)


@dataclass(frozen=True, eq=False)
class TbdModel:
    grid: PixelGrid
    source_intensity: float = 10.0
    blur_var: float = 1.0
    noise_var: float = 1.0
    template_half: int = 3
    _offsets: np.ndarray = field(init=False, repr=False)

    kind = "tbd"

    def __post_init__(self):
        if min(self.source_intensity, self.blur_var, self.noise_var) <= 0 or self.template_half < 0:
            raise ValueError("TBD parameters must be positive")
        h = self.template_half
        da, db = np.meshgrid(np.arange(-h, h + 1), np.arange(-h, h + 1), indexing="xy")
        object.__setattr__(self, "_offsets", np.stack([da.ravel(), db.ravel()], axis=1))

    @classmethod
    def from_snr(cls, grid: PixelGrid, snr: float, source_intensity: float = 10.0, blur_var: float = 1.0, template_half: int = 3):
        peak = peak_intensity(grid, source_intensity, blur_var)
        return cls(grid, source_intensity, blur_var, noise_var_for_snr(peak, snr), template_half)

    @property
    def n_obs(self) -> int:
        return self.grid.n_cells

    @property
    def peak(self) -> float:
        return peak_intensity(self.grid, self.source_intensity, self.blur_var)

    @property
    def snr_db(self) -> float:
        return snr_db(self.peak, self.noise_var)

    def template(self, positions: np.ndarray):
        """Template cells and spread values for positions of shape ``(..., 2)``.

        Returns ``(cells, values, valid)`` each of shape ``(..., T)`` with
        ``T = (2h+1)^2``; cells outside the grid are flagged invalid and carry
        value 0 and index 0.
        """
        g = self.grid
        px, py = positions[..., 0], positions[..., 1]
        a0, b0 = g.nearest_cell(px, py)
        A = a0[..., None] + self._offsets[:, 0]
        B = b0[..., None] + self._offsets[:, 1]
        valid = (A >= 0) & (A < g.width) & (B >= 0) & (B < g.height)
        d2 = (g.dx * A - px[..., None]) ** 2 + (g.dy * B - py[..., None]) ** 2
        values = np.where(valid, self.peak * np.exp(-d2 / (2.0 * self.blur_var)), 0.0)
        cells = np.where(valid, g.cell_index(A, B), 0)
        return cells, values, valid

    def mean_image(self, X) -> np.ndarray:
        X = _states_array(X)
        mu = np.zeros(self.n_obs)
        if len(X):
            cells, values, _ = self.template(X[:, :2])
            np.add.at(mu, cells.ravel(), values.ravel())
        return mu

    def baseline(self, frame: ObservationFrame, mask=None) -> float:
        """``log g(z_S | empty set)``."""
        z = frame.z if mask is None else frame.z[mask]
        return float(-0.5 * z.size * (LOG_2PI + math.log(self.noise_var)) - 0.5 * np.dot(z, z) / self.noise_var)

    def _check(self, frame: ObservationFrame):
        if frame.kind != "tbd" or frame.z.size != self.n_obs:
            raise FrameMismatchError(f"frame ({frame.kind}, {frame.z.size}) does not match a {self.grid.width}x{self.grid.height} TBD grid")

    def log_likelihood(self, frame: ObservationFrame, states, mask=None) -> np.ndarray:
        """Batched ``log g(z|X)`` as baseline plus a template-union correction.

        Uses ``sum_j (z_j - mu_j)^2 = sum_j z_j^2 - 2 z.mu + sum_j mu_j^2`` where
        ``sum mu^2`` splits into per-object terms and pairwise template overlaps.
        """
        self._check(frame)
        mask = _mask_vector(mask, self.n_obs)
        states = np.asarray(states, dtype=float)
        N, n = states.shape[:2]
        base = self.baseline(frame, mask)
        if n == 0:
            return np.full(N, base)
        pos = states[..., :2]
        cells, values, valid = self.template(pos)  # (N, n, T)
        if mask is not None:
            values = values * mask[cells]
        z = frame.z
        cross = np.einsum("knt,knt->k", z[cells], values)
        sq = np.einsum("knt,knt->k", values, values)
        if n > 1:
            g = self.grid
            a0, b0 = g.nearest_cell(pos[..., 0], pos[..., 1])
            A = a0[..., None] + self._offsets[:, 0]
            B = b0[..., None] + self._offsets[:, 1]
            h = self.template_half
            for k in range(n):
                for l in range(k + 1, n):
                    inside = (np.abs(A[:, k] - a0[:, l, None]) <= h) & (np.abs(B[:, k] - b0[:, l, None]) <= h)
                    d2 = (g.dx * A[:, k] - pos[:, l, 0, None]) ** 2 + (g.dy * B[:, k] - pos[:, l, 1, None]) ** 2
                    other = np.where(inside, self.peak * np.exp(-d2 / (2.0 * self.blur_var)), 0.0)
                    sq += 2.0 * np.einsum("kt,kt->k", values[:, k], other)
        return base + (cross - 0.5 * sq) / self.noise_var

    def log_likelihood_full(self, frame: ObservationFrame, X, mask=None) -> float:
        """Direct sum over every cell of the image (reference evaluation)."""
        self._check(frame)
        mu = self.mean_image(X)
        r = frame.z - mu
        terms = -0.5 * (LOG_2PI + math.log(self.noise_var)) - 0.5 * r * r / self.noise_var
        mask = _mask_vector(mask, self.n_obs)
        return float(terms.sum() if mask is None else terms[mask].sum())

    def sample_frame(self, X, rng=None, step: int = 0) -> ObservationFrame:
        mu = self.mean_image(X)
        noise = as_generator(rng).standard_normal(mu.size) * math.sqrt(self.noise_var)
        return ObservationFrame("tbd", mu + noise, step)

    def vor(self, positions, radius=None) -> np.ndarray:
        """Union of the (clipped) templates of every position."""
        positions = np.asarray(positions, dtype=float).reshape(-1, 2)
        if positions.size == 0:
            return np.zeros(0, dtype=int)
        a0, b0 = self.grid.nearest_cell(positions[:, 0], positions[:, 1])
        centers = np.unique(np.stack([a0, b0], axis=1), axis=0)
        A = (centers[:, None, 0] + self._offsets[:, 0]).ravel()
        B = (centers[:, None, 1] + self._offsets[:, 1]).ravel()
        ok = (A >= 0) & (A < self.grid.width) & (B >= 0) & (B < self.grid.height)
        return np.unique(self.grid.cell_index(A[ok], B[ok]))


def point_spread(model: TbdModel, x, cell: int) -> float:
    """Spread of an object at ``x`` onto flat cell ``cell`` (0 outside its template)."""
    x = np.asarray(x.kinematic if isinstance(x, LabeledState) else x, dtype=float)
    cells, values, valid = model.template(x[None, :2])
    hit = valid[0] & (cells[0] == cell)
    return float(values[0][hit].sum())


@dataclass(frozen=True, eq=False)
class AcousticModel:
    sensor_positions: np.ndarray
    amplitude: float = 10.0
    path_loss: float = 1.0
    noise_var: float = 1.0
    min_range: float = 5.0
    vor_radius: float = 45.0

    kind = "acoustic"

    def __post_init__(self):
        xi = np.array(self.sensor_positions, dtype=float).reshape(-1, 2)
        if len(np.unique(xi, axis=0)) != len(xi):
            raise ValueError("sensor positions must be distinct")
        if min(self.amplitude, self.path_loss, self.noise_var, self.min_range) <= 0:
            raise ValueError("acoustic parameters must be positive")
        xi.setflags(write=False)
        object.__setattr__(self, "sensor_positions", xi)

    @classmethod
    def grid(cls, n_side: int, extent: float, **kwargs) -> "AcousticModel":
        """Sensors on an ``n_side x n_side`` lattice over ``[0, extent]^2``."""
        ticks = np.linspace(0.0, extent, n_side)
        xx, yy = np.meshgrid(ticks, ticks, indexing="xy")
        kwargs.setdefault("min_range", float(0.5 * (ticks[1] - ticks[0])) if n_side > 1 else 1.0)
        return cls(np.stack([xx.ravel(), yy.ravel()], axis=1), **kwargs)

    @property
    def n_obs(self) -> int:
        return self.sensor_positions.shape[0]

    def means(self, states) -> np.ndarray:
        """``h_m(X)`` for batched states ``(..., n, d)`` -> ``(..., M)``."""
        pos = np.asarray(states, dtype=float)[..., :2]
        lead = pos.shape[:-1]
        flat = pos.reshape(-1, 2)
        xi = self.sensor_positions
        # |p - xi|^2 expanded so the heavy part is one matrix product.
        d2 = (flat * flat).sum(1)[:, None] + (xi * xi).sum(1) - 2.0 * (flat @ xi.T)
        np.maximum(d2, self.min_range**2, out=d2)
        if self.path_loss == 1.0:
            contrib = np.sqrt(d2, out=d2)
            np.divide(self.amplitude, contrib, out=contrib)
        else:
            contrib = self.amplitude * d2 ** (-0.5 * self.path_loss)
        return contrib.reshape(*lead, xi.shape[0]).sum(axis=-2)

    def _check(self, frame: ObservationFrame):
        if frame.kind != "acoustic" or frame.z.size != self.n_obs:
            raise FrameMismatchError(f"frame ({frame.kind}, {frame.z.size}) does not match {self.n_obs} acoustic sensors")

    def log_likelihood(self, frame: ObservationFrame, states, mask=None) -> np.ndarray:
        self._check(frame)
        mask = _mask_vector(mask, self.n_obs)
        states = np.asarray(states, dtype=float)
        z = frame.z
        if mask is not None:
            idx = np.flatnonzero(mask)
            model = self if idx.size == self.n_obs else _restricted(self, idx)
            z = z[idx]
        else:
            model = self
        h = model.means(states)
        r = z - h
        return -0.5 * z.size * (LOG_2PI + math.log(self.noise_var)) - 0.5 * np.einsum("...m,...m->...", r, r) / self.noise_var

    def sample_frame(self, X, rng=None, step: int = 0) -> ObservationFrame:
        X = _states_array(X)
        h = self.means(X[None])[0] if len(X) else np.zeros(self.n_obs)
        noise = as_generator(rng).standard_normal(self.n_obs) * math.sqrt(self.noise_var)
        return ObservationFrame("acoustic", h + noise, step)

    def vor(self, positions, radius=None) -> np.ndarray:
        """Sensors within ``radius`` (default ``vor_radius``) of any position."""
        beta = self.vor_radius if radius is None else radius
        positions = np.asarray(positions, dtype=float).reshape(-1, 2)
        if positions.size == 0:
            return np.zeros(0, dtype=int)
        # Round to 1 cm so dense particle clouds collapse before the distance test.
        positions = np.unique(np.round(positions, 2), axis=0)
        hit = np.zeros(self.n_obs, dtype=bool)
        for chunk in np.array_split(positions, max(1, len(positions) // 512)):
            d2 = ((chunk[:, None, :] - self.sensor_positions) ** 2).sum(axis=-1)
            hit |= (d2 <= beta * beta).any(axis=0)
        return np.flatnonzero(hit)


def _restricted(model: AcousticModel, idx: np.ndarray) -> AcousticModel:
    sub = object.__new__(AcousticModel)
    for name in ("amplitude", "path_loss", "noise_var", "min_range", "vor_radius"):
        object.__setattr__(sub, name, getattr(model, name))
    object.__setattr__(sub, "sensor_positions", model.sensor_positions[idx])
    return sub


def tbd_log_likelihood(model: TbdModel, z: ObservationFrame, X, mask=None) -> float:
    X = _states_array(X)
    return float(model.log_likelihood(z, X[None], mask)[0])


def acoustic_mean(model: AcousticModel, X, sensor: int) -> float:
    X = _states_array(X)
    if len(X) == 0:
        return 0.0
    return float(model.means(X[None])[0, sensor])


def acoustic_log_likelihood(model: AcousticModel, z: ObservationFrame, X, mask=None) -> float:
    X = _states_array(X)
    return float(model.log_likelihood(z, X[None], mask)[0])


def sample_tbd_frame(model: TbdModel, X, rng=None, step: int = 0) -> ObservationFrame:
    return model.sample_frame(X, rng, step)


def sample_acoustic_frame(model: AcousticModel, X, rng=None, step: int = 0) -> ObservationFrame:
    return model.sample_frame(X, rng, step)


def state_vor(model, x, radius=None) -> np.ndarray:
    x = np.asarray(x.kinematic if isinstance(x, LabeledState) else x, dtype=float)
    return model.vor(x[..., :2].reshape(-1, 2), radius)


def log_likelihood(model, frame: ObservationFrame, X, mask=None) -> float:
    """Generic ``log g(z|X)`` for a list of labeled states."""
    X = _states_array(X)
    return float(model.log_likelihood(frame, X[None], mask)[0])


# --- frame export ---------------------------------------------------------

def write_pgm(frame: ObservationFrame, grid: PixelGrid, path) -> tuple[float, float]:
    """16-bit binary PGM plus a ``.txt`` sidecar holding the affine scale.

    Stored values are ``round((z - offset) / scale)``; returns
    ``(offset, scale)``.
    """
    path = Path(path)
    z = frame.z.reshape(grid.height, grid.width)
    offset = float(z.min())
    span = float(z.max()) - offset
    scale = span / 65535.0 if span > 0 else 1.0
    img = np.rint((z - offset) / scale).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{grid.width} {grid.height}\n65535\n".encode("ascii"))
        f.write(img.tobytes())
    path.with_suffix(path.suffix + ".txt").write_text(
        f"width={grid.width}\nheight={grid.height}\noffset={offset!r}\nscale={scale!r}\nstep={frame.step}\n"
    )
    return offset, scale


def read_pgm(path) -> ObservationFrame:
    path = Path(path)
    raw = path.read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height = map(int, parts[1].split())
    data = np.frombuffer(parts[3], dtype=">u2", count=width * height).astype(float)
    meta = dict(line.split("=", 1) for line in path.with_suffix(path.suffix + ".txt").read_text().split())
    z = float(meta["offset"]) + data * float(meta["scale"])
    return ObservationFrame("tbd", z, int(meta.get("step", 0)))


def write_frame_csv(frame: ObservationFrame, model, path):
    path = Path(path)
    lines = []
    if frame.kind == "tbd":
        lines.append("cell_index,col,row,intensity")
        a, b = model.grid.cell_coords(np.arange(frame.z.size))
        for j, (ai, bi, v) in enumerate(zip(a, b, frame.z)):
            lines.append(f"{j},{int(ai)},{int(bi)},{float(v)!r}")
    else:
        lines.append("sensor_index,x,y,reading")
        for m, ((x, y), v) in enumerate(zip(model.sensor_positions, frame.z)):
            lines.append(f"{m},{float(x)!r},{float(y)!r},{float(v)!r}")
    path.write_text("\n".join(lines) + "\n")


def read_frame_csv(path, step: int = 0) -> ObservationFrame:
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    kind = "tbd" if header[0] == "cell_index" else "acoustic"
    z = [float(line.split(",")[-1]) for line in lines[1:]]
    return ObservationFrame(kind, z, step)
