"""Scenario configuration, truth simulation and the Monte-Carlo experiment driver.

A scenario is a YAML (or JSON) mapping; :func:`load_config` validates it and
fills defaults, and :meth:`ScenarioConfig.to_dict` produces the resolved
form that is echoed next to every output as canonical JSON. Loading that echo
reproduces the experiment exactly.
"""
from __future__ import annotations

import json
import logging
import math
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .filters import (
    DegenerateFrameError,
    FilterConfig,
    GroupedStepInfo,
    g_lmb_gom_step,
    gaussian_track,
    lmb_gom_step,
    lmo_gom_step,
)
from .grouping import GroupingConfig
from .metrics import OspaParams, ospa
from .motion import BirthComponent, BirthModel, MotionModel
from .rfs import Label, LmbDensity, TooManyLabelsError, best_lmb_approx, lmb_to_lmo
from .sensors import AcousticModel, PixelGrid, TbdModel, noise_var_for_snr, peak_intensity, write_frame_csv, write_pgm
from .smc import RandomStream
from .snapshot import save_snapshot

log = logging.getLogger(__name__)

FILTERS = ("lmo-gom", "lmb-gom", "g-lmb-gom")
FRAME_FORMATS = ("none", "pgm", "csv")
DEFAULT_INIT_COV = (2.0, 2.0, 0.5, 0.5)
MAX_FAILED_FRACTION = 0.10

OSPA_HEADER = "step,mean_ospa_m,stderr_m"
CARDINALITY_HEADER = "step,mean_est_cardinality,true_cardinality"
TIMING_HEADER = "step,mean_frame_ms"


class ConfigError(ValueError):
    pass


class ExperimentFailed(RuntimeError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

_TBD_KEYS = {"width": 50, "height": 50, "dx": 1.0, "dy": 1.0, "source_intensity": 10.0, "blur_var": 1.0, "snr_db": 15.0, "noise_var": None, "template_half": 3}
_ACOUSTIC_KEYS = {"n_side": 15, "extent": 140.0, "positions": None, "amplitude": 10.0, "path_loss": 1.0, "noise_var": 0.1, "min_range": None, "vor_radius": 45.0}


def _cov(value, dim=4) -> np.ndarray:
    a = np.asarray(value, dtype=float)
    if a.ndim == 1:
        if a.size != dim:
            raise ConfigError(f"covariance diagonal needs {dim} entries")
        return np.diag(a)
    if a.shape != (dim, dim):
        raise ConfigError(f"covariance must be {dim}x{dim}")
    return a


def _plain(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, np.generic):
        return value.item()
    return value


@dataclass(frozen=True)
class SensorSpec:
    kind: str
    params: dict

    @classmethod
    def from_dict(cls, d: dict) -> "SensorSpec":
        d = dict(d)
        kind = d.pop("kind", None)
        defaults = {"tbd": _TBD_KEYS, "acoustic": _ACOUSTIC_KEYS}.get(kind)
        if defaults is None:
            raise ConfigError("sensor.kind must be 'tbd' or 'acoustic'")
        unknown = set(d) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown sensor keys: {sorted(unknown)}")
        params = {**defaults, **d}
        if kind == "tbd":
            peak = peak_intensity(PixelGrid(params["width"], params["height"], params["dx"], params["dy"]), params["source_intensity"], params["blur_var"])
            if params["noise_var"] is None:
                params["noise_var"] = noise_var_for_snr(peak, params["snr_db"])
            params["snr_db"] = 10.0 * math.log10(peak**2 / params["noise_var"])
        else:
            if params["positions"] is not None:
                params["positions"] = [[float(x), float(y)] for x, y in params["positions"]]
                params["n_side"] = params["extent"] = None
            if params["min_range"] is None:
                if params["positions"] is not None:
                    raise ConfigError("min_range is required with explicit sensor positions")
                params["min_range"] = 0.5 * params["extent"] / (params["n_side"] - 1)
        return cls(kind, params)

    def build(self):
        p = self.params
        if self.kind == "tbd":
            grid = PixelGrid(p["width"], p["height"], p["dx"], p["dy"])
            return TbdModel(grid, p["source_intensity"], p["blur_var"], p["noise_var"], p["template_half"])
        kw = {k: p[k] for k in ("amplitude", "path_loss", "noise_var", "min_range", "vor_radius")}
        if p["positions"] is not None:
            return AcousticModel(np.asarray(p["positions"]), **kw)
        return AcousticModel.grid(p["n_side"], p["extent"], **kw)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **_plain(self.params)}


@dataclass(frozen=True)
class TruthObject:
    birth: int
    death: int
    state: tuple[float, ...]


@dataclass(frozen=True)
class InitTrack:
    label: tuple[int, int]
    existence: float
    mean: tuple[float, ...]
    cov: tuple[tuple[float, ...], ...]


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    sensor: SensorSpec
    duration: int
    truth: tuple[TruthObject, ...]
    dt: float = 1.0
    sigma_v: float = 0.1
    survival: float = 0.98
    truth_sigma_v: float | None = None
    birth: tuple[dict, ...] = ()
    init_tracks: tuple[InitTrack, ...] = ()
    runs: int = 1
    seed: int = 0
    filter: str = "lmb-gom"
    filter_config: FilterConfig = field(default_factory=FilterConfig)
    grouping: GroupingConfig = field(default_factory=GroupingConfig)
    ospa: OspaParams = field(default_factory=OspaParams)
    transient: int = 4
    frames: str = "none"
    snapshot: bool = False

    def __post_init__(self):
        if self.duration < 1 or self.runs < 1:
            raise ConfigError("duration and runs must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.filter not in FILTERS:
            raise ConfigError(f"filter must be one of {FILTERS}")
        if self.frames not in FRAME_FORMATS:
            raise ConfigError(f"frames must be one of {FRAME_FORMATS}")
        if self.frames == "pgm" and self.sensor.kind != "tbd":
            raise ConfigError("PGM frames need a TBD sensor")
        for obj in self.truth:
            if obj.death <= obj.birth or obj.birth < 0:
                raise ConfigError(f"invalid truth window [{obj.birth}, {obj.death})")
            if len(obj.state) != 4:
                raise ConfigError("truth states are 4-vectors [px, py, vx, vy]")

    # -- model construction --

    def motion(self) -> MotionModel:
        return MotionModel.constant_velocity(self.dt, self.sigma_v, self.survival)

    def truth_motion(self) -> MotionModel:
        sv = self.sigma_v if self.truth_sigma_v is None else self.truth_sigma_v
        return MotionModel.constant_velocity(self.dt, sv, 1.0)

    def birth_model(self) -> BirthModel:
        return BirthModel(tuple(BirthComponent(c["existence"], np.asarray(c["mean"], float), np.asarray(c["cov"], float)) for c in self.birth))

    # -- (de)serialization --

    def to_dict(self) -> dict:
        return _plain(
            {
                "name": self.name,
                "sensor": self.sensor.to_dict(),
                "duration": self.duration,
                "dt": self.dt,
                "sigma_v": self.sigma_v,
                "survival": self.survival,
                "truth_sigma_v": self.truth_sigma_v,
                "truth": [{"birth": o.birth, "death": o.death, "state": list(o.state)} for o in self.truth],
                "birth": [dict(c) for c in self.birth],
                "init_tracks": [asdict(t) for t in self.init_tracks],
                "runs": self.runs,
                "seed": self.seed,
                "filter": self.filter,
                "filter_config": asdict(self.filter_config),
                "grouping": asdict(self.grouping),
                "ospa": asdict(self.ospa),
                "transient": self.transient,
                "frames": self.frames,
                "snapshot": self.snapshot,
            }
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def _section(cls, d):
    d = d or {}
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_from_dict(d: dict) -> ScenarioConfig:
    d = dict(d)
    known = {f.name for f in fields(ScenarioConfig)}
    unknown = set(d) - known - {"init_existence", "init_cov"}
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    for key in ("name", "sensor", "duration", "truth"):
        if key not in d:
            raise ConfigError(f"missing required key {key!r}")
    truth = tuple(TruthObject(int(o.get("birth", 0)), int(o.get("death", d["duration"] + 1)), tuple(float(v) for v in o["state"])) for o in d["truth"])

    birth = d.get("birth") or ()
    if birth == "none":
        birth = ()
    birth = tuple(
        {"existence": float(c["existence"]), "mean": [float(v) for v in c["mean"]], "cov": _cov(c.get("cov", [2.0] * 4)).tolist()}
        for c in birth
    )

    init = d.get("init_tracks") or ()
    init_existence = float(d.pop("init_existence", 0.99))
    init_cov = _cov(d.pop("init_cov", DEFAULT_INIT_COV))
    if init == "known":
        # Tracks seeded around every object alive at step 0.
        init = [
            {"label": [0, i + 1], "existence": init_existence, "mean": list(o.state), "cov": init_cov.tolist()}
            for i, o in enumerate(o for o in truth if o.birth == 0)
        ]
    init = tuple(
        InitTrack(
            tuple(int(v) for v in t["label"]),
            float(t.get("existence", init_existence)),
            tuple(float(v) for v in t["mean"]),
            tuple(tuple(r) for r in _cov(t.get("cov", init_cov)).tolist()),
        )
        for t in init
    )
    return ScenarioConfig(
        name=str(d["name"]),
        sensor=SensorSpec.from_dict(d["sensor"]),
        duration=int(d["duration"]),
        truth=truth,
        dt=float(d.get("dt", 1.0)),
        sigma_v=float(d.get("sigma_v", 0.1)),
        survival=float(d.get("survival", 0.98)),
        truth_sigma_v=None if d.get("truth_sigma_v") is None else float(d["truth_sigma_v"]),
        birth=birth,
        init_tracks=init,
        runs=int(d.get("runs", 1)),
        seed=int(d.get("seed", 0)),
        filter=str(d.get("filter", "lmb-gom")),
        filter_config=_section(FilterConfig, d.get("filter_config")),
        grouping=_section(GroupingConfig, d.get("grouping")),
        ospa=_section(OspaParams, d.get("ospa")),
        transient=int(d.get("transient", 4)),
        frames=str(d.get("frames", "none")),
        snapshot=bool(d.get("snapshot", False)),
    )


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return config_from_dict(data)


def bundled_scenarios() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("lmbgom.scenarios").iterdir() if p.name.endswith(".yaml"))


def bundled_scenario(name: str) -> ScenarioConfig:
    res = resources.files("lmbgom.scenarios") / f"{name}.yaml"
    if not res.is_file():
        raise ConfigError(f"no bundled scenario {name!r}; available: {', '.join(bundled_scenarios())}")
    return config_from_dict(yaml.safe_load(res.read_text()))


def resolve_config(ref: str) -> ScenarioConfig:
    """A path to a scenario file, or the name of a bundled scenario."""
    if Path(ref).exists():
        return load_config(ref)
    return bundled_scenario(ref)


# --------------------------------------------------------------------------
# truth and single runs
# --------------------------------------------------------------------------


def generate_truth(config: ScenarioConfig, rng) -> list[list[tuple[int, np.ndarray]]]:
    """Per step ``0..duration``, the ``(object index, state)`` pairs alive then."""
    stream = rng if isinstance(rng, RandomStream) else RandomStream(int(rng))
    motion = config.truth_motion()
    out: list[list[tuple[int, np.ndarray]]] = [[] for _ in range(config.duration + 1)]
    for i, obj in enumerate(config.truth):
        gen = stream.child("object", i).generator()
        x = np.asarray(obj.state, float)
        for k in range(obj.birth, min(obj.death, config.duration + 1)):
            if k > obj.birth:
                x = motion.propagate(x, gen)
            out[k].append((i, x))
    return out


def initial_tracks(config: ScenarioConfig, stream: RandomStream) -> LmbDensity:
    n = config.filter_config.n_particles
    tracks = {}
    for t in config.init_tracks:
        label = Label(*t.label)
        tracks[label] = gaussian_track(t.mean, np.asarray(t.cov), t.existence, n, stream.child("track", t.label).generator())
    return LmbDensity(tracks)


@dataclass
class RunResult:
    run: int
    ospa: np.ndarray
    est_cardinality: np.ndarray
    true_cardinality: np.ndarray
    frame_ms: np.ndarray
    groups: np.ndarray
    tracks: list
    partitions: list
    failed: bool = False
    error: str = ""


def _positions(states) -> np.ndarray:
    return np.array([s[:2] for s in states]).reshape(-1, 2)


def run_single(config: ScenarioConfig, run: int, out_dir: Path | None = None) -> RunResult:
    stream = RandomStream(config.seed).child("run", run)
    sensor = config.sensor.build()
    motion = config.motion()
    birth = config.birth_model()
    cfg = config.filter_config
    truth = generate_truth(config, stream.child("truth"))
    T = config.duration
    result = RunResult(run, np.zeros(T), np.zeros(T, int), np.zeros(T, int), np.zeros(T), np.zeros(T, int), [], [])
    state = initial_tracks(config, stream.child("init"))
    if config.filter == "lmo-gom":
        state = lmb_to_lmo(state, cfg.n_particles, stream.child("init", "lmo").generator())
    frame_dir = None
    if out_dir is not None and config.frames != "none" and run == 0:
        frame_dir = out_dir / "frames"
        frame_dir.mkdir(parents=True, exist_ok=True)
    try:
        for k in range(1, T + 1):
            X = np.array([x for _, x in truth[k]]).reshape(-1, 4)
            frame = sensor.sample_frame(X, stream.child("frame", k).generator(), step=k)
            if frame_dir is not None:
                if config.frames == "pgm":
                    write_pgm(frame, sensor.grid, frame_dir / f"frame_{k:04d}.pgm")
                else:
                    write_frame_csv(frame, sensor, frame_dir / f"frame_{k:04d}.csv")
            fs = stream.child("filter", k)
            info: list[GroupedStepInfo] = []
            t0 = time.perf_counter()
            if config.filter == "lmo-gom":
                state = lmo_gom_step(state, birth, motion, sensor, frame, cfg, fs, step=k)
            elif config.filter == "lmb-gom":
                state = lmb_gom_step(state, birth, motion, sensor, frame, cfg, fs, step=k)
            else:
                state = g_lmb_gom_step(state, birth, motion, sensor, frame, config.grouping, cfg, fs, step=k, info=info)
            result.frame_ms[k - 1] = 1e3 * (time.perf_counter() - t0)
            lmb = best_lmb_approx(state) if config.filter == "lmo-gom" else state
            records = []
            est = []
            for label, t in lmb.tracks.items():
                mean = t.mean()
                extracted = t.existence > cfg.extraction_threshold
                if extracted:
                    est.append(mean[:2])
                records.append({"label": label.as_list(), "existence": float(t.existence), "position": [float(mean[0]), float(mean[1])], "extracted": extracted})
            result.tracks.append({"run": run, "step": k, "tracks": records})
            result.ospa[k - 1] = ospa(_positions(est), _positions(X), config.ospa)
            result.est_cardinality[k - 1] = len(est)
            result.true_cardinality[k - 1] = len(X)
            if info:
                part = info[0].partition
                result.groups[k - 1] = len(part.groups)
                result.partitions.append(
                    {"run": run, "step": k, "groups": part.describe(), "residual": int(part.residual.size), "failed_groups": list(info[0].failed_groups)}
                )
    except (DegenerateFrameError, TooManyLabelsError, FloatingPointError) as exc:
        log.warning("run %d failed: %s", run, exc)
        result.failed = True
        result.error = str(exc)
        return result
    if out_dir is not None and config.snapshot and run == 0:
        save_snapshot(state, out_dir / "state_run0.json")
    return result


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    config: ScenarioConfig
    runs: list[RunResult]
    truth: list = field(default_factory=list)

    @property
    def succeeded(self) -> list[RunResult]:
        return [r for r in self.runs if not r.failed]

    @property
    def n_failed(self) -> int:
        return sum(r.failed for r in self.runs)

    def _stack(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.succeeded], dtype=float)

    def mean_ospa(self) -> np.ndarray:
        return self._stack("ospa").mean(axis=0)

    def stderr_ospa(self) -> np.ndarray:
        o = self._stack("ospa")
        if len(o) < 2:
            return np.zeros(o.shape[1])
        return o.std(axis=0, ddof=1) / math.sqrt(len(o))

    def post_transient(self) -> slice:
        return slice(self.config.transient, self.config.duration)

    def post_transient_ospa(self) -> float:
        return float(self.mean_ospa()[self.post_transient()].mean())

    def cardinality_accuracy(self) -> float:
        """Fraction of post-transient (run, step) pairs with the exact count."""
        sl = self.post_transient()
        est, true = self._stack("est_cardinality")[:, sl], self._stack("true_cardinality")[:, sl]
        return float(np.mean(est == true))

    def mean_frame_ms(self) -> np.ndarray:
        return self._stack("frame_ms").mean(axis=0)

    def summary(self) -> dict:
        return {
            "name": self.config.name,
            "filter": self.config.filter,
            "runs": len(self.runs),
            "failed_runs": self.n_failed,
            "post_transient_first_step": self.config.transient + 1,
            "post_transient_mean_ospa_m": self.post_transient_ospa(),
            "cardinality_accuracy": self.cardinality_accuracy(),
            "mean_groups": float(self._stack("groups").mean()),
        }


def _worker(args):
    config, run, out_dir = args
    return run_single(config, run, None if out_dir is None else Path(out_dir))


def run_experiment(config: ScenarioConfig, threads: int = 1, out_dir=None) -> ExperimentResult:
    """Run every Monte-Carlo repetition; ``threads`` worker processes share the runs.

    Each run owns a stream derived from ``(seed, run index)`` and results are
    reduced in run order, so the outcome does not depend on ``threads``.
    """
    if threads < 1:
        raise ValueError("threads must be positive")
    jobs = [(config, r, None if out_dir is None else str(out_dir)) for r in range(config.runs)]
    if threads == 1 or config.runs == 1:
        runs = [_worker(j) for j in jobs]
    else:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(min(threads, config.runs), mp_context=ctx) as pool:
            runs = list(pool.map(_worker, jobs))
    result = ExperimentResult(config, runs, generate_truth(config, RandomStream(config.seed).child("run", 0).child("truth")))
    failed = result.n_failed
    if failed:
        log.warning("%d of %d runs failed and are excluded from aggregates", failed, config.runs)
    if failed > MAX_FAILED_FRACTION * config.runs or failed == config.runs:
        raise ExperimentFailed(f"{failed} of {config.runs} runs failed: {runs[[r.failed for r in runs].index(True)].error}")
    return result


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def _write(path: Path, text: str):
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def write_truth(config: ScenarioConfig, out_dir, runs=None) -> Path:
    """``truth.jsonl``: one object per (run, step) with every live object's state."""
    out_dir = Path(out_dir)
    lines = []
    for r in range(config.runs) if runs is None else runs:
        truth = generate_truth(config, RandomStream(config.seed).child("run", r).child("truth"))
        for k in range(1, config.duration + 1):
            objs = [{"id": i, "state": [float(v) for v in x]} for i, x in truth[k]]
            lines.append(json.dumps({"run": r, "step": k, "objects": objs}, sort_keys=True))
    path = out_dir / "truth.jsonl"
    _write(path, "\n".join(lines) + "\n")
    return path


def write_outputs(result: ExperimentResult, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    steps = range(1, cfg.duration + 1)
    mean, se = result.mean_ospa(), result.stderr_ospa()
    est = result._stack("est_cardinality").mean(axis=0)
    true = result._stack("true_cardinality").mean(axis=0)
    ms = result.mean_frame_ms()
    written = []

    def emit(name, text):
        path = out_dir / name
        _write(path, text)
        written.append(path)

    emit("ospa.csv", "\n".join([OSPA_HEADER] + [f"{k},{_fmt(m)},{_fmt(s)}" for k, m, s in zip(steps, mean, se)]) + "\n")
    emit("cardinality.csv", "\n".join([CARDINALITY_HEADER] + [f"{k},{_fmt(e)},{_fmt(t)}" for k, e, t in zip(steps, est, true)]) + "\n")
    emit("timing.csv", "\n".join([TIMING_HEADER] + [f"{k},{_fmt(m)}" for k, m in zip(steps, ms)]) + "\n")
    emit("tracks.jsonl", "".join(json.dumps(rec, sort_keys=True) + "\n" for r in result.runs for rec in r.tracks))
    emit("config.json", cfg.to_json() + "\n")
    emit("summary.json", json.dumps(result.summary(), sort_keys=True, indent=1) + "\n")
    if cfg.filter == "g-lmb-gom":
        emit("partitions.jsonl", "".join(json.dumps(p, sort_keys=True) + "\n" for r in result.runs for p in r.partitions))
    failures = [{"run": r.run, "error": r.error} for r in result.runs if r.failed]
    if failures:
        emit("failures.jsonl", "".join(json.dumps(f, sort_keys=True) + "\n" for f in failures))
    written.append(write_truth(cfg, out_dir))
    return written


def with_overrides(config: ScenarioConfig, filter: str | None = None, particles: int | None = None, runs: int | None = None, seed: int | None = None) -> ScenarioConfig:
    changes = {}
    if filter is not None:
        changes["filter"] = filter
    if particles is not None:
        changes["filter_config"] = replace(config.filter_config, n_particles=particles)
    if runs is not None:
        changes["runs"] = runs
    if seed is not None:
        changes["seed"] = seed
    if not changes:
        return config
    try:
        return replace(config, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
