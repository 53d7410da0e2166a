import json

import numpy as np
import pytest
import yaml

from lmbgom import cli, harness
from lmbgom.filters import DegenerateFrameError
from lmbgom.harness import (
    CARDINALITY_HEADER,
    OSPA_HEADER,
    TIMING_HEADER,
    ConfigError,
    ExperimentFailed,
    bundled_scenario,
    bundled_scenarios,
    config_from_dict,
    generate_truth,
    load_config,
    run_experiment,
    with_overrides,
    write_outputs,
)
from lmbgom.rfs import Label, LmbDensity, Track, lmb_to_lmo
from lmbgom.smc import RandomStream
from lmbgom.snapshot import load_snapshot, save_snapshot

BASE = {
    "name": "t",
    "duration": 6,
    "sensor": {"kind": "tbd", "width": 20, "height": 20},
    "truth": [{"birth": 0, "state": [5.0, 5.0, 0.5, 0.5]}],
    "init_tracks": "known",
    "init_cov": [0.25, 0.25, 0.01, 0.01],
    "sigma_v": 0.05,
    "truth_sigma_v": 0.0,
    "filter_config": {"n_particles": 100},
}


def cfg(**kw):
    return config_from_dict({**BASE, **kw})


def test_truth_static_object():
    c = cfg(truth=[{"birth": 0, "state": [3.0, 4.0, 0.0, 0.0]}])
    truth = generate_truth(c, RandomStream(0))
    assert all(np.array_equal(t[0][1], [3, 4, 0, 0]) for t in truth)


def test_truth_birth_window():
    c = cfg(truth=[{"birth": 5, "death": 6, "state": [3.0, 4.0, 0.0, 0.0]}], duration=8)
    truth = generate_truth(c, RandomStream(0))
    assert [len(t) for t in truth] == [0, 0, 0, 0, 0, 1, 0, 0, 0]


def test_truth_crossing_pair():
    c = cfg(truth=[{"state": [0.0, 0.0, 1.0, 1.0]}, {"state": [0.0, 10.0, 1.0, -1.0]}], duration=10)
    truth = generate_truth(c, RandomStream(0))
    a, b = truth[5][0][1], truth[5][1][1]
    np.testing.assert_allclose(a[:2], b[:2])
    np.testing.assert_allclose(a[:2], [5.0, 5.0])


@pytest.mark.parametrize(
    "bad",
    [
        {"filter": "kalman"},
        {"truth": [{"birth": 3, "death": 3, "state": [0, 0, 0, 0]}]},
        {"sensor": {"kind": "radar"}},
        {"sensor": {"kind": "tbd", "pixels": 4}},
        {"filter_config": {"n_particles": 0}},
        {"grouping": {"confidence": 1.5}},
        {"frames": "pgm", "sensor": {"kind": "acoustic"}},
        {"colour": "blue"},
    ],
)
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        cfg(**bad)


def test_missing_key():
    d = dict(BASE)
    del d["duration"]
    with pytest.raises(ConfigError):
        config_from_dict(d)


def test_resolved_echo_round_trip(tmp_path):
    for name in bundled_scenarios():
        c = bundled_scenario(name)
        again = config_from_dict(json.loads(c.to_json()))
        assert again.to_json() == c.to_json()
    path = tmp_path / "s.yaml"
    path.write_text(yaml.safe_dump(BASE))
    assert load_config(path).to_json() == cfg().to_json()


def test_snr_mapping_in_resolved_sensor():
    s = cfg().sensor.params
    assert s["noise_var"] == pytest.approx(0.0801, abs=1e-4)
    assert s["snr_db"] == pytest.approx(15.0)


def test_overrides():
    c = with_overrides(cfg(), filter="g-lmb-gom", particles=50, runs=3, seed=9)
    assert (c.filter, c.filter_config.n_particles, c.runs, c.seed) == ("g-lmb-gom", 50, 3, 9)


def _read(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.is_file()}


def test_smoke_outputs(tmp_path):
    c = cfg(runs=2, filter="g-lmb-gom")
    write_outputs(run_experiment(c), tmp_path)
    lines = (tmp_path / "ospa.csv").read_text().splitlines()
    assert lines[0] == OSPA_HEADER and len(lines) == c.duration + 1
    assert (tmp_path / "cardinality.csv").read_text().splitlines()[0] == CARDINALITY_HEADER
    timing = (tmp_path / "timing.csv").read_text().splitlines()
    assert timing[0] == TIMING_HEADER
    ms = np.array([float(l.split(",")[1]) for l in timing[1:]])
    assert np.all(np.isfinite(ms)) and np.all(ms > 0)
    tracks = [json.loads(l) for l in (tmp_path / "tracks.jsonl").read_text().splitlines()]
    assert len(tracks) == 2 * c.duration
    assert (tmp_path / "partitions.jsonl").exists()
    assert config_from_dict(json.loads((tmp_path / "config.json").read_text())).to_json() == c.to_json()


def test_same_seed_identical_outputs(tmp_path):
    c = cfg(runs=2)
    write_outputs(run_experiment(c), tmp_path / "a")
    write_outputs(run_experiment(c), tmp_path / "b")
    write_outputs(run_experiment(c, threads=2), tmp_path / "c")
    a, b, cc = _read(tmp_path / "a"), _read(tmp_path / "b"), _read(tmp_path / "c")
    for name in a:
        if name != "timing.csv":
            assert a[name] == b[name] == cc[name], name


def test_lmo_filter_runs():
    r = run_experiment(cfg(filter="lmo-gom"))
    assert r.post_transient_ospa() < 1.0


def test_failure_accounting(monkeypatch):
    real = harness.lmb_gom_step

    def flaky(prior, birth, motion, lik, frame, cfg_, rng, step=None):
        if rng.path[1] == 0:
            raise DegenerateFrameError(step)
        return real(prior, birth, motion, lik, frame, cfg_, rng, step)

    monkeypatch.setattr(harness, "lmb_gom_step", flaky)
    r = run_experiment(cfg(runs=11))
    assert r.n_failed == 1 and len(r.succeeded) == 10
    with pytest.raises(ExperimentFailed):
        run_experiment(cfg(runs=5))


def test_frames_written(tmp_path):
    run_experiment(cfg(frames="pgm"), out_dir=tmp_path)
    assert len(list((tmp_path / "frames").glob("*.pgm"))) == 6


def test_snapshot_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    lmb = LmbDensity({Label(0, 1): Track(0.7, np.full(3, 1 / 3), rng.normal(size=(3, 4))), Label(2, 1): Track(0.2, np.ones(1), np.zeros((1, 4)))})
    save_snapshot(lmb, tmp_path / "a.json")
    back = load_snapshot(tmp_path / "a.json")
    for l, t in lmb.tracks.items():
        assert back.existence(l) == t.existence
        np.testing.assert_array_equal(back.tracks[l].states, t.states)
    lmo = lmb_to_lmo(lmb)
    save_snapshot(lmo, tmp_path / "b.json")
    back = load_snapshot(tmp_path / "b.json")
    for k, h in lmo.hypotheses.items():
        assert back.hypotheses[k].weight == h.weight
        np.testing.assert_array_equal(back.hypotheses[k].joint.states, h.joint.states)
    data = json.loads((tmp_path / "a.json").read_text())
    data["version"] = 99
    (tmp_path / "a.json").write_text(json.dumps(data))
    with pytest.raises(ValueError):
        load_snapshot(tmp_path / "a.json")


def test_cli_run_simulate_ospa(tmp_path, capsys):
    path = tmp_path / "s.yaml"
    path.write_text(yaml.safe_dump(BASE))
    assert cli.main(["run", "--config", str(path), "--out", str(tmp_path / "o"), "--runs", "1", "--seed", "3"]) == 0
    assert cli.main(["ospa", str(tmp_path / "o" / "tracks.jsonl"), str(tmp_path / "o" / "truth.jsonl"), "--out", str(tmp_path / "x.csv")]) == 0
    assert (tmp_path / "x.csv").read_text() == (tmp_path / "o" / "ospa.csv").read_text()
    assert cli.main(["simulate", "--config", str(path), "--out", str(tmp_path / "sim")]) == 0
    assert len(list((tmp_path / "sim" / "frames").glob("*.csv"))) == 6


def test_cli_errors(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)]) != 0
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: x\nduration: [\n")
    assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path)]) != 0
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["run", "--config", "smoke", "--out", str(tmp_path), "--particles", "0"])
