"""Versioned JSON snapshots of filter states (checkpoint and replay)."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .rfs import Hypothesis, JointParticleSet, Label, LmbDensity, LmoDensity, Track

FORMAT = "lmbgom-state"
VERSION = 1


def _label(l: Label) -> list[int]:
    return l.as_list()


def to_snapshot(density) -> dict:
    if isinstance(density, LmbDensity):
        return {
            "format": FORMAT,
            "version": VERSION,
            "kind": "lmb",
            "tracks": [
                {
                    "label": _label(l),
                    "existence": t.existence,
                    "weights": t.weights.tolist(),
                    "states": t.states.tolist(),
                }
                for l, t in density.tracks.items()
            ],
        }
    if isinstance(density, LmoDensity):
        return {
            "format": FORMAT,
            "version": VERSION,
            "kind": "lmo",
            "dim": density.dim,
            "hypotheses": [
                {
                    "labels": [_label(l) for l in key],
                    "weight": h.weight,
                    "particle_weights": h.joint.weights.tolist(),
                    "states": h.joint.states.tolist(),
                }
                for key, h in density.hypotheses.items()
            ],
        }
    raise TypeError(f"cannot snapshot {type(density).__name__}")


def from_snapshot(data: dict):
    if data.get("format") != FORMAT:
        raise ValueError("not a filter-state snapshot")
    if data.get("version") != VERSION:
        raise ValueError(f"unsupported snapshot version {data.get('version')!r}")
    if data["kind"] == "lmb":
        return LmbDensity(
            {
                Label(*t["label"]): Track(t["existence"], np.asarray(t["weights"], float), np.asarray(t["states"], float))
                for t in data["tracks"]
            }
        )
    if data["kind"] == "lmo":
        dim = data["dim"]
        hyps = {}
        for h in data["hypotheses"]:
            key = tuple(Label(*l) for l in h["labels"])
            states = np.asarray(h["states"], float).reshape(len(h["particle_weights"]), len(key), dim)
            hyps[key] = Hypothesis(h["weight"], JointParticleSet(key, np.asarray(h["particle_weights"], float), states))
        return LmoDensity(hyps)
    raise ValueError(f"unknown snapshot kind {data['kind']!r}")


def save_snapshot(density, path) -> None:
    Path(path).write_text(json.dumps(to_snapshot(density)))


def load_snapshot(path):
    return from_snapshot(json.loads(Path(path).read_text()))
