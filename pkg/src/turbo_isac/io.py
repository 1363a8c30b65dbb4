"""JSON key-value schema for scenes, pilots, observations and scenario configs.

Complex arrays are written as lists of [re, im] pairs; real arrays as plain lists.
Every document carries a ``"kind"`` key naming the object it holds.
"""

from __future__ import annotations

import json
from dataclasses import asdict, fields

import numpy as np

from .estep import EstepConfig
from .geometry import AngularGrid
from .harness import ScenarioConfig
from .mstep import MstepConfig
from .observation import Observation, PilotSet
from .pilots import PilotOptConfig
from .scene import ConfigurationError, HmmParams, SceneTruth, SupportTriple


def complex_to_pairs(z) -> list:
    z = np.asarray(z, complex).reshape(-1)
    return [[float(v.real), float(v.imag)] for v in z]


def pairs_to_complex(pairs) -> np.ndarray:
    arr = np.asarray(pairs, float).reshape(-1, 2)
    return arr[:, 0] + 1j * arr[:, 1]


def scene_to_dict(scene: SceneTruth) -> dict:
    return {"kind": "scene", "m": scene.m, "theta": [float(t) for t in scene.grid_truth.theta],
            "s": scene.support.s.astype(int).tolist(), "s_r": scene.support.s_r.astype(int).tolist(),
            "s_c": scene.support.s_c.astype(int).tolist(),
            "x_r": complex_to_pairs(scene.x_r), "x_c": complex_to_pairs(scene.x_c)}


def scene_from_dict(d: dict) -> SceneTruth:
    _expect(d, "scene")
    support = SupportTriple(np.array(d["s"], bool), np.array(d["s_r"], bool), np.array(d["s_c"], bool))
    return SceneTruth(AngularGrid(np.array(d["theta"], float)), support,
                      pairs_to_complex(d["x_r"]), pairs_to_complex(d["x_c"]))


def pilots_to_dict(p: PilotSet) -> dict:
    return {"kind": "pilots", "m": p.m, "power_budget": float(p.power_budget),
            "dp_stage1": [complex_to_pairs(v) for v in p.dp_stage1],
            "dp_stage2": [complex_to_pairs(v) for v in p.dp_stage2],
            "up": complex_to_pairs(p.up)}


def pilots_from_dict(d: dict) -> PilotSet:
    _expect(d, "pilots")
    m = int(d["m"])
    dp1 = np.array([pairs_to_complex(v) for v in d["dp_stage1"]]).reshape(-1, m)
    dp2 = np.array([pairs_to_complex(v) for v in d["dp_stage2"]]).reshape(-1, m)
    return PilotSet(dp1, dp2, pairs_to_complex(d["up"]), float(d["power_budget"]))


def observation_to_dict(obs: Observation) -> dict:
    return {"kind": "observation", "y_r": complex_to_pairs(obs.y_r), "y_c": complex_to_pairs(obs.y_c),
            "noise_var_r": obs.noise_var_r, "noise_var_c": obs.noise_var_c}


def observation_from_dict(d: dict) -> Observation:
    _expect(d, "observation")
    return Observation(pairs_to_complex(d["y_r"]), pairs_to_complex(d["y_c"]),
                       float(d["noise_var_r"]), float(d["noise_var_c"]))


_NESTED = {"estep": EstepConfig, "mstep": MstepConfig, "pilot": PilotOptConfig}


def config_to_dict(cfg: ScenarioConfig) -> dict:
    out = {"kind": "scenario"}
    for f in fields(cfg):
        val = getattr(cfg, f.name)
        if f.name in _NESTED:
            val = asdict(val)
        elif f.name == "hmm":
            val = None if val is None else {k: getattr(val, k) for k in
                                            ("rho01", "rho10", "rho_r", "rho_c_cond", "var_r", "var_c")}
        elif isinstance(val, tuple):
            val = list(val)
        out[f.name] = val
    return out


def config_from_dict(d: dict) -> ScenarioConfig:
    """Scenario config from a (possibly partial) mapping; missing keys take defaults."""
    d = dict(d)
    if d.pop("kind", "scenario") != "scenario":
        raise ConfigurationError("document is not a scenario config")
    known = {f.name for f in fields(ScenarioConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
    for name, cls in _NESTED.items():
        if name in d and isinstance(d[name], dict):
            try:
                d[name] = cls(**d[name])
            except TypeError as exc:
                raise ConfigurationError(f"bad {name} section: {exc}") from exc
    if d.get("hmm") is not None:
        d["hmm"] = HmmParams(**d["hmm"])
    try:
        return ScenarioConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc


_LOADERS = {"scene": scene_from_dict, "pilots": pilots_from_dict,
            "observation": observation_from_dict, "scenario": config_from_dict}


def _expect(d, kind):
    if d.get("kind") != kind:
        raise ConfigurationError(f"expected a {kind!r} document, got {d.get('kind')!r}")


def dumps(obj) -> str:
    for cls, fn in ((SceneTruth, scene_to_dict), (PilotSet, pilots_to_dict),
                    (Observation, observation_to_dict), (ScenarioConfig, config_to_dict)):
        if isinstance(obj, cls):
            return json.dumps(fn(obj), indent=1)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def loads(text: str):
    d = json.loads(text)
    kind = d.get("kind", "scenario")
    if kind not in _LOADERS:
        raise ConfigurationError(f"unknown document kind {kind!r}")
    return _LOADERS[kind](d)


def save(obj, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(obj))


def load(path):
    with open(path) as fh:
        return loads(fh.read())
