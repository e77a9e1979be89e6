"""Run configuration: nested JSON blocks with defaults and a stable hash."""
from __future__ import annotations

import copy
import hashlib
import json

from .exceptions import ConfigError

DEFAULTS = {
    "seed": 0,
    "threads": None,
    "deterministic": False,
    "geometry": {
        "dims": [64, 64],
        "extent": [1.0, 1.0],
        "fiber_angle": 0.0,
    },
    "monodomain": {
        "sigmas": [2e-3, 4e-4, 4e-4],
        "lambda": 1.0,
        "chi": 1.0,
        "c_m": 1.0,
        "dt": 0.05,
        "t_end": 600.0,
        "cg_tol": 1e-8,
        "v_act": 20.0,
        "v_rep": 10.0,
        "ionic": {"G": 1.5, "eta1": 4.4, "eta2": 0.012, "eta3": 1.0, "v_th": 13.0, "v_p": 100.0},
    },
    "stimulus": {
        "radius_range": [0.05, 0.05],
        "intensity": 100.0,
        "duration": 1.0,
    },
    "kol": {
        "kernel": "iq4",
        "reg": 1e-10,
        "cholesky": "blocked",
        "target": "activation",
    },
    "fno": {
        "layers": 4,
        "width": 32,
        "modes": None,
        "q_hidden": 128,
        "activation": "gelu",
        "lr0": 1e-3,
        "batch_size": 20,
        "epochs": 300,
        "plateau_factor": 0.95,
        "min_lr": 1e-6,
        "target": "activation",
    },
    "eval": {
        "bin_count": 20,
        "threshold": 0.04,
        "repeats": 5,
    },
    "paths": {
        "out_dir": ".",
    },
}

# blocks whose values are free-form (not checked key by key)
_OPAQUE = {("kol", "kernel")}


def _merge(base, override, path=()):
    for key, value in override.items():
        where = ".".join(path + (key,))
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict) and path + (key,) not in _OPAQUE:
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{where}' must be an object")
            _merge(base[key], value, path + (key,))
        else:
            base[key] = value
    return base


def resolve(overrides: dict | None = None) -> dict:
    """Defaults updated by ``overrides``; unknown keys raise ConfigError."""
    return _merge(copy.deepcopy(DEFAULTS), overrides or {})


def load(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return resolve(data)


def set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key '{dotted}'")
    node[keys[-1]] = value


def config_hash(cfg: dict) -> str:
    """Short digest of everything but ``paths`` (output locations do not change results)."""
    content = {k: v for k, v in cfg.items() if k != "paths"}
    blob = json.dumps(content, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- builders

def build_geometry(cfg: dict):
    from .geometry import build_structured

    g = cfg["geometry"]
    return build_structured(g["dims"], g["extent"])


def build_conductivity(cfg: dict, geometry):
    from .geometry import assemble_conductivity, axis_fibers, rotated_fibers

    m = cfg["monodomain"]
    angle = cfg["geometry"]["fiber_angle"]
    fibers = rotated_fibers(geometry, angle) if angle else axis_fibers(geometry)
    return assemble_conductivity(fibers, m["sigmas"][: geometry.ndim], m["lambda"])


def build_monodomain(cfg: dict):
    from .ionic import IonicParams
    from .monodomain import MonodomainConfig

    m = cfg["monodomain"]
    return MonodomainConfig(chi=m["chi"], c_m=m["c_m"], dt=m["dt"], t_end=m["t_end"],
                            cg_tol=m["cg_tol"], v_act=m["v_act"], v_rep=m["v_rep"],
                            ionic=IonicParams(**m["ionic"]))


def build_stimulus(cfg: dict):
    from .dataset import StimulusConfig

    s = cfg["stimulus"]
    return StimulusConfig(tuple(s["radius_range"]), s["intensity"], s["duration"])
