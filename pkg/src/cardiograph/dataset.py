"""Random stimulus sampling, dataset generation, splitting and persistence."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__, epds
from .exceptions import ConfigError, EmptyMask, NoActivation, TooSmall
from .geometry import ConductivityField, Geometry, build_structured, point_cloud
from .monodomain import MonodomainConfig, MonodomainSolver, Stimulus

# named RNG substreams (first element of the SeedSequence spawn key)
STREAM_STIMULUS = 0
STREAM_SHUFFLE = 1
STREAM_INIT = 2
STREAM_BATCH = 3


def substream(seed: int, stream: int, counter: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(stream, counter)))


@dataclass(frozen=True)
class StimulusConfig:
    radius_range: tuple = (0.05, 0.05)
    intensity: float = 100.0
    duration: float = 1.0

    def __post_init__(self):
        lo, hi = self.radius_range
        if not (0 < lo <= hi < 0.5):
            raise ConfigError(f"radius_range must lie in (0, 0.5), got {self.radius_range}")


@dataclass(frozen=True, eq=False)
class SampledStimulus:
    stimulus: Stimulus
    center: np.ndarray
    radius: float


def sample_stimulus(seed: int, counter: int, geometry: Geometry,
                    cfg: StimulusConfig = StimulusConfig()) -> SampledStimulus:
    """Disk (2D) or ball (3D) stimulus drawn from substream ``(seed, counter)``.

    The radius is a fraction of the largest domain extent; the center keeps
    a margin of ``r`` (capped at half the axis length) from every face.
    """
    rng = substream(seed, STREAM_STIMULUS, counter)
    lo_x = geometry.coords.min(axis=0)
    hi_x = geometry.coords.max(axis=0)
    span = hi_x - lo_x
    r = rng.uniform(*cfg.radius_range) * span.max()
    if geometry.is_structured and r < max(geometry.spacing):
        raise EmptyMask(f"radius {r:.4g} below grid spacing {max(geometry.spacing):.4g}")
    margin = np.minimum(r, span / 2)
    center = rng.uniform(lo_x + margin, hi_x - margin)
    mask = np.linalg.norm(geometry.coords - center, axis=1) <= r
    if not mask.any():
        raise EmptyMask(f"no node within radius {r:.4g} of {center}")
    return SampledStimulus(Stimulus(mask, cfg.intensity, cfg.duration), center, r)


@dataclass(eq=False)
class Dataset:
    geometry: Geometry
    inputs: np.ndarray
    activation: np.ndarray
    repolarization: np.ndarray
    valid: np.ndarray
    centers: np.ndarray
    radii: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx):
        idx = np.asarray(idx)
        if idx.size == 0:
            idx = idx.astype(np.int64)
        return Dataset(self.geometry, self.inputs[idx], self.activation[idx],
                       self.repolarization[idx], self.valid[idx], self.centers[idx],
                       self.radii[idx], dict(self.meta))

    def target(self, name: str) -> np.ndarray:
        if name in ("activation", "acti"):
            return self.activation
        if name in ("repolarization", "repo"):
            return self.repolarization
        raise ConfigError(f"unknown target '{name}'")


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    test: np.ndarray


def _simulate_one(solver, seed, i, geometry, stim_cfg):
    s = sample_stimulus(seed, i, geometry, stim_cfg)
    try:
        maps = solver.simulate(s.stimulus)
    except NoActivation as exc:
        raise NoActivation(str(exc), sample_index=i) from exc
    return s, maps


def generate(n: int, geometry: Geometry, cond: ConductivityField,
             cfg: MonodomainConfig = None, seed: int = 0,
             stim_cfg: StimulusConfig = StimulusConfig(), n_jobs: int = 1,
             indices=None, meta: dict | None = None) -> Dataset:
    """Simulate ``n`` random stimuli; row ``i`` depends only on ``(seed, i)``."""
    if n < 1:
        raise TooSmall("need at least one sample")
    cfg = cfg or MonodomainConfig()
    indices = list(range(n)) if indices is None else list(indices)
    solver = MonodomainSolver(geometry, cond, cfg)
    if n_jobs == 1:
        results = [_simulate_one(solver, seed, i, geometry, stim_cfg) for i in indices]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(
            delayed(_simulate_one)(solver, seed, i, geometry, stim_cfg) for i in indices)
    inputs = np.stack([s.stimulus.mask.astype(float) for s, _ in results])
    act = np.stack([m.activation for _, m in results])
    rep = np.stack([m.repolarization for _, m in results])
    valid = np.stack([m.valid for _, m in results])
    centers = np.stack([s.center for s, _ in results])
    radii = np.array([s.radius for s, _ in results])
    info = {
        "seed": int(seed),
        "tool_version": __version__,
        "monodomain": _jsonable(asdict(cfg)),
        "stimulus": _jsonable(asdict(stim_cfg)),
        "conductivity": {"sigmas": list(cond.sigmas), "lambda": cond.lam},
    }
    info.update(meta or {})
    return Dataset(geometry, inputs, act, rep, valid, centers, radii, info)


def split_80_20(n_or_dataset, seed: int = 0) -> Split:
    n = n_or_dataset if isinstance(n_or_dataset, (int, np.integer)) else n_or_dataset.n_samples
    if n < 5:
        raise TooSmall(f"need at least 5 samples to split, got {n}")
    perm = substream(seed, STREAM_SHUFFLE).permutation(n)
    n_train = int(np.floor(0.8 * n + 0.5))
    return Split(np.sort(perm[:n_train]), np.sort(perm[n_train:]))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def geometry_meta(geometry: Geometry) -> dict:
    return geometry.describe()


def geometry_from_meta(meta: dict, arrays: dict) -> Geometry:
    if meta["kind"] == "point_cloud":
        return point_cloud(arrays["coords"])
    return build_structured(meta["dims"], meta["extent"])


def save(dataset: Dataset, path) -> None:
    if dataset.n_samples < 1:
        raise TooSmall("refusing to save an empty dataset")
    arrays = {
        "inputs": dataset.inputs,
        "activation": dataset.activation,
        "repolarization": dataset.repolarization,
        "valid": dataset.valid.astype(float),
        "centers": dataset.centers,
        "radii": dataset.radii,
    }
    if not dataset.geometry.is_structured:
        arrays["coords"] = dataset.geometry.coords
    meta = {"type": "dataset", "geometry": geometry_meta(dataset.geometry),
            "info": _jsonable(dataset.meta)}
    epds.write(path, meta, arrays)


def load(path) -> Dataset:
    meta, arrays = epds.read(path)
    if meta.get("type") != "dataset":
        raise ConfigError(f"{path} does not hold a dataset")
    geometry = geometry_from_meta(meta["geometry"], arrays)
    return Dataset(geometry, arrays["inputs"], arrays["activation"], arrays["repolarization"],
                   arrays["valid"].astype(bool), arrays["centers"], arrays["radii"],
                   meta["info"])
