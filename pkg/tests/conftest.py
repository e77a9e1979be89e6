import os

import numpy as np
import pytest

from cardiograph import __version__, dataset
from cardiograph.geometry import assemble_conductivity, axis_fibers, build_structured

DESK_N = 250
DESK_GRID = 64
DESK_SEED = 0
DESK_SIGMAS = (2e-3, 4e-4)


def desk_problem():
    g = build_structured((DESK_GRID, DESK_GRID), (1.0, 1.0))
    return g, assemble_conductivity(axis_fibers(g), DESK_SIGMAS, 1.0)


@pytest.fixture(scope="session")
def desk_dataset(request):
    """Seeded 64x64, N=250 dataset, cached between sessions (about 5 min to build)."""
    cache = request.config.cache.mkdir("cardiograph")
    path = os.path.join(cache, f"desk_{DESK_GRID}_{DESK_N}_{DESK_SEED}_{__version__}.epds")
    if not os.path.exists(path):
        g, cond = desk_problem()
        data = dataset.generate(DESK_N, g, cond, seed=DESK_SEED)
        dataset.save(data, path + ".tmp")
        os.replace(path + ".tmp", path)
    return dataset.load(path)


@pytest.fixture(scope="session")
def desk_split(desk_dataset):
    return dataset.split_80_20(desk_dataset, DESK_SEED)


@pytest.fixture(scope="session")
def tiny_problem():
    """Small fast domain for unit tests: 16x16 nodes over 0.25 cm."""
    g = build_structured((16, 16), (0.25, 0.25))
    cond = assemble_conductivity(axis_fibers(g), DESK_SIGMAS, 1.0)
    return g, cond


@pytest.fixture(scope="session")
def tiny_dataset(tiny_problem):
    g, cond = tiny_problem
    return dataset.generate(12, g, cond, seed=3,
                            stim_cfg=dataset.StimulusConfig(radius_range=(0.12, 0.12)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def train_desk_fno(cache_dir, data, split):
    """Default-config FNO on the desk activation split (cached; about an hour on one core)."""
    import time

    from cardiograph import fno

    path = os.path.join(cache_dir, f"fno_desk_{DESK_GRID}_{DESK_N}_{DESK_SEED}_{__version__}.epds")
    if os.path.exists(path):
        return fno.load_model(path)
    y = data.activation
    model = fno.FourierNeuralOperatorRegressor(data.geometry, seed=DESK_SEED)
    t0 = time.perf_counter()
    model.fit(data.inputs[split.train], y[split.train],
              data.inputs[split.test], y[split.test])
    elapsed = time.perf_counter() - t0
    fno.save_model(model, path + ".tmp", extra_meta={"train_seconds": elapsed,
                                                     "cpu_count": os.cpu_count()})
    os.replace(path + ".tmp", path)
    return fno.load_model(path)


@pytest.fixture(scope="session")
def desk_fno(request, desk_dataset, desk_split):
    return train_desk_fno(request.config.cache.mkdir("cardiograph"), desk_dataset, desk_split)


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line and returns ``ok``."""
    def record(number, ok, detail):
        _ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
