import numpy as np
import pytest

from cardiograph import kol
from cardiograph.exceptions import ConfigError, EmptyMask, GeometryMismatch, NotSPD
from cardiograph.geometry import build_structured, point_cloud
from cardiograph.kol import KernelOperatorRegressor, KernelSpec, PRESETS


@pytest.fixture(scope="module")
def grid():
    return build_structured((20, 20), (1.0, 1.0))


def disk(g, center, r):
    return (np.linalg.norm(g.coords - np.asarray(center), axis=1) <= r).astype(float)


def random_masks(g, k, rng, r=0.12):
    return np.stack([disk(g, rng.uniform(r, 1 - r, 2), r) for _ in range(k)])


def test_centroid_cases(grid):
    m = np.zeros(grid.n_nodes)
    m[37] = 1
    assert np.array_equal(kol.centroid(m, grid), grid.coords[37])
    m[99] = 1
    assert np.allclose(kol.centroid(m, grid), 0.5 * (grid.coords[37] + grid.coords[99]), atol=1e-15)
    with pytest.raises(EmptyMask):
        kol.centroid(np.zeros(grid.n_nodes), grid)


def test_centroid_of_disk_near_center():
    g = build_structured((101, 101), (1.0, 1.0))
    c = np.array([0.4137, 0.5821])
    mask = disk(g, c, 0.1)
    brute = g.coords[mask > 0].mean(axis=0)
    assert np.allclose(kol.centroid(mask, g), brute, atol=1e-14)
    assert np.linalg.norm(brute - c) <= g.spacing[0]


def test_kernel_values(grid):
    a = np.zeros(grid.n_nodes)
    a[0] = 1
    assert kol.kernel_eval("rbf1", a, a, grid) == 1.0
    assert kol.kernel_eval("iq4", a, a, grid) == pytest.approx(1 / np.sqrt(0.1), rel=1e-14)
    assert kol.kernel_eval("iq4", a, a, grid) == pytest.approx(3.16228, abs=1e-5)
    pc = point_cloud(np.array([[0.0, 0.0], [1.0, 0.0]]))
    v = kol.kernel_eval("rbf1", [1, 0], [0, 1], pc)
    assert v == pytest.approx(np.exp(-0.5), rel=1e-15)
    assert v == pytest.approx(0.60653, abs=1e-5)


def test_presets_table():
    expect = {"iq1": (1e-5, 1e-2), "iq2": (1e-5, 1e-1), "iq3": (1e-4, 1e-2),
              "iq4": (1e-4, 1e-1), "iq5": (1e-3, 1e-2)}
    for name, (s1, s2) in expect.items():
        assert (PRESETS[name].iq_sigma1, PRESETS[name].iq_sigma2) == (s1, s2)
    assert [PRESETS[f"rbf{i}"].rbf_sigma for i in (1, 2, 3)] == [1.0, 10.0, 100.0]
    assert {PRESETS["ntk1"].ntk_depth, PRESETS["ntk2"].ntk_depth} == {3, 4}
    assert all(p.preset_name == k for k, p in PRESETS.items())


def test_spec_validation():
    for bad in (dict(family="rbf", rbf_sigma=0), dict(family="iq", iq_sigma1=-1),
                dict(family="iq", iq_sigma2=0), dict(family="ntk", ntk_depth=1),
                dict(family="ntk", ntk_activation="tanh"), dict(family="poly")):
        with pytest.raises(ConfigError):
            KernelSpec(**bad)
    with pytest.raises(ConfigError):
        kol.resolve_kernel("iq9")


@pytest.mark.parametrize("name", list(PRESETS))
def test_gram_symmetric_and_spd(grid, rng, name):
    X = random_masks(grid, 30, rng)
    S = kol.gram(name, X, grid)
    assert np.array_equal(S, S.T)
    cross = kol.kernel_matrix(name, X[:7], X[7:], grid)
    assert np.array_equal(cross, kol.kernel_matrix(name, X[7:], X[:7], grid).T)
    kol.cholesky_reference(S + 1e-10 * np.eye(30))  # no NotSPD


@pytest.mark.parametrize("name", ["ntk1", "ntk2", "ntk3"])
def test_ntk_psd(grid, rng, name):
    X = random_masks(grid, 40, rng, r=0.2)
    assert np.linalg.eigvalsh(kol.gram(name, X, grid)).min() >= -1e-8


def _mc_pair(f, a, b, c, n=2_000_000, seed=0):
    z = np.random.default_rng(seed).standard_normal((n, 2))
    L = np.linalg.cholesky(np.array([[a, c], [c, b]]))
    uv = z @ L.T
    return np.mean(f(uv[:, 0]) * f(uv[:, 1]))


def test_sigmoid_expectation_vs_monte_carlo():
    sig = lambda x: 1 / (1 + np.exp(-x))
    a, b, c = 0.7, 1.3, 0.5
    quad = kol._gauss_pair_vec(kol._sigmoid, a, b, c)
    assert quad == pytest.approx(_mc_pair(sig, a, b, c), abs=2e-4)
    assert kol._gauss_pair_vec(kol._sigmoid, b, a, c) == quad


def test_relu_closed_form_vs_quadrature():
    relu = lambda x: np.maximum(x, 0.0)
    step = lambda x: (x > 0).astype(float)
    a, b, c = 0.6, 0.9, -0.3
    e_ff, e_dd = kol._relu_pair(np.array(a), np.array(b), np.array(c))
    assert e_ff == pytest.approx(_mc_pair(relu, a, b, c), abs=1e-3)
    assert e_dd == pytest.approx(_mc_pair(step, a, b, c), abs=1e-3)


def test_ntk_relu_depth2_hand():
    # one hidden layer: theta = E[relu relu] + sigma0 * E[step step]
    x = np.array([[1.0, 1.0, 0.0, 0.0]])
    y = np.array([[0.0, 1.0, 1.0, 1.0]])
    s0 = 1 / 4
    a, b = 2 / 4, 3 / 4
    cos = s0 / np.sqrt(a * b)
    t = np.arccos(cos)
    expect = np.sqrt(a * b) / (2 * np.pi) * (np.sin(t) + (np.pi - t) * cos) + s0 * (np.pi - t) / (2 * np.pi)
    got = kol.ntk_matrix(KernelSpec("ntk", ntk_depth=2, ntk_activation="relu"), x, y)[0, 0]
    assert got == pytest.approx(expect, rel=1e-14)


def test_cholesky_routes_agree(rng):
    B = rng.standard_normal((150, 150))
    A = B @ B.T + 150 * np.eye(150)
    L1 = kol.cholesky_reference(A)
    L2 = kol.cholesky_blocked(A, block=32)
    assert np.max(np.abs(L1 - L2)) <= 1e-12 * np.max(np.abs(L1))
    assert np.allclose(L1, np.linalg.cholesky(A), rtol=0, atol=1e-12 * np.abs(L1).max())
    R = rng.standard_normal((150, 4))
    X = kol.cholesky_solve(A, R, reg=0.0, method="reference")
    assert np.allclose(A @ X, R, atol=1e-10)
    with pytest.raises(NotSPD):
        kol.cholesky_reference(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(NotSPD):
        kol.cholesky_blocked(-np.eye(70), block=32)


def test_fit_single_sample(grid, rng):
    X = random_masks(grid, 1, rng)
    y = rng.standard_normal((1, grid.n_nodes))
    m = KernelOperatorRegressor("iq4", geometry=grid).fit(X, y)
    assert np.allclose(m.alpha_, y / (1 / np.sqrt(0.1) + 1e-10), rtol=1e-14)


def test_fit_two_by_two_hand(rng):
    pc = point_cloud(np.array([[0.0, 0.0], [0.3, 0.0], [0.0, 0.4]]))
    X = np.array([[1.0, 0, 0], [0, 1.0, 1.0]])
    y = rng.standard_normal((2, 3))
    m = KernelOperatorRegressor("rbf1", reg=1e-10, geometry=pc).fit(X, y)
    c = np.array([[0.0, 0.0], [0.15, 0.2]])
    k = np.exp(-np.sum((c[0] - c[1]) ** 2) / 2)
    S = np.array([[1 + 1e-10, k], [k, 1 + 1e-10]])
    inv = np.array([[S[1, 1], -S[0, 1]], [-S[1, 0], S[0, 0]]]) / (S[0, 0] * S[1, 1] - k * k)
    assert np.allclose(m.alpha_, inv @ y, rtol=1e-12, atol=1e-12)
    q = np.array([[1.0, 1.0, 0]])
    cq = np.array([0.15, 0.0])
    row = np.exp(-np.sum((c - cq) ** 2, axis=1) / 2)
    assert np.allclose(m.predict(q), row @ m.alpha_, rtol=1e-13)


def test_constant_kernel_prediction(grid, rng):
    spec = KernelSpec("rbf", rbf_sigma=1e12)  # S == 1 exactly in floating point
    X = random_masks(grid, 5, rng)
    y = rng.standard_normal((5, grid.n_nodes))
    m = KernelOperatorRegressor(spec, reg=1e-3, geometry=grid).fit(X, y)
    q = random_masks(grid, 3, rng)
    assert np.allclose(m.predict(q), np.tile(m.alpha_.sum(axis=0), (3, 1)), rtol=1e-13)


@pytest.mark.parametrize("name", ["iq1", "ntk3"])
def test_interpolates_training_data(grid, name):
    # well-separated centres and smooth, activation-like targets; the residual
    # on training inputs is exactly reg * alpha, so conditioning matters
    lattice = np.stack(np.meshgrid(np.linspace(0.15, 0.85, 5), np.linspace(0.15, 0.85, 5)), -1)
    X = np.stack([disk(grid, c, 0.12) for c in lattice.reshape(-1, 2)])
    y = np.stack([1 + np.linalg.norm(grid.coords - kol.centroid(x, grid), axis=1) / 0.06 for x in X])
    m = KernelOperatorRegressor(name, geometry=grid).fit(X, y)
    err = np.linalg.norm(m.predict(X) - y, axis=1) / np.linalg.norm(y, axis=1)
    assert err.mean() < 1e-8
    assert np.allclose(y - m.predict(X), m.reg * m.alpha_, rtol=0, atol=1e-9)


def test_linear_in_targets(grid, rng):
    X = random_masks(grid, 12, rng)
    y = rng.standard_normal((12, grid.n_nodes))
    q = random_masks(grid, 4, rng)
    p1 = KernelOperatorRegressor("ntk3", geometry=grid).fit(X, y).predict(q)
    p2 = KernelOperatorRegressor("ntk3", geometry=grid).fit(X, 3.5 * y).predict(q)
    assert np.allclose(p2, 3.5 * p1, rtol=1e-12, atol=1e-12 * np.abs(p2).max())


def test_rbf_translation_invariance(rng):
    g = build_structured((30, 30), (1.0, 1.0))
    centers = np.array([[0.3, 0.3], [0.6, 0.35], [0.35, 0.6], [0.55, 0.55]])

    def moved(m):  # translate a mask by whole grid cells
        return g.from_grid(np.roll(g.to_grid(m), (3, -2), axis=(0, 1)))

    X = np.stack([disk(g, c, 0.1) for c in centers])
    Xs = np.stack([moved(m) for m in X])
    y = rng.standard_normal((4, g.n_nodes))
    q = disk(g, [0.45, 0.5], 0.1)
    qs = moved(q)
    p = KernelOperatorRegressor("rbf1", geometry=g).fit(X, y).predict(q)
    ps = KernelOperatorRegressor("rbf1", geometry=g).fit(Xs, y).predict(qs)
    assert np.allclose(p, ps, rtol=0, atol=1e-10 * np.abs(p).max())


def test_estimator_api_and_errors(grid, rng):
    m = KernelOperatorRegressor(kernel="iq3", geometry=grid)
    assert m.get_params()["kernel"] == "iq3"
    m.set_params(reg=1e-8)
    assert m.reg == 1e-8
    X = random_masks(grid, 6, rng)
    y = rng.uniform(1, 2, (6, grid.n_nodes))
    m.fit(X, y)
    assert -1e-6 < m.score(X, y) <= 0
    with pytest.raises(GeometryMismatch):
        m.predict(np.ones((1, 10)))
    with pytest.raises(EmptyMask):
        m.predict(np.zeros((1, grid.n_nodes)))
    with pytest.raises(GeometryMismatch):
        KernelOperatorRegressor(geometry=grid).fit(np.ones((2, 5)), np.ones((2, 5)))


def test_sample_linear_matches_affine_field():
    g = build_structured((11, 9), (1.0, 0.8))
    f = 2.0 + 3.0 * g.coords[:, 0] - 1.5 * g.coords[:, 1]
    pts = np.array([[0.033, 0.71], [0.5, 0.4], [0.999, 0.001]])
    assert np.allclose(kol.sample_linear(g, f, pts), 2 + 3 * pts[:, 0] - 1.5 * pts[:, 1], atol=1e-13)
    # bilinear: product term exact at nodes, interpolated in between
    h = g.coords[:, 0] * g.coords[:, 1]
    x0, y0 = 0.15, 0.25
    assert kol.sample_linear(g, h, [[x0, y0]])[0] == pytest.approx(x0 * y0, rel=1e-12)


def test_save_load(tmp_path, grid, rng):
    X = random_masks(grid, 8, rng)
    y = rng.standard_normal((8, grid.n_nodes))
    for name in ("iq2", "ntk1"):
        m = KernelOperatorRegressor(name, geometry=grid).fit(X, y)
        kol.save_model(m, tmp_path / f"{name}.epds")
        back = kol.load_model(tmp_path / f"{name}.epds")
        assert back.spec_ == m.spec_
        assert np.array_equal(back.predict(X[:3]), m.predict(X[:3]))
