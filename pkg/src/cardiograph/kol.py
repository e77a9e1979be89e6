"""Kernel operator learning: closed-form kernel ridge interpolation of maps.

Each stimulus mask ``A`` is compared with the training masks through a
scalar kernel ``S``; the prediction for a new mask is ``sum_j S(A, A_j) alpha_j``
where the coefficient rows ``alpha`` solve ``(S(A, A) + reg I) alpha = U``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import __version__, epds
from .exceptions import ConfigError, EmptyMask, GeometryMismatch, NotSPD, Unsupported
from .geometry import Geometry
from .validation import as_mask_matrix, as_target_matrix

FAMILIES = ("rbf", "iq", "ntk")


@dataclass(frozen=True)
class KernelSpec:
    family: str
    rbf_sigma: float = 1.0
    iq_sigma1: float = 1e-4
    iq_sigma2: float = 1e-1
    ntk_depth: int = 3
    ntk_activation: str = "relu"
    preset_name: str | None = None

    def __post_init__(self):
        fam = self.family.lower()
        object.__setattr__(self, "family", fam)
        if fam not in FAMILIES:
            raise ConfigError(f"unknown kernel family '{self.family}'")
        if fam == "rbf" and not self.rbf_sigma > 0:
            raise ConfigError("RBF sigma must be positive")
        if fam == "iq" and not (self.iq_sigma1 >= 0 and self.iq_sigma2 > 0):
            raise ConfigError("IQ kernel needs sigma1 >= 0 and sigma2 > 0")
        if fam == "ntk":
            if int(self.ntk_depth) != self.ntk_depth or self.ntk_depth < 2:
                raise ConfigError("NTK depth must be an integer >= 2")
            if self.ntk_activation not in ("relu", "sigmoid"):
                raise ConfigError(f"unknown NTK activation '{self.ntk_activation}'")

    @property
    def uses_centroids(self) -> bool:
        return self.family in ("rbf", "iq")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "iq1": KernelSpec("iq", iq_sigma1=1e-5, iq_sigma2=1e-2),
    "iq2": KernelSpec("iq", iq_sigma1=1e-5, iq_sigma2=1e-1),
    "iq3": KernelSpec("iq", iq_sigma1=1e-4, iq_sigma2=1e-2),
    "iq4": KernelSpec("iq", iq_sigma1=1e-4, iq_sigma2=1e-1),
    "iq5": KernelSpec("iq", iq_sigma1=1e-3, iq_sigma2=1e-2),
    "rbf1": KernelSpec("rbf", rbf_sigma=1.0),
    "rbf2": KernelSpec("rbf", rbf_sigma=10.0),
    "rbf3": KernelSpec("rbf", rbf_sigma=100.0),
    "ntk1": KernelSpec("ntk", ntk_depth=3, ntk_activation="sigmoid"),
    "ntk2": KernelSpec("ntk", ntk_depth=4, ntk_activation="sigmoid"),
    "ntk3": KernelSpec("ntk", ntk_depth=3, ntk_activation="relu"),
}
PRESETS = {k: replace(v, preset_name=k) for k, v in PRESETS.items()}


def resolve_kernel(kernel) -> KernelSpec:
    if isinstance(kernel, KernelSpec):
        return kernel
    if isinstance(kernel, dict):
        return KernelSpec(**kernel)
    try:
        return PRESETS[str(kernel).lower()]
    except KeyError:
        raise ConfigError(f"unknown kernel preset '{kernel}' (known: {', '.join(PRESETS)})") from None


# ---------------------------------------------------------------- features

def centroid(mask, geometry: Geometry) -> np.ndarray:
    return centroids(np.asarray(mask)[None, :], geometry)[0]


def centroids(masks, geometry: Geometry) -> np.ndarray:
    masks = np.asarray(masks, dtype=float)
    counts = masks.sum(axis=1)
    if np.any(counts == 0):
        raise EmptyMask(f"mask {int(np.flatnonzero(counts == 0)[0])} has no active node")
    return (masks @ geometry.coords) / counts[:, None]


def _distances(ca, cb):
    diff = ca[:, None, :] - cb[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


# ---------------------------------------------------------------- NTK

_GH_X, _GH_W = np.polynomial.hermite_e.hermegauss(32)
_GH_W = _GH_W / _GH_W.sum()


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _dsigmoid(x):
    s = _sigmoid(x)
    return s * (1.0 - s)


def _gauss_pair_vec(f, a, b, c):
    """E[f(u) f(v)] for (u, v) ~ N(0, [[a, c], [c, b]]) by 32x32 Gauss-Hermite.

    Broadcasts over ``a, b, c``. The pair is put in a canonical order
    (smaller variance first) so the result does not depend on argument order.
    """
    a, b, c = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float), np.asarray(c, float))
    swap = a > b
    lo, hi = np.where(swap, b, a), np.where(swap, a, b)
    sa = np.sqrt(lo)
    safe = np.where(sa > 0, sa, 1.0)
    rho_b = np.where(sa > 0, c / safe, 0.0)
    rest = np.sqrt(np.maximum(hi - rho_b**2, 0.0))
    fu = f(sa[..., None] * _GH_X)  # (..., q1)
    v = rho_b[..., None, None] * _GH_X[:, None] + rest[..., None, None] * _GH_X[None, :]
    fv = f(v)  # (..., q1, q2)
    return np.einsum("...i,i,...ij,j->...", fu, _GH_W, fv, _GH_W)


def _relu_pair(a, b, c):
    na = np.sqrt(a * b)
    cos = np.clip(np.where(na > 0, c / np.where(na > 0, na, 1.0), 0.0), -1.0, 1.0)
    theta = np.arccos(cos)
    e_ff = na / (2 * np.pi) * (np.sin(theta) + (np.pi - theta) * cos)
    e_dd = (np.pi - theta) / (2 * np.pi)
    return e_ff, e_dd


def _ntk_layers(spec, sxx, syy, sxy):
    """Run the infinite-width recursion; ``sxx``/``syy`` are diagonal terms."""
    theta = sxy
    for _ in range(spec.ntk_depth - 1):
        if spec.ntk_activation == "relu":
            e_ff, e_dd = _relu_pair(sxx[:, None], syy[None, :], sxy)
            dxx, _ = _relu_pair(sxx, sxx, sxx)
            dyy, _ = _relu_pair(syy, syy, syy)
        else:
            e_ff = _chunked(_sigmoid, sxx, syy, sxy)
            e_dd = _chunked(_dsigmoid, sxx, syy, sxy)
            dxx = _gauss_pair_vec(_sigmoid, sxx, sxx, sxx)
            dyy = _gauss_pair_vec(_sigmoid, syy, syy, syy)
        theta = e_ff + theta * e_dd
        sxy, sxx, syy = e_ff, dxx, dyy
    return theta


def _chunked(f, sxx, syy, sxy, rows=16):
    out = np.empty_like(sxy)
    for i in range(0, sxy.shape[0], rows):
        sl = slice(i, i + rows)
        out[sl] = _gauss_pair_vec(f, sxx[sl, None], syy[None, :], sxy[sl])
    return out


def ntk_matrix(spec: KernelSpec, XA, XB) -> np.ndarray:
    """Infinite-width NTK between mask sets (rows), inputs scaled by 1/sqrt(n)."""
    XA = np.asarray(XA, dtype=float)
    XB = np.asarray(XB, dtype=float)
    n = XA.shape[1]
    sxy = (XA @ XB.T) / n
    sxx = np.einsum("ij,ij->i", XA, XA) / n
    syy = np.einsum("ij,ij->i", XB, XB) / n
    return _ntk_layers(spec, sxx, syy, sxy)


# ---------------------------------------------------------------- kernels

def kernel_from_features(spec: KernelSpec, fa, fb) -> np.ndarray:
    """Kernel matrix from precomputed features (centroids or raw masks)."""
    if spec.family == "ntk":
        return ntk_matrix(spec, fa, fb)
    d = _distances(np.asarray(fa, float), np.asarray(fb, float))
    if spec.family == "rbf":
        return np.exp(-d * d / (2.0 * spec.rbf_sigma**2))
    return 1.0 / np.sqrt(spec.iq_sigma1 * d + spec.iq_sigma2)


def features(spec: KernelSpec, masks, geometry: Geometry) -> np.ndarray:
    masks = np.asarray(masks, dtype=float)
    if spec.uses_centroids:
        return centroids(masks, geometry)
    if np.any(masks.sum(axis=1) == 0):
        raise EmptyMask("NTK input mask has no active node")
    return masks


def kernel_matrix(spec, A, B, geometry: Geometry) -> np.ndarray:
    spec = resolve_kernel(spec)
    return kernel_from_features(spec, features(spec, A, geometry), features(spec, B, geometry))


def kernel_eval(spec, A1, A2, geometry: Geometry) -> float:
    return float(kernel_matrix(spec, np.atleast_2d(A1), np.atleast_2d(A2), geometry)[0, 0])


def gram(spec, masks, geometry: Geometry) -> np.ndarray:
    """Symmetric Gram matrix; the upper triangle is mirrored so symmetry is exact."""
    S = kernel_matrix(spec, masks, masks, geometry)
    iu = np.triu_indices_from(S, 1)
    S[(iu[1], iu[0])] = S[iu]
    return S


# ---------------------------------------------------------------- Cholesky

def cholesky_reference(A) -> np.ndarray:
    """Unblocked left-looking Cholesky, lower factor."""
    A = np.array(A, dtype=float)
    n = A.shape[0]
    L = np.zeros_like(A)
    for j in range(n):
        pivot = A[j, j] - L[j, :j] @ L[j, :j]
        if not pivot > 0:
            raise NotSPD(f"non-positive pivot {pivot:.3e} at column {j}")
        L[j, j] = np.sqrt(pivot)
        L[j + 1:, j] = (A[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def cholesky_blocked(A, block: int = 64) -> np.ndarray:
    """Right-looking blocked Cholesky: reference factor on diagonal blocks,
    triangular solves for the panel and a rank-``block`` trailing update."""
    A = np.array(A, dtype=float)
    n = A.shape[0]
    L = np.zeros_like(A)
    for k in range(0, n, block):
        e = min(k + block, n)
        try:
            Lkk = cholesky_reference(A[k:e, k:e])
        except NotSPD as exc:
            raise NotSPD(f"{exc} (block starting at {k})") from None
        L[k:e, k:e] = Lkk
        if e < n:
            panel = scipy.linalg.solve_triangular(Lkk, A[e:, k:e].T, lower=True).T
            L[e:, k:e] = panel
            A[e:, e:] -= panel @ panel.T
    return L


def forward_substitution(L, B) -> np.ndarray:
    B = np.array(B, dtype=float)
    X = np.empty_like(B)
    for i in range(L.shape[0]):
        X[i] = (B[i] - L[i, :i] @ X[:i]) / L[i, i]
    return X


def back_substitution(U, B) -> np.ndarray:
    B = np.array(B, dtype=float)
    X = np.empty_like(B)
    for i in range(U.shape[0] - 1, -1, -1):
        X[i] = (B[i] - U[i, i + 1:] @ X[i + 1:]) / U[i, i]
    return X


CHOLESKY = {"reference": cholesky_reference, "blocked": cholesky_blocked}


def cholesky_solve(S, U, reg: float = 1e-10, method: str = "blocked") -> np.ndarray:
    if method not in CHOLESKY:
        raise ConfigError(f"unknown Cholesky method '{method}'")
    A = S + reg * np.eye(S.shape[0])
    L = CHOLESKY[method](A)
    return back_substitution(L.T, forward_substitution(L, U))


# ---------------------------------------------------------------- estimator

class KernelOperatorRegressor(RegressorMixin, BaseEstimator):
    """Kernel operator learner mapping stimulus masks to nodal time maps.

    Parameters
    ----------
    kernel : str, dict or KernelSpec
        Preset name (``"iq4"``, ``"rbf2"``, ``"ntk1"``...) or explicit spec.
    reg : float
        Ridge term added to the Gram diagonal before factorization.
    geometry : Geometry
        Collocation geometry; centroid kernels need node coordinates.
    cholesky : {"blocked", "reference"}
    """

    def __init__(self, kernel="iq4", reg=1e-10, geometry=None, cholesky="blocked"):
        self.kernel = kernel
        self.reg = reg
        self.geometry = geometry
        self.cholesky = cholesky

    def _check_geometry(self, n_features):
        if self.geometry is None:
            raise ConfigError("KernelOperatorRegressor needs a geometry")
        if self.geometry.n_nodes != n_features:
            raise GeometryMismatch(
                f"masks have {n_features} entries, geometry has {self.geometry.n_nodes} nodes")

    def fit(self, X, y):
        X = as_mask_matrix(X)
        y = as_target_matrix(y, n_rows=X.shape[0])
        self._check_geometry(X.shape[1])
        if not self.reg >= 0:
            raise ConfigError("reg must be non-negative")
        self.spec_ = resolve_kernel(self.kernel)
        self.features_ = features(self.spec_, X, self.geometry)
        self.train_inputs_ = X
        S = gram(self.spec_, X, self.geometry)
        self.alpha_ = cholesky_solve(S, y, self.reg, self.cholesky)
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = y.shape[1]
        return self

    def kernel_rows(self, X) -> np.ndarray:
        check_is_fitted(self, "alpha_")
        X = as_mask_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise GeometryMismatch(
                f"masks have {X.shape[1]} entries, model expects {self.n_features_in_}")
        return kernel_from_features(self.spec_, features(self.spec_, X, self.geometry),
                                    self.features_)

    def predict(self, X) -> np.ndarray:
        return self.kernel_rows(X) @ self.alpha_

    def score(self, X, y, sample_weight=None):
        """Negative mean relative L2 error (higher is better)."""
        from .metrics import rel_l2

        return -rel_l2(self.predict(X), y)[0]


def sample_linear(geometry: Geometry, values, points) -> np.ndarray:
    """Evaluate nodal field(s) off the collocation set by (bi/tri)linear interpolation.

    ``values`` is ``(n,)`` or ``(m, n)``; ``points`` is ``(p, ndim)``.
    """
    from scipy.interpolate import RegularGridInterpolator

    if not geometry.is_structured:
        raise Unsupported("linear sampling needs a structured grid")
    values = np.asarray(values, dtype=float)
    axes = [np.linspace(0.0, e, d) for d, e in zip(geometry.dims, geometry.extent)]
    fields = np.atleast_2d(values)
    out = np.stack([
        RegularGridInterpolator(axes, geometry.to_grid(f), method="linear")(np.asarray(points))
        for f in fields
    ])
    return out if values.ndim == 2 else out[0]


def save_model(model: KernelOperatorRegressor, path, extra_meta: dict | None = None) -> None:
    check_is_fitted(model, "alpha_")
    meta = {
        "type": "kol",
        "tool_version": __version__,
        "kernel": model.spec_.to_dict(),
        "reg": model.reg,
        "cholesky": model.cholesky,
        "geometry": model.geometry.describe(),
    }
    meta.update(extra_meta or {})
    arrays = {"alphas": model.alpha_, "train_inputs": model.train_inputs_}
    if model.spec_.uses_centroids:
        arrays["centroids"] = model.features_
    if not model.geometry.is_structured:
        arrays["coords"] = model.geometry.coords
    epds.write(path, meta, arrays)


def load_model(path) -> KernelOperatorRegressor:
    from .dataset import geometry_from_meta

    meta, arrays = epds.read(path)
    if meta.get("type") != "kol":
        raise ConfigError(f"{path} does not hold a KOL model")
    geometry = geometry_from_meta(meta["geometry"], arrays)
    spec = KernelSpec(**meta["kernel"])
    model = KernelOperatorRegressor(spec, meta["reg"], geometry, meta["cholesky"])
    model.spec_ = spec
    model.train_inputs_ = arrays["train_inputs"]
    model.features_ = arrays["centroids"] if spec.uses_centroids else model.train_inputs_
    model.alpha_ = arrays["alphas"]
    model.n_features_in_ = model.train_inputs_.shape[1]
    model.n_outputs_ = model.alpha_.shape[1]
    model.meta_ = meta
    return model
