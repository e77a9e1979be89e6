"""Monodomain reaction-diffusion solver on structured grids.

Space is discretized with bilinear/trilinear (Q1) elements and a lumped
mass matrix, which on a tensor grid is a 9-point (2D) / 27-point (3D)
stencil with natural zero-flux boundaries. Time stepping is IMEX: the
ionic and applied currents are explicit, diffusion is backward Euler.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .exceptions import ConfigError, LinearSolveDiverged, NoActivation, Unsupported
from .geometry import ConductivityField, Geometry
from .ionic import IonicParams, ionic_current, recovery_rhs


@dataclass(frozen=True)
class MonodomainConfig:
    chi: float = 1.0
    c_m: float = 1.0
    dt: float = 0.05
    t_end: float = 600.0
    cg_tol: float = 1e-8
    v0: float = 0.0
    w0: float = 0.0
    v_act: float = 20.0
    v_rep: float = 10.0
    ionic: IonicParams = field(default_factory=IonicParams)
    early_stop: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if not (0 < self.v_rep <= self.v_act < self.ionic.v_p):
            raise ConfigError("need 0 < v_rep <= v_act < v_p")
        if not (self.chi > 0 and self.c_m > 0 and self.cg_tol > 0):
            raise ConfigError("chi, c_m and cg_tol must be positive")


@dataclass(frozen=True, eq=False)
class Stimulus:
    mask: np.ndarray
    intensity: float = 100.0
    duration: float = 1.0

    def __post_init__(self):
        mask = np.asarray(self.mask).astype(bool)
        object.__setattr__(self, "mask", mask)
        if not self.duration > 0:
            raise ConfigError("stimulus duration must be positive")

    @classmethod
    def none(cls, n_nodes):
        """All-zero stimulus (only valid for stepping, not for ``simulate``)."""
        return cls(np.zeros(n_nodes, dtype=bool), 0.0, 1.0)


@dataclass(eq=False)
class TimeMaps:
    activation: np.ndarray
    repolarization: np.ndarray
    valid: np.ndarray


def q1_operators(geometry: Geometry, tensors: np.ndarray):
    """Q1 stiffness matrix (CSR) and lumped mass vector.

    ``tensors`` is the per-node diffusion tensor; each element uses the
    mean of its corner tensors, integrated with the 2^d Gauss rule.
    """
    if not geometry.is_structured:
        raise Unsupported("the monodomain solver needs a structured grid")
    dims = geometry.dims
    h = np.asarray(geometry.spacing)
    d = len(dims)
    corners = np.array(list(itertools.product((0, 1), repeat=d)))[:, ::-1]  # x fastest
    gauss = np.array([-1.0, 1.0]) / np.sqrt(3.0)
    # B[i, j, a, b] = sum_q w_q dN_a/dx_i dN_b/dx_j  (w_q = cell volume / 2^d)
    vol = np.prod(h)
    B = np.zeros((d, d, len(corners), len(corners)))
    for q in itertools.product(gauss, repeat=d):
        s = (np.asarray(q) + 1.0) / 2.0
        phi = np.where(corners == 1, s, 1.0 - s)  # (corner, axis) 1D factors
        dphi = np.where(corners == 1, 1.0, -1.0) / h
        grad = np.empty((len(corners), d))
        for i in range(d):
            others = np.prod(np.delete(phi, i, axis=1), axis=1)
            grad[:, i] = dphi[:, i] * others
        B += np.einsum("ai,bj->ijab", grad, grad) * vol / 2**d

    # element -> corner node indices
    ranges = [np.arange(n - 1) for n in dims]
    mesh = np.meshgrid(*reversed(ranges), indexing="ij")
    base = [m.ravel() for m in reversed(mesh)]  # per-axis lower-corner indices
    strides = np.cumprod((1,) + tuple(dims[:-1]))
    elem_nodes = np.stack(
        [sum((base[i] + c[i]) * strides[i] for i in range(d)) for c in corners], axis=1
    )
    De = tensors[elem_nodes].mean(axis=1)
    Ke = np.einsum("eij,ijab->eab", De, B)
    na = len(corners)
    rows = np.repeat(elem_nodes, na, axis=1).ravel()
    cols = np.tile(elem_nodes, (1, na)).ravel()
    n = geometry.n_nodes
    K = sp.csr_matrix((Ke.ravel(), (rows, cols)), shape=(n, n))
    K.sum_duplicates()

    w = np.ones(n)
    idx = geometry.grid_index(np.arange(n))
    for i, ni in enumerate(dims):
        w = np.where((idx[i] == 0) | (idx[i] == ni - 1), w * 0.5, w)
    return K, w * vol


def pcg(A, b, x0, diag_inv, tol, maxiter):
    """Jacobi-preconditioned conjugate gradients, relative residual stop."""
    bnorm = np.sqrt(b @ b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0
    x = x0.copy()
    r = b - A @ x
    if np.sqrt(r @ r) <= tol * bnorm:
        return x, 0
    z = diag_inv * r
    p = z.copy()
    rz = r @ z
    for k in range(1, maxiter + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if np.sqrt(r @ r) <= tol * bnorm:
            return x, k
        z = diag_inv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise LinearSolveDiverged(f"CG did not reach tol {tol:g} in {maxiter} iterations")


class MonodomainSolver:
    """Time integrator bound to one geometry, conductivity and config."""

    def __init__(self, geometry: Geometry, cond: ConductivityField, cfg: MonodomainConfig = None):
        self.geometry = geometry
        self.cond = cond
        self.cfg = cfg or MonodomainConfig()
        K, m = q1_operators(geometry, cond.tensors)
        c = self.cfg.dt * cond.scale / (self.cfg.chi * self.cfg.c_m)
        self.mass = m
        self.stiffness = K
        self.system = (sp.diags(m) + c * K).tocsr()
        self._diag_inv = 1.0 / self.system.diagonal()
        self._maxiter = 10 * geometry.n_nodes

    def initial_state(self):
        n = self.geometry.n_nodes
        return np.full(n, float(self.cfg.v0)), np.full(n, float(self.cfg.w0))

    def step(self, v, w, t, stim: Stimulus):
        cfg = self.cfg
        p = cfg.ionic
        i_app = stim.intensity * stim.mask if t < stim.duration else 0.0
        v_star = v + cfg.dt * (i_app - ionic_current(v, w, p)) / (cfg.chi * cfg.c_m)
        w_next = w + cfg.dt * recovery_rhs(v, w, p)
        v_next, _ = pcg(self.system, self.mass * v_star, v_star, self._diag_inv,
                        cfg.cg_tol, self._maxiter)
        return v_next, w_next

    def run(self, stim: Stimulus, n_steps: int, state=None):
        v, w = state if state is not None else self.initial_state()
        t = 0.0
        for k in range(n_steps):
            v, w = self.step(v, w, t, stim)
            t = (k + 1) * self.cfg.dt
        return v, w

    def simulate(self, stim: Stimulus, stop: str = "repolarization", callback=None,
                 callback_every: int = 0) -> TimeMaps:
        """Integrate to ``t_end`` recording threshold crossings.

        Activation is the first upward crossing of ``v_act``; repolarization
        the last downward crossing of ``v_rep``; both linearly interpolated
        between steps. With ``early_stop`` the run ends once the stimulus is
        over and the whole tissue is below ``v_rep`` (no further crossing is
        possible), or, for ``stop="activation"``, once every node activated.
        """
        cfg = self.cfg
        n = self.geometry.n_nodes
        if stim.mask.shape != (n,):
            raise ConfigError(f"stimulus mask has {stim.mask.shape} entries, grid has {n}")
        if not stim.mask.any():
            raise ConfigError("stimulus mask has no active node")
        act = np.full(n, np.nan)
        rep = np.full(n, np.nan)
        v, w = self.initial_state()
        n_steps = int(np.ceil(cfg.t_end / cfg.dt - 1e-9))
        for k in range(n_steps):
            t = k * cfg.dt
            v_new, w = self.step(v, w, t, stim)
            up = (v < cfg.v_act) & (v_new >= cfg.v_act) & np.isnan(act)
            if up.any():
                act[up] = t + cfg.dt * (cfg.v_act - v[up]) / (v_new[up] - v[up])
            down = (v >= cfg.v_rep) & (v_new < cfg.v_rep)
            if down.any():
                rep[down] = t + cfg.dt * (v[down] - cfg.v_rep) / (v[down] - v_new[down])
            v = v_new
            if callback is not None and callback_every and (k + 1) % callback_every == 0:
                callback(t + cfg.dt, v, w)
            if cfg.early_stop and t + cfg.dt >= stim.duration:
                if stop == "activation" and not np.isnan(act).any():
                    break
                if v.max() < cfg.v_rep:
                    break
        activated = ~np.isnan(act)
        if activated.mean() < 0.99:
            raise NoActivation(
                f"only {activated.mean():.1%} of nodes activated before t={cfg.t_end} ms")
        valid = activated & ~np.isnan(rep) & (rep > act)
        return TimeMaps(act, rep, valid)


def step(state, t, stim, cfg, cond, geometry):
    """Single IMEX step; convenience wrapper around :class:`MonodomainSolver`."""
    v, w = state
    return MonodomainSolver(geometry, cond, cfg).step(v, w, t, stim)


def simulate(stim, cfg, cond, geometry) -> TimeMaps:
    return MonodomainSolver(geometry, cond, cfg).simulate(stim)


def face_mask(geometry: Geometry, axis: int, depth: float = 0.0) -> np.ndarray:
    """Nodes within ``depth`` (cm) of the ``axis = 0`` face; always the first layer."""
    first = geometry.grid_index(np.arange(geometry.n_nodes))[axis] == 0
    return first | (geometry.coords[:, axis] <= depth)


def measure_planar_velocity(geometry, cond, cfg=None, axis=0, intensity=100.0, depth=0.05):
    """Planar conduction velocity (cm/ms) along a grid axis.

    A layer of thickness ``depth`` at one full face is stimulated (a single
    node layer is too thin a source to start a wave on fine grids) and
    activation time is fitted linearly against distance over the middle
    60% of the axis.
    """
    solver = MonodomainSolver(geometry, cond, cfg)
    mask = face_mask(geometry, axis, depth)
    maps = solver.simulate(Stimulus(mask, intensity), stop="activation")
    x = geometry.coords[:, axis]
    length = geometry.extent[axis]
    sel = (x >= 0.2 * length) & (x <= 0.8 * length) & ~np.isnan(maps.activation)
    slope = np.polyfit(x[sel], maps.activation[sel], 1)[0]
    return 1.0 / slope
