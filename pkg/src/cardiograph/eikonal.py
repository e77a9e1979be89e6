"""First-order anisotropic eikonal solver (fast iterative method).

Solves ``c0 * sqrt(grad(psi) . M grad(psi)) = 1`` on a structured grid with
Dirichlet values on a source set. The local solver minimizes arrival time
over points of neighbor edges/triangles measured in the metric ``M^-1``;
active-list updates use a frozen snapshot per iteration (Jacobi style), so
results do not depend on evaluation order.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, NonPositiveVelocity, NotConverged, Unsupported
from .geometry import ConductivityField, Geometry


@dataclass(frozen=True, eq=False)
class EikonalProblem:
    M: np.ndarray
    c0: float
    sources: np.ndarray
    values: np.ndarray = 0.0

    def __post_init__(self):
        M = np.asarray(self.M, dtype=float)
        src = np.atleast_1d(np.asarray(self.sources, dtype=np.int64))
        vals = np.broadcast_to(np.asarray(self.values, dtype=float), src.shape).copy()
        if src.size == 0:
            raise ConfigError("eikonal problem needs at least one source node")
        if not self.c0 > 0:
            raise ConfigError("c0 must be positive")
        if np.any(np.linalg.eigvalsh(M) <= 0):
            raise ConfigError("M must be positive definite at every node")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "sources", src)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_conductivity(cls, cond: ConductivityField, c0, sources, values=0.0,
                          chi=1.0, c_m=1.0):
        return cls(cond.effective / (chi * c_m), c0, sources, values)


def calibrate_c0(velocity: float, sigma_along: float) -> float:
    """Speed scale making the planar eikonal front match ``velocity``.

    ``sigma_along`` is the eigenvalue of ``M`` along the measured direction;
    a planar front then moves at ``c0 * sqrt(sigma_along)``.
    """
    if not velocity > 0:
        raise NonPositiveVelocity(f"velocity must be positive, got {velocity}")
    if not sigma_along > 0:
        raise ConfigError("sigma_along must be positive")
    return velocity / np.sqrt(sigma_along)


def _stencil(ndim):
    offsets = [o for o in itertools.product((-1, 0, 1), repeat=ndim) if any(o)]
    offsets = np.array(offsets)
    if ndim == 2:
        ang = np.arctan2(offsets[:, 1], offsets[:, 0])
        offsets = offsets[np.argsort(ang)]
        tris = [(i, (i + 1) % len(offsets)) for i in range(len(offsets))]
    else:
        tris = [(i, j) for i in range(len(offsets)) for j in range(i + 1, len(offsets))
                if np.abs(offsets[i] - offsets[j]).max() == 1]
    return offsets, tris


class _Grid:
    def __init__(self, geometry):
        self.dims = np.array(geometry.dims)
        self.h = np.array(geometry.spacing)
        self.offsets, self.tris = _stencil(len(self.dims))
        idx = np.stack(geometry.grid_index(np.arange(geometry.n_nodes)), axis=1)
        strides = np.cumprod(np.r_[1, self.dims[:-1]])
        nb = np.full((geometry.n_nodes, len(self.offsets)), -1, dtype=np.int64)
        for k, o in enumerate(self.offsets):
            j = idx + o
            ok = np.all((j >= 0) & (j < self.dims), axis=1)
            nb[ok, k] = j[ok] @ strides
        self.neighbors = nb


def _local_solve(T, nodes, grid, G, c0):
    """Best candidate arrival time for ``nodes`` from snapshot ``T``."""
    nb = grid.neighbors[nodes]
    Tn = np.where(nb >= 0, T[np.maximum(nb, 0)], np.inf)
    Gn = G[nodes]
    E = grid.offsets * grid.h  # physical displacement to each neighbor
    # Q[i, a, b] = e_a^T G_i e_b
    Q = np.einsum("ak,ikl,bl->iab", E, Gn, E)
    qdiag = np.sqrt(np.einsum("iaa->ia", Q))
    best = np.min(Tn + qdiag / c0, axis=1)
    for a, b in grid.tris:
        Ta, Tb = Tn[:, a], Tn[:, b]
        ok = np.isfinite(Ta) & np.isfinite(Tb)
        if not ok.any():
            continue
        Ta, Tb = Ta[ok], Tb[ok]
        qaa, qab, qbb = Q[ok, a, a], Q[ok, a, b], Q[ok, b, b]
        C = qaa
        B = qab - qaa
        A = qaa - 2.0 * qab + qbb
        dT = Tb - Ta
        k = (c0 * dT) ** 2
        inner = k < A
        det = np.maximum(A * C - B * B, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            root = np.sqrt(np.where(inner, k * det / (A - k), 0.0))
            s = np.clip((-B - np.sign(dT) * root) / A, 0.0, 1.0)
        q = np.maximum(A * s * s + 2.0 * B * s + C, 0.0)
        f = np.where(inner, Ta + s * dT + np.sqrt(q) / c0, np.inf)
        sub = best[ok]
        best[ok] = np.minimum(sub, f)
    return best


def solve_eikonal(problem: EikonalProblem, geometry: Geometry, tol: float = 1e-8,
                  max_iter: int | None = None, source_radius: float = 0.0) -> np.ndarray:
    """Arrival times ``psi`` (ms) at every node.

    With ``source_radius > 0`` every node within that physical distance of a
    source is initialized (and frozen) with the straight-line travel time in
    the source's own metric. This removes the point-source singularity that
    otherwise costs a log factor in the convergence rate.
    """
    if not geometry.is_structured:
        raise Unsupported("eikonal solver needs a structured grid")
    n = geometry.n_nodes
    if problem.M.shape != (n, geometry.ndim, geometry.ndim):
        raise ConfigError("M must have one tensor per node")
    grid = _Grid(geometry)
    G = np.linalg.inv(problem.M)
    T = np.full(n, np.inf)
    fixed = np.zeros(n, dtype=bool)
    T[problem.sources] = problem.values
    fixed[problem.sources] = True
    if source_radius > 0:
        x = geometry.coords
        for s, val in zip(problem.sources, problem.values):
            near = np.flatnonzero(np.linalg.norm(x - x[s], axis=1) <= source_radius)
            dx = x[near] - x[s]
            t = val + np.sqrt(np.einsum("ik,kl,il->i", dx, G[s], dx)) / problem.c0
            T[near] = np.minimum(T[near], t)
            fixed[near] = True
    if max_iter is None:
        max_iter = 200 * int(grid.dims.sum()) + 1000

    def spread(nodes):
        nb = grid.neighbors[nodes].ravel()
        mark = np.zeros(n, dtype=bool)
        mark[nb[nb >= 0]] = True
        mark[nodes] = True
        mark &= ~fixed
        return mark

    active = spread(np.flatnonzero(fixed))
    it = 0
    while active.any():
        it += 1
        if it > max_iter:
            raise NotConverged(f"eikonal active list not empty after {max_iter} iterations")
        nodes = np.flatnonzero(active)
        old = T[nodes]
        new = np.minimum(old, _local_solve(T, nodes, grid, G, problem.c0))
        with np.errstate(invalid="ignore"):
            changed = nodes[~(old - new <= tol)]
        T[nodes] = new
        changed = changed[np.isfinite(T[changed])]
        active = spread(changed) if changed.size else np.zeros(n, dtype=bool)
    if not np.all(np.isfinite(T)):
        raise NotConverged("some nodes were never reached")
    return T
