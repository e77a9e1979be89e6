"""Spatial domains, fiber frames and conductivity tensors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidDims, NegativeSigma, Unsupported


@dataclass(frozen=True, eq=False)
class Geometry:
    """Structured tensor-product grid or raw point cloud.

    Structured node ``(i, j, k)`` has flat index ``i + nx * (j + ny * k)``
    (x fastest). All lengths are in cm.
    """

    kind: str
    coords: np.ndarray
    dims: tuple | None = None
    extent: tuple | None = None
    spacing: tuple | None = None

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def ndim(self) -> int:
        return self.coords.shape[1]

    @property
    def is_structured(self) -> bool:
        return self.kind in ("structured2d", "structured3d")

    def flat_index(self, *ijk):
        """Flat node index of grid position ``(i, j[, k])``."""
        self._require_structured()
        idx = 0
        stride = 1
        for i, n in zip(ijk, self.dims):
            idx = idx + np.asarray(i) * stride
            stride *= n
        return idx

    def grid_index(self, flat):
        """Inverse of :meth:`flat_index`."""
        self._require_structured()
        out = []
        rem = np.asarray(flat)
        for n in self.dims:
            out.append(rem % n)
            rem = rem // n
        return tuple(out)

    def to_grid(self, field):
        """Reshape trailing node axis to an array indexed ``[..., i, j(, k)]``."""
        self._require_structured()
        field = np.asarray(field)
        lead = field.shape[:-1]
        nd = len(self.dims)
        arr = field.reshape(lead + tuple(reversed(self.dims)))
        axes = tuple(range(len(lead))) + tuple(len(lead) + nd - 1 - a for a in range(nd))
        return arr.transpose(axes)

    def from_grid(self, arr):
        """Inverse of :meth:`to_grid`."""
        self._require_structured()
        arr = np.asarray(arr)
        nd = len(self.dims)
        lead = arr.shape[:-nd]
        axes = tuple(range(len(lead))) + tuple(len(lead) + nd - 1 - a for a in range(nd))
        return np.ascontiguousarray(arr.transpose(axes)).reshape(lead + (self.n_nodes,))

    def describe(self) -> dict:
        d = {"kind": self.kind}
        if self.is_structured:
            d["dims"] = list(self.dims)
            d["extent"] = [float(e) for e in self.extent]
        return d

    def same_as(self, other) -> bool:
        if self.kind != other.kind or self.coords.shape != other.coords.shape:
            return False
        if self.is_structured:
            return tuple(self.dims) == tuple(other.dims) and np.allclose(self.extent, other.extent)
        return np.array_equal(self.coords, other.coords)

    def _require_structured(self):
        if not self.is_structured:
            raise Unsupported("operation requires a structured grid")


def build_structured(dims, extent) -> Geometry:
    dims = tuple(int(d) for d in dims)
    extent = tuple(float(e) for e in extent)
    if len(dims) not in (2, 3) or len(extent) != len(dims):
        raise InvalidDims(f"need 2 or 3 axes with matching extent, got {dims}, {extent}")
    if any(d < 2 for d in dims) or any(not e > 0 for e in extent):
        raise InvalidDims(f"every dim must be >= 2 and every extent > 0, got {dims}, {extent}")
    spacing = tuple(e / (d - 1) for d, e in zip(dims, extent))
    axes = [np.arange(d) * h for d, h in zip(dims, spacing)]
    # indexing='ij' over reversed axes gives x fastest after ravel
    mesh = np.meshgrid(*reversed(axes), indexing="ij")
    coords = np.stack([m.ravel() for m in reversed(mesh)], axis=1)
    kind = "structured2d" if len(dims) == 2 else "structured3d"
    return Geometry(kind=kind, coords=coords, dims=dims, extent=extent, spacing=spacing)


def point_cloud(coords) -> Geometry:
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[0] == 0 or coords.shape[1] not in (2, 3):
        raise InvalidDims("point cloud needs a non-empty (n, 2|3) coordinate array")
    return Geometry(kind="point_cloud", coords=coords)


@dataclass(frozen=True, eq=False)
class FiberField:
    """Per-node orthonormal frames; ``frames[i, a]`` is direction ``n_{a+1}``."""

    frames: np.ndarray

    @property
    def n_nodes(self):
        return self.frames.shape[0]


def axis_fibers(geometry: Geometry) -> FiberField:
    d = geometry.ndim
    return FiberField(np.broadcast_to(np.eye(d), (geometry.n_nodes, d, d)).copy())


def rotated_fibers(geometry: Geometry, angle: float) -> FiberField:
    """Uniform fiber frame rotated counterclockwise by ``angle`` radians."""
    if geometry.kind != "structured2d":
        raise Unsupported("fiber rotation is defined for 2D structured grids only")
    c, s = np.cos(angle), np.sin(angle)
    frame = np.array([[c, s], [-s, c]])
    return FiberField(np.broadcast_to(frame, (geometry.n_nodes, 2, 2)).copy())


@dataclass(frozen=True, eq=False)
class ConductivityField:
    tensors: np.ndarray
    sigmas: tuple
    lam: float

    @property
    def scale(self) -> float:
        """Effective diffusion factor lambda / (1 + lambda)."""
        return self.lam / (1.0 + self.lam)

    @property
    def effective(self) -> np.ndarray:
        return self.scale * self.tensors

    def is_uniform(self) -> bool:
        return bool(np.all(self.tensors == self.tensors[:1]))


def assemble_conductivity(fibers: FiberField, sigmas, lam: float = 1.0) -> ConductivityField:
    d = fibers.frames.shape[-1]
    sigmas = tuple(float(s) for s in sigmas)
    if len(sigmas) < d:
        raise NegativeSigma(f"need {d} conductivities, got {len(sigmas)}")
    sig = np.array(sigmas[:d])
    if np.any(sig < 0) or not np.all(np.isfinite(sig)):
        raise NegativeSigma(f"conductivities must be finite and >= 0, got {sigmas}")
    if not lam > 0:
        raise NegativeSigma(f"lambda must be positive, got {lam}")
    f = fibers.frames
    tensors = np.einsum("nai,a,naj->nij", f, sig, f)
    tensors = 0.5 * (tensors + tensors.transpose(0, 2, 1))  # exact symmetry
    return ConductivityField(tensors=tensors, sigmas=sigmas[:d], lam=float(lam))
