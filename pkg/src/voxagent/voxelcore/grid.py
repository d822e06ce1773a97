"""Image carriers: voxel grids, binary masks and their spacing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    """Raised when an affine or a pair of grids is geometrically invalid."""


class DomainError(ValueError):
    """Raised when an input lies outside an operation's domain."""


INPLANE_RTOL = 1e-3


@dataclass(frozen=True)
class Spacing:
    """In-plane voxel size and slice separation, both in mm."""

    s_inp: float
    s_sep: float

    def __post_init__(self):
        if not (self.s_inp > 0 and self.s_sep > 0):
            raise DomainError(f"spacings must be positive, got {self.s_inp}, {self.s_sep}")

    @property
    def omega(self) -> float:
        return self.s_sep / self.s_inp

    def as_tuple(self) -> tuple[float, float]:
        return (self.s_inp, self.s_sep)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """A 3D scalar field with a voxel-index to world-mm affine."""

    values: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3 or min(values.shape) < 1:
            raise GeometryError(f"expected a non-empty 3D array, got shape {values.shape}")
        if not np.issubdtype(values.dtype, np.floating):
            values = values.astype(np.float32)
        if not np.all(np.isfinite(values)):
            raise DomainError("voxel values must be finite")
        affine = np.asarray(self.affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise GeometryError(f"affine must be 4x4, got {affine.shape}")
        if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
            raise GeometryError("affine is singular")
        object.__setattr__(self, "values", _freeze(values))
        object.__setattr__(self, "affine", _freeze(affine))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)

    @property
    def voxel_sizes(self) -> np.ndarray:
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    @property
    def voxel_volume(self) -> float:
        return float(abs(np.linalg.det(self.affine[:3, :3])))

    @property
    def spacing(self) -> Spacing:
        """Spacing with axes 0/1 in-plane and axis 2 as the slice axis."""
        sx, sy, sz = self.voxel_sizes
        if abs(sx - sy) > INPLANE_RTOL * max(sx, sy):
            raise GeometryError(f"in-plane spacing is anisotropic ({sx:g} vs {sy:g})")
        return Spacing(float(sx), float(sz))

    def same_geometry(self, other) -> bool:
        return self.shape == other.shape and np.array_equal(self.affine, other.affine)

    def with_values(self, values) -> VoxelGrid:
        return VoxelGrid(values, self.affine)

    def world_coords(self, index=None) -> np.ndarray:
        """World coordinates of the given (N, 3) voxel indices, or of every voxel."""
        if index is None:
            index = np.indices(self.shape).reshape(3, -1).T
        index = np.asarray(index, dtype=np.float64)
        return index @ self.affine[:3, :3].T + self.affine[:3, 3]

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (
            type(self) is type(other)
            and self.same_geometry(other)
            and self.values.dtype == other.values.dtype
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    def __repr__(self):
        sp = ", ".join(f"{s:g}" for s in self.voxel_sizes)
        return f"{type(self).__name__}(shape={self.shape}, spacing=({sp}))"


class BinaryMask(VoxelGrid):
    """Voxel grid restricted to the values {0, 1}."""

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.dtype != bool:
            uniq = np.unique(values)
            if not np.all(np.isin(uniq, (0, 1))):
                raise DomainError("mask values must be 0 or 1")
            values = values.astype(bool)
        object.__setattr__(self, "values", values)
        affine = np.asarray(self.affine, dtype=np.float64)
        if values.ndim != 3 or min(values.shape) < 1:
            raise GeometryError(f"expected a non-empty 3D array, got shape {values.shape}")
        if affine.shape != (4, 4) or abs(np.linalg.det(affine[:3, :3])) < 1e-12:
            raise GeometryError("mask affine must be an invertible 4x4 matrix")
        object.__setattr__(self, "values", _freeze(values))
        object.__setattr__(self, "affine", _freeze(affine))

    @classmethod
    def like(cls, ref: VoxelGrid, values) -> BinaryMask:
        return cls(np.asarray(values).reshape(ref.shape), ref.affine)

    @property
    def count(self) -> int:
        return int(self.values.sum())

    def as_float(self) -> np.ndarray:
        return self.values.astype(np.float32)


def require_same_geometry(a: VoxelGrid, b: VoxelGrid):
    if not a.same_geometry(b):
        raise DomainError(f"geometry mismatch: {a!r} vs {b!r}")


def spacing_affine(shape, spacing, origin=None) -> np.ndarray:
    """Axis-aligned RAS affine for the given per-axis voxel sizes."""
    sx, sy, sz = spacing
    aff = np.diag([sx, sy, sz, 1.0]).astype(np.float64)
    if origin is None:
        origin = -0.5 * (np.asarray(shape) - 1) * np.asarray(spacing, dtype=float)
    aff[:3, 3] = origin
    return aff
