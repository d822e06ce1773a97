"""Region-of-interest metrics on voxel grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import BinaryMask, DomainError, VoxelGrid, require_same_geometry

DEGENERATE_STD = 1e-8


@dataclass(frozen=True)
class RoiReport:
    volume_mm3: float
    extents_mm: tuple[float, float, float]
    mean: float
    std: float
    snr: float | None
    degenerate: bool = False


def dice(a: BinaryMask, b: BinaryMask) -> float:
    """Overlap 2|A∩B| / (|A|+|B|); two empty masks count as a perfect match."""
    require_same_geometry(a, b)
    va = np.asarray(a.values, dtype=bool)
    vb = np.asarray(b.values, dtype=bool)
    total = int(va.sum()) + int(vb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(va, vb).sum()) / total


def world_extents(g: VoxelGrid, m: BinaryMask) -> tuple[float, float, float]:
    """Bounding-box size of the mask along each world axis, voxel footprint included."""
    idx = np.argwhere(m.values)
    world = g.world_coords(idx)
    footprint = np.abs(g.affine[:3, :3]).sum(axis=1)
    ext = world.max(axis=0) - world.min(axis=0) + footprint
    return tuple(float(e) for e in ext)


def roi_report(g: VoxelGrid, m: BinaryMask) -> RoiReport:
    require_same_geometry(g, m)
    sel = np.asarray(m.values, dtype=bool)
    n = int(sel.sum())
    if n == 0:
        raise DomainError("ROI mask is empty")
    vals = g.values[sel].astype(np.float64)
    mean = float(vals.mean())
    std = float(vals.std())
    degenerate = std <= DEGENERATE_STD
    return RoiReport(
        volume_mm3=n * g.voxel_volume,
        extents_mm=world_extents(g, m),
        mean=mean,
        std=std,
        snr=None if degenerate else mean / std,
        degenerate=degenerate,
    )
