"""Orientation, intensity normalization, cropping and resampling."""

from __future__ import annotations

import math

import numpy as np

from .grid import INPLANE_RTOL, BinaryMask, DomainError, GeometryError, Spacing, VoxelGrid, require_same_geometry


def axis_orientation(affine: np.ndarray) -> list[tuple[int, int]]:
    """For each voxel axis, the (world axis, sign) it points along most closely.

    Assignment is greedy on the largest absolute direction cosine so that
    oblique affines still map to a permutation.
    """
    rot = np.asarray(affine, dtype=float)[:3, :3]
    if abs(np.linalg.det(rot)) < 1e-12:
        raise GeometryError("affine is singular")
    cosines = rot / np.linalg.norm(rot, axis=0)
    work = np.abs(cosines)
    result = [None, None, None]
    for _ in range(3):
        world, vox = np.unravel_index(np.argmax(work), work.shape)
        result[vox] = (int(world), 1 if cosines[world, vox] >= 0 else -1)
        work[world, :] = -1
        work[:, vox] = -1
    return result


def conform_ras(g: VoxelGrid) -> VoxelGrid:
    """Permute and flip axes so voxel axes increase toward +R, +A, +S.

    Only index bookkeeping happens: every voxel keeps its value and its world
    coordinate.
    """
    orient = axis_orientation(g.affine)
    # perm[w] = source voxel axis that points along world axis w
    perm = [0, 0, 0]
    signs = [1, 1, 1]
    for vox, (world, sign) in enumerate(orient):
        perm[world] = vox
        signs[world] = sign
    if perm == [0, 1, 2] and signs == [1, 1, 1]:
        return g
    data = np.transpose(g.values, perm)
    # old_index = T @ new_index (homogeneous)
    T = np.zeros((4, 4))
    T[3, 3] = 1.0
    for new_ax, old_ax in enumerate(perm):
        n = g.shape[old_ax]
        if signs[new_ax] < 0:
            T[old_ax, new_ax] = -1.0
            T[old_ax, 3] = n - 1
        else:
            T[old_ax, new_ax] = 1.0
    for new_ax in range(3):
        if signs[new_ax] < 0:
            data = np.flip(data, axis=new_ax)
    return type(g)(np.ascontiguousarray(data), g.affine @ T)


def conform_inplane(g: VoxelGrid) -> VoxelGrid:
    """Resample axes 0/1 to the finer in-plane spacing when they disagree."""
    sx, sy, sz = g.voxel_sizes
    if abs(sx - sy) <= INPLANE_RTOL * max(sx, sy):
        return g
    s = min(sx, sy)
    return resample_axes(g, (s, s, sz))


def normalize01(g: VoxelGrid) -> VoxelGrid:
    v = g.values.astype(np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        out = np.zeros_like(v)
    else:
        out = (v - lo) / (hi - lo)
    return g.with_values(out.astype(g.values.dtype))


def crop_margin(g: VoxelGrid, m: BinaryMask, margin_mm: float) -> VoxelGrid:
    """Crop to the world bounding box of ``m`` grown by ``margin_mm`` per side."""
    require_same_geometry(g, m)
    if margin_mm < 0:
        raise DomainError("margin must be non-negative")
    idx = np.argwhere(m.values)
    if len(idx) == 0:
        raise DomainError("cannot crop around an empty mask")
    world = g.world_coords(idx)
    lo = world.min(axis=0) - margin_mm
    hi = world.max(axis=0) + margin_mm
    allw = g.world_coords().reshape(*g.shape, 3)
    tol = 1e-6 * max(1.0, float(np.abs(allw).max()))
    inside = np.all((allw >= lo - tol) & (allw <= hi + tol), axis=-1)
    keep = np.argwhere(inside)
    start = keep.min(axis=0)
    stop = keep.max(axis=0) + 1
    sl = tuple(slice(a, b) for a, b in zip(start, stop))
    aff = g.affine.copy()
    aff[:3, 3] = g.affine[:3, :3] @ start + g.affine[:3, 3]
    return type(g)(np.ascontiguousarray(g.values[sl]), aff)


def interp_matrix(n_in: int, n_out: int, ratio: float) -> np.ndarray:
    """Linear interpolation weights (n_out, n_in) between corner-aligned grids.

    Output voxel j sits at input coordinate ``(j + 0.5) * ratio - 0.5`` where
    ``ratio`` is the output/input voxel size. Samples beyond the edge clamp to
    the border voxel.
    """
    pos = (np.arange(n_out) + 0.5) * ratio - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    w = pos - lo
    M = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(M, (rows, lo), 1.0 - w)
    np.add.at(M, (rows, hi), w)
    return M


def resampled_length(n: int, src: float, dst: float) -> int:
    # guard against ceil(4.0000000001)
    return max(1, int(math.ceil(n * src / dst - 1e-9)))


def resample_axes(g: VoxelGrid, target) -> VoxelGrid:
    """Trilinear resampling to per-axis voxel sizes ``target`` (mm)."""
    src = g.voxel_sizes
    target = np.asarray(target, dtype=float)
    if np.any(target <= 0):
        raise DomainError("target spacing must be positive")
    data = g.values.astype(np.float64)
    T = np.eye(4)
    for ax in range(3):
        ratio = target[ax] / src[ax]
        n_out = resampled_length(g.shape[ax], src[ax], target[ax])
        if n_out == g.shape[ax] and abs(ratio - 1.0) < 1e-12:
            continue
        M = interp_matrix(g.shape[ax], n_out, ratio)
        data = np.moveaxis(np.tensordot(M, np.moveaxis(data, ax, 0), axes=(1, 0)), 0, ax)
        T[ax, ax] = ratio
        T[ax, 3] = 0.5 * ratio - 0.5
    return type(g)(data.astype(g.values.dtype), g.affine @ T)


def resample(g: VoxelGrid, target: Spacing) -> VoxelGrid:
    return resample_axes(g, (target.s_inp, target.s_inp, target.s_sep))


def resample_to(g: VoxelGrid, ref: VoxelGrid, order: int = 1) -> VoxelGrid:
    """Sample ``g`` at the voxel centres of ``ref`` (world-space lookup)."""
    from scipy.ndimage import map_coordinates

    if g.same_geometry(ref):
        return g
    vox = np.linalg.solve(g.affine, np.vstack([ref.world_coords().T, np.ones(int(np.prod(ref.shape)))]))[:3]
    for ax in range(3):
        vox[ax] = np.clip(vox[ax], 0, g.shape[ax] - 1)
    out = map_coordinates(g.values.astype(np.float64), vox, order=order, mode="nearest")
    return VoxelGrid(out.reshape(ref.shape).astype(np.float32), ref.affine)


def prepare(g: VoxelGrid) -> VoxelGrid:
    """Conform orientation and in-plane spacing; axis 2 becomes the slice axis."""
    return conform_inplane(conform_ras(g))
