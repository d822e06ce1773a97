"""Training-time augmentation with spatial transforms shared across one instance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from ..voxelcore import BinaryMask, Spacing, VoxelGrid, require_same_geometry, resample


@dataclass
class AugmentConfig:
    p_affine: float = 0.8
    max_rotation: float = 10.0  # degrees
    max_scale: float = 0.08
    max_shift: float = 1.5  # voxels
    p_bias: float = 0.5
    bias_strength: float = 0.25
    p_gamma: float = 0.5
    gamma_sigma: float = 0.25
    p_flip: float = 0.0  # off by default: flipping swaps left/right labels
    p_crop: float = 0.3
    max_crop: int = 2
    p_mask: float = 0.2
    p_resize: float = 0.2
    resize_range: tuple[float, float] = (0.8, 1.25)


def lateral_flip(values: np.ndarray) -> np.ndarray:
    """Mirror across the x = 0 plane of a centred RAS grid."""
    return values[::-1].copy()


def _warp_matrix(rng, cfg: AugmentConfig) -> np.ndarray:
    rot = Rotation.from_euler("xyz", rng.uniform(-cfg.max_rotation, cfg.max_rotation, 3), degrees=True).as_matrix()
    return rot @ np.diag(1.0 + rng.uniform(-cfg.max_scale, cfg.max_scale, 3))


def affine_warp(values: np.ndarray, matrix: np.ndarray, shift=(0.0, 0.0, 0.0), spacing=(1.0, 1.0, 1.0), order: int = 1) -> np.ndarray:
    """Resample ``values`` under a world-space linear map about the grid centre."""
    sp = np.asarray(spacing, dtype=float)
    m = np.diag(1.0 / sp) @ np.linalg.inv(matrix) @ np.diag(sp)  # output index -> input index
    centre = (np.asarray(values.shape) - 1) / 2.0
    offset = centre - m @ centre - np.asarray(shift, dtype=float)
    return ndimage.affine_transform(values.astype(np.float64), m, offset=offset, order=order, mode="constant", cval=0.0)


def bias_field(rng, shape, strength: float) -> np.ndarray:
    coarse = rng.standard_normal(tuple(max(2, s // 6) for s in shape))
    field = ndimage.zoom(coarse, [s / c for s, c in zip(shape, coarse.shape)], order=3)
    field = field[: shape[0], : shape[1], : shape[2]]
    return np.exp(strength * field / max(np.abs(field).max(), 1e-8))


def augment(volumes: list[VoxelGrid], masks: list[BinaryMask], rng: np.random.Generator, config: AugmentConfig | None = None):
    """Apply one random draw of the augmentation pipeline to all volumes and masks of an instance."""
    cfg = config or AugmentConfig()
    if not volumes:
        return [], list(masks)
    ref = volumes[0]
    for g in list(volumes[1:]) + list(masks):
        require_same_geometry(ref, g)
    vols = [v.values.astype(np.float64) for v in volumes]
    mks = [m.values.astype(np.float64) for m in masks]
    affine = ref.affine.copy()

    if rng.random() < cfg.p_affine:
        mat = _warp_matrix(rng, cfg)
        shift = rng.uniform(-cfg.max_shift, cfg.max_shift, 3)
        vols = [affine_warp(v, mat, shift, ref.voxel_sizes) for v in vols]
        mks = [affine_warp(m, mat, shift, ref.voxel_sizes) for m in mks]
    if rng.random() < cfg.p_flip:
        vols = [lateral_flip(v) for v in vols]
        mks = [lateral_flip(m) for m in mks]
    if rng.random() < cfg.p_crop:
        lo = rng.integers(0, cfg.max_crop + 1, 3)
        hi = rng.integers(0, cfg.max_crop + 1, 3)
        sl = tuple(slice(int(a), s - int(b)) for a, b, s in zip(lo, hi, ref.shape))
        vols = [v[sl] for v in vols]
        mks = [m[sl] for m in mks]
        affine = affine.copy()
        affine[:3, 3] = affine[:3, :3] @ lo + affine[:3, 3]
    if rng.random() < cfg.p_mask:
        fg = np.any([v > 0.05 for v in vols], axis=0)
        fg = ndimage.binary_dilation(fg, iterations=int(rng.integers(0, 3)))
        vols = [v * fg for v in vols]

    # intensity-only augmentations
    out_vols = []
    for v in vols:
        if rng.random() < cfg.p_bias:
            v = v * bias_field(rng, v.shape, cfg.bias_strength)
        v = np.clip(v, 0.0, None)
        if v.max() > 0:
            v = v / v.max()
        if rng.random() < cfg.p_gamma:
            v = v ** np.exp(rng.normal(0.0, cfg.gamma_sigma))
        out_vols.append(VoxelGrid(v.astype(np.float32), affine))
    out_masks = [BinaryMask(m > 0.5, affine) for m in mks]

    if rng.random() < cfg.p_resize:
        sp = out_vols[0].voxel_sizes
        f = rng.uniform(*cfg.resize_range)
        target = Spacing(float(sp[0] * f), float(sp[2] * f))
        out_vols = [resample(v, target) for v in out_vols]
        out_masks = [BinaryMask(resample(VoxelGrid(m.as_float(), m.affine), target).values > 0.5, out_vols[0].affine) for m in out_masks]
    return out_vols, out_masks
