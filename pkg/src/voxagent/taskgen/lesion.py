"""Model-based lesion synthesis inside a target tissue."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..voxelcore import BinaryMask, VoxelGrid
from .phantom import Phantom, ellipsoid_mask

INTENSITY_CLASSES = ("hyperintense", "hypointense", "isointense")
ISO_TOLERANCE = 0.05
SHELL_WIDTH = 3


class LesionPlacementError(RuntimeError):
    pass


@dataclass
class LesionSpec:
    target: str = "brain"
    radius: float = 3.0  # mm
    classes: dict[str, str] = field(default_factory=lambda: {"T1w": "hypointense", "FLAIR": "hyperintense"})
    heterogeneous: bool = False
    ellipsoids: tuple[int, int] = (2, 4)
    dilate_max: int = 1
    erode_max: int = 1
    deform_max: float = 2.0  # voxels
    contrast_range: tuple[float, float] = (0.2, 0.35)
    iso_jitter: float = 0.015
    min_voxels: int = 6


@dataclass
class LesionGeometry:
    """Everything needed to re-rasterize a lesion, e.g. at a second timepoint."""

    center: np.ndarray
    radius: float
    ellipsoids: list  # (offset, axes, rotation)
    morph: list  # sequence of "dilate"/"erode"
    displacement: np.ndarray  # [3, X, Y, Z] voxels
    secondary: tuple | None = None  # (offset, axes, rotation)


@dataclass
class Lesion:
    mask: BinaryMask
    volumes: dict[str, VoxelGrid]
    attributes: dict
    geometry: LesionGeometry
    fills: dict[str, tuple[float, float | None]]


HEMISPHERES = ("left hemisphere", "right hemisphere")
MIDLINE_GAP = 1.5  # mm kept free on either side of x = 0


def target_region(phantom: Phantom, name: str) -> np.ndarray:
    """Voxels a lesion may occupy: free parenchyma, one hemisphere of it, or a named structure."""
    if name == "brain":
        return phantom.tissue()
    if name in HEMISPHERES:
        probe = next(iter(phantom.volumes.values()))
        x = probe.world_coords().reshape(*probe.shape, 3)[..., 0]
        side = x < -MIDLINE_GAP if name == "left hemisphere" else x > MIDLINE_GAP
        return phantom.tissue() & side
    return phantom.mask(name).values.copy()


def _sphere(world, center, radius):
    return ((world - center) ** 2).sum(axis=-1) <= radius**2


def rasterize(geom: LesionGeometry, world: np.ndarray, target: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Lesion mask for ``geom`` with all sizes and offsets scaled by ``scale``."""
    m = np.zeros(world.shape[:3], dtype=bool)
    for off, axes, rot in geom.ellipsoids:
        m |= ellipsoid_mask(world, geom.center + scale * off, scale * axes, rot)
    for op in geom.morph:
        if not m.any():
            break
        m = ndimage.binary_dilation(m) if op == "dilate" else ndimage.binary_erosion(m)
    if geom.displacement is not None and m.any():
        grid = np.indices(m.shape).astype(np.float64)
        m = ndimage.map_coordinates(m.astype(np.float64), grid + geom.displacement, order=1, mode="constant") > 0.5
    return m & _sphere(world, geom.center, scale * geom.radius) & target


def shell_mask(lesion: np.ndarray, head: np.ndarray, width: int = SHELL_WIDTH) -> np.ndarray:
    return ndimage.binary_dilation(lesion, iterations=width) & ~lesion & head


def shell_contrast(volume: np.ndarray, lesion: np.ndarray, head: np.ndarray) -> float:
    """Mean lesion intensity minus mean intensity of the surrounding shell."""
    shell = shell_mask(lesion, head)
    return float(volume[lesion].mean() - volume[shell].mean())


def classify_contrast(delta: float, tol: float = ISO_TOLERANCE) -> str:
    if abs(delta) < tol:
        return "isointense"
    return "hyperintense" if delta > 0 else "hypointense"


def _random_rotation(rng):
    from scipy.spatial.transform import Rotation

    return Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()


def _smooth_displacement(rng, shape, max_vox):
    if max_vox <= 0:
        return None
    field = rng.standard_normal((3,) + tuple(shape))
    field = np.stack([ndimage.gaussian_filter(f, sigma=2.0) for f in field])
    peak = np.abs(field).max()
    return field * (rng.uniform(0.3, 1.0) * max_vox / peak) if peak > 0 else None


def sample_geometry(phantom: Phantom, spec: LesionSpec, rng, target: np.ndarray, retries: int = 20) -> LesionGeometry:
    probe = phantom.volumes[next(iter(phantom.volumes))]
    world = probe.world_coords().reshape(*probe.shape, 3)
    spacing = probe.voxel_sizes
    dist = ndimage.distance_transform_edt(target, sampling=spacing)
    for _ in range(retries):
        fits = np.argwhere(dist >= spec.radius)
        if len(fits) == 0:
            break
        c = world[tuple(fits[int(rng.integers(len(fits)))])]
        r = spec.radius
        n = int(rng.integers(spec.ellipsoids[0], spec.ellipsoids[1] + 1))
        ells = []
        for _ in range(n):
            off = rng.uniform(-0.45, 0.45, 3) * r
            axes = rng.uniform(0.4, 0.85, 3) * r
            ells.append((off, axes, _random_rotation(rng)))
        morph = ["dilate"] * int(rng.integers(0, spec.dilate_max + 1)) + ["erode"] * int(rng.integers(0, spec.erode_max + 1))
        rng.shuffle(morph)
        disp = _smooth_displacement(rng, probe.shape, spec.deform_max)
        sec = None
        if spec.heterogeneous:
            sec = (rng.uniform(-0.3, 0.3, 3) * r, rng.uniform(0.3, 0.5, 3) * r, _random_rotation(rng))
        geom = LesionGeometry(np.asarray(c), r, ells, morph, disp, sec)
        if rasterize(geom, world, target).sum() >= spec.min_voxels:
            return geom
    raise LesionPlacementError(f"could not place a {spec.radius} mm lesion inside {spec.target!r}")


def _fill_value(cls, base, rng, spec):
    if cls == "hyperintense":
        return base + rng.uniform(*spec.contrast_range)
    if cls == "hypointense":
        return base - rng.uniform(*spec.contrast_range)
    if cls == "isointense":
        return base + rng.uniform(-spec.iso_jitter, spec.iso_jitter)
    raise ValueError(f"unknown intensity class {cls!r}")


def paint(phantom: Phantom, lesion_mask: np.ndarray, geom: LesionGeometry, fills: dict, noise: float, rng, scale: float = 1.0) -> dict:
    world = next(iter(phantom.volumes.values())).world_coords().reshape(*lesion_mask.shape, 3)
    secondary = np.zeros_like(lesion_mask)
    if geom.secondary is not None:
        off, axes, rot = geom.secondary
        secondary = ellipsoid_mask(world, geom.center + scale * off, scale * axes, rot) & lesion_mask
    out = {}
    for con, grid in phantom.volumes.items():
        v = grid.values.astype(np.float64).copy()
        f1, f2 = fills[con]
        v[lesion_mask] = f1
        if f2 is not None:
            v[secondary] = f2
        v[lesion_mask] += rng.normal(0.0, noise, int(lesion_mask.sum()))
        out[con] = grid.with_values(np.clip(v, 0.0, 1.0).astype(np.float32))
    return out


def synth_lesion(phantom: Phantom, spec: LesionSpec, rng: np.random.Generator) -> Lesion:
    """Place, shape and in-paint one lesion; each contrast realizes its declared class."""
    for con in phantom.volumes:
        if con not in spec.classes:
            raise ValueError(f"no intensity class declared for contrast {con!r}")
    target = target_region(phantom, spec.target)
    geom = sample_geometry(phantom, spec, rng, target)
    world = next(iter(phantom.volumes.values())).world_coords().reshape(*phantom.labels.shape, 3)
    lesion = rasterize(geom, world, target)
    head = phantom.head()
    fills = {}
    for con, grid in phantom.volumes.items():
        base = float(grid.values[shell_mask(lesion, head)].mean())
        cls = spec.classes[con]
        f1 = _fill_value(cls, base, rng, spec)
        f2 = _fill_value(cls, base, rng, spec) if spec.heterogeneous else None
        fills[con] = (f1, f2)
    vols = paint(phantom, lesion, geom, fills, phantom.spec.noise, rng)
    center_vox = np.argwhere(lesion).mean(axis=0)
    attrs = {
        "target": spec.target,
        "classes": dict(spec.classes),
        "radius": spec.radius,
        "voxels": int(lesion.sum()),
        "center_mm": tuple(float(x) for x in world[tuple(np.round(center_vox).astype(int))]),
        "heterogeneous": spec.heterogeneous,
    }
    return Lesion(BinaryMask(lesion, phantom.affine), vols, attrs, geom, fills)


def regrow(phantom: Phantom, lesion: Lesion, scale: float, rng, target: str | None = None) -> tuple[BinaryMask, dict]:
    """Second-timepoint lesion: same geometry re-rasterized at ``scale``, painted with the same fills."""
    target = target or lesion.attributes["target"]
    tgt = target_region(phantom, target)
    world = next(iter(phantom.volumes.values())).world_coords().reshape(*phantom.labels.shape, 3)
    m = rasterize(lesion.geometry, world, tgt, scale=scale)
    vols = paint(phantom, m, lesion.geometry, lesion.fills, phantom.spec.noise, rng, scale=scale)
    return BinaryMask(m, phantom.affine), vols
