"""Procedural head phantoms with exact label maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..voxelcore import BinaryMask, VoxelGrid, spacing_affine

BACKGROUND, BRAIN = 0, 1


class PhantomSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Structure:
    name: str
    center: tuple[float, float, float]  # world mm
    axes: tuple[float, float, float]  # semi-axes, mm
    rotation: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))


# canonical layout in a head centred on the origin (mm); +x right, +y anterior, +z superior
STRUCTURE_LAYOUT = {
    "left ventricle": ((-3.8, 2.0, 2.5), (2.1, 4.3, 2.7)),
    "right ventricle": ((3.8, 2.0, 2.5), (2.1, 4.3, 2.7)),
    "brainstem": ((0.0, -1.2, -4.2), (2.4, 2.4, 3.3)),
    "cerebellum": ((0.0, -7.3, -2.8), (4.8, 2.2, 2.4)),
}

# per contrast: (brain, ventricle, brainstem, cerebellum)
INTENSITY_TABLE = {
    "T1w": {"brain": 0.55, "left ventricle": 0.15, "right ventricle": 0.15, "brainstem": 0.75, "cerebellum": 0.35},
    "FLAIR": {"brain": 0.45, "left ventricle": 0.08, "right ventricle": 0.08, "brainstem": 0.3, "cerebellum": 0.7},
}


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (24, 24, 16)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.5)
    head_axes: tuple[float, float, float] = (10.5, 11.0, 10.0)
    structures: list[Structure] = field(default_factory=list)
    intensities: dict[str, dict[str, float]] = field(default_factory=dict)
    noise: float = 0.02

    @property
    def contrasts(self) -> list[str]:
        return list(self.intensities)

    @property
    def labels(self) -> dict[str, int]:
        out = {"background": BACKGROUND, "brain": BRAIN}
        for i, s in enumerate(self.structures):
            out[s.name] = i + 2
        return out


@dataclass
class Phantom:
    spec: PhantomSpec
    volumes: dict[str, VoxelGrid]
    labels: np.ndarray  # int label map
    affine: np.ndarray

    def mask(self, name: str) -> BinaryMask:
        lab = self.spec.labels[name]
        if name == "brain":
            return BinaryMask(self.labels > BACKGROUND, self.affine)
        return BinaryMask(self.labels == lab, self.affine)

    def tissue(self) -> np.ndarray:
        """Parenchyma not covered by a named structure."""
        return self.labels == BRAIN

    def head(self) -> np.ndarray:
        return self.labels > BACKGROUND


def ellipsoid_mask(world: np.ndarray, center, axes, rotation=None) -> np.ndarray:
    """Voxels whose world coordinate lies inside the (rotated) ellipsoid."""
    d = world - np.asarray(center, dtype=float)
    if rotation is not None:
        d = d @ np.asarray(rotation, dtype=float)
    return ((d / np.asarray(axes, dtype=float)) ** 2).sum(axis=-1) <= 1.0


def random_phantom_spec(rng: np.random.Generator, shape=(24, 24, 16), spacing=(1.0, 1.0, 1.5), contrasts=("T1w", "FLAIR"), noise=0.02) -> PhantomSpec:
    """Jittered canonical layout with randomized (order-preserving) intensities."""
    from scipy.spatial.transform import Rotation

    structures = []
    for name, (c, a) in STRUCTURE_LAYOUT.items():
        center = tuple(float(x) for x in np.asarray(c) + rng.uniform(-0.6, 0.6, 3))
        axes = tuple(float(x) for x in np.asarray(a) * rng.uniform(0.9, 1.1, 3))
        rot = Rotation.from_euler("z", rng.uniform(-8, 8), degrees=True).as_matrix()
        structures.append(Structure(name, center, axes, tuple(map(tuple, rot))))
    head = tuple(float(x) for x in np.asarray((10.5, 11.0, 10.0)) * rng.uniform(0.95, 1.03, 3))
    intensities = {}
    for con in contrasts:
        table = INTENSITY_TABLE[con]
        intensities[con] = {k: float(np.clip(v + rng.uniform(-0.04, 0.04), 0.02, 0.95)) for k, v in table.items()}
    return PhantomSpec(tuple(shape), tuple(spacing), head, structures, intensities, noise)


def synth_phantom(spec: PhantomSpec, rng: np.random.Generator) -> Phantom:
    affine = spacing_affine(spec.shape, spec.spacing)
    probe = VoxelGrid(np.zeros(spec.shape, dtype=np.float32), affine)
    world = probe.world_coords().reshape(*spec.shape, 3)
    head = ellipsoid_mask(world, (0, 0, 0), spec.head_axes)
    labels = np.where(head, BRAIN, BACKGROUND).astype(np.int16)
    for i, s in enumerate(spec.structures):
        m = ellipsoid_mask(world, s.center, s.axes, s.rotation)
        if not m.any():
            raise PhantomSpecError(f"structure {s.name!r} covers no voxel")
        if np.any(labels[m] > BRAIN):
            raise PhantomSpecError(f"structure {s.name!r} overlaps another structure")
        if np.any(~head[m]):
            raise PhantomSpecError(f"structure {s.name!r} extends outside the head")
        labels[m] = i + 2
    volumes = {}
    names = {v: k for k, v in spec.labels.items()}
    for con, table in spec.intensities.items():
        img = np.zeros(spec.shape, dtype=np.float64)
        for lab in np.unique(labels):
            if lab == BACKGROUND:
                continue
            img[labels == lab] = table[names[int(lab)]]
        img += rng.normal(0.0, spec.noise, spec.shape) * (labels > BACKGROUND)
        volumes[con] = VoxelGrid(np.clip(img, 0.0, 1.0).astype(np.float32), affine)
    return Phantom(spec, volumes, labels, affine)


def make_phantom(rng: np.random.Generator, retries: int = 50, **kwargs) -> Phantom:
    """Draw random specs until one rasterizes cleanly."""
    for _ in range(retries):
        spec = random_phantom_spec(rng, **kwargs)
        try:
            return synth_phantom(spec, rng)
        except PhantomSpecError:
            continue
    raise PhantomSpecError(f"no valid phantom after {retries} draws")
