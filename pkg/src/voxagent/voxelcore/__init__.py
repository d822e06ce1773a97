from .geometry import conform_inplane, conform_ras, crop_margin, normalize01, prepare, resample, resample_axes, resample_to
from .grid import BinaryMask, DomainError, GeometryError, Spacing, VoxelGrid, require_same_geometry, spacing_affine
from .io import (
    BadMagicError,
    TruncatedPayloadError,
    UnsupportedDatatypeError,
    VolumeParseError,
    load_volume,
    read_mask,
    read_volume,
    save_volume,
    write_volume,
)
from .metrics import RoiReport, dice, roi_report

__all__ = [
    "BadMagicError",
    "BinaryMask",
    "DomainError",
    "GeometryError",
    "RoiReport",
    "Spacing",
    "TruncatedPayloadError",
    "UnsupportedDatatypeError",
    "VolumeParseError",
    "VoxelGrid",
    "conform_inplane",
    "conform_ras",
    "crop_margin",
    "dice",
    "load_volume",
    "normalize01",
    "prepare",
    "read_mask",
    "read_volume",
    "require_same_geometry",
    "resample",
    "resample_axes",
    "resample_to",
    "roi_report",
    "save_volume",
    "spacing_affine",
    "write_volume",
]
