"""Voxel-grid containers and mask morphology.

All volumes are defined co-registered by construction: orientation is
implicit, only grid shape and voxel spacing are carried. Unfittable
voxels are encoded as NaN and excluded from every statistic downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

LABEL_BACKGROUND = 0
LABEL_WM = 1
LABEL_SGM = 2
LABEL_CGM = 3
KNOWN_LABELS = (LABEL_BACKGROUND, LABEL_WM, LABEL_SGM, LABEL_CGM)
LABEL_NAMES = {LABEL_WM: "WM", LABEL_SGM: "SGM", LABEL_CGM: "CGM"}


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be 3 positive reals, got {spacing}")
    return spacing


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Volume3D:
    """Real scalar voxel grid. Units depend on role (seconds for T1 maps,
    dimensionless for combined images and B1 factors)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or 0 in data.shape:
            raise ValueError(f"expected a nonempty 3D array, got shape {data.shape}")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class ComplexVolume3D:
    """Complex voxel grid (GRE images, arbitrary signal units)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.complex128)
        if data.ndim != 3 or 0 in data.shape:
            raise ValueError(f"expected a nonempty 3D array, got shape {data.shape}")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LabelMask:
    """Small-integer tissue labels: 0 background/CSF, 1 WM, 2 SGM, 3 CGM."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or 0 in data.shape:
            raise ValueError(f"expected a nonempty 3D array, got shape {data.shape}")
        data = data.astype(np.int16, casting="unsafe")
        unknown = set(np.unique(data)) - set(KNOWN_LABELS)
        if unknown:
            raise ValueError(f"unknown labels {sorted(unknown)}; allowed {KNOWN_LABELS}")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def brain(self) -> np.ndarray:
        """Boolean array of labeled (non-background) voxels."""
        return self.data != LABEL_BACKGROUND


def erode_mask(mask: LabelMask, label: int, cube_side: int) -> LabelMask:
    """Erode one label with a centered cube; other labels pass through.

    A voxel of `label` survives only if its full cube_side**3
    neighborhood carries `label`; the volume boundary counts as
    non-label. Eroded voxels become background.
    """
    if cube_side < 1 or cube_side % 2 == 0:
        raise ValueError(f"cube_side must be odd and positive, got {cube_side}")
    if label not in KNOWN_LABELS:
        raise ValueError(f"label {label} not in {KNOWN_LABELS}")
    if cube_side == 1:
        return mask
    binary = mask.data == label
    structure = np.ones((cube_side,) * 3, dtype=bool)
    survives = ndimage.binary_erosion(binary, structure=structure, border_value=0)
    out = np.where(binary & ~survives, LABEL_BACKGROUND, mask.data)
    return LabelMask(out, mask.spacing)


def check_same_grid(*vols) -> None:
    dims = {v.dims for v in vols}
    if len(dims) > 1:
        raise ValueError(f"volumes are not on the same grid: {sorted(dims)}")
