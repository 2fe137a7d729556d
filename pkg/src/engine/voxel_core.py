from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import EmptyStructure

logger = logging.getLogger(__name__)

Connectivity = Literal[6, 26]

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Cubic occupancy field of one metamaterial unit.

    Values live in [0, 1]; ``binary_flag`` is True only when every value is
    exactly 0 or 1. The stored array is a read-only float64 copy.
    """

    occupancy: np.ndarray
    binary_flag: bool = field(default=False)

    def __post_init__(self) -> None:
        arr = np.array(self.occupancy, dtype=np.float64, copy=True)
        if arr.ndim != 3 or len(set(arr.shape)) != 1 or arr.shape[0] < 1:
            raise ValueError(f"occupancy must be a non-empty cube, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("occupancy values must lie in [0, 1]")
        if self.binary_flag and not np.all((arr == 0.0) | (arr == 1.0)):
            raise ValueError("binary_flag set but occupancy holds non-binary values")
        arr.setflags(write=False)
        object.__setattr__(self, "occupancy", arr)

    @property
    def edge_voxels(self) -> int:
        return int(self.occupancy.shape[0])

    @classmethod
    def from_array(cls, values: np.ndarray) -> "VoxelGrid":
        """Wrap an array, setting the binary flag when the values allow it."""
        arr = np.asarray(values, dtype=np.float64)
        return cls(arr, binary_flag=bool(np.all((arr == 0.0) | (arr == 1.0))))

    def solid_mask(self) -> np.ndarray:
        return self.occupancy >= DEFAULT_THRESHOLD


@dataclass(frozen=True, eq=False)
class EighthCell(VoxelGrid):
    """Corner octant of a cubic-symmetric unit (the network's input)."""


def mirror_eighth(eighth: EighthCell | VoxelGrid) -> VoxelGrid:
    """Reflect an eighth cell across the three mid-planes into the full unit."""
    arr = eighth.occupancy
    for axis in range(3):
        arr = np.concatenate([arr, np.flip(arr, axis=axis)], axis=axis)
    return VoxelGrid(arr, binary_flag=eighth.binary_flag)


def extract_eighth(grid: VoxelGrid) -> EighthCell:
    if grid.edge_voxels % 2:
        raise ValueError(f"cannot take the eighth of an odd edge ({grid.edge_voxels})")
    h = grid.edge_voxels // 2
    return EighthCell(grid.occupancy[:h, :h, :h], binary_flag=grid.binary_flag)


def volume_fraction(grid: VoxelGrid) -> float:
    return float(grid.occupancy.mean())


def binarize(grid: VoxelGrid, threshold: float = DEFAULT_THRESHOLD) -> VoxelGrid:
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    solid = (grid.occupancy >= threshold).astype(np.float64)
    return type(grid)(solid, binary_flag=True)


def _structure(connectivity: Connectivity) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def periodic_labels(solid: np.ndarray, connectivity: Connectivity = 6) -> tuple[np.ndarray, int]:
    """Label connected solid components with wrap-around adjacency.

    Returns an int array (0 = void, 1..n = component) and the component count.
    The grid is padded by one periodic layer and labelled with scipy; labels
    that meet through a padded copy of the same voxel are merged.
    """
    solid = np.asarray(solid, dtype=bool)
    l = solid.shape[0]
    padded = np.pad(solid, 1, mode="wrap")
    labels, n = ndimage.label(padded, structure=_structure(connectivity))
    if n == 0:
        return np.zeros(solid.shape, dtype=np.int64), 0

    index = np.arange(solid.size).reshape(solid.shape)
    padded_index = np.pad(index, 1, mode="wrap")
    interior = labels[1:-1, 1:-1, 1:-1]
    interior_by_index = interior.reshape(-1)

    mask = padded
    src = labels[mask]
    dst = interior_by_index[padded_index[mask]]
    graph = coo_matrix((np.ones(src.size), (src, dst)), shape=(n + 1, n + 1))
    _, merged = connected_components(graph, directed=False)

    # renumber merged components 1..k over solid voxels only
    solid_components = merged[interior[solid]]
    uniques, dense = np.unique(solid_components, return_inverse=True)
    out = np.zeros(solid.shape, dtype=np.int64)
    out[solid] = dense + 1
    logger.debug("periodic labelling: %d raw labels -> %d components (l=%d)", n, uniques.size, l)
    return out, int(uniques.size)


def largest_component(grid: VoxelGrid, connectivity: Connectivity = 6) -> tuple[VoxelGrid, int]:
    """Keep only the largest periodically connected solid component.

    Returns the cleaned grid and the number of solid voxels removed. Ties
    between equally large components keep the lowest label.
    """
    if not grid.binary_flag:
        raise ValueError("largest_component needs a binary grid; binarize first")
    solid = grid.occupancy == 1.0
    if not solid.any():
        raise EmptyStructure("grid holds no solid voxel")
    labels, n = periodic_labels(solid, connectivity)
    sizes = np.bincount(labels.reshape(-1), minlength=n + 1)
    sizes[0] = 0
    keep = int(np.argmax(sizes))
    cleaned = labels == keep
    removed = int(solid.sum() - cleaned.sum())
    if removed:
        logger.debug("largest_component removed %d floating voxels across %d components", removed, n - 1)
    return type(grid)(cleaned.astype(np.float64), binary_flag=True), removed
