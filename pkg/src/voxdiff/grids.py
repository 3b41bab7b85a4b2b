"""Semantic voxel grids, procedural scenes, and sensor visibility.

Grids are dense (X, Y, Z) uint8 label arrays in C order, so z varies fastest
in memory.  Class 0 is always FREE space.  Scenes are built from a flat
ground plane plus axis-aligned boxes in four object categories; visibility
is computed by integer ray traversal from a sensor voxel.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from numba import njit

from .rng import stream
from .validation import check_probability, check_num_classes

FREE = 0

# Label conventions for generated scenes (K = 6).
CLASS_NAMES = ("free", "ground", "vehicle", "pedestrian", "building", "vegetation")

# Axis-aligned box size ranges (inclusive), in voxels, per object category.
# Category order is the placement order used by generate_scene.
_CATEGORY_CLASSES = {"boxes": 2, "columns": 3, "slabs": 4, "scattered": 5}
_CATEGORY_SIZES = {
    "boxes": ((2, 5), (2, 3), (1, 2)),
    "columns": ((1, 1), (1, 1), (2, 3)),
    "slabs": ((4, 8), (4, 8), (3, 5)),
    "scattered": ((1, 2), (1, 2), (1, 2)),
}
_PLACEMENT_RETRIES = 100


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """A dense semantic occupancy grid.

    labels: (X, Y, Z) uint8 array of class ids in [0, num_classes).
    voxel_size: edge length of one voxel in meters.
    num_classes: number of semantic classes including FREE = 0.
    """

    labels: np.ndarray
    voxel_size: float
    num_classes: int

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise ValueError(f"labels must be a non-empty 3-d array, got shape {labels.shape}")
        check_num_classes(self.num_classes)
        if labels.max(initial=0) >= self.num_classes:
            raise ValueError("labels contain a class id >= num_classes")
        if not np.isfinite(self.voxel_size) or self.voxel_size <= 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "num_classes", int(self.num_classes))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    def with_labels(self, labels: np.ndarray, num_classes: int | None = None) -> "VoxelGrid":
        return VoxelGrid(labels, self.voxel_size, num_classes or self.num_classes)


@dataclass(frozen=True, eq=False)
class VisibilityMask:
    """Per-voxel sensor visibility flags: 1 = observed, 0 = occluded/out of range."""

    flags: np.ndarray

    def __post_init__(self):
        flags = np.ascontiguousarray(self.flags, dtype=np.uint8)
        if flags.ndim != 3:
            raise ValueError(f"flags must be a 3-d array, got shape {flags.shape}")
        if flags.max(initial=0) > 1:
            raise ValueError("visibility flags must be 0 or 1")
        flags.flags.writeable = False
        object.__setattr__(self, "flags", flags)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.flags.shape


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of the procedural scene generator.

    Count ranges are inclusive [lo, hi] pairs; ground_height is the inclusive
    range of the flat ground layer thickness in voxels.  The sensor voxel must
    sit strictly above the tallest possible ground layer.
    """

    dims: tuple[int, int, int] = (32, 32, 8)
    voxel_size: float = 0.4
    num_classes: int = 6
    ground_height: tuple[int, int] = (1, 2)
    boxes: tuple[int, int] = (2, 5)
    columns: tuple[int, int] = (1, 4)
    slabs: tuple[int, int] = (1, 2)
    scattered: tuple[int, int] = (2, 6)
    sensor: tuple[int, int, int] = (16, 16, 5)
    max_range: float = 20.0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        object.__setattr__(self, "dims", dims)
        if self.num_classes != len(CLASS_NAMES):
            raise ValueError(f"scene generator supports num_classes = {len(CLASS_NAMES)} only")
        if not np.isfinite(self.voxel_size) or self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if not np.isfinite(self.max_range) or self.max_range <= 0:
            raise ValueError("max_range must be positive")
        for name in ("ground_height", "boxes", "columns", "slabs", "scattered"):
            lo, hi = (int(v) for v in getattr(self, name))
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} range must satisfy 0 <= lo <= hi, got ({lo}, {hi})")
            object.__setattr__(self, name, (lo, hi))
        if self.ground_height[1] >= dims[2]:
            raise ValueError("ground_height upper bound must leave room below the grid top")
        sensor = tuple(int(v) for v in self.sensor)
        if not all(0 <= sensor[i] < dims[i] for i in range(3)):
            raise ValueError(f"sensor voxel {sensor} outside grid dims {dims}")
        if sensor[2] <= self.ground_height[1] - 1:
            raise ValueError("sensor voxel must sit above the tallest possible ground layer")
        object.__setattr__(self, "sensor", sensor)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f: d[f] for f in cls.__dataclass_fields__ if f in d}
        extra = set(d) - set(known)
        if extra:
            raise ValueError(f"unknown scene spec fields: {sorted(extra)}")
        return cls(**known)


def _boxes_conflict(b1, b2) -> bool:
    """True if axis-aligned boxes (x0,y0,z0,x1,y1,z1), b1 dilated by 1, intersect."""
    for ax in range(3):
        if b1[ax] - 1 > b2[ax + 3] or b2[ax] > b1[ax + 3] + 1:
            return False
    return True


def generate_scene(spec: SceneSpec, seed: int) -> VoxelGrid:
    """Generate one scene: flat ground layer plus non-touching axis-aligned boxes.

    Object boxes are rejection-placed so that, after dilating a candidate by
    one voxel, it intersects neither any placed box nor the sensor voxel;
    this keeps every object a separate 6-connected component of its class and
    keeps the sensor voxel FREE.  A candidate is retried up to 100 times and
    then skipped.
    """
    rng = stream(seed, "scene")
    X, Y, Z = spec.dims
    labels = np.zeros((X, Y, Z), dtype=np.uint8)

    g_lo, g_hi = spec.ground_height
    ground_h = int(rng.integers(g_lo, g_hi + 1))
    if ground_h > 0:
        labels[:, :, :ground_h] = 1

    sensor_box = (*spec.sensor, *spec.sensor)
    placed: list[tuple[int, ...]] = []
    for category in ("boxes", "columns", "slabs", "scattered"):
        lo, hi = getattr(spec, category)
        count = int(rng.integers(lo, hi + 1))
        size_ranges = _CATEGORY_SIZES[category]
        cls = _CATEGORY_CLASSES[category]
        for _ in range(count):
            for _ in range(_PLACEMENT_RETRIES):
                size = [int(rng.integers(s_lo, s_hi + 1)) for s_lo, s_hi in size_ranges]
                if size[0] > X or size[1] > Y or ground_h + size[2] > Z:
                    continue
                x0 = int(rng.integers(0, X - size[0] + 1))
                y0 = int(rng.integers(0, Y - size[1] + 1))
                z0 = ground_h
                box = (x0, y0, z0, x0 + size[0] - 1, y0 + size[1] - 1, z0 + size[2] - 1)
                if _boxes_conflict(box, sensor_box):
                    continue
                if any(_boxes_conflict(box, other) for other in placed):
                    continue
                labels[box[0]:box[3] + 1, box[1]:box[4] + 1, box[2]:box[5] + 1] = cls
                placed.append(box)
                break
    return VoxelGrid(labels, spec.voxel_size, spec.num_classes)


@njit(cache=True)
def _trace_rays(labels, flags, ox, oy, oz, dirs, max_range):  # pragma: no cover - compiled
    X, Y, Z = labels.shape
    px = ox + 0.5
    py = oy + 0.5
    pz = oz + 0.5
    for r in range(dirs.shape[0]):
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix, iy, iz = ox, oy, oz
        # Per-axis stepping state for Amanatides-Woo traversal.
        if dx > 0:
            sx, t_max_x, t_dx = 1, (ix + 1 - px) / dx, 1.0 / dx
        elif dx < 0:
            sx, t_max_x, t_dx = -1, (ix - px) / dx, -1.0 / dx
        else:
            sx, t_max_x, t_dx = 0, np.inf, np.inf
        if dy > 0:
            sy, t_max_y, t_dy = 1, (iy + 1 - py) / dy, 1.0 / dy
        elif dy < 0:
            sy, t_max_y, t_dy = -1, (iy - py) / dy, -1.0 / dy
        else:
            sy, t_max_y, t_dy = 0, np.inf, np.inf
        if dz > 0:
            sz, t_max_z, t_dz = 1, (iz + 1 - pz) / dz, 1.0 / dz
        elif dz < 0:
            sz, t_max_z, t_dz = -1, (iz - pz) / dz, -1.0 / dz
        else:
            sz, t_max_z, t_dz = 0, np.inf, np.inf
        while True:
            flags[ix, iy, iz] = 1
            if labels[ix, iy, iz] != FREE and not (ix == ox and iy == oy and iz == oz):
                break
            if t_max_x <= t_max_y and t_max_x <= t_max_z:
                t_next = t_max_x
            elif t_max_y <= t_max_z:
                t_next = t_max_y
            else:
                t_next = t_max_z
            if t_next > max_range:
                break
            if t_max_x <= t_max_y and t_max_x <= t_max_z:
                ix += sx
                t_max_x += t_dx
            elif t_max_y <= t_max_z:
                iy += sy
                t_max_y += t_dy
            else:
                iz += sz
                t_max_z += t_dz
            if ix < 0 or ix >= X or iy < 0 or iy >= Y or iz < 0 or iz >= Z:
                break


def ray_directions(rays_per_axis: int) -> np.ndarray:
    """Unit direction vectors on a uniform azimuth x elevation lattice.

    Azimuth takes rays_per_axis samples over [0, 2*pi); elevation takes
    rays_per_axis // 4 samples at cell centers of [-pi/2, pi/2], which avoids
    exactly horizontal and exactly vertical rays.
    """
    n_az = int(rays_per_axis)
    if n_az < 4:
        raise ValueError(f"rays_per_axis must be >= 4, got {rays_per_axis}")
    n_el = max(n_az // 4, 1)
    az = np.arange(n_az, dtype=np.float64) * (2.0 * np.pi / n_az)
    el = -0.5 * np.pi + (np.arange(n_el, dtype=np.float64) + 0.5) * (np.pi / n_el)
    ca, sa = np.cos(az), np.sin(az)
    ce, se = np.cos(el), np.sin(el)
    dirs = np.empty((n_az * n_el, 3), dtype=np.float64)
    dirs[:, 0] = np.outer(ca, ce).ravel()
    dirs[:, 1] = np.outer(sa, ce).ravel()
    dirs[:, 2] = np.tile(se, n_az)
    return dirs


def compute_visibility(grid: VoxelGrid, sensor: tuple[int, int, int], max_range: float,
                       rays_per_axis: int = 256) -> VisibilityMask:
    """Ray-trace visibility from the center of the sensor voxel.

    Each ray marks every voxel it traverses up to and including the first
    non-FREE voxel, stopping early at max_range (measured in voxels) or at
    the grid boundary.
    """
    sensor = tuple(int(v) for v in sensor)
    if not all(0 <= sensor[i] < grid.dims[i] for i in range(3)):
        raise ValueError(f"sensor voxel {sensor} outside grid dims {grid.dims}")
    if grid.labels[sensor] != FREE:
        raise ValueError(f"sensor voxel {sensor} is not FREE")
    if not np.isfinite(max_range) or max_range <= 0:
        raise ValueError("max_range must be positive")
    dirs = ray_directions(rays_per_axis)
    flags = np.zeros(grid.dims, dtype=np.uint8)
    _trace_rays(grid.labels, flags, sensor[0], sensor[1], sensor[2], dirs, float(max_range))
    return VisibilityMask(flags)


def corrupt_labels(grid: VoxelGrid, flip_rate: float, dropout_rate: float, seed: int) -> VoxelGrid:
    """Simulate annotation noise.

    Each voxel independently: with probability flip_rate its label is replaced
    by a uniformly random *other* class; afterwards, with probability
    dropout_rate, occupied voxels are cleared to FREE.
    """
    check_probability(flip_rate, "flip_rate")
    check_probability(dropout_rate, "dropout_rate")
    rng = stream(seed, "corrupt")
    K = grid.num_classes
    labels = grid.labels.astype(np.int64)
    u_flip = rng.random(labels.shape)
    offsets = rng.integers(1, K, size=labels.shape)
    u_drop = rng.random(labels.shape)
    flipped = np.where(u_flip < flip_rate, (labels + offsets) % K, labels)
    out = np.where((u_drop < dropout_rate) & (flipped != FREE), FREE, flipped)
    return grid.with_labels(out.astype(np.uint8))


def build_observation(grid: VoxelGrid, mask: VisibilityMask) -> VoxelGrid:
    """Sensor observation: true labels where visible, UNKNOWN token elsewhere.

    The UNKNOWN token is class id K, so the result is a grid with K+1 classes.
    """
    if mask.dims != grid.dims:
        raise ValueError(f"mask dims {mask.dims} != grid dims {grid.dims}")
    K = grid.num_classes
    obs = np.where(mask.flags == 1, grid.labels, np.uint8(K)).astype(np.uint8)
    return VoxelGrid(obs, grid.voxel_size, K + 1)
