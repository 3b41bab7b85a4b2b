"""PNG slice rendering with a fixed class palette (diff-friendly output)."""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np
from PIL import Image

from .grids import VoxelGrid

# Fixed colors for the six scene classes plus the UNKNOWN token (id 6).
PALETTE = {
    0: (245, 245, 245),   # free
    1: (121, 85, 61),     # ground
    2: (46, 125, 209),    # vehicle
    3: (214, 69, 65),     # pedestrian
    4: (130, 130, 130),   # building
    5: (77, 175, 74),     # vegetation
    6: (24, 24, 24),      # unknown
}

AXES = {"x": 0, "y": 1, "z": 2}


def class_color(class_id: int) -> tuple[int, int, int]:
    """Palette color; ids beyond the fixed table get evenly spaced hues."""
    if class_id in PALETTE:
        return PALETTE[class_id]
    hue = (class_id * 0.61803398875) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.6, 0.85)
    return (int(r * 255), int(g * 255), int(b * 255))


def render_slices(grid: VoxelGrid, axis: str, out_dir: str | Path, scale: int = 1) -> list[Path]:
    """Write one PNG per slice along the given axis; returns the paths written.

    Pixels map the remaining two axes in order (first remaining axis = image
    rows).  scale magnifies by integer pixel repetition.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {sorted(AXES)}, got {axis!r}")
    if scale < 1:
        raise ValueError("scale must be a positive integer")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lut = np.array([class_color(c) for c in range(grid.num_classes)], dtype=np.uint8)
    ax = AXES[axis]
    paths = []
    for i in range(grid.dims[ax]):
        sl = np.take(grid.labels, i, axis=ax)
        rgb = lut[sl]
        if scale > 1:
            rgb = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
        path = out_dir / f"slice_{axis}_{i:03d}.png"
        Image.fromarray(rgb, mode="RGB").save(path)
        paths.append(path)
    return paths
