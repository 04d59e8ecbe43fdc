import math
from typing import Tuple

import numpy as np


class LatentGrid:
    """
    Geometry shared by the planner, compositor and sampler.

    The canvas is N x N pixels; latent cells are p x p pixel blocks, so the
    latent grid is (N/p) x (N/p). Boxes are normalized to the unit square.
    """

    def __init__(self, canvas_size: int = 32, patch_size: int = 2):
        if canvas_size <= 0 or patch_size <= 0 or canvas_size % patch_size != 0:
            raise ValueError(f"canvas_size {canvas_size} is not a positive multiple of patch_size {patch_size}")
        self.canvas_size = canvas_size
        self.patch_size = patch_size
        self.grid_size = canvas_size // patch_size

    @property
    def min_box_side(self) -> float:
        """Smallest normalized box side the planner may emit (4 latent cells)."""
        return 4 * self.patch_size / self.canvas_size

    def box_pixel_bounds(self, box) -> Tuple[int, int, int, int]:
        """
        Pixel index range (x0, y0, x1, y1), end-exclusive, covered by a box.

        A pixel belongs to the box iff its centre lies in [x0, x1) x [y0, y1).
        """
        n = self.canvas_size
        x0, y0, x1, y1 = box

        def _edge(v: float) -> int:
            return min(max(math.ceil(v * n - 0.5), 0), n)

        return _edge(x0), _edge(y0), _edge(x1), _edge(y1)

    def rasterize_box(self, box) -> np.ndarray:
        px0, py0, px1, py1 = self.box_pixel_bounds(box)
        mask = np.zeros((self.canvas_size, self.canvas_size), dtype=bool)
        mask[py0:py1, px0:px1] = True
        return mask

    def downsample_mask(self, mask: np.ndarray) -> np.ndarray:
        """Latent cell is set iff at least half of its pixels are set."""
        mask = np.asarray(mask)
        if mask.shape != (self.canvas_size, self.canvas_size):
            raise ValueError(f"mask shape {mask.shape} does not match canvas {self.canvas_size}")
        p = self.patch_size
        blocks = mask.astype(np.int32).reshape(self.grid_size, p, self.grid_size, p)
        counts = blocks.sum(axis=(1, 3))
        return counts * 2 >= p * p

