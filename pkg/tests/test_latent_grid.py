"""
Tests for LatentGrid geometry.
"""
import numpy as np
import pytest

from latent_grid import LatentGrid


class TestLatentGrid:
    """Test the canvas / latent cell geometry."""

    def test_initialization(self):
        """Test the default 32 pixel canvas with 2 pixel patches."""
        grid = LatentGrid()
        assert grid.canvas_size == 32
        assert grid.patch_size == 2
        assert grid.grid_size == 16

    @pytest.mark.parametrize("canvas,patch", [(32, 3), (0, 2), (32, 0)])
    def test_invalid_geometry(self, canvas, patch):
        """Test that the canvas must be a positive multiple of the patch."""
        with pytest.raises(ValueError):
            LatentGrid(canvas, patch)

    def test_min_box_side(self):
        """Test that the minimum box spans four latent cells."""
        assert LatentGrid(32, 2).min_box_side == pytest.approx(0.25)

    def test_box_pixel_bounds_uses_pixel_centres(self):
        """Test that a pixel is inside when its centre is."""
        grid = LatentGrid(32, 2)
        assert grid.box_pixel_bounds((0.0, 0.0, 1.0, 1.0)) == (0, 0, 32, 32)
        assert grid.box_pixel_bounds((0.25, 0.5, 0.5, 0.75)) == (8, 16, 16, 24)
        # 0.01 * 32 = 0.32 < 0.5, so pixel 0 still counts
        assert grid.box_pixel_bounds((0.01, 0.0, 0.02, 0.1))[0] == 0

    def test_rasterize_box(self):
        """Test box rasterization."""
        mask = LatentGrid(32, 2).rasterize_box((0.25, 0.5, 0.5, 0.75))
        assert mask.shape == (32, 32)
        assert mask.sum() == 64
        assert mask[16, 8] and not mask[15, 8] and not mask[16, 16]

    def test_downsample_half_rule(self):
        """Test that a cell is set when at least half its pixels are."""
        grid = LatentGrid(4, 2)
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, 0:2] = True          # half of cell (0, 0)
        mask[2, 2] = True            # a quarter of cell (1, 1)
        cells = grid.downsample_mask(mask)
        assert cells.tolist() == [[True, False], [False, False]]

    def test_downsample_rejects_wrong_shape(self):
        """Test the shape check."""
        with pytest.raises(ValueError):
            LatentGrid(32, 2).downsample_mask(np.zeros((16, 16), dtype=bool))

