"""
Tests for the composite object prior.
"""
import json

import cv2
import numpy as np
import pytest
import torch

from compositor import (
    SENTINEL, ObjectCutout, PlacedObject, build_composite_prior, check_object_caption, compose, resize_object,
    save_prior, segment_object,
)
from dataset import read_png, render_object, shape_mask
from errors import DegenerateBoxError, NoForegroundError, VocabularyError
from latent_grid import LatentGrid
from layout import rasterize_masks
from models import PALETTE, GuidanceConfig
from prior_guided import RegionPrompts, denoise
from sampler import derive_seed
from schedules import NoiseSchedule


def _gray(size=32):
    return np.full((size, size, 3), 0.5, dtype=np.float32)


def _placed(object_id, depth, x0, x1, color):
    image = np.zeros((8, 8, 3), dtype=np.float32)
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:6, x0:x1] = True
    image[mask] = PALETTE[color]
    return PlacedObject(object_id=object_id, depth=depth, image=image, mask=mask, scale=1.0)


class TestCheckObjectCaption:
    """Test which object captions the model may synthesize."""

    def test_accepts_single_shape(self):
        """Test a plain single-shape caption."""
        check_object_caption("a red circle")
        check_object_caption("a blue square on a plain gray background")

    @pytest.mark.parametrize("caption", ["a cat", "two red circles", "red red red", ""])
    def test_rejects(self, caption):
        """Test nouns, counts and grammar errors."""
        with pytest.raises(VocabularyError):
            check_object_caption(caption)


class TestSegmentObject:
    """Test background-distance segmentation."""

    def test_keeps_largest_component(self):
        """Test that small blobs are dropped and the crop is tight."""
        image = _gray()
        image[4:9, 10:15] = PALETTE["red"]
        image[20:22, 20:22] = PALETTE["blue"]
        cutout = segment_object(image, source_caption="a red square")
        assert cutout.mask.shape == (5, 5)
        assert cutout.mask.all()
        np.testing.assert_array_equal(cutout.image[0, 0], PALETTE["red"])
        assert cutout.source_caption == "a red square"

    def test_small_differences_are_background(self):
        """Test the distance threshold."""
        image = _gray()
        image[0:4, 0:4] = 0.55
        image[10:14, 10:14] = PALETTE["green"]
        assert segment_object(image).mask.shape == (4, 4)

    def test_matches_rendered_circle(self):
        """Test that a rendered circle segments to its own pixel mask, up to a one-pixel boundary band."""
        expected = shape_mask("circle", 4, 4, 24, 32)
        cutout = segment_object(render_object("a red circle"))
        ys, xs = np.nonzero(expected)
        crop = expected[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
        assert cutout.mask.shape == crop.shape
        kernel = np.ones((3, 3), dtype=np.uint8)
        pixels = crop.astype(np.uint8)
        band = cv2.dilate(pixels, kernel).astype(bool) & ~cv2.erode(pixels, kernel).astype(bool)
        assert not ((cutout.mask ^ crop) & ~band).any()

    def test_no_foreground(self):
        """Test NoForegroundError on a plain image."""
        with pytest.raises(NoForegroundError):
            segment_object(_gray())


class TestResizeObject:
    """Test fitting a cutout into its box."""

    def test_aspect_preserving_fit(self):
        """Test scale, size and centring inside the box."""
        cutout = ObjectCutout(image=np.ones((10, 10, 3), dtype=np.float32), mask=np.ones((10, 10), dtype=bool))
        placed = resize_object(cutout, (0.0, 0.0, 0.5, 0.25), 32, object_id=3, depth=2)
        assert placed.scale == pytest.approx(0.8)
        assert placed.mask.sum() == 64
        assert placed.mask[0:8, 4:12].all()
        assert placed.object_id == 3 and placed.depth == 2

    def test_mask_stays_inside_box(self, sample_layout):
        """Test that the placed mask never leaves the box."""
        cutout = segment_object(render_object("a red circle"))
        obj = sample_layout.objects[0]
        placed = resize_object(cutout, obj.box, 32)
        assert placed.mask.any()
        assert not placed.mask[:, :2].any() and not placed.mask[:, 14:].any()
        assert not placed.mask[:8].any() and not placed.mask[24:].any()

    def test_random_fits_stay_in_box(self):
        """Test that placed masks never exceed their box over 500 random cutouts and boxes."""
        rng = np.random.default_rng(4)
        placed_count = 0
        for _ in range(500):
            h, w = (int(v) for v in rng.integers(2, 25, size=2))
            mask = rng.random((h, w)) < 0.6
            cutout = ObjectCutout(image=rng.random((h, w, 3)).astype(np.float32), mask=mask)
            x0, y0 = rng.uniform(0.0, 0.7, size=2)
            box = (float(x0), float(y0), float(x0 + rng.uniform(0.1, 1.0 - x0)), float(y0 + rng.uniform(0.1, 1.0 - y0)))
            try:
                placed = resize_object(cutout, box, 32)
            except DegenerateBoxError:
                continue
            placed_count += 1
            inside = LatentGrid(32, 1).rasterize_box(box)
            assert placed.mask.sum() <= inside.sum()
            assert not (placed.mask & ~inside).any()
        assert placed_count >= 250

    def test_degenerate_box(self):
        """Test a box that covers no pixel."""
        cutout = ObjectCutout(image=np.ones((4, 4, 3), dtype=np.float32), mask=np.ones((4, 4), dtype=bool))
        with pytest.raises(DegenerateBoxError):
            resize_object(cutout, (0.5, 0.5, 0.51, 0.51), 32)


class TestCompose:
    """Test painter's-order composition."""

    def test_front_object_wins_overlap(self):
        """Test that the lower depth paints over the higher one."""
        prior = compose([_placed(1, 1, 1, 5, "red"), _placed(2, 2, 3, 7, "blue")], 8)
        np.testing.assert_array_equal(prior.image[3, 4], PALETTE["red"])
        np.testing.assert_array_equal(prior.image[3, 6], PALETTE["blue"])
        assert not prior.mask_for(2)[3, 4]
        assert prior.mask_for(2).sum() == 8

    def test_equal_depth_lower_id_in_front(self):
        """Test the tie-break."""
        prior = compose([_placed(5, 1, 3, 7, "blue"), _placed(4, 1, 1, 5, "red")], 8)
        np.testing.assert_array_equal(prior.image[3, 4], PALETTE["red"])
        assert prior.object_ids == (4, 5)

    def test_background_is_sentinel(self):
        """Test the empty canvas value and the union mask."""
        prior = compose([_placed(1, 1, 1, 5, "red")], 8)
        assert prior.union_mask.sum() == 16
        assert np.all(prior.image[~prior.union_mask] == SENTINEL)

    def test_masks_are_disjoint(self):
        """Test that visible masks partition the union."""
        prior = compose([_placed(1, 1, 1, 5, "red"), _placed(2, 2, 3, 7, "blue")], 8)
        total = sum(m.astype(int) for m in prior.placed_masks)
        np.testing.assert_array_equal(total, prior.union_mask.astype(int))


class TestBuildCompositePrior:
    """Test the full prior from a layout."""

    def test_render_source(self, sample_layout):
        """Test a prior drawn with the corpus renderer."""
        prior = build_composite_prior(sample_layout, master_seed=7, object_source="render")
        assert prior.object_ids == (1, 2)
        assert prior.layout == sample_layout
        assert 0 < prior.scales[1] < 1
        assert prior.seeds == {1: derive_seed(7, "object", 1), 2: derive_seed(7, "object", 2)}
        np.testing.assert_array_equal(prior.image[16, 8], PALETTE["red"])
        np.testing.assert_array_equal(prior.image[16, 24], PALETTE["blue"])
        assert np.all(prior.image[~prior.union_mask] == SENTINEL)

    def test_callable_source(self, sample_layout):
        """Test that a callable receives each caption and its derived seed."""
        calls = []

        def source(caption, seed):
            calls.append((caption, seed))
            return render_object(caption)

        build_composite_prior(sample_layout, master_seed=1, object_source=source)
        assert calls == [("a red circle", derive_seed(1, "object", 1)),
                         ("a blue square", derive_seed(1, "object", 2))]

    def test_model_source_needs_model(self, sample_layout):
        """Test the argument check."""
        with pytest.raises(ValueError):
            build_composite_prior(sample_layout, master_seed=0, object_source="model")

    def test_unsynthesizable_object(self, sample_layout):
        """Test VocabularyError for a non-shape object."""
        layout = sample_layout.model_copy(update={"objects": (
            sample_layout.objects[0].model_copy(update={"caption": "a cat"}),
        )})
        with pytest.raises(VocabularyError):
            build_composite_prior(layout, master_seed=0, object_source="render")

    def test_save_prior(self, sample_layout, tmp_path):
        """Test the files written for a prior."""
        prior = build_composite_prior(sample_layout, master_seed=0, object_source="render")
        save_prior(prior, tmp_path)
        for name in ("prior.png", "union_mask.png", "masks/mask_1.png", "masks/mask_2.png", "prior.json"):
            assert (tmp_path / name).is_file(), name
        np.testing.assert_array_equal(read_png(tmp_path / "union_mask.png", mask=True), prior.union_mask)
        sidecar = json.loads((tmp_path / "prior.json").read_text())
        assert sidecar["object_ids"] == [1, 2]
        assert sidecar["seeds"]["1"] == prior.seeds[1]

    def test_sentinel_does_not_reach_the_image(self, sample_layout, full_size_tiny_model):
        """Test that changing the background sentinel leaves the denoised latent unchanged."""
        torch.nn.init.normal_(full_size_tiny_model.patch_out.weight, std=0.1)
        config = GuidanceConfig(num_steps=4, t_p=0.6, n_sc=2)
        schedule = NoiseSchedule(num_steps=4)
        results = []
        for sentinel in (SENTINEL, -3.0):
            prior = build_composite_prior(sample_layout, master_seed=5, object_source="render", sentinel=sentinel)
            assert np.all(prior.image[~prior.union_mask] == sentinel)
            masks = rasterize_masks(sample_layout, [prior.mask_for(obj.id) for obj in sample_layout.objects],
                                    full_size_tiny_model.grid_size)
            z, _ = denoise(full_size_tiny_model, schedule, config, prior, masks,
                           RegionPrompts.from_layout(full_size_tiny_model, sample_layout), latent_seed=11)
            results.append(z)
        assert torch.equal(results[0], results[1])
