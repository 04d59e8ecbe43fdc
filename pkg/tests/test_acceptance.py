"""
End-to-end acceptance checks.

Property checks run with every test session; the trained-model checks are
marked slow and need --run-slow.
"""
import numpy as np
import pytest
import torch

from compositor import CompositePrior, PlacedObject, compose
from dataset import generate_corpus, sample_scene
from dit_model import build_model
from evaluation import build_benchmark_suite, evaluate_suite, run_ablation, run_suite, sweep_t_p
from latent_codec import encode_latent
from layout import RegionMasks
from models import GuidanceConfig, ModelConfig, TrainConfig
from prior_guided import (
    LatentState, RegionPrompts, generate, init_prior_latent, recompose_latent, reinforce_prior, rule_planner,
    segment_latent, spatial_controlled_step,
)
from schedules import NoiseSchedule, ddim_step, forward_noise, predict_x0
from shape_detector import qualify_detector
from trainer import evaluate_loss, train


def _random_masks(rng, grid=8, objects=3):
    owner = rng.integers(-1, objects, size=(grid, grid))
    object_masks = tuple(owner == k for k in range(objects))
    union = owner >= 0
    return RegionMasks(object_ids=tuple(range(1, objects + 1)), object_masks=object_masks, background_mask=~union,
                       union_mask=union)


class TestSchedulerExactness:
    """Sampling with the exact model output recovers x0."""

    @pytest.mark.parametrize("steps", [1, 7, 28])
    def test_euler_with_exact_velocity(self, steps):
        """Test rectified-flow integration with the true velocity."""
        schedule = NoiseSchedule(num_steps=steps)
        rng = np.random.default_rng(steps)
        x0, noise = rng.normal(size=(4, 4, 12)), rng.normal(size=(4, 4, 12))
        z = forward_noise(x0, 1.0, noise, schedule)
        times = schedule.timesteps()
        for t, t_next in zip(times[:-1], times[1:]):
            z = schedule.step(z, noise - x0, t, t_next)
        assert np.abs(z - x0).max() <= 1e-5

    def test_ddim_inversion(self):
        """Test that the DDIM algebra inverts the forward path."""
        schedule = NoiseSchedule("ddim_cosine", num_steps=10)
        rng = np.random.default_rng(0)
        for _ in range(100):
            x0, eps = rng.normal(size=16), rng.normal(size=16)
            t = float(rng.uniform(0.05, 0.95))
            x_t = forward_noise(x0, t, eps, schedule)
            assert np.abs(predict_x0(x_t, eps, t, schedule) - x0).max() <= 1e-6
            assert np.abs(ddim_step(x_t, eps, t, 0.0, schedule) - x0).max() <= 1e-6


class TestPriorMechanics:
    """Randomized identities of the prior latent, reinforcement and region merge."""

    def _prior(self, union):
        image = np.random.default_rng(int(union.sum())).random((16, 16, 3)).astype(np.float32)
        return CompositePrior(image=image, union_mask=union, object_ids=(), placed_masks=())

    def test_reinforcement_is_bitwise(self):
        """Test that foreground cells equal the prior exactly after reinforcement."""
        rng = np.random.default_rng(0)
        for seed in range(100):
            union = rng.random((16, 16)) < 0.5
            latent = init_prior_latent(self._prior(union), 0.7, NoiseSchedule(), seed)
            out = reinforce_prior(torch.randn(8, 8, 12), latent, 0.8)
            assert torch.equal(out[latent.fg_mask], latent.z_prior[latent.fg_mask])

    def test_empty_and_full_union(self):
        """Test that an empty union gives pure noise and a full one the noised prior."""
        schedule = NoiseSchedule()
        for seed in range(100):
            empty = init_prior_latent(self._prior(np.zeros((16, 16), dtype=bool)), 0.5, schedule, seed)
            generator = torch.Generator().manual_seed(seed)
            z_bg = torch.randn((8, 8, 12), generator=generator)
            z_1 = torch.randn((8, 8, 12), generator=generator)
            assert torch.equal(empty.z_prior, z_bg)

            prior = self._prior(np.ones((16, 16), dtype=bool))
            full = init_prior_latent(prior, 0.5, schedule, seed)
            expected = forward_noise(torch.from_numpy(encode_latent(prior.image)), 0.5, z_1, schedule)
            assert torch.equal(full.z_prior, expected)

    def test_segment_recompose_lossless(self):
        """Test that any region partition recomposes to the same latent."""
        rng = np.random.default_rng(1)
        for _ in range(100):
            z = torch.randn(8, 8, 12)
            assert torch.equal(recompose_latent(segment_latent(z, _random_masks(rng)), (8, 8, 12)), z)

    def test_ratio_endpoints(self, tiny_model):
        """Test that ratio_base 1 and 0 select the base and region streams."""
        torch.nn.init.normal_(tiny_model.patch_out.weight, std=0.1)
        prompts = RegionPrompts(base=tiny_model.embed_text("three red circles"),
                                background=tiny_model.embed_text("a plain gray background"),
                                objects={k: tiny_model.embed_text("a red circle") for k in (1, 2, 3)})
        rng = np.random.default_rng(2)
        schedule = NoiseSchedule(num_steps=4)
        for _ in range(100):
            masks = _random_masks(rng)
            z = torch.randn(8, 8, 12)
            for ratio in (0.0, 1.0):
                out = spatial_controlled_step(tiny_model, LatentState(z=z, t=1.0), masks, prompts,
                                              GuidanceConfig(num_steps=4, ratio_base=ratio), schedule, 0.75)
                assert torch.equal(out.z, out.z_base if ratio == 1.0 else out.z_ob)


class TestCompositorProperties:
    """Randomized compositor properties."""

    def _random_placed(self, rng, count):
        depths = rng.permutation(count) + 1
        placed = []
        for k in range(count):
            mask = np.zeros((16, 16), dtype=bool)
            x0, y0 = rng.integers(0, 10, size=2)
            side = int(rng.integers(3, 7))
            mask[y0:y0 + side, x0:x0 + side] = True
            image = np.zeros((16, 16, 3), dtype=np.float32)
            image[mask] = rng.random(3)
            placed.append(PlacedObject(object_id=k + 1, depth=int(depths[k]), image=image, mask=mask, scale=1.0))
        return placed

    def test_properties(self):
        """Test permutation invariance, disjoint masks and front-most ownership."""
        rng = np.random.default_rng(3)
        for _ in range(100):
            placed = self._random_placed(rng, int(rng.integers(2, 5)))
            prior = compose(placed, 16)
            shuffled = compose([placed[i] for i in rng.permutation(len(placed))], 16)
            np.testing.assert_array_equal(prior.image, shuffled.image)

            total = sum(m.astype(int) for m in prior.placed_masks)
            np.testing.assert_array_equal(total, prior.union_mask.astype(int))

            for obj in placed:
                visible = prior.mask_for(obj.object_id)
                in_front = [p for p in placed if p.depth < obj.depth]
                for other in in_front:
                    assert not (visible & other.mask).any()


# ================== Slow: corpus and trained model ==================

@pytest.mark.slow
def test_detector_qualifies_on_corpus():
    """Detector precision and recall against the renderer over 2,000 scenes."""
    result = qualify_detector(sample_scene(seed) for seed in range(2000))
    assert result.precision >= 0.99
    assert result.recall >= 0.99


@pytest.fixture(scope="module")
def trained():
    corpus = generate_corpus(range(2000))
    model_config = ModelConfig(depth=4, width=96, heads=4)
    model = build_model(model_config, seed=0)
    schedule = NoiseSchedule()
    initial = evaluate_loss(model, corpus[:256], schedule)
    result = train(model, corpus, TrainConfig(steps=3000, batch_size=32, lr=3e-4, log_every=0, model=model_config),
                   show_progress=False)
    result.model.eval()
    return result.model, result.schedule, initial, evaluate_loss(result.model, corpus[:256], schedule)


def _runner(model, schedule):
    def run_case(case, run_dir, config):
        generate(case.prompt, model, rule_planner(32), config, schedule, run_dir=run_dir)
    return run_case


@pytest.mark.slow
def test_training_halves_loss(trained):
    """Trained loss is at most half of the untrained baseline."""
    _, _, initial, final = trained
    assert final <= 0.5 * initial


@pytest.mark.slow
def test_pipeline_beats_plain_sampling(trained, tmp_path_factory):
    """Full pipeline gains at least 10 points on spatial prompts over plain sampling."""
    model, schedule = trained[:2]
    cases = build_benchmark_suite(100, seed=0, categories=("spatial", "count"))
    root = tmp_path_factory.mktemp("e2e")
    run_case = _runner(model, schedule)
    full = GuidanceConfig()
    plain = full.model_copy(update={"reinforce": False, "spatial_control": False})
    run_suite(cases, root / "full", lambda c, d: run_case(c, d, full), show_progress=False)
    run_suite(cases, root / "plain", lambda c, d: run_case(c, d, plain), show_progress=False)
    full_means = evaluate_suite(cases, root / "full").category_means["final"]
    plain_means = evaluate_suite(cases, root / "plain").category_means["final"]
    assert full_means["spatial"] >= plain_means["spatial"] + 10.0


@pytest.mark.slow
def test_ablation_ordering(trained, tmp_path_factory):
    """Each mechanism alone beats the baseline and both together score highest."""
    model, schedule = trained[:2]
    cases = build_benchmark_suite(50, seed=1, categories=("spatial",))
    rows = run_ablation(cases, GuidanceConfig(), tmp_path_factory.mktemp("ablation"), _runner(model, schedule),
                        show_progress=False)
    score = {(r.reinforce, r.spatial_control): r.category_means["spatial"] for r in rows}
    assert score[(True, False)] > score[(False, False)]
    assert score[(False, True)] > score[(False, False)]
    assert score[(True, True)] >= max(score[(True, False)], score[(False, True)])


@pytest.mark.slow
def test_t_p_trend(trained, tmp_path_factory):
    """Final-to-prior distance grows with t_p."""
    model, schedule = trained[:2]
    cases = build_benchmark_suite(20, seed=2, categories=("spatial",))
    result = sweep_t_p(cases, GuidanceConfig(), tmp_path_factory.mktemp("sweep"), _runner(model, schedule),
                       show_progress=False)
    assert result.spearman >= 0.5
