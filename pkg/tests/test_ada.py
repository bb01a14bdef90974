import numpy as np
import pytest
import torch

from latentaug.ada import (
    ADA_CATEGORIES,
    AdaState,
    AugmentParams,
    AugmentPipe,
    ada_update,
    adjustment_step,
    binomial_blur,
    parse_categories,
)
from latentaug.exception import ConfigError, ShapeError
from latentaug.gan_core import GanConfig
from latentaug.utils.seeding import torch_generator


class TestController:

    def test_adjustment_step(self):
        assert adjustment_step(16, 4, 10000) == pytest.approx(0.0064)

    def test_holds_at_target(self):

        state = AdaState(p=0.5, target=0.6, adjustment_step=0.01)
        stats = [1.0] * 8 + [-1.0] * 2

        updated = ada_update(state, stats)
        assert updated.overfit_stat == pytest.approx(0.6)
        assert updated.p == 0.5

    def test_overfitting_raises_p_to_one(self):

        state = AdaState(p=0.0, adjustment_step=0.01)
        history = []
        for _ in range(150):
            state = ada_update(state, np.ones(16))
            history.append(state.p)

        assert all(b >= a for a, b in zip(history, history[1:]))
        assert history[-1] == 1.0

    def test_underfitting_lowers_p_to_zero(self):

        state = AdaState(p=0.3, adjustment_step=0.01)
        for _ in range(50):
            state = ada_update(state, -np.ones(16))
        assert state.p == 0.0

    def test_stays_in_unit_interval(self):

        rng = np.random.default_rng(0)
        state = AdaState(p=0.5, adjustment_step=0.05)
        for _ in range(20000):
            state = ada_update(state, rng.choice([-1.0, 1.0], size=4, p=[0.15, 0.85]))
            assert 0.0 <= state.p <= 1.0

    def check_random_sequences(self, n_sequences, seed):

        rng = np.random.default_rng(seed)
        for _ in range(n_sequences):
            step = float(rng.choice([0.0, 1e-4, 0.0064, 0.05, 0.3, 1.0]))
            state = AdaState(p=float(rng.random()), target=float(rng.uniform(-1, 1)), adjustment_step=step)
            for _ in range(rng.integers(1, 9)):
                stats = rng.choice([-1.0, 0.0, 1.0], size=rng.integers(1, 17)) * rng.random()
                updated = ada_update(state, stats)

                expected = float(np.clip(state.p + np.sign(np.mean(np.sign(stats)) - state.target) * step, 0, 1))
                assert 0.0 <= updated.p <= 1.0
                assert updated.p == pytest.approx(expected, abs=1e-12)
                assert abs(updated.p - state.p) <= step + 1e-12
                assert updated.target == state.target and updated.adjustment_step == step
                state = updated

    def test_random_sequences(self):
        self.check_random_sequences(2000, seed=0)

    @pytest.mark.slow
    def test_random_sequences_at_scale(self):
        self.check_random_sequences(1_000_000, seed=1)

    @pytest.mark.parametrize("target", [0.0, 0.6, 0.95])
    def test_saturated_overfitting_is_monotone_in_step(self, target):

        steps = [0.0, 0.001, 0.0064, 0.01, 0.05, 0.2, 0.5]
        trajectories = []
        for step in steps:
            state = AdaState(p=0.0, target=target, adjustment_step=step)
            history = []
            for _ in range(100):
                state = ada_update(state, np.ones(8))
                history.append(state.p)
            trajectories.append(history)

        for step, history in zip(steps, trajectories):
            assert all(b >= a for a, b in zip(history, history[1:]))
            assert history == pytest.approx([min(step * (i + 1), 1.0) for i in range(100)])

        for smaller, larger in zip(trajectories, trajectories[1:]):
            assert all(b >= a for a, b in zip(smaller, larger))

    def test_empty_stats_keep_state(self):

        state = AdaState(p=0.2)
        assert ada_update(state, []) is state

    def test_rejects_bad_probability(self):

        with pytest.raises(ConfigError):
            AdaState(p=1.5)


class TestCategories:

    def test_parse(self):
        assert parse_categories("blit, geom,color") == ("blit", "geom", "color")

    def test_cutout_rejected(self):

        with pytest.raises(ConfigError):
            parse_categories("blit,cutout")

    def test_unknown_rejected(self):

        with pytest.raises(ConfigError):
            parse_categories("blit,warp")

    def test_filter_is_a_default_category(self):

        assert "filter" in ADA_CATEGORIES
        assert parse_categories("filter,noise") == ("filter", "noise")
        assert "filter" in parse_categories(GanConfig().augment)


class TestAugmentPipe:

    def images(self, n=4, size=16):
        return torch.rand((n, 3, size, size), generator=torch_generator(0, "test-images")) * 2 - 1

    def test_zero_probability_is_identity(self):

        x = self.images()
        pipe = AugmentPipe("blit,geom,color,filter,noise", p=0.0)
        params = pipe.sample_params(4, 16, 16, torch_generator(0, "ada"))

        assert torch.equal(pipe.apply(x, params), x)

    def test_shared_parameters_give_identical_transforms(self):

        x = self.images()
        pipe = AugmentPipe("blit,geom,color,filter,noise", p=1.0)
        params = pipe.sample_params(4, 16, 16, torch_generator(0, "ada"))

        real = pipe.apply(x, params)
        fake = pipe.apply(x.clone(), params)

        assert torch.equal(real, fake)
        assert not torch.equal(real, x)

    def test_same_generator_seed_same_params(self):

        pipe = AugmentPipe("blit,geom", p=0.7)
        a = pipe.sample_params(4, 16, 16, torch_generator(3, "ada", 0))
        b = pipe.sample_params(4, 16, 16, torch_generator(3, "ada", 0))

        assert a.values.keys() == b.values.keys()
        assert all(torch.equal(a.values[k], b.values[k]) for k in a.values)

    def test_blit_is_a_pixel_permutation(self):

        x = self.images()
        pipe = AugmentPipe("blit", p=1.0)
        out = pipe.apply(x, pipe.sample_params(4, 16, 16, torch_generator(1, "ada")))

        assert out.shape == x.shape
        for xi, oi in zip(x, out):
            torch.testing.assert_close(torch.sort(oi.flatten()).values, torch.sort(xi.flatten()).values)

    def test_gradients_flow(self):

        x = self.images().requires_grad_(True)
        pipe = AugmentPipe("blit,geom,color,filter,noise", p=1.0)
        out = pipe.apply(x, pipe.sample_params(4, 16, 16, torch_generator(2, "ada")))
        out.sum().backward()

        assert x.grad is not None
        assert torch.isfinite(x.grad).all()

    def test_batch_size_mismatch(self):

        pipe = AugmentPipe("blit", p=1.0)
        params = pipe.sample_params(2, 16, 16, torch_generator(0, "ada"))

        with pytest.raises(ShapeError):
            pipe.apply(self.images(4), params)

    def checkerboard(self, size=8):

        ys, xs = np.indices((size, size))
        board = torch.from_numpy(((ys + xs) % 2 * 2 - 1).astype(np.float32))
        return board.expand(2, 3, size, size).clone()

    def test_binomial_blur_flattens_a_checkerboard(self):
        torch.testing.assert_close(binomial_blur(self.checkerboard()), torch.zeros(2, 3, 8, 8))

    def test_binomial_blur_keeps_constant_images(self):

        x = torch.full((2, 3, 8, 8), 0.3)
        torch.testing.assert_close(binomial_blur(x), x)

    def test_filter_blurs_and_sharpens(self):

        x = self.checkerboard()
        pipe = AugmentPipe("filter", p=1.0)
        params = AugmentParams(2, {"sharpness": torch.tensor([0.5, 2.0])})

        out = pipe.apply(x, params)

        torch.testing.assert_close(out[0], x[0] * 0.5)
        torch.testing.assert_close(out[1], x[1] * 2.0)

    def test_filter_changes_images_at_full_probability(self):

        x = self.images()
        pipe = AugmentPipe("filter", p=1.0)
        params = pipe.sample_params(4, 16, 16, torch_generator(4, "ada"))

        assert bool((params.values["sharpness"] != 1.0).all())
        out = pipe.apply(x, params)
        assert out.shape == x.shape
        assert not torch.equal(out, x)
