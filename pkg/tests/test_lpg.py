"""Module for testing noise schedules, samplers and the latent policy generator."""

import dataclasses
import math

import pytest
import torch

from latentpolicy import _internal as utils
from latentpolicy._encoders import build_frozen_encoders
from latentpolicy._errors import FrozenWeightsError
from latentpolicy._lpg import (
    FrozenGuard,
    LatentRegressor,
    LpgModel,
    ddim_step,
    ddim_timesteps,
    ddpm_step,
    forward_noise,
    lpg_loss,
    make_noise_schedule,
    regression_loss,
    run_sampler,
    sample_latent,
)
from latentpolicy._types import NoiseSchedule

FEATURE_DIM = 8


def _gaussian_eps_fn(schedule: NoiseSchedule, mean: float, std: float):
    """Exact noise predictor for data distributed as N(mean, std^2)."""

    def eps_fn(z_t: torch.Tensor, t: int) -> torch.Tensor:
        alpha_bar = float(schedule.alpha_bar[t - 1])
        variance = alpha_bar * std**2 + 1.0 - alpha_bar
        return math.sqrt(1.0 - alpha_bar) * (z_t - math.sqrt(alpha_bar) * mean) / variance

    return eps_fn


class TestNoiseSchedule:
    """Tests for the diffusion schedule."""

    def test_linear_schedule(self):
        """Test the linear schedule endpoints and derived tables."""
        schedule = make_noise_schedule(1000)
        assert schedule.T == 1000
        assert float(schedule.beta[0]) == pytest.approx(1e-4)
        assert float(schedule.beta[-1]) == pytest.approx(2e-2)
        torch.testing.assert_close(schedule.alpha, 1.0 - schedule.beta)
        torch.testing.assert_close(schedule.alpha_bar, torch.cumprod(schedule.alpha, dim=0))
        assert float(schedule.alpha_bar[-1]) < 1e-4
        assert float(schedule.at(schedule.beta, 1)) == pytest.approx(1e-4)

    def test_closed_form_matches_composition(self):
        """Test the closed-form marginal equals composing the single-step kernels."""
        schedule = make_noise_schedule(200)
        scale, variance = 1.0, 0.0
        for t in range(1, schedule.T + 1):
            alpha = float(schedule.alpha[t - 1])
            scale *= math.sqrt(alpha)
            variance = alpha * variance + float(schedule.beta[t - 1])
            alpha_bar = float(schedule.alpha_bar[t - 1])
            assert scale == pytest.approx(math.sqrt(alpha_bar), rel=1e-9)
            assert variance == pytest.approx(1.0 - alpha_bar, rel=1e-9)

    def test_invalid_schedules(self):
        """Test bad arguments and inconsistent tables raise ValueError."""
        with pytest.raises(ValueError, match="at least 1"):
            make_noise_schedule(0)
        with pytest.raises(ValueError, match="Unsupported"):
            make_noise_schedule(10, "cosine")
        beta = torch.tensor([0.1, 1.5], dtype=torch.float64)
        with pytest.raises(ValueError, match=r"\(0, 1\)"):
            NoiseSchedule(beta=beta, alpha=1 - beta, alpha_bar=torch.cumprod(1 - beta, 0))

    def test_forward_noise_range(self):
        """Test forward noising checks its timestep range."""
        schedule = make_noise_schedule(10)
        z0 = torch.ones(3, 2)
        eps = torch.zeros(3, 2)
        noised = forward_noise(z0, torch.tensor([1, 5, 10]), eps, schedule)
        torch.testing.assert_close(noised[:, 0], schedule.alpha_bar[[0, 4, 9]].sqrt().float())
        with pytest.raises(ValueError, match="out of range"):
            forward_noise(z0, 0, eps, schedule)
        with pytest.raises(ValueError, match="out of range"):
            forward_noise(z0, 11, eps, schedule)


class TestSamplerSteps:
    """Tests for single DDPM and DDIM updates."""

    def test_ddim_recovers_clean_sample_with_true_noise(self):
        """Test DDIM with the true noise jumps exactly onto the forward marginals."""
        schedule = make_noise_schedule(50)
        z0 = torch.randn(4, 3, dtype=torch.float64)
        eps = torch.randn(4, 3, dtype=torch.float64)
        z_t = forward_noise(z0, 40, eps, schedule)

        torch.testing.assert_close(ddim_step(z_t, 40, 0, eps, schedule), z0)
        torch.testing.assert_close(ddim_step(z_t, 40, 12, eps, schedule), forward_noise(z0, 12, eps, schedule))

    def test_ddim_must_go_backwards(self):
        """Test DDIM rejects a non-decreasing step."""
        schedule = make_noise_schedule(10)
        z = torch.zeros(1, 2)
        with pytest.raises(ValueError, match="backwards"):
            ddim_step(z, 5, 5, z, schedule)

    def test_ddpm_step_formula(self):
        """Test the ancestral update against its closed form with fixed noise."""
        schedule = make_noise_schedule(10)
        z_t = torch.full((1, 2), 0.5, dtype=torch.float64)
        eps_hat = torch.full((1, 2), 0.2, dtype=torch.float64)
        noise = torch.full((1, 2), -1.0, dtype=torch.float64)
        beta, alpha, alpha_bar = (float(table[6]) for table in (schedule.beta, schedule.alpha, schedule.alpha_bar))
        expected = (0.5 - beta / math.sqrt(1 - alpha_bar) * 0.2) / math.sqrt(alpha) - math.sqrt(beta)

        result = ddpm_step(z_t, 7, eps_hat, schedule, noise=noise)

        assert float(result[0, 0]) == pytest.approx(expected)

    def test_ddpm_last_step_is_noise_free(self):
        """Test the final DDPM step does not depend on the random stream."""
        schedule = make_noise_schedule(10)
        z_t, eps_hat = torch.randn(3, 2), torch.randn(3, 2)
        first = ddpm_step(z_t, 1, eps_hat, schedule, utils.seeded_torch_rng(0, "a"))
        second = ddpm_step(z_t, 1, eps_hat, schedule, utils.seeded_torch_rng(1, "b"))
        torch.testing.assert_close(first, second)

    @pytest.mark.parametrize(("T", "steps"), [(20, 5), (1000, 50), (1000, 10), (7, 7), (1000, 2)])
    def test_ddim_timesteps(self, T, steps):
        """Test the DDIM grid is strictly descending from T to 1."""
        timesteps = ddim_timesteps(T, steps)
        assert timesteps[0] == T
        assert timesteps[-1] == 1
        assert len(timesteps) == steps
        assert all(a > b for a, b in zip(timesteps, timesteps[1:]))

    def test_ddim_timesteps_edges(self):
        """Test a single step starts at T and out-of-range counts raise."""
        assert ddim_timesteps(1000, 1) == [1000]
        with pytest.raises(ValueError, match="DDIM steps"):
            ddim_timesteps(10, 11)
        with pytest.raises(ValueError, match="DDIM steps"):
            ddim_timesteps(10, 0)


class TestRunSampler:
    """Tests for full sampling loops."""

    @pytest.mark.parametrize(("sampler", "steps"), [("ddpm", None), ("ddim", 50), ("ddim", 1000)])
    def test_recovers_gaussian_target(self, sampler, steps):
        """Test sampling with the exact noise predictor reproduces a Gaussian target."""
        schedule = make_noise_schedule(1000)
        eps_fn = _gaussian_eps_fn(schedule, mean=1.5, std=0.5)
        samples = run_sampler(
            eps_fn,
            (20_000, 1),
            schedule,
            sampler,
            steps,
            utils.seeded_torch_rng(0, "gaussian"),
            like=torch.empty(0, dtype=torch.float64),
        )
        assert float(samples.mean()) == pytest.approx(1.5, abs=0.03)
        assert float(samples.std()) == pytest.approx(0.5, rel=0.08)

    def test_same_stream_same_samples(self):
        """Test sampling is reproducible from the random stream."""
        schedule = make_noise_schedule(20)
        eps_fn = _gaussian_eps_fn(schedule, 0.0, 1.0)
        first = run_sampler(eps_fn, (5, 2), schedule, "ddpm", None, utils.seeded_torch_rng(3, "s"))
        second = run_sampler(eps_fn, (5, 2), schedule, "ddpm", None, utils.seeded_torch_rng(3, "s"))
        torch.testing.assert_close(first, second)

    def test_invalid_sampler_arguments(self):
        """Test unknown samplers and too many steps raise ValueError."""
        schedule = make_noise_schedule(20)
        eps_fn = _gaussian_eps_fn(schedule, 0.0, 1.0)
        with pytest.raises(ValueError, match="Unknown sampler"):
            run_sampler(eps_fn, (1, 2), schedule, "euler", None, None)
        with pytest.raises(ValueError, match="exceed"):
            run_sampler(eps_fn, (1, 2), schedule, "ddim", 21, None)


class TestLpgModel:
    """Tests for the conditional diffusion model."""

    def _cond(self, model, config, batch=3):
        generator = torch.Generator().manual_seed(0)
        features = torch.randn(batch, FEATURE_DIM, generator=generator)
        f_text = torch.randn(batch, config.d_model, generator=generator)
        return model.condition(features, f_text, torch.randn(batch, config.d_s, generator=generator))

    def test_sample_shapes(self, tiny_config):
        """Test latent and trajectory models sample their own shapes."""
        torch.manual_seed(0)
        latent_model = LpgModel(tiny_config, FEATURE_DIM)
        trajectory_model = LpgModel(tiny_config, FEATURE_DIM, target="trajectory", action_dim=5)
        schedule = make_noise_schedule(tiny_config.T)

        z = sample_latent(latent_model, self._cond(latent_model, tiny_config), schedule, "ddim", 5)
        x = sample_latent(trajectory_model, self._cond(trajectory_model, tiny_config), schedule, "ddpm")

        assert z.shape == (3, tiny_config.d_z)
        assert x.shape == (3, tiny_config.h, 5)
        assert bool(torch.isfinite(z).all())

    def test_sampling_is_reproducible(self, tiny_config):
        """Test equal streams give equal latents."""
        torch.manual_seed(0)
        model = LpgModel(tiny_config, FEATURE_DIM).eval()
        cond = self._cond(model, tiny_config)
        schedule = make_noise_schedule(tiny_config.T)
        first = sample_latent(model, cond, schedule, "ddpm", rng=utils.seeded_torch_rng(0, "lpg"))
        second = sample_latent(model, cond, schedule, "ddpm", rng=utils.seeded_torch_rng(0, "lpg"))
        torch.testing.assert_close(first, second)

    def test_invalid_target(self, tiny_config):
        """Test unknown targets and a trajectory model without width raise."""
        with pytest.raises(ValueError, match="Unknown diffusion target"):
            LpgModel(tiny_config, FEATURE_DIM, target="pixels")
        with pytest.raises(ValueError, match="action_dim"):
            LpgModel(tiny_config, FEATURE_DIM, target="trajectory")

    def test_loss_trains(self, tiny_config):
        """Test the noise-prediction loss is finite and decreases on a fixed batch."""
        torch.manual_seed(0)
        model = LpgModel(tiny_config, FEATURE_DIM)
        schedule = make_noise_schedule(tiny_config.T)
        z0 = torch.randn(16, tiny_config.d_z)
        generator = torch.Generator().manual_seed(1)
        features = torch.randn(16, FEATURE_DIM, generator=generator)
        f_text = torch.randn(16, tiny_config.d_model, generator=generator)
        optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)

        losses = []
        for step in range(80):
            optimizer.zero_grad()
            loss = lpg_loss(model, z0, model.condition(features, f_text), schedule, utils.seeded_torch_rng(step, "t"))
            loss.backward()
            optimizer.step()
            losses.append(float(loss))

        assert all(math.isfinite(value) for value in losses)
        assert sum(losses[-20:]) / 20 < sum(losses[:20]) / 20

    def test_loss_gradient_matches_finite_differences(self, tiny_config, parameter_gradcheck):
        """Test analytic gradients of the noise-prediction loss for every generator parameter in float64."""
        config = dataclasses.replace(tiny_config, d_z=4, d_model=8, dim_feedforward=16, lpg_layers=1)
        torch.manual_seed(0)
        model = LpgModel(config, FEATURE_DIM).double()
        schedule = make_noise_schedule(config.T)
        generator = torch.Generator().manual_seed(1)
        z0 = torch.randn(2, config.d_z, generator=generator, dtype=torch.float64)
        features = torch.randn(2, FEATURE_DIM, generator=generator, dtype=torch.float64)
        f_text = torch.randn(2, config.d_model, generator=generator, dtype=torch.float64)
        proprio = torch.randn(2, config.d_s, generator=generator, dtype=torch.float64)

        def loss_of(module: LpgModel) -> torch.Tensor:
            condition = module.condition(features, f_text, proprio)
            return lpg_loss(module, z0, condition, schedule, utils.seeded_torch_rng(0, "gradcheck"))

        assert parameter_gradcheck(model, loss_of)

    def test_regressor(self, tiny_config):
        """Test the non-diffusion regressor predicts latents of the right shape."""
        torch.manual_seed(0)
        model = LatentRegressor(tiny_config, FEATURE_DIM)
        cond = self._cond(model, tiny_config)
        z0 = torch.zeros(3, tiny_config.d_z)
        assert model(cond).shape == (3, tiny_config.d_z)
        assert float(regression_loss(model, z0, cond)) >= 0.0


class TestFrozenGuard:
    """Tests for the frozen-weights guard."""

    def test_verify_passes_for_untouched_modules(self, tiny_config):
        """Test a frozen module passes verification."""
        guard = FrozenGuard(build_frozen_encoders(tiny_config))
        guard.verify()
        assert len(guard.checksum) == 64

    def test_detects_changed_weights(self, tiny_config):
        """Test modified weights fail verification."""
        encoders = build_frozen_encoders(tiny_config)
        guard = FrozenGuard(encoders)
        with torch.no_grad():
            encoders.instruction.table.weight[0, 0] += 1.0
        with pytest.raises(FrozenWeightsError, match="changed"):
            guard.verify()

    def test_rejects_trainable_modules(self, tiny_config):
        """Test a trainable module cannot be guarded and unfreezing is caught."""
        with pytest.raises(FrozenWeightsError, match="must be frozen"):
            FrozenGuard(torch.nn.Linear(2, 2))

        layer = utils.freeze(torch.nn.Linear(2, 2))
        guard = FrozenGuard(layer)
        layer.weight.requires_grad_(True)
        model = LpgModel(tiny_config, FEATURE_DIM)
        cond = model.condition(torch.randn(2, FEATURE_DIM), torch.randn(2, tiny_config.d_model))
        with pytest.raises(FrozenWeightsError):
            lpg_loss(model, torch.zeros(2, tiny_config.d_z), cond, make_noise_schedule(tiny_config.T), frozen=guard)
