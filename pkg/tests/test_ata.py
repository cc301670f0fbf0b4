"""Module for testing the action trajectory autoencoder."""

import dataclasses

import pytest
import torch
from torch.distributions import Normal, kl_divergence

from latentpolicy import _internal as utils
from latentpolicy._ata import (
    AtaModel,
    ata_decode,
    ata_encode,
    ata_loss,
    ata_objective,
    encode_latent,
    kl_diag_gaussian,
    masked_reconstruction_error,
    reparameterize,
)
from latentpolicy._encoders import build_frozen_encoders

ACTION_DIM = 3
FEATURE_DIM = 8


@pytest.fixture
def model(tiny_config):
    torch.manual_seed(0)
    return AtaModel(tiny_config, ACTION_DIM, FEATURE_DIM)


def _inputs(config, batch=2, dtype=torch.float32):
    generator = torch.Generator().manual_seed(1)
    actions = torch.rand(batch, config.h, ACTION_DIM, generator=generator, dtype=dtype) * 2 - 1
    f_obs = torch.randn(batch, config.d_model, generator=generator, dtype=dtype)
    return actions, f_obs


class TestAtaShapes:
    """Tests for encoder and decoder shapes and range."""

    def test_encode_decode_shapes(self, tiny_config, model):
        """Test posterior and reconstruction shapes and the tanh range."""
        actions, f_obs = _inputs(tiny_config)
        mu, sigma = ata_encode(model, actions, f_obs)
        reconstruction = ata_decode(model, mu, f_obs)

        assert mu.shape == sigma.shape == (2, tiny_config.d_z)
        assert bool((sigma > 0).all())
        assert reconstruction.shape == actions.shape
        assert float(reconstruction.abs().max()) <= 1.0

    def test_layer_counts(self, model):
        """Test the fixed encoder and decoder depths."""
        assert len(model.encoder.layers) == 3
        assert len(model.decoder.layers) == 6

    def test_shape_errors(self, tiny_config, model):
        """Test mis-shaped inputs raise ValueError."""
        actions, f_obs = _inputs(tiny_config)
        with pytest.raises(ValueError, match="actions of shape"):
            ata_encode(model, actions[:, :2], f_obs)
        with pytest.raises(ValueError, match="z of shape"):
            ata_decode(model, torch.zeros(2, tiny_config.d_z + 1), f_obs)
        with pytest.raises(ValueError, match="f_obs"):
            ata_encode(model, actions, None)

    def test_encode_latent(self, tiny_config, model):
        """Test the latent variable bundles mu, sigma and a reproducible sample."""
        actions, f_obs = _inputs(tiny_config)
        first = encode_latent(model, actions, f_obs, utils.seeded_torch_rng(0, "z"))
        second = encode_latent(model, actions, f_obs, utils.seeded_torch_rng(0, "z"))
        torch.testing.assert_close(first.sample, second.sample)
        assert not torch.equal(first.sample, first.mu)


class TestAtaConditioning:
    """Tests for what the ATA may and may not depend on."""

    def test_padding_is_ignored(self, tiny_config, model):
        """Test values in padded steps do not affect the posterior."""
        model.eval()
        actions, f_obs = _inputs(tiny_config)
        pad_mask = torch.tensor([[True, True, False, False]] * 2)
        altered = actions.clone()
        altered[:, 2:] = -actions[:, 2:]

        with torch.no_grad():
            mu, _ = ata_encode(model, actions, f_obs, pad_mask)
            mu_altered, _ = ata_encode(model, altered, f_obs, pad_mask)
        torch.testing.assert_close(mu, mu_altered)

    def test_obs_agnostic_ignores_observation(self, tiny_config):
        """Test the obs-agnostic variant gives the same output for any observation."""
        torch.manual_seed(0)
        model = AtaModel(tiny_config, ACTION_DIM, FEATURE_DIM, obs_aware=False)
        actions, f_obs = _inputs(tiny_config)
        z = torch.randn(2, tiny_config.d_z)

        torch.testing.assert_close(ata_decode(model, z, f_obs), ata_decode(model, z, torch.randn_like(f_obs)))
        torch.testing.assert_close(ata_decode(model, z, f_obs), ata_decode(model, z, None))
        f_obs = f_obs.requires_grad_()
        loss, _ = ata_loss(model, actions, f_obs, w=0.01, rng=utils.seeded_torch_rng(0, "z"))
        (grad,) = torch.autograd.grad(loss, f_obs, allow_unused=True)
        assert grad is None or bool((grad == 0).all())

    def test_observation_gradient(self, tiny_config, model):
        """Test the default ATA propagates gradient into the observation feature."""
        actions, f_obs = _inputs(tiny_config)
        f_obs = f_obs.requires_grad_()
        loss, _ = ata_loss(model, actions, f_obs, w=0.01, rng=utils.seeded_torch_rng(0, "z"))
        (grad,) = torch.autograd.grad(loss, f_obs)
        assert float(grad.abs().sum()) > 0

    @pytest.mark.parametrize(("task_aware", "reaches_table"), [(False, False), (True, True)])
    def test_instruction_table_gradient(self, tiny_config, task_aware, reaches_table):
        """Test the loss reaches the instruction embedding table only for the task-aware variant."""
        torch.manual_seed(0)
        model = AtaModel(tiny_config, ACTION_DIM, FEATURE_DIM, task_aware=task_aware)
        table = build_frozen_encoders(tiny_config).instruction
        table.table.weight.requires_grad_(True)
        actions, f_obs = _inputs(tiny_config)
        f_text = table(["reach the red target", "press the button"])

        loss, _ = ata_loss(model, actions, f_obs, w=0.01, rng=utils.seeded_torch_rng(0, "z"), f_text=f_text)
        (grad,) = torch.autograd.grad(loss, table.table.weight, allow_unused=True)

        reached = grad is not None and float(grad.abs().sum()) > 0
        assert reached == reaches_table

    def test_default_ata_never_sees_instruction(self, tiny_config, model):
        """Test the default ATA has no instruction pathway."""
        assert model.text_in is None
        _, f_obs = _inputs(tiny_config)
        z = torch.randn(2, tiny_config.d_z)
        torch.testing.assert_close(
            ata_decode(model, z, f_obs, torch.randn(2, tiny_config.d_model)),
            ata_decode(model, z, f_obs),
        )

    def test_task_aware_uses_instruction(self, tiny_config):
        """Test the task-aware variant propagates gradient into the instruction feature."""
        torch.manual_seed(0)
        model = AtaModel(tiny_config, ACTION_DIM, FEATURE_DIM, task_aware=True)
        actions, f_obs = _inputs(tiny_config)
        f_text = torch.randn(2, tiny_config.d_model, requires_grad=True)

        loss, _ = ata_loss(model, actions, f_obs, w=0.01, rng=utils.seeded_torch_rng(0, "z"), f_text=f_text)
        (grad,) = torch.autograd.grad(loss, f_text)

        assert float(grad.abs().sum()) > 0
        with pytest.raises(ValueError, match="f_text"):
            ata_encode(model, actions, f_obs)


class TestAtaObjective:
    """Tests for the training objective."""

    def test_kl_matches_closed_form(self):
        """Test the KL term equals the analytic Gaussian KL, summed over dims."""
        mu = torch.tensor([[0.5, -1.0, 0.0], [2.0, 0.1, -0.3]])
        sigma = torch.tensor([[0.8, 1.2, 1.0], [0.3, 2.0, 0.9]])
        expected = kl_divergence(Normal(mu, sigma), Normal(0.0, 1.0)).sum(dim=-1).mean()
        torch.testing.assert_close(kl_diag_gaussian(mu, sigma), expected)
        assert float(kl_diag_gaussian(torch.zeros(4, 3), torch.ones(4, 3))) == 0.0

    def test_kl_monte_carlo(self):
        """Test the KL term agrees with a Monte Carlo estimate."""
        mu, sigma = torch.tensor([[0.7, -0.4]]), torch.tensor([[0.6, 1.5]])
        generator = torch.Generator().manual_seed(0)
        z = mu + sigma * torch.randn(200_000, 2, generator=generator)
        log_q = Normal(mu, sigma).log_prob(z).sum(dim=-1)
        log_p = Normal(0.0, 1.0).log_prob(z).sum(dim=-1)
        assert float(kl_diag_gaussian(mu, sigma)) == pytest.approx(float((log_q - log_p).mean()), rel=0.02)

    def test_masked_reconstruction(self):
        """Test padded steps and invalid dims do not count."""
        actions = torch.zeros(1, 4, 2)
        reconstruction = torch.ones(1, 4, 2)
        pad_mask = torch.tensor([[True, True, False, False]])
        dim_mask = torch.tensor([[True, False]])
        reconstruction[0, 2:] = 100.0
        reconstruction[0, :, 1] = 100.0

        error = masked_reconstruction_error(actions, reconstruction, pad_mask, dim_mask)

        assert float(error) == pytest.approx(1.0)

    def test_objective_weights_kl(self):
        """Test the loss is reconstruction plus w times KL and negative w is rejected."""
        actions = torch.zeros(2, 4, 2)
        reconstruction = torch.full((2, 4, 2), 0.5)
        mu, sigma = torch.ones(2, 3), torch.ones(2, 3)

        loss, components = ata_objective(actions, reconstruction, mu, sigma, w=0.1)

        assert components["reconstruction"] == pytest.approx(0.25)
        assert components["kl"] == pytest.approx(1.5)
        assert float(loss) == pytest.approx(0.25 + 0.1 * 1.5)
        with pytest.raises(ValueError, match="KL weight"):
            ata_objective(actions, reconstruction, mu, sigma, w=-0.1)

    def test_zero_sigma_is_clamped(self):
        """Test reparameterization stays finite for a degenerate sigma."""
        z = reparameterize(torch.zeros(2, 3), torch.zeros(2, 3), utils.seeded_torch_rng(0, "z"))
        assert bool(torch.isfinite(z).all())

    def test_gradient_matches_finite_differences(self, tiny_config):
        """Test analytic gradients of the loss against central differences in float64."""
        config = dataclasses.replace(tiny_config, d_z=8, d_model=16, h=4)
        torch.manual_seed(0)
        model = AtaModel(config, ACTION_DIM, FEATURE_DIM).double()
        actions, f_obs = _inputs(config, dtype=torch.float64)
        actions.requires_grad_()

        def loss_of(values: torch.Tensor) -> torch.Tensor:
            loss, _ = ata_loss(model, values, f_obs, w=0.01, rng=utils.seeded_torch_rng(0, "gradcheck"))
            return loss

        assert torch.autograd.gradcheck(loss_of, (actions,), eps=1e-6, atol=1e-5, rtol=1e-3)

    def test_parameter_gradients_match_finite_differences(self, tiny_config, parameter_gradcheck):
        """Test analytic gradients of the loss for every ATA parameter in float64."""
        config = dataclasses.replace(tiny_config, d_z=4, d_model=8, dim_feedforward=16, h=3)
        torch.manual_seed(0)
        model = AtaModel(config, ACTION_DIM, FEATURE_DIM).double()
        actions, f_obs = _inputs(config, dtype=torch.float64)

        def loss_of(module: AtaModel) -> torch.Tensor:
            loss, _ = ata_loss(module, actions, f_obs, w=0.01, rng=utils.seeded_torch_rng(0, "gradcheck"))
            return loss

        assert parameter_gradcheck(model, loss_of, fast_mode=True)

    def test_loss_decreases_with_training(self, tiny_config):
        """Test a few optimizer steps reduce the loss on a fixed batch."""
        torch.manual_seed(0)
        model = AtaModel(tiny_config, ACTION_DIM, FEATURE_DIM)
        actions, f_obs = _inputs(tiny_config, batch=8)
        optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)

        losses = []
        for step in range(60):
            optimizer.zero_grad()
            loss, _ = ata_loss(model, actions, f_obs, w=0.001, rng=utils.seeded_torch_rng(step, "train"))
            loss.backward()
            optimizer.step()
            losses.append(float(loss))

        assert sum(losses[-10:]) / 10 < sum(losses[:10]) / 10
