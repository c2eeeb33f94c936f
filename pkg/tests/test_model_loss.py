"""Decoder contracts, integrated decoders, KL closed form, and the loss."""

import math

import numpy as np
import pytest
import torch

from conftest import make_toy_batch
from dynfuse.batching import collate
from dynfuse.encoders import PosteriorParams, sample_initial
from dynfuse.model import (
    Decoder,
    DynamicFusionModel,
    LossNanError,
    LossWeights,
    ModelConfig,
    ModelOutputs,
    elbo_loss,
    kl_gaussian,
)
from dynfuse.ode import SolverConfig

torch.set_default_dtype(torch.float64)

SMALL = ModelConfig(m_b=3, m_c=2, h_b=4, h_c=4, l_b=3, l_c=3, l_f=6, l_p=4,
                    ode_hidden=8, mlp_hidden=8)
EULER_SMALL = ModelConfig(m_b=3, m_c=2, h_b=4, h_c=4, l_b=3, l_c=3, l_f=6, l_p=4,
                          ode_hidden=8, mlp_hidden=8,
                          latent_solver=SolverConfig(method="euler", h=0.05))


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


class TestDecoders:
    def test_zero_weights_give_bias_everywhere(self):
        dec = Decoder(4, 2, hidden=8)
        zero_(dec)
        with torch.no_grad():
            dec.net[-1].bias.copy_(torch.tensor([0.3, -0.8]))
        out = dec(torch.randn(2, 5, 4))
        assert torch.allclose(out, torch.tensor([0.3, -0.8]).expand(2, 5, 2))

    def test_output_dimensions(self):
        model = DynamicFusionModel(ModelConfig())
        assert model.decode_traj.out_dim == 2
        assert model.decode_csi.out_dim == 36
        assert model.decode_beam.out_dim == 36

    def test_parameters_shared_across_time(self):
        dec = Decoder(3, 2, hidden=8).double()
        z = torch.randn(1, 1, 3).expand(1, 6, 3)
        out = dec(z)
        assert torch.allclose(out, out[:, :1].expand(1, 6, 2))

    def test_gradient_matches_central_differences(self):
        torch.manual_seed(0)
        dec = Decoder(3, 2, hidden=6).double()
        z = torch.randn(1, 3, requires_grad=True)
        dec(z).sum().backward()
        eps = 1e-6
        for i in range(3):
            d = torch.zeros(1, 3)
            d[0, i] = eps
            with torch.no_grad():
                fd = (dec(z + d).sum() - dec(z - d).sum()).item() / (2 * eps)
            assert fd == pytest.approx(z.grad[0, i].item(), rel=1e-6, abs=1e-10)

    def test_deterministic(self):
        dec = Decoder(3, 4).double()
        z = torch.randn(2, 3)
        assert torch.equal(dec(z), dec(z))


class TestIntegratedDecoders:
    def _model(self, seed=0):
        torch.manual_seed(seed)
        return DynamicFusionModel(SMALL)

    def test_zeroed_pipeline_gives_constant_decoder_bias(self):
        model = self._model()
        zero_(model.field_b)
        zero_(model.field_c)
        zero_(model.fusion.head)
        zero_(model.decode_traj)
        with torch.no_grad():
            model.decode_traj.net[-1].bias.copy_(torch.tensor([1.5, -2.5]))
        out = model.integrated_trajectory(torch.randn(3), torch.randn(3), 0.0, [0.1, 0.5, 0.9])
        assert torch.allclose(out, torch.tensor([1.5, -2.5]).expand(3, 2))

    def test_single_label_at_t0_decodes_fused_initial_conditions(self):
        model = self._model(1)
        z0_b, z0_c = torch.randn(3), torch.randn(3)
        out = model.integrated_trajectory(z0_b, z0_c, 0.0, [0.0])
        direct = model.decode_traj(model.fusion(z0_b, z0_c, z0_b, z0_c))
        assert torch.allclose(out[0], direct, atol=1e-12)

    def test_single_time_t0_reconstruction_decodes_z0(self):
        model = self._model(2)
        z0_c = torch.randn(3)
        out = model.integrated_csi(z0_c, 0.0, [0.0])
        assert torch.allclose(out[0], model.decode_csi(z0_c), atol=1e-12)
        z0_b = torch.randn(3)
        out_b = model.integrated_bsnr(z0_b, 0.0, [0.0])
        assert torch.allclose(out_b[0], model.decode_beam(z0_b), atol=1e-12)

    def test_dynamics_shared_between_trajectory_and_reconstruction(self):
        model = self._model(3)
        z0_b, z0_c = torch.randn(3), torch.randn(3)
        times = [0.2, 0.8]
        traj0 = model.integrated_trajectory(z0_b, z0_c, 0.0, times)
        csi0 = model.integrated_csi(z0_c, 0.0, times)
        with torch.no_grad():
            model.field_c.net[-1].bias.add_(0.5)
        traj1 = model.integrated_trajectory(z0_b, z0_c, 0.0, times)
        csi1 = model.integrated_csi(z0_c, 0.0, times)
        assert not torch.allclose(traj0, traj1)
        assert not torch.allclose(csi0, csi1)

    def test_reconstruction_shapes(self):
        model = self._model(4)
        out_c = model.integrated_csi(torch.randn(3), 0.0, np.linspace(0.0, 1.0, 7))
        out_b = model.integrated_bsnr(torch.randn(3), 0.0, np.linspace(0.0, 1.0, 4))
        assert out_c.shape == (7, 2)
        assert out_b.shape == (4, 3)

    def test_batched_forward_matches_integrated_decoders(self):
        """The padded batch path and the single-window ops agree."""
        torch.manual_seed(5)
        model = DynamicFusionModel(SMALL)
        batch = make_toy_batch(n_windows=1, m_b=3, m_c=2)
        outputs = model(batch)
        z0_b = outputs.latent_b.z0[0]
        z0_c = outputs.latent_c.z0[0]
        traj = model.integrated_trajectory(z0_b, z0_c, 0.0, batch.label_t[0])
        csi = model.integrated_csi(z0_c, 0.0, batch.csi_t[0])
        bsnr = model.integrated_bsnr(z0_b, 0.0, batch.beam_t[0])
        assert torch.allclose(outputs.traj[0], traj, atol=1e-7)
        assert torch.allclose(outputs.csi_recon[0], csi, atol=1e-7)
        assert torch.allclose(outputs.beam_recon[0], bsnr, atol=1e-7)


class TestKlGaussian:
    def test_standard_normal_gives_zero(self):
        post = PosteriorParams(torch.zeros(1, 4), torch.ones(1, 4))
        assert kl_gaussian(post).item() == pytest.approx(0.0, abs=1e-12)

    def test_unit_mean_gives_half(self):
        post = PosteriorParams(torch.tensor([[1.0]]), torch.tensor([[1.0]]))
        assert kl_gaussian(post).item() == pytest.approx(0.5, abs=1e-12)

    def test_variance_two_closed_form(self):
        post = PosteriorParams(torch.tensor([[0.0]]), torch.tensor([[math.sqrt(2.0)]]))
        assert kl_gaussian(post).item() == pytest.approx(0.5 * (2 - 1 - math.log(2)), abs=1e-12)

    def test_monte_carlo_oracle_agreement(self):
        mu, sigma = 0.7, 1.4
        post = PosteriorParams(torch.tensor([[mu]]), torch.tensor([[sigma]]))
        rng = np.random.default_rng(0)
        x = rng.normal(mu, sigma, size=1_000_000)
        log_q = -0.5 * ((x - mu) / sigma) ** 2 - math.log(sigma * math.sqrt(2 * math.pi))
        log_p = -0.5 * x ** 2 - math.log(math.sqrt(2 * math.pi))
        mc = float(np.mean(log_q - log_p))
        assert kl_gaussian(post).item() == pytest.approx(mc, rel=0.01)

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ValueError):
            PosteriorParams(torch.zeros(1, 2), torch.tensor([[1.0, 0.0]]))

    def test_zero_only_for_standard_normal(self):
        for mu, sigma in ((0.1, 1.0), (0.0, 1.3), (-0.4, 0.7)):
            post = PosteriorParams(torch.tensor([[mu]]), torch.tensor([[sigma]]))
            assert kl_gaussian(post).item() > 0


def _standard_posteriors(batch):
    post_b = PosteriorParams(torch.zeros(batch.size, 3), torch.ones(batch.size, 3))
    post_c = PosteriorParams(torch.zeros(batch.size, 3), torch.ones(batch.size, 3))
    return post_b, post_c


def _outputs_from(batch, traj, beam, csi, post_b, post_c):
    lat_b = sample_initial(post_b, torch.zeros_like(post_b.mu))
    lat_c = sample_initial(post_c, torch.zeros_like(post_c.mu))
    return ModelOutputs(traj=traj, beam_recon=beam, csi_recon=csi,
                        post_b=post_b, post_c=post_c,
                        latent_b=lat_b, latent_c=lat_c, fused=traj)


class TestElboLoss:
    def test_perfect_reconstruction_standard_posterior_gives_zero(self, toy_batch):
        post_b, post_c = _standard_posteriors(toy_batch)
        outputs = _outputs_from(toy_batch, toy_batch.label_xy.clone(),
                                toy_batch.beam_v.clone(), toy_batch.csi_v.clone(),
                                post_b, post_c)
        total, _ = elbo_loss(toy_batch, outputs, LossWeights())
        assert torch.allclose(total, torch.zeros(toy_batch.size), atol=1e-12)

    def test_single_label_unit_offsets_give_two(self):
        batch = make_toy_batch(n_windows=1, n_label=1)
        batch.label_xy[...] = 0.0
        post_b, post_c = _standard_posteriors(batch)
        outputs = _outputs_from(batch, torch.ones_like(batch.label_xy),
                                batch.beam_v.clone(), batch.csi_v.clone(), post_b, post_c)
        weights = LossWeights(lambda1=0.0, lambda2=0.0, lambda3=0.0, lambda4=0.0)
        total, _ = elbo_loss(batch, outputs, weights)
        assert total.item() == pytest.approx(2.0, abs=1e-12)

    def test_default_weights_match_published_values(self):
        w = LossWeights()
        assert (w.lambda1, w.lambda2, w.lambda3, w.lambda4) == (0.7, 1.0, 0.0010, 0.25)
        assert w.b_p == 1.0

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda1=-0.1)

    def test_nan_term_attributed(self, toy_batch):
        post_b, post_c = _standard_posteriors(toy_batch)
        bad_traj = toy_batch.label_xy.clone()
        bad_traj[0, 0, 0] = float("nan")
        outputs = _outputs_from(toy_batch, bad_traj, toy_batch.beam_v.clone(),
                                toy_batch.csi_v.clone(), post_b, post_c)
        with pytest.raises(LossNanError) as err:
            elbo_loss(toy_batch, outputs, LossWeights())
        assert err.value.term == "traj"

    def test_loss_nonnegative_for_random_outputs(self, toy_batch):
        torch.manual_seed(0)
        post_b = PosteriorParams(torch.randn(toy_batch.size, 3), torch.rand(toy_batch.size, 3) + 0.1)
        post_c = PosteriorParams(torch.randn(toy_batch.size, 3), torch.rand(toy_batch.size, 3) + 0.1)
        outputs = _outputs_from(toy_batch, torch.randn_like(toy_batch.label_xy),
                                torch.randn_like(toy_batch.beam_v),
                                torch.randn_like(toy_batch.csi_v), post_b, post_c)
        total, _ = elbo_loss(toy_batch, outputs, LossWeights())
        assert bool((total >= 0).all())

    def test_increasing_one_coordinate_error_increases_loss(self, toy_batch):
        post_b, post_c = _standard_posteriors(toy_batch)
        traj = toy_batch.label_xy.clone()
        base = elbo_loss(toy_batch, _outputs_from(
            toy_batch, traj, toy_batch.beam_v.clone(), toy_batch.csi_v.clone(),
            post_b, post_c), LossWeights())[0]
        traj2 = traj.clone()
        traj2[0, 0, 1] += 0.7
        worse = elbo_loss(toy_batch, _outputs_from(
            toy_batch, traj2, toy_batch.beam_v.clone(), toy_batch.csi_v.clone(),
            post_b, post_c), LossWeights())[0]
        assert worse[0].item() > base[0].item()
        assert worse[1].item() == pytest.approx(base[1].item())

    def test_laplace_scale_divides_trajectory_term(self):
        batch = make_toy_batch(n_windows=1, n_label=1)
        batch.label_xy[...] = 0.0
        post_b, post_c = _standard_posteriors(batch)
        outputs = _outputs_from(batch, torch.ones_like(batch.label_xy),
                                batch.beam_v.clone(), batch.csi_v.clone(), post_b, post_c)
        weights = LossWeights(lambda1=0, lambda2=0, lambda3=0, lambda4=0, b_p=2.0)
        total, _ = elbo_loss(batch, outputs, weights)
        assert total.item() == pytest.approx(1.0, abs=1e-12)


class TestModelLossGradients:
    def test_full_loss_gradients_match_finite_differences(self):
        """Toy model, Euler solvers end to end: FD agreement <= 1e-4 relative."""
        torch.manual_seed(7)
        model = DynamicFusionModel(EULER_SMALL)
        batch = make_toy_batch(n_windows=1, m_b=3, m_c=2, n_beam=2, n_csi=2, n_label=2)
        weights = LossWeights()
        gen = torch.Generator().manual_seed(0)
        eps_b = torch.randn(1, 3, generator=gen)
        eps_c = torch.randn(1, 3, generator=gen)

        loss, _ = model.compute_loss(batch, weights, eps_b, eps_c)
        loss.backward()

        def loss_value():
            with torch.no_grad():
                val, _ = model.compute_loss(batch, weights, eps_b, eps_c)
            return float(val)

        rng = np.random.default_rng(1)
        checked = 0
        for name, p in model.named_parameters():
            flat = p.detach().reshape(-1)
            i = int(rng.integers(flat.numel()))
            orig = flat[i].item()
            step = 1e-5
            with torch.no_grad():
                p.reshape(-1)[i] = orig + step
            up = loss_value()
            with torch.no_grad():
                p.reshape(-1)[i] = orig - step
            down = loss_value()
            with torch.no_grad():
                p.reshape(-1)[i] = orig
            fd = (up - down) / (2 * step)
            analytic = p.grad.reshape(-1)[i].item()
            assert abs(fd - analytic) <= 1e-4 * max(1.0, abs(fd)), name
            checked += 1
        assert checked > 10


class TestModelForward:
    def test_output_shapes(self):
        torch.manual_seed(0)
        model = DynamicFusionModel(SMALL)
        batch = make_toy_batch(n_windows=3, m_b=3, m_c=2, n_beam=2, n_csi=4, n_label=5)
        out = model(batch)
        assert out.traj.shape == (3, 5, 2)
        assert out.beam_recon.shape == (3, 2, 3)
        assert out.csi_recon.shape == (3, 4, 2)
        assert out.fused.shape == (3, 5, 4)

    def test_euler_latent_solver_path(self):
        torch.manual_seed(0)
        model = DynamicFusionModel(EULER_SMALL)
        batch = make_toy_batch(n_windows=2, m_b=3, m_c=2)
        out = model(batch)
        assert out.traj.shape[0] == 2

    def test_predict_trajectory_deterministic(self, toy_batch):
        torch.manual_seed(1)
        model = DynamicFusionModel(SMALL)
        a = model.predict_trajectory(toy_batch)
        b = model.predict_trajectory(toy_batch)
        assert torch.equal(a, b)

    def test_padded_batch_matches_individual_windows(self):
        """Dense evaluation with repeated pad times equals per-window runs."""
        torch.manual_seed(3)
        model = DynamicFusionModel(SMALL)
        from conftest import make_toy_window
        w1 = make_toy_window(seed=11, m_b=3, m_c=2, n_beam=2, n_csi=3, n_label=2, window_id=0)
        w2 = make_toy_window(seed=12, m_b=3, m_c=2, n_beam=4, n_csi=5, n_label=3, window_id=1)
        big = model(collate([w1, w2]))
        solo1 = model(collate([w1]))
        solo2 = model(collate([w2]))
        assert torch.allclose(big.traj[0, :2], solo1.traj[0], atol=1e-6)
        assert torch.allclose(big.traj[1], solo2.traj[0], atol=1e-6)
        assert torch.allclose(big.csi_recon[0, :3], solo1.csi_recon[0], atol=1e-6)
        assert torch.allclose(big.beam_recon[1], solo2.beam_recon[0], atol=1e-6)
