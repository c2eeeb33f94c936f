"""Decoders, integrated decoders, the full fusion model, and the training loss.

The model composes: two ODE-RNN encoders producing initial latent
conditions, one latent dynamics field per band (shared between alignment
and reconstruction), a post-alignment fusion scheme, and three decoders
(trajectory, CSI embedding, beam SNR).  The loss is the negated weighted
evidence lower bound: L1 reconstruction terms (Laplace likelihoods) plus
weighted KL divergences of both posteriors against standard-normal priors.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import torch
from torch import nn

from .batching import WindowBatch
from .encoders import InitialLatent, OdeRnnEncoder, PosteriorParams, sample_initial
from .fusion import align_latents, make_fusion, recover_latents
from .ode import OdeField, SolverConfig, integrate_many

__all__ = [
    "ModelConfig",
    "LossWeights",
    "ModelOutputs",
    "Decoder",
    "DynamicFusionModel",
    "kl_gaussian",
    "elbo_loss",
    "LossNanError",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture dimensions and solver choices."""

    m_b: int = 36
    m_c: int = 36
    h_b: int = 20
    h_c: int = 20
    l_b: int = 20
    l_c: int = 20
    l_f: int = 128
    l_p: int = 20
    cell: str = "gru"
    fusion: str = "mlp"
    ode_hidden: int = 64
    mlp_hidden: int = 64
    t0: float = 0.0
    encoder_solver: SolverConfig = dc_field(default_factory=lambda: SolverConfig(method="euler", h=0.01))
    latent_solver: SolverConfig = dc_field(default_factory=lambda: SolverConfig(method="dopri5"))

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "m_b", "m_c", "h_b", "h_c", "l_b", "l_c", "l_f", "l_p",
            "cell", "fusion", "ode_hidden", "mlp_hidden", "t0")}
        d["encoder_solver"] = vars(self.encoder_solver).copy()
        d["latent_solver"] = vars(self.latent_solver).copy()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder_solver"] = SolverConfig(**d["encoder_solver"])
        d["latent_solver"] = SolverConfig(**d["latent_solver"])
        return cls(**d)


@dataclass(frozen=True)
class LossWeights:
    """Regularization weights of the training loss and the Laplace scale."""

    lambda1: float = 0.7     # beam SNR reconstruction
    lambda2: float = 1.0     # CSI reconstruction
    lambda3: float = 0.0010  # beam posterior KL
    lambda4: float = 0.25    # CSI posterior KL
    b_p: float = 1.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda4) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.b_p <= 0:
            raise ValueError("Laplace scale b_p must be positive")


@dataclass
class ModelOutputs:
    traj: torch.Tensor        # (B, Np, 2)
    beam_recon: torch.Tensor  # (B, Nb, Mb)
    csi_recon: torch.Tensor   # (B, Nc, Mc)
    post_b: PosteriorParams
    post_c: PosteriorParams
    latent_b: InitialLatent
    latent_c: InitialLatent
    fused: torch.Tensor       # (B, Np, Lp)


class LossNanError(RuntimeError):
    """A loss term became NaN; carries the offending term name."""

    def __init__(self, term: str):
        super().__init__(f"loss term {term!r} is NaN")
        self.term = term


class Decoder(nn.Module):
    """Three-layer MLP shared across all time instances of its sequence."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.Tanh(),
            nn.Linear(hidden, hidden), nn.Tanh(),
            nn.Linear(hidden, out_dim),
        )
        self.out_dim = out_dim

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


def kl_gaussian(post: PosteriorParams) -> torch.Tensor:
    """Closed-form KL of a diagonal Gaussian against the standard normal."""
    return post.kl_to_standard_normal()


def _masked_l1(target: torch.Tensor, pred: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-window sum of L1 norms over valid time steps; (B,)."""
    return ((target - pred).abs().sum(dim=-1) * mask).sum(dim=-1)


def elbo_loss(batch: WindowBatch, outputs: ModelOutputs, weights: LossWeights):
    """Per-window loss (B,) and its named terms.

    Sums (not means) over the points of each window: trajectory L1 scaled by
    the Laplace scale, weighted beam/CSI reconstruction L1, and weighted KL
    terms for both posteriors.
    """
    terms = {
        "traj": _masked_l1(batch.label_xy, outputs.traj, batch.label_mask) / weights.b_p,
        "beam": weights.lambda1 * _masked_l1(batch.beam_v, outputs.beam_recon, batch.beam_mask),
        "csi": weights.lambda2 * _masked_l1(batch.csi_v, outputs.csi_recon, batch.csi_mask),
        "kl_beam": weights.lambda3 * kl_gaussian(outputs.post_b),
        "kl_csi": weights.lambda4 * kl_gaussian(outputs.post_c),
    }
    for name, value in terms.items():
        if bool(torch.isnan(value).any()):
            raise LossNanError(name)
    total = sum(terms.values())
    return total, terms


class DynamicFusionModel(nn.Module):
    """Dual-encoder, triple-decoder fusion model over asynchronous streams."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder_b = OdeRnnEncoder(cfg.m_b, cfg.h_b, cfg.l_b, cell=cfg.cell,
                                       ode_hidden=cfg.ode_hidden, solver=cfg.encoder_solver)
        self.encoder_c = OdeRnnEncoder(cfg.m_c, cfg.h_c, cfg.l_c, cell=cfg.cell,
                                       ode_hidden=cfg.ode_hidden, solver=cfg.encoder_solver)
        self.field_b = OdeField(cfg.l_b, hidden=cfg.ode_hidden)
        self.field_c = OdeField(cfg.l_c, hidden=cfg.ode_hidden)
        self.fusion = make_fusion(cfg.fusion, cfg.l_b, cfg.l_c, cfg.l_f, cfg.l_p, cfg.mlp_hidden)
        self.decode_traj = Decoder(cfg.l_p, 2, cfg.mlp_hidden)
        self.decode_csi = Decoder(cfg.l_c, cfg.m_c, cfg.mlp_hidden)
        self.decode_beam = Decoder(cfg.l_b, cfg.m_b, cfg.mlp_hidden)
        self.double()

    # -- latent unrolling ---------------------------------------------------

    def _unroll(self, field, z0: torch.Tensor, query_sets: list[torch.Tensor]):
        """One continuous integration per band, evaluated at several query sets.

        Query rows need not be monotone (padded slots repeat times), so this
        goes through integrate_many rather than the single-path operation.
        """
        return integrate_many(field, z0, self.cfg.t0, query_sets, self.cfg.latent_solver)

    # -- spec operations on a single window ----------------------------------

    def integrated_trajectory(self, z0_b: torch.Tensor, z0_c: torch.Tensor,
                              t0: float, label_times) -> torch.Tensor:
        """Trajectory estimates from the two initial latent conditions."""
        zb, zc = align_latents(z0_b, z0_c, t0, label_times, self.field_b,
                               self.field_c, self.cfg.latent_solver)
        fused = self.fusion(zb, zc, z0_b, z0_c)
        return self.decode_traj(fused)

    def integrated_csi(self, z0_c: torch.Tensor, t0: float, csi_times) -> torch.Tensor:
        """CSI embedding reconstruction at the native CSI times."""
        z = recover_latents(z0_c, t0, csi_times, self.field_c, self.cfg.latent_solver)
        return self.decode_csi(z)

    def integrated_bsnr(self, z0_b: torch.Tensor, t0: float, beam_times) -> torch.Tensor:
        """Beam SNR reconstruction at the native beam times."""
        z = recover_latents(z0_b, t0, beam_times, self.field_b, self.cfg.latent_solver)
        return self.decode_beam(z)

    # -- batched paths --------------------------------------------------------

    def encode(self, batch: WindowBatch):
        post_b = self.encoder_b(batch.beam_v, batch.beam_t, batch.beam_mask, self.cfg.t0)
        post_c = self.encoder_c(batch.csi_v, batch.csi_t, batch.csi_mask, self.cfg.t0)
        return post_b, post_c

    def forward(self, batch: WindowBatch, eps_b: torch.Tensor | None = None,
                eps_c: torch.Tensor | None = None) -> ModelOutputs:
        post_b, post_c = self.encode(batch)
        if eps_b is None:
            eps_b = torch.zeros_like(post_b.mu)
        if eps_c is None:
            eps_c = torch.zeros_like(post_c.mu)
        lat_b = sample_initial(post_b, eps_b)
        lat_c = sample_initial(post_c, eps_c)
        zb_aligned, zb_native = self._unroll(self.field_b, lat_b.z0, [batch.label_t, batch.beam_t])
        zc_aligned, zc_native = self._unroll(self.field_c, lat_c.z0, [batch.label_t, batch.csi_t])
        fused = self.fusion(zb_aligned, zc_aligned, lat_b.z0, lat_c.z0)
        return ModelOutputs(
            traj=self.decode_traj(fused),
            beam_recon=self.decode_beam(zb_native),
            csi_recon=self.decode_csi(zc_native),
            post_b=post_b, post_c=post_c,
            latent_b=lat_b, latent_c=lat_c,
            fused=fused,
        )

    def compute_loss(self, batch: WindowBatch, weights: LossWeights,
                     eps_b: torch.Tensor | None = None,
                     eps_c: torch.Tensor | None = None):
        """Batch-mean loss with named per-term means."""
        outputs = self(batch, eps_b, eps_c)
        per_window, terms = elbo_loss(batch, outputs, weights)
        return per_window.mean(), {k: float(v.detach().mean()) for k, v in terms.items()}

    @torch.no_grad()
    def predict_trajectory(self, batch: WindowBatch) -> torch.Tensor:
        """Posterior-mean trajectory estimates (deterministic)."""
        return self(batch).traj

    def noise_dims(self) -> tuple[int, int]:
        """Latent dimensions of the per-window posterior noise draws."""
        return self.cfg.l_b, self.cfg.l_c
