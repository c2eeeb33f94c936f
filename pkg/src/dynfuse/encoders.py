"""ODE-RNN sequence encoders producing initial latent conditions.

Each measurement stream gets its own encoder: the input sequence is consumed
in reverse time order, the hidden state evolves between observations by
integrating a learnable vector field (Euler by default), and a recurrent
cell absorbs each observation.  The hidden state propagated to t0 feeds a
posterior head that outputs a diagonal Gaussian (mu, sigma), from which the
initial latent condition is drawn via the reparameterization z0 = mu + sigma*eps.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .ode import OdeField, SolverConfig

__all__ = [
    "GruCell",
    "LstmCell",
    "PosteriorParams",
    "InitialLatent",
    "PosteriorHead",
    "OdeRnnEncoder",
    "sample_initial",
]


class GruCell(nn.Module):
    """Gated recurrent update: h' = u * h_tilde + (1 - u) * candidate.

    A saturated update gate (u -> 1) carries the previous state through
    unchanged; with all-zero parameters the update reduces to h_tilde / 2.
    """

    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.w_update = nn.Linear(input_dim, hidden_dim)
        self.u_update = nn.Linear(hidden_dim, hidden_dim, bias=False)
        self.w_reset = nn.Linear(input_dim, hidden_dim)
        self.u_reset = nn.Linear(hidden_dim, hidden_dim, bias=False)
        self.w_cand = nn.Linear(input_dim, hidden_dim)
        self.u_cand = nn.Linear(hidden_dim, hidden_dim, bias=False)

    def forward(self, h_tilde: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        u = torch.sigmoid(self.w_update(x) + self.u_update(h_tilde))
        r = torch.sigmoid(self.w_reset(x) + self.u_reset(h_tilde))
        cand = torch.tanh(self.w_cand(x) + self.u_cand(r * h_tilde))
        return u * h_tilde + (1 - u) * cand


class LstmCell(nn.Module):
    """LSTM update with memory/forget/input gates and a peephole output gate.

    The output gate sees the fresh cell state through an elementwise weight
    vector: o = sigmoid(W_ro x + W_ho h_tilde + w_co * c_new + b_o), and the
    hidden state is h = tanh(c_new) * o.
    """

    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.w_cand = nn.Linear(input_dim, hidden_dim)
        self.u_cand = nn.Linear(hidden_dim, hidden_dim, bias=False)
        self.w_forget = nn.Linear(input_dim, hidden_dim)
        self.u_forget = nn.Linear(hidden_dim, hidden_dim, bias=False)
        self.w_input = nn.Linear(input_dim, hidden_dim)
        self.u_input = nn.Linear(hidden_dim, hidden_dim, bias=False)
        self.w_output = nn.Linear(input_dim, hidden_dim)
        self.u_output = nn.Linear(hidden_dim, hidden_dim, bias=False)
        self.w_peephole = nn.Parameter(torch.zeros(hidden_dim))

    def forward(self, h_tilde: torch.Tensor, c_prev: torch.Tensor, x: torch.Tensor):
        cand = torch.tanh(self.w_cand(x) + self.u_cand(h_tilde))
        forget = torch.sigmoid(self.w_forget(x) + self.u_forget(h_tilde))
        gain = torch.sigmoid(self.w_input(x) + self.u_input(h_tilde))
        c_new = forget * c_prev + gain * cand
        out = torch.sigmoid(self.w_output(x) + self.u_output(h_tilde) + self.w_peephole * c_new)
        return torch.tanh(c_new) * out, c_new


@dataclass
class PosteriorParams:
    """Diagonal Gaussian over the initial latent condition."""

    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if bool((self.sigma <= 0).any()):
            raise ValueError("posterior sigma must be positive elementwise")

    def kl_to_standard_normal(self) -> torch.Tensor:
        """Closed-form KL(N(mu, sigma^2) || N(0, I)), summed over latent dims."""
        var = self.sigma ** 2
        return 0.5 * (self.mu ** 2 + var - 1 - torch.log(var)).sum(dim=-1)


@dataclass
class InitialLatent:
    """Sampled initial latent condition with its posterior and noise draw."""

    z0: torch.Tensor
    posterior: PosteriorParams
    epsilon: torch.Tensor

    def __post_init__(self):
        expected = self.posterior.mu + self.posterior.sigma * self.epsilon
        if not torch.allclose(self.z0.detach(), expected.detach(), atol=1e-9):
            raise ValueError("z0 must equal mu + sigma * epsilon")


def sample_initial(post: PosteriorParams, epsilon: torch.Tensor) -> InitialLatent:
    """Reparameterized draw z0 = mu + sigma * epsilon (gradient flows to mu, sigma)."""
    if epsilon.shape != post.mu.shape:
        raise ValueError(f"epsilon shape {tuple(epsilon.shape)} != posterior shape {tuple(post.mu.shape)}")
    return InitialLatent(post.mu + post.sigma * epsilon, post, epsilon)


class PosteriorHead(nn.Module):
    """MLP mapping the final hidden state to (mu, softplus(raw) + 1e-6)."""

    SIGMA_FLOOR = 1e-6

    def __init__(self, hidden_dim: int, latent_dim: int, mlp_hidden: int = 64):
        super().__init__()
        self.latent_dim = latent_dim
        self.net = nn.Sequential(
            nn.Linear(hidden_dim, mlp_hidden), nn.Tanh(),
            nn.Linear(mlp_hidden, 2 * latent_dim),
        )

    def forward(self, h: torch.Tensor) -> PosteriorParams:
        raw = self.net(h)
        mu, sigma_raw = raw[..., : self.latent_dim], raw[..., self.latent_dim:]
        return PosteriorParams(mu, nn.functional.softplus(sigma_raw) + self.SIGMA_FLOOR)


class OdeRnnEncoder(nn.Module):
    """Reverse-order ODE-RNN over one stream, batched with padding masks."""

    def __init__(self, input_dim: int, hidden_dim: int, latent_dim: int,
                 cell: str = "gru", ode_hidden: int = 64,
                 solver: SolverConfig = SolverConfig(method="euler", h=0.01)):
        super().__init__()
        if cell == "gru":
            self.cell = GruCell(input_dim, hidden_dim)
        elif cell == "lstm":
            self.cell = LstmCell(input_dim, hidden_dim)
        else:
            raise ValueError(f"unknown recurrent cell {cell!r}")
        self.cell_kind = cell
        self.hidden_dim = hidden_dim
        self.field = OdeField(hidden_dim, hidden=ode_hidden)
        self.head = PosteriorHead(hidden_dim, latent_dim)
        self.solver = solver

    def _propagate(self, h: torch.Tensor, t_from: torch.Tensor, t_to: torch.Tensor) -> torch.Tensor:
        """Euler with per-element spans: equal substeps of size at most cfg.h."""
        dt = t_to - t_from
        n_sub = torch.ceil(dt.abs() / self.solver.h).long()
        if int(n_sub.max()) == 0:
            return h
        step = dt / n_sub.clamp(min=1)
        t = t_from.clone()
        for j in range(int(n_sub.max())):
            live = (j < n_sub).to(h.dtype)
            h = h + (live * step).unsqueeze(-1) * self.field(h, t)
            t = t + live * step
        return h

    def encode_sequence(self, values: torch.Tensor, times: torch.Tensor,
                        mask: torch.Tensor, t0: float = 0.0) -> torch.Tensor:
        """Hidden state at t0 after consuming the sequence from last to first.

        values: (B, N, M); times: (B, N) nondecreasing within the valid
        prefix; mask: (B, N) with 1 for real observations.  Padded entries
        leave the state untouched.
        """
        b, n, _ = values.shape
        lengths = mask.sum(dim=-1).long()
        if bool((lengths == 0).any()):
            raise ValueError("every sequence must contain at least one observation")
        h = values.new_zeros(b, self.hidden_dim)
        c = values.new_zeros(b, self.hidden_dim)
        rows = torch.arange(b, device=values.device)
        t_prev = times[rows, lengths - 1]
        for k in range(int(lengths.max())):
            idx = lengths - 1 - k
            valid = (idx >= 0).to(values.dtype).unsqueeze(-1)
            idx_c = idx.clamp(min=0)
            t_cur = times[rows, idx_c]
            x = values[rows, idx_c]
            if k > 0:
                h_prop = self._propagate(h, t_prev, torch.where(idx >= 0, t_cur, t_prev))
                h = valid * h_prop + (1 - valid) * h
            if self.cell_kind == "gru":
                h_new = self.cell(h, x)
            else:
                h_new, c_new = self.cell(h, c, x)
                c = valid * c_new + (1 - valid) * c
            h = valid * h_new + (1 - valid) * h
            t_prev = torch.where(idx >= 0, t_cur, t_prev)
        return self._propagate(h, t_prev, torch.full_like(t_prev, t0))

    def forward(self, values: torch.Tensor, times: torch.Tensor,
                mask: torch.Tensor, t0: float = 0.0) -> PosteriorParams:
        return self.head(self.encode_sequence(values, times, mask, t0))
