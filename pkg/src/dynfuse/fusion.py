"""Latent-state alignment across bands and post-alignment fusion.

Each band's initial latent condition is unrolled with that band's single
dynamics model: to the shared label times for alignment (both bands
evaluated at identical times) and to the band's native measurement times
for reconstruction.  Aligned latent pairs are fused by one of three
interchangeable schemes, all emitting vectors of dimension `l_p`:

  * mlp:      lift both bands to `l_f`, concatenate, project.
  * pairwise: concatenate both bands with their Kronecker interaction.
  * weighted: per-dimension convex weights derived from the initial latent
              conditions (softmax over the band pair), so the weights are
              constant across time within a window.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import torch
from torch import nn

from .ode import SolverConfig, integrate_path

__all__ = [
    "align_latents",
    "recover_latents",
    "MlpFusion",
    "PairwiseFusion",
    "WeightedFusion",
    "make_fusion",
    "write_latent_records",
    "read_latent_records",
]


def _check_query_times(times: torch.Tensor, t0: float) -> None:
    if float(torch.as_tensor(times).min()) < t0 - 1e-9:
        raise ValueError(f"query times must not precede t0={t0}")


def recover_latents(z0: torch.Tensor, t0: float, native_times, field,
                    cfg: SolverConfig) -> torch.Tensor:
    """Latent states of one band at its native measurement times."""
    _check_query_times(torch.as_tensor(native_times), t0)
    return integrate_path(field, z0, t0, native_times, cfg)


def align_latents(z0_b: torch.Tensor, z0_c: torch.Tensor, t0: float, label_times,
                  field_b, field_c, cfg: SolverConfig):
    """Both bands' latent states at the shared label times.

    Returns (beam states, csi states); the two lists are evaluated at
    identical times and have equal length by construction.
    """
    _check_query_times(torch.as_tensor(label_times), t0)
    zb = integrate_path(field_b, z0_b, t0, label_times, cfg)
    zc = integrate_path(field_c, z0_c, t0, label_times, cfg)
    return zb, zc


class Mlp(nn.Module):
    """One-hidden-layer tanh MLP used for lifts and fusion heads."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.Tanh(), nn.Linear(hidden, out_dim))
        self.in_dim = in_dim
        self.out_dim = out_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class FusionBase(nn.Module):
    """Common interface: forward(z_b, z_c, z0_b, z0_c) -> fused latent."""

    scheme: str

    def __init__(self, l_b: int, l_c: int, l_f: int, l_p: int):
        super().__init__()
        self.l_b, self.l_c, self.l_f, self.l_p = l_b, l_c, l_f, l_p

    def _check(self, z_b: torch.Tensor, z_c: torch.Tensor) -> None:
        if z_b.shape[-1] != self.l_b or z_c.shape[-1] != self.l_c:
            raise ValueError(
                f"latent dims ({z_b.shape[-1]}, {z_c.shape[-1]}) do not match "
                f"fusion dims ({self.l_b}, {self.l_c})")


class MlpFusion(FusionBase):
    scheme = "mlp"

    def __init__(self, l_b: int, l_c: int, l_f: int = 128, l_p: int = 20, hidden: int = 64):
        super().__init__(l_b, l_c, l_f, l_p)
        self.lift_b = Mlp(l_b, l_f, hidden)
        self.lift_c = Mlp(l_c, l_f, hidden)
        self.head = Mlp(2 * l_f, l_p, hidden)

    def forward(self, z_b, z_c, z0_b=None, z0_c=None):
        self._check(z_b, z_c)
        return self.head(torch.cat([self.lift_b(z_b), self.lift_c(z_c)], dim=-1))


class PairwiseFusion(FusionBase):
    scheme = "pairwise"

    def __init__(self, l_b: int, l_c: int, l_f: int = 128, l_p: int = 20, hidden: int = 64):
        super().__init__(l_b, l_c, l_f, l_p)
        self.head = Mlp(l_b + l_c + l_b * l_c, l_p, hidden)

    def forward(self, z_b, z_c, z0_b=None, z0_c=None):
        self._check(z_b, z_c)
        inter = torch.einsum("...i,...j->...ij", z_b, z_c).flatten(start_dim=-2)
        return self.head(torch.cat([z_b, z_c, inter], dim=-1))


class WeightedFusion(FusionBase):
    scheme = "weighted"

    def __init__(self, l_b: int, l_c: int, l_f: int = 128, l_p: int = 20, hidden: int = 64):
        super().__init__(l_b, l_c, l_f, l_p)
        self.lift_b = Mlp(l_b, l_f, hidden)
        self.lift_c = Mlp(l_c, l_f, hidden)
        self.weight_b = Mlp(l_b, l_f, hidden)
        self.weight_c = Mlp(l_c, l_f, hidden)
        self.head = Mlp(l_f, l_p, hidden)

    def importance_weights(self, z0_b: torch.Tensor, z0_c: torch.Tensor):
        """Per-dimension convex pair (w_b, w_c), softmax-normalized to sum to 1."""
        raw = torch.stack([self.weight_b(z0_b), self.weight_c(z0_c)])
        w = torch.softmax(raw, dim=0)
        return w[0], w[1]

    def forward(self, z_b, z_c, z0_b=None, z0_c=None):
        if z0_b is None or z0_c is None:
            raise ValueError("weighted fusion requires the initial latent conditions")
        self._check(z_b, z_c)
        w_b, w_c = self.importance_weights(z0_b, z0_c)
        if z_b.dim() == w_b.dim() + 1:  # weights are per window, constant over time
            w_b, w_c = w_b.unsqueeze(-2), w_c.unsqueeze(-2)
        return self.head(self.lift_b(z_b) * w_b + self.lift_c(z_c) * w_c)


_SCHEMES = {cls.scheme: cls for cls in (MlpFusion, PairwiseFusion, WeightedFusion)}


def make_fusion(scheme: str, l_b: int, l_c: int, l_f: int = 128, l_p: int = 20,
                hidden: int = 64) -> FusionBase:
    if scheme not in _SCHEMES:
        raise ValueError(f"unknown fusion scheme {scheme!r}; choose from {sorted(_SCHEMES)}")
    return _SCHEMES[scheme](l_b, l_c, l_f, l_p, hidden)


def write_latent_records(path: str | Path, records: Iterable[dict]) -> None:
    """Write latent-state rows {window_id, t, band, z: [floats], ...} as JSON lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in records:
            if not {"window_id", "t", "band", "z"} <= rec.keys():
                raise ValueError("latent record must carry window_id, t, band, z")
            fh.write(json.dumps(rec) + "\n")


def read_latent_records(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh]
