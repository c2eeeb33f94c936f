"""Comparison methods for trajectory regression.

Frame-to-frame fusion interpolates each measurement stream at the label
times (linear or nearest-neighbor, ties to the left sample) and regresses
the concatenated values with an MLP.  Sequence-to-sequence fusion runs a
recurrent cell along each stream's native times, handling irregular
sampling either by exponentially decaying the previous hidden state over
the time gap (decay variant) or by appending the gap to the input (delta
variant); per label time, each band's most recent hidden state is
propagated to the label time with a zero input, and the fused hidden
states are regressed to coordinates.

Out-of-range queries clamp to the nearest sample and are counted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .batching import WindowBatch
from .encoders import GruCell

__all__ = [
    "BaselineConfig",
    "linear_interp",
    "nearest_interp",
    "rnn_decay_step",
    "rnn_delta_step",
    "InterpFusionRegressor",
    "RnnFusionRegressor",
    "make_baseline",
]

INTERP_METHODS = ("linear_int", "nearest_int")
RNN_METHODS = ("rnn_decay", "rnn_delta")
BANDS = ("csi", "beam", "both")


@dataclass(frozen=True)
class BaselineConfig:
    """Baseline method selection and capacities."""

    method: str
    bands: str = "both"
    rnn_hidden: int = 20
    head_hidden: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if self.method not in INTERP_METHODS + RNN_METHODS:
            raise ValueError(f"unknown baseline method {self.method!r}")
        if self.bands not in BANDS:
            raise ValueError(f"bands must be one of {BANDS}")
        if self.rnn_hidden <= 0:
            raise ValueError("rnn_hidden must be positive")


def _bracket(times: np.ndarray, queries: np.ndarray):
    """Left bracket index per query, clamped into [0, n-2]; counts clamps."""
    if len(times) == 0:
        raise ValueError("cannot interpolate an empty sequence")
    n_clamped = int(np.sum((queries < times[0]) | (queries > times[-1])))
    if len(times) == 1:
        return np.zeros(len(queries), dtype=int), n_clamped, True
    left = np.searchsorted(times, queries, side="right") - 1
    return np.clip(left, 0, len(times) - 2), n_clamped, False


def linear_interp(times, values, queries):
    """Linearly interpolate values (N, M) at query times; returns (out, n_clamped).

    Each query inside [t_0, t_N] uses its bracketing pair; queries outside
    clamp to the nearest sample.
    """
    times = np.asarray(times, dtype=np.float64)
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    queries = np.asarray(queries, dtype=np.float64)
    left, n_clamped, degenerate = _bracket(times, queries)
    if degenerate:
        return np.repeat(values, len(queries), axis=0), n_clamped
    t0, t1 = times[left], times[left + 1]
    frac = np.clip((queries - t0) / (t1 - t0), 0.0, 1.0)
    out = values[left] + frac[:, None] * (values[left + 1] - values[left])
    return out, n_clamped


def nearest_interp(times, values, queries):
    """Nearest-sample interpolation; exact ties pick the left sample."""
    times = np.asarray(times, dtype=np.float64)
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    queries = np.asarray(queries, dtype=np.float64)
    left, n_clamped, degenerate = _bracket(times, queries)
    if degenerate:
        return np.repeat(values, len(queries), axis=0), n_clamped
    d_left = queries - times[left]
    d_right = times[left + 1] - queries
    pick = np.where(d_left <= d_right, left, left + 1)
    return values[pick], n_clamped


def rnn_decay_step(cell: nn.Module, h_prev: torch.Tensor, dt, x: torch.Tensor) -> torch.Tensor:
    """h = cell(h_prev * exp(-dt), x); dt must be nonnegative."""
    dt = torch.as_tensor(dt, dtype=h_prev.dtype, device=h_prev.device)
    if bool((dt < 0).any()):
        raise ValueError("time gap must be nonnegative")
    decay = torch.exp(-dt)
    if decay.dim() == h_prev.dim() - 1:
        decay = decay.unsqueeze(-1)
    return cell(h_prev * decay, x)


def rnn_delta_step(cell: nn.Module, h_prev: torch.Tensor, dt, x: torch.Tensor) -> torch.Tensor:
    """h = cell(h_prev, [x; dt]); the gap becomes one extra input feature."""
    dt = torch.as_tensor(dt, dtype=h_prev.dtype, device=h_prev.device)
    if bool((dt < 0).any()):
        raise ValueError("time gap must be nonnegative")
    dt_col = dt.expand(x.shape[:-1]).unsqueeze(-1) if dt.dim() < x.dim() else dt
    return cell(h_prev, torch.cat([x, dt_col], dim=-1))


class _Head(nn.Module):
    """Regression head: concatenated features -> 2-D coordinates."""

    def __init__(self, in_dim: int, hidden: tuple[int, int]):
        super().__init__()
        layers: list[nn.Module] = []
        last = in_dim
        for width in hidden:
            layers += [nn.Linear(last, width), nn.Tanh()]
            last = width
        layers.append(nn.Linear(last, 2))
        self.net = nn.Sequential(*layers)
        self.in_dim = in_dim

    def forward(self, x):
        return self.net(x)


def _band_streams(batch: WindowBatch, bands: str):
    streams = []
    if bands in ("csi", "both"):
        streams.append(("csi", batch.csi_t, batch.csi_v, batch.csi_mask))
    if bands in ("beam", "both"):
        streams.append(("beam", batch.beam_t, batch.beam_v, batch.beam_mask))
    return streams


class InterpFusionRegressor(nn.Module):
    """Interpolate streams to label times, concatenate, regress per time step."""

    def __init__(self, cfg: BaselineConfig, m_b: int, m_c: int):
        super().__init__()
        if cfg.method not in INTERP_METHODS:
            raise ValueError("InterpFusionRegressor needs an interpolation method")
        self.cfg = cfg
        self.m_b, self.m_c = m_b, m_c
        in_dim = {"csi": m_c, "beam": m_b, "both": m_b + m_c}[cfg.bands]
        self.head = _Head(in_dim, cfg.head_hidden)
        self.out_of_range_count = 0
        self.double()

    def _interp(self, batch: WindowBatch) -> torch.Tensor:
        fn = linear_interp if self.cfg.method == "linear_int" else nearest_interp
        feats = []
        for _, t, v, mask in _band_streams(batch, self.cfg.bands):
            per_band = []
            for i in range(batch.size):
                n = int(mask[i].sum())
                out, clamped = fn(t[i, :n].numpy(), v[i, :n].numpy(),
                                  batch.label_t[i].numpy())
                self.out_of_range_count += clamped
                per_band.append(out)
            feats.append(torch.as_tensor(np.stack(per_band), dtype=torch.float64))
        return torch.cat(feats, dim=-1)

    def forward(self, batch: WindowBatch) -> torch.Tensor:
        return self.head(self._interp(batch))

    def compute_loss(self, batch: WindowBatch, weights=None, eps_b=None, eps_c=None):
        pred = self(batch)
        per_window = ((batch.label_xy - pred).abs().sum(-1) * batch.label_mask).sum(-1)
        return per_window.mean(), {"traj": float(per_window.detach().mean())}

    @torch.no_grad()
    def predict_trajectory(self, batch: WindowBatch) -> torch.Tensor:
        return self(batch)


class RnnFusionRegressor(nn.Module):
    """Per-band recurrent encoding along native times, fused at label times.

    Hidden states start at zero at the window origin; the gap for the first
    observation is measured from time 0.  Label times preceding a band's
    first observation propagate that band's initial (zero) hidden state.
    """

    def __init__(self, cfg: BaselineConfig, m_b: int, m_c: int):
        super().__init__()
        if cfg.method not in RNN_METHODS:
            raise ValueError("RnnFusionRegressor needs an RNN method")
        self.cfg = cfg
        self.m_b, self.m_c = m_b, m_c
        self.variant = cfg.method
        extra = 1 if self.variant == "rnn_delta" else 0
        h = cfg.rnn_hidden
        self.cells = nn.ModuleDict()
        in_dims = {"beam": m_b, "csi": m_c}
        self.band_names = [b for b in ("csi", "beam") if cfg.bands in (b, "both")]
        for name in self.band_names:
            self.cells[name] = GruCell(in_dims[name] + extra, h)
        self.head = _Head(h * len(self.band_names), cfg.head_hidden)
        self.double()

    def _step(self, name: str, h: torch.Tensor, dt: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        if self.variant == "rnn_decay":
            return rnn_decay_step(self.cells[name], h, dt, x)
        return rnn_delta_step(self.cells[name], h, dt, x)

    def _encode_band(self, name: str, t: torch.Tensor, v: torch.Tensor, mask: torch.Tensor):
        """Hidden states after each observation; (B, N, H) with masked carry."""
        b, n, _ = v.shape
        h = v.new_zeros(b, self.cfg.rnn_hidden)
        t_prev = v.new_zeros(b)
        states = []
        for k in range(n):
            live = mask[:, k].unsqueeze(-1)
            dt = (t[:, k] - t_prev).clamp(min=0.0)
            h_new = self._step(name, h, dt, v[:, k])
            h = live * h_new + (1 - live) * h
            t_prev = torch.where(mask[:, k] > 0, t[:, k], t_prev)
            states.append(h)
        return torch.stack(states, dim=1), t_prev

    def forward(self, batch: WindowBatch) -> torch.Tensor:
        fused = []
        for name, t, v, mask in _band_streams(batch, self.cfg.bands):
            states, _ = self._encode_band(name, t, v, mask)
            b, n_q = batch.label_t.shape
            # most recent observation at or before each label time
            idx = torch.searchsorted(t.contiguous(), batch.label_t.contiguous(), right=True) - 1
            rows = torch.arange(b).unsqueeze(-1)
            has_prev = idx >= 0
            idx_c = idx.clamp(min=0)
            h_prev = states[rows, idx_c]
            h_prev = torch.where(has_prev.unsqueeze(-1), h_prev, torch.zeros_like(h_prev))
            t_prev = torch.where(has_prev, t[rows, idx_c], torch.zeros_like(batch.label_t))
            gap = (batch.label_t - t_prev).clamp(min=0.0)
            zero_input = v.new_zeros(b, n_q, v.shape[-1])
            h_label = self._step(name, h_prev.reshape(b * n_q, -1),
                                 gap.reshape(b * n_q), zero_input.reshape(b * n_q, -1))
            fused.append(h_label.reshape(b, n_q, -1))
        return self.head(torch.cat(fused, dim=-1))

    def compute_loss(self, batch: WindowBatch, weights=None, eps_b=None, eps_c=None):
        pred = self(batch)
        per_window = ((batch.label_xy - pred).abs().sum(-1) * batch.label_mask).sum(-1)
        return per_window.mean(), {"traj": float(per_window.detach().mean())}

    @torch.no_grad()
    def predict_trajectory(self, batch: WindowBatch) -> torch.Tensor:
        return self(batch)


def make_baseline(cfg: BaselineConfig, m_b: int, m_c: int) -> nn.Module:
    if cfg.method in INTERP_METHODS:
        return InterpFusionRegressor(cfg, m_b, m_c)
    return RnnFusionRegressor(cfg, m_b, m_c)
