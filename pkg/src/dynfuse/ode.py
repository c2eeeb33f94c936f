"""Differentiable ODE solvers shared by the encoders and the latent dynamics.

Two methods are provided: a fixed-step Euler scheme and the adaptive
Dormand-Prince 5(4) pair with its standard quartic dense-output interpolant.
Both differentiate through their own solver steps (torch autograd); the
adaptive step-size control runs on detached tensors, so gradients are the
exact derivatives of the discrete solution for the accepted step sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

__all__ = [
    "SolverConfig",
    "OdeField",
    "IntegrationError",
    "integrate",
    "integrate_path",
    "integrate_many",
    "solve_dense",
    "integration_gradients",
]


class IntegrationError(RuntimeError):
    """Adaptive integration failed; carries the last accepted time."""

    def __init__(self, message: str, t_last: float):
        super().__init__(f"{message} (last accepted t={t_last:.6g})")
        self.t_last = t_last


@dataclass(frozen=True)
class SolverConfig:
    """Numerical integration settings.

    Euler uses equal substeps of size span/ceil(|span|/h), i.e. at most h,
    so integrating 0.2 with h=0.1 takes exactly two 0.1 steps.
    """

    method: str = "dopri5"
    h: float = 0.01
    rtol: float = 1e-5
    atol: float = 1e-7
    max_steps: int = 10_000

    def __post_init__(self) -> None:
        if self.method not in ("euler", "dopri5"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if self.h <= 0:
            raise ValueError("euler step h must be positive")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")


class OdeField(nn.Module):
    """Learnable vector field f(z, t) with time appended to the input."""

    def __init__(self, dim: int, hidden: int = 64, n_hidden: int = 1):
        super().__init__()
        layers: list[nn.Module] = [nn.Linear(dim + 1, hidden), nn.Tanh()]
        for _ in range(n_hidden - 1):
            layers += [nn.Linear(hidden, hidden), nn.Tanh()]
        layers.append(nn.Linear(hidden, dim))
        self.net = nn.Sequential(*layers)
        self.dim = dim

    def forward(self, z: torch.Tensor, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=z.dtype, device=z.device)
        if t.dim() == 0:
            t_col = t.expand(*z.shape[:-1], 1)
        elif t.shape == z.shape[:-1]:
            t_col = t.unsqueeze(-1)
        else:
            raise ValueError(f"time shape {tuple(t.shape)} does not broadcast to state {tuple(z.shape)}")
        return self.net(torch.cat([z, t_col], dim=-1))


# Dormand-Prince 5(4) tableau.
_C = (1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0)
_A = (
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
)
_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B_STAR = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b - bs for b, bs in zip(_B, _B_STAR))
# Dense-output coefficients for the quartic interpolant.
_D = (
    -12715105075 / 11282082432,
    0.0,
    87487479700 / 32700410799,
    -10690763975 / 1880347072,
    701980252875 / 199316789632,
    -1453857185 / 822651844,
    69997945 / 29380423,
)

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0


def _rms(x: torch.Tensor) -> float:
    return float(torch.sqrt(torch.mean(x * x)))


def _error_norm(err: torch.Tensor, y0: torch.Tensor, y1: torch.Tensor, rtol: float, atol: float) -> float:
    scale = atol + rtol * torch.maximum(y0.abs(), y1.abs())
    return _rms(err / scale)


def _initial_step(f, y0: torch.Tensor, t0: float, direction: float, span: float,
                  rtol: float, atol: float, f0: torch.Tensor) -> float:
    """Hairer-style starting step estimate (all detached)."""
    y0 = y0.detach()
    f0 = f0.detach()
    scale = atol + rtol * y0.abs()
    d0 = _rms(y0 / scale)
    d1 = _rms(f0 / scale)
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, span)
    with torch.no_grad():
        y1 = y0 + h0 * direction * f0
        f1 = f(y1, t0 + h0 * direction).detach()
    d2 = _rms((f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, span)


def _dopri5_step(f, y: torch.Tensor, t: float, h_signed: float, k1: torch.Tensor):
    """One Dormand-Prince step; returns (y1, k list incl. FSAL k7, error)."""
    ks = [k1]
    for ci, ai in zip(_C, _A):
        yi = y + h_signed * sum(a * k for a, k in zip(ai, ks))
        ks.append(f(yi, t + ci * h_signed))
    y1 = y + h_signed * sum(b * k for b, k in zip(_B[:-1], ks))
    ks.append(f(y1, t + h_signed))
    err = h_signed * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
    return y1, ks, err


class DenseSolution:
    """Continuous dopri5 solution over [t0, t1]; evaluates at arbitrary times.

    Coefficients follow the classical scheme: with theta in [0, 1] inside a
    step, y(theta) = c1 + theta*(c2 + (1-theta)*(c3 + theta*(c4 + (1-theta)*c5))).
    """

    def __init__(self, t0: float, t1: float, starts, ends, coeffs):
        self.t0 = t0
        self.t1 = t1
        self._starts = starts  # (S,) float tensor, integration order
        self._ends = ends
        self._coeffs = coeffs  # list of 5 tensors, each (S, B, D)

    def evaluate(self, times: torch.Tensor) -> torch.Tensor:
        """Evaluate at times of shape (B, T); returns (B, T, D)."""
        lo = min(self.t0, self.t1) - 1e-9
        hi = max(self.t0, self.t1) + 1e-9
        if float(times.min()) < lo or float(times.max()) > hi:
            raise ValueError(
                f"query times outside integration span [{self.t0:.6g}, {self.t1:.6g}]")
        forward = self.t1 >= self.t0
        ends = self._ends if forward else -self._ends
        q = times if forward else -times
        idx = torch.searchsorted(ends, q.contiguous(), right=False)
        idx = idx.clamp(max=len(ends) - 1)
        start = self._starts[idx]
        width = self._ends[idx] - start
        width = torch.where(width == 0, torch.ones_like(width), width)
        theta = ((times - start) / width).unsqueeze(-1).to(self._coeffs[0].dtype)
        b = torch.arange(times.shape[0], device=times.device).unsqueeze(-1)
        c1, c2, c3, c4, c5 = (c[idx, b] for c in self._coeffs)
        return c1 + theta * (c2 + (1 - theta) * (c3 + theta * (c4 + (1 - theta) * c5)))


def _dopri5_solve(f, z0: torch.Tensor, t0: float, t1: float, cfg: SolverConfig, dense: bool):
    """Core adaptive loop; z0 has shape (B, D). Returns (z(t1), DenseSolution | None)."""
    span = abs(t1 - t0)
    if span == 0.0:
        if not dense:
            return z0, None
        const = [z0, torch.zeros_like(z0), torch.zeros_like(z0), torch.zeros_like(z0), torch.zeros_like(z0)]
        sol = DenseSolution(t0, t1, torch.tensor([t0], dtype=torch.float64),
                            torch.tensor([t0], dtype=torch.float64),
                            [c.unsqueeze(0) for c in const])
        return z0, sol
    direction = 1.0 if t1 > t0 else -1.0
    y = z0
    t = t0
    k1 = f(y, t)
    h = _initial_step(f, y, t, direction, span, cfg.rtol, cfg.atol, k1)
    starts: list[float] = []
    ends: list[float] = []
    coeffs: list[list[torch.Tensor]] = [[], [], [], [], []]
    n_steps = 0
    while (t1 - t) * direction > 0:
        if n_steps >= cfg.max_steps:
            raise IntegrationError("maximum number of solver steps exceeded", t_last=t)
        n_steps += 1
        remaining = abs(t1 - t)
        is_last = h >= remaining
        h = min(h, remaining)
        if h < 1e-14 * max(1.0, abs(t)):
            raise IntegrationError("step size underflow", t_last=t)
        y1, ks, err = _dopri5_step(f, y, t, h * direction, k1)
        err_norm = _error_norm(err.detach(), y.detach(), y1.detach(), cfg.rtol, cfg.atol)
        if not math.isfinite(err_norm):
            h *= _MIN_FACTOR
            continue
        if err_norm <= 1.0:
            t_new = t1 if is_last else t + h * direction
            if dense:
                dy = y1 - y
                hs = h * direction
                c3 = hs * ks[0] - dy
                c4 = dy - hs * ks[6] - c3
                c5 = hs * sum(d * k for d, k in zip(_D, ks) if d != 0.0)
                for buf, c in zip(coeffs, (y, dy, c3, c4, c5)):
                    buf.append(c)
                starts.append(t)
                ends.append(t_new)
            y = y1
            t = t_new
            k1 = ks[6]
            factor = _MAX_FACTOR if err_norm == 0.0 else min(_MAX_FACTOR, _SAFETY * err_norm ** -0.2)
        else:
            factor = max(_MIN_FACTOR, _SAFETY * err_norm ** -0.2)
        h *= factor
    if not dense:
        return y, None
    sol = DenseSolution(
        t0, t1,
        torch.tensor(starts, dtype=torch.float64),
        torch.tensor(ends, dtype=torch.float64),
        [torch.stack(buf) for buf in coeffs],
    )
    return y, sol


def _euler_integrate(f, z: torch.Tensor, t0: float, t1: float, h: float) -> torch.Tensor:
    span = t1 - t0
    if span == 0.0:
        return z
    n = max(1, math.ceil(abs(span) / h))
    step = span / n
    for k in range(n):
        z = z + step * f(z, t0 + k * step)
    return z


def _as_batched(z0: torch.Tensor):
    if z0.dim() == 1:
        return z0.unsqueeze(0), True
    if z0.dim() == 2:
        return z0, False
    raise ValueError("state must have shape (D,) or (B, D)")


def integrate(f, z0: torch.Tensor, t0: float, t1: float, cfg: SolverConfig) -> torch.Tensor:
    """Propagate z0 from t0 to t1 (t1 < t0 integrates backward)."""
    if t1 == t0:
        return z0
    if cfg.method == "euler":
        return _euler_integrate(f, z0, float(t0), float(t1), cfg.h)
    z, single = _as_batched(z0)
    out, _ = _dopri5_solve(f, z, float(t0), float(t1), cfg, dense=False)
    return out.squeeze(0) if single else out


def solve_dense(f, z0: torch.Tensor, t0: float, t1: float, cfg: SolverConfig) -> DenseSolution:
    """Adaptive dopri5 solve keeping the dense-output interpolant."""
    if cfg.method != "dopri5":
        raise ValueError("dense solutions require the dopri5 method")
    z, _ = _as_batched(z0)
    _, sol = _dopri5_solve(f, z, float(t0), float(t1), cfg, dense=True)
    return sol


def _check_times(times: torch.Tensor, t0: float) -> None:
    diffs = times[..., 1:] - times[..., :-1]
    if times.shape[-1] > 1 and float(diffs.min()) <= 0:
        raise ValueError("query times must be strictly increasing")
    if float(times[..., 0].min()) < t0 - 1e-9:
        raise ValueError(f"query times must not precede t0={t0}")


def _normalize_queries(z: torch.Tensor, single: bool, times) -> torch.Tensor:
    times = torch.as_tensor(times, dtype=torch.float64)
    if times.dim() == 0:
        times = times.reshape(1)
    if times.dim() == 1:
        return times.unsqueeze(0).expand(z.shape[0], -1)
    if times.dim() == 2 and not single and times.shape[0] == z.shape[0]:
        return times
    raise ValueError("times must be (T,) or (B, T) matching the state batch")


def integrate_many(f, z0: torch.Tensor, t0: float, query_sets, cfg: SolverConfig):
    """One continuous integration evaluated at several query tensors.

    Each query tensor is (T,) shared or (B, T) per element; values must lie
    in [t0, max over all queries] but rows need not be monotone (padded
    repeats are fine).  dopri5 reads values off its dense interpolant; Euler
    steps through the sorted union of all query times.  Returns one (B, T, D)
    tensor (or (T, D) for unbatched state) per query set.
    """
    z, single = _as_batched(z0)
    queries = [_normalize_queries(z, single, q) for q in query_sets]
    t_end = max(float(q.max()) for q in queries)
    if cfg.method == "dopri5":
        _, sol = _dopri5_solve(f, z, float(t0), max(t_end, float(t0)), cfg, dense=True)
        outs = [sol.evaluate(q) for q in queries]
    else:
        grid = torch.unique(torch.cat([q.reshape(-1) for q in queries])).sort().values
        states = []
        cur, t_prev = z, float(t0)
        for tg in grid.tolist():
            cur = _euler_integrate(f, cur, t_prev, tg, cfg.h) if tg > t_prev else cur
            states.append(cur)
            t_prev = tg
        stacked = torch.stack(states, dim=1)  # (B, G, D)
        b = torch.arange(z.shape[0]).unsqueeze(-1)
        outs = [stacked[b, torch.searchsorted(grid, q.contiguous())] for q in queries]
    return [o.squeeze(0) if single else o for o in outs]


def integrate_path(f, z0: torch.Tensor, t0: float, times, cfg: SolverConfig) -> torch.Tensor:
    """Evaluate the trajectory started at (t0, z0) at increasing query times.

    One continuous integration serves all queries.  z0 may be (D,) or
    (B, D); times may be shared (T,) or per-element (B, T).  Returns (T, D)
    or (B, T, D) accordingly.
    """
    z, single = _as_batched(z0)
    _check_times(_normalize_queries(z, single, times), float(t0))
    return integrate_many(f, z0, t0, [times], cfg)[0]


def integration_gradients(f: nn.Module, z0: torch.Tensor, t0: float, t1: float,
                          cfg: SolverConfig, upstream: torch.Tensor):
    """Gradients of <upstream, z(t1)> w.r.t. z0 and the field parameters."""
    z0_leaf = z0.detach().clone().requires_grad_(True)
    out = integrate(f, z0_leaf, t0, t1, cfg)
    named = [(n, p) for n, p in f.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad((out * upstream).sum(), [z0_leaf] + [p for _, p in named],
                                allow_unused=True)
    param_grads = {n: g for (n, _), g in zip(named, grads[1:])}
    return grads[0], param_grads
