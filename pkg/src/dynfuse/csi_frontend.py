"""Raw CSI calibration and embedding.

Raw frames carry two nuisance components: a linear phase ramp across
subcarriers from the receiver sampling-time offset, and a random per-packet
phase common to all antennas.  Calibration removes the ramp by a joint
least-squares line fit of the unwrapped phase per transmit antenna and
cancels the packet phase by conjugate multiplication of adjacent receive
antennas.  The calibrated tensor is split into (real, imag, phase,
magnitude) columns and compressed to a fixed-length embedding by a
pretrained convolutional autoencoder.

Phase convention: the phase column lies in (-pi, pi].  The phase-corrected
intermediate keeps magnitude and phase as separate arrays so that the
magnitude spectrum passes through calibration untouched.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data_model import RawCsiFrame

__all__ = [
    "CalibrationFit",
    "PhaseCorrectedCsi",
    "CalibratedCsi",
    "RealCsiMatrix",
    "unwrap_phase",
    "fit_sto_line",
    "fit_frame",
    "remove_linear_phase",
    "conjugate_multiply",
    "complex_to_real",
    "calibrate_frame",
    "ConvAutoencoder",
    "CaePretrainError",
    "pretrain_cae",
    "cae_encode",
    "save_cae",
    "load_cae",
]


@dataclass(frozen=True)
class CalibrationFit:
    """Fitted phase-line parameters per transmit antenna for one frame."""

    tau_hat: np.ndarray   # (n_tx,) seconds
    beta_hat: np.ndarray  # (n_tx,) radians
    f_delta: float

    def __post_init__(self):
        if not (np.all(np.isfinite(self.tau_hat)) and np.all(np.isfinite(self.beta_hat))):
            raise ValueError("calibration fit parameters must be finite")


@dataclass(frozen=True)
class PhaseCorrectedCsi:
    """Magnitude (untouched) and STO-corrected unwrapped phase."""

    magnitude: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        if self.magnitude.shape != self.phase.shape:
            raise ValueError("magnitude and phase shapes must match")


@dataclass(frozen=True)
class CalibratedCsi:
    """Conjugate-multiplied tensor of shape (n_tx, n_rx - 1, n_sub)."""

    tensor: np.ndarray
    n_rx_original: int

    def __post_init__(self):
        if self.tensor.shape[1] != self.n_rx_original - 1:
            raise ValueError("calibrated tensor must have n_rx - 1 antenna pairs")


@dataclass(frozen=True)
class RealCsiMatrix:
    """Rows in (tx-major, rx-pair, subcarrier) order; columns (re, im, phase, mag)."""

    matrix: np.ndarray

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[1] != 4:
            raise ValueError("real CSI matrix must have four columns")
        if np.any(self.matrix[:, 3] < 0):
            raise ValueError("magnitude column must be nonnegative")
        ph = self.matrix[:, 2]
        if np.any(ph <= -np.pi) or np.any(ph > np.pi):
            raise ValueError("phase column must lie in (-pi, pi]")


def unwrap_phase(raw: RawCsiFrame) -> np.ndarray:
    """Unwrapped phase along the subcarrier axis; rejects zero magnitudes."""
    mags = np.abs(raw.tensor)
    if np.any(mags == 0):
        idx = tuple(int(v) for v in np.argwhere(mags == 0)[0])
        raise ValueError(f"zero-magnitude CSI entry at index {idx}; phase undefined")
    return np.unwrap(np.angle(raw.tensor), axis=-1)


def fit_sto_line(psi: np.ndarray, f_delta: float) -> tuple[float, float]:
    """Least-squares fit of psi(j, k) against 2*pi*f_delta*(k-1)*tau - beta.

    The fit is joint over receive antennas j and subcarriers k for one
    transmit antenna; psi has shape (n_rx, n_sub) with n_sub >= 2.
    """
    psi = np.asarray(psi, dtype=np.float64)
    if psi.ndim != 2 or psi.shape[1] < 2:
        raise ValueError("need a (n_rx, n_sub) phase matrix with at least 2 subcarriers")
    n_rx, n_s = psi.shape
    x = 2 * np.pi * f_delta * np.arange(n_s, dtype=np.float64)
    x_full = np.tile(x, n_rx)
    y_full = psi.reshape(-1)
    x_mean = x_full.mean()
    y_mean = y_full.mean()
    denom = np.sum((x_full - x_mean) ** 2)
    tau = float(np.sum((x_full - x_mean) * (y_full - y_mean)) / denom)
    beta = float(x_mean * tau - y_mean)
    return tau, beta


def fit_frame(raw: RawCsiFrame, f_delta: float) -> CalibrationFit:
    """Per-transmit-antenna STO line fits for one frame."""
    psi = unwrap_phase(raw)
    taus, betas = zip(*(fit_sto_line(psi[i], f_delta) for i in range(psi.shape[0])))
    return CalibrationFit(np.array(taus), np.array(betas), f_delta)


def remove_linear_phase(raw: RawCsiFrame, fit: CalibrationFit) -> PhaseCorrectedCsi:
    """Subtract the fitted ramp 2*pi*f_delta*(k-1)*tau_hat from the phase.

    Magnitudes pass through as |raw| exactly (no complex reconstruction).
    """
    psi = unwrap_phase(raw)
    n_s = psi.shape[-1]
    ramp = 2 * np.pi * fit.f_delta * np.arange(n_s)[None, None, :] * fit.tau_hat[:, None, None]
    return PhaseCorrectedCsi(magnitude=np.abs(raw.tensor), phase=psi - ramp)


def conjugate_multiply(corrected: PhaseCorrectedCsi) -> CalibratedCsi:
    """Products of adjacent receive antennas, one conjugated.

    out(i, j, k) = C(i, j, k) * conj(C(i, j+1, k)) in polar form, so any
    phase common to all antennas of the packet cancels exactly.
    """
    mag, phase = corrected.magnitude, corrected.phase
    n_rx = mag.shape[1]
    if n_rx < 2:
        raise ValueError("conjugate multiplication needs at least two receive antennas")
    out_mag = mag[:, :-1] * mag[:, 1:]
    out_phase = phase[:, :-1] - phase[:, 1:]
    return CalibratedCsi(out_mag * np.exp(1j * out_phase), n_rx_original=n_rx)


def complex_to_real(cal: CalibratedCsi) -> RealCsiMatrix:
    """Flatten (tx-major, rx-pair, subcarrier) and split into four columns."""
    flat = cal.tensor.reshape(-1)
    phase = np.angle(flat)
    phase[phase == -np.pi] = np.pi
    return RealCsiMatrix(np.stack(
        [flat.real, flat.imag, phase, np.abs(flat)], axis=1))


def calibrate_frame(raw: RawCsiFrame, f_delta: float) -> tuple[RealCsiMatrix, CalibrationFit]:
    """Full per-frame pipeline: fit, ramp removal, conjugate multiply, split."""
    fit = fit_frame(raw, f_delta)
    corrected = remove_linear_phase(raw, fit)
    return complex_to_real(conjugate_multiply(corrected)), fit


# --------------------------------------------------------------------------
# Convolutional autoencoder for embedding calibrated frames.


class CaePretrainError(RuntimeError):
    """Autoencoder pretraining diverged; carries diagnostics."""

    def __init__(self, message: str, epoch: int, last_loss: float):
        super().__init__(f"{message} (epoch {epoch}, last finite loss {last_loss:.6g})")
        self.epoch = epoch
        self.last_loss = last_loss


def _conv_out(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


class ConvAutoencoder(nn.Module):
    """Three 1-D conv layers + projection; mirrored transposed-conv decoder.

    Inputs are (batch, rows, 4) real matrices, treated as length-`rows`
    signals with 4 channels.  A per-column affine normalizer (fit during
    pretraining) is stored as buffers; encoding and reconstruction operate
    in normalized space.
    """

    KERNEL = 5
    STRIDE = 2
    PADDING = 2

    def __init__(self, rows: int, embed_dim: int = 36, channels: tuple[int, int, int] = (8, 16, 32),
                 mlp_hidden: int = 128):
        super().__init__()
        self.rows = rows
        self.embed_dim = embed_dim
        self.channels = tuple(channels)
        self.mlp_hidden = mlp_hidden

        lengths = [rows]
        for _ in channels:
            lengths.append(_conv_out(lengths[-1], self.KERNEL, self.STRIDE, self.PADDING))
        if lengths[-1] < 1:
            raise ValueError(f"{rows} rows is too short for three stride-2 convolutions")
        self._lengths = lengths
        chans = (4,) + self.channels
        self.conv = nn.Sequential()
        for a, b in zip(chans, chans[1:]):
            self.conv.append(nn.Conv1d(a, b, self.KERNEL, self.STRIDE, self.PADDING))
            self.conv.append(nn.ReLU())
        flat = self.channels[-1] * lengths[-1]
        self.project = nn.Linear(flat, embed_dim)
        self.expand = nn.Sequential(
            nn.Linear(embed_dim, mlp_hidden), nn.ReLU(), nn.Linear(mlp_hidden, flat))
        self.deconv = nn.Sequential()
        rev_chans = tuple(reversed(chans))
        for i, (a, b) in enumerate(zip(rev_chans, rev_chans[1:])):
            target = lengths[len(channels) - 1 - i]
            source = lengths[len(channels) - i]
            out_pad = target - ((source - 1) * self.STRIDE - 2 * self.PADDING + self.KERNEL)
            self.deconv.append(nn.ConvTranspose1d(a, b, self.KERNEL, self.STRIDE,
                                                  self.PADDING, output_padding=out_pad))
            if i < len(channels) - 1:
                self.deconv.append(nn.ReLU())
        self.register_buffer("col_mean", torch.zeros(4))
        self.register_buffer("col_scale", torch.ones(4))
        self.double()

    def set_normalizer(self, matrices: torch.Tensor) -> None:
        """Fit the per-column affine normalizer on (N, rows, 4) training data."""
        flat = matrices.reshape(-1, 4)
        self.col_mean.copy_(flat.mean(dim=0))
        scale = flat.std(dim=0)
        self.col_scale.copy_(torch.where(scale > 0, scale, torch.ones_like(scale)))

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.col_mean) / self.col_scale

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """(B, rows, 4) -> (B, embed_dim)."""
        if x.shape[-2:] != (self.rows, 4):
            raise ValueError(f"expected input of shape (*, {self.rows}, 4), got {tuple(x.shape)}")
        z = self.normalize(x).transpose(-1, -2)
        z = self.conv(z)
        return self.project(z.flatten(start_dim=-2))

    def decode(self, e: torch.Tensor) -> torch.Tensor:
        """(B, embed_dim) -> (B, rows, 4) in normalized space."""
        z = self.expand(e).reshape(*e.shape[:-1], self.channels[-1], self._lengths[-1])
        return self.deconv(z).transpose(-1, -2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))

    def manifest(self) -> dict:
        return {
            "rows": self.rows,
            "embed_dim": self.embed_dim,
            "channels": list(self.channels),
            "mlp_hidden": self.mlp_hidden,
            "layer_shapes": {k: list(v.shape) for k, v in self.state_dict().items()},
        }


def pretrain_cae(matrices, rows: int | None = None, embed_dim: int = 36, epochs: int = 200,
                 lr: float = 1e-3, batch_size: int = 32, holdout_fraction: float = 0.2,
                 seed: int = 0, channels: tuple[int, int, int] = (8, 16, 32)):
    """Train the autoencoder on real CSI matrices from the training split.

    Returns (frozen model, history).  History records the held-out
    reconstruction MSE at initialization and per epoch; training aborts with
    CaePretrainError if the loss turns non-finite.
    """
    data = np.stack([m.matrix if isinstance(m, RealCsiMatrix) else np.asarray(m)
                     for m in matrices])
    if rows is None:
        rows = data.shape[1]
    torch.manual_seed(seed)
    model = ConvAutoencoder(rows, embed_dim, channels)
    x = torch.as_tensor(data, dtype=torch.float64)
    n_hold = max(1, int(round(holdout_fraction * len(x))))
    perm = torch.randperm(len(x), generator=torch.Generator().manual_seed(seed))
    hold, train = x[perm[:n_hold]], x[perm[n_hold:]]
    if len(train) == 0:
        train = hold
    model.set_normalizer(train)

    def holdout_mse() -> float:
        with torch.no_grad():
            target = model.normalize(hold)
            return float(((model(hold) - target) ** 2).mean())

    history = {"init_holdout_mse": holdout_mse(), "holdout_mse": []}
    optim = torch.optim.Adam(model.parameters(), lr=lr)
    last_ok = float("inf")
    for epoch in range(epochs):
        order = torch.randperm(len(train), generator=torch.Generator().manual_seed(seed + 1 + epoch))
        for i in range(0, len(train), batch_size):
            xb = train[order[i:i + batch_size]]
            loss = ((model(xb) - model.normalize(xb)) ** 2).mean()
            if not torch.isfinite(loss):
                raise CaePretrainError("reconstruction loss is not finite", epoch, last_ok)
            optim.zero_grad()
            loss.backward()
            optim.step()
            last_ok = float(loss.detach())
        history["holdout_mse"].append(holdout_mse())
    history["final_holdout_mse"] = history["holdout_mse"][-1]
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model, history


def cae_encode(matrix, model: ConvAutoencoder) -> np.ndarray:
    """Deterministic embedding of one real CSI matrix; (embed_dim,) vector."""
    arr = matrix.matrix if isinstance(matrix, RealCsiMatrix) else np.asarray(matrix)
    with torch.no_grad():
        out = model.encode(torch.as_tensor(arr, dtype=torch.float64).unsqueeze(0))
    return out[0].numpy()


def save_cae(prefix: str | Path, model: ConvAutoencoder, train_config: dict | None = None) -> None:
    """Checkpoint = <prefix>.npz tensor blob + <prefix>.json manifest."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.numpy() for k, v in model.state_dict().items()}
    np.savez(prefix.with_suffix(".npz"), **arrays)
    manifest = model.manifest()
    manifest["train_config"] = train_config or {}
    manifest["config_hash"] = hashlib.sha256(
        json.dumps(manifest["train_config"], sort_keys=True).encode()).hexdigest()
    prefix.with_suffix(".json").write_text(json.dumps(manifest, indent=2))


def load_cae(prefix: str | Path) -> ConvAutoencoder:
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    model = ConvAutoencoder(manifest["rows"], manifest["embed_dim"],
                            tuple(manifest["channels"]), manifest["mlp_hidden"])
    blob = np.load(prefix.with_suffix(".npz"))
    model.load_state_dict({k: torch.as_tensor(blob[k]) for k in blob.files})
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model
