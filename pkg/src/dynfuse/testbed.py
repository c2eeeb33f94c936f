"""Synthetic multi-band measurement testbed.

Generates a rectangular-track trajectory and asynchronous measurement
streams that mimic the target statistics: CSI embeddings at roughly 4-6
frames per second with jitter, beam SNR at roughly 1 irregular frame per
second (gamma inter-arrivals), and ground-truth labels on an exact 10 Hz
grid.  With all noise scales at zero every measurement is a deterministic
function of position, so the dataset is learnable in principle.

Beam SNR values are von-Mises-shaped directional lobes minus log-distance
path loss; CSI embeddings are random Fourier features of position, whose
smoothness (Lipschitz bound) follows from the feature frequencies.  An
optional raw-CSI channel synthesizes multipath frequency responses with an
injected sampling-time-offset ramp and a per-packet random phase, written
to an .npz sidecar so the calibration frontend can be exercised end to end.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_model import (
    BeamSnrFrame,
    Coordinate,
    CsiEmbedding,
    DatasetConfig,
    RawCsiFrame,
    window_sequences,
    write_container,
)

__all__ = [
    "TrackSpec",
    "SensorModel",
    "SamplingModel",
    "RawCsiModel",
    "BuildResult",
    "make_trajectory",
    "gen_trajectory",
    "sample_times",
    "render_beam_snr",
    "render_csi_embedding",
    "render_raw_csi",
    "build_dataset",
    "load_scenario",
    "perimeter_regions",
]

_SPEED_OF_LIGHT = 299_792_458.0


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


# stream ids for per-purpose RNG substreams
_S_JITTER, _S_CSI_TIMES, _S_BEAM_TIMES, _S_BEAM_NOISE, _S_CSI_NOISE, _S_RAW = range(6)


@dataclass(frozen=True)
class TrackSpec:
    """Rectangular track traversed at constant speed with lateral jitter."""

    corner_min: tuple[float, float] = (0.5, 0.5)
    corner_max: tuple[float, float] = (6.5, 4.5)
    speed: float = 0.5
    lap_jitter_std: float = 0.05
    ap_position: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (self.corner_max[0] > self.corner_min[0] and self.corner_max[1] > self.corner_min[1]):
            raise ValueError("rectangle corners are degenerate")
        if self.speed <= 0:
            raise ValueError("speed must be positive")
        if self.lap_jitter_std < 0:
            raise ValueError("jitter std must be nonnegative")

    @property
    def perimeter(self) -> float:
        w = self.corner_max[0] - self.corner_min[0]
        h = self.corner_max[1] - self.corner_min[1]
        return 2 * (w + h)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrackSpec":
        d = dict(d)
        for k in ("corner_min", "corner_max", "ap_position"):
            d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class SensorModel:
    """Measurement maps: directional beam lobes and a random Fourier CSI map."""

    beam_directions: np.ndarray  # (m_b, 2) unit vectors
    beam_width: float            # radians; lobe concentration = 1 / width^2
    peak_gain_db: float
    path_loss_exponent: float
    beam_noise_std_db: float
    csi_weights: np.ndarray      # (m_c, 2) feature frequencies (rad/m)
    csi_phases: np.ndarray       # (m_c,)
    csi_amplitude: float
    csi_noise_std: float

    def __post_init__(self):
        norms = np.linalg.norm(self.beam_directions, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("beam direction vectors must be unit length")
        if self.beam_width <= 0:
            raise ValueError("beam width must be positive")
        if self.beam_noise_std_db < 0 or self.csi_noise_std < 0:
            raise ValueError("noise scales must be nonnegative")

    @property
    def m_b(self) -> int:
        return self.beam_directions.shape[0]

    @property
    def m_c(self) -> int:
        return self.csi_weights.shape[0]

    def lipschitz_bound(self) -> float:
        """Spectral-norm bound: |c(x) - c(y)| <= L |x - y| on the arena."""
        return self.csi_amplitude * float(np.linalg.svd(self.csi_weights, compute_uv=False)[0])

    @classmethod
    def default(cls, m_b: int = 36, m_c: int = 36, seed: int = 0,
                beam_width: float = 0.35, peak_gain_db: float = 30.0,
                path_loss_exponent: float = 2.0, beam_noise_std_db: float = 2.0,
                csi_feature_scale: float = 2.0, csi_amplitude: float = 1.0,
                csi_noise_std: float = 0.1) -> "SensorModel":
        angles = 2 * np.pi * np.arange(m_b) / m_b
        dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        rng = np.random.default_rng(seed)
        weights = rng.normal(scale=csi_feature_scale, size=(m_c, 2))
        phases = rng.uniform(0, 2 * np.pi, size=m_c)
        return cls(dirs, beam_width, peak_gain_db, path_loss_exponent,
                   beam_noise_std_db, weights, phases, csi_amplitude, csi_noise_std)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("beam_directions", "csi_weights", "csi_phases"):
            d[k] = d[k].tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SensorModel":
        d = dict(d)
        for k in ("beam_directions", "csi_weights", "csi_phases"):
            d[k] = np.asarray(d[k])
        return cls(**d)


@dataclass(frozen=True)
class SamplingModel:
    """Arrival processes per stream."""

    csi_rate_hz: float = 5.0
    csi_jitter: float = 0.2          # fractional std of the CSI inter-arrival
    beam_gamma_shape: float = 4.0
    beam_gamma_scale: float = 0.25   # mean beam inter-arrival = shape * scale
    label_rate_hz: float = 10.0

    def __post_init__(self):
        if self.csi_rate_hz <= 0 or self.label_rate_hz <= 0:
            raise ValueError("rates must be positive")
        if self.beam_gamma_shape <= 0 or self.beam_gamma_scale <= 0:
            raise ValueError("gamma parameters must be positive")
        if self.csi_jitter < 0:
            raise ValueError("jitter must be nonnegative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SamplingModel":
        return cls(**d)


def make_trajectory(spec: TrackSpec, seed: int):
    """Continuous trajectory t -> (x, y): constant-speed perimeter traversal
    plus smooth lateral jitter (sum of random low-frequency sinusoids)."""
    x0, y0 = spec.corner_min
    x1, y1 = spec.corner_max
    w, h = x1 - x0, y1 - y0
    edges = np.array([w, h, w, h])
    cum = np.concatenate([[0.0], np.cumsum(edges)])
    perimeter = spec.perimeter

    rng = _rng(seed, _S_JITTER)
    n_modes = 4
    freqs = rng.uniform(2 * np.pi * 0.05, 2 * np.pi * 0.3, size=n_modes)
    phases = rng.uniform(0, 2 * np.pi, size=n_modes)
    amp = np.sqrt(2.0 / n_modes)

    def position(times):
        times = np.atleast_1d(np.asarray(times, dtype=np.float64))
        s = (spec.speed * times) % perimeter
        edge = np.minimum(np.searchsorted(cum, s, side="right") - 1, 3)
        u = s - cum[edge]
        base = np.empty((len(times), 2))
        normal = np.empty((len(times), 2))
        for e, (bx, by, dx, dy, nx, ny) in enumerate((
            (x0, y0, 1.0, 0.0, 0.0, -1.0),
            (x1, y0, 0.0, 1.0, 1.0, 0.0),
            (x1, y1, -1.0, 0.0, 0.0, 1.0),
            (x0, y1, 0.0, -1.0, -1.0, 0.0),
        )):
            m = edge == e
            base[m, 0] = bx + dx * u[m]
            base[m, 1] = by + dy * u[m]
            normal[m] = (nx, ny)
        if spec.lap_jitter_std > 0:
            offset = spec.lap_jitter_std * amp * np.sum(
                np.cos(np.outer(times, freqs) + phases), axis=1)
            base = base + offset[:, None] * normal
        return base

    return position


def gen_trajectory(spec: TrackSpec, duration: float, seed: int,
                   rate: float = 10.0) -> list[Coordinate]:
    """Ground-truth coordinates on an exact `rate` Hz grid."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    times = np.arange(0.0, duration, 1.0 / rate)
    xy = make_trajectory(spec, seed)(times)
    return [Coordinate(float(t), p) for t, p in zip(times, xy)]


def sample_times(model: SamplingModel, duration: float, seed: int) -> dict[str, np.ndarray]:
    """Strictly increasing CSI and beam timestamps over [0, duration)."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    rng_c = _rng(seed, _S_CSI_TIMES)
    n_est = int(duration * model.csi_rate_hz * 2) + 16
    base = 1.0 / model.csi_rate_hz
    gaps = base * np.clip(1.0 + model.csi_jitter * rng_c.standard_normal(n_est), 0.3, 3.0)
    csi = np.cumsum(gaps)
    csi = csi[csi < duration]

    rng_b = _rng(seed, _S_BEAM_TIMES)
    mean_gap = model.beam_gamma_shape * model.beam_gamma_scale
    n_est = int(duration / mean_gap * 2) + 16
    gaps = rng_b.gamma(model.beam_gamma_shape, model.beam_gamma_scale, size=n_est)
    beam = np.cumsum(gaps)
    beam = beam[beam < duration]
    return {"csi": csi, "beam": beam}


def render_beam_snr(positions: np.ndarray, model: SensorModel, spec: TrackSpec,
                    seed: int = 0) -> np.ndarray:
    """Per-beam SNR (dB): directional lobe gain minus log-distance path loss.

    value_m = peak * exp(kappa * (cos(bearing - mu_m) - 1)) - 10 * gamma * log10(dist) + noise
    """
    positions = np.atleast_2d(positions)
    delta = positions - np.asarray(spec.ap_position)
    dist = np.linalg.norm(delta, axis=1)
    if np.any(dist < 1e-9):
        raise ValueError("position coincides with the access point; range is zero")
    bearing = np.arctan2(delta[:, 1], delta[:, 0])
    beam_angles = np.arctan2(model.beam_directions[:, 1], model.beam_directions[:, 0])
    kappa = 1.0 / model.beam_width ** 2
    gains = model.peak_gain_db * np.exp(
        kappa * (np.cos(bearing[:, None] - beam_angles[None, :]) - 1.0))
    path_loss = 10.0 * model.path_loss_exponent * np.log10(dist)
    values = gains - path_loss[:, None]
    if model.beam_noise_std_db > 0:
        values = values + model.beam_noise_std_db * _rng(seed, _S_BEAM_NOISE).standard_normal(values.shape)
    return values


def render_csi_embedding(positions: np.ndarray, model: SensorModel,
                         seed: int = 0) -> np.ndarray:
    """Random-Fourier-feature embedding of position plus optional noise."""
    positions = np.atleast_2d(positions)
    feats = model.csi_amplitude * np.cos(positions @ model.csi_weights.T + model.csi_phases)
    if model.csi_noise_std > 0:
        feats = feats + model.csi_noise_std * _rng(seed, _S_CSI_NOISE).standard_normal(feats.shape)
    return feats


@dataclass(frozen=True)
class RawCsiModel:
    """Multipath raw-CSI synthesis with injected STO and packet phase.

    Each path contributes gain * signature(i, j) * exp(-2j*pi*f_k*delay);
    the injected sampling offset adds a +2*pi*f_delta*(k-1)*tau phase ramp
    (the sign convention the calibration fit estimates), and the per-packet
    phase rotates the whole frame.
    """

    path_detours: tuple[float, ...] = (0.0, 3.0, 7.5)   # extra meters per path
    path_gains: tuple[float, ...] = (1.0, 0.4, 0.2)
    sto_range: float = 5e-8                              # tau ~ U(0, sto_range)
    packet_phase: bool = True
    noise_std: float = 0.01

    def __post_init__(self):
        if len(self.path_detours) != len(self.path_gains):
            raise ValueError("each path needs a detour and a gain")
        if self.sto_range < 0 or self.noise_std < 0:
            raise ValueError("sto_range and noise_std must be nonnegative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RawCsiModel":
        d = dict(d)
        d["path_detours"] = tuple(d["path_detours"])
        d["path_gains"] = tuple(d["path_gains"])
        return cls(**d)


def render_raw_csi(positions: np.ndarray, times: np.ndarray, model: RawCsiModel,
                   config: DatasetConfig, spec: TrackSpec, seed: int = 0,
                   sto_values: np.ndarray | None = None):
    """Synthesize raw frames at the given positions; returns (frames, taus).

    Per-frame randomness (STO draw, packet phase, noise) comes from streams
    independent of each other, so re-rendering with `sto_values` of zeros
    differs from the default render only by the phase ramps.
    """
    positions = np.atleast_2d(positions)
    n = len(positions)
    rng = _rng(seed, _S_RAW)
    sig_rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    n_paths = len(model.path_detours)
    signatures = np.exp(1j * sig_rng.uniform(0, 2 * np.pi,
                                             size=(n_paths, config.n_tx, config.n_rx)))
    taus = rng.uniform(0.0, model.sto_range, size=n) if sto_values is None \
        else np.asarray(sto_values, dtype=np.float64)
    phases = rng.uniform(0, 2 * np.pi, size=n) if model.packet_phase else np.zeros(n)
    noise_rng = np.random.default_rng(np.random.SeedSequence([seed, 102]))

    k = np.arange(config.n_s)
    f_k = config.f_delta * k
    dist = np.linalg.norm(positions - np.asarray(spec.ap_position), axis=1)
    frames = []
    for i in range(n):
        tensor = np.zeros((config.n_tx, config.n_rx, config.n_s), dtype=np.complex128)
        for p in range(n_paths):
            delay = (dist[i] + model.path_detours[p]) / _SPEED_OF_LIGHT
            tensor += (model.path_gains[p] * signatures[p][:, :, None]
                       * np.exp(-2j * np.pi * f_k * delay)[None, None, :])
        if model.noise_std > 0:
            tensor = tensor + model.noise_std * (
                noise_rng.standard_normal(tensor.shape)
                + 1j * noise_rng.standard_normal(tensor.shape))
        # receiver-side effects rotate the whole received signal, noise included
        ramp = np.exp(2j * np.pi * config.f_delta * k * taus[i])[None, None, :]
        tensor = tensor * ramp * np.exp(1j * phases[i])
        frames.append(RawCsiFrame(float(times[i]), tensor))
    return frames, taus


@dataclass
class BuildResult:
    container_path: Path
    scenario_path: Path
    raw_path: Path | None
    n_windows: int
    n_dropped: int
    n_frames: dict[str, int]


def build_dataset(track: TrackSpec, sensors: SensorModel, sampling: SamplingModel,
                  duration: float, seed: int, out_dir: str | Path,
                  config: DatasetConfig | None = None,
                  raw_model: RawCsiModel | None = None,
                  name: str = "full") -> BuildResult:
    """Render a full synthetic dataset and write the container + scenario.

    Writes `<name>.jsonl` (dataset container), `scenario.json`, and, when a
    raw model is given, `<name>.raw.npz` holding the raw complex frames with
    their timestamps and injected STO values.
    """
    if config is None:
        config = DatasetConfig(m_b=sensors.m_b, m_c=sensors.m_c,
                               label_rate=sampling.label_rate_hz)
    if config.m_b != sensors.m_b or config.m_c != sensors.m_c:
        raise ValueError("sensor model dimensions do not match the dataset config")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    trajectory = make_trajectory(track, seed)
    labels = gen_trajectory(track, duration, seed, rate=sampling.label_rate_hz)
    stamps = sample_times(sampling, duration, seed)
    csi_pos = trajectory(stamps["csi"])
    beam_pos = trajectory(stamps["beam"])
    beam_vals = render_beam_snr(beam_pos, sensors, track, seed)
    csi_vals = render_csi_embedding(csi_pos, sensors, seed)
    beam = [BeamSnrFrame(float(t), v) for t, v in zip(stamps["beam"], beam_vals)]
    csi = [CsiEmbedding(float(t), v) for t, v in zip(stamps["csi"], csi_vals)]

    container_path = out_dir / f"{name}.jsonl"
    write_container(container_path, beam, csi, labels, config,
                    t_origin=0.0, window_step=config.window_span)

    raw_path = None
    if raw_model is not None:
        frames, taus = render_raw_csi(csi_pos, stamps["csi"], raw_model, config, track, seed)
        raw_path = out_dir / f"{name}.raw.npz"
        np.savez(raw_path,
                 t=stamps["csi"],
                 tensor=np.stack([f.tensor for f in frames]),
                 sto=taus)

    scenario = {
        "track": track.to_dict(),
        "sensors": sensors.to_dict(),
        "sampling": sampling.to_dict(),
        "raw_model": raw_model.to_dict() if raw_model is not None else None,
        "duration": duration,
        "seed": seed,
        "config": config.to_dict(),
    }
    scenario_path = out_dir / "scenario.json"
    scenario_path.write_text(json.dumps(scenario, indent=2))

    windowed = window_sequences(beam, csi, labels, config.window_span,
                                config.window_span, t_start=0.0, t_end=duration)
    return BuildResult(container_path, scenario_path, raw_path,
                       len(windowed.windows), windowed.n_dropped,
                       {"beam": len(beam), "csi": len(csi), "label": len(labels)})


def load_scenario(path: str | Path) -> dict:
    """Parse scenario.json back into spec objects."""
    raw = json.loads(Path(path).read_text())
    return {
        "track": TrackSpec.from_dict(raw["track"]),
        "sensors": SensorModel.from_dict(raw["sensors"]),
        "sampling": SamplingModel.from_dict(raw["sampling"]),
        "raw_model": RawCsiModel.from_dict(raw["raw_model"]) if raw.get("raw_model") else None,
        "duration": raw["duration"],
        "seed": raw["seed"],
        "config": DatasetConfig.from_dict(raw["config"]),
    }


def perimeter_regions(spec: TrackSpec, n_regions: int = 8):
    """Assign coordinates to n equal arclength segments of the track.

    Returns a callable mapping (N, 2) coordinates to region ids in
    [0, n_regions); points are projected to the nearest perimeter point.
    """
    x0, y0 = spec.corner_min
    x1, y1 = spec.corner_max
    w, h = x1 - x0, y1 - y0
    cum = np.concatenate([[0.0], np.cumsum([w, h, w, h])])
    perimeter = spec.perimeter

    def region_of(xy: np.ndarray) -> np.ndarray:
        xy = np.atleast_2d(xy)
        x = np.clip(xy[:, 0], x0, x1)
        y = np.clip(xy[:, 1], y0, y1)
        # arclength of the projection onto each edge, pick the closest edge
        candidates = np.stack([
            cum[0] + (x - x0),
            cum[1] + (y - y0),
            cum[2] + (x1 - x),
            cum[3] + (y1 - y),
        ])
        dists = np.stack([
            np.abs(xy[:, 1] - y0),
            np.abs(xy[:, 0] - x1),
            np.abs(xy[:, 1] - y1),
            np.abs(xy[:, 0] - x0),
        ])
        s = candidates[np.argmin(dists, axis=0), np.arange(len(x))]
        return np.minimum((s / perimeter * n_regions).astype(int), n_regions - 1)

    return region_of
