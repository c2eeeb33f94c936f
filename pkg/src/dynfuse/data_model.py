"""Core measurement types, windowing, normalization, and split protocols.

A dataset is three asynchronous timestamped streams: beam-SNR vectors,
CSI-embedding vectors, and ground-truth coordinates.  Streams are grouped
into fixed-span measurement windows; window timestamps are normalized into
[0, 1]; measurement values are min-max scaled with statistics fit on the
training split only.  Three split protocols are provided: random over
non-overlapping windows, strictly chronological, and by held-out coordinate
region.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "BeamSnrFrame",
    "CsiEmbedding",
    "RawCsiFrame",
    "Coordinate",
    "MeasurementWindow",
    "DatasetConfig",
    "Region",
    "SplitSpec",
    "WindowingResult",
    "Scaler",
    "window_sequences",
    "normalize_window_times",
    "fit_measurement_scaler",
    "apply_scaler",
    "split_random",
    "split_temporal",
    "split_coordinate",
    "write_container",
    "read_container",
]


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class BeamSnrFrame:
    """One beam-training event: a vector of per-beam SNRs (dB) at time t."""

    t: float
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        _check_finite("beam SNR", self.values)


@dataclass(frozen=True)
class CsiEmbedding:
    """Compressed CSI measurement: a fixed-length real vector at time t."""

    t: float
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        _check_finite("CSI embedding", self.values)


@dataclass(frozen=True)
class RawCsiFrame:
    """Uncalibrated complex CSI tensor of shape (n_tx, n_rx, n_sub)."""

    t: float
    tensor: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "tensor", np.asarray(self.tensor, dtype=np.complex128))
        if self.tensor.ndim != 3:
            raise ValueError(f"raw CSI tensor must be 3-D, got shape {self.tensor.shape}")
        if np.any(np.isnan(self.tensor)):
            raise ValueError("raw CSI tensor contains NaN entries")


@dataclass(frozen=True)
class Coordinate:
    """Ground-truth 2-D position (meters) at time t."""

    t: float
    xy: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "xy", np.asarray(self.xy, dtype=np.float64).reshape(2))
        _check_finite("coordinate", self.xy)


@dataclass(frozen=True)
class DatasetConfig:
    """Static dataset dimensions and rates."""

    m_b: int = 36
    m_c: int = 36
    n_tx: int = 4
    n_rx: int = 2
    n_s: int = 234
    f_delta: float = 312_500.0  # subcarrier spacing, Hz
    window_span: float = 5.0
    label_rate: float = 10.0

    def __post_init__(self):
        for name in ("m_b", "m_c", "n_tx", "n_rx", "n_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.f_delta <= 0 or self.window_span <= 0 or self.label_rate <= 0:
            raise ValueError("f_delta, window_span, and label_rate must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        return cls(**d)


@dataclass(frozen=True)
class Region:
    """Axis-aligned box in meters; empty when any max does not exceed its min."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def contains(self, xy: np.ndarray) -> np.ndarray:
        xy = np.atleast_2d(xy)
        return (
            (xy[:, 0] >= self.x_min) & (xy[:, 0] <= self.x_max)
            & (xy[:, 1] >= self.y_min) & (xy[:, 1] <= self.y_max)
        )


@dataclass(frozen=True)
class SplitSpec:
    """Which split protocol to apply and its parameters."""

    kind: str
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    cutoff: float = 0.6
    region: Region | None = None
    train_step: float = 1.0
    test_step: float = 5.0

    def __post_init__(self):
        if self.kind not in ("random", "temporal", "coordinate"):
            raise ValueError(f"unknown split kind {self.kind!r}")
        if self.kind == "random":
            if abs(sum(self.ratios) - 1.0) > 1e-9:
                raise ValueError("split ratios must sum to 1")
            if any(r < 0 for r in self.ratios):
                raise ValueError("split ratios must be nonnegative")
        if self.kind == "temporal" and not 0.0 < self.cutoff < 1.0:
            raise ValueError("temporal cutoff fraction must lie in (0, 1)")
        if self.kind == "coordinate":
            if self.region is None:
                raise ValueError("coordinate split requires a region")
        if self.train_step <= 0 or self.test_step <= 0:
            raise ValueError("stepsizes must be positive")


@dataclass(frozen=True)
class MeasurementWindow:
    """One window: three per-stream frame lists plus timing metadata.

    `t_start` is the absolute window start in seconds; frame timestamps are
    absolute until `normalize_window_times` maps them into [0, 1].
    """

    beam: tuple[BeamSnrFrame, ...]
    csi: tuple[CsiEmbedding, ...]
    labels: tuple[Coordinate, ...]
    window_span: float
    t_start: float = 0.0
    normalized: bool = False
    window_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "beam", tuple(self.beam))
        object.__setattr__(self, "csi", tuple(self.csi))
        object.__setattr__(self, "labels", tuple(self.labels))
        if self.window_span <= 0:
            raise ValueError("window_span must be positive")
        if not (self.beam and self.csi and self.labels):
            raise ValueError("all three streams must be non-empty")
        for name in ("beam", "csi", "labels"):
            ts = [f.t for f in getattr(self, name)]
            if any(b <= a for a, b in zip(ts, ts[1:])):
                raise ValueError(f"{name} timestamps must be strictly increasing")
        if self.normalized:
            for name in ("beam", "csi", "labels"):
                ts = np.array([f.t for f in getattr(self, name)])
                if ts.min() < -1e-12 or ts.max() > 1 + 1e-12:
                    raise ValueError("normalized timestamps must lie in [0, 1]")

    def beam_times(self) -> np.ndarray:
        return np.array([f.t for f in self.beam])

    def csi_times(self) -> np.ndarray:
        return np.array([f.t for f in self.csi])

    def label_times(self) -> np.ndarray:
        return np.array([f.t for f in self.labels])

    def beam_values(self) -> np.ndarray:
        return np.stack([f.values for f in self.beam])

    def csi_values(self) -> np.ndarray:
        return np.stack([f.values for f in self.csi])

    def label_xy(self) -> np.ndarray:
        return np.stack([f.xy for f in self.labels])


@dataclass
class WindowingResult:
    windows: list[MeasurementWindow]
    n_dropped: int


def _check_sorted(name: str, frames: Sequence) -> None:
    ts = [f.t for f in frames]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValueError(f"{name} stream is not strictly increasing in time")


def window_sequences(
    beam: Sequence[BeamSnrFrame],
    csi: Sequence[CsiEmbedding],
    labels: Sequence[Coordinate],
    window_span: float,
    stepsize: float,
    t_start: float | None = None,
    t_end: float | None = None,
) -> WindowingResult:
    """Group the three streams into half-open [start, start+span) windows.

    Start times run t_start, t_start+step, ... while start+span <= t_end.
    By default t_start/t_end come from the data; pass the collection horizon
    explicitly when the last window should extend past the final frame time.
    Windows with any empty stream are dropped and counted.
    """
    if window_span <= 0 or stepsize <= 0:
        raise ValueError("window_span and stepsize must be positive")
    for name, frames in (("beam", beam), ("csi", csi), ("label", labels)):
        _check_sorted(name, frames)
    all_ts = [f.t for frames in (beam, csi, labels) for f in frames]
    if not all_ts:
        warnings.warn("window_sequences received no frames; returning no windows")
        return WindowingResult([], 0)
    lo = min(all_ts) if t_start is None else t_start
    hi = max(all_ts) if t_end is None else t_end

    beam_ts = np.array([f.t for f in beam])
    csi_ts = np.array([f.t for f in csi])
    label_ts = np.array([f.t for f in labels])

    windows: list[MeasurementWindow] = []
    dropped = 0
    k = 0
    wid = 0
    while lo + k * stepsize + window_span <= hi + 1e-9:
        start = lo + k * stepsize
        stop = start + window_span
        k += 1
        picks = []
        for frames, ts in ((beam, beam_ts), (csi, csi_ts), (labels, label_ts)):
            i0, i1 = np.searchsorted(ts, [start, stop], side="left")
            picks.append(frames[i0:i1])
        if any(len(p) == 0 for p in picks):
            dropped += 1
            continue
        windows.append(MeasurementWindow(
            beam=tuple(picks[0]), csi=tuple(picks[1]), labels=tuple(picks[2]),
            window_span=window_span, t_start=start, window_id=wid,
        ))
        wid += 1
    return WindowingResult(windows, dropped)


def normalize_window_times(w: MeasurementWindow) -> MeasurementWindow:
    """Map frame times to (t - t_start) / window_span; affine, order-preserving."""
    if w.window_span <= 0:
        raise ValueError("window_span must be positive")
    if w.normalized:
        return w

    def shift(frames):
        out = []
        for f in frames:
            tn = (f.t - w.t_start) / w.window_span
            if tn < -1e-12 or tn > 1 + 1e-12:
                raise ValueError(f"timestamp {f.t} outside window [{w.t_start}, {w.t_start + w.window_span}]")
            out.append(dataclasses.replace(f, t=min(max(tn, 0.0), 1.0)))
        return tuple(out)

    return dataclasses.replace(
        w, beam=shift(w.beam), csi=shift(w.csi), labels=shift(w.labels), normalized=True)


@dataclass
class Scaler:
    """Per-dimension min-max map onto [0, 1] for the two measurement streams.

    Fit on training windows only.  Application never clips: out-of-range
    values pass through scaled and are counted in `out_of_range_count`.
    Constant dimensions map to 0.5.
    """

    beam_min: np.ndarray
    beam_max: np.ndarray
    csi_min: np.ndarray
    csi_max: np.ndarray
    out_of_range_count: int = 0

    def _transform(self, values: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        span = hi - lo
        flat = span == 0
        safe = np.where(flat, 1.0, span)
        out = (values - lo) / safe
        out[..., flat] = 0.5
        return out

    def scale_beam(self, values: np.ndarray) -> np.ndarray:
        return self._transform(values, self.beam_min, self.beam_max)

    def scale_csi(self, values: np.ndarray) -> np.ndarray:
        return self._transform(values, self.csi_min, self.csi_max)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("beam_min", "beam_max", "csi_min", "csi_max")}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(**{k: np.asarray(d[k], dtype=np.float64)
                      for k in ("beam_min", "beam_max", "csi_min", "csi_max")})


def fit_measurement_scaler(train_windows: Iterable[MeasurementWindow]) -> Scaler:
    """Per-dimension min/max over the training windows' beam and CSI values."""
    beam = np.concatenate([w.beam_values() for w in train_windows])
    csi = np.concatenate([w.csi_values() for w in train_windows])
    scaler = Scaler(beam.min(0), beam.max(0), csi.min(0), csi.max(0))
    n_flat = int((scaler.beam_max == scaler.beam_min).sum() + (scaler.csi_max == scaler.csi_min).sum())
    if n_flat:
        warnings.warn(f"{n_flat} constant measurement dimension(s); mapping them to 0.5")
    return scaler


def apply_scaler(scaler: Scaler, w: MeasurementWindow) -> MeasurementWindow:
    """Return a copy of the window with beam/CSI values scaled (labels untouched)."""
    beam_scaled = scaler.scale_beam(w.beam_values())
    csi_scaled = scaler.scale_csi(w.csi_values())
    if (beam_scaled.min() < 0 or beam_scaled.max() > 1
            or csi_scaled.min() < 0 or csi_scaled.max() > 1):
        scaler.out_of_range_count += 1
    beam = tuple(dataclasses.replace(f, values=v) for f, v in zip(w.beam, beam_scaled))
    csi = tuple(dataclasses.replace(f, values=v) for f, v in zip(w.csi, csi_scaled))
    return dataclasses.replace(w, beam=beam, csi=csi)


def split_random(
    windows: Sequence[MeasurementWindow],
    ratios: tuple[float, float, float],
    seed: int,
) -> dict[str, list[MeasurementWindow]]:
    """Disjoint, exhaustive train/val/test partition; deterministic per seed.

    Sizes use largest-remainder rounding: floor each share, then hand the
    leftover windows to the splits with the largest fractional parts.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    n = len(windows)
    n_positive = sum(1 for r in ratios if r > 0)
    if n < n_positive:
        raise ValueError(f"cannot split {n} windows into {n_positive} non-empty parts")
    shares = [r * n for r in ratios]
    sizes = [int(np.floor(s)) for s in shares]
    remainders = [s - z for s, z in zip(shares, sizes)]
    for i in np.argsort(remainders)[::-1][: n - sum(sizes)]:
        sizes[int(i)] += 1
    order = np.random.default_rng(seed).permutation(n)
    out: dict[str, list[MeasurementWindow]] = {}
    pos = 0
    for name, size in zip(("train", "val", "test"), sizes):
        out[name] = [windows[i] for i in sorted(order[pos:pos + size])]
        pos += size
    return out


def split_temporal(
    beam: Sequence[BeamSnrFrame],
    csi: Sequence[CsiEmbedding],
    labels: Sequence[Coordinate],
    cutoff: float,
    window_span: float,
    train_step: float = 1.0,
    test_step: float = 5.0,
) -> dict[str, list[MeasurementWindow]]:
    """Chronological split: the first `cutoff` fraction of all frames trains.

    Train windows are built with `train_step` (overlapping), test windows
    with `test_step`.  Every train frame strictly precedes every test frame.
    """
    if not 0.0 < cutoff < 1.0:
        raise ValueError("cutoff fraction must lie in (0, 1)")
    pooled = np.sort(np.concatenate([
        [f.t for f in beam], [f.t for f in csi], [f.t for f in labels]]))
    n_train = int(np.floor(cutoff * len(pooled)))
    if n_train == 0 or n_train == len(pooled):
        raise ValueError("temporal cutoff leaves an empty train or test set")
    t_thresh = pooled[n_train - 1]

    def before(frames):
        return [f for f in frames if f.t <= t_thresh]

    def after(frames):
        return [f for f in frames if f.t > t_thresh]

    train = window_sequences(before(beam), before(csi), before(labels), window_span, train_step)
    test = window_sequences(after(beam), after(csi), after(labels), window_span, test_step)
    if not test.windows:
        raise ValueError("temporal split produced no test windows")
    return {"train": train.windows, "test": test.windows}


def split_coordinate(
    windows: Sequence[MeasurementWindow],
    region: Region,
) -> dict[str, list[MeasurementWindow]]:
    """Hold out every window whose ground-truth labels intersect the region."""
    train, test = [], []
    for w in windows:
        (test if bool(region.contains(w.label_xy()).any()) else train).append(w)
    if not train:
        raise ValueError("held-out region covers all windows; train set is empty")
    return {"train": train, "test": test}


# --------------------------------------------------------------------------
# Dataset container: one line-delimited file per split. The first line is a
# JSON header {"config": DatasetConfig, "t_origin": float, "window_step": float};
# each following line is {"stream": "beam"|"csi"|"label", "t": seconds,
# "values": [floats]}.


def write_container(
    path: str | Path,
    beam: Sequence[BeamSnrFrame],
    csi: Sequence[CsiEmbedding],
    labels: Sequence[Coordinate],
    config: DatasetConfig,
    t_origin: float = 0.0,
    window_step: float | None = None,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "config": config.to_dict(),
        "t_origin": t_origin,
        "window_step": config.window_span if window_step is None else window_step,
    }
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for stream, frames, get in (
            ("beam", beam, lambda f: f.values),
            ("csi", csi, lambda f: f.values),
            ("label", labels, lambda f: f.xy),
        ):
            for f in frames:
                rec = {"stream": stream, "t": float(f.t), "values": get(f).tolist()}
                fh.write(json.dumps(rec) + "\n")


def read_container(path: str | Path):
    """Read a container file; returns (beam, csi, labels, config, meta)."""
    path = Path(path)
    beam: list[BeamSnrFrame] = []
    csi: list[CsiEmbedding] = []
    labels: list[Coordinate] = []
    with path.open() as fh:
        header = json.loads(fh.readline())
        config = DatasetConfig.from_dict(header["config"])
        for line in fh:
            rec = json.loads(line)
            stream, t, values = rec["stream"], rec["t"], np.asarray(rec["values"])
            if stream == "beam":
                if len(values) != config.m_b:
                    raise ValueError(f"beam record at t={t} has {len(values)} values, expected {config.m_b}")
                beam.append(BeamSnrFrame(t, values))
            elif stream == "csi":
                if len(values) != config.m_c:
                    raise ValueError(f"csi record at t={t} has {len(values)} values, expected {config.m_c}")
                csi.append(CsiEmbedding(t, values))
            elif stream == "label":
                labels.append(Coordinate(t, values))
            else:
                raise ValueError(f"unknown stream {stream!r}")
    meta = {"t_origin": header["t_origin"], "window_step": header["window_step"]}
    return beam, csi, labels, config, meta
