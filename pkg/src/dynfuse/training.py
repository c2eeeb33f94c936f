"""Training loop, evaluation metrics, random hyperparameter search, and
checkpoint persistence shared by the fusion model and all baselines.

Determinism: batch order per epoch is a pure function of the seed and epoch
index, the per-window posterior noise draws are seeded by (seed, epoch,
window id), and validation/evaluation always run with zero noise in a fixed
batch order, so identical seeds reproduce training curves and reports
byte for byte.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .baselines import BaselineConfig, make_baseline
from .batching import WindowBatch, collate
from .data_model import (
    MeasurementWindow,
    Scaler,
    SplitSpec,
    apply_scaler,
    fit_measurement_scaler,
    normalize_window_times,
    read_container,
    split_coordinate,
    split_random,
    split_temporal,
    window_sequences,
)
from .model import DynamicFusionModel, LossWeights, ModelConfig

__all__ = [
    "TrainConfig",
    "TrainResult",
    "EvalReport",
    "prepare_splits",
    "write_split_containers",
    "train",
    "evaluate",
    "search_hyperparams",
    "export_latents",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings."""

    batch_size: int = 32
    max_epochs: int = 250
    max_lr: float = 4e-3
    seed: int = 0
    v_samples: int = 1
    checkpoint_best: bool = True
    schedule: str = "one_cycle"

    def __post_init__(self):
        if self.batch_size <= 0 or self.max_epochs <= 0:
            raise ValueError("batch_size and max_epochs must be positive")
        if self.max_lr < 0:
            raise ValueError("max_lr must be nonnegative")
        if self.v_samples < 1:
            raise ValueError("v_samples must be at least 1")
        if self.schedule not in ("one_cycle", "constant"):
            raise ValueError("schedule must be one_cycle or constant")


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_val_loss: float
    diverged: bool = False


@dataclass
class EvalReport:
    """Per-point localization errors with their summary statistics."""

    errors: np.ndarray
    mean: float
    median: float
    cdf90: float
    method: str = ""
    split: str = ""
    provenance: str = "trained"

    @classmethod
    def from_errors(cls, errors, method: str = "", split: str = "",
                    provenance: str = "trained") -> "EvalReport":
        errors = np.asarray(errors, dtype=np.float64)
        if errors.size == 0:
            raise ValueError("cannot build a report from an empty error list")
        if np.any(errors < 0):
            raise ValueError("errors must be nonnegative")
        return cls(errors, float(errors.mean()), float(np.median(errors)),
                   float(np.percentile(errors, 90)), method, split, provenance)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "split": self.split,
            "provenance": self.provenance,
            "mean": self.mean,
            "median": self.median,
            "cdf90": self.cdf90,
            "n_points": int(self.errors.size),
            "errors": self.errors.tolist(),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        return cls.from_errors(d["errors"], d["method"], d["split"], d["provenance"])


# --------------------------------------------------------------------------
# Data pipeline: container -> normalized, scaled window splits.


def write_split_containers(parts: dict, config, meta: dict, out_dir: str | Path,
                           step_by_split: dict | None = None) -> dict[str, Path]:
    """One container file per split, holding the frames of that split's windows.

    Frames are deduplicated (overlapping train windows share frames) and
    written with absolute times, so re-windowing a split file against the
    header grid reproduces the split's windows.
    """
    from .data_model import write_container

    out_dir = Path(out_dir)
    paths = {}
    for name, windows in parts.items():
        streams = {"beam": {}, "csi": {}, "label": {}}
        for w in windows:
            for key, frames in (("beam", w.beam), ("csi", w.csi), ("label", w.labels)):
                for f in frames:
                    streams[key][f.t] = f
        step = (step_by_split or {}).get(name, meta["window_step"])
        path = out_dir / f"{name}.jsonl"
        write_container(path,
                        [streams["beam"][t] for t in sorted(streams["beam"])],
                        [streams["csi"][t] for t in sorted(streams["csi"])],
                        [streams["label"][t] for t in sorted(streams["label"])],
                        config, t_origin=meta["t_origin"], window_step=step)
        paths[name] = path
    return paths


def prepare_splits(container_path: str | Path, spec: SplitSpec, seed: int,
                   horizon: float | None = None,
                   split_files_dir: str | Path | None = None):
    """Window, split, normalize, and scale a dataset container.

    Returns (splits dict of window lists, scaler).  Scaling statistics come
    from the training split only.  When `split_files_dir` is given, one
    container file per split is written before normalization.
    """
    beam, csi, labels, config, meta = read_container(container_path)
    span = config.window_span
    if spec.kind == "temporal":
        parts = split_temporal(beam, csi, labels, spec.cutoff, span,
                               spec.train_step, spec.test_step)
    else:
        res = window_sequences(beam, csi, labels, span, meta["window_step"],
                               t_start=meta["t_origin"], t_end=horizon)
        if spec.kind == "random":
            parts = split_random(res.windows, spec.ratios, seed)
        else:
            parts = split_coordinate(res.windows, spec.region)
    if split_files_dir is not None:
        steps = {"train": spec.train_step, "test": spec.test_step} \
            if spec.kind == "temporal" else None
        write_split_containers(parts, config, meta, split_files_dir, steps)
    parts = {k: [normalize_window_times(w) for w in v] for k, v in parts.items()}
    scaler = fit_measurement_scaler(parts["train"])
    parts = {k: [apply_scaler(scaler, w) for w in v] for k, v in parts.items()}
    return parts, scaler


def _batches(windows: Sequence[MeasurementWindow], batch_size: int,
             order: np.ndarray | None = None) -> list[WindowBatch]:
    idx = np.arange(len(windows)) if order is None else order
    return [collate([windows[i] for i in idx[k:k + batch_size]])
            for k in range(0, len(idx), batch_size)]


def _epsilon(window_ids, epoch: int, seed: int, dim: int, draw: int = 0) -> torch.Tensor:
    """Per-window posterior noise, seeded by (seed, epoch, window id, draw)."""
    rows = [np.random.default_rng(
        np.random.SeedSequence([seed, epoch, wid, draw])).standard_normal(dim)
        for wid in window_ids]
    return torch.as_tensor(np.stack(rows), dtype=torch.float64)


def _loss_on(model, batch: WindowBatch, weights: LossWeights, epoch: int,
             seed: int, stochastic: bool, v_samples: int = 1):
    dims = getattr(model, "noise_dims", lambda: None)()
    if dims is None or not stochastic:
        return model.compute_loss(batch, weights)
    losses, parts = [], {}
    for draw in range(v_samples):
        eps_b = _epsilon(batch.window_ids, epoch, seed, dims[0], draw)
        eps_c = _epsilon(batch.window_ids, epoch, seed + 1, dims[1], draw)
        loss, parts = model.compute_loss(batch, weights, eps_b, eps_c)
        losses.append(loss)
    return torch.stack(losses).mean(), parts


def train(model, train_windows: Sequence[MeasurementWindow],
          val_windows: Sequence[MeasurementWindow], cfg: TrainConfig,
          weights: LossWeights | None = None, out_dir: str | Path | None = None,
          log: Callable[[str], None] | None = None) -> TrainResult:
    """Adamax + one-cycle schedule; keeps the best-validation parameters.

    A non-finite training loss aborts the run, restores the best parameters
    seen so far, and flags the result as diverged.
    """
    weights = weights or LossWeights()
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adamax(params, lr=cfg.max_lr if cfg.max_lr > 0 else 1e-12)
    steps_per_epoch = max(1, math.ceil(len(train_windows) / cfg.batch_size))
    if cfg.schedule == "one_cycle" and cfg.max_lr > 0:
        scheduler = torch.optim.lr_scheduler.OneCycleLR(
            optimizer, max_lr=cfg.max_lr, total_steps=steps_per_epoch * cfg.max_epochs)
    else:
        scheduler = None
        for group in optimizer.param_groups:
            group["lr"] = cfg.max_lr
    val_batches = _batches(val_windows, cfg.batch_size) if val_windows else []

    history: list[dict] = []
    best_val = float("inf")
    best_state = copy.deepcopy(model.state_dict())
    best_epoch = -1
    diverged = False
    for epoch in range(cfg.max_epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 7, epoch])).permutation(len(train_windows))
        epoch_losses = []
        max_lr_seen = 0.0
        for batch in _batches(train_windows, cfg.batch_size, order):
            loss, _ = _loss_on(model, batch, weights, epoch, cfg.seed,
                               stochastic=True, v_samples=cfg.v_samples)
            if not torch.isfinite(loss):
                diverged = True
                break
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            max_lr_seen = max(max_lr_seen, optimizer.param_groups[0]["lr"])
            if scheduler is not None:
                scheduler.step()
            epoch_losses.append(float(loss.detach()))
        if diverged:
            warnings.warn(f"training loss became non-finite at epoch {epoch}; "
                          "restoring best checkpoint")
            break
        train_loss = float(np.mean(epoch_losses))
        if val_batches:
            with torch.no_grad():
                val_losses = [float(_loss_on(model, b, weights, epoch, cfg.seed,
                                             stochastic=False)[0]) for b in val_batches]
            val_loss = float(np.mean(val_losses))
        else:
            val_loss = train_loss
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": val_loss, "lr": max_lr_seen})
        if log is not None:
            log(f"epoch {epoch:4d}  train {train_loss:.6f}  val {val_loss:.6f}")
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            if cfg.checkpoint_best:
                best_state = copy.deepcopy(model.state_dict())
    if cfg.checkpoint_best and best_epoch >= 0:
        model.load_state_dict(best_state)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with (out_dir / "losses.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "lr"])
            writer.writeheader()
            writer.writerows(history)
    return TrainResult(history, best_epoch, best_val, diverged)


def evaluate(model, windows: Sequence[MeasurementWindow], batch_size: int = 32,
             method: str = "", split: str = "", provenance: str = "trained") -> EvalReport:
    """Per-label-point Euclidean error over the given windows."""
    if not windows:
        raise ValueError("cannot evaluate on an empty window set")
    errors = []
    for batch in _batches(windows, batch_size):
        pred = model.predict_trajectory(batch)
        err = torch.linalg.norm(batch.label_xy - pred, dim=-1)
        errors.append(err[batch.label_mask > 0].numpy())
    return EvalReport.from_errors(np.concatenate(errors), method, split, provenance)


@dataclass
class SearchResult:
    best_weights: LossWeights
    best_val: float
    trials: list[dict] = field(default_factory=list)


def search_hyperparams(model_factory: Callable[[int], torch.nn.Module],
                       train_windows, val_windows, cfg: TrainConfig,
                       budget: int = 100, epochs_per_trial: int = 125,
                       lambda_range: tuple[float, float] = (0.0, 1.0),
                       log: Callable[[str], None] | None = None) -> SearchResult:
    """Random search over the four regularization weights.

    Each trial trains a fresh model for `epochs_per_trial` epochs and is
    scored by the validation coordinate loss (trajectory term only).
    """
    if budget < 1:
        raise ValueError("search budget must be at least 1")
    rng = np.random.default_rng(cfg.seed)
    lo, hi = lambda_range
    trial_cfg = dataclasses.replace(cfg, max_epochs=epochs_per_trial)
    val_batches = _batches(val_windows, cfg.batch_size)
    result = SearchResult(LossWeights(), float("inf"))
    for trial in range(budget):
        lams = rng.uniform(lo, hi, size=4)
        weights = LossWeights(*[float(v) for v in lams])
        model = model_factory(trial)
        train(model, train_windows, val_windows, trial_cfg, weights)
        with torch.no_grad():
            coord = float(np.mean([
                ((b.label_xy - model.predict_trajectory(b)).abs().sum(-1) * b.label_mask)
                .sum(-1).mean() for b in val_batches]))
        entry = {"trial": trial, "weights": dataclasses.asdict(weights), "val_coord_loss": coord}
        if coord < result.best_val:
            result.best_val = coord
            result.best_weights = weights
            entry["best_so_far"] = True
        result.trials.append(entry)
        if log is not None:
            log(f"trial {trial:3d}  coord {coord:.6f}  best {result.best_val:.6f}")
    return result


def export_latents(model: DynamicFusionModel, windows: Sequence[MeasurementWindow],
                   region_of: Callable[[np.ndarray], np.ndarray], path: str | Path,
                   batch_size: int = 32, n_regions: int = 8):
    """Write fused latent states tagged by ground-truth region id.

    Returns the number of points written per region id; empty regions are
    reported with a warning.
    """
    from .fusion import write_latent_records

    rows = []
    counts = {r: 0 for r in range(n_regions)}
    for batch in _batches(windows, batch_size):
        with torch.no_grad():
            fused = model(batch).fused
        for i in range(batch.size):
            valid = batch.label_mask[i] > 0
            regions = region_of(batch.label_xy[i][valid].numpy())
            times = batch.label_t[i][valid].numpy()
            z = fused[i][valid].numpy()
            for t, zz, r in zip(times, z, regions):
                counts[int(r)] = counts.get(int(r), 0) + 1
                rows.append({"window_id": batch.window_ids[i], "t": float(t),
                             "band": "fused", "z": zz.tolist(), "region": int(r)})
    empty = [r for r, c in counts.items() if c == 0]
    if empty:
        warnings.warn(f"regions {empty} contain no points")
    write_latent_records(path, rows)
    return counts


# --------------------------------------------------------------------------
# Checkpoints: <prefix>.npz tensor blob + <prefix>.json manifest.


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def save_checkpoint(prefix: str | Path, model, *, epoch: int = -1,
                    metrics: dict | None = None, scaler: Scaler | None = None,
                    weights: LossWeights | None = None) -> None:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.cpu().numpy() for k, v in model.state_dict().items()}
    np.savez(prefix.with_suffix(".npz"), **state)
    if isinstance(model, DynamicFusionModel):
        manifest = {"kind": "fusion", "model_config": model.cfg.to_dict()}
    else:
        manifest = {"kind": "baseline",
                    "baseline_config": dataclasses.asdict(model.cfg),
                    "m_b": getattr(model, "m_b", None), "m_c": getattr(model, "m_c", None)}
    manifest["layer_shapes"] = {k: list(v.shape) for k, v in state.items()}
    manifest["epoch"] = epoch
    manifest["metrics"] = metrics or {}
    manifest["scaler"] = scaler.to_dict() if scaler is not None else None
    manifest["loss_weights"] = dataclasses.asdict(weights) if weights is not None else None
    manifest["config_hash"] = _config_hash(manifest.get("model_config")
                                           or manifest.get("baseline_config"))
    prefix.with_suffix(".json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(prefix: str | Path):
    """Rebuild the model from its manifest and tensor blob.

    Returns (model, manifest dict with scaler/weights fields parsed).
    """
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    if manifest["kind"] == "fusion":
        model = DynamicFusionModel(ModelConfig.from_dict(manifest["model_config"]))
    else:
        bc = BaselineConfig(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in manifest["baseline_config"].items()})
        model = make_baseline(bc, manifest["m_b"], manifest["m_c"])
    blob = np.load(prefix.with_suffix(".npz"))
    model.load_state_dict({k: torch.as_tensor(blob[k]) for k in blob.files})
    if manifest.get("scaler"):
        manifest["scaler"] = Scaler.from_dict(manifest["scaler"])
    if manifest.get("loss_weights"):
        manifest["loss_weights"] = LossWeights(**manifest["loss_weights"])
    return model, manifest
