"""Command-line surface tying the pipeline together.

Subcommands: simulate, pretrain-cae, train, eval, baseline, search,
export-latents, plot.  Every subcommand accepts --config <yaml file> whose
keys provide defaults for the flags (explicit flags win), plus --seed and
--out-dir.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from .baselines import BaselineConfig, make_baseline
from .csi_frontend import calibrate_frame, cae_encode, load_cae, pretrain_cae, save_cae
from .data_model import (
    CsiEmbedding,
    DatasetConfig,
    Region,
    SplitSpec,
    read_container,
    write_container,
)
from .model import DynamicFusionModel, LossWeights, ModelConfig
from .testbed import (
    RawCsiModel,
    SamplingModel,
    SensorModel,
    TrackSpec,
    build_dataset,
    load_scenario,
    perimeter_regions,
)
from .training import (
    EvalReport,
    TrainConfig,
    evaluate,
    export_latents,
    load_checkpoint,
    prepare_splits,
    save_checkpoint,
    search_hyperparams,
    train,
)

__all__ = ["main"]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None,
                   help="YAML file whose keys provide flag defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, default=Path("out"))


def _merge_config(parser: argparse.ArgumentParser, args: argparse.Namespace,
                  argv: list[str]) -> argparse.Namespace:
    """Overlay YAML config values onto flags not given explicitly.

    Config keys use the flag dest names (underscores); explicitly passed
    flags always win over the config file.
    """
    if getattr(args, "config", None) is None:
        return args
    loaded = yaml.safe_load(Path(args.config).read_text()) or {}
    if not isinstance(loaded, dict):
        parser.error("config file must hold a key/value mapping")
    explicit = {tok[2:].split("=")[0].replace("-", "_")
                for tok in argv if tok.startswith("--")}
    sub_actions = parser._subparsers._group_actions[0]
    actions = {a.dest: a for a in sub_actions.choices[args.command]._actions}
    for key, value in loaded.items():
        if key not in actions:
            parser.error(f"unknown config key {key!r} for command {args.command!r}")
        if key in explicit:
            continue
        action = actions[key]
        if action.type is not None:
            value = [action.type(v) for v in value] if isinstance(value, list) \
                else action.type(value)
        setattr(args, key, value)
    return args


def _split_spec(args) -> SplitSpec:
    if args.split == "random":
        return SplitSpec(kind="random", ratios=tuple(args.ratios))
    if args.split == "temporal":
        return SplitSpec(kind="temporal", cutoff=args.cutoff,
                         train_step=args.train_step, test_step=args.test_step)
    region = Region(*args.region)
    return SplitSpec(kind="coordinate", region=region)


def _data_paths(data_dir: Path) -> tuple[Path, Path]:
    return data_dir / "full.jsonl", data_dir / "scenario.json"


def _horizon(scenario_path: Path) -> float | None:
    if scenario_path.exists():
        return json.loads(scenario_path.read_text())["duration"]
    return None


def _reembed_from_raw(data_dir: Path, cae_prefix: Path, out_dir: Path) -> Path:
    """Replace the csi stream with CAE embeddings of the raw frames."""
    container, _ = _data_paths(data_dir)
    raw_path = data_dir / "full.raw.npz"
    if not raw_path.exists():
        raise FileNotFoundError(f"no raw CSI sidecar at {raw_path}")
    beam, _, labels, config, meta = read_container(container)
    cae = load_cae(cae_prefix)
    if cae.embed_dim != config.m_c:
        raise ValueError(f"CAE embedding dim {cae.embed_dim} != dataset m_c {config.m_c}")
    blob = np.load(raw_path)
    from .data_model import RawCsiFrame

    csi = []
    for t, tensor in zip(blob["t"], blob["tensor"]):
        mat, _ = calibrate_frame(RawCsiFrame(float(t), tensor), config.f_delta)
        csi.append(CsiEmbedding(float(t), cae_encode(mat, cae)))
    out_path = out_dir / "reembedded.jsonl"
    write_container(out_path, beam, csi, labels, config,
                    t_origin=meta["t_origin"], window_step=meta["window_step"])
    return out_path


def cmd_simulate(args) -> int:
    sensors = SensorModel.default(args.m_b, args.m_c, seed=args.seed,
                                  beam_noise_std_db=args.beam_noise,
                                  csi_noise_std=args.csi_noise)
    sampling = SamplingModel()
    track = TrackSpec()
    config = DatasetConfig(m_b=args.m_b, m_c=args.m_c, window_span=args.window_span)
    raw_model = RawCsiModel() if args.raw else None
    result = build_dataset(track, sensors, sampling, args.duration, args.seed,
                           args.out_dir, config=config, raw_model=raw_model)
    step = args.window_span if args.step is None else args.step
    if step != args.window_span:
        from .data_model import read_container, window_sequences
        beam, csi, labels, _, _ = read_container(result.container_path)
        res = window_sequences(beam, csi, labels, args.window_span, step,
                               t_start=0.0, t_end=args.duration)
        n_windows, n_dropped = len(res.windows), res.n_dropped
    else:
        n_windows, n_dropped = result.n_windows, result.n_dropped
    print(f"wrote {result.container_path} ({result.n_frames})")
    print(f"{n_windows} windows at span {args.window_span}s, step {step}s "
          f"({n_dropped} dropped)")
    return 0


def cmd_pretrain_cae(args) -> int:
    raw_path = args.data / "full.raw.npz"
    if not raw_path.exists():
        print(f"error: no raw CSI sidecar at {raw_path}", file=sys.stderr)
        return 1
    container, _ = _data_paths(args.data)
    _, _, _, config, _ = read_container(container)
    blob = np.load(raw_path)
    from .data_model import RawCsiFrame

    matrices = [calibrate_frame(RawCsiFrame(float(t), tensor), config.f_delta)[0]
                for t, tensor in zip(blob["t"], blob["tensor"])]
    model, history = pretrain_cae(matrices, embed_dim=args.embed_dim,
                                  epochs=args.epochs, seed=args.seed)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    save_cae(args.out_dir / "cae", model,
             {"epochs": args.epochs, "seed": args.seed, "embed_dim": args.embed_dim})
    print(f"holdout MSE {history['init_holdout_mse']:.6g} -> {history['final_holdout_mse']:.6g}")
    print(f"saved {args.out_dir / 'cae'}.npz/.json")
    return 0


def _prepare(args, out_dir: Path):
    container, scenario = _data_paths(args.data)
    if getattr(args, "raw_csi", False):
        if not args.cae_checkpoint:
            raise SystemExit("--raw-csi requires --cae-checkpoint (pretrained CAE)")
        container = _reembed_from_raw(args.data, args.cae_checkpoint, out_dir)
    spec = _split_spec(args)
    parts, scaler = prepare_splits(
        container, spec, args.seed, horizon=_horizon(scenario),
        split_files_dir=out_dir if getattr(args, "write_splits", False) else None)
    return parts, scaler, container


def cmd_train(args) -> int:
    torch.manual_seed(args.seed)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    parts, scaler, container = _prepare(args, args.out_dir)
    _, _, _, config, _ = read_container(container)
    model_cfg = ModelConfig(m_b=config.m_b, m_c=config.m_c, fusion=args.scheme)
    model = DynamicFusionModel(model_cfg)
    weights = LossWeights(*args.lambdas)
    cfg = TrainConfig(batch_size=args.batch_size, max_epochs=args.epochs,
                      max_lr=args.max_lr, seed=args.seed)
    result = train(model, parts["train"], parts.get("val", parts.get("test", [])),
                   cfg, weights, out_dir=args.out_dir, log=print)
    save_checkpoint(args.out_dir / "checkpoint", model, epoch=result.best_epoch,
                    metrics={"best_val_loss": result.best_val_loss},
                    scaler=scaler, weights=weights)
    test_key = "test" if "test" in parts else "val"
    report = evaluate(model, parts[test_key], cfg.batch_size,
                      method=f"fusion-{args.scheme}", split=args.split)
    report.save(args.out_dir / "report.json")
    print(f"test mean {report.mean:.4f} m, median {report.median:.4f} m, "
          f"cdf90 {report.cdf90:.4f} m")
    if result.diverged:
        print("warning: training diverged; best checkpoint kept", file=sys.stderr)
        return 1
    return 0


def cmd_eval(args) -> int:
    args.out_dir.mkdir(parents=True, exist_ok=True)
    parts, _, container = _prepare(args, args.out_dir)
    if args.checkpoint is not None:
        model, _ = load_checkpoint(args.checkpoint)
        provenance = "trained"
        method = "checkpoint"
    else:
        torch.manual_seed(args.seed)
        _, _, _, config, _ = read_container(container)
        model = DynamicFusionModel(ModelConfig(m_b=config.m_b, m_c=config.m_c))
        provenance = "random-init"
        method = "fusion-untrained"
    test_key = "test" if "test" in parts else "val"
    report = evaluate(model, parts[test_key], args.batch_size, method=method,
                      split=args.split, provenance=provenance)
    report.save(args.out_dir / "report.json")
    print(f"mean {report.mean:.4f} m, median {report.median:.4f} m, cdf90 {report.cdf90:.4f} m"
          f" [{provenance}]")
    return 0


def cmd_baseline(args) -> int:
    torch.manual_seed(args.seed)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    parts, scaler, container = _prepare(args, args.out_dir)
    _, _, _, config, _ = read_container(container)
    model = make_baseline(BaselineConfig(args.method, bands=args.bands), config.m_b, config.m_c)
    cfg = TrainConfig(batch_size=args.batch_size, max_epochs=args.epochs,
                      max_lr=args.max_lr, seed=args.seed)
    train(model, parts["train"], parts.get("val", parts.get("test", [])), cfg,
          out_dir=args.out_dir, log=print)
    save_checkpoint(args.out_dir / "checkpoint", model, scaler=scaler)
    test_key = "test" if "test" in parts else "val"
    report = evaluate(model, parts[test_key], cfg.batch_size,
                      method=f"{args.method}-{args.bands}", split=args.split)
    report.save(args.out_dir / "report.json")
    print(f"test mean {report.mean:.4f} m, median {report.median:.4f} m, "
          f"cdf90 {report.cdf90:.4f} m")
    return 0


def cmd_search(args) -> int:
    args.out_dir.mkdir(parents=True, exist_ok=True)
    parts, _, container = _prepare(args, args.out_dir)
    _, _, _, config, _ = read_container(container)
    model_cfg = ModelConfig(m_b=config.m_b, m_c=config.m_c, fusion=args.scheme)

    def factory(trial: int):
        torch.manual_seed(args.seed * 1000 + trial)
        return DynamicFusionModel(model_cfg)

    cfg = TrainConfig(batch_size=args.batch_size, max_epochs=args.epochs_per_trial,
                      max_lr=args.max_lr, seed=args.seed)
    val_key = "val" if "val" in parts else "test"
    result = search_hyperparams(factory, parts["train"], parts[val_key], cfg,
                                budget=args.budget, epochs_per_trial=args.epochs_per_trial,
                                log=print)
    (args.out_dir / "search.json").write_text(json.dumps({
        "best_weights": dataclasses.asdict(result.best_weights),
        "best_val_coord_loss": result.best_val,
        "trials": result.trials,
    }, indent=2))
    print(f"best weights {dataclasses.asdict(result.best_weights)}")
    return 0


def cmd_export_latents(args) -> int:
    args.out_dir.mkdir(parents=True, exist_ok=True)
    parts, _, container = _prepare(args, args.out_dir)
    model, _ = load_checkpoint(args.checkpoint)
    _, scenario_path = _data_paths(args.data)
    track = load_scenario(scenario_path)["track"] if scenario_path.exists() else TrackSpec()
    region_of = perimeter_regions(track, args.regions)
    test_key = "test" if "test" in parts else "val"
    windows = [w for key in ("train", "val", "test") if key in parts for w in parts[key]] \
        if args.all_windows else parts[test_key]
    counts = export_latents(model, windows, region_of, args.out_dir / "latents.jsonl",
                            n_regions=args.regions)
    print(f"wrote {sum(counts.values())} rows across {sum(1 for c in counts.values() if c)} "
          f"non-empty regions to {args.out_dir / 'latents.jsonl'}")
    return 0


def cmd_plot(args) -> int:
    from .plots import plot_error_cdf, plot_latents_2d, plot_trajectory_overlay

    args.out_dir.mkdir(parents=True, exist_ok=True)
    out = args.out_dir / args.out_name
    if args.kind == "cdf":
        errors = {}
        for path in args.inputs:
            report = EvalReport.load(path)
            errors[report.method or Path(path).stem] = report.errors
        plot_error_cdf(errors, out)
    elif args.kind == "latent":
        from .fusion import read_latent_records
        plot_latents_2d(read_latent_records(args.inputs[0]), out)
    else:  # trajectory overlay from a checkpoint
        parts, _, _ = _prepare(args, args.out_dir)
        model, _ = load_checkpoint(args.checkpoint)
        test_key = "test" if "test" in parts else "val"
        truth, est = [], []
        from .batching import collate
        for w in parts[test_key]:
            batch = collate([w])
            pred = model.predict_trajectory(batch)[0]
            truth.append(batch.label_xy[0].numpy())
            est.append(pred.numpy())
        plot_trajectory_overlay(np.concatenate(truth), np.concatenate(est), out)
    print(f"wrote {out}")
    return 0


def _add_split_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--split", choices=("random", "temporal", "coordinate"), default="random")
    p.add_argument("--ratios", type=float, nargs=3, default=(0.8, 0.1, 0.1))
    p.add_argument("--cutoff", type=float, default=0.6)
    p.add_argument("--train-step", type=float, default=1.0)
    p.add_argument("--test-step", type=float, default=5.0)
    p.add_argument("--region", type=float, nargs=4, default=(4.5, 6.5, 3.0, 4.5),
                   metavar=("XMIN", "XMAX", "YMIN", "YMAX"))
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--raw-csi", action="store_true",
                   help="re-embed the csi stream from the raw sidecar via a pretrained CAE")
    p.add_argument("--cae-checkpoint", type=Path, default=None)
    p.add_argument("--write-splits", action="store_true",
                   help="also write one dataset container file per split")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynfuse",
                                     description="asynchronous multi-band fusion pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--duration", type=float, default=8890.0)
    p.add_argument("--window-span", type=float, default=5.0)
    p.add_argument("--step", type=float, default=None,
                   help="window step for the reported window count (default: span)")
    p.add_argument("--m-b", type=int, default=36)
    p.add_argument("--m-c", type=int, default=36)
    p.add_argument("--beam-noise", type=float, default=2.0)
    p.add_argument("--csi-noise", type=float, default=0.1)
    p.add_argument("--raw", action="store_true", help="also write raw CSI frames")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pretrain-cae", help="pretrain the CSI autoencoder on raw frames")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--embed-dim", type=int, default=36)
    p.set_defaults(func=cmd_pretrain_cae)

    p = sub.add_parser("train", help="train the fusion model")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    _add_split_flags(p)
    p.add_argument("--scheme", choices=("mlp", "pairwise", "weighted"), default="mlp")
    p.add_argument("--epochs", type=int, default=250)
    p.add_argument("--max-lr", type=float, default=4e-3)
    p.add_argument("--lambdas", type=float, nargs=4, default=(0.7, 1.0, 0.0010, 0.25))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or a random-init model)")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    _add_split_flags(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="train and evaluate a baseline method")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    _add_split_flags(p)
    p.add_argument("--method", choices=("linear_int", "nearest_int", "rnn_decay", "rnn_delta"),
                   required=True)
    p.add_argument("--bands", choices=("csi", "beam", "both"), default="both")
    p.add_argument("--epochs", type=int, default=250)
    p.add_argument("--max-lr", type=float, default=4e-3)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("search", help="random search over the loss weights")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    _add_split_flags(p)
    p.add_argument("--scheme", choices=("mlp", "pairwise", "weighted"), default="mlp")
    p.add_argument("--budget", type=int, default=100)
    p.add_argument("--epochs-per-trial", type=int, default=125)
    p.add_argument("--max-lr", type=float, default=4e-3)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("export-latents", help="export fused latent states by region")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    _add_split_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--regions", type=int, default=8)
    p.add_argument("--all-windows", action="store_true")
    p.set_defaults(func=cmd_export_latents)

    p = sub.add_parser("plot", help="render trajectory, CDF, or latent figures")
    _add_common(p)
    p.add_argument("--kind", choices=("trajectory", "cdf", "latent"), required=True)
    p.add_argument("--inputs", nargs="*", default=[],
                   help="report.json files (cdf) or a latents.jsonl (latent)")
    p.add_argument("--data", type=Path, default=None)
    _add_split_flags(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--out-name", default="plot.png")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = _merge_config(parser, parser.parse_args(argv), argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
