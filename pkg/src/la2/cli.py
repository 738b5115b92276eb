"""Command-line surface: data generation, training, evaluation, sweeps, bench.

Every run config can come from a JSON file (``--config``) with CLI flags
winning on conflict; unknown JSON keys are rejected. Commands that emit a CSV
also write a ``<name>.config.json`` sidecar with the fully resolved config.
Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import data as data_mod
from .model import (CheckpointError, ModelConfig, init_model, load_checkpoint,
                    mask_trajectory, save_checkpoint)
from .tensor import TensorError
from .training import TrainConfig, TrainingError, evaluate, train

__all__ = ["main", "entrypoint"]

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    pass


MODEL_KEYS = ("layers", "hidden", "k", "alpha", "ff_hidden", "heads")
TRAIN_KEYS = ("epochs", "batch_size", "lr", "lr_min", "weight_decay",
              "beta1", "beta2", "eps", "clip_norm", "loss_variant")
OTHER_KEYS = ("seed", "data", "out")


def _load_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must be a JSON object")
    known = set(MODEL_KEYS) | set(TRAIN_KEYS) | set(OTHER_KEYS)
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return cfg


def _resolved(args, keys) -> dict:
    """File config overridden by explicitly supplied flags."""
    cfg = dict(args.file_config)
    for key in keys:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    return cfg


def _write_sidecar(csv_path: Path, config: dict) -> None:
    side = csv_path.with_suffix(csv_path.suffix + ".config.json")
    with open(side, "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_dataset(path) -> data_mod.Dataset:
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise UsageError(f"dataset not found at {p}")
    return data_mod.read_dataset(p)


def _model_config(ds: data_mod.Dataset, cfg: dict, seed: int) -> ModelConfig:
    return ModelConfig(
        in_channels=ds.inputs.shape[2],
        coord_channels=ds.geometry.coords.shape[1],
        out_channels=ds.outputs.shape[2],
        k=int(cfg.get("k", 8)),
        layers=int(cfg.get("layers", 8)),
        hidden=int(cfg.get("hidden", 128)),
        alpha=float(cfg.get("alpha", 10.0)),
        ff_hidden=cfg.get("ff_hidden"),
        heads=int(cfg.get("heads", 1)),
        seed=seed,
    )


def _train_config(cfg: dict, seed: int, default_epochs: int = 50) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=int(cfg.get("epochs", default_epochs)),
            batch_size=int(cfg.get("batch_size", 8)),
            lr=float(cfg.get("lr", 1e-3)),
            lr_min=float(cfg.get("lr_min", 1e-5)),
            weight_decay=float(cfg.get("weight_decay", 1e-4)),
            beta1=float(cfg.get("beta1", 0.9)),
            beta2=float(cfg.get("beta2", 0.999)),
            eps=float(cfg.get("eps", 1e-8)),
            clip_norm=float(cfg.get("clip_norm", 1.0)),
            seed=seed,
            loss_variant=str(cfg.get("loss_variant", "squared-ratio")),
        )
    except TrainingError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    out = Path(args.out)
    if args.task == "darcy":
        ds = data_mod.generate_darcy(args.n, args.grid, args.seed)
    else:
        ds = data_mod.generate_pointcloud_task(args.n, args.points, args.seed)
    data_mod.write_dataset(ds, out)
    print(f"wrote {ds.manifest['name']}: N={ds.n}, M={ds.geometry.m} -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = _read_dataset(args.data)
    mcfg = _model_config(ds, _resolved(args, MODEL_KEYS), args.seed)
    tcfg = _train_config(_resolved(args, TRAIN_KEYS), args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = init_model(mcfg)
    report = train(model, ds, tcfg, checkpoint_path=out / "best.la2c")
    csv_path = out / "report.csv"
    report.write_csv(csv_path)
    save_checkpoint(model, out / "final.la2c")
    _write_sidecar(csv_path, {"model": mcfg.to_dict(), "train": tcfg.to_dict(),
                              "data": str(args.data)})
    print(f"final test rel L2: {report.test_rel_l2[-1]:.6f} "
          f"(best {report.best_test_rel_l2:.6f} at epoch {report.best_epoch})")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = _read_dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    metrics = evaluate(model, ds, args.split)
    print(f"{args.split} rel L2: {metrics['rel_l2']:.6f} over {metrics['n']} samples "
          f"(normalized-space {metrics['rel_l2_normalized']:.6f})")
    return EXIT_OK


def cmd_ablate_window(args) -> int:
    ds = _read_dataset(args.data)
    k_values = args.k_values
    if any(k > ds.geometry.m for k in k_values):
        raise UsageError(f"window size exceeds M={ds.geometry.m}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for k in k_values:
        cfg = dict(_resolved(args, MODEL_KEYS), k=k)
        mcfg = _model_config(ds, cfg, args.seed)
        tcfg = _train_config(_resolved(args, TRAIN_KEYS), args.seed,
                             default_epochs=10)
        model = init_model(mcfg)
        report = train(model, ds, tcfg)
        rows.append((k, report.test_rel_l2[-1],
                     float(np.mean(report.epoch_seconds))))
        print(f"K={k}: test rel L2 {rows[-1][1]:.6f}, "
              f"epoch {rows[-1][2]:.3f}s")
    csv_path = out / "ablate_window.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("k,test_rel_l2,epoch_seconds\n")
        for k, err, sec in rows:
            fh.write(f"{k},{err!r},{sec:.6f}\n")
    _write_sidecar(csv_path, {"k_values": list(k_values),
                              "model": _resolved(args, MODEL_KEYS),
                              "train": _resolved(args, TRAIN_KEYS),
                              "seed": args.seed, "data": str(args.data)})
    return EXIT_OK


def cmd_scale_study(args) -> int:
    ds = _read_dataset(args.data)
    if not args.widths and not args.depths:
        raise UsageError("need --widths and/or --depths")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base_model = _resolved(args, MODEL_KEYS)
    rows = []

    def run(sweep, layers, hidden):
        cfg = dict(base_model, layers=layers, hidden=hidden)
        mcfg = _model_config(ds, cfg, args.seed)
        tcfg = _train_config(_resolved(args, TRAIN_KEYS), args.seed,
                             default_epochs=10)
        model = init_model(mcfg)
        report = train(model, ds, tcfg)
        rows.append((sweep, layers, hidden, report.test_rel_l2[-1],
                     float(np.mean(report.epoch_seconds))))
        print(f"{sweep} L={layers} C={hidden}: test rel L2 {rows[-1][3]:.6f}")

    fixed_layers = int(base_model.get("layers", 4))
    fixed_hidden = int(base_model.get("hidden", 64))
    for width in args.widths or []:
        run("width", fixed_layers, width)
    for depth in args.depths or []:
        run("depth", depth, fixed_hidden)

    csv_path = out / "scale_study.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("sweep,layers,hidden,test_rel_l2,epoch_seconds\n")
        for sweep, layers, hidden, err, sec in rows:
            fh.write(f"{sweep},{layers},{hidden},{err!r},{sec:.6f}\n")
    _write_sidecar(csv_path, {"widths": args.widths, "depths": args.depths,
                              "model": base_model,
                              "train": _resolved(args, TRAIN_KEYS),
                              "seed": args.seed, "data": str(args.data)})
    return EXIT_OK


def cmd_bench(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kinds = ("global", "local", "pairwise") if args.kind == "all" else (args.kind,)
    rows = []
    cap = args.memory_cap << 20
    for kind in kinds:
        if kind == "global":
            for m in args.sizes:
                t = bench_mod.bench_global(m, args.hidden, args.repeats, cap)
                rows.append((kind, m, "", args.hidden, t))
        elif kind == "pairwise":
            for m in args.sizes:
                t = bench_mod.bench_pairwise(m, args.hidden, args.repeats, cap)
                rows.append((kind, m, "", args.hidden, t))
        else:
            for k in args.k_values:
                t = bench_mod.bench_local(args.local_m, k, args.hidden,
                                          args.repeats, cap)
                rows.append((kind, args.local_m, k, args.hidden, t))
    csv_path = out / "bench.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("kind,m,k,hidden,seconds\n")
        for kind, m, k, c, t in rows:
            fh.write(f"{kind},{m},{k},{c},{t:.6e}\n")
            print(f"{kind:9s} M={m:<6} K={k if k != '' else '-':<4} "
                  f"C={c}: {t * 1e3:.3f} ms")
    _write_sidecar(csv_path, {"kind": args.kind, "sizes": args.sizes,
                              "k_values": args.k_values, "local_m": args.local_m,
                              "hidden": args.hidden, "repeats": args.repeats,
                              "memory_cap_mib": args.memory_cap})
    return EXIT_OK


def cmd_dump_mask(args) -> int:
    model = load_checkpoint(args.checkpoint)
    for i, sig in enumerate(mask_trajectory(model)):
        print(f"layer {i + 1}: sigma(s) = {sig:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated int list: {text}") from exc


def _add_config_flags(p: argparse.ArgumentParser, *, model=True, training=True):
    p.add_argument("--config", default=None, help="JSON run config; flags override it")
    p.add_argument("--seed", type=int, default=0, help="RNG seed")
    if model:
        g = p.add_argument_group("model")
        g.add_argument("--layers", type=int, default=None, help="block count L (default 8)")
        g.add_argument("--hidden", type=int, default=None, help="hidden width C (default 128)")
        g.add_argument("-K", "--k", type=int, default=None, help="neighbor patch size (default 8)")
        g.add_argument("--alpha", type=float, default=None, help="mask sharpness (default 10)")
        g.add_argument("--ff-hidden", dest="ff_hidden", type=int, default=None,
                       help="feed-forward width (default 2C)")
        g.add_argument("--heads", type=int, default=None, help="attention heads (default 1)")
    if training:
        g = p.add_argument_group("training")
        g.add_argument("--epochs", type=int, default=None, help="training epochs")
        g.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        g.add_argument("--lr", type=float, default=None, help="peak learning rate (default 1e-3)")
        g.add_argument("--lr-min", dest="lr_min", type=float, default=None)
        g.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
        g.add_argument("--clip-norm", dest="clip_norm", type=float, default=None)
        g.add_argument("--loss-variant", dest="loss_variant",
                       choices=("squared-ratio", "root-ratio"), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="la2",
        description="Neural operator with fused global/local attention: "
                    "data generation, training, sweeps, and benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset directory")
    p.add_argument("--task", choices=("darcy", "pointcloud"), required=True)
    p.add_argument("--n", type=int, required=True, help="sample count")
    p.add_argument("--grid", type=int, default=16, help="darcy grid side (>= 8)")
    p.add_argument("--points", type=int, default=512, help="pointcloud size (>= 16)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate, needs_config=False)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train, needs_config=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.set_defaults(func=cmd_eval, needs_config=False)

    p = sub.add_parser("ablate-window", help="train once per window size K")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k-values", dest="k_values", type=_int_list,
                   default=[4, 8, 16, 32])
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate_window, needs_config=True)

    p = sub.add_parser("scale-study", help="train across widths and/or depths")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--widths", type=_int_list, default=None)
    p.add_argument("--depths", type=_int_list, default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_scale_study, needs_config=True)

    p = sub.add_parser("bench", help="time attention kinds over sizes")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("global", "local", "pairwise", "all"),
                   default="all")
    p.add_argument("--sizes", type=_int_list, default=[1024, 2048, 4096],
                   help="M values for global/pairwise")
    p.add_argument("--k-values", dest="k_values", type=_int_list,
                   default=[8, 16, 32], help="K values for local")
    p.add_argument("--local-m", dest="local_m", type=int, default=2048)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--memory-cap", dest="memory_cap", type=int, default=2048,
                   help="working-array cap in MiB")
    p.set_defaults(func=cmd_bench, needs_config=False)

    p = sub.add_parser("dump-mask", help="print per-layer mask fractions")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_dump_mask, needs_config=False)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        if getattr(args, "needs_config", False):
            args.file_config = _load_config_file(args.config) if args.config else {}
        return args.func(args)
    except (UsageError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TensorError, CheckpointError, data_mod.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - last-resort runtime failure
        traceback.print_exc()
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
