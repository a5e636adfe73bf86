"""Command-line interface.

Heavy imports happen inside command handlers so that --threads can pin the
BLAS thread pool before numpy loads. Config files are flat key=value text;
any config key can also be passed as a flag.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path


def _set_threads(argv: list[str]) -> None:
    threads = None
    if "--deterministic" in argv:
        threads = "1"
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif a.startswith("--threads="):
            threads = a.split("=", 1)[1]
    if threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = threads


def parse_config_file(path) -> dict[str, str]:
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SystemExit(f"error: format: bad config line {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


_CONFIG_KEYS = {
    "seed": int, "phase1_epochs": int, "phase2_epochs": int, "batch_size": int,
    "patch": int, "lr_start": float, "lr_end": float, "weight_decay": float,
    "target_sparsity": float, "weight_sparsity": float,
    "weight_mask_guidance": float, "weight_self_contrast": float,
    "tau_start": float, "tau_end": float, "body_convs": int,
    "steps_per_epoch": int, "flip_augment": lambda v: v.lower() in ("1", "true", "yes"),
    "log_every": int,
}


def _build_config(args):
    from .train import TrainConfig
    values: dict = {}
    if args.config:
        for key, raw in parse_config_file(args.config).items():
            if key == "alphas":
                values["alphas"] = tuple(float(x) for x in raw.split(","))
            elif key in _CONFIG_KEYS:
                values[key] = _CONFIG_KEYS[key](raw)
            else:
                raise SystemExit(f"error: format: unknown config key {key!r}")
    for key in _CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if getattr(args, "alphas", None):
        values["alphas"] = tuple(float(x) for x in args.alphas.split(","))
    if args.seed is not None:
        values["seed"] = args.seed
    return TrainConfig(**values)


def _dataset_from_args(args, count_default: int = 256):
    from .data import SyntheticTripletSet, load_triplet_dir
    if getattr(args, "data_dir", None):
        return load_triplet_dir(args.data_dir, lenient=getattr(args, "lenient", False))
    size = getattr(args, "size", None) or 64
    count = getattr(args, "count", None) or count_default
    seed = args.seed if args.seed is not None else 0
    return SyntheticTripletSet(seed=seed, count=count, h=size, w=size)


def _add_common(p: argparse.ArgumentParser, train_keys: bool = False) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread count (set before numpy loads)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded deterministic mode")
    p.add_argument("--data-dir", help="directory of frame0/frame1/frame2 folders")
    p.add_argument("--count", type=int, help="synthetic dataset size")
    p.add_argument("--size", type=int, help="synthetic frame extent (square)")
    if train_keys:
        for key, conv in _CONFIG_KEYS.items():
            if key == "seed":
                continue
            flag = "--" + key.replace("_", "-")
            if conv in (int, float):
                p.add_argument(flag, dest=key, type=conv, default=None)
        p.add_argument("--alphas", help="comma triple, e.g. 20,40,80")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ugsp",
                                 description="uncertainty-guided spatially "
                                             "pruned frame interpolation")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-uen", help="phase 1: train the uncertainty net and cache labels")
    _add_common(p, train_keys=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-labels", help="regenerate the label cache from a checkpoint")
    _add_common(p, train_keys=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="label cache path")

    p = sub.add_parser("train-vfi", help="phase 2: train the interpolation net")
    _add_common(p, train_keys=True)
    p.add_argument("--labels", help="label cache from phase 1")
    p.add_argument("--out", required=True)
    p.add_argument("--dense-baseline", action="store_true",
                   help="train the non-pruning baseline instead")

    p = sub.add_parser("interpolate", help="interpolate the middle frame of two images")
    _add_common(p)
    p.add_argument("frame0")
    p.add_argument("frame1")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=("dense", "pruned"), default="pruned")

    p = sub.add_parser("benchmark", help="PSNR / FLOPs / timing over a dataset")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=("dense", "pruned"), default="pruned")
    p.add_argument("--out-prefix", default="benchmark")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--quantize-psnr", action="store_true")

    p = sub.add_parser("flops", help="dense FLOPs ledger for one forward")
    _add_common(p)
    p.add_argument("--ckpt")
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=448)
    p.add_argument("--out-prefix", default="flops")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("observe", help="ranked-error intervals across 1..4-conv variants")
    _add_common(p, train_keys=True)
    p.add_argument("--out-prefix", default="observe")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--eval-count", type=int, default=32)

    p = sub.add_parser("emit-maps", help="write uncertainty/mask/frame maps for one sample")
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="interpolation checkpoint")
    p.add_argument("--uen-ckpt", required=True, help="uncertainty checkpoint")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--figures", action="store_true",
                   help="additionally render a png panel")
    return ap


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _set_threads(argv)
    ap = build_parser()
    args = ap.parse_args(argv)
    from .errors import UgspError
    try:
        return _dispatch(args)
    except UgspError as err:
        print(f"error: {err.category}: {err}", file=sys.stderr)
        return 1
    except FileNotFoundError as err:
        print(f"error: io: {err}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    import numpy as np

    if args.command == "train-uen":
        from .train import train_phase1
        cfg = _build_config(args)
        dataset = _dataset_from_args(args)
        _, ckpt, labels = train_phase1(dataset, cfg, args.out, log=print)
        print(f"checkpoint: {ckpt}")
        print(f"labels: {labels}")
        return 0

    if args.command == "gen-labels":
        from .train import generate_labels
        from .uen import UncertaintyNet, save_labels
        cfg = _build_config(args)
        dataset = _dataset_from_args(args)
        net, _, _ = UncertaintyNet.load(args.ckpt)
        cache = generate_labels(net, dataset, cfg.alphas, batch_size=cfg.batch_size)
        save_labels(args.out, cache)
        print(f"labels: {args.out} ({len(cache)} samples)")
        return 0

    if args.command == "train-vfi":
        from .train import train_phase2
        from .uen import load_labels
        cfg = _build_config(args)
        dataset = _dataset_from_args(args)
        labels = load_labels(args.labels) if args.labels else None
        _, ckpt = train_phase2(dataset, labels, cfg, args.out, log=print,
                               dense_only=args.dense_baseline)
        print(f"checkpoint: {ckpt}")
        return 0

    if args.command == "interpolate":
        from .data import read_ppm, write_ppm, _center_crop_16
        from .eval import load_any_model
        from .tensor import Tensor, no_grad
        net, _, _ = load_any_model(args.ckpt)
        f0 = _center_crop_16(read_ppm(args.frame0))
        f1 = _center_crop_16(read_ppm(args.frame1))
        with no_grad():
            if args.mode == "dense":
                res = net.forward(Tensor(f0[None]), Tensor(f1[None]), mode="dense")
            else:
                res = net.forward(Tensor(f0[None]), Tensor(f1[None]),
                                  mode="pruned", exec_mode="infer")
        write_ppm(args.out, res.frame.data[0])
        print(f"wrote {args.out}")
        return 0

    if args.command == "benchmark":
        from .eval import benchmark, load_any_model
        net, _, _ = load_any_model(args.ckpt)
        dataset = _dataset_from_args(args, count_default=16)
        report = benchmark(net, dataset, mode=args.mode)
        prefix = Path(args.out_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{prefix}.txt").write_text(report.to_table() + "\n")
        Path(f"{prefix}.kv").write_text(report.to_kv() + "\n")
        Path(f"{prefix}.ledger.kv").write_text(report.ledger.to_kv() + "\n")
        print(report.to_table())
        if not args.no_figures:
            from .figures import save_benchmark_figure, save_flops_figure
            save_benchmark_figure([report], f"{prefix}.png")
            save_flops_figure(report.ledger, f"{prefix}.flops.png")
        return 0

    if args.command == "flops":
        from .eval import dense_flops, load_any_model
        from .sparse import flops_report
        from .vfi import InterpolationNet
        if args.ckpt:
            net, _, _ = load_any_model(args.ckpt)
        else:
            net = InterpolationNet(seed=args.seed or 0)
        ledger = dense_flops(net, args.height, args.width)
        rep = flops_report(ledger)
        prefix = Path(args.out_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{prefix}.txt").write_text(ledger.to_table() + "\n")
        Path(f"{prefix}.kv").write_text(ledger.to_kv() + "\n")
        print(ledger.to_table())
        print(f"total: {rep['total_dense'] / 1e9:.3f} GFLOPs at {args.height}x{args.width}")
        if not args.no_figures:
            from .figures import save_flops_figure
            save_flops_figure(ledger, f"{prefix}.png")
        return 0

    if args.command == "observe":
        from .data import SyntheticTripletSet
        from .eval import observe_report
        from .train import TrainConfig, train_phase2
        cfg = _build_config(args)
        dataset = _dataset_from_args(args)
        eval_set = SyntheticTripletSet(seed=(cfg.seed + 1) * 7919,
                                       count=args.eval_count,
                                       h=dataset.h if hasattr(dataset, "h") else 64,
                                       w=dataset.w if hasattr(dataset, "w") else 64)
        variants = {}
        for convs in (1, 2, 3, 4):
            vcfg = _variant_config(cfg, convs)
            net, _ = train_phase2(dataset, None, vcfg,
                                  Path(args.out_prefix + f".model{convs}"),
                                  dense_only=True)
            variants[f"model{convs}"] = net
        sums = observe_report(variants, eval_set)
        prefix = Path(args.out_prefix)
        lines = []
        for name, s in sums.items():
            lines.append(name + " " + " ".join(f"{v:.4f}" for v in s))
        Path(f"{prefix}.txt").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
        if not args.no_figures:
            from .figures import save_intervals_figure
            save_intervals_figure(sums, f"{prefix}.png")
        return 0

    if args.command == "emit-maps":
        from .eval import emit_maps, load_any_model
        from .uen import UncertaintyNet
        net, _, _ = load_any_model(args.ckpt)
        uen, _, _ = UncertaintyNet.load(args.uen_ckpt)
        dataset = _dataset_from_args(args, count_default=8)
        triplet = dataset[args.sample]
        paths = emit_maps(net, uen, triplet, args.out)
        for p in paths:
            print(p)
        if args.figures:
            from .figures import save_density_figure
            from .eval import _forward_eval
            res = _forward_eval(net, triplet, "pruned", None)
            dens = tuple(m.density for m in res.masks)
            save_density_figure({"sample": dens}, Path(args.out) / "density.png")
        return 0

    raise SystemExit(f"unknown command {args.command!r}")


def _variant_config(cfg, convs: int):
    from dataclasses import replace
    return replace(cfg, body_convs=convs)


if __name__ == "__main__":
    sys.exit(main())
