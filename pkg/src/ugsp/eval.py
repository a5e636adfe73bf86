"""Metrics, benchmarking, error-ranking analysis, and artifact visualization."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Triplet, write_ppm
from .errors import ContractError, DimensionError
from .sparse import FlopsLedger, flops_report
from .tensor import Tensor, no_grad
from .uen import UncertaintyNet
from .vfi import InterpolationNet

PSNR_CAP = 99.0


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def psnr(a, b, quantize: bool = False) -> float:
    """10*log10(1/MSE) for [0,1] images; identical inputs cap at 99 dB."""
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shapes {a.shape} vs {b.shape}")
    if quantize:
        a = np.round(a * 255.0) / 255.0
        b = np.round(b * 255.0) / 255.0
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ranked_error_intervals(pred, gt) -> np.ndarray:
    """Sort per-pixel errors ascending, split into five equal-count bins
    (remainder pixels go to the last bin), and return the per-bin sums."""
    pred, gt = _array(pred), _array(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"ranked_error_intervals: shapes {pred.shape} vs {gt.shape}")
    err = np.abs(pred.astype(np.float64) - gt.astype(np.float64))
    if err.ndim >= 3:
        err = err.mean(axis=-3)  # mean over channels
    flat = np.sort(err.reshape(-1))
    n = flat.size
    base = n // 5
    sums = np.empty(5, dtype=np.float64)
    start = 0
    for b in range(5):
        stop = start + base if b < 4 else n
        sums[b] = flat[start:stop].sum()
        start = stop
    return sums


@dataclass
class BenchReport:
    mode: str
    n_samples: int
    psnr_mean: float
    flops_dense: int
    flops_active: int
    reduction_percent: float
    wall_time_dense: float
    wall_time_sparse: float
    mask_density: tuple | None
    ledger: FlopsLedger

    def to_kv(self) -> str:
        lines = [
            f"mode={self.mode}",
            f"samples={self.n_samples}",
            f"psnr_mean={self.psnr_mean:.4f}",
            f"flops_dense={self.flops_dense}",
            f"flops_active={self.flops_active}",
            f"reduction_percent={self.reduction_percent:.3f}",
            f"wall_time_dense={self.wall_time_dense:.4f}",
            f"wall_time_sparse={self.wall_time_sparse:.4f}",
        ]
        if self.mask_density is not None:
            for i, d in enumerate(self.mask_density, start=1):
                lines.append(f"mask_density_p{i}={d:.4f}")
        return "\n".join(lines)

    def to_table(self) -> str:
        dens = "-"
        if self.mask_density is not None:
            dens = "/".join(f"{d:.2f}" for d in self.mask_density)
        head = (f"{'mode':<8} {'n':>4} {'PSNR':>8} {'GFLOPs dense':>13} "
                f"{'GFLOPs active':>14} {'red %':>7} {'t dense':>8} {'t sparse':>9} {'density':>15}")
        row = (f"{self.mode:<8} {self.n_samples:>4} {self.psnr_mean:>8.3f} "
               f"{self.flops_dense / 1e9:>13.3f} {self.flops_active / 1e9:>14.3f} "
               f"{self.reduction_percent:>7.2f} {self.wall_time_dense:>8.3f} "
               f"{self.wall_time_sparse:>9.3f} {dens:>15}")
        return head + "\n" + row


def _forward_eval(net: InterpolationNet, t: Triplet, mode: str,
                  ledger: FlopsLedger | None):
    i0 = Tensor(t.frame0[None])
    i1 = Tensor(t.frame1[None])
    with no_grad():
        if mode == "dense":
            return net.forward(i0, i1, mode="dense", ledger=ledger)
        return net.forward(i0, i1, mode="pruned", exec_mode="infer", ledger=ledger)


def benchmark(net: InterpolationNet, dataset, mode: str = "pruned",
              time_runs: bool = True) -> BenchReport:
    """Traverse the dataset accumulating PSNR, an exact FLOPs ledger, wall
    time (single pass, one warmup excluded), and hard-mask densities."""
    if mode not in ("dense", "pruned"):
        raise ContractError(f"benchmark mode must be dense|pruned, got {mode!r}")
    n = len(dataset)
    if n == 0:
        raise ContractError("benchmark: empty dataset")
    ledger = FlopsLedger()
    psnrs = []
    densities = np.zeros(3, dtype=np.float64)
    for i in range(n):
        t = dataset[i]
        out = _forward_eval(net, t, mode, ledger)
        psnrs.append(psnr(out.frame.data[0], t.frame_gt))
        if mode == "pruned":
            densities += [out.masks[k].density for k in range(3)]
    report = flops_report(ledger)

    wall_dense = wall_sparse = 0.0
    if time_runs:
        t0 = dataset[0]
        _forward_eval(net, t0, "dense", None)  # warmup
        tic = time.perf_counter()
        for i in range(n):
            _forward_eval(net, dataset[i], "dense", None)
        wall_dense = time.perf_counter() - tic
        if mode == "pruned":
            _forward_eval(net, t0, "pruned", None)
            tic = time.perf_counter()
            for i in range(n):
                _forward_eval(net, dataset[i], "pruned", None)
            wall_sparse = time.perf_counter() - tic
        else:
            wall_sparse = wall_dense

    return BenchReport(
        mode=mode,
        n_samples=n,
        psnr_mean=float(np.mean(psnrs)),
        flops_dense=report["total_dense"],
        flops_active=report["total_active"],
        reduction_percent=report["reduction_percent"] if mode == "pruned" else 0.0,
        wall_time_dense=wall_dense,
        wall_time_sparse=wall_sparse,
        mask_density=tuple(densities / n) if mode == "pruned" else None,
        ledger=ledger,
    )


def dense_flops(net: InterpolationNet, h: int, w: int) -> FlopsLedger:
    """One dense forward at h x w, returning the populated ledger."""
    ledger = FlopsLedger()
    zeros = np.zeros((1, 3, h, w), dtype=np.float32)
    with no_grad():
        net.forward(Tensor(zeros), Tensor(zeros), mode="dense", ledger=ledger)
    return ledger


def _normalize01(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi - lo < 1e-12:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def emit_maps(net: InterpolationNet, uen: UncertaintyNet, triplet: Triplet,
              outdir) -> list[Path]:
    """Write the canonical nine-file visualization set for one triplet:
    overlay, three uncertainty maps, three hard masks (the per-scale
    computation-density maps), the interpolated frame, and the middle frame.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    i0 = Tensor(triplet.frame0[None])
    i1 = Tensor(triplet.frame1[None])
    with no_grad():
        u_out = uen.forward(i0, i1)
        v_out = net.forward(i0, i1, mode="pruned", exec_mode="infer")
    paths = []

    def emit(name: str, img: np.ndarray):
        p = outdir / name
        write_ppm(p, img)
        paths.append(p)

    emit("overlay.ppm", (triplet.frame0 + triplet.frame1) / 2.0)
    for k in range(3):
        emit(f"uncertainty_u{k}.pgm", _normalize01(u_out.uncertainty[k].data[0, 0]))
    for k, mask in enumerate(v_out.masks, start=1):
        emit(f"mask_p{k}.pgm", mask.data.data[0, 0])
    emit("frame_interp.ppm", v_out.frame.data[0])
    emit("frame_gt.ppm", triplet.frame_gt)
    return paths


def observe_report(variants: dict[str, InterpolationNet], dataset) -> dict[str, np.ndarray]:
    """Per-variant quintile error sums accumulated over a dataset."""
    out: dict[str, np.ndarray] = {}
    for name, net in variants.items():
        total = np.zeros(5, dtype=np.float64)
        for i in range(len(dataset)):
            t = dataset[i]
            res = _forward_eval(net, t, "dense", None)
            total += ranked_error_intervals(res.frame.data[0], t.frame_gt)
        out[name] = total
    return out


def load_any_model(path):
    """Build the right network class from a checkpoint's metadata."""
    from .layers import read_checkpoint, split_entries
    meta, _, _ = split_entries(read_checkpoint(path))
    arch = meta.get("arch", 0.0)
    if arch == UncertaintyNet.ARCH_ID:
        net, meta, opt = UncertaintyNet.load(path)
    else:
        net, meta, opt = InterpolationNet.load(path)
    return net, meta, opt
