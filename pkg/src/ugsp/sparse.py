"""Spatially pruned convolution: the two execution paths and FLOPs accounting.

Training multiplies each gated convolution's output by a soft mask so
gradients reach every location; inference gathers only the mask-active
positions (with a one-pixel halo for 3x3 kernels), computes them, and
scatters the results into a zero-initialized buffer. Because the training
path zeroes skipped positions after every gated layer, the two paths agree
exactly on hard masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, as_tensor, conv2d, mul


@dataclass
class PruningMask:
    """Per-scale spatial gate in [0,1]; hard masks contain only {0,1}.

    A mask with scale_index j has resolution H/2^j and gates the block that
    works at pyramid level j-1 (same resolution).
    """

    scale_index: int
    data: Tensor
    mode: str = "soft"  # soft | hard

    def __post_init__(self):
        self.data = as_tensor(self.data)
        if self.data.data.ndim != 4 or self.data.data.shape[1] != 1:
            raise DimensionError(f"pruning mask must be (N,1,H,W), got {self.data.data.shape}")
        if self.mode == "hard":
            vals = self.data.data
            if not np.all((vals == 0) | (vals == 1)):
                raise ContractError("hard pruning mask contains values outside {0,1}")

    @property
    def density(self) -> float:
        return float(self.data.data.mean())


@dataclass
class ActiveIndex:
    """Lexicographically sorted (batch, y, x) coordinates where the mask is 1."""

    coords: np.ndarray
    count: int


def build_active_index(mask: PruningMask) -> ActiveIndex:
    if mask.mode != "hard":
        raise ContractError("build_active_index requires a hard mask")
    coords = np.argwhere(mask.data.data[:, 0] > 0.5)  # argwhere is C-ordered = lex sorted
    return ActiveIndex(coords=coords.astype(np.int64), count=int(coords.shape[0]))


@dataclass
class LedgerRecord:
    layer: str
    kernel: int
    c_in: int
    c_out: int
    positions_dense: int
    positions_active: int
    gated: bool = False

    @property
    def flops_dense(self) -> int:
        return 2 * self.kernel * self.kernel * self.c_in * self.c_out * self.positions_dense

    @property
    def flops_active(self) -> int:
        return 2 * self.kernel * self.kernel * self.c_in * self.c_out * self.positions_active


class FlopsLedger:
    """Ordered per-layer multiply-accumulate counts (one MAC = 2 FLOPs).

    Bias and activation FLOPs are excluded; a transposed convolution counts
    its input positions.
    """

    def __init__(self):
        self.records: list[LedgerRecord] = []

    def record(self, layer: str, kernel: int, c_in: int, c_out: int,
               positions_dense: int, positions_active: int | None = None,
               gated: bool = False) -> None:
        if positions_active is None:
            positions_active = positions_dense
        if positions_active > positions_dense:
            raise ContractError(
                f"ledger: active positions {positions_active} exceed dense {positions_dense}")
        self.records.append(LedgerRecord(layer, kernel, c_in, c_out,
                                         positions_dense, positions_active, gated))

    def total_dense(self) -> int:
        return sum(r.flops_dense for r in self.records)

    def total_active(self) -> int:
        return sum(r.flops_active for r in self.records)

    def to_table(self) -> str:
        lines = [f"{'layer':<34} {'K':>2} {'Cin':>5} {'Cout':>5} "
                 f"{'dense':>14} {'active':>14} {'gated':>5}"]
        for r in self.records:
            lines.append(f"{r.layer:<34} {r.kernel:>2} {r.c_in:>5} {r.c_out:>5} "
                         f"{r.flops_dense:>14} {r.flops_active:>14} "
                         f"{'yes' if r.gated else 'no':>5}")
        lines.append(f"{'total':<34} {'':>2} {'':>5} {'':>5} "
                     f"{self.total_dense():>14} {self.total_active():>14}")
        return "\n".join(lines)

    def to_kv(self) -> str:
        lines = []
        for r in self.records:
            lines.append(f"layer={r.layer} k={r.kernel} cin={r.c_in} cout={r.c_out} "
                         f"dense={r.positions_dense} active={r.positions_active}")
        return "\n".join(lines)


def flops_report(ledger: FlopsLedger) -> dict:
    """Summarize a populated ledger. The headline reduction_percent covers the
    sparse-gated layers; non-gated layers are reported separately and included
    in the totals."""
    if not ledger.records:
        raise ContractError("flops_report: ledger is empty")
    gated_dense = sum(r.flops_dense for r in ledger.records if r.gated)
    gated_active = sum(r.flops_active for r in ledger.records if r.gated)
    other_dense = sum(r.flops_dense for r in ledger.records if not r.gated)
    other_active = sum(r.flops_active for r in ledger.records if not r.gated)
    reduction = 0.0
    if gated_dense:
        reduction = 100.0 * (1.0 - gated_active / gated_dense)
    return {
        "total_dense": gated_dense + other_dense,
        "total_active": gated_active + other_active,
        "gated_dense": gated_dense,
        "gated_active": gated_active,
        "other_dense": other_dense,
        "other_active": other_active,
        "reduction_percent": reduction,
    }


# ---------------------------------------------------------------------------
# training path
# ---------------------------------------------------------------------------

def masked_conv_train(x, w, b, mask: PruningMask, stride: int = 1,
                      padding: int | None = None) -> Tensor:
    """conv2d followed by an elementwise mask product, broadcast over channels.

    Gradients flow through both the convolution and the mask, which is what
    lets the Gumbel-softmax mask head learn.
    """
    x, w = as_tensor(x), as_tensor(w)
    if padding is None:
        padding = w.data.shape[2] // 2
    y = conv2d(x, w, b, stride=stride, padding=padding)
    mdata = mask.data if isinstance(mask, PruningMask) else as_tensor(mask)
    if mdata.data.shape[0] != y.data.shape[0] or mdata.data.shape[2:] != y.data.shape[2:]:
        raise DimensionError(
            f"masked_conv_train: mask {mdata.data.shape} does not match conv output {y.data.shape}")
    return mul(y, mdata)


# ---------------------------------------------------------------------------
# inference path
# ---------------------------------------------------------------------------

@dataclass
class SparseLayer:
    """One gated layer for the inference path: 3x3 or 1x1 conv + activation."""

    name: str
    weight: np.ndarray            # (Cout, Cin, K, K)
    bias: np.ndarray | None
    activation: object = None     # None or callable(np.ndarray) -> np.ndarray

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]


def prelu_activation(slope: np.ndarray):
    """Per-channel PReLU on gathered (positions, channels) matrices."""
    s = np.asarray(slope).reshape(1, -1)

    def act(v: np.ndarray) -> np.ndarray:
        return np.where(v >= 0, v, v * s)

    return act


def sparse_conv_infer(x, layers: list[SparseLayer], mask: PruningMask,
                      ledger: FlopsLedger | None = None,
                      name_prefix: str = "") -> np.ndarray:
    """Run a gated block by gathering mask-active positions only.

    Every layer's output buffer starts at zero, so skipped positions hold
    zero throughout the block, exactly like the training-time mask product.
    The first layer reads the raw block input (its halo may cover inactive
    neighbors, whose true values are visible there, matching the training
    semantics where the mask is applied only to outputs).
    """
    if not layers:
        raise ContractError("sparse_conv_infer: empty layer list")
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    n, _, h, w = xd.shape
    if mask.data.data.shape != (n, 1, h, w):
        raise DimensionError(
            f"sparse_conv_infer: mask {mask.data.data.shape} does not match input {xd.shape}")
    index = build_active_index(mask)
    m = index.count
    bi = index.coords[:, 0]
    yi = index.coords[:, 1]
    xi = index.coords[:, 2]

    cur = xd
    for layer in layers:
        k = layer.kernel
        cout, cin = layer.weight.shape[0], layer.weight.shape[1]
        if cur.shape[1] != cin:
            raise DimensionError(
                f"sparse_conv_infer: layer {layer.name} expects {cin} channels, got {cur.shape[1]}")
        out = np.zeros((n, cout, h, w), dtype=cur.dtype)
        if m > 0:
            if k == 3:
                xp = np.pad(cur, ((0, 0), (0, 0), (1, 1), (1, 1)))
                # gather (positions, Cin, 9) neighborhoods around each active site
                patches = np.empty((m, cin, 9), dtype=cur.dtype)
                t = 0
                for di in range(3):
                    for dj in range(3):
                        patches[:, :, t] = xp[bi, :, yi + di, xi + dj]
                        t += 1
                vec = patches.reshape(m, cin * 9) @ layer.weight.reshape(cout, cin * 9).T
            elif k == 1:
                vec = cur[bi, :, yi, xi] @ layer.weight.reshape(cout, cin).T
            else:
                raise ContractError(f"sparse_conv_infer: unsupported kernel {k}")
            if layer.bias is not None:
                vec = vec + layer.bias
            if layer.activation is not None:
                vec = layer.activation(vec)
            out[bi, :, yi, xi] = vec
        if ledger is not None:
            ledger.record(name_prefix + layer.name, k, cin, cout,
                          positions_dense=n * h * w, positions_active=m, gated=True)
        cur = out
    return cur
