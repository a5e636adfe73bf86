"""Uncertainty estimation: the phase-1 network, its heteroscedastic loss, and
quantile thresholding of uncertainty fields into binary pruning-mask labels.

The backbone is the interpolation network without mask heads. Three extra
head groups hang off the intermediate features:

  uncertainty heads  nearest-upsample to input resolution, then 2/3/4 blocks
                     of (3x3 conv + ELU) for scales 0/1/2; the last
                     convolution is linear and zero-initialized so an
                     untrained head predicts exactly zero
  frame heads        (3x3 conv + PReLU + 4x4 deconv) blocks lifting the
                     scale-1 and scale-2 features to full-resolution frame
                     estimates; scale 0 is the network's native blended
                     output. Each head also sees the input frames warped to
                     its scale by the backbone flow, so easy (static) content
                     reduces to a copy and the residual concentrates where
                     motion is actually hard.

Label cache format (little-endian): magic "UGSPLBL1", then per-sample records
{sample_id u64, three bit-packed planes each prefixed by H u32, W u32}.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, FormatError
from .layers import (Conv2d, Deconv2d, ParamStore, PReLU, load_into_store,
                     read_checkpoint, save_model, split_entries)
from .ops import avg_downsample, nearest_upsample, warp_backward
from .tensor import (Tensor, abs_, add, as_tensor, concat, elu, exp, mean,
                     mul, narrow, neg, sub)
from .vfi import (CoarseBlock, Encoder, RefineBlock, SynthesisBlock,
                  synthesize)

LABEL_MAGIC = b"UGSPLBL1"
DEFAULT_ALPHAS = (20.0, 40.0, 80.0)


class UncertaintyHead:
    """Nearest-upsample then a chain of 3x3 convolutions with ELU between."""

    HIDDEN = 16

    def __init__(self, store: ParamStore, name: str, c_in: int, n_convs: int,
                 up_factor: int):
        self.up_factor = up_factor
        self.convs = []
        c_prev = c_in
        for i in range(n_convs - 1):
            self.convs.append(Conv2d(store, f"{name}.c{i}", c_prev, self.HIDDEN, k=3))
            c_prev = self.HIDDEN
        self.final = Conv2d(store, f"{name}.c{n_convs - 1}", c_prev, 1, k=3,
                            zero_init=True)

    def __call__(self, feat: Tensor) -> Tensor:
        x = nearest_upsample(feat, self.up_factor)
        for conv in self.convs:
            x = elu(conv(x))
        return self.final(x)


class FrameHead:
    """Blocks of (3x3 conv + PReLU + deconv) ending in a 3-channel frame."""

    def __init__(self, store: ParamStore, name: str, c_in: int, widths: list[int]):
        # widths[i] is the conv width of block i; the last deconv emits 3 channels
        self.blocks = []
        c_prev = c_in
        for i, width in enumerate(widths):
            conv = Conv2d(store, f"{name}.b{i}.conv", c_prev, width, k=3)
            act = PReLU(store, f"{name}.b{i}.act", width)
            c_out = 3 if i == len(widths) - 1 else width
            dec = Deconv2d(store, f"{name}.b{i}.up", width, c_out)
            self.blocks.append((conv, act, dec))
            c_prev = c_out

    def __call__(self, feat: Tensor) -> Tensor:
        x = feat
        for conv, act, dec in self.blocks:
            x = dec(act(conv(x)))
        return x


@dataclass
class UenOutput:
    frames: tuple       # full-resolution frame estimates for scales 0, 1, 2
    uncertainty: tuple  # (U0, U1, U2), each (N, 1, H, W)


class UncertaintyNet:
    """Phase-1 model predicting per-pixel frame means and uncertainty fields."""

    ARCH_ID = 1.0

    def __init__(self, seed: int = 0, body_convs: int = 5, dtype=np.float32):
        self.store = ParamStore(seed, dtype=dtype)
        self.body_convs = body_convs
        self.encoder = Encoder(self.store)
        self.coarse = CoarseBlock(self.store, mask_head=False)
        self.refine2 = RefineBlock(self.store, "refine2", level=2,
                                   body_convs=body_convs, mask_head=False)
        self.refine1 = RefineBlock(self.store, "refine1", level=1,
                                   body_convs=body_convs, mask_head=False)
        self.synth = SynthesisBlock(self.store, body_convs=body_convs)
        c1, c2, c3 = 48, 72, 96  # widths of the consumed intermediate features
        # +6 channels everywhere: the two input frames warped to the head's
        # scale; their disagreement is a direct difficulty cue
        self.unc0 = UncertaintyHead(self.store, "unc0", c1 + 6, n_convs=2, up_factor=2)
        self.unc1 = UncertaintyHead(self.store, "unc1", c2 + 6, n_convs=3, up_factor=4)
        self.unc2 = UncertaintyHead(self.store, "unc2", c3 + 6, n_convs=4, up_factor=8)
        self.frame1 = FrameHead(self.store, "frame1", c1 + 6, widths=[48])
        self.frame2 = FrameHead(self.store, "frame2", c2 + 6, widths=[48, 24])

    def parameters(self):
        return list(self.store.values())

    def save(self, path, opt_state=None, extra_meta=None) -> None:
        meta = {"arch": self.ARCH_ID, "body_convs": float(self.body_convs)}
        meta.update(extra_meta or {})
        save_model(path, self.store, meta=meta, opt_state=opt_state)

    @classmethod
    def load(cls, path, dtype=np.float32):
        entries = read_checkpoint(path)
        meta, params, opt = split_entries(entries)
        net = cls(seed=0, body_convs=int(meta.get("body_convs", 5)), dtype=dtype)
        load_into_store(net.store, params)
        return net, meta, opt

    def forward(self, i0, i1) -> UenOutput:
        i0, i1 = as_tensor(i0), as_tensor(i1)
        n, c, h, w = i0.data.shape
        if i0.data.shape != i1.data.shape or c != 3:
            raise DimensionError(
                f"uncertainty net expects matching 3-channel frames, got {i0.data.shape} / {i1.data.shape}")
        if h % 16 or w % 16:
            raise ContractError(f"frame extent {h}x{w} must be divisible by 16")
        phis0 = self.encoder(i0)
        phis1 = self.encoder(i1)
        state, _ = self.coarse(phis0[3], phis1[3], want_mask=False, hard=False,
                               tau=1.0, rng=None)
        feat3, flow3 = state.feat, state.flow
        state, _ = self.refine2(phis0[2], phis1[2], state, None, "train",
                                want_mask=False, hard=False, tau=1.0, rng=None)
        feat2, flow2 = state.feat, state.flow
        state, _ = self.refine1(phis0[1], phis1[1], state, None, "train",
                                want_mask=False, hard=False, tau=1.0, rng=None)
        feat1, flow1 = state.feat, state.flow
        flow, blend_logits, residual = self.synth(phis0[0], phis1[0], state,
                                                  None, "train")
        frame0 = synthesize(i0, i1, flow, blend_logits, residual)

        def scale_warps(factor, fl):
            d0 = avg_downsample(i0, factor)
            d1 = avg_downsample(i1, factor)
            return (warp_backward(d0, narrow(fl, 1, 0, 2)),
                    warp_backward(d1, narrow(fl, 1, 2, 2)))

        w10, w11 = scale_warps(2, flow1)
        w20, w21 = scale_warps(4, flow2)
        w30, w31 = scale_warps(8, flow3)
        frames = (frame0,
                  self.frame1(concat([feat1, w10, w11], axis=1)),
                  self.frame2(concat([feat2, w20, w21], axis=1)))
        uncertainty = (self.unc0(concat([feat1, w10, w11], axis=1)),
                       self.unc1(concat([feat2, w20, w21], axis=1)),
                       self.unc2(concat([feat3, w30, w31], axis=1)))
        return UenOutput(frames=frames, uncertainty=uncertainty)


def uncertainty_loss(pred, target, log_var) -> Tensor:
    """Per-pixel exp(-U)*|err| + 2U, averaged over pixels, batch and levels.

    pred/log_var may be single tensors or equal-length sequences (one per
    scale). The residual is the per-pixel mean over color channels. For a
    fixed residual e the pointwise minimum over U sits at U* = ln(e/2).
    """
    preds = pred if isinstance(pred, (list, tuple)) else [pred]
    uncs = log_var if isinstance(log_var, (list, tuple)) else [log_var]
    if len(preds) != len(uncs):
        raise DimensionError(f"{len(preds)} predictions vs {len(uncs)} uncertainty fields")
    target = as_tensor(target)
    total = None
    for p, u in zip(preds, uncs):
        p, u = as_tensor(p), as_tensor(u)
        if p.data.shape != target.data.shape:
            raise DimensionError(
                f"prediction {p.data.shape} does not match target {target.data.shape}")
        if u.data.shape[2:] != target.data.shape[2:]:
            raise DimensionError(
                f"uncertainty {u.data.shape} does not match target {target.data.shape}")
        resid = mean(abs_(sub(p, target)), axis=1, keepdims=True)
        term = mean(add(mul(exp(neg(u)), resid), mul(u, 2.0)))
        total = term if total is None else add(total, term)
    return mul(total, 1.0 / len(preds))


# ---------------------------------------------------------------------------
# mask labels
# ---------------------------------------------------------------------------

@dataclass
class MaskLabelSet:
    """Binary full-resolution supervision planes for the three mask scales.

    planes[k] has the fraction 1 - alphas[k]% of ones (up to ties): the label
    at scale k marks the (100 - alpha_{k+1})% most uncertain pixels of U_k.
    """

    planes: list[np.ndarray]  # three (N, 1, H, W) float32 arrays in {0, 1}
    alphas: tuple


def alphas_for_sparsity(target_sparsity: float) -> tuple:
    """Scale the default thresholds, keeping the 1:2:4 ratio of per-level skip
    fractions, anchored at (20, 40, 80) for a 0.35 target; capped at 95."""
    base = 20.0 * (1.0 - target_sparsity) / 0.65
    return tuple(min(95.0, base * m) for m in (1.0, 2.0, 4.0))


def mask_labels_from_uncertainty(uncertainty, alphas=DEFAULT_ALPHAS) -> MaskLabelSet:
    """Threshold each uncertainty field at its per-sample alpha% quantile.

    The threshold is the ascending-sorted value at 0-based index
    floor(alpha/100 * H*W); a pixel is labeled 1 iff its uncertainty is
    strictly greater, so labels depend only on the rank order of U.
    """
    if len(alphas) != 3:
        raise ContractError(f"expected three alpha values, got {alphas!r}")
    for a in alphas:
        if not (0 <= a < 100):
            raise ContractError(f"alpha {a} outside [0, 100)")
    planes = []
    for k, u in enumerate(uncertainty):
        ud = u.data if isinstance(u, Tensor) else np.asarray(u)
        n, c, h, w = ud.shape
        flat = ud.reshape(n, h * w)
        idx = int(np.floor(alphas[k] / 100.0 * h * w))
        idx = min(idx, h * w - 1)
        thresh = np.sort(flat, axis=1)[:, idx][:, None]
        labels = (flat > thresh).astype(np.float32).reshape(n, 1, h, w)
        planes.append(labels)
    return MaskLabelSet(planes=planes, alphas=tuple(alphas))


# ---------------------------------------------------------------------------
# label cache io
# ---------------------------------------------------------------------------

def save_labels(path, cache: dict[int, list[np.ndarray]]) -> None:
    """cache maps sample_id -> three (H, W) binary planes."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC)
        for sample_id in sorted(cache):
            planes = cache[sample_id]
            if len(planes) != 3:
                raise ContractError(f"sample {sample_id}: expected 3 planes, got {len(planes)}")
            fh.write(struct.pack("<Q", sample_id))
            for plane in planes:
                plane = np.asarray(plane)
                if plane.ndim != 2:
                    raise ContractError(f"label plane must be 2-D, got {plane.shape}")
                bits = (plane > 0.5).astype(np.uint8)
                fh.write(struct.pack("<II", bits.shape[0], bits.shape[1]))
                fh.write(np.packbits(bits.reshape(-1)).tobytes())


def load_labels(path) -> dict[int, list[np.ndarray]]:
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(LABEL_MAGIC)] != LABEL_MAGIC:
        raise FormatError(f"label cache {path}: bad magic")
    off = len(LABEL_MAGIC)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"label cache {path}: truncated at byte {off}")
        out = blob[off:off + n]
        off += n
        return out

    cache: dict[int, list[np.ndarray]] = {}
    while off < len(blob):
        (sample_id,) = struct.unpack("<Q", take(8))
        planes = []
        for _ in range(3):
            h, w = struct.unpack("<II", take(8))
            nbytes = (h * w + 7) // 8
            bits = np.unpackbits(np.frombuffer(take(nbytes), dtype=np.uint8))
            planes.append(bits[:h * w].reshape(h, w).astype(np.float32))
        cache[sample_id] = planes
    return cache
