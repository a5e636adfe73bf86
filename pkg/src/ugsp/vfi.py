"""Coarse-to-fine frame interpolation network with per-scale pruning masks.

Structure (input H x W, divisible by 16):

  encoder     four stride-2 stages, widths (32, 48, 72, 96), shared weights
              between the two input frames
  level 3     dense block at H/16: six 3x3 convolutions whose outputs are
              concatenated and fused by a 1x1 convolution into flow + feature;
              emits the first pruning mask (scale 3, resolution H/8)
  levels 2,1  gated refine blocks: warp the encoder features with the incoming
              flow, run five 3x3 convolutions plus a 1x1 fusion (all gated by
              the incoming mask), upsample flow/feature, emit the next mask
  level 0     gated block whose head is a single 4x4 deconvolution producing,
              at full resolution, 4 flow channels, 1 blend logit and
              3 residual channels, blended into the output frame

Masks gate the block one level finer than the one that produced them, so every
mask exists before anything consumes it. The "dense" mode runs the identical
weights without masks (the auxiliary non-pruning branch); "infer" execution
hardens masks by argmax and routes gated bodies through gather/scatter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .layers import (Conv2d, Deconv2d, ParamStore, PReLU, load_into_store,
                     read_checkpoint, save_model, split_entries)
from .ops import bilinear_resize, gumbel_softmax, warp_backward
from .sparse import (FlopsLedger, PruningMask, SparseLayer, masked_conv_train,
                     prelu_activation, sparse_conv_infer)
from .tensor import (Tensor, add, as_tensor, clamp, concat, mul, narrow,
                     sigmoid, sub)

ENCODER_WIDTHS = (32, 48, 72, 96)
# internal body widths per level, calibrated so the dense ledger lands on the
# reference cost at 256x448 (see README)
BODY_WIDTHS = (72, 96, 144, 192)
FLOW_CHANNELS = 4  # two directions x (u, v)


@dataclass
class ScaleState:
    """What one scale hands to the next-finer block (at that block's resolution)."""

    flow: Tensor    # (N, 4, h, w)
    feat: Tensor    # (N, C, h, w) intermediate interpolation feature


@dataclass
class ForwardResult:
    frame: Tensor                       # (N, 3, H, W) in [0, 1]
    masks: tuple | None                 # (P1, P2, P3) PruningMask or None in dense mode
    features: tuple                     # (feat1, feat2, feat3) as consumed downstream
    flow: Tensor                        # full-resolution 4-channel flow
    blend_logits: Tensor
    residual: Tensor
    ledger: FlopsLedger | None


def _rng_for_head(noise_key, head_index: int) -> np.random.Generator | None:
    if noise_key is None:
        return None
    seed, step = noise_key
    return np.random.default_rng(
        np.random.SeedSequence(entropy=int(seed), spawn_key=(int(step), int(head_index))))


class Encoder:
    """Four downsampling stages of two 3x3 convolutions (strides 2 and 1)."""

    def __init__(self, store: ParamStore, name: str = "encoder"):
        self.stages = []
        c_prev = 3
        for lvl, width in enumerate(ENCODER_WIDTHS):
            c0 = Conv2d(store, f"{name}.l{lvl}.c0", c_prev, width, k=3, stride=2)
            a0 = PReLU(store, f"{name}.l{lvl}.a0", width)
            c1 = Conv2d(store, f"{name}.l{lvl}.c1", width, width, k=3, stride=1)
            a1 = PReLU(store, f"{name}.l{lvl}.a1", width)
            self.stages.append((c0, a0, c1, a1))
            c_prev = width

    def __call__(self, frame: Tensor, ledger: FlopsLedger | None = None) -> list[Tensor]:
        feats = []
        x = frame
        for c0, a0, c1, a1 in self.stages:
            x = a0(c0(x, ledger))
            x = a1(c1(x, ledger))
            feats.append(x)
        return feats


class MaskHead:
    """3x3 conv -> bilinear x2 -> Gumbel softmax, producing the next mask."""

    def __init__(self, store: ParamStore, name: str, c_in: int):
        self.conv = Conv2d(store, f"{name}.logits", c_in, 2, k=3, zero_init=True)

    def __call__(self, x: Tensor, scale_index: int, hard: bool, tau: float,
                 rng: np.random.Generator | None,
                 ledger: FlopsLedger | None = None) -> PruningMask:
        logits = bilinear_resize(self.conv(x, ledger), 2)
        mask = gumbel_softmax(logits, tau=tau, rng=rng, hard=hard)
        return PruningMask(scale_index=scale_index, data=mask,
                           mode="hard" if hard else "soft")


class GatedBody:
    """n 3x3 convolutions (PReLU) plus a 1x1 fusion, optionally mask-gated."""

    def __init__(self, store: ParamStore, name: str, c_in: int, width: int,
                 c_out: int, body_convs: int = 5, zero_init_fuse: bool = True):
        self.convs: list[Conv2d] = []
        self.acts: list[PReLU] = []
        c_prev = c_in
        for i in range(body_convs):
            self.convs.append(Conv2d(store, f"{name}.c{i}", c_prev, width, k=3))
            self.acts.append(PReLU(store, f"{name}.a{i}", width))
            c_prev = width
        self.fuse = Conv2d(store, f"{name}.fuse", width, c_out, k=1,
                           zero_init=zero_init_fuse)

    def __call__(self, x: Tensor, mask: PruningMask | None, exec_mode: str,
                 ledger: FlopsLedger | None = None) -> Tensor:
        if mask is not None and exec_mode == "infer":
            layers = [SparseLayer(c.name, c.w.data, c.b.data,
                                  prelu_activation(a.slope.data))
                      for c, a in zip(self.convs, self.acts)]
            layers.append(SparseLayer(self.fuse.name, self.fuse.w.data,
                                      self.fuse.b.data, None))
            return Tensor(sparse_conv_infer(x, layers, mask, ledger))
        t = x
        for conv, act in zip(self.convs, self.acts):
            if mask is not None:
                # PReLU is positively homogeneous, so masking before or after
                # the activation is equivalent
                t = act(masked_conv_train(t, conv.w, conv.b, mask))
                if ledger is not None:
                    n, _, oh, ow = t.data.shape
                    ledger.record(conv.name, conv.k, conv.c_in, conv.c_out,
                                  positions_dense=n * oh * ow, gated=True)
            else:
                t = act(conv(t, ledger, gated=True))
        fused = self.fuse(t, ledger, gated=True)
        if mask is not None:
            fused = mul(fused, mask.data)
        return fused


class CoarseBlock:
    """Dense block at the coarsest scale: six 3x3 convs, concatenated outputs,
    1x1 fusion, bilinear-upsampled flow/feature, and the first mask head."""

    N_CONVS = 6

    def __init__(self, store: ParamStore, name: str = "coarse",
                 mask_head: bool = True):
        width = BODY_WIDTHS[3]
        feat_out = ENCODER_WIDTHS[3]
        self.convs: list[Conv2d] = []
        self.acts: list[PReLU] = []
        c_prev = 2 * ENCODER_WIDTHS[3]
        for i in range(self.N_CONVS):
            self.convs.append(Conv2d(store, f"{name}.c{i}", c_prev, width, k=3))
            self.acts.append(PReLU(store, f"{name}.a{i}", width))
            c_prev = width
        self.fuse = Conv2d(store, f"{name}.fuse", self.N_CONVS * width,
                           FLOW_CHANNELS + feat_out, k=1, zero_init=True)
        self.mask_head = MaskHead(store, f"{name}.mask", FLOW_CHANNELS + feat_out) \
            if mask_head else None
        self.feat_out = feat_out

    def __call__(self, phi3_0: Tensor, phi3_1: Tensor, *, want_mask: bool,
                 hard: bool, tau: float, rng, ledger=None):
        t = concat([phi3_0, phi3_1], axis=1)
        outs = []
        for conv, act in zip(self.convs, self.acts):
            t = act(conv(t, ledger))
            outs.append(t)
        refined = self.fuse(concat(outs, axis=1), ledger)
        flow = narrow(refined, 1, 0, FLOW_CHANNELS)
        feat = narrow(refined, 1, FLOW_CHANNELS, self.feat_out)
        state = ScaleState(flow=bilinear_resize(flow, 2, is_flow=True),
                           feat=bilinear_resize(feat, 2))
        mask = None
        if want_mask and self.mask_head is not None:
            mask = self.mask_head(refined, scale_index=3, hard=hard, tau=tau,
                                  rng=rng, ledger=ledger)
        return state, mask


class RefineBlock:
    """Gated block at levels 2 and 1."""

    def __init__(self, store: ParamStore, name: str, level: int,
                 body_convs: int = 5, mask_head: bool = True):
        feat_in = ENCODER_WIDTHS[level + 1]
        enc = ENCODER_WIDTHS[level]
        self.level = level
        self.feat_out = ENCODER_WIDTHS[level]
        c_in = feat_in + 2 * enc + FLOW_CHANNELS
        c_out = FLOW_CHANNELS + self.feat_out
        self.body = GatedBody(store, f"{name}.body", c_in, BODY_WIDTHS[level],
                              c_out, body_convs=body_convs)
        self.mask_head = MaskHead(store, f"{name}.mask", c_out) if mask_head else None

    def __call__(self, phi_0: Tensor, phi_1: Tensor, state: ScaleState,
                 gate: PruningMask | None, exec_mode: str, *, want_mask: bool,
                 hard: bool, tau: float, rng, ledger=None):
        w0 = warp_backward(phi_0, narrow(state.flow, 1, 0, 2))
        w1 = warp_backward(phi_1, narrow(state.flow, 1, 2, 2))
        xin = concat([state.feat, w0, w1, state.flow], axis=1)
        refined = self.body(xin, gate, exec_mode, ledger)
        flow = narrow(refined, 1, 0, FLOW_CHANNELS)
        feat = narrow(refined, 1, FLOW_CHANNELS, self.feat_out)
        out_state = ScaleState(flow=bilinear_resize(flow, 2, is_flow=True),
                               feat=bilinear_resize(feat, 2))
        mask = None
        if want_mask and self.mask_head is not None:
            mask = self.mask_head(refined, scale_index=self.level, hard=hard,
                                  tau=tau, rng=rng, ledger=ledger)
        return out_state, mask


class SynthesisBlock:
    """Gated block at level 0; one deconvolution emits flow, blend logit and
    residual at full resolution."""

    def __init__(self, store: ParamStore, name: str = "synth", body_convs: int = 5):
        enc = ENCODER_WIDTHS[0]
        feat_in = ENCODER_WIDTHS[1]
        width = BODY_WIDTHS[0]
        c_in = feat_in + 2 * enc + FLOW_CHANNELS
        self.body = GatedBody(store, f"{name}.body", c_in, width, width,
                              body_convs=body_convs, zero_init_fuse=False)
        self.head = Deconv2d(store, f"{name}.head", width, FLOW_CHANNELS + 1 + 3,
                             zero_init=True)

    def __call__(self, phi_0: Tensor, phi_1: Tensor, state: ScaleState,
                 gate: PruningMask | None, exec_mode: str, ledger=None):
        w0 = warp_backward(phi_0, narrow(state.flow, 1, 0, 2))
        w1 = warp_backward(phi_1, narrow(state.flow, 1, 2, 2))
        xin = concat([state.feat, w0, w1, state.flow], axis=1)
        refined = self.body(xin, gate, exec_mode, ledger)
        head = self.head(refined, ledger)
        flow = mul(narrow(head, 1, 0, FLOW_CHANNELS), 2.0)  # displacement units double
        blend_logits = narrow(head, 1, FLOW_CHANNELS, 1)
        residual = narrow(head, 1, FLOW_CHANNELS + 1, 3)
        return flow, blend_logits, residual


def synthesize(i0, i1, flow, blend_logits, residual) -> Tensor:
    """Blend the two warped inputs with a sigmoid mask, add the residual, and
    clamp to [0, 1]."""
    i0, i1 = as_tensor(i0), as_tensor(i1)
    m = sigmoid(blend_logits)
    w0 = warp_backward(i0, narrow(flow, 1, 0, 2))
    w1 = warp_backward(i1, narrow(flow, 1, 2, 2))
    out = add(add(mul(m, w0), mul(sub(1.0, m), w1)), residual)
    return clamp(out, 0.0, 1.0)


class InterpolationNet:
    """The full interpolation model (pruned and dense branches share weights)."""

    ARCH_ID = 0.0

    def __init__(self, seed: int = 0, body_convs: int = 5, dtype=np.float32):
        self.store = ParamStore(seed, dtype=dtype)
        self.body_convs = body_convs
        self.encoder = Encoder(self.store)
        self.coarse = CoarseBlock(self.store)
        self.refine2 = RefineBlock(self.store, "refine2", level=2, body_convs=body_convs)
        self.refine1 = RefineBlock(self.store, "refine1", level=1, body_convs=body_convs)
        self.synth = SynthesisBlock(self.store, body_convs=body_convs)

    # -- parameter access ---------------------------------------------------

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

    # -- forward ------------------------------------------------------------

    def _check_inputs(self, i0: Tensor, i1: Tensor) -> None:
        if i0.data.shape != i1.data.shape:
            raise DimensionError(f"input frames disagree: {i0.data.shape} vs {i1.data.shape}")
        n, c, h, w = i0.data.shape
        if c != 3:
            raise DimensionError(f"expected 3-channel frames, got {i0.data.shape}")
        if h % 16 or w % 16:
            raise ContractError(f"frame extent {h}x{w} must be divisible by 16")

    def forward(self, i0, i1, mode: str = "pruned", exec_mode: str = "train",
                tau: float = 1.0, noise_key: tuple | None = None,
                ledger: FlopsLedger | None = None,
                forced_masks: dict | None = None) -> ForwardResult:
        """Run the network.

        mode "pruned" predicts masks and gates the blocks with them; "dense"
        is the weight-shared auxiliary branch without masks. exec_mode
        "train" keeps masks soft (Gumbel noise from noise_key); "infer"
        hardens them by argmax, without noise, and uses gather/scatter for
        the gated bodies. forced_masks ({scale_index: PruningMask}) overrides
        predicted masks, e.g. to force all-ones.
        """
        if mode not in ("pruned", "dense"):
            raise ContractError(f"unknown mode {mode!r}")
        if exec_mode not in ("train", "infer"):
            raise ContractError(f"unknown exec mode {exec_mode!r}")
        i0, i1 = as_tensor(i0), as_tensor(i1)
        self._check_inputs(i0, i1)
        pruned = mode == "pruned"
        hard = exec_mode == "infer"

        def override(mask, scale):
            if forced_masks and scale in forced_masks:
                return forced_masks[scale]
            return mask

        phis0 = self.encoder(i0, ledger)
        phis1 = self.encoder(i1, ledger)

        state, p3 = self.coarse(phis0[3], phis1[3], want_mask=pruned, hard=hard,
                                tau=tau, rng=_rng_for_head(noise_key, 3), ledger=ledger)
        p3 = override(p3, 3)
        feat3 = state.feat

        state, p2 = self.refine2(phis0[2], phis1[2], state, p3 if pruned else None,
                                 exec_mode, want_mask=pruned, hard=hard, tau=tau,
                                 rng=_rng_for_head(noise_key, 2), ledger=ledger)
        p2 = override(p2, 2)
        feat2 = state.feat

        state, p1 = self.refine1(phis0[1], phis1[1], state, p2 if pruned else None,
                                 exec_mode, want_mask=pruned, hard=hard, tau=tau,
                                 rng=_rng_for_head(noise_key, 1), ledger=ledger)
        p1 = override(p1, 1)
        feat1 = state.feat

        flow, blend_logits, residual = self.synth(
            phis0[0], phis1[0], state, p1 if pruned else None, exec_mode, ledger)
        frame = synthesize(i0, i1, flow, blend_logits, residual)

        return ForwardResult(frame=frame,
                             masks=(p1, p2, p3) if pruned else None,
                             features=(feat1, feat2, feat3),
                             flow=flow, blend_logits=blend_logits,
                             residual=residual, ledger=ledger)
