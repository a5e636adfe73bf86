"""Phase-2 training losses and their weighted combination."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .ops import avg_downsample, census_distance, laplacian_l1
from .sparse import PruningMask
from .tensor import Tensor, abs_, add, as_tensor, mean, mul, sub, sum_


@dataclass
class LossWeights:
    sparsity: float = 0.01
    mask_guidance: float = 0.01
    self_contrast: float = 0.01
    target_sparsity: float = 0.35


def _mask_tensor(m) -> Tensor:
    return m.data if isinstance(m, PruningMask) else as_tensor(m)


def reconstruction_loss(pred, target, levels: int = 5) -> Tensor:
    """L1 between Laplacian pyramid bands of prediction and target."""
    return laplacian_l1(pred, target, levels=levels)


def sparsity_loss(masks, target_sparsity: float) -> Tensor:
    """|pooled mask mean - target|, batch-averaged.

    All scales share a single normalizer (sum of active values over sum of
    position counts), so finer scales carry proportionally more weight.
    """
    tensors = [_mask_tensor(m) for m in masks]
    total_positions = 0
    acc = None
    for t in tensors:
        n, c, h, w = t.data.shape
        total_positions += c * h * w
        s = sum_(t, axis=(1, 2, 3), keepdims=False)  # (N,)
        acc = s if acc is None else add(acc, s)
    pooled = mul(acc, 1.0 / total_positions)
    return mean(abs_(sub(pooled, target_sparsity)))


def mask_guidance_loss(labels, masks) -> Tensor:
    """Sum over scales of mean |downsampled label - predicted mask|.

    labels are full-resolution binary planes; the label for scale k is
    average-pooled by 2^(k+1) to the resolution of mask k+1.
    """
    if len(labels) != 3 or len(masks) != 3:
        raise ContractError(f"expected 3 labels and 3 masks, got {len(labels)}/{len(masks)}")
    total = None
    for k in range(3):
        label = as_tensor(np.asarray(labels[k], dtype=np.float32)
                          if not isinstance(labels[k], Tensor) else labels[k])
        m = _mask_tensor(masks[k])
        down = avg_downsample(label, 2 ** (k + 1))
        if down.data.shape != m.data.shape:
            raise DimensionError(
                f"scale {k}: downsampled label {down.data.shape} vs mask {m.data.shape}")
        term = mean(abs_(sub(down, m)))
        total = term if total is None else add(total, term)
    return total


def self_contrast_loss(aux_frame, target, aux_features, features) -> Tensor:
    """Reconstruction loss on the non-pruning branch's frame plus census
    distance between the two branches' intermediate features.

    Both branches receive gradients (no detaching): the dense features act
    as soft labels for the pruned ones while the shared weights also learn
    from the dense reconstruction.
    """
    if aux_frame is None or aux_features is None:
        raise ContractError("self-contrast loss requires the dense-branch outputs")
    if len(aux_features) != len(features):
        raise DimensionError(
            f"{len(aux_features)} dense features vs {len(features)} pruned features")
    total = reconstruction_loss(aux_frame, target)
    for fa, fb in zip(aux_features, features):
        total = add(total, census_distance(fa, fb))
    return total


@dataclass
class LossParts:
    rec: Tensor
    sparsity: Tensor
    guidance: Tensor
    self_contrast: Tensor
    total: Tensor = field(default=None)

    def scalars(self) -> dict:
        return {
            "rec": float(self.rec.data),
            "sparsity": float(self.sparsity.data),
            "guidance": float(self.guidance.data),
            "self_contrast": float(self.self_contrast.data),
            "total": float(self.total.data) if self.total is not None else None,
        }


def overall_loss(rec, sparsity, guidance, self_contrast,
                 weights: LossWeights) -> LossParts:
    """rec + w_s * sparsity + w_ugm * guidance + w_sc * self_contrast."""
    total = add(rec, add(mul(sparsity, weights.sparsity),
                         add(mul(guidance, weights.mask_guidance),
                             mul(self_contrast, weights.self_contrast))))
    return LossParts(rec=rec, sparsity=sparsity, guidance=guidance,
                     self_contrast=self_contrast, total=total)
