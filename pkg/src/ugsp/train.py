"""Two-phase training orchestration, the AdamW optimizer, and schedules.

Phase 1 trains the uncertainty network with the heteroscedastic loss alone,
then sweeps the full training set once to generate and cache binary mask
labels. Phase 2 trains the interpolation network; the four loss terms are
combined into a single backward pass (the four sequential updates evaluate
all gradients at the same parameters, so one combined step is equivalent for
one iteration and four times cheaper).

Gumbel noise is resampled every forward, seeded from (seed, global step,
mask-head index), so runs and checkpoint resumes are bitwise reproducible.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, TrainingDiverged
from .losses import (LossWeights, mask_guidance_loss, overall_loss,
                     reconstruction_loss, self_contrast_loss, sparsity_loss)
from .tensor import Parameter, Tensor, backward, zero_grads
from .uen import (UncertaintyNet, mask_labels_from_uncertainty, save_labels,
                  uncertainty_loss)
from .vfi import InterpolationNet


@dataclass
class TrainConfig:
    seed: int = 0
    phase1_epochs: int = 30
    phase2_epochs: int = 60
    batch_size: int = 8
    patch: int = 64
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    weight_decay: float = 1e-4
    target_sparsity: float = 0.35
    alphas: tuple = (20.0, 40.0, 80.0)
    weight_sparsity: float = 0.01
    weight_mask_guidance: float = 0.01
    weight_self_contrast: float = 0.01
    tau_start: float = 5.0
    tau_end: float = 0.1
    body_convs: int = 5
    steps_per_epoch: int | None = None
    flip_augment: bool = True
    log_every: int = 1

    def __post_init__(self):
        if self.lr_end > self.lr_start:
            raise ContractError(f"lr_end {self.lr_end} exceeds lr_start {self.lr_start}")
        if self.tau_end > self.tau_start:
            raise ContractError(f"tau_end {self.tau_end} exceeds tau_start {self.tau_start}")
        for name in ("lr_start", "lr_end", "tau_start", "tau_end", "batch_size", "patch"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.patch % 16:
            raise ContractError(f"patch {self.patch} must be a multiple of 16")

    def loss_weights(self) -> LossWeights:
        return LossWeights(sparsity=self.weight_sparsity,
                           mask_guidance=self.weight_mask_guidance,
                           self_contrast=self.weight_self_contrast,
                           target_sparsity=self.target_sparsity)


def cosine_lr(epoch: int, total: int, lr_start: float, lr_end: float) -> float:
    if total <= 1:
        return lr_start
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * epoch / (total - 1)))


def tau_schedule(epoch: int, total: int, tau_start: float, tau_end: float) -> float:
    if total <= 1:
        return tau_start
    return tau_start * (tau_end / tau_start) ** (epoch / (total - 1))


class AdamW:
    """Adam with decoupled weight decay and bias correction."""

    def __init__(self, params: list[Parameter], betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.params = params
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * update - lr * self.weight_decay * p.data

    def zero_grads(self) -> None:
        zero_grads(self.params)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"t": np.asarray([float(self.t)], dtype=np.float32)}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"{p.name}.m"] = m
            out[f"{p.name}.v"] = v
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"].reshape(-1)[0])
        for i, p in enumerate(self.params):
            self.m[i] = state[f"{p.name}.m"].astype(p.data.dtype).reshape(p.data.shape)
            self.v[i] = state[f"{p.name}.v"].astype(p.data.dtype).reshape(p.data.shape)


# ---------------------------------------------------------------------------
# batching helpers
# ---------------------------------------------------------------------------

def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(7, epoch)))
    return rng.permutation(n)


def _augment_batch(cfg: TrainConfig, epoch: int, step: int, triplets,
                   labels=None):
    """Aligned random crop (multiples of 16) and horizontal flip."""
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=cfg.seed, spawn_key=(11, epoch, step)))
    f0, fg, f1 = [], [], []
    planes = [[], [], []] if labels is not None else None
    for item, lab in zip(triplets, labels or [None] * len(triplets)):
        h, w = item.frame0.shape[-2:]
        ph = min(cfg.patch, (h // 16) * 16)
        pw = min(cfg.patch, (w // 16) * 16)
        top = int(rng.integers(0, h - ph + 1))
        left = int(rng.integers(0, w - pw + 1))
        flip = cfg.flip_augment and rng.random() < 0.5
        sl = np.s_[..., top:top + ph, left:left + pw]

        def cut(a):
            a = a[sl]
            return a[..., ::-1].copy() if flip else a.copy()

        f0.append(cut(item.frame0))
        fg.append(cut(item.frame_gt))
        f1.append(cut(item.frame1))
        if labels is not None:
            for k in range(3):
                planes[k].append(cut(lab[k]))
    out = (np.stack(f0), np.stack(fg), np.stack(f1))
    if labels is not None:
        stacked = [np.stack(p)[:, None] for p in planes]  # (N, 1, H, W)
        return out, stacked
    return out, None


def _steps_for(cfg: TrainConfig, n: int) -> int:
    per_epoch = n // cfg.batch_size
    if cfg.steps_per_epoch is not None:
        per_epoch = min(per_epoch, cfg.steps_per_epoch)
    return max(per_epoch, 1)


# ---------------------------------------------------------------------------
# phase 1
# ---------------------------------------------------------------------------

def generate_labels(net: UncertaintyNet, dataset, alphas,
                    batch_size: int = 8) -> dict[int, list[np.ndarray]]:
    """Sweep the dataset, predict uncertainty, and threshold into labels."""
    from .tensor import no_grad
    cache: dict[int, list[np.ndarray]] = {}
    ids = list(range(len(dataset)))
    for start in range(0, len(ids), batch_size):
        chunk = [dataset[i] for i in ids[start:start + batch_size]]
        i0 = np.stack([t.frame0 for t in chunk])
        i1 = np.stack([t.frame1 for t in chunk])
        with no_grad():
            out = net.forward(Tensor(i0), Tensor(i1))
        labels = mask_labels_from_uncertainty(out.uncertainty, alphas)
        for j, t in enumerate(chunk):
            cache[t.sample_id] = [labels.planes[k][j, 0] for k in range(3)]
    return cache


def train_phase1(dataset, cfg: TrainConfig, out_dir, log=None,
                 resume=None) -> tuple[UncertaintyNet, Path, Path]:
    """Train the uncertainty network, then write the label cache.

    Returns (net, checkpoint path, label cache path).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    net = UncertaintyNet(seed=cfg.seed, body_convs=cfg.body_convs)
    opt = AdamW(net.parameters(), weight_decay=cfg.weight_decay)
    start_epoch = 0
    if resume is not None:
        net, meta, opt_state = UncertaintyNet.load(resume)
        opt = AdamW(net.parameters(), weight_decay=cfg.weight_decay)
        if opt_state:
            opt.load_state(opt_state)
        start_epoch = int(meta.get("epoch", 0))
    steps = _steps_for(cfg, len(dataset))
    for epoch in range(start_epoch, cfg.phase1_epochs):
        lr = cosine_lr(epoch, cfg.phase1_epochs, cfg.lr_start, cfg.lr_end)
        order = _epoch_order(cfg.seed, epoch, len(dataset))
        for step in range(steps):
            idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            batch = [dataset[int(i)] for i in idx]
            (i0, igt, i1), _ = _augment_batch(cfg, epoch, step, batch)
            out = net.forward(Tensor(i0), Tensor(i1))
            loss = uncertainty_loss(list(out.frames), Tensor(igt),
                                    list(out.uncertainty))
            val = float(loss.data)
            if not np.isfinite(val):
                raise TrainingDiverged(
                    f"phase1 loss non-finite at epoch {epoch} step {step} "
                    f"(batch ids {list(map(int, idx))}, loss {val})")
            opt.zero_grads()
            backward(loss)
            opt.step(lr)
            if log and step % cfg.log_every == 0:
                log(f"phase1 epoch={epoch} step={step} lr={lr:.3e} loss_su={val:.5f}")
    cache = generate_labels(net, dataset, cfg.alphas, batch_size=cfg.batch_size)
    label_path = out_dir / "labels.bin"
    save_labels(label_path, cache)
    ckpt_path = out_dir / "uen.ckpt"
    net.save(ckpt_path, opt_state=opt.state_dict(),
             extra_meta={"epoch": float(cfg.phase1_epochs)})
    return net, ckpt_path, label_path


# ---------------------------------------------------------------------------
# phase 2
# ---------------------------------------------------------------------------

def train_phase2(dataset, labels: dict[int, list[np.ndarray]] | None,
                 cfg: TrainConfig, out_dir, log=None, resume=None,
                 dense_only: bool = False) -> tuple[InterpolationNet, Path]:
    """Train the interpolation network with the combined loss.

    labels may be omitted only when the mask-guidance weight is zero.
    dense_only trains the non-pruning baseline (reconstruction loss alone).
    Returns (net, checkpoint path).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = cfg.loss_weights()
    if labels is None and weights.mask_guidance > 0 and not dense_only:
        raise ContractError("mask-guidance weight is positive but no labels were given")
    net = InterpolationNet(seed=cfg.seed, body_convs=cfg.body_convs)
    opt = AdamW(net.parameters(), weight_decay=cfg.weight_decay)
    start_epoch = 0
    if resume is not None:
        net, meta, opt_state = InterpolationNet.load(resume)
        opt = AdamW(net.parameters(), weight_decay=cfg.weight_decay)
        if opt_state:
            opt.load_state(opt_state)
        start_epoch = int(meta.get("epoch", 0))
    steps = _steps_for(cfg, len(dataset))
    zero = Tensor(np.zeros((), dtype=np.float32))
    for epoch in range(start_epoch, cfg.phase2_epochs):
        lr = cosine_lr(epoch, cfg.phase2_epochs, cfg.lr_start, cfg.lr_end)
        tau = tau_schedule(epoch, cfg.phase2_epochs, cfg.tau_start, cfg.tau_end)
        order = _epoch_order(cfg.seed, epoch, len(dataset))
        for step in range(steps):
            global_step = epoch * steps + step
            idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            batch = [dataset[int(i)] for i in idx]
            batch_labels = None
            if labels is not None and not dense_only:
                try:
                    batch_labels = [labels[t.sample_id] for t in batch]
                except KeyError as missing:
                    raise ContractError(f"no cached label for sample {missing}") from None
            (i0, igt, i1), planes = _augment_batch(cfg, epoch, step, batch,
                                                   batch_labels)
            t0, tgt, t1 = Tensor(i0), Tensor(igt), Tensor(i1)

            if dense_only:
                result = net.forward(t0, t1, mode="dense")
                parts_total = reconstruction_loss(result.frame, tgt)
                rec_v = float(parts_total.data)
                if not np.isfinite(rec_v):
                    raise TrainingDiverged(
                        f"dense loss non-finite at epoch {epoch} step {step} "
                        f"(batch ids {list(map(int, idx))})")
                opt.zero_grads()
                backward(parts_total)
                opt.step(lr)
                if log and step % cfg.log_every == 0:
                    log(f"dense epoch={epoch} step={step} lr={lr:.3e} rec={rec_v:.5f}")
                continue

            result = net.forward(t0, t1, mode="pruned", exec_mode="train",
                                 tau=tau, noise_key=(cfg.seed, global_step))
            rec = reconstruction_loss(result.frame, tgt)
            spars = sparsity_loss(result.masks, weights.target_sparsity)
            guide = mask_guidance_loss(planes, result.masks) \
                if (planes is not None and weights.mask_guidance > 0) else zero
            if weights.self_contrast > 0:
                aux = net.forward(t0, t1, mode="dense")
                sc = self_contrast_loss(aux.frame, tgt, aux.features,
                                        result.features)
            else:
                sc = zero
            parts = overall_loss(rec, spars, guide, sc, weights)
            vals = parts.scalars()
            if not np.isfinite(vals["total"]):
                raise TrainingDiverged(
                    f"phase2 loss non-finite at epoch {epoch} step {step} "
                    f"(batch ids {list(map(int, idx))}, parts {vals})")
            opt.zero_grads()
            backward(parts.total)
            opt.step(lr)
            if log and step % cfg.log_every == 0:
                dens = [float(m.data.data.mean()) for m in result.masks]
                log(f"phase2 epoch={epoch} step={step} lr={lr:.3e} tau={tau:.3f} "
                    f"rec={vals['rec']:.5f} s={vals['sparsity']:.5f} "
                    f"ugm={vals['guidance']:.5f} sc={vals['self_contrast']:.5f} "
                    f"d1={dens[0]:.3f} d2={dens[1]:.3f} d3={dens[2]:.3f}")
    ckpt_path = out_dir / ("vfi_dense.ckpt" if dense_only else "vfi.ckpt")
    net.save(ckpt_path, opt_state=opt.state_dict(),
             extra_meta={"epoch": float(cfg.phase2_epochs)})
    return net, ckpt_path
