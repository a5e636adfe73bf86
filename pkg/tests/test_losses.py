"""Training losses: identities, hand-computed values, gradient behavior."""

import numpy as np
import pytest

from ugsp.errors import ContractError, DimensionError
from ugsp.losses import (LossWeights, mask_guidance_loss, overall_loss,
                         reconstruction_loss, self_contrast_loss,
                         sparsity_loss)
from ugsp.sparse import PruningMask
from ugsp.tensor import Tensor, backward, sigmoid, mul


def _soft_mask(arr, scale=1):
    return PruningMask(scale, Tensor(arr.astype(np.float32)), "soft")


class TestReconstructionLoss:
    def test_zero_on_identical(self, rng):
        a = Tensor(rng.random((1, 3, 32, 32), dtype=np.float32))
        assert float(reconstruction_loss(a, a).data) == 0.0

    def test_monotone_in_noise_amplitude(self, rng):
        a = rng.random((1, 3, 32, 32)).astype(np.float32)
        noise = rng.standard_normal(a.shape).astype(np.float32)
        vals = [float(reconstruction_loss(Tensor(a), Tensor(a + amp * noise)).data)
                for amp in (0.02, 0.05, 0.1)]
        assert vals[0] < vals[1] < vals[2]

    def test_single_level_is_plain_l1(self, rng):
        a = rng.random((1, 3, 8, 8))
        b = rng.random((1, 3, 8, 8))
        got = float(reconstruction_loss(Tensor(a), Tensor(b), levels=1).data)
        np.testing.assert_allclose(got, np.abs(a - b).mean(), rtol=1e-12)


class TestSparsityLoss:
    def test_constant_at_target_is_zero(self):
        masks = [_soft_mask(np.full((1, 1, 2 ** (6 - j), 2 ** (6 - j)), 0.35), j)
                 for j in (1, 2, 3)]
        assert float(sparsity_loss(masks, 0.35).data) <= 1e-7

    def test_all_ones_against_035(self):
        masks = [_soft_mask(np.ones((1, 1, 2 ** (6 - j), 2 ** (6 - j))), j)
                 for j in (1, 2, 3)]
        np.testing.assert_allclose(float(sparsity_loss(masks, 0.35).data), 0.65,
                                   rtol=1e-6)

    def test_pooled_normalizer_hand_case(self):
        # densities (1.0, 0.5, 0.0) at position counts (1024, 256, 64)
        m1 = _soft_mask(np.ones((1, 1, 32, 32)), 1)
        m2 = _soft_mask(np.full((1, 1, 16, 16), 0.5), 2)
        m3 = _soft_mask(np.zeros((1, 1, 8, 8)), 3)
        expected = abs((1024 + 128 + 0) / 1344 - 0.35)
        np.testing.assert_allclose(
            float(sparsity_loss([m1, m2, m3], 0.35).data), expected, rtol=1e-6)

    def test_gradient_step_reduces_deviation(self):
        # one gradient step on constant logits moves the pooled density
        # toward the target
        logits = Tensor(np.zeros((1, 1, 16, 16), dtype=np.float32),
                        requires_grad=True)
        target = 0.25

        def density_dev():
            mask = sigmoid(logits)
            loss = sparsity_loss([PruningMask(1, mask, "soft")], target)
            return loss, float(mask.data.mean())

        loss, before = density_dev()
        backward(loss)
        logits.data = logits.data - 5.0 * logits.grad
        _, after = density_dev()
        assert abs(after - target) < abs(before - target)


class TestMaskGuidanceLoss:
    def _labels(self, rng, h=64, w=64):
        return [(rng.random((1, 1, h, w)) < 0.5).astype(np.float32)
                for _ in range(3)]

    def test_exact_match_zero(self, rng):
        labels = self._labels(rng)
        masks = []
        for k in range(3):
            f = 2 ** (k + 1)
            down = labels[k].reshape(1, 1, 64 // f, f, 64 // f, f).mean(axis=(3, 5))
            masks.append(_soft_mask(down, k + 1))
        assert float(mask_guidance_loss(labels, masks).data) <= 1e-7

    def test_ones_vs_zeros_contributes_one_per_level(self):
        labels = [np.ones((1, 1, 64, 64), dtype=np.float32) for _ in range(3)]
        masks = [_soft_mask(np.zeros((1, 1, 64 >> (k + 1), 64 >> (k + 1))), k + 1)
                 for k in range(3)]
        np.testing.assert_allclose(float(mask_guidance_loss(labels, masks).data),
                                   3.0, rtol=1e-6)

    def test_half_mixed_label_against_half_mask(self):
        # each pooling cell holds exactly half ones; a 0.5 mask matches
        label = np.zeros((1, 1, 8, 8), dtype=np.float32)
        label[:, :, ::2, :] = 1.0
        labels = [label, np.ones((1, 1, 8, 8), np.float32),
                  np.ones((1, 1, 8, 8), np.float32)]
        masks = [_soft_mask(np.full((1, 1, 4, 4), 0.5), 1),
                 _soft_mask(np.ones((1, 1, 2, 2)), 2),
                 _soft_mask(np.ones((1, 1, 1, 1)), 3)]
        assert float(mask_guidance_loss(labels, masks).data) <= 1e-7

    def test_permutation_within_cell_invariant(self, rng):
        base = self._labels(rng)
        masks = [_soft_mask(rng.random((1, 1, 64 >> (k + 1), 64 >> (k + 1))), k + 1)
                 for k in range(3)]
        v1 = float(mask_guidance_loss(base, masks).data)
        shuffled = []
        for k, lab in enumerate(base):
            f = 2 ** (k + 1)
            blocks = lab.reshape(64 // f, f, 64 // f, f).transpose(0, 2, 1, 3)
            blocks = blocks.reshape(-1, f * f)
            perm = rng.permutation(f * f)
            blocks = blocks[:, perm]
            out = blocks.reshape(64 // f, 64 // f, f, f).transpose(0, 2, 1, 3)
            shuffled.append(out.reshape(1, 1, 64, 64))
        v2 = float(mask_guidance_loss(shuffled, masks).data)
        np.testing.assert_allclose(v1, v2, rtol=1e-5)

    def test_resolution_mismatch(self, rng):
        labels = self._labels(rng)
        masks = [_soft_mask(np.ones((1, 1, 5, 5)), k + 1) for k in range(3)]
        with pytest.raises(DimensionError):
            mask_guidance_loss(labels, masks)


class TestSelfContrastLoss:
    def test_zero_on_perfect_agreement(self, rng):
        frame = Tensor(rng.random((1, 3, 32, 32), dtype=np.float32))
        feats = [Tensor(rng.random((1, 8, 16, 16), dtype=np.float32))
                 for _ in range(3)]
        v = float(self_contrast_loss(frame, frame, feats, feats).data)
        assert v == 0.0

    def test_both_branches_receive_gradient(self, rng):
        frame = Tensor(rng.random((1, 3, 32, 32), dtype=np.float32),
                       requires_grad=True)
        gt = Tensor(rng.random((1, 3, 32, 32), dtype=np.float32))
        fa = Tensor(rng.random((1, 4, 8, 8), dtype=np.float32), requires_grad=True)
        fb = Tensor(rng.random((1, 4, 8, 8), dtype=np.float32), requires_grad=True)
        loss = self_contrast_loss(frame, gt, [fa], [fb])
        backward(loss)
        # no detaching: the dense-branch feature gradient must be nonzero too
        assert fa.grad is not None and np.abs(fa.grad).max() > 0
        assert fb.grad is not None and np.abs(fb.grad).max() > 0

    def test_census_term_invariant_to_common_offset(self, rng):
        frame = Tensor(rng.random((1, 3, 32, 32), dtype=np.float32))
        fa = rng.random((1, 4, 8, 8))
        fb = rng.random((1, 4, 8, 8))
        v1 = float(self_contrast_loss(frame, frame, [Tensor(fa)], [Tensor(fb)]).data)
        v2 = float(self_contrast_loss(frame, frame, [Tensor(fa + 0.3)],
                                      [Tensor(fb + 0.3)]).data)
        np.testing.assert_allclose(v1, v2, atol=1e-6)

    def test_missing_dense_branch_rejected(self, rng):
        gt = Tensor(rng.random((1, 3, 16, 16), dtype=np.float32))
        with pytest.raises(ContractError):
            self_contrast_loss(None, gt, None, [])


class TestOverallLoss:
    def test_all_zero(self):
        z = Tensor(np.zeros(()))
        parts = overall_loss(z, z, z, z, LossWeights())
        assert float(parts.total.data) == 0.0

    def test_zero_weights_equal_rec(self, rng):
        rec = Tensor(np.array(0.7, dtype=np.float32))
        other = Tensor(np.array(9.9, dtype=np.float32))
        w = LossWeights(sparsity=0.0, mask_guidance=0.0, self_contrast=0.0)
        parts = overall_loss(rec, other, other, other, w)
        np.testing.assert_allclose(float(parts.total.data), 0.7, rtol=1e-6)

    def test_weighted_arithmetic(self):
        vals = (0.2, 0.1, 0.3, 0.4)
        parts = overall_loss(*(Tensor(np.array(v, dtype=np.float64)) for v in vals),
                             LossWeights())
        np.testing.assert_allclose(float(parts.total.data), 0.208, rtol=1e-9)

    def test_nonnegative_and_zero_at_perfect(self, rng):
        # every component is >= 0 and exactly 0 on its perfect input
        frame = Tensor(rng.random((1, 3, 32, 32), dtype=np.float32))
        feats = [Tensor(rng.random((1, 4, 8, 8), dtype=np.float32))]
        masks = [_soft_mask(np.full((1, 1, 2 ** (6 - j), 2 ** (6 - j)), 0.35), j)
                 for j in (1, 2, 3)]
        labels = [np.ones((1, 1, 64, 64), np.float32) for _ in range(3)]
        ones_masks = [_soft_mask(np.ones((1, 1, 64 >> (k + 1), 64 >> (k + 1))),
                                 k + 1) for k in range(3)]
        assert float(reconstruction_loss(frame, frame).data) == 0.0
        assert float(sparsity_loss(masks, 0.35).data) <= 1e-7
        assert float(mask_guidance_loss(labels, ones_masks).data) == 0.0
        assert float(self_contrast_loss(frame, frame, feats, feats).data) == 0.0
