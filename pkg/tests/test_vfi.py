"""Interpolation network: structure, equivalences, checkpoints."""

import numpy as np
import pytest

from ugsp.errors import CheckpointError, ContractError
from ugsp.sparse import FlopsLedger, PruningMask, flops_report
from ugsp.tensor import Tensor, no_grad
from ugsp.vfi import (BODY_WIDTHS, ENCODER_WIDTHS, InterpolationNet,
                      synthesize)


def _frames(rng, n=1, h=64, w=64):
    return (Tensor(rng.random((n, 3, h, w), dtype=np.float32)),
            Tensor(rng.random((n, 3, h, w), dtype=np.float32)))


def _randomize(net, rng, scale=0.05):
    for p in net.parameters():
        p.data = rng.standard_normal(p.data.shape).astype(np.float32) * scale


def _ones_masks(n, h, w):
    return {j: PruningMask(j, Tensor(np.ones((n, 1, h >> j, w >> j), np.float32)),
                           "hard") for j in (1, 2, 3)}


def _random_masks(rng, n, h, w, density=0.5):
    return {j: PruningMask(j, Tensor((rng.random((n, 1, h >> j, w >> j)) < density)
                                     .astype(np.float32)), "hard")
            for j in (1, 2, 3)}


class TestEncoder:
    def test_pyramid_shapes(self, rng):
        net = InterpolationNet(seed=0)
        i0, _ = _frames(rng)
        with no_grad():
            feats = net.encoder(i0)
        assert [f.shape for f in feats] == [
            (1, 32, 32, 32), (1, 48, 16, 16), (1, 72, 8, 8), (1, 96, 4, 4)]

    def test_shared_weights_identical_pyramids(self, rng):
        net = InterpolationNet(seed=0)
        i0, _ = _frames(rng)
        with no_grad():
            a = net.encoder(i0)
            b = net.encoder(i0)
        for fa, fb in zip(a, b):
            np.testing.assert_array_equal(fa.data, fb.data)

    def test_encoder_ledger_matches_closed_form(self, rng):
        net = InterpolationNet(seed=0)
        i0, _ = _frames(rng, h=64, w=64)
        ledger = FlopsLedger()
        with no_grad():
            net.encoder(i0, ledger)
        expected = 0
        c_prev, ext = 3, 64
        for width in ENCODER_WIDTHS:
            ext //= 2
            expected += 2 * 9 * c_prev * width * ext * ext   # stride 2
            expected += 2 * 9 * width * width * ext * ext    # stride 1
            c_prev = width
        assert ledger.total_dense() == expected


class TestCoarseBlock:
    def test_resolutions_and_zero_init_flow(self, rng):
        net = InterpolationNet(seed=0)
        i0, i1 = _frames(rng)
        with no_grad():
            phis0 = net.encoder(i0)
            phis1 = net.encoder(i1)
            state, p3 = net.coarse(phis0[3], phis1[3], want_mask=True,
                                   hard=False, tau=1.0, rng=None)
        assert state.flow.shape == (1, 4, 8, 8)
        assert state.feat.shape == (1, 96, 8, 8)
        assert p3.data.shape == (1, 1, 8, 8)
        np.testing.assert_array_equal(state.flow.data, 0)  # zero-init head
        assert np.all(p3.data.data > 0) and np.all(p3.data.data < 1)

    def test_hard_mask_binary(self, rng):
        net = InterpolationNet(seed=0)
        _randomize(net, rng)
        i0, i1 = _frames(rng)
        with no_grad():
            phis0, phis1 = net.encoder(i0), net.encoder(i1)
            _, p3 = net.coarse(phis0[3], phis1[3], want_mask=True, hard=True,
                               tau=1.0, rng=None)
        assert p3.mode == "hard"
        assert set(np.unique(p3.data.data)) <= {0.0, 1.0}


class TestForwardEquivalences:
    def test_pruned_all_ones_equals_dense_exactly(self, rng):
        net = InterpolationNet(seed=1)
        _randomize(net, rng)
        i0, i1 = _frames(rng)
        with no_grad():
            dense = net.forward(i0, i1, mode="dense")
            forced = net.forward(i0, i1, mode="pruned", exec_mode="train",
                                 tau=1.0, forced_masks=_ones_masks(1, 64, 64))
        np.testing.assert_array_equal(dense.frame.data, forced.frame.data)

    def test_infer_equals_train_with_same_hard_masks(self, rng):
        net = InterpolationNet(seed=2)
        _randomize(net, rng)
        i0, i1 = _frames(rng)
        masks = _random_masks(rng, 1, 64, 64)
        with no_grad():
            tr = net.forward(i0, i1, mode="pruned", exec_mode="train", tau=1.0,
                             forced_masks=masks)
            inf = net.forward(i0, i1, mode="pruned", exec_mode="infer",
                              forced_masks=masks)
        for a, b in zip((tr.frame, *tr.features), (inf.frame, *inf.features)):
            denom = max(np.abs(a.data).max(), 1e-8)
            assert np.abs(a.data - b.data).max() / denom <= 1e-4

    def test_masks_change_the_output(self, rng):
        net = InterpolationNet(seed=3)
        _randomize(net, rng)
        i0, i1 = _frames(rng)
        with no_grad():
            dense = net.forward(i0, i1, mode="dense")
            pruned = net.forward(i0, i1, mode="pruned", exec_mode="train",
                                 tau=1.0, forced_masks=_random_masks(rng, 1, 64, 64))
        assert np.abs(dense.frame.data - pruned.frame.data).max() > 1e-4

    def test_weight_sharing_between_branches(self):
        # both branches read the same Parameter objects (same storage)
        net = InterpolationNet(seed=0)
        assert net.refine1.body.convs[0].w is net.store.params["refine1.body.c0.weight"]

    def test_mask_resolution_ladder(self, rng):
        net = InterpolationNet(seed=0)
        i0, i1 = _frames(rng)
        with no_grad():
            res = net.forward(i0, i1, mode="pruned", exec_mode="train", tau=1.0)
        p1, p2, p3 = res.masks
        assert p1.data.shape == (1, 1, 32, 32) and p1.scale_index == 1
        assert p2.data.shape == (1, 1, 16, 16) and p2.scale_index == 2
        assert p3.data.shape == (1, 1, 8, 8) and p3.scale_index == 3

    def test_feature_shapes_for_census(self, rng):
        net = InterpolationNet(seed=0)
        i0, i1 = _frames(rng)
        with no_grad():
            res = net.forward(i0, i1, mode="dense")
        f1, f2, f3 = res.features
        assert f1.shape == (1, 48, 32, 32)
        assert f2.shape == (1, 72, 16, 16)
        assert f3.shape == (1, 96, 8, 8)

    def test_indivisible_extent_rejected(self, rng):
        net = InterpolationNet(seed=0)
        x = Tensor(rng.random((1, 3, 40, 40), dtype=np.float32))
        with pytest.raises(ContractError):
            net.forward(x, x)


class TestSynthesize:
    def test_identical_frames_zero_flow_any_blend(self, rng):
        img = rng.random((1, 3, 16, 16)).astype(np.float32)
        flow = Tensor(np.zeros((1, 4, 16, 16), np.float32))
        residual = Tensor(np.zeros((1, 3, 16, 16), np.float32))
        for logit in (-3.0, 0.0, 3.0):
            out = synthesize(Tensor(img), Tensor(img), flow,
                             Tensor(np.full((1, 1, 16, 16), logit, np.float32)),
                             residual)
            np.testing.assert_allclose(out.data, img, atol=1e-6)

    def test_blend_saturation(self, rng):
        i0 = rng.random((1, 3, 8, 8)).astype(np.float32)
        i1 = rng.random((1, 3, 8, 8)).astype(np.float32)
        flow = Tensor(np.zeros((1, 4, 8, 8), np.float32))
        r = Tensor(np.zeros((1, 3, 8, 8), np.float32))
        out = synthesize(Tensor(i0), Tensor(i1), flow,
                         Tensor(np.full((1, 1, 8, 8), 50.0, np.float32)), r)
        np.testing.assert_allclose(out.data, np.clip(i0, 0, 1), atol=1e-6)

    def test_output_clamped(self, rng):
        i0 = rng.random((1, 3, 8, 8)).astype(np.float32)
        flow = Tensor(np.zeros((1, 4, 8, 8), np.float32))
        big_r = Tensor(np.full((1, 3, 8, 8), 9.0, np.float32))
        out = synthesize(Tensor(i0), Tensor(i0), flow,
                         Tensor(np.zeros((1, 1, 8, 8), np.float32)), big_r)
        assert out.data.max() <= 1.0 and out.data.min() >= 0.0


class TestFlopsAnchor:
    def test_gated_block_half_density_halves_gated_flops(self, rng):
        net = InterpolationNet(seed=0)
        i0, i1 = _frames(rng)
        masks = _ones_masks(1, 64, 64)
        half = np.ones((1, 1, 32, 32), np.float32)
        half[:, :, :, ::2] = 0  # exactly 50% of level-0 gate positions
        masks[1] = PruningMask(1, Tensor(half), "hard")
        ledger = FlopsLedger()
        with no_grad():
            net.forward(i0, i1, mode="pruned", exec_mode="infer",
                        forced_masks=masks, ledger=ledger)
        synth_records = [r for r in ledger.records
                         if r.layer.startswith("synth.body") and r.gated]
        assert synth_records
        for r in synth_records:
            assert r.positions_active * 2 == r.positions_dense

    def test_dense_flops_anchor_64(self, rng):
        # closed-form sanity at 64x64 before the full-size acceptance check
        from ugsp.eval import dense_flops
        net = InterpolationNet(seed=0)
        ledger = dense_flops(net, 64, 64)
        total = ledger.total_dense()
        assert total == flops_report(ledger)["total_dense"]
        # scaling to 256x448 is exactly (256*448)/(64*64) because every layer
        # count is proportional to the position count
        assert total * (256 * 448) // (64 * 64) == pytest.approx(31.5e9, rel=0.02)


class TestCheckpoints:
    def test_roundtrip_bit_exact(self, rng, tmp_path):
        net = InterpolationNet(seed=4)
        _randomize(net, rng)
        path = tmp_path / "model.ckpt"
        net.save(path)
        loaded, meta, _ = InterpolationNet.load(path)
        assert meta["body_convs"] == 5.0
        for name, p in net.store.params.items():
            np.testing.assert_array_equal(p.data, loaded.store.params[name].data)

    def test_unknown_parameter_rejected(self, rng, tmp_path):
        from ugsp.layers import read_checkpoint, write_checkpoint
        net = InterpolationNet(seed=0)
        path = tmp_path / "model.ckpt"
        net.save(path)
        entries = read_checkpoint(path)
        entries["not.a.real.layer"] = np.zeros(3, dtype=np.float32)
        bad = tmp_path / "bad.ckpt"
        write_checkpoint(bad, entries)
        with pytest.raises(CheckpointError):
            InterpolationNet.load(bad)

    def test_variant_body_convs_roundtrip(self, tmp_path):
        net = InterpolationNet(seed=0, body_convs=2)
        path = tmp_path / "variant.ckpt"
        net.save(path)
        loaded, meta, _ = InterpolationNet.load(path)
        assert loaded.body_convs == 2
        assert len(loaded.refine1.body.convs) == 2
