"""Sparse execution: mask gating, gather/scatter inference, FLOPs ledger."""

import numpy as np
import pytest

from ugsp.errors import ContractError, DimensionError
from ugsp.sparse import (ActiveIndex, FlopsLedger, PruningMask, SparseLayer,
                         build_active_index, flops_report, masked_conv_train,
                         prelu_activation, sparse_conv_infer)
from ugsp.tensor import Tensor, backward, conv2d, mean, mul, prelu, sum_


def _hard_mask(arr, scale=1):
    return PruningMask(scale_index=scale, data=Tensor(arr.astype(np.float32)),
                       mode="hard")


class TestMaskedConvTrain:
    def test_mask_of_ones_is_plain_conv(self, rng):
        x = Tensor(rng.random((1, 3, 6, 6), dtype=np.float32))
        w = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
        b = Tensor(np.zeros(4, dtype=np.float32))
        mask = _hard_mask(np.ones((1, 1, 6, 6)))
        y = masked_conv_train(x, w, b, mask)
        np.testing.assert_array_equal(y.data, conv2d(x, w, b, padding=1).data)

    def test_mask_of_zeros_blocks_weight_gradient(self, rng):
        x = Tensor(rng.random((1, 2, 4, 4)).astype(np.float32))
        w = Tensor(rng.standard_normal((2, 2, 3, 3)).astype(np.float32),
                   requires_grad=True)
        mask = _hard_mask(np.zeros((1, 1, 4, 4)))
        y = masked_conv_train(x, w, None, mask)
        np.testing.assert_array_equal(y.data, 0)
        backward(sum_(y))
        np.testing.assert_array_equal(w.grad, 0)

    def test_half_mask_scales_output(self, rng):
        x = Tensor(rng.random((1, 2, 4, 4)).astype(np.float32))
        w = Tensor(rng.standard_normal((3, 2, 3, 3)).astype(np.float32))
        soft = PruningMask(1, Tensor(np.full((1, 1, 4, 4), 0.5, np.float32)), "soft")
        y = masked_conv_train(x, w, None, soft)
        np.testing.assert_allclose(y.data, 0.5 * conv2d(x, w, padding=1).data,
                                   rtol=1e-6)

    def test_gradient_reaches_mask(self, rng):
        x = Tensor(rng.random((1, 2, 4, 4)).astype(np.float32))
        w = Tensor(rng.standard_normal((2, 2, 3, 3)).astype(np.float32))
        m = Tensor(np.full((1, 1, 4, 4), 0.5, np.float32), requires_grad=True)
        y = masked_conv_train(x, w, None, PruningMask(1, m, "soft"))
        backward(mean(mul(y, y)))
        assert m.grad is not None and np.abs(m.grad).max() > 0

    def test_resolution_mismatch(self, rng):
        x = Tensor(rng.random((1, 2, 4, 4)))
        w = Tensor(rng.random((2, 2, 3, 3)))
        with pytest.raises(DimensionError):
            masked_conv_train(x, w, None, _hard_mask(np.ones((1, 1, 8, 8))))


class TestActiveIndex:
    def test_all_zero_mask_empty(self):
        idx = build_active_index(_hard_mask(np.zeros((1, 1, 4, 4))))
        assert idx.count == 0 and idx.coords.shape == (0, 3)

    def test_all_ones_row_major(self):
        idx = build_active_index(_hard_mask(np.ones((1, 1, 4, 4))))
        assert idx.count == 16
        expected = [(0, y, x) for y in range(4) for x in range(4)]
        np.testing.assert_array_equal(idx.coords, expected)

    def test_checkerboard(self):
        m = np.zeros((1, 1, 2, 2))
        m[0, 0, 0, 0] = m[0, 0, 1, 1] = 1
        idx = build_active_index(_hard_mask(m))
        np.testing.assert_array_equal(idx.coords, [(0, 0, 0), (0, 1, 1)])

    def test_soft_mask_rejected(self):
        soft = PruningMask(1, Tensor(np.full((1, 1, 2, 2), 0.5, np.float32)), "soft")
        with pytest.raises(ContractError):
            build_active_index(soft)

    def test_hard_mask_values_validated(self):
        with pytest.raises(ContractError):
            PruningMask(1, Tensor(np.full((1, 1, 2, 2), 0.5, np.float32)), "hard")


def _random_block(rng, c_in, widths, last_1x1=True):
    """Random gated layer stack; returns (layers, per-layer slope or None)."""
    layers, slopes = [], []
    prev = c_in
    for i, width in enumerate(widths):
        w = rng.standard_normal((width, prev, 3, 3)).astype(np.float32) * 0.2
        b = rng.standard_normal(width).astype(np.float32) * 0.1
        slope = rng.uniform(0.1, 0.5, width).astype(np.float32)
        layers.append(SparseLayer(f"c{i}", w, b, prelu_activation(slope)))
        slopes.append(slope)
        prev = width
    if last_1x1:
        w = rng.standard_normal((prev, prev, 1, 1)).astype(np.float32) * 0.2
        b = rng.standard_normal(prev).astype(np.float32) * 0.1
        layers.append(SparseLayer("fuse", w, b, None))
        slopes.append(None)
    return layers, slopes


def _dense_masked_forward(x, layers, slopes, mask_arr):
    """Training-path reference: conv + activation, mask after every layer."""
    cur = Tensor(x)
    mask = Tensor(mask_arr.astype(np.float32))
    for layer, slope in zip(layers, slopes):
        pad = layer.kernel // 2
        y = conv2d(cur, Tensor(layer.weight), Tensor(layer.bias), padding=pad)
        if slope is not None:
            y = prelu(y, Tensor(slope))
        cur = mul(y, mask)
    return cur.data


class TestSparseConvInfer:
    def test_all_ones_equals_dense_chain(self, rng):
        x = rng.random((1, 4, 8, 8)).astype(np.float32)
        layers, slopes = _random_block(rng, 4, [6, 6])
        mask = _hard_mask(np.ones((1, 1, 8, 8)))
        got = sparse_conv_infer(x, layers, mask)
        ref = _dense_masked_forward(x, layers, slopes, np.ones((1, 1, 8, 8)))
        assert np.abs(got - ref).max() <= 1e-5

    def test_all_zeros_mask(self, rng):
        x = rng.random((1, 4, 8, 8)).astype(np.float32)
        layers, _ = _random_block(rng, 4, [6])
        ledger = FlopsLedger()
        got = sparse_conv_infer(x, layers, _hard_mask(np.zeros((1, 1, 8, 8))),
                                ledger)
        np.testing.assert_array_equal(got, 0)
        assert all(r.flops_active == 0 for r in ledger.records)

    def test_random_masks_match_training_path(self, rng):
        # the dense-masked-forward oracle at every gated layer
        for trial in range(10):
            n = int(rng.integers(1, 3))
            c = int(rng.integers(2, 6))
            h = int(rng.integers(5, 12))
            x = rng.random((n, c, h, h)).astype(np.float32)
            layers, slopes = _random_block(rng, c, [int(rng.integers(3, 8))] * 2)
            mask_arr = (rng.random((n, 1, h, h)) < 0.5).astype(np.float32)
            got = sparse_conv_infer(x, layers, _hard_mask(mask_arr))
            ref = _dense_masked_forward(x, layers, slopes, mask_arr)
            denom = max(np.abs(ref).max(), 1e-8)
            assert np.abs(got - ref).max() / denom <= 1e-4

    def test_empty_layer_list_rejected(self, rng):
        with pytest.raises(ContractError):
            sparse_conv_infer(rng.random((1, 2, 4, 4)).astype(np.float32), [],
                              _hard_mask(np.ones((1, 1, 4, 4))))

    def test_mask_resolution_mismatch(self, rng):
        layers, _ = _random_block(rng, 2, [3])
        with pytest.raises(DimensionError):
            sparse_conv_infer(rng.random((1, 2, 4, 4)).astype(np.float32),
                              layers, _hard_mask(np.ones((1, 1, 8, 8))))


class TestFlopsLedger:
    def test_closed_form_count(self):
        ledger = FlopsLedger()
        ledger.record("layer", 3, 8, 8, positions_dense=256)
        assert ledger.records[0].flops_dense == 2 * 9 * 8 * 8 * 256 == 294912

    def test_half_active_is_fifty_percent(self):
        ledger = FlopsLedger()
        ledger.record("g", 3, 4, 4, positions_dense=100, positions_active=50,
                      gated=True)
        assert flops_report(ledger)["reduction_percent"] == pytest.approx(50.0)

    def test_additivity_exact_integers(self, rng):
        ledger = FlopsLedger()
        total = 0
        for i in range(7):
            k = int(rng.choice([1, 3]))
            cin, cout = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            pos = int(rng.integers(1, 500))
            ledger.record(f"l{i}", k, cin, cout, pos)
            total += 2 * k * k * cin * cout * pos
        assert ledger.total_dense() == total
        assert ledger.total_active() == total

    def test_monotone_in_active_positions(self):
        a, b = FlopsLedger(), FlopsLedger()
        a.record("l", 3, 4, 4, 100, positions_active=60, gated=True)
        b.record("l", 3, 4, 4, 100, positions_active=59, gated=True)
        assert b.total_active() < a.total_active()

    def test_active_cannot_exceed_dense(self):
        ledger = FlopsLedger()
        with pytest.raises(ContractError):
            ledger.record("l", 3, 4, 4, 10, positions_active=11)

    def test_nongated_reported_separately(self):
        ledger = FlopsLedger()
        ledger.record("gated", 3, 2, 2, 100, positions_active=25, gated=True)
        ledger.record("plain", 3, 2, 2, 100)
        rep = flops_report(ledger)
        assert rep["reduction_percent"] == pytest.approx(75.0)
        assert rep["other_dense"] == rep["other_active"]
        assert rep["total_dense"] == rep["gated_dense"] + rep["other_dense"]

    def test_empty_ledger_rejected(self):
        with pytest.raises(ContractError):
            flops_report(FlopsLedger())

    def test_export_formats(self):
        ledger = FlopsLedger()
        ledger.record("enc.c0", 3, 3, 32, 64, gated=False)
        table = ledger.to_table()
        kv = ledger.to_kv()
        assert "enc.c0" in table and "total" in table
        assert kv == "layer=enc.c0 k=3 cin=3 cout=32 dense=64 active=64"
