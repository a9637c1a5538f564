from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from privlora import ckks
from privlora.linalg import (
    LayoutError, PackLayout, build_multipliers, build_server_operands, extract_result, decrypt_slots,
    he_lora_apply, next_pow2, offset_slot_vectors, pack_input,
)

from conftest import KERNEL_LAYOUT


def run_kernel(x, a1, a2, qt, keys, rng, counter=None, workers=1, junk_bound=0.0):
    p = keys.params
    layout = PackLayout.for_dims(x.shape[0], a1.shape[0], a1.shape[1], a2.shape[1], p.slot_count)
    packed = pack_input(x, layout, keys, rng)
    ops = build_server_operands(a1, a2, qt, layout, p, rng, junk_bound)
    return he_lora_apply(packed, ops, keys, counter, workers), ops


def test_next_pow2():
    assert [next_pow2(v) for v in (0, 1, 2, 3, 24, 48, 64)] == [1, 1, 2, 4, 32, 64, 64]


class TestLayout:
    def test_kernel_shape(self):
        lay = KERNEL_LAYOUT.with_rows(20)
        assert lay.block == 512
        assert lay.rows_per_ct == 8
        assert lay.ct_count == 3
        assert lay.rotations_per_ct == 2 * 6 + 3
        assert list(lay.rows_of(2)) == list(range(16, 20))

    def test_rotation_steps_independent_of_rows(self):
        assert KERNEL_LAYOUT.with_rows(1).rotation_steps() == KERNEL_LAYOUT.with_rows(500).rotation_steps()

    def test_result_slots(self):
        lay = PackLayout(3, 8, 2, 5, 64)
        assert lay.result_slots()[1, 4] == 1 * 2 * 8 + 4

    @pytest.mark.parametrize("args", [(1, 6, 2, 4, 64), (1, 8, 3, 4, 64), (1, 8, 2, 9, 64), (1, 64, 8, 4, 256),
                                      (-1, 8, 2, 4, 64)])
    def test_invalid(self, args):
        with pytest.raises(LayoutError):
            PackLayout(*args)

    def test_bytes_roundtrip(self):
        lay = KERNEL_LAYOUT.with_rows(37)
        assert PackLayout.from_bytes(lay.to_bytes(), 4096) == lay
        with pytest.raises(LayoutError):
            PackLayout.from_bytes(lay.to_bytes(), 8192)
        with pytest.raises(LayoutError):
            PackLayout.from_bytes(lay.to_bytes()[:20], 4096)


class TestKernel:
    def test_full_size(self, keys, rng):
        d, m, r, n = 10, 64, 8, 64
        x = rng.uniform(-1, 1, (d, m))
        a1 = rng.uniform(-1, 1, (m, r))
        a2 = rng.uniform(-1, 1, (r, n))
        qt = rng.uniform(-1, 1, (d, n))
        out, _ = run_kernel(x, a1, a2, qt, keys, rng)
        assert out.level == keys.params.max_level - 3
        assert out.scale == keys.params.scale
        want = x @ a1 @ a2 + qt
        assert np.abs(extract_result(out, keys) - want).max() / np.abs(want).max() <= 1e-3

    def test_identity_case(self, keys, rng):
        # m = r = n = 1, A1 = A2 = 1, Q = 0
        x = rng.uniform(-1, 1, (5, 1))
        out, _ = run_kernel(x, np.ones((1, 1)), np.ones((1, 1)), np.zeros((5, 1)), keys, rng)
        assert np.abs(extract_result(out, keys) - x).max() <= 1e-5

    def test_zero_activation_returns_offset(self, keys, rng):
        qt = rng.uniform(-3, 3, (4, 64))
        out, _ = run_kernel(np.zeros((4, 64)), rng.uniform(-1, 1, (64, 8)), rng.uniform(-1, 1, (8, 64)), qt, keys,
                            rng)
        assert np.abs(extract_result(out, keys) - qt).max() <= 1e-5

    def test_operation_counts(self, keys, rng):
        x = rng.uniform(-1, 1, (17, 64))
        counter = Counter()
        out, _ = run_kernel(x, rng.uniform(-1, 1, (64, 8)), rng.uniform(-1, 1, (8, 64)), np.zeros((17, 64)),
                            keys, rng, counter)
        cts = out.layout.ct_count
        assert cts == 3
        assert counter == Counter(rotate=cts * 15, cmult=cts * 3, rescale=cts * 3)

    def test_junk_fills_non_result_slots(self, keys, rng):
        x = rng.uniform(-1, 1, (3, 64))
        qt = rng.uniform(-1, 1, (3, 64))
        out, ops = run_kernel(x, rng.uniform(-1, 1, (64, 8)), rng.uniform(-1, 1, (8, 64)), qt, keys, rng,
                              junk_bound=50.0)
        slots = decrypt_slots(out, keys)[0]
        res = out.layout.result_slots()[:3].ravel()
        others = np.delete(slots, res)
        assert np.abs(others).max() > 10
        # the junk is in the offset, so the decrypted noise slots follow it closely
        mask = np.ones(slots.size, bool)
        mask[res] = False
        assert np.corrcoef(others, ops.offset_slots[0][mask])[0, 1] > 0.99

    def test_workers_match_serial(self, keys):
        x = np.random.default_rng(0).uniform(-1, 1, (20, 64))
        a1 = np.random.default_rng(1).uniform(-1, 1, (64, 8))
        a2 = np.random.default_rng(2).uniform(-1, 1, (8, 64))
        qt = np.zeros((20, 64))
        layout = PackLayout.for_dims(20, 64, 8, 64, keys.params.slot_count)
        packed = pack_input(x, layout, keys, 3)
        ops = build_server_operands(a1, a2, qt, layout, keys.params)
        serial = he_lora_apply(packed, ops, keys)
        threaded = he_lora_apply(packed, ops, keys, workers=3)
        for a, b in zip(serial.ciphertexts, threaded.ciphertexts):
            assert np.array_equal(a.data, b.data)

    def test_multiplier_reuse(self, keys, rng):
        x = rng.uniform(-1, 1, (2, 64))
        a1, a2 = rng.uniform(-1, 1, (64, 8)), rng.uniform(-1, 1, (8, 64))
        layout = PackLayout.for_dims(2, 64, 8, 64, keys.params.slot_count)
        mult = build_multipliers(a1, a2, layout, keys.params)
        qt = rng.uniform(-1, 1, (2, 64))
        ops = build_server_operands(None, None, qt, layout, keys.params, multipliers=mult)
        out = extract_result(he_lora_apply(pack_input(x, layout, keys, rng), ops, keys), keys)
        assert np.abs(out - (x @ a1 @ a2 + qt)).max() <= 1e-4


class TestKernelErrors:
    def test_lower_level_input(self, keys, rng):
        layout = KERNEL_LAYOUT.with_rows(1)
        packed = pack_input(rng.uniform(-1, 1, (1, 64)), layout, keys, rng)
        ct = ckks.rescale(ckks.cmult_plain(packed.ciphertexts[0], ckks.encode([1.0], keys.params, 3,
                                                                               keys.params.moduli[3])))
        from privlora.linalg import PackedMatrix
        ops = build_server_operands(np.ones((64, 8)), np.ones((8, 64)), np.zeros((1, 64)), layout, keys.params)
        with pytest.raises(ckks.LevelError):
            he_lora_apply(PackedMatrix(layout, (ct,)), ops, keys)

    def test_missing_rotation_keys(self, small_keys, rng):
        layout = PackLayout(1, 8, 2, 8, small_keys.params.slot_count)
        keys = ckks.keygen(small_keys.params, [1, 2], rng=1)
        packed = pack_input(np.ones((1, 8)), layout, keys, rng)
        ops = build_server_operands(np.ones((8, 2)), np.ones((2, 8)), np.zeros((1, 8)), layout, keys.params)
        with pytest.raises(ckks.KeyMismatchError):
            he_lora_apply(packed, ops, keys)

    def test_shape_mismatches(self, keys, rng):
        layout = KERNEL_LAYOUT.with_rows(2)
        with pytest.raises(LayoutError):
            pack_input(np.ones((3, 64)), layout, keys)
        with pytest.raises(LayoutError):
            build_multipliers(np.ones((64, 16)), np.ones((16, 64)), layout, keys.params)
        with pytest.raises(LayoutError):
            offset_slot_vectors(np.zeros((2, 63)), layout)
        ops = build_server_operands(np.ones((64, 8)), np.ones((8, 64)), np.zeros((2, 64)), layout, keys.params)
        with pytest.raises(LayoutError):
            he_lora_apply(pack_input(np.ones((9, 64)), KERNEL_LAYOUT.with_rows(9), keys), ops, keys)


@settings(max_examples=12, deadline=None)
@given(d=st.integers(1, 8), m=st.integers(1, 64), r=st.integers(1, 8), n=st.integers(1, 64),
       seed=st.integers(0, 2 ** 32 - 1))
def test_kernel_matches_plaintext(keys, d, m, r, n, seed):
    rng = np.random.default_rng(seed)
    n = min(n, next_pow2(m))
    x = rng.uniform(-1, 1, (d, m))
    a1 = rng.uniform(-1, 1, (m, r))
    a2 = rng.uniform(-1, 1, (r, n))
    qt = rng.uniform(-1, 1, (d, n))
    out, _ = run_kernel(x, a1, a2, qt, keys, rng)
    want = x @ a1 @ a2 + qt
    assert np.abs(extract_result(out, keys) - want).max() / max(np.abs(want).max(), 1e-12) <= 1e-3
