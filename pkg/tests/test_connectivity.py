import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strcn.connectivity import (
    BinaryMask,
    DegenerateMaskError,
    DifferenceHeatMap,
    build_strcn_a_input,
    build_strcn_g_input,
    difference_heatmap,
    flow_scale,
    load_grid,
    load_heatmap,
    load_mask,
    locate_apex,
    mask_from_heatmap,
    nearest_rank_threshold,
    resample_time,
    save_grid,
    save_heatmap,
    save_mask,
    sequence_difference,
)
from strcn.dataset import FrameSequence
from strcn.flow import FlowField


def seq(frames, sid="x"):
    frames = np.asarray(frames, dtype=float)
    if frames.ndim == 3:
        frames = frames[..., None]
    return FrameSequence(frames, 30.0, "s", 0, sid)


# heat map and mask -----------------------------------------------------------------


def test_difference_of_static_sequence_is_zero():
    frames = np.repeat(np.random.default_rng(0).random((1, 5, 4)), 4, 0)
    assert not sequence_difference(seq(frames)).any()


def test_difference_sums_channels_and_frames():
    f = np.zeros((3, 2, 2, 3))
    f[1, 0, 0] = [0.1, 0.2, 0.3]
    f[2, 0, 0] = [-0.1, 0.0, 0.0]
    d = sequence_difference(FrameSequence(np.clip(f + 0.5, 0, 1), 30.0, "s", 0, "x"))
    assert d[0, 0] == pytest.approx(0.7)
    assert d[1, 1] == 0.0


def test_heatmap_bitwise_order_independent():
    rng = np.random.default_rng(1)
    seqs = [seq(rng.random((6, 8, 8)), f"id{k}") for k in range(12)]
    ref = difference_heatmap(seqs).E
    for k in range(5):
        perm = rng.permutation(len(seqs))
        again = difference_heatmap([seqs[i] for i in perm]).E
        assert again.tobytes() == ref.tobytes()


def test_heatmap_shape_mismatch():
    with pytest.raises(ValueError):
        difference_heatmap([seq(np.zeros((2, 4, 4))), seq(np.zeros((2, 4, 5)))])
    with pytest.raises(ValueError):
        difference_heatmap([])


def test_heatmap_add():
    a = DifferenceHeatMap(np.ones((2, 2)), 1)
    b = DifferenceHeatMap(2 * np.ones((2, 2)), 2)
    c = a + b
    assert c.count == 3 and np.all(c.E == 3)


@pytest.mark.parametrize("p", [10, 30, 50, 90])
def test_mask_popcount_matches_nearest_rank(p):
    E = np.random.default_rng(p).permutation(100).reshape(10, 10).astype(float)
    m = mask_from_heatmap(E, p)
    rank = math.ceil((100 - p) / 100 * 100)
    assert m.d2 == 100 - rank == p
    assert m.threshold == float(rank - 1)


def test_mask_three_by_three_example():
    E = np.arange(1.0, 10.0).reshape(3, 3)
    m = mask_from_heatmap(E, 30)
    # ceil(0.7 * 9) = 7 -> threshold 7, strict '>' keeps 8 and 9
    assert m.threshold == 7.0
    assert m.mask.sum() == 2
    assert m.mask[2, 1] and m.mask[2, 2]


def test_mask_full_percentile_keeps_everything():
    m = mask_from_heatmap(np.arange(9.0).reshape(3, 3), 100)
    assert m.mask.all()


def test_mask_degenerate_and_invalid():
    with pytest.raises(DegenerateMaskError):
        mask_from_heatmap(np.full((4, 4), 2.0), 30)
    with pytest.raises(ValueError):
        mask_from_heatmap(np.arange(4.0), 0)
    with pytest.raises(ValueError):
        mask_from_heatmap(np.arange(4.0), 101)


@settings(max_examples=40, deadline=None)
@given(st.integers(200, 400), st.floats(1, 89), st.integers(0, 2 ** 31))
def test_mask_monotone_in_p(n, p, seed):
    E = np.random.default_rng(seed).random(n)
    m1 = mask_from_heatmap(E, p).mask
    m2 = mask_from_heatmap(E, p + 10).mask
    assert np.all(m2[m1])
    thr = nearest_rank_threshold(E, p)
    assert thr in E


# appearance tensor -------------------------------------------------------------------


def test_resample_time_endpoints_and_linear():
    x = np.arange(10.0)[:, None] * [1.0, 2.0]
    y = resample_time(x, 30)
    assert y.shape == (30, 2)
    np.testing.assert_allclose(y[:, 0], np.linspace(0, 9, 30), atol=1e-12)
    np.testing.assert_array_equal(resample_time(np.arange(30.0), 30), np.arange(30.0))
    with pytest.raises(ValueError):
        resample_time(np.zeros((1, 3)))


def test_a_input_shape_and_row_major_order():
    T, H, W = 12, 4, 5
    frames = np.random.default_rng(2).random((T, H, W, 3))
    mask = np.zeros((H, W), bool)
    mask[0, 3] = mask[2, 1] = mask[3, 4] = True
    x = build_strcn_a_input(FrameSequence(frames, 30.0, "s", 0, "x"), BinaryMask(mask, 30, 0.0))
    assert x.shape == (3, 30, 3)
    np.testing.assert_allclose(x[1, 0], frames[0, 2, 1])
    np.testing.assert_allclose(x[2, -1], frames[-1, 3, 4])


def test_a_input_mask_mismatch():
    with pytest.raises(ValueError):
        build_strcn_a_input(seq(np.zeros((3, 4, 4))), BinaryMask(np.ones((4, 5), bool), 30, 0))
    with pytest.raises(DegenerateMaskError):
        build_strcn_a_input(seq(np.zeros((3, 4, 4))), BinaryMask(np.zeros((4, 4), bool), 30, 0))


def test_locate_apex_first_maximum():
    f = np.zeros((6, 4, 4))
    f[2, 0, 0] = 1.0
    f[4, 0, 0] = 1.0
    assert locate_apex(seq(f)) == 2
    g = np.zeros((6, 4, 4))
    g[5, :2] = 1.0
    assert locate_apex(seq(g)) == 5


# geometric tensor ---------------------------------------------------------------------


def test_g_input_arithmetic():
    uv = np.zeros((6, 5, 2))
    uv[..., 0] = 2.0
    x = build_strcn_g_input(uv, 2.0)
    assert x.shape == (6, 5, 2)
    np.testing.assert_array_equal(x[..., 0], 1.0)
    np.testing.assert_array_equal(x[..., 1], 0.0)
    assert not build_strcn_g_input(np.zeros((3, 3, 2)), 1.0).any()
    with pytest.raises(ValueError):
        build_strcn_g_input(np.full((2, 2, 2), np.nan), 1.0)


def test_g_input_uses_stored_scale_only():
    train = [np.full((4, 4, 2), 3.0)]
    s = flow_scale(train)
    assert s == 3.0
    test_flow = FlowField(np.full((4, 4), 30.0), np.zeros((4, 4)))
    np.testing.assert_allclose(build_strcn_g_input(test_flow, s)[..., 0], 10.0)


def test_flow_scale_fallback_for_zero_motion():
    assert flow_scale([np.zeros((3, 3, 2))]) == 1.0
    with pytest.raises(ValueError):
        flow_scale([])


# persistence --------------------------------------------------------------------------


def test_grid_round_trip(tmp_path):
    g = np.random.default_rng(3).random((7, 5))
    save_grid(tmp_path / "g.bin", g, 30.0, 0.25)
    back, p, thr = load_grid(tmp_path / "g.bin")
    assert back.tobytes() == g.tobytes()
    assert (p, thr) == (30.0, 0.25)


def test_mask_and_heatmap_round_trip(tmp_path):
    E = np.random.default_rng(4).random((6, 6))
    m = mask_from_heatmap(E, 30)
    save_mask(m, tmp_path / "m.bin")
    back = load_mask(tmp_path / "m.bin")
    assert np.array_equal(back.mask, m.mask) and back.threshold == m.threshold and back.p == 30
    save_heatmap(DifferenceHeatMap(E, 3), tmp_path / "h.bin")
    assert load_heatmap(tmp_path / "h.bin").E.tobytes() == E.tobytes()


def test_grid_rejects_garbage(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"notagrid" + bytes(40))
    with pytest.raises(ValueError):
        load_grid(tmp_path / "bad.bin")
    g = np.zeros((4, 4))
    save_grid(tmp_path / "t.bin", g, 1, 1)
    data = (tmp_path / "t.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(data[:-8])
    with pytest.raises(ValueError):
        load_grid(tmp_path / "t.bin")
