import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strcn.dataset import FrameSequence, LandmarkTrack, face_layout
from strcn.spatial import (
    CropConstants,
    CropRect,
    DegenerateGeometryError,
    SingularFitError,
    align_sequence,
    crop_frame,
    crop_rect,
    lwm_apply,
    lwm_fit,
    lwm_weight,
)

# crop geometry ----------------------------------------------------------------


def test_crop_rect_level_eyes():
    r = crop_rect(((100, 100), (160, 100)))
    assert (r.x, r.y) == pytest.approx((64.0, 100.0))
    assert r.height == pytest.approx(132.0)
    assert r.width == pytest.approx(108.0)


def test_crop_rect_tilted_eyes():
    r = crop_rect(((100, 100), (160, 110)))
    d = math.sqrt(60 ** 2 + 10 ** 2)
    assert (r.x, r.y) == pytest.approx((64.0, 96.0))
    assert r.height == pytest.approx(2.2 * d) and r.height == pytest.approx(133.821, abs=1e-3)
    assert r.width == pytest.approx(1.8 * d) and r.width == pytest.approx(109.490, abs=1e-3)


def test_crop_rect_coincident_eyes():
    with pytest.raises(DegenerateGeometryError):
        crop_rect(((50, 50), (50, 50)))


def test_crop_constants_validation():
    with pytest.raises(ValueError):
        CropConstants(delta3=0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-500, 500), st.floats(-500, 500), st.floats(-200, 200), st.floats(-200, 200))
def test_crop_rect_translation_equivariance(dx, dy, ex, ey):
    eyes = np.array([[100.0, 120.0], [160.0 + ex * 0.1, 118.0 + ey * 0.1]])
    a = crop_rect(eyes)
    b = crop_rect(eyes + [dx, dy])
    assert b.x - a.x == pytest.approx(dx, abs=1e-9)
    assert b.y - a.y == pytest.approx(dy, abs=1e-9)
    assert (b.height, b.width) == pytest.approx((a.height, a.width))


def test_crop_full_frame_identity():
    rng = np.random.default_rng(0)
    frame = rng.random((20, 15, 1))
    out = crop_frame(frame, CropRect(0, 0, 20, 15), (20, 15))
    np.testing.assert_allclose(out, frame, atol=1e-12)


def test_crop_constant_frame():
    out = crop_frame(np.full((30, 30), 0.37), CropRect(3.3, 7.1, 12.5, 9.25), (8, 5))
    np.testing.assert_allclose(out, 0.37)


def test_crop_downscale_linear_ramp():
    ramp = np.tile(np.arange(16, dtype=float) / 15.0, (16, 1))
    out = crop_frame(ramp, CropRect(0, 0, 16, 16), (8, 8))
    assert out[0, 0] == pytest.approx(0.0)
    assert out[0, -1] == pytest.approx(1.0)
    np.testing.assert_allclose(out[3], np.linspace(0.0, 1.0, 8), atol=1e-12)


def test_crop_outside_frame():
    with pytest.raises(ValueError):
        crop_frame(np.zeros((10, 10)), CropRect(20, 20, 5, 5), (4, 4))


# local weighted mean -------------------------------------------------------------


def test_weight_kernel_shape():
    r = np.linspace(0, 1.2, 121)
    w = lwm_weight(r)
    assert w[0] == 1.0 and w.max() == 1.0
    assert np.all(np.diff(w[r < 1]) < 0)
    assert np.all(w[r >= 1] == 0)


def _points(rng, n=40):
    return rng.uniform(10, 90, size=(n, 2))


def test_lwm_affine_reproduction():
    rng = np.random.default_rng(0)
    src = _points(rng)
    A = np.array([[1.05, 0.1], [-0.07, 0.95]])
    b = np.array([3.0, -2.0])
    t = lwm_fit(src, src @ A.T + b, n=12)
    mapped, valid = t.evaluate(src)
    np.testing.assert_allclose(mapped, src @ A.T + b, atol=1e-9)
    grid = np.stack(np.meshgrid(np.linspace(30, 70, 25), np.linspace(30, 70, 25)), -1).reshape(-1, 2)
    mapped, valid = t.evaluate(grid)
    assert valid.all()
    assert np.abs(mapped - (grid @ A.T + b)).max() <= 1e-6


def test_lwm_quadratic_reproduction():
    rng = np.random.default_rng(1)
    src = _points(rng, 50)
    f = lambda p: np.stack([p[:, 0] + 1e-3 * p[:, 0] * p[:, 1], p[:, 1] - 2e-3 * p[:, 0] ** 2], -1)
    t = lwm_fit(src, f(src), n=12)
    grid = rng.uniform(35, 65, size=(200, 2))
    mapped, valid = t.evaluate(grid)
    assert valid.all()
    assert np.abs(mapped - f(grid)).max() <= 1e-6


@pytest.mark.parametrize("n", [6, 12])
def test_lwm_interpolates_control_points(n):
    rng = np.random.default_rng(2)
    src = _points(rng)
    dst = src + rng.normal(0, 1.5, size=src.shape)
    t = lwm_fit(src, dst, n=n)
    # every local polynomial passes through its own correspondence
    np.testing.assert_allclose(t.local(np.arange(len(src)), src), dst, atol=1e-9)
    if n == 6:  # six coefficients on six points: the fit is an exact interpolant
        mapped, _ = t.evaluate(src)
        np.testing.assert_allclose(mapped, dst, atol=1e-9)


def test_lwm_radius_is_distance_to_farthest_neighbour():
    rng = np.random.default_rng(3)
    src = _points(rng, 20)
    t = lwm_fit(src, src, n=12)
    d = np.sort(np.linalg.norm(src[:, None] - src[None], axis=-1), axis=1)
    np.testing.assert_allclose(t.radius, d[:, 11])


def test_lwm_identity_inside_hull():
    rng = np.random.default_rng(4)
    src = _points(rng)
    t = lwm_fit(src, src)
    grid = rng.uniform(35, 65, size=(100, 2))
    np.testing.assert_allclose(t.evaluate(grid)[0], grid, atol=1e-9)


def test_lwm_collinear_neighbourhood_is_singular():
    src = np.stack([np.arange(12.0), 2 * np.arange(12.0)], -1)
    with pytest.raises(SingularFitError):
        lwm_fit(src, src, n=6)


def test_lwm_needs_enough_points():
    with pytest.raises(ValueError):
        lwm_fit(np.zeros((5, 2)), np.zeros((5, 2)), n=6)


def test_lwm_translation_shifts_image():
    rng = np.random.default_rng(5)
    img = rng.random((60, 60))
    src = np.stack(np.meshgrid(np.linspace(0, 59, 8), np.linspace(0, 59, 8)), -1).reshape(-1, 2)
    t = lwm_fit(src, src + [2.0, 0.0])
    out, valid = lwm_apply(t, img)
    # output pixel (x, y) pulls from (x + 2, y)
    assert np.abs(out[5:-5, 5:-7] - img[5:-5, 7:-5]).max() <= 1e-6
    assert valid[5:-5, 5:-5].all()


def test_lwm_flags_points_outside_support():
    src = np.random.default_rng(6).uniform(0, 4, size=(16, 2))
    t = lwm_fit(src, src, n=6)
    mapped, valid = t.evaluate(np.array([src[0], [100.0, 100.0]]))
    assert valid.tolist() == [True, False]
    assert np.all(np.isfinite(mapped))


# sequence alignment ------------------------------------------------------------------


def _face_frame(H, W, shift=(0.0, 0.0)):
    yy, xx = np.mgrid[0:H, 0:W].astype(float)
    xx = xx - shift[0]
    yy = yy - shift[1]
    return 0.5 + 0.2 * np.sin(xx / 4.0) * np.cos(yy / 5.0) + 0.1 * np.sin((xx + yy) / 7.0)


def _track(points, eyes, T):
    return LandmarkTrack(np.repeat(eyes[None], T, 0), np.repeat(points[None], T, 0))


def test_align_identical_landmarks_is_plain_crop():
    H = W = 80
    frames = np.stack([_face_frame(H, W, (t, 0)) for t in range(3)])[..., None]
    seq = FrameSequence(frames, 30.0, "s", 0, "x")
    points = 40 + 18 * face_layout()
    eyes = np.array([[31.0, 40.0], [49.0, 40.0]])
    out = align_sequence(seq, _track(points, eyes, 3), (20, 16))
    rect = crop_rect(eyes)
    for t in range(3):
        np.testing.assert_allclose(out.frames[t], crop_frame(frames[t], rect, (20, 16)), atol=1e-12)


def test_align_undoes_translation():
    H = W = 96
    shift = np.array([3.0, 2.0])
    frames = np.stack([_face_frame(H, W), _face_frame(H, W, shift)])[..., None]
    seq = FrameSequence(frames, 30.0, "s", 0, "x")
    pts0 = 48 + 20 * face_layout()
    eyes = np.array([[38.0, 40.0], [58.0, 40.0]])
    track = LandmarkTrack(np.stack([eyes, eyes + shift]), np.stack([pts0, pts0 + shift]))
    out = align_sequence(seq, track, (32, 24))
    diff = np.abs(out.frames[1] - out.frames[0])[2:-2, 2:-2]
    assert diff.mean() <= 1e-3


def test_align_length_mismatch():
    seq = FrameSequence(np.zeros((3, 20, 20, 1)), 30.0, "s", 0, "x")
    track = _track(10 + 4 * face_layout(), np.array([[8.0, 10.0], [12.0, 10.0]]), 2)
    with pytest.raises(ValueError):
        align_sequence(seq, track, (8, 8))
