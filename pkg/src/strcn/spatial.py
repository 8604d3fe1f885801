"""Face cropping from eye centers and landmark-driven local weighted mean (LWM) alignment."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.spatial import cKDTree

from .dataset import FrameSequence, LandmarkTrack

OUT_SIZE_A = (64, 48)
OUT_SIZE_G = (300, 245)


class DegenerateGeometryError(ValueError):
    pass


class SingularFitError(ValueError):
    pass


@dataclass(frozen=True)
class CropConstants:
    delta1: float = 0.4
    delta2: float = 0.6
    delta3: float = 2.2
    delta4: float = 1.8

    def __post_init__(self):
        if self.delta3 <= 0 or self.delta4 <= 0:
            raise ValueError("delta3 and delta4 must be positive")


@dataclass(frozen=True)
class CropRect:
    x: float
    y: float
    height: float
    width: float

    @property
    def topleft(self) -> Tuple[float, float]:
        return (self.x, self.y)


def crop_rect(eyes, consts: CropConstants = CropConstants()) -> CropRect:
    """Face rectangle from the left and right eye centers ``((xl, yl), (xr, yr))``.

    topleft = (xl, yl) + d1 * (0, yl - yr) - d2 * (xr - xl, 0),
    height = d3 * |eyeL - eyeR|, width = d4 * |eyeL - eyeR|.
    """
    (xl, yl), (xr, yr) = np.asarray(eyes, dtype=np.float64)
    dist = float(np.hypot(xl - xr, yl - yr))
    if dist == 0.0:
        raise DegenerateGeometryError("eye centers coincide; inter-ocular distance is zero")
    x = xl - consts.delta2 * (xr - xl)
    y = yl + consts.delta1 * (yl - yr)
    return CropRect(x=float(x), y=float(y), height=consts.delta3 * dist, width=consts.delta4 * dist)


def rect_grid(rect: CropRect, out_size: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """Source (x, y) sample coordinates for an ``out_size`` (rows, cols) resampling of ``rect``.

    Corner samples land on the first and last pixel covered by the rectangle,
    so a full-frame rectangle at the frame's own size is the identity.
    """
    oh, ow = out_size
    ys = rect.y + np.linspace(0.0, rect.height - 1.0, oh) if oh > 1 else np.array([rect.y])
    xs = rect.x + np.linspace(0.0, rect.width - 1.0, ow) if ow > 1 else np.array([rect.x])
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return gx, gy


def sample_bilinear(frame: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear samples of an H x W (x C) frame; coordinates are clamped to the frame."""
    frame = np.asarray(frame, dtype=np.float64)
    h, w = frame.shape[:2]
    yc = np.clip(ys, 0.0, h - 1.0)
    xc = np.clip(xs, 0.0, w - 1.0)
    if frame.ndim == 2:
        return map_coordinates(frame, [yc, xc], order=1, mode="nearest")
    return np.stack([map_coordinates(frame[..., c], [yc, xc], order=1, mode="nearest")
                     for c in range(frame.shape[2])], axis=-1)


def _check_overlap(rect: CropRect, h: int, w: int) -> None:
    if rect.x + rect.width <= 0 or rect.y + rect.height <= 0 or rect.x >= w or rect.y >= h:
        raise ValueError(f"crop rectangle {rect} lies entirely outside the {h}x{w} frame")


def crop_frame(frame: np.ndarray, rect: CropRect, out_size: Tuple[int, int]) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    _check_overlap(rect, *frame.shape[:2])
    gx, gy = rect_grid(rect, out_size)
    return sample_bilinear(frame, gx, gy)


# local weighted mean ---------------------------------------------------------------


def lwm_weight(r: np.ndarray) -> np.ndarray:
    """Compactly supported kernel 1 - 3r^2 + 2r^3 on [0, 1), zero beyond."""
    r = np.asarray(r, dtype=np.float64)
    return np.where(r < 1.0, 1.0 - 3.0 * r ** 2 + 2.0 * r ** 3, 0.0)


def _quad_terms(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return np.stack([dx, dy, dx * dx, dx * dy, dy * dy], axis=-1)


@dataclass
class LwmTransform:
    """Per-control-point quadratics ``S_i`` blended by radial weights.

    ``S_i(p) = dst_i + [dx, dy, dx^2, dx dy, dy^2] @ coef_i`` with
    ``(dx, dy) = (p - src_i) / radius_i``, so ``S_i(src_i) = dst_i`` exactly.
    """

    src: np.ndarray      # N x 2 control points
    dst: np.ndarray      # N x 2 correspondences
    coef: np.ndarray     # N x 5 x 2
    radius: np.ndarray   # N, distance to the (n-1)th nearest other control point
    n: int

    def local(self, i: np.ndarray, pts: np.ndarray) -> np.ndarray:
        d = (pts - self.src[i]) / self.radius[i][..., None]
        terms = _quad_terms(d[..., 0], d[..., 1])
        return self.dst[i] + np.einsum("...k,...kc->...c", terms, self.coef[i])

    def evaluate(self, pts: np.ndarray, chunk: int = 4096) -> Tuple[np.ndarray, np.ndarray]:
        """Map points (... x 2); returns ``(mapped, valid)``.

        Points outside every control point's support get the nearest control
        point's polynomial and ``valid = False``.
        """
        pts = np.asarray(pts, dtype=np.float64)
        flat = pts.reshape(-1, 2)
        out = np.empty_like(flat)
        valid = np.empty(len(flat), dtype=bool)
        idx_all = np.arange(len(self.src))
        for s in range(0, len(flat), chunk):
            p = flat[s:s + chunk]
            r = np.linalg.norm(p[:, None, :] - self.src[None], axis=-1)  # P x N
            wts = lwm_weight(r / self.radius[None])
            vals = self.local(np.broadcast_to(idx_all, r.shape), np.broadcast_to(p[:, None, :], r.shape + (2,)))
            tot = wts.sum(axis=1)
            ok = tot > 0
            blended = np.einsum("pn,pnc->pc", wts, vals) / np.where(ok, tot, 1.0)[:, None]
            nearest = r.argmin(axis=1)
            blended[~ok] = vals[np.arange(len(p)), nearest][~ok]
            out[s:s + chunk] = blended
            valid[s:s + chunk] = ok
        return out.reshape(pts.shape), valid.reshape(pts.shape[:-1])


def lwm_fit(src_points, dst_points, n: int = 12) -> LwmTransform:
    """Fit a local weighted mean transform taking ``src_points`` to ``dst_points``.

    Each control point's quadratic passes exactly through its own
    correspondence and fits its ``n - 1`` nearest neighbours in the least
    squares sense (``n = 6`` interpolates them exactly).
    """
    src = np.asarray(src_points, dtype=np.float64)
    dst = np.asarray(dst_points, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError("src_points and dst_points must both be N x 2")
    N = len(src)
    if n < 6:
        raise ValueError("a quadratic neighbourhood needs n >= 6")
    if N < n:
        raise ValueError(f"{N} control points for a neighbourhood of {n}")
    tree = cKDTree(src)
    dist, nbr = tree.query(src, k=n)
    # column 0 is the point itself when points are distinct
    coef = np.empty((N, 5, 2))
    radius = dist[:, n - 1].copy()
    if np.any(radius <= 0):
        raise SingularFitError("duplicate control points give a zero support radius")
    for i in range(N):
        others = nbr[i][nbr[i] != i][: n - 1]
        d = (src[others] - src[i]) / radius[i]
        A = _quad_terms(d[:, 0], d[:, 1])
        b = dst[others] - dst[i]
        sv = np.linalg.svd(A, compute_uv=False)
        if sv[-1] <= 1e-9 * sv[0]:
            raise SingularFitError(
                f"control point {i}: neighbourhood is degenerate for a quadratic fit"
            )
        coef[i] = np.linalg.lstsq(A, b, rcond=None)[0]
    return LwmTransform(src=src, dst=dst, coef=coef, radius=radius, n=n)


def lwm_apply(t: LwmTransform, image: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse-map warp: output pixel ``(x, y)`` samples ``image`` at ``t(x, y)``.

    Returns the warped image and a per-pixel validity mask (False where the
    mapping fell back to nearest-control extrapolation).
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    mapped, valid = t.evaluate(np.stack([xx, yy], axis=-1))
    return sample_bilinear(image, mapped[..., 0], mapped[..., 1]), valid


def align_sequence(
    seq: FrameSequence,
    track: LandmarkTrack,
    out_size: Tuple[int, int],
    consts: CropConstants = CropConstants(),
    n: int = 12,
) -> FrameSequence:
    """Warp every frame onto frame 0's landmarks, then crop and resize with frame 0's eyes.

    The warp and the crop are composed so each output pixel is interpolated
    only once.
    """
    if len(track) != seq.T:
        raise ValueError(f"landmark track has {len(track)} frames, sequence has {seq.T}")
    rect = crop_rect(track.eyes[0], consts)
    h, w = seq.frames.shape[1:3]
    _check_overlap(rect, h, w)
    gx, gy = rect_grid(rect, out_size)
    grid = np.stack([gx, gy], axis=-1)
    ref = track.points[0]
    out = np.empty((seq.T,) + tuple(out_size) + (seq.frames.shape[3],))
    out[0] = sample_bilinear(seq.frames[0], gx, gy)
    for t in range(1, seq.T):
        cur = track.points[t]
        if np.array_equal(cur, ref):
            src_xy = grid
        else:
            src_xy, _ = lwm_fit(ref, cur, n).evaluate(grid)
        out[t] = sample_bilinear(seq.frames[t], src_xy[..., 0], src_xy[..., 1])
    return replace(seq, frames=np.clip(out, 0.0, 1.0))
