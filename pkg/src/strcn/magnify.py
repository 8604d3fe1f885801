"""Eulerian motion magnification with a Laplacian pyramid and an IIR temporal bandpass."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List

import numpy as np
from scipy.ndimage import convolve1d

from .dataset import FrameSequence

_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass(frozen=True)
class MagnificationConfig:
    alpha: float = 8.0
    wavelength: float = 16.0
    cutoff_lo: float = 0.05
    cutoff_hi: float = 0.4
    levels: int = 4

    def validate(self, fps: float) -> None:
        if not 0 < self.cutoff_lo < self.cutoff_hi < fps / 2:
            raise ValueError(
                f"cutoffs must satisfy 0 < cutoff_lo < cutoff_hi < fps/2; got "
                f"{self.cutoff_lo}, {self.cutoff_hi} at fps={fps}"
            )
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.wavelength <= 0:
            raise ValueError("wavelength must be > 0")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")


@dataclass
class LaplacianPyramid:
    bands: List[np.ndarray]  # coarse-to-fine
    residual: np.ndarray

    @property
    def levels(self) -> int:
        return len(self.bands)


def _blur(img: np.ndarray, axes, gain: float = 1.0) -> np.ndarray:
    out = img
    for ax in axes:
        out = convolve1d(out, _BINOMIAL * gain, axis=ax, mode="reflect")
    return out


def _expand(img: np.ndarray, shape, axes) -> np.ndarray:
    up_shape = list(img.shape)
    for ax in axes:
        up_shape[ax] = shape[ax]
    up = np.zeros(up_shape)
    sl = [slice(None)] * img.ndim
    for ax in axes:
        sl[ax] = slice(0, None, 2)
    up[tuple(sl)] = img
    # normalise by the expanded sampling pattern so borders keep unit gain
    ones = np.zeros([up_shape[a] if a in axes else 1 for a in range(img.ndim)])
    ones[tuple(sl)] = 1.0
    return _blur(up, axes, gain=2.0) / _blur(ones, axes, gain=2.0)


def build_pyramid(img: np.ndarray, levels: int, axes=(0, 1)) -> LaplacianPyramid:
    """Laplacian decomposition over the two spatial ``axes`` of ``img``.

    Extra axes (time, channels) are carried along untouched, so a whole
    T x H x W x C clip can be decomposed at once with ``axes=(1, 2)``.
    """
    img = np.asarray(img, dtype=np.float64)
    if min(img.shape[a] for a in axes) < 2 ** levels:
        raise ValueError(f"image {tuple(img.shape[a] for a in axes)} too small for {levels} levels")
    bands = []
    cur = img
    sl = [slice(None)] * img.ndim
    for ax in axes:
        sl[ax] = slice(0, None, 2)
    for _ in range(levels):
        down = _blur(cur, axes)[tuple(sl)]
        bands.append(cur - _expand(down, cur.shape, axes))
        cur = down
    return LaplacianPyramid(bands=bands[::-1], residual=cur)


def reconstruct(pyr: LaplacianPyramid, axes=(0, 1)) -> np.ndarray:
    img = pyr.residual
    for band in pyr.bands:
        img = _expand(img, band.shape, axes) + band
    return img


def pole(cutoff: float, fps: float) -> float:
    """Smoothing factor of the one-pole lowpass with the given -3 dB cutoff."""
    return 1.0 - math.exp(-2.0 * math.pi * cutoff / fps)


def _lowpass(x: np.ndarray, r: float) -> np.ndarray:
    y = np.empty_like(x)
    y[0] = x[0]
    for t in range(1, len(x)):
        y[t] = y[t - 1] + r * (x[t] - y[t - 1])
    return y


def iir_bandpass(series: np.ndarray, cfg: MagnificationConfig, fps: float) -> np.ndarray:
    """Difference of two first-order lowpass filters along axis 0.

    Both filters start from the first sample, so constant inputs give an
    identically zero response.
    """
    cfg.validate(fps)
    x = np.asarray(series, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("temporal series needs at least 2 samples")
    return _lowpass(x, pole(cfg.cutoff_hi, fps)) - _lowpass(x, pole(cfg.cutoff_lo, fps))


def effective_alpha(alpha: float, delta: np.ndarray, wavelength: float) -> np.ndarray:
    """``min(alpha, alpha_c)`` with ``alpha_c = wavelength / (8 |delta|) - 1`` floored at 0."""
    mag = np.abs(np.asarray(delta, dtype=np.float64))
    with np.errstate(divide="ignore"):
        bound = np.where(mag > 0, wavelength / (8.0 * np.where(mag > 0, mag, 1.0)) - 1.0, np.inf)
    return np.minimum(alpha, np.maximum(bound, 0.0))


def magnify_frames(frames: np.ndarray, fps: float, cfg: MagnificationConfig) -> np.ndarray:
    """Magnify a T x H x W x C clip; returns the clip clipped to [0, 1]."""
    cfg.validate(fps)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] < 2:
        raise ValueError("magnification needs at least 2 frames")
    if cfg.alpha == 0:
        return np.clip(frames, 0.0, 1.0)
    pyr = build_pyramid(frames, cfg.levels, axes=(1, 2))
    out_bands = []
    for band in pyr.bands:
        delta = iir_bandpass(band, cfg, fps)
        out_bands.append(band + effective_alpha(cfg.alpha, delta, cfg.wavelength) * delta)
    delta = iir_bandpass(pyr.residual, cfg, fps)
    residual = pyr.residual + effective_alpha(cfg.alpha, delta, cfg.wavelength) * delta
    out = reconstruct(LaplacianPyramid(out_bands, residual), axes=(1, 2))
    return np.clip(out, 0.0, 1.0)


def magnify(seq: FrameSequence, cfg: MagnificationConfig) -> FrameSequence:
    return replace(seq, frames=magnify_frames(seq.frames, seq.fps, cfg))
