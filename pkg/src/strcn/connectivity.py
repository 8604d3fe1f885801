"""Network input encodings: the masked appearance matrix and the onset-to-apex flow field."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .dataset import FrameSequence
from .flow import FlowField, FlowParams, estimate_flow

T_FIXED = 30
_GRID_MAGIC = b"STRCNGR1"


class DegenerateMaskError(ValueError):
    pass


@dataclass
class DifferenceHeatMap:
    E: np.ndarray
    count: int = 0

    def __add__(self, other: "DifferenceHeatMap") -> "DifferenceHeatMap":
        if self.E.shape != other.E.shape:
            raise ValueError(f"heat map shapes differ: {self.E.shape} vs {other.E.shape}")
        return DifferenceHeatMap(self.E + other.E, self.count + other.count)


@dataclass
class BinaryMask:
    mask: np.ndarray  # H x W bool
    p: float
    threshold: float

    @property
    def d2(self) -> int:
        return int(self.mask.sum())


def sequence_difference(seq: FrameSequence) -> np.ndarray:
    """``sum_t |I(t) - I(0)|`` over frames, summed over channels."""
    f = seq.frames
    return np.abs(f[1:] - f[:1]).sum(axis=(0, 3))


def difference_heatmap(sequences: Iterable[FrameSequence]) -> DifferenceHeatMap:
    """Accumulate the absolute onset differences of every sequence.

    Per-sequence terms are summed in a canonical order (sorted by source id,
    then by content) so the result is bitwise independent of input order.
    """
    terms = []
    for seq in sequences:
        terms.append((seq.source_id, sequence_difference(seq)))
    if not terms:
        raise ValueError("heat map needs at least one sequence")
    shape = terms[0][1].shape
    for sid, d in terms:
        if d.shape != shape:
            raise ValueError(f"sequence {sid} has frame size {d.shape}, expected {shape}")
    terms.sort(key=lambda item: (item[0], item[1].tobytes()))
    E = np.zeros(shape)
    for _, d in terms:
        E += d
    return DifferenceHeatMap(E, len(terms))


def nearest_rank_threshold(E: np.ndarray, p: float) -> float:
    """Value at the ``(100 - p)``th percentile of ``E`` by the nearest-rank rule."""
    vals = np.sort(np.asarray(E, dtype=np.float64).ravel())
    rank = math.ceil((100.0 - p) / 100.0 * vals.size)
    return float(vals[max(rank, 1) - 1])


def mask_from_heatmap(E, p: float = 30.0) -> BinaryMask:
    """Select pixels whose heat strictly exceeds the ``(100 - p)``th percentile."""
    E = E.E if isinstance(E, DifferenceHeatMap) else np.asarray(E, dtype=np.float64)
    if not 0 < p <= 100:
        raise ValueError(f"p must lie in (0, 100], got {p}")
    if E.size == 0 or np.all(E == E.flat[0]):
        raise DegenerateMaskError("heat map is constant; no pixel exceeds the percentile threshold")
    if p == 100:
        # strict '>' would always drop the minimum, so the full percentile keeps everything
        return BinaryMask(np.ones(E.shape, dtype=bool), p, float(E.min()))
    thr = nearest_rank_threshold(E, p)
    mask = E > thr
    if not mask.any():
        raise DegenerateMaskError(f"no heat value exceeds the threshold {thr} at p={p}")
    return BinaryMask(mask, p, thr)


def resample_time(x: np.ndarray, length: int = T_FIXED) -> np.ndarray:
    """Linear interpolation along axis 0 onto ``length`` evenly spaced positions."""
    T = x.shape[0]
    if T < 2:
        raise ValueError("temporal resampling needs at least 2 frames")
    pos = np.linspace(0.0, T - 1.0, length)
    lo = np.minimum(np.floor(pos).astype(int), T - 2)
    frac = (pos - lo).reshape((-1,) + (1,) * (x.ndim - 1))
    return (1.0 - frac) * x[lo] + frac * x[lo + 1]


def build_strcn_a_input(seq: FrameSequence, mask: BinaryMask, length: int = T_FIXED) -> np.ndarray:
    """Masked pixels (row-major) by resampled time by channel: ``d2 x 30 x C``."""
    if seq.frames.shape[1:3] != mask.mask.shape:
        raise ValueError(f"frames {seq.frames.shape[1:3]} do not match mask {mask.mask.shape}")
    if mask.d2 == 0:
        raise DegenerateMaskError("mask selects no pixels")
    picked = seq.frames[:, mask.mask, :]  # T x d2 x C, boolean indexing is row-major
    return np.ascontiguousarray(resample_time(picked, length).transpose(1, 0, 2))


def locate_apex(seq: FrameSequence) -> int:
    """Frame whose difference from the onset has the largest pixel standard deviation."""
    f = seq.frames
    sig = (f[1:] - f[:1]).reshape(f.shape[0] - 1, -1).std(axis=1)
    return int(np.argmax(sig)) + 1  # argmax returns the first maximum


def sequence_flow(seq: FrameSequence, params: FlowParams = FlowParams()) -> FlowField:
    apex = locate_apex(seq)
    return estimate_flow(seq.frames[0], seq.frames[apex], params)


def flow_scale(flows: Sequence, percentile: float = 99.0) -> float:
    """Normalization statistic: a percentile of ``|u|`` and ``|v|`` pooled over ``flows``."""
    mags = [np.abs(f.uv if isinstance(f, FlowField) else np.asarray(f)).ravel() for f in flows]
    if not mags:
        raise ValueError("flow scale needs at least one flow field")
    scale = float(np.percentile(np.concatenate(mags), percentile))
    return scale if scale > 0 else 1.0


def build_strcn_g_input(flow, scale: float) -> np.ndarray:
    """``H x W x 2`` tensor of (u, v) divided by the stored training-split scale."""
    uv = flow.uv if isinstance(flow, FlowField) else np.asarray(flow, dtype=np.float64)
    if not np.all(np.isfinite(uv)):
        raise ValueError("flow field contains non-finite values")
    if not scale > 0:
        raise ValueError("flow scale must be positive")
    return uv / scale


# persistence ----------------------------------------------------------------------


def save_grid(path: Union[str, Path], grid: np.ndarray, p: float, threshold: float) -> Path:
    """Flat little-endian float64 grid with an ``(H, W, p, E_p)`` header."""
    grid = np.asarray(grid, dtype="<f8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_GRID_MAGIC)
        fh.write(struct.pack("<QQdd", grid.shape[0], grid.shape[1], float(p), float(threshold)))
        fh.write(grid.tobytes(order="C"))
    return path


def load_grid(path: Union[str, Path]):
    """Returns ``(grid, p, threshold)``."""
    with open(path, "rb") as fh:
        if fh.read(8) != _GRID_MAGIC:
            raise ValueError(f"{path}: not a grid file")
        h, w, p, thr = struct.unpack("<QQdd", fh.read(32))
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != h * w:
        raise ValueError(f"{path}: truncated grid ({data.size} of {h * w} values)")
    return data.reshape(h, w).astype(np.float64), p, thr


def save_mask(mask: BinaryMask, path) -> Path:
    return save_grid(path, mask.mask.astype(np.float64), mask.p, mask.threshold)


def load_mask(path) -> BinaryMask:
    grid, p, thr = load_grid(path)
    return BinaryMask(grid > 0.5, p, thr)


def save_heatmap(hm: DifferenceHeatMap, path, p: float = 0.0, threshold: float = 0.0) -> Path:
    return save_grid(path, hm.E, p, threshold)


def load_heatmap(path) -> DifferenceHeatMap:
    grid, _, _ = load_grid(path)
    return DifferenceHeatMap(grid)
