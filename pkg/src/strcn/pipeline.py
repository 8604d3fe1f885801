"""End-to-end orchestration: alignment, magnification, encoding and per-fold training.

Everything that does not depend on the fold (aligned clips, magnified clips,
raw flow fields, per-sequence difference maps) is computed once per sequence
and cached, in memory and optionally on disk. Everything that does depend on
the fold (heat map, mask, flow scale, network) is fitted on the training side
only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig
from .connectivity import (
    BinaryMask,
    DifferenceHeatMap,
    build_strcn_a_input,
    build_strcn_g_input,
    flow_scale,
    mask_from_heatmap,
    sequence_difference,
)
from .dataset import FrameSequence, LandmarkTrack
from .flow import estimate_flow
from .magnify import magnify_frames
from .model import StrcnConfig, StrcnNetwork, build_network
from .spatial import align_sequence
from .training import TrainResult, augmentation_plan, train

log = logging.getLogger(__name__)

Variant = Tuple[float, np.ndarray]  # (alpha, kept frame indices)


class ArtifactStore:
    """Write-once ``.npz`` files under one stage directory."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, name: str) -> Path:
        return self.root / f"{name}.npz"

    def has(self, name: str) -> bool:
        return self.path(name).is_file()

    def load(self, name: str) -> Dict[str, np.ndarray]:
        with np.load(self.path(name)) as z:
            return {k: z[k] for k in z.files}

    def save(self, name: str, **arrays) -> Path:
        p = self.path(name)
        if p.is_file():
            return p
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_name(p.name + ".tmp")
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        tmp.replace(p)
        return p


def _akey(alpha: float) -> str:
    return f"{float(alpha):g}"


@dataclass
class FoldData:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    stats: Dict = field(default_factory=dict)


class Pipeline:
    def __init__(self, sequences: Sequence[FrameSequence], tracks: Sequence[LandmarkTrack],
                 cfg: RunConfig, stores: Optional[Dict[str, ArtifactStore]] = None,
                 n_classes: Optional[int] = None, keep_models: bool = False):
        if len(sequences) != len(tracks):
            raise ValueError(f"{len(sequences)} sequences but {len(tracks)} landmark tracks")
        if not sequences:
            raise ValueError("pipeline needs at least one sequence")
        self.sequences = list(sequences)
        self.tracks = list(tracks)
        self.cfg = cfg
        self.stores = stores or {}
        self.labels = np.array([s.label for s in self.sequences], dtype=int)
        self.subjects = [s.subject_id for s in self.sequences]
        self.n_classes = int(n_classes if n_classes is not None else self.labels.max() + 1)
        self.keep_models = keep_models
        self.models: Dict[int, StrcnNetwork] = {}
        self.train_results: Dict[int, TrainResult] = {}
        self._aligned: Dict[int, FrameSequence] = {}
        self._mag: Dict[Tuple[int, str], np.ndarray] = {}
        self._sigma: Dict[Tuple[int, str], np.ndarray] = {}
        self._flow: Dict[Tuple[int, str, int], np.ndarray] = {}
        self._diff: Dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def variant(self) -> str:
        return self.cfg.variant

    @property
    def test_alpha(self) -> float:
        return float(self.cfg.magnify.alpha)

    # fold-independent stages ---------------------------------------------------

    def aligned(self, i: int) -> FrameSequence:
        if i not in self._aligned:
            seq = self.sequences[i]
            store = self.stores.get("preprocess")
            name = seq.source_id
            if store is not None and store.has(name):
                frames = store.load(name)["frames"]
                self._aligned[i] = replace(seq, frames=frames)
            else:
                self._aligned[i] = align_sequence(seq, self.tracks[i], self.cfg.out_size,
                                                  self.cfg.crop_constants, self.cfg.crop.lwm_n)
                if store is not None:
                    store.save(name, frames=self._aligned[i].frames)
        return self._aligned[i]

    def magnified(self, i: int, alpha: Optional[float] = None) -> np.ndarray:
        """Magnified frames of sequence ``i`` (T x H x W x C)."""
        alpha = self.test_alpha if alpha is None else float(alpha)
        key = (i, _akey(alpha))
        if key in self._mag:
            return self._mag[key]
        seq = self.aligned(i)
        store = self.stores.get("magnify")
        name = f"{seq.source_id}_a{_akey(alpha)}"
        if store is not None and store.has(name):
            frames = store.load(name)["frames"]
        else:
            frames = magnify_frames(seq.frames, seq.fps, replace(self.cfg.magnify, alpha=alpha))
            if store is not None and alpha == self.test_alpha:
                store.save(name, frames=frames)
        if self.variant == "A" or alpha == self.test_alpha:
            self._mag[key] = frames
        return frames

    def variants(self, i: int) -> List[Variant]:
        T = self.sequences[i].T
        if not self.cfg.augment.enabled:
            return [self.test_variant(i)]
        plan = augmentation_plan(T, self.cfg.augmentation, self.sequences[i].source_id)
        return [(alpha, idx) for alpha, _, idx in plan]

    def test_variant(self, i: int) -> Variant:
        return (self.test_alpha, np.arange(self.sequences[i].T))

    # appearance encoding ---------------------------------------------------------

    def difference_map(self, i: int) -> np.ndarray:
        if i not in self._diff:
            store = self.stores.get("encode")
            name = f"{self.sequences[i].source_id}_diff"
            if store is not None and store.has(name):
                self._diff[i] = store.load(name)["diff"]
            else:
                seq = replace(self.aligned(i), frames=self.magnified(i))
                self._diff[i] = sequence_difference(seq)
                if store is not None:
                    store.save(name, diff=self._diff[i])
        return self._diff[i]

    def heatmap(self, indices: Sequence[int]) -> DifferenceHeatMap:
        """Heat map of the test-alpha magnified clips of ``indices``, summed in source-id order."""
        order = sorted(indices, key=lambda i: self.sequences[i].source_id)
        E = np.zeros(self.difference_map(order[0]).shape)
        for i in order:
            E += self.difference_map(i)
        return DifferenceHeatMap(E, len(order))

    def fit_mask(self, train_idx: Sequence[int]) -> BinaryMask:
        return mask_from_heatmap(self.heatmap(train_idx), self.cfg.mask.p)

    def encode_a(self, i: int, variant: Variant, mask: BinaryMask) -> np.ndarray:
        alpha, idx = variant
        frames = self.magnified(i, alpha)[idx]
        seq = replace(self.aligned(i), frames=frames, frame_indices=idx)
        return build_strcn_a_input(seq, mask, self.cfg.mask.frames)

    # geometric encoding ------------------------------------------------------------

    def _sigma_of(self, i: int, alpha: float) -> np.ndarray:
        key = (i, _akey(alpha))
        if key not in self._sigma:
            f = self.magnified(i, alpha)
            self._sigma[key] = np.r_[0.0, (f[1:] - f[:1]).reshape(f.shape[0] - 1, -1).std(axis=1)]
        return self._sigma[key]

    def apex(self, i: int, variant: Variant) -> int:
        """Original frame index of the apex of a (subsampled) variant."""
        alpha, idx = variant
        sig = self._sigma_of(i, alpha)[idx[1:]]
        return int(idx[1 + int(np.argmax(sig))])

    def raw_flow(self, i: int, variant: Variant) -> np.ndarray:
        alpha = variant[0]
        apex = self.apex(i, variant)
        key = (i, _akey(alpha), apex)
        if key not in self._flow:
            store = self.stores.get("encode")
            name = f"{self.sequences[i].source_id}_a{_akey(alpha)}_t{apex}_flow"
            if store is not None and store.has(name):
                self._flow[key] = store.load(name)["uv"]
            else:
                frames = self.magnified(i, alpha)
                ff = estimate_flow(frames[0], frames[apex], self.cfg.flow)
                self._flow[key] = ff.uv
                if store is not None:
                    store.save(name, uv=ff.uv, converged=np.array(ff.converged))
        return self._flow[key]

    def fit_flow_scale(self, train_idx: Sequence[int]) -> float:
        return flow_scale([self.raw_flow(i, v) for i in train_idx for v in self.variants(i)])

    def encode_g(self, i: int, variant: Variant, scale: float) -> np.ndarray:
        return build_strcn_g_input(self.raw_flow(i, variant), scale)

    # per-fold -------------------------------------------------------------------

    def prepare(self, indices: Optional[Sequence[int]] = None) -> None:
        """Populate every fold-independent cache for ``indices`` (default: all)."""
        indices = range(len(self)) if indices is None else indices
        for i in indices:
            if self.variant == "A":
                self.difference_map(i)
                for alpha in sorted({v[0] for v in self.variants(i)}):
                    self.magnified(i, alpha)
            else:
                for v in self.variants(i) + [self.test_variant(i)]:
                    self.raw_flow(i, v)
                # magnified clips were only needed to compute the flows
                for key in [k for k in self._mag if k[0] == i and k[1] != _akey(self.test_alpha)]:
                    del self._mag[key]

    def encode_fold(self, train_idx: Sequence[int], test_idx: Sequence[int]) -> FoldData:
        train_idx = list(train_idx)
        test_idx = list(test_idx)
        if set(train_idx) & set(test_idx):
            raise ValueError("train and test indices overlap")
        stats: Dict = {}
        if self.variant == "A":
            mask = self.fit_mask(train_idx)
            stats.update(mask_threshold=mask.threshold, d2=mask.d2)
            enc = lambda i, v: self.encode_a(i, v, mask)
        else:
            scale = self.fit_flow_scale(train_idx)
            stats.update(flow_scale=scale)
            enc = lambda i, v: self.encode_g(i, v, scale)
        Xtr, ytr = [], []
        for i in train_idx:
            for v in self.variants(i):
                Xtr.append(enc(i, v))
                ytr.append(self.labels[i])
        Xte = [enc(i, self.test_variant(i)) for i in test_idx]
        return FoldData(np.stack(Xtr), np.array(ytr), np.stack(Xte), self.labels[test_idx], stats)

    def model_config(self, input_shape) -> StrcnConfig:
        m = self.cfg.model
        return StrcnConfig(self.variant, tuple(input_shape), self.n_classes, m.feature_maps,
                           m.rcl_count, m.recurrences)

    def fit(self, train_idx: Sequence[int], test_idx: Sequence[int] = (), fold: int = 0, loss_csv=None):
        """Encode, build and train one network; returns ``(net, fold data, train result)``."""
        data = self.encode_fold(train_idx, test_idx) if len(test_idx) else self._encode_train_only(train_idx)
        net = build_network(self.model_config(data.X_train.shape[1:]), self.cfg.seed)
        res = train(net, data.X_train, data.y_train, self.cfg.train,
                    seed=self.cfg.seed * 1000 + fold, loss_csv=loss_csv)
        return net, data, res

    def _encode_train_only(self, train_idx) -> FoldData:
        train_idx = list(train_idx)
        empty = np.zeros((0,))
        if self.variant == "A":
            mask = self.fit_mask(train_idx)
            stats = dict(mask_threshold=mask.threshold, d2=mask.d2, mask=mask)
            X = [self.encode_a(i, v, mask) for i in train_idx for v in self.variants(i)]
        else:
            scale = self.fit_flow_scale(train_idx)
            stats = dict(flow_scale=scale)
            X = [self.encode_g(i, v, scale) for i in train_idx for v in self.variants(i)]
        y = [self.labels[i] for i in train_idx for _ in self.variants(i)]
        return FoldData(np.stack(X), np.array(y), empty, empty, stats)

    def fit_predict(self, train_idx, test_idx, fold: int = 0, loss_csv=None):
        net, data, res = self.fit(train_idx, test_idx, fold, loss_csv)
        probs = net.predict(data.X_test)
        stats = dict(data.stats, epochs=res.epochs, final_loss=res.losses[-1],
                     converged=res.converged, n_train=int(len(data.X_train)))
        if self.keep_models:
            self.models[fold] = net
            self.train_results[fold] = res
        return probs.argmax(axis=1), stats
