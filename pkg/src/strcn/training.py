"""Class-balanced loss, temporal augmentation and the SGD training loop."""

from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import NonFiniteError, SGD, Tensor
from .autodiff.tensor import make
from .dataset import FrameSequence
from .magnify import MagnificationConfig, magnify_frames

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    damping: float = 0.8
    batch_size: int = 20
    tol: float = 1e-3
    max_epochs: int = 200
    balanced: bool = True

    def validate(self) -> None:
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch normalization needs two samples)")
        if self.tol < 0 or self.max_epochs < 1:
            raise ValueError("tol must be >= 0 and max_epochs >= 1")


@dataclass(frozen=True)
class AugmentationSpec:
    alphas: Tuple[float, ...] = tuple(range(5, 15))
    keeps: Tuple[int, ...] = (100, 90, 80, 70, 60)
    seed: int = 0

    @property
    def n_variants(self) -> int:
        return len(self.alphas) * len(self.keeps)


# balanced loss --------------------------------------------------------------------


def _labels(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        if y.shape[1] != n_classes or not np.all((y == 0) | (y == 1)) or np.any(y.sum(axis=1) != 1):
            raise ValueError("one-hot labels must have exactly one 1 per row")
        y = y.argmax(axis=1)
    y = y.astype(int)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y


def class_weights(labels, n_classes: int) -> np.ndarray:
    """``beta_i = B / (C * n_c(i))`` from the in-batch class counts."""
    labels = _labels(labels, n_classes)
    counts = np.bincount(labels, minlength=n_classes)
    return len(labels) / (n_classes * counts[labels])


def _loss_and_prob_grad(probs: np.ndarray, labels, n_classes: int, balanced: bool):
    labels = _labels(labels, n_classes)
    if probs.ndim != 2 or probs.shape != (len(labels), n_classes):
        raise ValueError(f"probabilities of shape {probs.shape} for {len(labels)} labels and {n_classes} classes")
    onehot = np.eye(n_classes)[labels]
    beta = class_weights(labels, n_classes) if balanced else np.ones(len(labels))
    p = np.clip(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
    inside = (probs > PROB_FLOOR) & (probs < 1.0 - PROB_FLOOR)
    per_sample = -(onehot * np.log(p) + (1 - onehot) * np.log(1 - p)).sum(axis=1)
    loss = float((beta * per_sample).sum())
    dp = beta[:, None] * (-onehot / p + (1 - onehot) / (1 - p)) * inside
    return loss, dp, per_sample


def balanced_loss(probs, labels, n_classes: Optional[int] = None, balanced: bool = True):
    """Weighted elementwise cross-entropy on softmax outputs.

    Parameters
    ----------
    probs : (B, C) array of softmax probabilities.
    labels : (B,) class indices or (B, C) one-hot rows.
    n_classes : total class count ``C``; defaults to ``probs.shape[1]``.

    Returns
    -------
    loss : float
        ``sum_i beta_i * sum_c -[y log p + (1 - y) log(1 - p)]``
    grad_logits : (B, C) array
        Exact gradient with respect to the logits feeding the softmax.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n_classes = probs.shape[1] if n_classes is None else n_classes
    loss, dp, _ = _loss_and_prob_grad(probs, labels, n_classes, balanced)
    grad_logits = probs * (dp - (dp * probs).sum(axis=1, keepdims=True))
    return loss, grad_logits


def balanced_loss_tensor(probs: Tensor, labels, n_classes: int, balanced: bool = True) -> Tensor:
    """Differentiable scalar loss node on top of a softmax output tensor."""
    loss, dp, _ = _loss_and_prob_grad(probs.data, labels, n_classes, balanced)

    def backward(g):
        probs._accumulate(g * dp)

    return make(np.array(loss), (probs,), backward, "balanced_loss")


# augmentation ---------------------------------------------------------------------


def keep_count(T: int, q: float) -> int:
    """``round(q * T / 100)`` with halves rounded up."""
    return int(math.floor(q * T / 100.0 + 0.5))


def keep_indices(T: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted random subset of ``range(T)`` of size ``keep_count(T, q)`` that contains 0."""
    k = keep_count(T, q)
    if k < 2:
        raise ValueError(f"keeping {q}% of {T} frames leaves fewer than 2")
    if k >= T:
        return np.arange(T)
    rest = rng.choice(np.arange(1, T), size=k - 1, replace=False)
    return np.concatenate([[0], np.sort(rest)])


def augmentation_plan(T: int, spec: AugmentationSpec, source_id: str = "") -> List[Tuple[float, float, np.ndarray]]:
    """``(alpha, q, frame indices)`` for every variant, deterministic in seed and source id."""
    if T < 5:
        raise ValueError(f"augmentation needs T >= 5, got {T}")
    rng = np.random.default_rng([spec.seed, zlib.crc32(source_id.encode())])
    return [(float(a), q, keep_indices(T, q, rng)) for a in spec.alphas for q in spec.keeps]


def augment(seq: FrameSequence, spec: AugmentationSpec = AugmentationSpec(),
            mag: MagnificationConfig = MagnificationConfig()) -> List[FrameSequence]:
    """Magnify once per amplification factor, then subsample frames per keep level.

    Variants keep the source's subject and source ids so they always fall on
    the same side of a split as the original.
    """
    plan = augmentation_plan(seq.T, spec, seq.source_id)
    cache = {}
    out = []
    for alpha, _, idx in plan:
        if alpha not in cache:
            cache[alpha] = magnify_frames(seq.frames, seq.fps, replace(mag, alpha=alpha))
        out.append(replace(seq, frames=cache[alpha][idx], frame_indices=seq.frame_indices[idx]))
    return out


# training loop --------------------------------------------------------------------


@dataclass
class TrainResult:
    losses: List[float] = field(default_factory=list)  # epoch-mean loss
    lrs: List[float] = field(default_factory=list)     # lr used in each epoch
    converged: bool = False

    @property
    def epochs(self) -> int:
        return len(self.losses)


def make_batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffled mini-batches; a trailing singleton joins the previous batch."""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def write_loss_curve(result: TrainResult, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "lr"])
        for e, (loss, lr) in enumerate(zip(result.losses, result.lrs), start=1):
            w.writerow([e, repr(loss), repr(lr)])
    return path


def train(net, X: np.ndarray, y: Sequence[int], hyper: TrainHyper = TrainHyper(), seed: int = 0,
          loss_csv=None) -> TrainResult:
    """Fit ``net`` on encoded inputs ``X`` (N x rows x cols x channels) and labels ``y``.

    The learning rate is multiplied by ``hyper.damping`` after every epoch;
    training stops once the epoch-mean loss changes by less than
    ``hyper.tol`` or after ``hyper.max_epochs`` epochs.
    """
    hyper.validate()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if len(X) == 0:
        raise ValueError("training split is empty")
    if len(X) != len(y):
        raise ValueError(f"{len(X)} inputs but {len(y)} labels")
    if len(X) < 2:
        raise ValueError("training needs at least 2 samples for batch normalization")
    n_classes = net.cfg.n_classes
    rng = np.random.default_rng(seed)
    opt = SGD(net.parameters(), hyper.lr, hyper.momentum, hyper.weight_decay)
    result = TrainResult()
    net.train()
    lr = hyper.lr
    for epoch in range(1, hyper.max_epochs + 1):
        opt.lr = lr
        total = 0.0
        for b, idx in enumerate(make_batches(len(X), hyper.batch_size, rng)):
            opt.zero_grad()
            try:
                probs = net.forward(Tensor(X[idx]))
                loss = balanced_loss_tensor(probs, y[idx], n_classes, hyper.balanced)
                loss.backward()
                opt.step()
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"training diverged at epoch {epoch}, batch {b} (lr={lr:g}): {exc}"
                ) from exc
            if not math.isfinite(float(loss.data)):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b} (lr={lr:g})")
            total += float(loss.data)
        mean = total / len(X)
        if not all(np.all(np.isfinite(p.data)) for p in opt.params):
            raise TrainingDivergedError(f"non-finite parameters after epoch {epoch} (lr={lr:g})")
        result.losses.append(mean)
        result.lrs.append(lr)
        log.debug("epoch %d mean loss %.6f lr %.3g", epoch, mean, lr)
        if epoch > 1 and abs(result.losses[-2] - mean) < hyper.tol:
            result.converged = True
            break
        lr *= hyper.damping
    if loss_csv is not None:
        write_loss_curve(result, loss_csv)
    net.eval()
    return result
