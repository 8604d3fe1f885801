"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .tensor import Tensor


class GradCheckResult(NamedTuple):
    max_rel_error: float
    checked: int
    skipped: int  # entries within eps of a kink, excluded when kink_tol is set


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    seed: int = 0,
    max_entries: Optional[int] = None,
    floor: float = 1e-5,
) -> float:
    """Return the maximum relative error between analytic and central-difference gradients.

    See :func:`grad_check_detailed` for the arguments.
    """
    return grad_check_detailed(fn, inputs, eps, seed, max_entries, floor).max_rel_error


def grad_check_detailed(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    seed: int = 0,
    max_entries: Optional[int] = None,
    floor: float = 1e-5,
    kink_tol: Optional[float] = None,
) -> GradCheckResult:
    """Compare analytic and central-difference gradients entry by entry.

    ``fn`` maps the input tensors to an output tensor; non-scalar outputs are
    contracted with a fixed random projection so a single backward pass covers
    every output entry. Every input with ``requires_grad`` is checked; with
    ``max_entries`` a random subset of each input's entries is probed.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, floor * scale)``
    where ``scale = max(1, max |n|)``. The floor keeps exactly-zero gradients
    (e.g. a bias feeding batch normalization) from dividing round-off by zero.

    Rectifiers and max pooling are not differentiable everywhere. With
    ``kink_tol`` set, an entry whose forward and backward one-sided slopes
    differ by more than ``kink_tol * scale`` straddles such a point within
    ``eps`` and is left out of the comparison (and counted in ``skipped``).
    """
    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape) if out.size > 1 else np.ones(out.shape)

    def objective() -> float:
        return float((fn(*inputs).data * proj).sum())

    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    (out * Tensor(proj)).sum().backward()

    worst = 0.0
    checked = skipped = 0
    base = objective()
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(len(idx))
        one_sided_gap = np.empty(len(idx))
        for k, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            fp = objective()
            flat[i] = old - eps
            fm = objective()
            flat[i] = old
            numeric[k] = (fp - fm) / (2 * eps)
            one_sided_gap[k] = abs((fp - base) - (base - fm)) / eps
        a = analytic.reshape(-1)[idx]
        scale = max(1.0, float(np.abs(numeric).max(initial=0.0)))
        keep = np.ones(len(idx), dtype=bool)
        if kink_tol is not None:
            keep = one_sided_gap <= kink_tol * scale
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor * scale)
        rel = (np.abs(a - numeric) / denom)[keep]
        worst = max(worst, float(rel.max(initial=0.0)))
        checked += int(keep.sum())
        skipped += int((~keep).sum())
    return GradCheckResult(worst, checked, skipped)
