"""Coarse-to-fine optical flow with Lorentzian data and smoothness penalties.

The energy minimized at each pyramid level is::

    E(u, v) = sum rho(I1(x + u, y + v) - I0(x, y))
              + mu * sum [rho(|grad u|) + rho(|grad v|)]

    rho(s) = log(1 + s^2 / (2 sigma^2))

Each outer (warping) iteration linearizes the data term around the current
flow and minimizes the linearized energy by iteratively reweighted least
squares; since ``rho`` is concave in ``s^2`` every reweighting step
majorizes the objective. The increment is then accepted only if the true
(warped) energy does not increase, halving the step otherwise, so the energy
sequence at every level is non-increasing by construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import convolve1d, map_coordinates
from scipy.sparse.linalg import LinearOperator, cg

log = logging.getLogger(__name__)

_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class FlowParams:
    sigma: float = 0.03
    smoothness: float = 0.05
    smooth_sigma: float = 1.0  # scale of the flow-gradient penalty, in pixels per pixel
    levels: int = 3
    warps: int = 10
    irls_iters: int = 3
    max_halvings: int = 6
    tol: float = 1e-4
    cg_iters: int = 150
    cg_rtol: float = 1e-5
    max_step: float = 1.0  # largest per-pixel flow increment of one warping iteration


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    energies: List[List[float]] = field(default_factory=list)  # per level, coarse to fine
    converged: bool = True

    @property
    def uv(self) -> np.ndarray:
        return np.stack([self.u, self.v], axis=-1)


def to_gray(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return frame
    if frame.shape[-1] == 1:
        return frame[..., 0]
    if frame.shape[-1] == 3:
        return frame @ _LUMA
    raise ValueError(f"cannot convert frame with shape {frame.shape} to grayscale")


def lorentzian(x: np.ndarray, sigma: float) -> np.ndarray:
    return np.log1p(x * x / (2.0 * sigma * sigma))


def _downsample(img: np.ndarray) -> np.ndarray:
    b = convolve1d(convolve1d(img, _BINOMIAL, axis=0, mode="reflect"), _BINOMIAL, axis=1, mode="reflect")
    return b[::2, ::2]


def _resize(field_: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    h, w = field_.shape
    ys = np.linspace(0, h - 1, shape[0])
    xs = np.linspace(0, w - 1, shape[1])
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return map_coordinates(field_, [gy, gx], order=1, mode="nearest")


def _warp(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return map_coordinates(img, [np.clip(yy + v, 0, h - 1), np.clip(xx + u, 0, w - 1)],
                           order=1, mode="nearest")


def _grad_sq(f: np.ndarray) -> np.ndarray:
    gx = np.zeros_like(f)
    gy = np.zeros_like(f)
    gx[:, :-1] = f[:, 1:] - f[:, :-1]
    gy[:-1, :] = f[1:, :] - f[:-1, :]
    return gx * gx + gy * gy


def flow_energy(I0, I1, u, v, params: FlowParams) -> float:
    data = lorentzian(_warp(I1, u, v) - I0, params.sigma).sum()
    two_s2 = 2.0 * params.smooth_sigma ** 2
    smooth = np.log1p(_grad_sq(u) / two_s2).sum() + np.log1p(_grad_sq(v) / two_s2).sum()
    return float(data + params.smoothness * smooth)


def _difference_ops(h: int, w: int):
    n = h * w
    idx = np.arange(n).reshape(h, w)
    # forward differences, zero on the last column / row
    rx = idx[:, :-1].ravel()
    dx = sp.csr_matrix((np.r_[-np.ones(len(rx)), np.ones(len(rx))],
                        (np.r_[rx, rx], np.r_[rx, idx[:, 1:].ravel()])), shape=(n, n))
    ry = idx[:-1, :].ravel()
    dy = sp.csr_matrix((np.r_[-np.ones(len(ry)), np.ones(len(ry))],
                        (np.r_[ry, ry], np.r_[ry, idx[1:, :].ravel()])), shape=(n, n))
    return dx, dy


def _solve_level(I0, I1, u, v, params: FlowParams, history: List[float]) -> Tuple[np.ndarray, np.ndarray, bool]:
    h, w = I0.shape
    n = h * w
    dx, dy = _difference_ops(h, w)
    two_s2 = 2.0 * params.sigma ** 2
    two_s2s = 2.0 * params.smooth_sigma ** 2
    mu = params.smoothness
    gy1, gx1 = np.gradient(I1)
    energy = flow_energy(I0, I1, u, v, params)
    history.append(energy)
    converged = False
    for _ in range(params.warps):
        I1w = _warp(I1, u, v)
        Ix = _warp(gx1, u, v).ravel()
        Iy = _warp(gy1, u, v).ravel()
        It = (I1w - I0).ravel()
        uf, vf = u.ravel(), v.ravel()
        du = np.zeros(n)
        dv = np.zeros(n)
        for _ in range(params.irls_iters):
            r = It + Ix * du + Iy * dv
            a = 1.0 / (two_s2 + r * r)
            bu = 1.0 / (two_s2s + _grad_sq((u.ravel() + du).reshape(h, w)).ravel())
            bv = 1.0 / (two_s2s + _grad_sq((v.ravel() + dv).reshape(h, w)).ravel())
            Lu = dx.T @ sp.diags(bu) @ dx + dy.T @ sp.diags(bu) @ dy
            Lv = dx.T @ sp.diags(bv) @ dx + dy.T @ sp.diags(bv) @ dy
            A = sp.bmat([[sp.diags(a * Ix * Ix) + mu * Lu, sp.diags(a * Ix * Iy)],
                         [sp.diags(a * Ix * Iy), sp.diags(a * Iy * Iy) + mu * Lv]], format="csr")
            rhs = -np.r_[a * Ix * It + mu * (Lu @ uf), a * Iy * It + mu * (Lv @ vf)]
            # tiny ridge keeps textureless, flat-flow systems nonsingular
            A = (A + sp.identity(2 * n, format="csr") * 1e-10).tocsr()
            if not np.any(rhs):
                du, dv = np.zeros(n), np.zeros(n)
                continue
            inv_diag = 1.0 / A.diagonal()
            precond = LinearOperator(A.shape, matvec=lambda x: inv_diag * x, dtype=np.float64)
            sol, _ = cg(A, rhs, x0=np.r_[du, dv], rtol=params.cg_rtol, atol=0.0,
                        maxiter=params.cg_iters, M=precond)
            du, dv = sol[:n], sol[n:]
        # an ill-conditioned solve in textureless areas can return huge increments
        # that the saturating penalties barely notice; keep each warp local
        du = np.clip(du.reshape(h, w), -params.max_step, params.max_step)
        dv = np.clip(dv.reshape(h, w), -params.max_step, params.max_step)
        step = 1.0
        accepted = False
        for _ in range(params.max_halvings + 1):
            cand = flow_energy(I0, I1, u + step * du, v + step * dv, params)
            if cand <= energy:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True  # no descent direction left at this level
            break
        u = u + step * du
        v = v + step * dv
        rel = (energy - cand) / max(abs(energy), 1e-12)
        energy = cand
        history.append(energy)
        if rel < params.tol or step * max(np.abs(du).max(), np.abs(dv).max()) < 1e-4:
            converged = True
            break
    return u, v, converged


def estimate_flow(onset: np.ndarray, apex: np.ndarray, params: FlowParams = FlowParams()) -> FlowField:
    """Flow (u, v) such that ``apex(x + u, y + v) ~ onset(x, y)``."""
    I0 = to_gray(onset)
    I1 = to_gray(apex)
    if I0.shape != I1.shape:
        raise ValueError(f"frame shapes differ: {I0.shape} vs {I1.shape}")
    pyr0, pyr1 = [I0], [I1]
    for _ in range(params.levels - 1):
        if min(pyr0[-1].shape) < 8:
            break
        pyr0.append(_downsample(pyr0[-1]))
        pyr1.append(_downsample(pyr1[-1]))
    u = np.zeros(pyr0[-1].shape)
    v = np.zeros(pyr0[-1].shape)
    energies: List[List[float]] = []
    converged = True
    for level in range(len(pyr0) - 1, -1, -1):
        a, b = pyr0[level], pyr1[level]
        if u.shape != a.shape:
            sy = (a.shape[0] - 1) / max(u.shape[0] - 1, 1)
            sx = (a.shape[1] - 1) / max(u.shape[1] - 1, 1)
            u = _resize(u, a.shape) * sx
            v = _resize(v, a.shape) * sy
        hist: List[float] = []
        u, v, converged = _solve_level(a, b, u, v, params, hist)
        energies.append(hist)
    if not converged:
        log.warning("optical flow did not converge within %d warps; returning best iterate", params.warps)
    return FlowField(u=u, v=v, energies=energies, converged=converged)
