"""Unnormalized target log-densities with analytic gradients and Hessians.

Each target returns ``(value (n,), grad (n, k), hess (n, k, k))`` at points
``(n, k)``.  Coordinates are in the natural time order:

* lag-1 target: ``(x_p, x_{p+1})``;
* fixed-point target: ``(x_0, x_1, x_2)`` at ``p = 1`` and ``(x_0, x_p, x_{p+1})`` after.

For ``p >= 1`` the earlier coordinates are reference (standard normal)
coordinates pushed through the previous map component ``T1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from mlsmooth.models import HmmInstance

__all__ = ["TargetDensity", "build_lag1_target", "build_fixedpoint_target", "permuted_target", "gaussian_target"]

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class TargetDensity:
    dim: int
    derivs: Callable
    ops_per_point: int = 1
    name: str = "target"

    def log_unnormalized(self, x) -> np.ndarray:
        return self.derivs(np.asarray(x, dtype=float))[0]


def _require_derivs(model: HmmInstance):
    if model.dim != 1 or not model.has_derivatives:
        raise ValueError("transport targets need a scalar model with analytic derivatives")


def _log_eta(x):
    return -HALF_LOG_2PI - 0.5 * x * x


def gaussian_target(mean, cov) -> TargetDensity:
    """Normalized Gaussian log-density, handy for tests and sanity checks."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    prec = np.linalg.inv(cov)
    k = len(mean)
    const = -k * HALF_LOG_2PI - 0.5 * np.linalg.slogdet(cov)[1]

    def derivs(x):
        d = x - mean
        g = -d @ prec
        return const + 0.5 * np.sum(d * g, axis=1), g, np.broadcast_to(-prec, (len(x), k, k)).copy()

    return TargetDensity(k, derivs, 1, "gaussian")


def build_lag1_target(model: HmmInstance, prev_T1, y_next, y_first=None) -> TargetDensity:
    """Target over ``(x_p, x_{p+1})``.

    With ``prev_T1 = None`` this is the first pair
    ``p_0(x_0) f(x_0, x_1) g(x_0, y_0) g(x_1, y_1)`` (pass ``y_first = y_0``, or
    ``None`` for no observation at time 0).  Otherwise ``prev_T1`` is the 1D
    filtering map of the previous step and the target is
    ``eta(x_p) f(T1(x_p), x_{p+1}) g(x_{p+1}, y_{p+1})``.
    """
    _require_derivs(model)

    if prev_T1 is None:

        def derivs(x):
            x0, x1 = x[:, 0], x[:, 1]
            i_d1, i_d2 = model.init_derivs(x0)
            fx, fx2, fxx, fxx2, fx2x2 = model.trans_derivs(x0, x1)
            g1, g2 = model.obs_derivs(x1, y_next)
            val = model.init_logpdf(x0) + model.trans_logpdf(x0, x1) + model.obs_logpdf(x1, y_next)
            h00 = i_d2 + fxx
            g0 = i_d1 + fx
            if y_first is not None:
                val = val + model.obs_logpdf(x0, y_first)
                o1, o2 = model.obs_derivs(x0, y_first)
                g0, h00 = g0 + o1, h00 + o2
            grad = np.stack([g0, fx2 + g1], axis=1)
            hess = np.empty((len(x), 2, 2))
            hess[:, 0, 0] = h00
            hess[:, 0, 1] = hess[:, 1, 0] = fxx2
            hess[:, 1, 1] = fx2x2 + g2
            return val, grad, hess

        return TargetDensity(2, derivs, 4 + (y_first is not None), "lag1-first")

    def derivs(x):
        xp, xq = x[:, 0], x[:, 1]
        u, du, ddu = prev_T1.component_input_derivs(0, xp[:, None])
        du, ddu = du[:, 0], ddu[:, 0, 0]
        fx, fx2, fxx, fxx2, fx2x2 = model.trans_derivs(u, xq)
        g1, g2 = model.obs_derivs(xq, y_next)
        val = _log_eta(xp) + model.trans_logpdf(u, xq) + model.obs_logpdf(xq, y_next)
        grad = np.stack([-xp + fx * du, fx2 + g1], axis=1)
        hess = np.empty((len(x), 2, 2))
        hess[:, 0, 0] = -1 + fxx * du * du + fx * ddu
        hess[:, 0, 1] = hess[:, 1, 0] = fxx2 * du
        hess[:, 1, 1] = fx2x2 + g2
        return val, grad, hess

    return TargetDensity(2, derivs, 3 + prev_T1.component_ops(0), "lag1")


def build_fixedpoint_target(model: HmmInstance, prev_T1, y_next, y_prev=None) -> TargetDensity:
    """Target over ``(x_0, x_p, x_{p+1})`` for the fixed-point recursion.

    With ``prev_T1 = None`` (``p = 1``) the target is
    ``p_0(x_0) f(x_0, x_1) f(x_1, x_2) g(x_1, y_1) g(x_2, y_2)`` with
    ``y_prev = y_1`` and ``y_next = y_2``.  Otherwise ``prev_T1`` is a
    triangular map whose component 1 gives ``x_p`` from reference
    coordinates ``(x_0, x_p)``, and the target is
    ``eta(x_0) eta(x_p) f(T1(x_0, x_p), x_{p+1}) g(x_{p+1}, y_{p+1})``.
    """
    _require_derivs(model)

    if prev_T1 is None:
        if y_prev is None:
            raise ValueError("the first fixed-point target needs y_prev = y_1")

        def derivs(x):
            x0, x1, x2 = x[:, 0], x[:, 1], x[:, 2]
            i1, i2 = model.init_derivs(x0)
            ax, ax2, axx, axx2, ax2x2 = model.trans_derivs(x0, x1)
            bx, bx2, bxx, bxx2, bx2x2 = model.trans_derivs(x1, x2)
            o1, o1d = model.obs_derivs(x1, y_prev)
            o2, o2d = model.obs_derivs(x2, y_next)
            val = (
                model.init_logpdf(x0)
                + model.trans_logpdf(x0, x1)
                + model.trans_logpdf(x1, x2)
                + model.obs_logpdf(x1, y_prev)
                + model.obs_logpdf(x2, y_next)
            )
            grad = np.stack([i1 + ax, ax2 + bx + o1, bx2 + o2], axis=1)
            hess = np.zeros((len(x), 3, 3))
            hess[:, 0, 0] = i2 + axx
            hess[:, 0, 1] = hess[:, 1, 0] = axx2
            hess[:, 1, 1] = ax2x2 + bxx + o1d
            hess[:, 1, 2] = hess[:, 2, 1] = bxx2
            hess[:, 2, 2] = bx2x2 + o2d
            return val, grad, hess

        return TargetDensity(3, derivs, 5, "fixedpoint-first")

    def derivs(x):
        x0, xp, xq = x[:, 0], x[:, 1], x[:, 2]
        pts = np.zeros((len(x), prev_T1.dim))
        pts[:, 0], pts[:, 1] = x0, xp
        u, du, ddu = prev_T1.component_input_derivs(1, pts)
        fx, fx2, fxx, fxx2, fx2x2 = model.trans_derivs(u, xq)
        g1, g2 = model.obs_derivs(xq, y_next)
        val = _log_eta(x0) + _log_eta(xp) + model.trans_logpdf(u, xq) + model.obs_logpdf(xq, y_next)
        grad = np.stack([-x0 + fx * du[:, 0], -xp + fx * du[:, 1], fx2 + g1], axis=1)
        hess = np.empty((len(x), 3, 3))
        hess[:, :2, :2] = fxx[:, None, None] * du[:, :, None] * du[:, None, :] + fx[:, None, None] * ddu
        hess[:, 0, 0] -= 1
        hess[:, 1, 1] -= 1
        hess[:, :2, 2] = hess[:, 2, :2] = fxx2[:, None] * du
        hess[:, 2, 2] = fx2x2 + g2
        return val, grad, hess

    return TargetDensity(3, derivs, 4 + prev_T1.component_ops(1), "fixedpoint")


def permuted_target(target: TargetDensity, perm) -> TargetDensity:
    """Target in permuted coordinates: ``new(z) = target(x)`` with ``x[perm[k]] = z[k]``."""
    perm = np.asarray(perm, dtype=int)
    inv = np.argsort(perm)

    def derivs(z):
        v, g, h = target.derivs(z[:, inv])
        return v, g[:, perm], h[:, perm][:, :, perm]

    return TargetDensity(target.dim, derivs, target.ops_per_point, target.name)
