"""Closed-form smoothing for the scalar linear-Gaussian model.

Kalman filter, Rauch-Tung-Striebel smoother, the moments ``(m_p, v_p)`` of the
time-0 smoother ``X_0 | y_{0:p}`` for every ``p``, the Gaussian quantile
coupling of two successive smoothers and the asymptotic decay rate of the
coupled increments.  These are the exact references for the other backends.

Notation follows the usual Kalman conventions: ``m_{p|p}, v_{p|p}`` are the
filtered moments, ``m_{p+1|p}, v_{p+1|p}`` the one-step predictions,
``d_p = v_{p|p} / v_{p+1|p}`` and ``c_p = alpha d_p`` the smoother gain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from mlsmooth.models import LinearGaussianParams, ObservationSequence

__all__ = [
    "FilterState",
    "SmootherMoments",
    "kalman_filter",
    "rts_smoother",
    "fixed_point_moments",
    "gaussian_quantile_coupling",
    "stationary_decay_rate",
    "steady_state_filter_variance",
    "lag_one_joint",
    "fixed_point_joint",
]


@dataclass(frozen=True)
class FilterState:
    m_filt: float
    v_filt: float
    m_pred: float
    v_pred: float


@dataclass(frozen=True)
class SmootherMoments:
    """Moments of ``X_0 | y_{0:p}`` for ``p = 0..len-1``.

    ``dmean[p] = m_p - m_{p-1}`` and ``dvar[p] = v_p - v_{p-1}`` come from the
    closed-form increment expressions rather than from subtraction, so they
    stay accurate long after the increments fall below the rounding error of
    ``m_p`` itself.  ``dmean[0]`` and ``dvar[0]`` hold ``m_0`` and ``v_0``.
    """

    mean: np.ndarray
    var: np.ndarray
    d: np.ndarray
    c: np.ndarray
    dmean: np.ndarray
    dvar: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)

    def __len__(self) -> int:
        return len(self.mean)

    def at(self, p: int) -> tuple[float, float]:
        return float(self.mean[p]), float(self.var[p])


def kalman_filter(params: LinearGaussianParams, obs: ObservationSequence) -> list[FilterState]:
    """Filter from time 0 to ``obs.last_time``; times without data only predict."""
    if len(obs) == 0:
        raise ValueError("observation sequence is empty")
    a, b2, t2 = params.alpha, params.beta**2, params.tau**2
    m, v = params.m0, params.sigma0**2
    out = []
    for t in range(obs.last_time + 1):
        if obs.has(t):
            s = v + t2
            k = v / s
            m = m + k * (float(obs.at(t)) - m)
            v = v * t2 / s
        m_pred, v_pred = a * m, a * a * v + b2
        out.append(FilterState(m, v, m_pred, v_pred))
        m, v = m_pred, v_pred
    return out


def _gain_ratio(f: FilterState) -> float:
    return f.v_filt / f.v_pred if f.v_pred > 0 else 0.0


def rts_smoother(filters: list[FilterState], params: LinearGaussianParams) -> list[tuple[float, float]]:
    """Backward pass ``m_{k|n} = m_{k|k} + c_k (m_{k+1|n} - m_{k+1|k})``.

    The gain is ``c_k = alpha v_{k|k} / v_{k+1|k}``.
    """
    n = len(filters)
    means, variances = [0.0] * n, [0.0] * n
    means[-1], variances[-1] = filters[-1].m_filt, filters[-1].v_filt
    for k in range(n - 2, -1, -1):
        f = filters[k]
        c = params.alpha * _gain_ratio(f)
        means[k] = f.m_filt + c * (means[k + 1] - f.m_pred)
        variances[k] = f.v_filt + c * c * (variances[k + 1] - f.v_pred)
    return list(zip(means, variances))


def fixed_point_moments(params: LinearGaussianParams, obs: ObservationSequence, up_to: int) -> SmootherMoments:
    """Mean and variance of the time-0 smoother for every prefix ``y_{0:p}``, ``p <= up_to``.

    Uses the product-sum representation obtained by unrolling the RTS
    recursion down to time 0::

        m_p = sum_{i<=p} m_{i|i} P_i (1 - [i<p] alpha^2 d_i),   P_i = alpha^i prod_{j<i} d_j
        v_p = sum_{i<=p} v_{i|i} P_i^2 (1 - [i<p] alpha^2 d_i)

    with increments ``m_p - m_{p-1} = P_p (m_{p|p} - m_{p|p-1})`` and
    ``v_p - v_{p-1} = P_p^2 (v_{p|p} - v_{p|p-1})``.
    """
    if up_to < 0 or up_to > obs.last_time:
        raise ValueError(f"up_to must lie in [0, {obs.last_time}], got {up_to}")
    filters = kalman_filter(params, obs.upto(max(up_to, obs.start)))[: up_to + 1]
    a = params.alpha
    mf = np.array([f.m_filt for f in filters])
    vf = np.array([f.v_filt for f in filters])
    d = np.array([_gain_ratio(f) for f in filters])
    P = np.empty(up_to + 1)
    P[0] = 1.0
    for i in range(1, up_to + 1):
        P[i] = P[i - 1] * a * d[i - 1]
    shrink = 1.0 - a * a * d
    m_terms = np.cumsum(np.concatenate([[0.0], mf[:-1] * P[:-1] * shrink[:-1]]))
    v_terms = np.cumsum(np.concatenate([[0.0], vf[:-1] * P[:-1] ** 2 * shrink[:-1]]))
    mean = m_terms + mf * P
    var = v_terms + vf * P**2

    dmean = np.empty(up_to + 1)
    dvar = np.empty(up_to + 1)
    dmean[0], dvar[0] = mean[0], var[0]
    if up_to > 0:
        m_prior = np.array([f.m_pred for f in filters[:-1]])
        v_prior = np.array([f.v_pred for f in filters[:-1]])
        dmean[1:] = P[1:] * (mf[1:] - m_prior)
        dvar[1:] = P[1:] ** 2 * (vf[1:] - v_prior)
    return SmootherMoments(mean, var, d, a * d, dmean, dvar)


def gaussian_quantile_coupling(moments_p, moments_pm1, u):
    """Comonotone pair ``(Pi_p^{-1}(u), Pi_{p-1}^{-1}(u))`` of two Gaussian smoothers.

    ``moments_*`` are ``(mean, variance)`` pairs.  The quantile
    ``m + sigma sqrt(2) erfinv(2u - 1)`` is evaluated as ``m + sigma ndtri(u)``,
    the same function without the loss of precision of ``2u - 1`` near the
    endpoints.
    """
    u = np.asarray(u, dtype=float)
    if np.any((u <= 0) | (u >= 1)):
        raise ValueError("u must lie strictly inside (0, 1)")
    z = ndtri(u)
    (m1, v1), (m0, v0) = moments_p, moments_pm1
    return m1 + math.sqrt(v1) * z, m0 + math.sqrt(v0) * z


def stationary_decay_rate(params: LinearGaussianParams, gamma: float) -> float:
    """Per-level decay factor ``(alpha + beta^2 / (alpha gamma^2))^{-2}``.

    ``gamma`` is the (steady) filtering standard deviation.
    """
    if params.alpha == 0:
        raise ValueError("rate undefined for alpha = 0")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    return (params.alpha + params.beta**2 / (params.alpha * gamma**2)) ** -2


def steady_state_filter_variance(params: LinearGaussianParams) -> float:
    """Fixed point of the filtering Riccati recursion."""
    a2, b2, t2 = params.alpha**2, params.beta**2, params.tau**2
    if a2 == 0:
        return b2 * t2 / (b2 + t2)
    lin = b2 + t2 - a2 * t2
    return (-lin + math.sqrt(lin * lin + 4 * a2 * b2 * t2)) / (2 * a2)


def lag_one_joint(params: LinearGaussianParams, obs: ObservationSequence, p: int):
    """Mean and covariance of ``(X_p, X_{p+1}) | y_{..p+1}``."""
    filters = kalman_filter(params, obs.upto(p + 1))
    fp, fq = filters[p], filters[p + 1]
    c = params.alpha * _gain_ratio(fp)
    mean = np.array([fp.m_filt + c * (fq.m_filt - fp.m_pred), fq.m_filt])
    var_p = fp.v_filt + c * c * (fq.v_filt - fp.v_pred)
    cov = np.array([[var_p, c * fq.v_filt], [c * fq.v_filt, fq.v_filt]])
    return mean, cov


def fixed_point_joint(params: LinearGaussianParams, obs: ObservationSequence, p: int):
    """Mean and covariance of ``(X_0, X_p) | y_{..p}``."""
    filters = kalman_filter(params, obs.upto(max(p, obs.start)))[: p + 1]
    smoothed = rts_smoother(filters, params)
    gain = 1.0
    for f in filters[:p]:
        gain *= params.alpha * _gain_ratio(f)
    fp = filters[p]
    mean = np.array([smoothed[0][0], fp.m_filt])
    cov = np.array([[smoothed[0][1], gain * fp.v_filt], [gain * fp.v_filt, fp.v_filt]])
    return mean, cov
