"""Hidden Markov models: the abstract instance and the concrete models.

An :class:`HmmInstance` bundles the initial, transition and observation
densities together with samplers for each.  All log-densities broadcast over
NumPy arrays; the samplers take an explicit ``numpy.random.Generator`` so an
instance carries no mutable state and can be shared between workers.

Scalar models additionally expose analytic first and second derivatives of
their log-densities, which the transport-map objective needs for its exact
gradient and Hessian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from mlsmooth.rng import make_rng

__all__ = [
    "HmmInstance",
    "LinearGaussianParams",
    "LinearGaussian2DParams",
    "StochVolParams",
    "Trajectory",
    "ObservationSequence",
    "make_linear_gaussian",
    "make_linear_gaussian_2d",
    "make_stoch_vol",
    "simulate",
]

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class HmmInstance:
    """Densities and samplers of a hidden Markov model.

    ``trans_logpdf(x, x2)`` is ``log f(x, x2)``, the density of moving from
    ``x`` to ``x2``; ``obs_logpdf(x, y)`` is ``log g(x, y)``.  For ``dim > 1``
    the state lives on the last axis.

    The optional ``*_derivs`` callables return analytic derivatives:

    * ``init_derivs(x) -> (d1, d2)``
    * ``trans_derivs(x, x2) -> (d_x, d_x2, d_xx, d_xx2, d_x2x2)``
    * ``obs_derivs(x, y) -> (d1, d2)``, derivatives in ``x``.

    ``domain(horizon)`` returns a bounded box ``(lo, hi)`` (per state
    coordinate) covering the model's marginals up to ``horizon`` steps at
    8 standard deviations, used to truncate grid computations.
    """

    dim: int
    init_logpdf: Callable[[Any], Any]
    init_sampler: Callable[..., Any]
    trans_logpdf: Callable[[Any, Any], Any]
    trans_sampler: Callable[[np.random.Generator, Any], Any]
    obs_logpdf: Callable[[Any, Any], Any]
    obs_sampler: Callable[[np.random.Generator, Any], Any]
    domain: Callable[[int], tuple] = field(repr=False, default=None)
    init_derivs: Callable | None = field(repr=False, default=None)
    trans_derivs: Callable | None = field(repr=False, default=None)
    obs_derivs: Callable | None = field(repr=False, default=None)
    # per-axis transition log-densities when f factorizes over coordinates
    axis_trans_logpdfs: tuple | None = field(repr=False, default=None)
    # (a, c, s) when f(x, x2) is the N(a x + c, s^2) density of x2 (scalar models)
    linear_gaussian_transition: tuple | None = None
    name: str = "hmm"
    params: Any = None

    @property
    def has_derivatives(self) -> bool:
        return None not in (self.init_derivs, self.trans_derivs, self.obs_derivs)


@dataclass(frozen=True)
class Trajectory:
    values: np.ndarray
    seed: int
    start: int = 0

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class ObservationSequence:
    """Observations ``values[k]`` taken at time ``start + k``.

    ``start`` is 0 for the standard convention and 1 for fixed-point
    smoothing, where ``X_0`` is treated as a parameter with no observation.
    """

    values: np.ndarray
    seed: int = 0
    start: int = 0

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.start not in (0, 1):
            raise ValueError(f"observation start must be 0 or 1, got {self.start}")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def last_time(self) -> int:
        return self.start + len(self.values) - 1

    def has(self, t: int) -> bool:
        return self.start <= t <= self.last_time

    def at(self, t: int):
        if not self.has(t):
            raise IndexError(f"no observation at time {t}")
        return self.values[t - self.start]

    def from_time(self, start: int) -> "ObservationSequence":
        """Drop observations before ``start`` (e.g. ``from_time(1)`` for fixed-point runs)."""
        if start < self.start:
            raise ValueError("cannot extend an observation sequence backwards")
        return ObservationSequence(self.values[start - self.start:], self.seed, start)

    def upto(self, t: int) -> "ObservationSequence":
        return ObservationSequence(self.values[: t - self.start + 1], self.seed, self.start)


def _normal_logpdf(x, mean, std):
    if np.any(np.asarray(std) <= 0):
        raise ValueError("density undefined for zero noise standard deviation")
    z = (x - mean) / std
    return -0.5 * (LOG_2PI + z * z) - np.log(std)


# --------------------------------------------------------------------------
# Linear-Gaussian model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearGaussianParams:
    """``X_n = alpha X_{n-1} + beta V_n``, ``Y_n = X_n + tau W_n``, ``X_0 ~ N(m0, sigma0^2)``.

    ``beta = 0`` and ``sigma0 = 0`` are accepted so degenerate chains can be
    simulated and filtered; the densities of such a model are undefined and
    raise ``ValueError`` when evaluated.
    """

    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 1.0
    m0: float = 1.0
    sigma0: float = 2.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.beta < 0 or self.sigma0 < 0:
            raise ValueError("beta and sigma0 must be non-negative")


def make_linear_gaussian(params: LinearGaussianParams) -> HmmInstance:
    a, b, t, m0, s0 = params.alpha, params.beta, params.tau, params.m0, params.sigma0

    def init_sampler(rng, size=None):
        return m0 + s0 * rng.standard_normal(size)

    def trans_sampler(rng, x):
        x = np.asarray(x, dtype=float)
        return a * x + b * rng.standard_normal(x.shape)

    def obs_sampler(rng, x):
        x = np.asarray(x, dtype=float)
        return x + t * rng.standard_normal(x.shape)

    def init_derivs(x):
        x = np.asarray(x, dtype=float)
        return -(x - m0) / s0**2, np.full_like(x, -1.0 / s0**2)

    def trans_derivs(x, x2):
        r = np.asarray(x2 - a * x, dtype=float)
        ib2 = 1.0 / b**2
        c = np.ones_like(r)
        return a * r * ib2, -r * ib2, -a * a * ib2 * c, a * ib2 * c, -ib2 * c

    def obs_derivs(x, y):
        r = np.asarray(y - x, dtype=float)
        return r / t**2, np.full_like(r, -1.0 / t**2)

    def domain(horizon: int = 25):
        n = np.arange(horizon + 1)
        mean = a**n * m0
        geo = np.array([np.sum(a ** (2 * np.arange(k))) for k in n])
        std = np.sqrt(a ** (2 * n) * s0**2 + b**2 * geo)
        return float(np.min(mean - 8 * std)), float(np.max(mean + 8 * std))

    return HmmInstance(
        dim=1,
        init_logpdf=lambda x: _normal_logpdf(x, m0, s0),
        init_sampler=init_sampler,
        trans_logpdf=lambda x, x2: _normal_logpdf(x2, a * x, b),
        trans_sampler=trans_sampler,
        obs_logpdf=lambda x, y: _normal_logpdf(y, x, t),
        obs_sampler=obs_sampler,
        domain=domain,
        init_derivs=init_derivs,
        trans_derivs=trans_derivs,
        obs_derivs=obs_derivs,
        linear_gaussian_transition=(a, 0.0, b) if b > 0 else None,
        name="linear-gaussian",
        params=params,
    )


# --------------------------------------------------------------------------
# Stochastic volatility model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StochVolParams:
    """``X_n = mu + phi (X_{n-1} - mu) + beta V_n``, ``Y_n = W_n exp(X_n / 2)``.

    The initial law is ``N(mu, 1 / (1 - phi^2))``.
    """

    mu: float = -0.5
    phi: float = 0.95
    beta: float = 0.25

    def __post_init__(self):
        if not abs(self.phi) < 1:
            raise ValueError(f"|phi| must be < 1, got {self.phi}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")

    @property
    def init_variance(self) -> float:
        return 1.0 / (1.0 - self.phi**2)


def _stoch_vol_obs_logpdf(x, y):
    return -0.5 * (LOG_2PI + x + y * y * np.exp(-x))


def make_stoch_vol(params: StochVolParams) -> HmmInstance:
    mu, phi, b = params.mu, params.phi, params.beta
    s0 = math.sqrt(params.init_variance)

    def init_sampler(rng, size=None):
        return mu + s0 * rng.standard_normal(size)

    def trans_sampler(rng, x):
        x = np.asarray(x, dtype=float)
        return mu + phi * (x - mu) + b * rng.standard_normal(x.shape)

    def obs_sampler(rng, x):
        x = np.asarray(x, dtype=float)
        return rng.standard_normal(x.shape) * np.exp(0.5 * x)

    def init_derivs(x):
        x = np.asarray(x, dtype=float)
        return -(x - mu) / s0**2, np.full_like(x, -1.0 / s0**2)

    def trans_derivs(x, x2):
        r = np.asarray(x2 - mu - phi * (x - mu), dtype=float)
        ib2 = 1.0 / b**2
        c = np.ones_like(r)
        return phi * r * ib2, -r * ib2, -phi * phi * ib2 * c, phi * ib2 * c, -ib2 * c

    def obs_derivs(x, y):
        e = y * y * np.exp(-np.asarray(x, dtype=float))
        return -0.5 + 0.5 * e, -0.5 * e

    def domain(horizon: int = 50):
        n = np.arange(horizon + 1)
        var = phi ** (2 * n) * s0**2 + b**2 * (1 - phi ** (2 * n)) / (1 - phi**2)
        sd = math.sqrt(float(var.max()))
        return mu - 8 * sd, mu + 8 * sd

    return HmmInstance(
        dim=1,
        init_logpdf=lambda x: _normal_logpdf(x, mu, s0),
        init_sampler=init_sampler,
        trans_logpdf=lambda x, x2: _normal_logpdf(x2, mu + phi * (x - mu), b),
        trans_sampler=trans_sampler,
        obs_logpdf=_stoch_vol_obs_logpdf,
        obs_sampler=obs_sampler,
        domain=domain,
        init_derivs=init_derivs,
        trans_derivs=trans_derivs,
        obs_derivs=obs_derivs,
        linear_gaussian_transition=(phi, mu * (1 - phi), b),
        name="stoch-vol",
        params=params,
    )


# --------------------------------------------------------------------------
# Two-dimensional linear-Gaussian model with a factorized transition
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearGaussian2DParams:
    """``X_n = diag(a) X_{n-1} + diag(q) V_n``, ``Y_n = H X_n + r W_n``.

    The transition factorizes over the two coordinates, which keeps grid
    computations on a tensor grid cheap; the observation matrix ``H`` and the
    initial covariance ``P0`` couple them.
    """

    a: tuple = (0.8, 0.6)
    q: tuple = (1.0, 1.0)
    H: tuple = ((1.0, 0.5), (0.0, 1.0))
    r: float = 1.0
    m0: tuple = (0.0, 0.0)
    P0: tuple = ((1.0, 0.3), (0.3, 1.0))

    def __post_init__(self):
        if min(self.q) <= 0 or self.r <= 0:
            raise ValueError("noise standard deviations must be positive")
        P0 = np.asarray(self.P0, dtype=float)
        if P0.shape != (2, 2) or np.any(np.linalg.eigvalsh(P0) <= 0):
            raise ValueError("P0 must be a 2x2 positive definite matrix")


def make_linear_gaussian_2d(params: LinearGaussian2DParams) -> HmmInstance:
    a = np.asarray(params.a, dtype=float)
    q = np.asarray(params.q, dtype=float)
    H = np.asarray(params.H, dtype=float)
    r = float(params.r)
    m0 = np.asarray(params.m0, dtype=float)
    P0 = np.asarray(params.P0, dtype=float)
    P0_inv = np.linalg.inv(P0)
    P0_logdet = float(np.linalg.slogdet(P0)[1])
    L0 = np.linalg.cholesky(P0)

    def init_logpdf(x):
        d = np.asarray(x, dtype=float) - m0
        quad = np.einsum("...i,ij,...j->...", d, P0_inv, d)
        return -0.5 * (2 * LOG_2PI + P0_logdet + quad)

    def init_sampler(rng, size=None):
        shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
        z = rng.standard_normal(shape + (2,))
        return m0 + z @ L0.T

    def trans_logpdf(x, x2):
        x, x2 = np.asarray(x, dtype=float), np.asarray(x2, dtype=float)
        return np.sum(_normal_logpdf(x2, a * x, q), axis=-1)

    def trans_sampler(rng, x):
        x = np.asarray(x, dtype=float)
        return a * x + q * rng.standard_normal(x.shape)

    def obs_logpdf(x, y):
        mean = np.asarray(x, dtype=float) @ H.T
        return np.sum(_normal_logpdf(np.asarray(y, dtype=float), mean, r), axis=-1)

    def obs_sampler(rng, x):
        mean = np.asarray(x, dtype=float) @ H.T
        return mean + r * rng.standard_normal(mean.shape)

    def domain(horizon: int = 25):
        n = np.arange(horizon + 1)[:, None]
        geo = np.cumsum(a ** (2 * n), axis=0) - a ** (2 * n)  # sum_{k<n} a^{2k}
        sd = np.sqrt(a ** (2 * n) * np.diag(P0) + q**2 * geo)
        mean = a**n * m0
        return tuple(np.min(mean - 8 * sd, axis=0)), tuple(np.max(mean + 8 * sd, axis=0))

    axis = tuple(
        (lambda ai, qi: (lambda x, x2: _normal_logpdf(x2, ai * x, qi)))(a[i], q[i]) for i in range(2)
    )
    return HmmInstance(
        dim=2,
        init_logpdf=init_logpdf,
        init_sampler=init_sampler,
        trans_logpdf=trans_logpdf,
        trans_sampler=trans_sampler,
        obs_logpdf=obs_logpdf,
        obs_sampler=obs_sampler,
        domain=domain,
        axis_trans_logpdfs=axis,
        name="linear-gaussian-2d",
        params=params,
    )


# --------------------------------------------------------------------------


def simulate(model: HmmInstance, horizon: int, seed: int) -> tuple[Trajectory, ObservationSequence]:
    """Draw ``X_{0:horizon}`` from the chain and ``Y_{0:horizon}`` given the states.

    Draws are interleaved (state, then its observation) from a single stream
    keyed by ``seed``, so equal arguments give bit-identical sequences.
    """
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    rng = make_rng(seed)
    xs, ys = [], []
    x = np.asarray(model.init_sampler(rng), dtype=float)
    for n in range(horizon + 1):
        if n > 0:
            x = np.asarray(model.trans_sampler(rng, x), dtype=float)
        xs.append(x)
        ys.append(np.asarray(model.obs_sampler(rng, x), dtype=float))
    return Trajectory(np.array(xs), seed), ObservationSequence(np.array(ys), seed, 0)
