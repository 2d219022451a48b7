"""Deterministic grid oracle for the time-0 smoother marginals.

Densities are tabulated on uniform grids and integrated by the trapezoidal
rule.  In one dimension the marginals ``pi_{p,0}`` come from a joint carrier
``gamma_p(x_0, x_p)`` propagated forward one observation at a time.  In two
dimensions a joint carrier over four coordinates is out of reach, so each
``pi_{p,0}`` is computed with a backward message over a tensor grid, which is
cheap when the transition factorizes over the coordinates.

Couplings: inverse-CDF coupling of two 1D marginals on a shared uniform, and
the Knothe-Rosenblatt coupling of two 2D densities (marginal of the first
coordinate, then the conditional of the second).
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from mlsmooth.mlmc import EstimateReport, LevelSchedule, mlmc_estimate
from mlsmooth.models import HmmInstance, ObservationSequence

__all__ = [
    "Grid1D",
    "GridDensity",
    "GridCdf",
    "GridUnderflowError",
    "DegenerateSliceError",
    "smoother_marginal_sequence",
    "smoother_marginal_sequence_2d",
    "cdf_and_inverse",
    "coupled_differences_1d",
    "coupled_increment_1d",
    "kr_sample",
    "kr_coupled_differences_2d",
    "kr_coupled_increment_2d",
    "mlmc_estimate_grid",
    "tv_distance",
    "dump_densities_csv",
]


# joint-carrier entries below this fraction of the peak are treated as zero
TRIM = 1e-30


class GridUnderflowError(RuntimeError):
    """The normalizing constant of a grid recursion underflowed or is not finite."""


class DegenerateSliceError(RuntimeError):
    """A conditional slice of a 2D density carries no mass."""


@dataclass(frozen=True)
class Grid1D:
    lo: float
    hi: float
    m: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"grid needs lo < hi, got [{self.lo}, {self.hi}]")
        if self.m < 16:
            raise ValueError(f"grid needs at least 16 nodes, got {self.m}")

    @property
    def h(self) -> float:
        return (self.hi - self.lo) / (self.m - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.m)

    @property
    def trap_weights(self) -> np.ndarray:
        w = np.full(self.m, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w

    @classmethod
    def for_model(cls, model: HmmInstance, horizon: int, m: int = 2001) -> "Grid1D":
        lo, hi = model.domain(horizon)
        return cls(float(lo), float(hi), m)


@dataclass(frozen=True)
class GridDensity:
    """Density values on a 1D grid or on the tensor product of two grids."""

    grids: tuple
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != tuple(g.m for g in self.grids):
            raise ValueError("weights shape does not match the grid")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("density weights must be finite and non-negative")
        object.__setattr__(self, "weights", w)

    @property
    def grid(self) -> Grid1D:
        return self.grids[0]

    @property
    def ndim(self) -> int:
        return len(self.grids)

    def integral(self) -> float:
        w = self.weights
        for axis, g in reversed(list(enumerate(self.grids))):
            w = np.tensordot(w, g.trap_weights, axes=([axis], [0]))
        return float(w)

    def normalized(self) -> "GridDensity":
        z = self.integral()
        if not (z > 0 and math.isfinite(z)):
            raise GridUnderflowError(f"normalizing constant is {z}")
        return GridDensity(self.grids, self.weights / z)

    def marginal(self, axis: int = 0) -> "GridDensity":
        """Integrate out every coordinate except ``axis``."""
        w = self.weights
        for k in reversed(range(self.ndim)):
            if k != axis:
                w = np.tensordot(w, self.grids[k].trap_weights, axes=([k], [0]))
        return GridDensity((self.grids[axis],), w)

    def moment(self, fn: Callable) -> float:
        """Trapezoidal integral of ``fn(x) * density`` (1D only)."""
        if self.ndim != 1:
            raise ValueError("moment is defined for 1D densities")
        return float(np.sum(self.grid.trap_weights * fn(self.grid.nodes) * self.weights))

    def mean(self) -> float:
        return self.moment(lambda x: x)

    def var(self) -> float:
        mu = self.mean()
        return self.moment(lambda x: (x - mu) ** 2)


@dataclass(frozen=True)
class GridCdf:
    grid: Grid1D
    cdf_values: np.ndarray

    def __call__(self, x):
        return np.interp(x, self.grid.nodes, self.cdf_values)

    def inverse(self, u):
        """Generalized inverse ``inf{x : F(x) >= u}`` of the piecewise-linear CDF."""
        u = np.asarray(u, dtype=float)
        if np.any((u < 0) | (u > 1)) or np.any(np.isnan(u)):
            raise ValueError("u must lie in [0, 1]")
        return _invert_rows(self.cdf_values[None, :], np.atleast_1d(u)[None, :], self.grid).reshape(u.shape)


def _invert_rows(cdf: np.ndarray, u: np.ndarray, grid: Grid1D) -> np.ndarray:
    """Invert each row of ``cdf`` at the matching row of ``u`` by linear interpolation.

    Rows of ``cdf`` are nondecreasing from 0 to 1.  The bracketing index is the
    first node with ``cdf >= u``, which picks the leftmost point on flat parts.
    """
    if cdf.shape[0] == 1:
        idx = np.searchsorted(cdf[0], u[0], side="left")[None, :]
    else:
        idx = np.sum(cdf[:, None, :] < u[:, :, None], axis=2)
    idx = np.clip(idx, 1, grid.m - 1)
    rows = np.arange(cdf.shape[0])[:, None]
    c_lo, c_hi = cdf[rows, idx - 1], cdf[rows, idx]
    span = c_hi - c_lo
    frac = np.where(span > 0, (u - c_lo) / np.where(span > 0, span, 1.0), 0.0)
    return grid.lo + (idx - 1 + np.clip(frac, 0.0, 1.0)) * grid.h


def _cumulative_trapezoid(w: np.ndarray, h: float) -> np.ndarray:
    c = np.zeros(w.shape)
    c[..., 1:] = np.cumsum(0.5 * h * (w[..., 1:] + w[..., :-1]), axis=-1)
    return c


def cdf_and_inverse(d: GridDensity) -> GridCdf:
    if d.ndim != 1:
        raise ValueError("cdf_and_inverse needs a 1D density")
    c = _cumulative_trapezoid(d.weights, d.grid.h)
    total = c[-1]
    if not total > 0:
        raise GridUnderflowError("density has zero mass")
    c = c / total
    c[-1] = 1.0
    return GridCdf(d.grid, c)


def _exp_normalized(logw: np.ndarray) -> np.ndarray:
    top = np.max(logw)
    if not np.isfinite(top):
        raise GridUnderflowError("log-weights are all -inf or not finite")
    return np.exp(logw - top)


def _renormalize(w: np.ndarray, z: float, step: int) -> np.ndarray:
    if not (z > 0 and math.isfinite(z)):
        raise GridUnderflowError(f"normalizing constant {z} at step {step}; grid too coarse or too narrow")
    return w / z


def smoother_marginal_sequence(
    model: HmmInstance, obs: ObservationSequence, n_star: int, grid: Grid1D
) -> list[GridDensity]:
    """``pi_{p,0}`` for ``p = 0..n_star`` from the joint carrier ``gamma_p(x_0, x_p)``.

    ``gamma_{p+1}(x_0, x') = int gamma_p(x_0, x) f(x, x') dx * g(x', y_{p+1})``
    with trapezoidal quadrature in ``x``, renormalized after every step.
    Times without an observation contribute no likelihood factor.
    """
    if model.dim != 1:
        raise ValueError("smoother_marginal_sequence needs a scalar model")
    if n_star < 0 or n_star > obs.last_time:
        raise ValueError(f"n_star must lie in [0, {obs.last_time}]")
    x = grid.nodes
    w = grid.trap_weights

    def loglik(t):
        return model.obs_logpdf(x, obs.at(t)) if obs.has(t) else np.zeros_like(x)

    pi0 = _exp_normalized(model.init_logpdf(x) + loglik(0))
    pi0 = _renormalize(pi0, float(w @ pi0), 0)
    out = [GridDensity((grid,), pi0)]
    if n_star == 0:
        return out

    kernel = np.exp(model.trans_logpdf(x[:, None], x[None, :]))
    gamma = pi0[:, None] * kernel * _exp_normalized(loglik(1))[None, :]
    for p in range(1, n_star + 1):
        if p > 1:
            # restrict the product to the block holding non-negligible mass
            r0, r1 = _support(gamma.max(axis=1))
            c0, c1 = _support(gamma.max(axis=0))
            block = (gamma[r0:r1, c0:c1] * w[c0:c1]) @ kernel[c0:c1, :]
            gamma = np.zeros_like(gamma)
            gamma[r0:r1] = block * _exp_normalized(loglik(p))[None, :]
        marg = gamma @ w
        gamma = _renormalize(gamma, float(w @ marg), p)
        out.append(GridDensity((grid,), marg / float(w @ marg)))
    return out


def _support(v: np.ndarray) -> tuple[int, int]:
    """Smallest index range outside which ``v`` is below ``TRIM`` times its peak."""
    idx = np.flatnonzero(v > TRIM * v.max())
    return int(idx[0]), int(idx[-1]) + 1


def smoother_marginal_sequence_2d(
    model: HmmInstance, obs: ObservationSequence, n_star: int, grids: Sequence[Grid1D]
) -> list[GridDensity]:
    """``pi_{p,0}`` for a 2D model with a coordinate-wise factorized transition.

    ``pi_{p,0}(x_0) ∝ p_0(x_0) g(x_0, y_0) beta_0(x_0)`` where the backward
    message obeys ``beta_k(x) = int f(x, x') g(x', y_{k+1}) beta_{k+1}(x') dx'``
    and ``beta_p = 1``.  Each step is ``K_1 B K_2^T`` with per-axis kernels.
    """
    if model.dim != 2 or model.axis_trans_logpdfs is None:
        raise ValueError("smoother_marginal_sequence_2d needs a 2D model with a factorized transition")
    if n_star < 0 or n_star > obs.last_time:
        raise ValueError(f"n_star must lie in [0, {obs.last_time}]")
    g1, g2 = grids
    x1, x2 = g1.nodes, g2.nodes
    pts = np.stack(np.meshgrid(x1, x2, indexing="ij"), axis=-1)
    wt = np.outer(g1.trap_weights, g2.trap_weights)
    k1 = np.exp(model.axis_trans_logpdfs[0](x1[:, None], x1[None, :]))
    k2 = np.exp(model.axis_trans_logpdfs[1](x2[:, None], x2[None, :]))

    lik = [
        _exp_normalized(model.obs_logpdf(pts, obs.at(t))) if obs.has(t) else np.ones(pts.shape[:2])
        for t in range(n_star + 1)
    ]
    prior = _exp_normalized(model.init_logpdf(pts)) * lik[0]

    out = []
    for p in range(n_star + 1):
        beta = np.ones(pts.shape[:2])
        for k in range(p - 1, -1, -1):
            beta = k1 @ (wt * lik[k + 1] * beta) @ k2.T
            top = beta.max()
            beta = _renormalize(beta, float(top), k)
        out.append(GridDensity((g1, g2), prior * beta).normalized())
    return out


def coupled_differences_1d(cdf_p: GridCdf, cdf_pm1: GridCdf, phi: Callable, u: np.ndarray) -> np.ndarray:
    return phi(cdf_p.inverse(u)) - phi(cdf_pm1.inverse(u))


def coupled_increment_1d(cdf_p: GridCdf, cdf_pm1: GridCdf, phi: Callable, N: int, rng):
    """Mean and unbiased sample variance of ``N`` common-uniform coupled differences."""
    if N < 2:
        raise ValueError("N must be at least 2")
    diff = coupled_differences_1d(cdf_p, cdf_pm1, phi, rng.random(N))
    return float(diff.mean()), float(diff.var(ddof=1))


@dataclass(frozen=True)
class _KrTables:
    grid1: Grid1D
    grid2: Grid1D
    marginal: GridCdf
    row_cum: np.ndarray  # unnormalized cumulative trapezoid of each x1 row along x2


def _kr_tables(d: GridDensity) -> _KrTables:
    if d.ndim != 2:
        raise ValueError("Knothe-Rosenblatt coupling needs a 2D density")
    g1, g2 = d.grids
    return _KrTables(g1, g2, cdf_and_inverse(d.marginal(0)), _cumulative_trapezoid(d.weights, g2.h))


def _kr_apply(t: _KrTables, u1: np.ndarray, u2: np.ndarray, chunk: int = 4096) -> np.ndarray:
    x1 = t.marginal.inverse(u1)
    pos = (x1 - t.grid1.lo) / t.grid1.h
    i = np.clip(np.floor(pos).astype(int), 0, t.grid1.m - 2)
    lam = np.clip(pos - i, 0.0, 1.0)
    x2 = np.empty_like(x1)
    for s in range(0, len(x1), chunk):
        sl = slice(s, s + chunk)
        # the density is linear in x1 between rows, so its cumulative sums are too
        cum = (1 - lam[sl, None]) * t.row_cum[i[sl]] + lam[sl, None] * t.row_cum[i[sl] + 1]
        total = cum[:, -1]
        if np.any(total <= 0):
            raise DegenerateSliceError("conditional slice with zero mass")
        cdf = cum / total[:, None]
        cdf[:, -1] = 1.0
        x2[sl] = _invert_rows(cdf, u2[sl, None], t.grid2)[:, 0]
    return np.stack([x1, x2], axis=-1)


def kr_sample(d: GridDensity, u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    """Knothe-Rosenblatt image of uniforms ``(u1, u2)`` under the 2D density ``d``."""
    return _kr_apply(_kr_tables(d), np.asarray(u1, float), np.asarray(u2, float))


def kr_coupled_differences_2d(d_p: GridDensity, d_pm1: GridDensity, phi: Callable, u1, u2) -> np.ndarray:
    if d_p.grids != d_pm1.grids:
        raise ValueError("densities live on different grids")
    return phi(kr_sample(d_p, u1, u2)) - phi(kr_sample(d_pm1, u1, u2))


def kr_coupled_increment_2d(d_p: GridDensity, d_pm1: GridDensity, phi: Callable, N: int, rng):
    """Mean and unbiased sample variance of ``N`` Knothe-Rosenblatt coupled differences.

    ``phi`` maps an ``(n, 2)`` array of states to ``n`` reals.
    """
    if N < 2:
        raise ValueError("N must be at least 2")
    u = rng.random((2, N))
    diff = kr_coupled_differences_2d(d_p, d_pm1, phi, u[0], u[1])
    return float(diff.mean()), float(diff.var(ddof=1))


def mlmc_estimate_grid(
    model: HmmInstance,
    obs: ObservationSequence,
    schedule: LevelSchedule,
    phi: Callable,
    rng: np.random.Generator,
    grid: Grid1D | Sequence[Grid1D] | None = None,
    densities: list[GridDensity] | None = None,
) -> EstimateReport:
    """Multilevel estimate using exact grid marginals and inverse-CDF (or KR) coupling.

    ``setup_ops`` counts kernel-density products in the grid recursion.
    Precomputed ``densities`` may be passed to reuse one recursion across replicates.
    """
    n = schedule.n_star
    if densities is None:
        if model.dim == 1:
            grid = grid or Grid1D.for_model(model, n)
            densities = smoother_marginal_sequence(model, obs, n, grid)
        else:
            if grid is None:
                lo, hi = model.domain(n)
                grid = tuple(Grid1D(lo[k], hi[k], 201) for k in range(2))
            densities = smoother_marginal_sequence_2d(model, obs, n, grid)
    if len(densities) < n + 1:
        raise ValueError("not enough precomputed densities for the schedule")
    g = densities[0].grids
    if densities[0].ndim == 1:
        setup = float(n * g[0].m**3)
        cdfs = [cdf_and_inverse(d) for d in densities[: n + 1]]

        def level0(r, k):
            return phi(cdfs[0].inverse(r.random(k)))

        def increment(p, r, k):
            return coupled_differences_1d(cdfs[p], cdfs[p - 1], phi, r.random(k))
    else:
        m1, m2 = g[0].m, g[1].m
        setup = float(n * (n + 1) / 2 * m1 * m2 * (m1 + m2))
        tables = [_kr_tables(d) for d in densities[: n + 1]]

        def level0(r, k):
            u = r.random((2, k))
            return phi(_kr_apply(tables[0], u[0], u[1]))

        def increment(p, r, k):
            u = r.random((2, k))
            return phi(_kr_apply(tables[p], u[0], u[1])) - phi(_kr_apply(tables[p - 1], u[0], u[1]))

    report = mlmc_estimate(level0, increment, schedule, rng)
    report.setup_ops = setup
    return report


def tv_distance(d1: GridDensity, d2: GridDensity) -> float:
    """Half the trapezoidal integral of ``|d1 - d2|``."""
    if d1.grids != d2.grids:
        raise ValueError("densities live on different grids")
    return 0.5 * GridDensity(d1.grids, np.abs(d1.weights - d2.weights)).integral()


def dump_densities_csv(densities: Sequence[GridDensity], directory: str, prefix: str = "pi") -> list[str]:
    """Write one ``node,weight`` CSV per level; returns the paths written."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for p, d in enumerate(densities):
        if d.ndim != 1:
            raise ValueError("CSV dump supports 1D densities")
        path = os.path.join(directory, f"{prefix}_{p:03d}.csv")
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["node", "weight"])
            for x, v in zip(d.grid.nodes, d.weights):
                wr.writerow([repr(float(x)), repr(float(v))])
        paths.append(path)
    return paths
