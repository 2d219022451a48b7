"""Transport-map recursions: lag-1 filtering maps and the fixed-point map pairs.

Fixed-point convention: observations start at time 1 and ``X_0`` is a
parameter.  Level ``p >= 1`` optimizes a triangular map ``T*_p`` in the
variable order ``(x_0, x_{p+1}, x_p)`` so that

* component 0, ``U0_p(z_0)``, updates the law of the reference ``x_0``;
* component 1, ``T1_p(z_0, z_{p+1})``, gives ``X_{p+1}``.

The law of ``X_0 | y_{1:p+1}`` is then the pushforward of ``N(0, 1)`` by
``t_x0_p = t_x0_{p-1} o U0_p``, re-approximated by a single map at each level,
so sampling cost does not grow with ``p``.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import least_squares

from mlsmooth.mlmc import EstimateReport, LevelSchedule, mlmc_estimate
from mlsmooth.models import HmmInstance, ObservationSequence
from mlsmooth.transport.basis import BasisSpec
from mlsmooth.transport.maps import MonotoneTriangularMap, leading
from mlsmooth.transport.optimize import NewtonConfig, optimize_map
from mlsmooth.transport.quadrature import gauss_hermite, gauss_legendre_unit
from mlsmooth.transport.targets import build_fixedpoint_target, build_lag1_target, permuted_target
from mlsmooth.transport.objective import KLObjective

__all__ = [
    "TransportConfig",
    "FixedPointMapPair",
    "ReapproximationWarning",
    "compose_and_reapproximate",
    "fixed_point_maps",
    "lag1_maps",
    "lag1_pushforward",
    "coupled_sample_pair",
    "multilevel_transport_estimate",
]

# optimization order (x_0, x_{p+1}, x_p) as a permutation of the natural order (x_0, x_p, x_{p+1})
FIXED_POINT_PERM = (0, 2, 1)
# lag-1 optimization order (x_{p+1}, x_p)
LAG1_PERM = (1, 0)


class ReapproximationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TransportConfig:
    basis: BasisSpec = BasisSpec(order=3, o_int=12)
    o_exp: int = 5
    tol: float = 1e-4
    max_iter: int = 200
    reapprox_order: int = 20
    residual_warn: float = 1e-2

    def newton(self) -> NewtonConfig:
        return NewtonConfig(tol=self.tol, max_iter=self.max_iter)


@dataclass(frozen=True)
class FixedPointMapPair:
    """Maps of level ``p`` (law of ``(X_0, X_{p+1}) | y_{1:p+1}``)."""

    p: int
    t_x0: MonotoneTriangularMap
    t1: MonotoneTriangularMap
    t_star: MonotoneTriangularMap
    residual: float
    iterations: int
    grad_norm: float
    ops: float
    wall_s: float = 0.0

    def sample_x0(self, z0) -> np.ndarray:
        return self.t_x0.evaluate_component(0, np.asarray(z0, dtype=float))

    def sample_joint(self, z) -> np.ndarray:
        """``(X_0, X_{p+1})`` from reference draws ``z`` of shape ``(n, 2)``."""
        z = np.asarray(z, dtype=float)
        return np.stack([self.sample_x0(z[:, 0]), self.t1.evaluate_component(1, z)], axis=1)


def compose_and_reapproximate(
    t_old: MonotoneTriangularMap,
    t_new: MonotoneTriangularMap,
    order: int = 20,
    initial: MonotoneTriangularMap | None = None,
):
    """Single 1D map ``M`` minimizing ``sum_n w_n (M(z_n) - t_old(t_new(z_n)))^2``.

    The nodes are probabilists' Gauss-Hermite of the given order.  Returns
    ``(M, rms_residual, ops)``.
    """
    if t_old.dim != 1 or t_new.dim != 1:
        raise ValueError("composition is defined for 1D maps")
    quad = gauss_hermite(1, order)
    z = quad.nodes[:, 0]
    target = t_old.evaluate_component(0, t_new.evaluate_component(0, z))
    sw = np.sqrt(quad.weights)
    template = initial or t_old
    tab = template.tables(0, quad.nodes)
    w_int = gauss_legendre_unit(template.basis.o_int)[1]
    na = len(template.coeffs_a[0])

    def forward(theta):
        bq = tab.psi_q @ theta[na:]
        return tab.phi @ theta[:na] + tab.xi * ((bq * bq) @ w_int), bq

    def resid(theta):
        return sw * (forward(theta)[0] - target)

    def jac(theta):
        bq = forward(theta)[1]
        jb = 2 * tab.xi[:, None] * np.einsum("q,nq,nqm->nm", w_int, bq, tab.psi_q)
        return sw[:, None] * np.hstack([tab.phi, jb])

    sol = least_squares(resid, template.params, jac=jac, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    out = template.with_params(sol.x)
    rms = float(np.sqrt(np.sum(sol.fun**2)))
    ops = float(sol.nfev * len(z) * (template.ops_per_eval + t_old.ops_per_eval + t_new.ops_per_eval))
    return out, rms, ops


def _optimize_from(candidates, target, quad, cfg: TransportConfig):
    """Optimize from the candidate start with the lowest objective."""
    best, best_val = None, math.inf
    for cand in candidates:
        try:
            val = KLObjective(cand, target, quad).value(cand.params)
        except FloatingPointError:
            continue
        if val < best_val:
            best, best_val = cand, val
    if best is None:
        best = candidates[-1]
    return optimize_map(best, target, quad, cfg.tol, cfg.newton())


def _with_identity_first(T: MonotoneTriangularMap) -> MonotoneTriangularMap:
    ident = MonotoneTriangularMap.identity(T.dim, T.basis)
    return MonotoneTriangularMap(T.dim, T.basis, ident.coeffs_a[:1] + T.coeffs_a[1:], ident.coeffs_b[:1] + T.coeffs_b[1:])


def fixed_point_maps(
    model: HmmInstance, obs: ObservationSequence, n_levels: int, config: TransportConfig = TransportConfig()
) -> list[FixedPointMapPair]:
    """Map pairs for levels ``p = 1..n_levels``; needs observations at times ``1..n_levels+1``."""
    if n_levels < 1:
        raise ValueError("need at least one level")
    if not (obs.has(1) and obs.has(n_levels + 1)):
        raise ValueError(f"observations at times 1..{n_levels + 1} are required")
    quad = gauss_hermite(3, config.o_exp)
    identity = MonotoneTriangularMap.identity(3, config.basis)
    pairs: list[FixedPointMapPair] = []
    prev = None
    for p in range(1, n_levels + 1):
        start = time.perf_counter()
        if prev is None:
            natural = build_fixedpoint_target(model, None, obs.at(2), y_prev=obs.at(1))
        else:
            natural = build_fixedpoint_target(model, leading(prev.t_star, 2), obs.at(p + 1))
        target = permuted_target(natural, FIXED_POINT_PERM)
        # the x_0 coordinate is already the previous reference, so its component restarts at identity
        starts = [identity] if prev is None else [_with_identity_first(prev.t_star), identity]
        res = _optimize_from(starts, target, quad, config)
        t_star = res.map
        u0 = leading(t_star, 1)
        ops = res.ops
        if prev is None:
            t_x0, resid = u0, 0.0
        else:
            t_x0, resid, rops = compose_and_reapproximate(prev.t_x0, u0, config.reapprox_order)
            ops += rops
            if resid > config.residual_warn:
                warnings.warn(f"level {p}: reapproximation residual {resid:.2e}", ReapproximationWarning)
        prev = FixedPointMapPair(
            p, t_x0, leading(t_star, 2), t_star, resid, res.iterations, res.grad_norm, ops, time.perf_counter() - start
        )
        pairs.append(prev)
    return pairs


def lag1_maps(
    model: HmmInstance, obs: ObservationSequence, n_steps: int, config: TransportConfig = TransportConfig()
) -> list:
    """Lag-1 maps ``T*_p`` for ``p = 0..n_steps-1`` in the order ``(x_{p+1}, x_p)``.

    Returns ``OptimizeResult`` objects; component 0 of each map is the
    filtering map of ``X_{p+1}``.
    """
    quad = gauss_hermite(2, config.o_exp)
    identity = MonotoneTriangularMap.identity(2, config.basis)
    out = []
    for p in range(n_steps):
        if p == 0:
            y0 = obs.at(0) if obs.has(0) else None
            natural = build_lag1_target(model, None, obs.at(1), y_first=y0)
            starts = [identity]
        else:
            natural = build_lag1_target(model, leading(out[-1].map, 1), obs.at(p + 1))
            starts = [out[-1].map, identity]
        res = _optimize_from(starts, permuted_target(natural, LAG1_PERM), quad, config)
        out.append(res)
    return out


def lag1_pushforward(results, p: int, z) -> np.ndarray:
    """Samples of ``(X_p, X_{p+1})`` from reference draws ``z`` of shape ``(n, 2)``."""
    z = np.asarray(z, dtype=float)
    xi = results[p].map.evaluate(z)  # (x_{p+1}, reference or physical x_p)
    xp = xi[:, 1] if p == 0 else leading(results[p - 1].map, 1).evaluate_component(0, xi[:, 1:2])
    return np.stack([xp, xi[:, 0]], axis=1)


def coupled_sample_pair(pair_p: FixedPointMapPair, pair_pm1: FixedPointMapPair, z0) -> tuple[np.ndarray, np.ndarray]:
    """``X_0`` samples of two consecutive levels from the same reference draws."""
    return pair_p.sample_x0(z0), pair_pm1.sample_x0(z0)


def multilevel_transport_estimate(
    pairs: list[FixedPointMapPair], schedule: LevelSchedule, phi: Callable, rng: np.random.Generator
) -> EstimateReport:
    """Multilevel estimate of ``E[phi(X_0) | y_{1:n*+1}]`` over levels ``1..n*``.

    Sampling cost counts basis evaluations of the 1D maps; ``setup_ops`` is the
    map construction cost of the levels used.
    """
    n = schedule.n_star
    if n < 1:
        raise ValueError("the multilevel transport estimator needs n_star >= 1")
    if len(pairs) < n:
        raise ValueError(f"need maps for {n} levels, got {len(pairs)}")
    by_level = {pr.p: pr for pr in pairs}

    def level1(r, k):
        return phi(by_level[1].sample_x0(r.standard_normal(k)))

    def increment(p, r, k):
        a, b = coupled_sample_pair(by_level[p], by_level[p - 1], r.standard_normal(k))
        return phi(a) - phi(b)

    report = mlmc_estimate(level1, increment, schedule, rng, first_level=1)
    ops1d = by_level[1].t_x0.ops_per_eval
    ns = schedule.n_samples
    report.cost_ops = float(n + ops1d * (ns[1] + 2 * sum(ns[2 : n + 1])))
    report.setup_ops = float(sum(by_level[p].ops for p in range(1, n + 1)))
    report.extra["map_wall_s"] = float(sum(by_level[p].wall_s for p in range(1, n + 1)))
    return report
