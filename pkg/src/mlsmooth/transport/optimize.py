"""Newton optimization of map coefficients with truncated conjugate-gradient steps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from mlsmooth.transport.maps import MonotoneTriangularMap
from mlsmooth.transport.objective import KLObjective, NonFiniteTargetError
from mlsmooth.transport.quadrature import QuadratureRule, gauss_hermite
from mlsmooth.transport.targets import TargetDensity

__all__ = ["NewtonConfig", "OptimizeResult", "NonConvergenceError", "optimize_map", "truncated_cg"]


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-4
    max_iter: int = 200
    cg_max_iter: int = 50
    cg_rtol: float = 1e-6
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_halvings: int = 30

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class OptimizeResult:
    map: MonotoneTriangularMap
    value: float
    grad_norm: float
    iterations: int
    converged: bool
    ops: float


class NonConvergenceError(RuntimeError):
    def __init__(self, result: OptimizeResult, reason: str):
        self.result = result
        super().__init__(f"map optimization did not converge ({reason}); sup|grad| = {result.grad_norm:.3e}")


def truncated_cg(H: np.ndarray, g: np.ndarray, max_iter: int = 50, rtol: float = 1e-6) -> np.ndarray:
    """Approximate solution of ``H d = -g``, stopping at negative curvature.

    Returns the steepest-descent direction if curvature is non-positive on the
    very first search direction.
    """
    d = np.zeros_like(g)
    r = -g.copy()
    p = r.copy()
    rr = float(r @ r)
    stop = rtol * math.sqrt(rr)
    for _ in range(max_iter):
        Hp = H @ p
        curv = float(p @ Hp)
        if curv <= 1e-14 * float(p @ p):
            return d if np.any(d) else -g
        alpha = rr / curv
        d = d + alpha * p
        r = r - alpha * Hp
        rr_new = float(r @ r)
        if math.sqrt(rr_new) <= stop:
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return d


def _safe_value(obj: KLObjective, theta) -> float:
    try:
        v = obj.value(theta)
    except (NonFiniteTargetError, FloatingPointError):
        return math.inf
    return v if math.isfinite(v) else math.inf


def optimize_map(
    initial: MonotoneTriangularMap,
    target: TargetDensity,
    quad: QuadratureRule | None = None,
    tol: float = 1e-4,
    config: NewtonConfig | None = None,
    raise_on_failure: bool = True,
) -> OptimizeResult:
    """Minimize the KL objective from ``initial`` until ``sup|grad| < tol``.

    Each step solves the Newton system by truncated CG and is globalized by
    Armijo backtracking; if the Newton direction cannot be made to decrease
    the objective the step falls back to steepest descent.  Trial points where
    the map degenerates or the target is not finite are rejected.
    """
    cfg = config or NewtonConfig(tol=tol)
    if config is not None and tol != cfg.tol:
        cfg = NewtonConfig(**{**cfg.__dict__, "tol": tol})
    quad = quad or gauss_hermite(initial.dim, 5)
    obj = KLObjective(initial, target, quad)
    theta = initial.params.copy()
    f, g, H = obj.value_grad_hess(theta)
    it = 0
    reason = "iteration cap reached"
    while True:
        gnorm = float(np.max(np.abs(g)))
        if gnorm < cfg.tol:
            return OptimizeResult(initial.with_params(theta), f, gnorm, it, True, obj.ops)
        if it >= cfg.max_iter:
            break
        it += 1
        accepted = False
        for direction in ("newton", "gradient"):
            d = truncated_cg(H, g, cfg.cg_max_iter, cfg.cg_rtol) if direction == "newton" else -g
            slope = float(g @ d)
            if slope >= 0:
                continue
            t = 1.0
            for _ in range(cfg.max_halvings + 1):
                f_new = _safe_value(obj, theta + t * d)
                if f_new <= f + cfg.armijo * t * slope:
                    accepted = True
                    break
                t *= cfg.backtrack
            if accepted:
                break
        if not accepted:
            reason = "line search failed"
            break
        theta = theta + t * d
        f, g, H = obj.value_grad_hess(theta)
    result = OptimizeResult(initial.with_params(theta), f, float(np.max(np.abs(g))), it, False, obj.ops)
    if raise_on_failure:
        raise NonConvergenceError(result, reason)
    return result
