"""Quadrature approximation of the KL objective and its derivatives.

    J(theta) = -sum_n w_n [ log pi(T(z_n)) + sum_i log b_i(z_n)^2 - log eta(z_n) ]

over Gauss-Hermite nodes ``z_n`` of the standard normal base.  The map is
linear in the ``a`` coefficients and quadratic in the ``b`` coefficients, so
with the basis tables fixed at the nodes the gradient and the exact Hessian
follow from the target's gradient and Hessian by the chain rule.
"""

from __future__ import annotations

import math

import numpy as np

from mlsmooth.transport.maps import MonotoneTriangularMap
from mlsmooth.transport.quadrature import QuadratureRule, gauss_legendre_unit
from mlsmooth.transport.targets import TargetDensity

__all__ = ["KLObjective", "NonFiniteTargetError", "kl_objective"]


class NonFiniteTargetError(FloatingPointError):
    def __init__(self, node_index: int, point):
        self.node_index = int(node_index)
        self.point = np.asarray(point)
        super().__init__(f"target is not finite at quadrature node {self.node_index} (image {self.point.tolist()})")


class KLObjective:
    """Objective as a function of the flat coefficient vector of ``template``."""

    def __init__(self, template: MonotoneTriangularMap, target: TargetDensity, quad: QuadratureRule):
        if template.dim != target.dim or quad.dim != template.dim:
            raise ValueError("map dimension does not match the target or the quadrature")
        self.template = template
        self.target = target
        self.quad = quad
        z = quad.nodes
        self.tables = [template.tables(i, z) for i in range(template.dim)]
        self.slices = template.param_slices()
        self.log_eta = -0.5 * template.dim * math.log(2 * math.pi) - 0.5 * np.sum(z * z, axis=1)
        self.w_int = gauss_legendre_unit(template.basis.o_int)[1]
        self.n_evals = 0
        self.n_derivs = 0

    @property
    def n_params(self) -> int:
        return self.template.n_params

    @property
    def ops(self) -> float:
        """Work done so far, in basis and density evaluations."""
        per_point = self.template.ops_per_eval + self.target.ops_per_point
        return float(len(self.quad) * (self.n_evals * per_point + self.n_derivs * (per_point + self.n_params**2)))

    def _forward(self, theta):
        """Map images and diagonal values ``b_i`` at the nodes."""
        y = np.empty(self.quad.nodes.shape)
        bd = np.empty_like(y)
        for i, (tab, (sa, sb)) in enumerate(zip(self.tables, self.slices)):
            bq = tab.psi_q @ theta[sb]
            y[:, i] = tab.phi @ theta[sa] + tab.xi * ((bq * bq) @ self.w_int)
            bd[:, i] = tab.psi_diag @ theta[sb]
        return y, bd

    def _target(self, y):
        v, g, h = self.target.derivs(y)
        bad = ~np.isfinite(v)
        if np.any(bad):
            k = int(np.flatnonzero(bad)[0])
            raise NonFiniteTargetError(k, y[k])
        return v, g, h

    def value(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        self.n_evals += 1
        y, bd = self._forward(theta)
        if np.any(bd == 0) or not np.all(np.isfinite(y)):
            return math.inf
        v = self._target(y)[0]
        logdet = np.sum(np.log(bd * bd), axis=1)
        return float(-self.quad.weights @ (v + logdet - self.log_eta))

    def value_grad_hess(self, theta):
        theta = np.asarray(theta, dtype=float)
        self.n_derivs += 1
        y, bd = self._forward(theta)
        if np.any(bd == 0) or not np.all(np.isfinite(y)):
            raise FloatingPointError("map degenerate at a quadrature node")
        v, g, h = self._target(y)
        w = self.quad.weights
        n, k = y.shape
        P = self.n_params
        jac = np.zeros((n, k, P))  # d y_i / d theta
        grad = np.zeros(P)
        hess = np.zeros((P, P))
        for i, (tab, (sa, sb)) in enumerate(zip(self.tables, self.slices)):
            bq = tab.psi_q @ theta[sb]  # (n, q)
            jac[:, i, sa] = tab.phi
            jac[:, i, sb] = 2 * tab.xi[:, None] * np.einsum("q,nq,nqm->nm", self.w_int, bq, tab.psi_q)
            # second derivative of y_i in b, weighted by dL/dy_i
            wy = w * g[:, i] * tab.xi
            hess[sb, sb] -= 2 * np.einsum("n,q,nqm,nql->ml", wy, self.w_int, tab.psi_q, tab.psi_q)
            # log-determinant terms
            r = tab.psi_diag / bd[:, i, None]
            grad[sb] -= 2 * (w @ r)
            hess[sb, sb] += 2 * np.einsum("n,nm,nl->ml", w, r, r)
        grad -= np.einsum("n,ni,nip->p", w, g, jac)
        hess -= np.einsum("n,nip,nij,njq->pq", w, jac, h, jac)
        logdet = np.sum(np.log(bd * bd), axis=1)
        val = float(-w @ (v + logdet - self.log_eta))
        return val, grad, 0.5 * (hess + hess.T)


def kl_objective(T: MonotoneTriangularMap, target: TargetDensity, quad: QuadratureRule, derivatives: bool = False):
    """Objective at ``T``; with ``derivatives=True`` also its gradient and Hessian in the coefficients."""
    obj = KLObjective(T, target, quad)
    if derivatives:
        return obj.value_grad_hess(T.params)
    return obj.value(T.params)
