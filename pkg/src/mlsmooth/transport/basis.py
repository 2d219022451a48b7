"""Univariate Hermite-function families and their tensor products.

Off-diagonal arguments use ``1, x, psi_2, psi_3, ...`` and the diagonal
(integrated) argument uses ``1, psi_1, psi_2, ...`` where
``psi_j(x) = He_j(x) exp(-c x^2)`` and ``He_j`` are the probabilists'
Hermite polynomials.  ``c = 1/4`` gives Hermite functions with linear tails;
``c = 0`` gives plain polynomials.  Multi-indices are truncated at total degree ``order``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import product

import numpy as np

OFF = "off"
DIAG = "diag"


@dataclass(frozen=True)
class BasisSpec:
    """Map order ``order`` (o_map), Gauss-Legendre order ``o_int`` of the monotone
    integral and the damping exponent ``c`` of ``psi_j = He_j exp(-c x^2)``."""

    order: int = 3
    o_int: int = 12
    damping: float = 0.0

    def __post_init__(self):
        if self.order < 0:
            raise ValueError("order must be non-negative")
        if self.o_int < 1:
            raise ValueError("o_int must be positive")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")


def hermite_functions(x, degree: int, damping: float = 0.0):
    """``psi_j`` for ``j <= degree`` with first and second derivatives, each ``(degree+1, *x.shape)``."""
    x = np.asarray(x, dtype=float)
    he = np.empty((degree + 1,) + x.shape)
    he[0] = 1.0
    if degree >= 1:
        he[1] = x
    for n in range(1, degree):
        he[n + 1] = x * he[n] - n * he[n - 1]
    dhe = np.zeros_like(he)
    d2he = np.zeros_like(he)
    for n in range(1, degree + 1):
        dhe[n] = n * he[n - 1]
    for n in range(2, degree + 1):
        d2he[n] = n * (n - 1) * he[n - 2]
    c = damping
    e = np.exp(-c * x * x)
    val = he * e
    d1 = (dhe - 2 * c * x * he) * e
    d2 = (d2he - 4 * c * x * dhe + (4 * c * c * x * x - 2 * c) * he) * e
    return val, d1, d2


def univariate(kind: str, x, degree: int, damping: float = 0.0):
    """Values and the first two derivatives of one family up to ``degree``."""
    x = np.asarray(x, dtype=float)
    val, d1, d2 = hermite_functions(x, degree, damping)
    val[0], d1[0], d2[0] = 1.0, 0.0, 0.0
    if kind == OFF and degree >= 1:
        val[1], d1[1], d2[1] = x, 1.0, 0.0
    elif kind != DIAG and kind != OFF:
        raise ValueError(f"unknown basis kind {kind!r}")
    return val, d1, d2


@lru_cache(maxsize=None)
def multi_indices(n_vars: int, order: int) -> np.ndarray:
    """All multi-indices in ``n_vars`` variables with total degree ``<= order``, graded order."""
    if n_vars == 0:
        return np.zeros((1, 0), dtype=int)
    idx = [m for m in product(range(order + 1), repeat=n_vars) if sum(m) <= order]
    idx.sort(key=lambda m: (sum(m), tuple(-v for v in m)))
    out = np.array(idx, dtype=int)
    out.flags.writeable = False
    return out


def tensor_terms(factors, idx: np.ndarray, derivs: int = 0):
    """Products ``prod_j factors[j][idx[:, j]]`` and optionally their input derivatives.

    ``factors[j]`` is a ``(val, d1, d2)`` triple for variable ``j``, each of
    shape ``(deg+1, *pts)``.  Returns ``val`` of shape ``(n_terms, *pts)``;
    with ``derivs >= 1`` also ``grad`` of shape ``(n_vars, n_terms, *pts)``;
    with ``derivs >= 2`` also ``hess`` of shape ``(n_vars, n_vars, n_terms, *pts)``.
    """
    n_vars = idx.shape[1]
    if n_vars == 0:
        raise ValueError("tensor_terms needs at least one variable")
    picked = [tuple(f[k][idx[:, j]] for k in range(3)) for j, f in enumerate(factors)]

    def prod(orders):
        out = picked[0][orders[0]]
        for j in range(1, n_vars):
            out = out * picked[j][orders[j]]
        return out

    val = prod([0] * n_vars)
    if derivs == 0:
        return val
    grad = np.stack([prod([1 if k == j else 0 for k in range(n_vars)]) for j in range(n_vars)])
    if derivs == 1:
        return val, grad
    hess = np.empty((n_vars, n_vars) + val.shape)
    for j in range(n_vars):
        for l in range(j, n_vars):
            orders = [0] * n_vars
            orders[j] += 1
            orders[l] += 1
            hess[j, l] = hess[l, j] = prod(orders)
    return val, grad, hess
