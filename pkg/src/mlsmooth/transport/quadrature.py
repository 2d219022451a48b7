"""Quadrature rules: tensor Gauss-Hermite for the base measure, Gauss-Legendre for the monotone integral."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes ``(n, dim)`` and positive weights summing to one for the standard normal."""

    nodes: np.ndarray
    weights: np.ndarray
    order: int

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    def __len__(self) -> int:
        return len(self.weights)


@lru_cache(maxsize=None)
def _gh_1d(order: int):
    x, w = hermegauss(order)
    return x, w / math.sqrt(2 * math.pi)


def gauss_hermite(dim: int, order: int) -> QuadratureRule:
    """Tensor probabilists' Gauss-Hermite rule; exact for degree ``<= 2 order - 1`` in each coordinate."""
    if dim < 1 or order < 1:
        raise ValueError("dim and order must be positive")
    x, w = _gh_1d(order)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    wgrids = np.meshgrid(*([w] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.prod(np.stack([g.ravel() for g in wgrids]), axis=0)
    return QuadratureRule(nodes, weights, order)


@lru_cache(maxsize=None)
def gauss_legendre_unit(order: int):
    """Nodes ``c_q`` in (0, 1) and weights ``omega_q`` summing to one, so ``int_0^x h = x sum omega_q h(c_q x)``."""
    s, w = leggauss(order)
    return 0.5 * (1.0 + s), 0.5 * w
