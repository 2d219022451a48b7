"""Monotone lower-triangular maps.

Component ``i`` of a map on R^k is

    T_i(x_1..x_i) = a_i(x_<i) + int_0^{x_i} b_i(x_<i, t)^2 dt

with ``a_i`` and ``b_i`` linear in their coefficients over tensor Hermite
bases truncated at total degree ``order``.  The integral uses a fixed
Gauss-Legendre rule on ``[0, x_i]``, so the map evaluated here is exactly the
map the optimizer saw.  ``dT_i/dx_i`` is reported as ``b_i(x)^2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mlsmooth.transport.basis import DIAG, OFF, BasisSpec, multi_indices, tensor_terms, univariate
from mlsmooth.transport.quadrature import gauss_legendre_unit

__all__ = [
    "MonotoneTriangularMap",
    "PermutedMap",
    "ComponentTables",
    "permute_conjugate",
    "leading",
    "monotone_integral",
    "map_to_text",
    "map_from_text",
]

FORMAT_HEADER = "mlsmooth-map v1"


@dataclass(frozen=True)
class ComponentTables:
    """Coefficient-independent basis values of one component at fixed points.

    ``phi``: ``(n, n_a)`` values of the ``a`` basis;
    ``psi_q``: ``(n, q, n_b)`` values of the ``b`` basis at the Legendre nodes;
    ``psi_diag``: ``(n, n_b)`` values of the ``b`` basis at ``t = x_i``;
    ``xi``: ``(n,)`` the diagonal input.
    """

    phi: np.ndarray
    psi_q: np.ndarray
    psi_diag: np.ndarray
    xi: np.ndarray


def _readonly(v) -> np.ndarray:
    a = np.array(v, dtype=float)
    a.flags.writeable = False
    return a


class MonotoneTriangularMap:
    """Immutable coefficient-parametrized triangular map on R^dim."""

    def __init__(self, dim: int, basis: BasisSpec, coeffs_a, coeffs_b):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = int(dim)
        self.basis = basis
        self.a_idx = tuple(multi_indices(i, basis.order) for i in range(dim))
        self.b_idx = tuple(multi_indices(i + 1, basis.order) for i in range(dim))
        if len(coeffs_a) != dim or len(coeffs_b) != dim:
            raise ValueError("need one coefficient vector per component")
        self.coeffs_a = tuple(_readonly(c) for c in coeffs_a)
        self.coeffs_b = tuple(_readonly(c) for c in coeffs_b)
        for i in range(dim):
            if self.coeffs_a[i].shape != (len(self.a_idx[i]),) or self.coeffs_b[i].shape != (len(self.b_idx[i]),):
                raise ValueError(f"coefficient sizes for component {i} do not match the basis")

    # -- construction ---------------------------------------------------

    @classmethod
    def identity(cls, dim: int, basis: BasisSpec = BasisSpec()) -> "MonotoneTriangularMap":
        a = [np.zeros(len(multi_indices(i, basis.order))) for i in range(dim)]
        b = [np.zeros(len(multi_indices(i + 1, basis.order))) for i in range(dim)]
        for c in b:
            c[0] = 1.0  # the constant term comes first in graded order
        return cls(dim, basis, a, b)

    @classmethod
    def affine_1d(cls, shift: float, scale: float, basis: BasisSpec = BasisSpec()) -> "MonotoneTriangularMap":
        """``x -> shift + scale x`` with ``scale > 0``."""
        if not scale > 0:
            raise ValueError("scale must be positive")
        t = cls.identity(1, basis)
        b = np.zeros(len(t.coeffs_b[0]))
        b[0] = np.sqrt(scale)
        return cls(1, basis, [np.array([shift])], [b])

    @property
    def n_params(self) -> int:
        return sum(len(a) + len(b) for a, b in zip(self.coeffs_a, self.coeffs_b))

    def basis_counts(self) -> list[tuple[int, int]]:
        """``(n_a, n_b)`` per component."""
        return [(len(a), len(b)) for a, b in zip(self.a_idx, self.b_idx)]

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([a, b]) for a, b in zip(self.coeffs_a, self.coeffs_b)])

    def param_slices(self) -> list[tuple[slice, slice]]:
        out, pos = [], 0
        for na, nb in self.basis_counts():
            out.append((slice(pos, pos + na), slice(pos + na, pos + na + nb)))
            pos += na + nb
        return out

    def with_params(self, theta) -> "MonotoneTriangularMap":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        sl = self.param_slices()
        return MonotoneTriangularMap(self.dim, self.basis, [theta[s] for s, _ in sl], [theta[s] for _, s in sl])

    @property
    def ops_per_eval(self) -> int:
        """Basis-function evaluations needed to evaluate the map at one point."""
        return sum(na + self.basis.o_int * nb for na, nb in self.basis_counts())

    def component_ops(self, i: int) -> int:
        na, nb = self.basis_counts()[i]
        return na + self.basis.o_int * nb

    # -- evaluation -----------------------------------------------------

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1 and self.dim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"expected points of shape (n, {self.dim}), got {x.shape}")
        return x

    def tables(self, i: int, x) -> ComponentTables:
        x = self._check(x)
        order = self.basis.order
        c, _ = gauss_legendre_unit(self.basis.o_int)
        off = [univariate(OFF, x[:, j], order, self.basis.damping) for j in range(i)]
        xi = x[:, i]
        phi = tensor_terms(off, self.a_idx[i]).T if i > 0 else np.ones((len(xi), 1))
        b_off = tensor_terms(off, self.b_idx[i][:, :i]) if i > 0 else None  # (n_b, n)
        dq = univariate(DIAG, xi[:, None] * c[None, :], order, self.basis.damping)[0][self.b_idx[i][:, i]]  # (n_b, n, q)
        dd = univariate(DIAG, xi, order, self.basis.damping)[0][self.b_idx[i][:, i]]  # (n_b, n)
        if b_off is not None:
            dq = dq * b_off[:, :, None]
            dd = dd * b_off
        return ComponentTables(phi, np.moveaxis(dq, 0, -1), dd.T, xi)

    def component_from_tables(self, i: int, tab: ComponentTables):
        """``(T_i, b_i(x))`` from precomputed tables."""
        _, w = gauss_legendre_unit(self.basis.o_int)
        bq = tab.psi_q @ self.coeffs_b[i]
        val = tab.phi @ self.coeffs_a[i] + tab.xi * (bq * bq @ w)
        return val, tab.psi_diag @ self.coeffs_b[i]

    def evaluate_component(self, i: int, x) -> np.ndarray:
        if i == 0:
            return self._first_component(self._check(x)[:, 0])
        return self.component_from_tables(i, self.tables(i, x))[0]

    def _first_component(self, x: np.ndarray) -> np.ndarray:
        # fast path for the univariate component, used heavily when sampling
        c, w = gauss_legendre_unit(self.basis.o_int)
        cb = self.coeffs_b[0]
        t = x[:, None] * c[None, :]
        e = np.exp(-self.basis.damping * t * t)
        he_prev, he = np.ones_like(t), t
        poly = np.zeros_like(t)
        for j in range(1, len(cb)):
            poly += cb[j] * he
            he_prev, he = he, t * he - j * he_prev
        b = cb[0] + e * poly
        return self.coeffs_a[0][0] + x * ((b * b) @ w)

    def __call__(self, x) -> np.ndarray:
        return self.evaluate(x)

    def evaluate(self, x) -> np.ndarray:
        x = self._check(x)
        return np.stack([self.evaluate_component(i, x) for i in range(self.dim)], axis=-1)

    def diag_b(self, x) -> np.ndarray:
        """``b_i(x_<i, x_i)`` for every component, shape ``(n, dim)``."""
        x = self._check(x)
        return np.stack([self.component_from_tables(i, self.tables(i, x))[1] for i in range(self.dim)], axis=-1)

    def diag_derivative(self, x) -> np.ndarray:
        return self.diag_b(x) ** 2

    def logdet_jacobian(self, x) -> np.ndarray:
        """``sum_i 2 log|b_i|``; ``-inf`` where some ``b_i`` vanishes."""
        b = np.abs(self.diag_b(x))
        with np.errstate(divide="ignore"):
            return 2.0 * np.sum(np.log(b), axis=-1)

    def component_input_derivs(self, i: int, x):
        """Value, gradient ``(n, i+1)`` and Hessian ``(n, i+1, i+1)`` of ``T_i`` in its inputs."""
        x = self._check(x)
        order = self.basis.order
        c, w = gauss_legendre_unit(self.basis.o_int)
        xi = x[:, i]
        n = len(xi)
        ca, cb = self.coeffs_a[i], self.coeffs_b[i]
        k = i + 1
        grad = np.zeros((n, k))
        hess = np.zeros((n, k, k))

        t = xi[:, None] * c[None, :]
        dv, dd1, dd2 = (f[self.b_idx[i][:, i]] for f in univariate(DIAG, t, order, self.basis.damping))  # (n_b, n, q)
        if i > 0:
            off = [univariate(OFF, x[:, j], order, self.basis.damping) for j in range(i)]
            a_val, a_g, a_h = tensor_terms(off, self.a_idx[i], derivs=2)
            val = ca @ a_val
            grad[:, :i] = np.einsum("m,jmn->nj", ca, a_g)
            hess[:, :i, :i] = np.einsum("m,jlmn->njl", ca, a_h)
            o_val, o_g, o_h = tensor_terms(off, self.b_idx[i][:, :i], derivs=2)
        else:
            val = np.full(n, ca[0])
            o_val = np.ones((len(cb), n))
            o_g = np.zeros((0, len(cb), n))
            o_h = np.zeros((0, 0, len(cb), n))

        cbo = cb[:, None] * o_val  # (n_b, n)
        B = np.einsum("mn,mnq->nq", cbo, dv)
        Bt = np.einsum("mn,mnq->nq", cbo, dd1)
        Btt = np.einsum("mn,mnq->nq", cbo, dd2)
        Bj = np.einsum("m,jmn,mnq->jnq", cb, o_g, dv)
        Bjt = np.einsum("m,jmn,mnq->jnq", cb, o_g, dd1)
        Bjl = np.einsum("m,jlmn,mnq->jlnq", cb, o_h, dv)

        xw = xi[:, None] * w[None, :]
        val = val + np.sum(xw * B * B, axis=1)
        grad[:, :i] += np.einsum("nq,jnq->nj", 2 * xw * B, Bj)
        hess[:, :i, :i] += np.einsum("nq,jnq,lnq->njl", 2 * xw, Bj, Bj) + np.einsum("nq,jlnq->njl", 2 * xw * B, Bjl)
        grad[:, i] = np.sum(w * B * B, axis=1) + np.sum(2 * xw * c * B * Bt, axis=1)
        hess[:, i, i] = np.sum(w * (4 * c * B * Bt + 2 * xi[:, None] * c * c * (Bt * Bt + B * Btt)), axis=1)
        cross = np.einsum("q,jnq->nj", w, 2 * B * Bj) + np.einsum("nq,jnq->nj", 2 * xw * c, Bj * Bt + B * Bjt)
        hess[:, :i, i] += cross
        hess[:, i, :i] += cross
        return val, grad, hess

    # -- misc -----------------------------------------------------------

    def __eq__(self, other):
        if not isinstance(other, MonotoneTriangularMap):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.basis == other.basis
            and all(np.array_equal(p, q) for p, q in zip(self.coeffs_a + self.coeffs_b, other.coeffs_a + other.coeffs_b))
        )

    def __repr__(self):
        return f"MonotoneTriangularMap(dim={self.dim}, order={self.basis.order}, n_params={self.n_params})"


class PermutedMap:
    """``x -> P^{-1} T(P x)`` where ``(P x)_k = x[perm[k]]``."""

    def __init__(self, inner, perm):
        self.inner = inner
        self.perm = np.asarray(perm, dtype=int)
        if sorted(self.perm.tolist()) != list(range(inner.dim)):
            raise ValueError("perm must be a permutation of the map's coordinates")
        self.inv = np.argsort(self.perm)
        self.dim = inner.dim

    def __call__(self, x):
        return self.evaluate(x)

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        return self.inner.evaluate(x[:, self.perm])[:, self.inv]


def permute_conjugate(T, perm=None) -> PermutedMap:
    """Conjugate ``T`` by a coordinate permutation; the default reverses the coordinates."""
    if perm is None:
        perm = np.arange(T.dim)[::-1]
    return PermutedMap(T, perm)


def map_to_text(T: MonotoneTriangularMap) -> str:
    lines = [FORMAT_HEADER, f"dim {T.dim}", f"order {T.basis.order}", f"o_int {T.basis.o_int}", "damping %.17g" % T.basis.damping]
    for i in range(T.dim):
        for tag, c in (("a", T.coeffs_a[i]), ("b", T.coeffs_b[i])):
            lines.append(" ".join([tag, str(i), str(len(c))] + ["%.17g" % v for v in c]))
    return "\n".join(lines) + "\n"


def map_from_text(text: str) -> MonotoneTriangularMap:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines or lines[0] != FORMAT_HEADER:
        raise ValueError("not a serialized map (bad header)")
    head = dict(ln.split() for ln in lines[1:5])
    dim = int(head["dim"])
    basis = BasisSpec(order=int(head["order"]), o_int=int(head["o_int"]), damping=float(head["damping"]))
    a, b = [None] * dim, [None] * dim
    for ln in lines[5:]:
        tag, i, n, *vals = ln.split()
        if len(vals) != int(n):
            raise ValueError(f"coefficient count mismatch in line {ln[:40]!r}")
        (a if tag == "a" else b)[int(i)] = np.array([float(v) for v in vals])
    if any(c is None for c in a + b):
        raise ValueError("missing coefficient lines")
    return MonotoneTriangularMap(dim, basis, a, b)


def leading(T: MonotoneTriangularMap, k: int) -> MonotoneTriangularMap:
    """The map formed by the first ``k`` components of ``T``."""
    if not 1 <= k <= T.dim:
        raise ValueError(f"k must lie in [1, {T.dim}]")
    return MonotoneTriangularMap(k, T.basis, T.coeffs_a[:k], T.coeffs_b[:k])


def monotone_integral(b, x, o_int: int = 12):
    """``int_0^x b(t)^2 dt`` by the same Gauss-Legendre rule the maps use."""
    c, w = gauss_legendre_unit(o_int)
    x = np.asarray(x, dtype=float)
    vals = np.asarray(b(x[..., None] * c), dtype=float)
    return x * np.sum(w * vals * vals, axis=-1)
