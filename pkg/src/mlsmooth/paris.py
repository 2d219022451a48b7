"""PaRIS-style online particle smoother for ``E[phi(X_0) | y]``.

A bootstrap filter with multinomial resampling carries, for each particle
``x_t^i``, a statistic ``T_t^i`` estimating ``E[phi(X_0) | y_{..t}, X_t = x_t^i]``.
At each step every particle draws ``n_backward`` indices from the backward
kernel ``w_{t-1}^j f(x_{t-1}^j, x_t^i)`` and averages their statistics.

The forward particle cloud and the backward draws use separate random
streams, so runs that differ only in ``n_backward`` share their particles.
Cost is the number of transition-density evaluations (``N^2`` per step, since
the backward kernel of every particle is normalized over all ``N`` ancestors).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from mlsmooth.models import HmmInstance, ObservationSequence

__all__ = [
    "ParisConfig",
    "ParisResult",
    "DegenerateLikelihoodError",
    "paris_fixed_point",
    "ffbs_reference",
    "ffbs_backward_pass",
]

# elements of the N x N backward kernel processed at once (kept cache sized)
CHUNK_ELEMS = 1 << 17


class DegenerateLikelihoodError(RuntimeError):
    def __init__(self, time: int):
        self.time = time
        super().__init__(f"all particle weights vanished at time {time}")


@dataclass(frozen=True)
class ParisConfig:
    n_particles: int
    n_backward: int = 2

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be at least 1")
        if not 1 <= self.n_backward <= self.n_particles:
            raise ValueError(f"n_backward must lie in [1, {self.n_particles}], got {self.n_backward}")

    @property
    def exact_backward(self) -> bool:
        """``n_backward = N`` is taken to mean the exact backward expectation."""
        return self.n_backward == self.n_particles


@dataclass
class ParisResult:
    estimate: float
    cost_ops: float
    n_particles: int
    n_backward: int


def _normalized(logw: np.ndarray, t: int) -> np.ndarray:
    top = np.max(logw)
    if not np.isfinite(top):
        raise DegenerateLikelihoodError(t)
    w = np.exp(logw - top)
    return w / w.sum()


def _log_lik(model: HmmInstance, x, obs: ObservationSequence, t: int) -> np.ndarray:
    return model.obs_logpdf(x, obs.at(t)) if obs.has(t) else np.zeros(len(x))


def _forward(model: HmmInstance, obs: ObservationSequence, n: int, rng: np.random.Generator):
    """Bootstrap filter yielding ``(t, x_prev, w_prev, x, logw)`` for ``t >= 1`` after the initial cloud."""
    x = np.asarray(model.init_sampler(rng, n), dtype=float)
    logw = _log_lik(model, x, obs, 0)
    yield 0, None, None, x, logw
    for t in range(1, obs.last_time + 1):
        w = _normalized(logw, t - 1)
        anc = rng.choice(n, size=n, p=w)
        x_new = np.asarray(model.trans_sampler(rng, x[anc]), dtype=float)
        logw_new = _log_lik(model, x_new, obs, t)
        yield t, x, w, x_new, logw_new
        x, logw = x_new, logw_new


def _backward_kernel_rows(model, x_prev, logw_prev, x_rows, buf=None, dtype=np.float64):
    """Unnormalized backward kernel ``w^j f(x_prev^j, x_row)`` for a block of rows.

    Factors constant along a row are dropped.  ``logw_prev`` has maximum 0,
    so with the full density no row can overflow; rows that underflow (or,
    on the fast path, leave the safe exponent range) are recomputed with a
    per-row shift.  ``buf`` is an optional pair of scratch arrays of at least
    ``len(x_rows) * len(x_prev)`` elements, reused to avoid fresh allocations.
    Single precision (``dtype=np.float32``) is enough when the kernel is only
    used to draw indices.
    """
    shape = (len(x_rows), len(x_prev))
    size = shape[0] * shape[1]
    if buf is None:
        buf = (np.empty(size, dtype), np.empty(size, dtype))
    x_rows = x_rows.astype(dtype, copy=False)
    x_prev = x_prev.astype(dtype, copy=False)
    logw_prev = logw_prev.astype(dtype, copy=False)
    logk = buf[0][:size].reshape(shape)
    k = buf[1][:size].reshape(shape)
    lg = model.linear_gaussian_transition
    if lg is not None:
        a, c, sd = lg
        scale = dtype(np.sqrt(0.5) / sd)
        np.subtract(scale * x_rows[:, None], (scale * (a * x_prev + c)).astype(dtype)[None, :], out=logk)
        np.square(logk, out=logk)
        np.subtract(logw_prev[None, :], logk, out=logk)
    else:
        logk[...] = model.trans_logpdf(x_prev[None, :], x_rows[:, None])
        logk += logw_prev[None, :]
    np.exp(logk, out=k)
    sums = k.sum(axis=1)
    bad = ~(sums > np.finfo(dtype).tiny * 1e6)
    if np.any(bad):
        sub = logk[bad]
        sub -= sub.max(axis=1, keepdims=True)
        k[bad] = np.exp(sub)
        sums[bad] = k[bad].sum(axis=1)
    return k, sums


SAMPLE_BLOCK = 64


def _draw_columns(k: np.ndarray, sums: np.ndarray, n_draws: int, rng) -> np.ndarray:
    """Column indices drawn from each row of ``k`` with probabilities ``k[r] / sums[r]``.

    Inverse CDF in two stages: pick a block of ``SAMPLE_BLOCK`` columns from
    the block sums, then a column inside it.  This avoids a running sum over
    the whole row.
    """
    rows, n = k.shape
    starts = np.arange(0, n, SAMPLE_BLOCK)
    nb = len(starts)
    flat_starts = (np.arange(rows)[:, None] * n + starts[None, :]).ravel()
    block_sums = np.add.reduceat(k.ravel(), flat_starts).reshape(rows, nb)
    cum = np.cumsum(block_sums, axis=1)
    u = rng.random((rows, n_draws)) * cum[:, -1:]
    blk = np.minimum((cum[:, None, :] <= u[:, :, None]).sum(axis=2), nb - 1)
    resid = u - np.take_along_axis(cum - block_sums, blk, axis=1)
    cols = starts[blk][:, :, None] + np.arange(SAMPLE_BLOCK)[None, None, :]
    valid = cols < n
    vals = np.where(valid, k[np.arange(rows)[:, None, None], np.minimum(cols, n - 1)], 0.0)
    inner = np.minimum((np.cumsum(vals, axis=2) <= resid[:, :, None]).sum(axis=2), SAMPLE_BLOCK - 1)
    return np.minimum(starts[blk] + inner, n - 1)


def _update_statistics(model, x_prev, w_prev, x, stats, n_backward: int | None, rng):
    """New statistics; ``n_backward=None`` takes the exact backward expectation."""
    n, n_prev = len(x), len(x_prev)
    with np.errstate(divide="ignore"):
        logw_prev = np.log(w_prev)
    logw_prev -= logw_prev.max()
    out = np.empty(n)
    rows = max(1, CHUNK_ELEMS // n_prev)
    dtype = np.float64 if n_backward is None else np.float32
    buf = (np.empty(rows * n_prev, dtype), np.empty(rows * n_prev, dtype))
    for lo in range(0, n, rows):
        hi = min(n, lo + rows)
        k, sums = _backward_kernel_rows(model, x_prev, logw_prev, x[lo:hi], buf, dtype)
        if n_backward is None:
            out[lo:hi] = (k @ stats) / sums
        else:
            out[lo:hi] = stats[_draw_columns(k, sums, n_backward, rng)].mean(axis=1)
    return out


def _run(model, obs, phi, n: int, n_backward: int | None, rng) -> ParisResult:
    if model.dim != 1:
        raise ValueError("the particle smoother supports scalar models")
    if len(obs) < 1:
        raise ValueError("need at least one observation")
    fwd, bwd = rng.spawn(2)
    stats = None
    cost = 0.0
    for t, x_prev, w_prev, x, logw in _forward(model, obs, n, fwd):
        if t == 0:
            stats = np.asarray(phi(x), dtype=float)
        else:
            stats = _update_statistics(model, x_prev, w_prev, x, stats, n_backward, bwd)
            cost += float(n) * n
    w = _normalized(logw, obs.last_time)
    nb = n if n_backward is None else n_backward
    return ParisResult(float(w @ stats), cost, n, nb)


def paris_fixed_point(
    model: HmmInstance,
    obs: ObservationSequence,
    phi: Callable,
    config: ParisConfig,
    rng: np.random.Generator,
) -> ParisResult:
    """Estimate of ``E[phi(X_0) | y]`` from all observations in ``obs``."""
    nb = None if config.exact_backward else config.n_backward
    return _run(model, obs, phi, config.n_particles, nb, rng)


def ffbs_reference(model: HmmInstance, obs: ObservationSequence, phi: Callable, n: int, rng) -> ParisResult:
    """Forward-filtering backward-smoothing expectation of ``phi(X_0)`` on the filter's particles.

    Computed in forward-only form, which for a functional of ``X_0`` equals
    the backward pass exactly in exact arithmetic; see ``ffbs_backward_pass``.
    """
    return _run(model, obs, phi, n, None, rng)


def ffbs_backward_pass(model: HmmInstance, obs: ObservationSequence, phi: Callable, n: int, rng) -> float:
    """The same expectation by the textbook backward recursion of marginal smoothing weights.

    Stores the whole particle history; intended for cross-checks on small problems.
    """
    fwd, _ = rng.spawn(2)
    history = []
    logw = None
    for t, x_prev, w_prev, x, logw in _forward(model, obs, n, fwd):
        history.append((x_prev, w_prev, x))
    omega = _normalized(logw, obs.last_time)
    for x_prev, w_prev, x in reversed(history[1:]):
        with np.errstate(divide="ignore"):
            logw_prev = np.log(w_prev)
        k, sums = _backward_kernel_rows(model, x_prev, logw_prev - logw_prev.max(), x)
        omega = (omega / sums) @ k
    return float(omega @ np.asarray(phi(history[0][2]), dtype=float))
