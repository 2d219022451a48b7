"""Experiment harness: replicated runs, matched-cost comparisons, CSV output and fits.

A study fixes one model and one observation record (simulated once from
``data_seed``) and runs every requested method ``replicates`` times per
setting.  Settings are accuracies ``epsilon`` for the multilevel methods and
particle counts ``N`` for the particle methods.  A particle method may instead
be matched to the total operation cost of ``transport-mlmc`` at each epsilon.

CSV columns (fixed)::

    method,epsilon,N,replicate,estimate,reference,sq_error,cost_ops,cost_wall_ms,n_star

``epsilon`` is empty for particle runs that were not cost matched.  ``N`` is
the sample size of the first level for multilevel methods and the particle
count otherwise.  ``n_star`` is 0 for particle methods.  ``cost_ops`` is in
the backend's own unit and includes one-off setup (map optimization, grid
recursion), which every replicate is charged in full.
"""

from __future__ import annotations

import csv
import io
import math
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats

from mlsmooth.gaussian import fixed_point_moments
from mlsmooth.grid import Grid1D, mlmc_estimate_grid, smoother_marginal_sequence
from mlsmooth.mlmc import LevelSchedule, make_schedule, mlmc_estimate_exact
from mlsmooth.models import (
    HmmInstance,
    LinearGaussianParams,
    ObservationSequence,
    StochVolParams,
    make_linear_gaussian,
    make_stoch_vol,
    simulate,
)
from mlsmooth.paris import ParisConfig, ffbs_reference, paris_fixed_point
from mlsmooth.rng import make_rng
from mlsmooth.transport.basis import BasisSpec
from mlsmooth.transport.fixed_point import TransportConfig, fixed_point_maps, multilevel_transport_estimate

__all__ = [
    "CSV_HEADER",
    "MLMC_METHODS",
    "PARTICLE_METHODS",
    "ExperimentConfig",
    "RunRecord",
    "run_multilevel_transport",
    "run_study",
    "write_csv",
    "read_csv",
    "mse_against_reference",
    "summarize",
    "loglog_slope",
    "fit_cost",
    "matched_particles",
    "build_model",
]

CSV_HEADER = ("method", "epsilon", "N", "replicate", "estimate", "reference", "sq_error", "cost_ops", "cost_wall_ms", "n_star")
MLMC_METHODS = ("exact-mlmc", "grid-mlmc", "transport-mlmc")
PARTICLE_METHODS = ("paris", "ffbs")
METHODS = MLMC_METHODS + PARTICLE_METHODS
# stable stream keys, so adding a method never shifts another method's draws
_METHOD_KEY = {name: i + 1 for i, name in enumerate(METHODS)}
_REFERENCE_KEY = 99

PHI = {
    "identity": lambda x: x,
    "square": lambda x: x * x,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines a study; field names double as JSON keys."""

    model: str = "linear-gaussian"
    model_params: tuple = ()
    methods: tuple = ("transport-mlmc",)
    epsilons: tuple = (0.01,)
    particles: tuple = ()
    match_cost: bool = False
    replicates: int = 100
    seed: int = 0
    data_seed: int = 2024
    n_cap: int = 25
    rho: float = 0.8
    delta: float = 0.1
    phi: str = "identity"
    n_backward: int = 2
    reference: str = "auto"
    reference_particles: int = 8192
    grid_points: int = 2001
    map_order: int = 3
    o_exp: int = 5
    basis_damping: float = 0.0
    deterministic: bool = False
    workers: int = 1
    output: str | None = None

    def __post_init__(self):
        params = self.model_params
        if isinstance(params, dict):
            params = tuple(sorted(params.items()))
        object.__setattr__(self, "model_params", tuple(tuple(kv) for kv in params))
        for name in ("methods", "epsilons", "particles"):
            val = getattr(self, name)
            object.__setattr__(self, name, (val,) if isinstance(val, (str, int, float)) else tuple(val))
        object.__setattr__(self, "epsilons", tuple(float(e) for e in self.epsilons))
        object.__setattr__(self, "particles", tuple(int(n) for n in self.particles))
        if self.model not in ("linear-gaussian", "stoch-vol"):
            raise ValueError(f"unknown model {self.model!r}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ValueError(f"unknown methods {bad}; choose from {list(METHODS)}")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.phi not in PHI:
            raise ValueError(f"unknown phi {self.phi!r}; choose from {sorted(PHI)}")
        if self.reference not in ("auto", "rts", "ffbs"):
            raise ValueError(f"unknown reference {self.reference!r}")
        if self.reference == "rts" and self.model != "linear-gaussian":
            raise ValueError("the RTS reference needs the linear-Gaussian model")
        if "exact-mlmc" in self.methods and self.model != "linear-gaussian":
            raise ValueError("exact-mlmc needs the linear-Gaussian model")
        if any(not 0 < e < 1 for e in self.epsilons):
            raise ValueError("every epsilon must lie in (0, 1)")
        if any(n < 2 for n in self.particles):
            raise ValueError("particle counts must be at least 2")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if any(m in MLMC_METHODS for m in self.methods) and not self.epsilons:
            raise ValueError("multilevel methods need at least one epsilon")
        if any(m in PARTICLE_METHODS for m in self.methods) and not (self.particles or self.match_cost):
            raise ValueError("particle methods need particle counts or match_cost")
        if self.match_cost and not self.epsilons:
            raise ValueError("match_cost needs epsilons")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model_params"] = dict(self.model_params)
        for k in ("methods", "epsilons", "particles"):
            d[k] = list(d[k])
        return d

    def transport(self) -> TransportConfig:
        return TransportConfig(basis=BasisSpec(order=self.map_order, damping=self.basis_damping), o_exp=self.o_exp)

    def schedule(self, epsilon: float) -> LevelSchedule:
        return make_schedule(epsilon, self.rho, self.delta, self.n_cap)


@dataclass(frozen=True)
class RunRecord:
    method: str
    epsilon: float
    N: int
    replicate: int
    estimate: float
    reference: float
    sq_error: float
    cost_ops: float
    cost_wall_ms: float
    n_star: int

    def row(self) -> list[str]:
        eps = "" if math.isnan(self.epsilon) else repr(self.epsilon)
        return [
            self.method, eps, str(self.N), str(self.replicate), repr(self.estimate), repr(self.reference),
            repr(self.sq_error), repr(self.cost_ops), repr(self.cost_wall_ms), str(self.n_star),
        ]

    @classmethod
    def from_row(cls, row: dict) -> "RunRecord":
        eps = row["epsilon"]
        return cls(
            row["method"], float(eps) if eps else math.nan, int(row["N"]), int(row["replicate"]),
            float(row["estimate"]), float(row["reference"]), float(row["sq_error"]),
            float(row["cost_ops"]), float(row["cost_wall_ms"]), int(row["n_star"]),
        )


def _record(method, epsilon, n, rep, estimate, reference, cost_ops, wall_s, n_star) -> RunRecord:
    cost_ops = float(cost_ops)
    if cost_ops < 0 or wall_s < 0:
        raise ValueError("costs must be non-negative")
    return RunRecord(
        method, float(epsilon), int(n), int(rep), float(estimate), float(reference),
        float((estimate - reference) ** 2), cost_ops, 1e3 * float(wall_s), int(n_star),
    )


def build_model(config: ExperimentConfig) -> HmmInstance:
    params = dict(config.model_params)
    if config.model == "linear-gaussian":
        return make_linear_gaussian(LinearGaussianParams(**params))
    return make_stoch_vol(StochVolParams(**params))


def run_multilevel_transport(
    model: HmmInstance,
    obs: ObservationSequence,
    schedule: LevelSchedule,
    phi: Callable,
    rng: np.random.Generator,
    config: TransportConfig = TransportConfig(),
    pairs=None,
    reference: float = math.nan,
    replicate: int = 0,
) -> RunRecord:
    """One multilevel transport estimate of ``E[phi(X_0) | y_{1:n*+1}]``.

    ``obs`` must start at time 1.  Maps are optimized unless precomputed
    ``pairs`` are given; either way the record's cost includes their
    construction.
    """
    if obs.start != 1:
        raise ValueError("the fixed-point recursion expects observations starting at time 1")
    if pairs is None:
        pairs = fixed_point_maps(model, obs, schedule.n_star, config)
    start = time.perf_counter()
    rep = multilevel_transport_estimate(pairs, schedule, phi, rng)
    wall = time.perf_counter() - start + rep.extra["map_wall_s"]
    n1 = schedule.n_samples[1]
    return _record("transport-mlmc", schedule.epsilon, n1, replicate, rep.estimate, reference, rep.total_ops, wall, rep.n_star)


def matched_particles(cost_ops: float, n_steps: int) -> int:
    """Particle count whose ``n_steps * N^2`` cost is closest to ``cost_ops``."""
    return max(2, int(round(math.sqrt(cost_ops / n_steps))))


# --------------------------------------------------------------------------
# study context (built once, shared by all replicates)
# --------------------------------------------------------------------------


@dataclass
class _Context:
    config: ExperimentConfig
    model: HmmInstance
    obs: ObservationSequence
    reference: float
    phi: Callable
    pairs: list = field(default_factory=list)
    densities: list = field(default_factory=list)
    grid_wall_s: float = 0.0


def _reference(config, model, obs, phi) -> float:
    kind = config.reference
    if kind == "auto":
        kind = "rts" if config.model == "linear-gaussian" else "ffbs"
    if kind == "rts":
        mean, var = fixed_point_moments(model.params, obs, obs.last_time).at(obs.last_time)
        if config.phi == "identity":
            return float(mean)
        return float(mean * mean + var)
    rng = make_rng(config.seed, _REFERENCE_KEY)
    return ffbs_reference(model, obs, phi, config.reference_particles, rng).estimate


def _build_context(config: ExperimentConfig) -> _Context:
    model = build_model(config)
    _, data = simulate(model, config.n_cap + 1, config.data_seed)
    obs = data.from_time(1)
    phi = PHI[config.phi]
    ctx = _Context(config, model, obs, _reference(config, model, obs, phi), phi)
    needs_maps = "transport-mlmc" in config.methods or config.match_cost
    n_max = max((config.schedule(e).n_star for e in config.epsilons), default=0)
    if needs_maps and n_max >= 1:
        ctx.pairs = fixed_point_maps(model, obs, n_max, config.transport())
    if "grid-mlmc" in config.methods and n_max >= 0:
        start = time.perf_counter()
        grid = Grid1D.for_model(model, obs.last_time, config.grid_points)
        ctx.densities = smoother_marginal_sequence(model, obs, n_max, grid)
        ctx.grid_wall_s = time.perf_counter() - start
    return ctx


def _transport_total_ops(ctx: _Context, epsilon: float) -> float:
    sched = ctx.config.schedule(epsilon)
    n = sched.n_star
    ops1d = ctx.pairs[0].t_x0.ops_per_eval
    ns = sched.n_samples
    sampling = n + ops1d * (ns[1] + 2 * sum(ns[2 : n + 1]))
    return float(sampling + sum(pr.ops for pr in ctx.pairs[:n]))


def _settings(ctx: _Context) -> list[tuple]:
    """``(method, epsilon, N)`` triples in canonical order."""
    cfg = ctx.config
    out = []
    for method in cfg.methods:
        if method in MLMC_METHODS:
            out += [(method, e, 0) for e in cfg.epsilons]
        else:
            out += [(method, math.nan, n) for n in cfg.particles]
            if cfg.match_cost:
                n_steps = ctx.obs.last_time
                out += [(method, e, matched_particles(_transport_total_ops(ctx, e), n_steps)) for e in cfg.epsilons]
    return out


def _stream(cfg: ExperimentConfig, method: str, epsilon: float, n: int, rep: int) -> np.random.Generator:
    eps_key = 0 if math.isnan(epsilon) else int(round(epsilon * 1e12))
    return make_rng(cfg.seed, _METHOD_KEY[method], eps_key, n, rep)


def _run_one(ctx: _Context, setting: tuple, rep: int) -> RunRecord:
    cfg = ctx.config
    method, eps, n = setting
    rng = _stream(cfg, method, eps, n, rep)
    ref = ctx.reference
    if method == "transport-mlmc":
        return run_multilevel_transport(ctx.model, ctx.obs, cfg.schedule(eps), ctx.phi, rng, pairs=ctx.pairs, reference=ref, replicate=rep)
    start = time.perf_counter()
    if method == "exact-mlmc":
        sched = cfg.schedule(eps)
        r = mlmc_estimate_exact(ctx.model.params, ctx.obs, sched, ctx.phi, rng)
        return _record(method, eps, sched.n_samples[0], rep, r.estimate, ref, r.total_ops, time.perf_counter() - start, r.n_star)
    if method == "grid-mlmc":
        sched = cfg.schedule(eps)
        r = mlmc_estimate_grid(ctx.model, ctx.obs, sched, ctx.phi, rng, densities=ctx.densities)
        wall = time.perf_counter() - start + ctx.grid_wall_s
        return _record(method, eps, sched.n_samples[0], rep, r.estimate, ref, r.total_ops, wall, r.n_star)
    if method == "paris":
        r = paris_fixed_point(ctx.model, ctx.obs, ctx.phi, ParisConfig(n, min(cfg.n_backward, n)), rng)
    else:
        r = ffbs_reference(ctx.model, ctx.obs, ctx.phi, n, rng)
    return _record(method, eps, n, rep, r.estimate, ref, r.cost_ops, time.perf_counter() - start, 0)


# forked workers inherit the context through this module-level slot
_ACTIVE: _Context | None = None


def _worker(task):
    setting, rep = task
    return _run_one(_ACTIVE, setting, rep)


def _sort_key(r: RunRecord):
    return (r.method, -1.0 if math.isnan(r.epsilon) else r.epsilon, r.N, r.replicate)


def run_study(config: ExperimentConfig, progress: Callable[[str], None] | None = None) -> list[RunRecord]:
    """All replicates of all settings, sorted by (method, epsilon, N, replicate).

    With ``workers > 1`` replicates are distributed over forked processes.
    If ``config.output`` is set the CSV is written there.
    """
    global _ACTIVE
    ctx = _build_context(config)
    tasks = [(s, rep) for s in _settings(ctx) for rep in range(config.replicates)]
    records: list[RunRecord] = []
    can_fork = "fork" in multiprocessing.get_all_start_methods()
    if config.workers > 1 and can_fork and len(tasks) > 1:
        _ACTIVE = ctx
        try:
            with ProcessPoolExecutor(config.workers, mp_context=multiprocessing.get_context("fork")) as pool:
                records = list(pool.map(_worker, tasks, chunksize=max(1, len(tasks) // (8 * config.workers))))
        finally:
            _ACTIVE = None
    else:
        for i, (s, rep) in enumerate(tasks):
            records.append(_run_one(ctx, s, rep))
            if progress and (rep == config.replicates - 1):
                progress(f"{s[0]} epsilon={s[1]} N={s[2]} done ({i + 1}/{len(tasks)})")
    records.sort(key=_sort_key)
    if config.deterministic:
        records = [RunRecord(**{**asdict(r), "cost_wall_ms": 0.0}) for r in records]
    if config.output:
        write_csv(records, config.output)
    return records


# --------------------------------------------------------------------------
# CSV and analysis
# --------------------------------------------------------------------------


def write_csv(records: Iterable[RunRecord], path: str | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow(r.row())
    text = buf.getvalue()
    if path is not None:
        d = os.path.dirname(os.path.abspath(path))
        os.makedirs(d, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def read_csv(path: str) -> list[RunRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        return [RunRecord.from_row(row) for row in reader]


def mse_against_reference(records: Sequence[RunRecord], reference: float | None = None) -> float:
    """``(1/M) sum_i (estimate_i - reference)^2``; each record's own reference unless one is given."""
    if not records:
        raise ValueError("no records")
    est = np.array([r.estimate for r in records])
    ref = np.array([r.reference for r in records]) if reference is None else float(reference)
    return float(np.mean((est - ref) ** 2))


def summarize(records: Sequence[RunRecord]) -> list[dict]:
    """One summary row per (method, epsilon, N) with the MSE and mean costs."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r.method, r.epsilon if not math.isnan(r.epsilon) else None, r.N), []).append(r)
    out = []
    for (method, eps, n), rs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1] or -1.0, kv[0][2])):
        out.append({
            "method": method,
            "epsilon": eps,
            "N": n,
            "n_star": rs[0].n_star,
            "replicates": len(rs),
            "mse": mse_against_reference(rs),
            "mean_estimate": float(np.mean([r.estimate for r in rs])),
            "reference": rs[0].reference,
            "cost_ops": float(np.mean([r.cost_ops for r in rs])),
            "cost_wall_ms": float(np.mean([r.cost_wall_ms for r in rs])),
        })
    return out


def loglog_slope(x, y) -> dict:
    """Least-squares slope of ``log y`` on ``log x`` with intercept and R^2."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if len(x) < 2:
        raise ValueError("need at least two points")
    fit = stats.linregress(np.log(x), np.log(y))
    return {"slope": float(fit.slope), "intercept": float(fit.intercept), "r2": float(fit.rvalue**2)}


def fit_cost(epsilons, costs) -> dict:
    """Least-squares fit of ``cost = -a eps^-2 - b log(eps)``; returns ``a``, ``b`` and R^2."""
    eps, c = np.asarray(epsilons, dtype=float), np.asarray(costs, dtype=float)
    if len(eps) < 2:
        raise ValueError("need at least two points")
    X = np.column_stack([-(eps**-2.0), -np.log(eps)])
    coef, *_ = np.linalg.lstsq(X, c, rcond=None)
    resid = c - X @ coef
    ss_tot = float(np.sum((c - c.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return {"a": float(coef[0]), "b": float(coef[1]), "r2": r2}
