import math
import warnings
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlsmooth.gaussian import fixed_point_moments, lag_one_joint
from mlsmooth.mlmc import make_schedule
from mlsmooth.models import LinearGaussianParams, ObservationSequence, StochVolParams, make_linear_gaussian, make_stoch_vol, simulate
from mlsmooth.rng import make_rng
from mlsmooth.transport import (
    BasisSpec,
    KLObjective,
    MonotoneTriangularMap,
    NewtonConfig,
    NonConvergenceError,
    NonFiniteTargetError,
    TransportConfig,
    build_fixedpoint_target,
    build_lag1_target,
    compose_and_reapproximate,
    coupled_sample_pair,
    fixed_point_maps,
    gauss_hermite,
    kl_objective,
    lag1_maps,
    lag1_pushforward,
    leading,
    map_from_text,
    map_to_text,
    multilevel_transport_estimate,
    optimize_map,
)
from mlsmooth.transport.basis import hermite_functions, univariate
from mlsmooth.transport.fixed_point import FixedPointMapPair
from mlsmooth.transport.maps import monotone_integral, permute_conjugate
from mlsmooth.transport.quadrature import gauss_legendre_unit
from mlsmooth.transport.targets import gaussian_target, permuted_target

PARAMS = LinearGaussianParams()
LG = make_linear_gaussian(PARAMS)
SV = make_stoch_vol(StochVolParams())
BASIS = BasisSpec()


def random_map(dim, seed, scale=0.1, basis=BASIS):
    ident = MonotoneTriangularMap.identity(dim, basis)
    return ident.with_params(ident.params + scale * make_rng(seed).standard_normal(ident.n_params))


def well_conditioned_map(dim, seed, nodes, floor=0.5):
    """A random map whose diagonal factors stay above ``floor`` in size at ``nodes``."""
    for k in range(100):
        T = random_map(dim, seed * 1000 + k, 0.1 / (1 + k // 10))
        if np.min(np.abs(T.diag_b(nodes))) > floor:
            return T
    raise RuntimeError("no well-conditioned draw")


def fd_gradient(f, theta, h=1e-4):
    """Five-point central differences (fourth order)."""
    g = np.empty_like(theta)
    for k in range(len(theta)):
        e = np.zeros_like(theta)
        e[k] = h
        g[k] = (8 * (f(theta + e) - f(theta - e)) - (f(theta + 2 * e) - f(theta - 2 * e))) / (12 * h)
    return g


def assert_rel_close(a, b, rel):
    floor = 1e-2 * max(np.max(np.abs(b)), 1e-8)
    err = np.abs(a - b) / np.maximum(np.abs(b), floor)
    assert np.max(err) < rel, np.max(err)


@pytest.fixture(scope="module")
def lg_obs():
    return simulate(LG, 30, 2024)[1]


@pytest.fixture(scope="module")
def lag1_results(lg_obs):
    return lag1_maps(LG, lg_obs, 4)


class TestBasis:
    @pytest.mark.parametrize("damping", [0.0, 0.25])
    def test_derivatives(self, damping):
        x = np.linspace(-3, 3, 13)
        h = 1e-6
        v, d1, d2 = hermite_functions(x, 5, damping)
        vp, d1p, _ = hermite_functions(x + h, 5, damping)
        vm, d1m, _ = hermite_functions(x - h, 5, damping)
        assert np.allclose((vp - vm) / (2 * h), d1, atol=1e-7)
        assert np.allclose((d1p - d1m) / (2 * h), d2, atol=1e-6)

    def test_families(self):
        x = np.array([0.3, -1.2])
        off = univariate("off", x, 3)[0]
        diag = univariate("diag", x, 3)[0]
        assert np.allclose(off[0], 1) and np.allclose(off[1], x)
        assert np.allclose(diag[0], 1) and np.allclose(diag[1], x)
        assert np.allclose(off[3], x**3 - 3 * x)

    @pytest.mark.parametrize("dim", [1, 2, 3])
    def test_counts_are_total_degree(self, dim):
        T = MonotoneTriangularMap.identity(dim, BasisSpec(order=3))
        for i, (na, nb) in enumerate(T.basis_counts()):
            assert na == comb(i + 3, 3) and nb == comb(i + 4, 3)
        assert {1: 5, 2: 19, 3: 49}[dim] == T.n_params

    def test_invalid_spec(self):
        for kw in ({"order": -1}, {"o_int": 0}, {"damping": -0.1}):
            with pytest.raises(ValueError):
                BasisSpec(**kw)


class TestEvaluation:
    def test_identity(self):
        x = make_rng(0).standard_normal((50, 3))
        assert np.allclose(MonotoneTriangularMap.identity(3).evaluate(x), x, atol=1e-14)

    def test_affine(self):
        T = MonotoneTriangularMap.affine_1d(1.5, 3.0)
        x = np.linspace(-4, 4, 9)
        assert np.allclose(T.evaluate_component(0, x), 1.5 + 3.0 * x, atol=1e-13)

    def test_monotone_integral_polynomial(self):
        assert monotone_integral(lambda t: 1 + t, np.array(1.0), o_int=2) == pytest.approx(7 / 3, abs=1e-14)

    def test_fast_first_component_matches_tables(self):
        T = random_map(2, 4, 0.3, BasisSpec(damping=0.25))
        x = make_rng(1).standard_normal((40, 2))
        slow = T.component_from_tables(0, T.tables(0, x))[0]
        assert np.allclose(T.evaluate_component(0, x), slow, atol=1e-13)

    def test_logdet_identity_and_scale(self):
        x = make_rng(2).standard_normal((10, 2))
        assert np.all(MonotoneTriangularMap.identity(2).logdet_jacobian(x) == 0.0)
        ident = MonotoneTriangularMap.identity(2)
        s = 2.5
        b = [c * math.sqrt(s) for c in ident.coeffs_b]
        T = MonotoneTriangularMap(2, ident.basis, ident.coeffs_a, b)
        assert np.allclose(T.logdet_jacobian(x), 2 * math.log(s))

    def test_logdet_matches_finite_differences(self):
        T = random_map(3, 7, 0.15)
        pts = make_rng(3).standard_normal((20, 3))
        h = 1e-5
        for x in pts:
            J = np.empty((3, 3))
            for j in range(3):
                e = np.zeros(3)
                e[j] = h
                J[:, j] = (T.evaluate((x + e)[None]) - T.evaluate((x - e)[None]))[0] / (2 * h)
            assert T.logdet_jacobian(x[None])[0] == pytest.approx(np.linalg.slogdet(J)[1], abs=1e-6)

    def test_logdet_zero_b(self):
        ident = MonotoneTriangularMap.identity(1)
        T = MonotoneTriangularMap(1, ident.basis, ident.coeffs_a, [np.zeros(4)])
        assert T.logdet_jacobian(np.array([[0.2]]))[0] == -math.inf

    @given(st.integers(0, 10**6), st.integers(0, 2), st.floats(-3, 3))
    @settings(max_examples=60, deadline=None)
    def test_triangular(self, seed, i, delta):
        T = random_map(3, seed, 0.3)
        x = make_rng(seed, 1).standard_normal((5, 3))
        y = x.copy()
        y[:, i + 1 :] += delta
        assert np.array_equal(T.evaluate(x)[:, : i + 1], T.evaluate(y)[:, : i + 1])

    def test_input_derivatives(self):
        T = random_map(3, 11, 0.2)
        x = make_rng(4).standard_normal((6, 3))
        h = 1e-5
        for i in range(3):
            _, g, H = T.component_input_derivs(i, x)
            for j in range(i + 1):
                e = np.zeros(3)
                e[j] = h
                gp = T.component_input_derivs(i, x + e)[1]
                gm = T.component_input_derivs(i, x - e)[1]
                fd = (T.evaluate_component(i, x + e) - T.evaluate_component(i, x - e)) / (2 * h)
                assert np.allclose(g[:, j], fd, atol=1e-7)
                assert np.allclose(H[:, :, j], (gp - gm) / (2 * h), atol=1e-6)

    def test_shape_check(self):
        with pytest.raises(ValueError):
            MonotoneTriangularMap.identity(2).evaluate(np.zeros((3, 3)))

    def test_serialization_round_trip(self):
        T = random_map(3, 5, 0.5, BasisSpec(order=2, o_int=9, damping=0.25))
        back = map_from_text(map_to_text(T))
        assert back == T and back.basis == T.basis

    def test_bad_serialization(self):
        with pytest.raises(ValueError):
            map_from_text("something else\n")
        text = map_to_text(MonotoneTriangularMap.identity(1)).replace("b 0 4", "b 0 5")
        with pytest.raises(ValueError):
            map_from_text(text)


class TestPermutation:
    def test_involution(self):
        T = random_map(3, 1, 0.3)
        x = make_rng(5).standard_normal((20, 3))
        twice = permute_conjugate(permute_conjugate(T))
        assert np.allclose(twice.evaluate(x), T.evaluate(x), atol=0)

    def test_identity(self):
        x = make_rng(6).standard_normal((20, 3))
        assert np.allclose(permute_conjugate(MonotoneTriangularMap.identity(3)).evaluate(x), x, atol=1e-14)

    def test_pushforward_consistency(self):
        T = random_map(2, 2, 0.3)
        z = make_rng(7).standard_normal((100, 2))
        assert np.array_equal(permute_conjugate(T).evaluate(z[:, ::-1]), T.evaluate(z)[:, ::-1])

    def test_permuted_target(self):
        tgt = gaussian_target([1.0, -1.0, 0.5], np.diag([1.0, 2.0, 3.0]))
        perm = (0, 2, 1)
        pt = permuted_target(tgt, perm)
        z = make_rng(8).standard_normal((4, 3))
        x = z[:, np.argsort(perm)]
        assert np.allclose(pt.log_unnormalized(z), tgt.log_unnormalized(x))


class TestObjective:
    def test_zero_at_base(self):
        v = kl_objective(MonotoneTriangularMap.identity(2), gaussian_target([0, 0], np.eye(2)), gauss_hermite(2, 5))
        assert abs(v) < 1e-10

    def test_zero_at_exact_affine_map(self):
        T = MonotoneTriangularMap.affine_1d(1.0, 2.0)
        v, g, _ = kl_objective(T, gaussian_target([1.0], [[4.0]]), gauss_hermite(1, 5), derivatives=True)
        assert abs(v) < 1e-6
        assert np.max(np.abs(g)) < 1e-10

    @given(st.integers(0, 10**6))
    @settings(max_examples=20, deadline=None)
    def test_nonnegative_for_normalized_target(self, seed):
        T = random_map(1, seed, 0.05)
        v = kl_objective(T, gaussian_target([0.3], [[1.7]]), gauss_hermite(1, 40))
        assert v > -1e-8

    @pytest.mark.parametrize("builder", ["gaussian", "lag1-first", "lag1", "fixedpoint-first", "fixedpoint"])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradient_and_hessian_vs_finite_differences(self, builder, seed, lg_obs):
        if builder == "gaussian":
            tgt = gaussian_target([0.5, -0.3], [[2.0, 0.4], [0.4, 1.0]])
        elif builder == "lag1-first":
            tgt = build_lag1_target(SV, None, 0.4, y_first=-0.2)
        elif builder == "lag1":
            tgt = build_lag1_target(SV, random_map(1, seed + 10, 0.2), 0.7)
        elif builder == "fixedpoint-first":
            tgt = build_fixedpoint_target(SV, None, 0.5, y_prev=-0.3)
        else:
            tgt = build_fixedpoint_target(SV, random_map(2, seed + 20, 0.2), 0.9)
        quad = gauss_hermite(tgt.dim, 4)
        T = well_conditioned_map(tgt.dim, seed, quad.nodes)
        obj = KLObjective(T, tgt, quad)
        theta = T.params
        _, g, H = obj.value_grad_hess(theta)
        assert_rel_close(g, fd_gradient(obj.value, theta), 1e-5)
        Hfd = np.array([fd_gradient(lambda t: obj.value_grad_hess(t)[1][k], theta) for k in range(len(theta))])
        assert np.allclose(H, Hfd, atol=1e-5 * max(1.0, np.max(np.abs(H))))

    def test_non_finite_target_names_node(self):
        def derivs(x):
            v = np.where(x[:, 0] > 2, -np.inf, -0.5 * x[:, 0] ** 2)
            return v, -x[:, :1], -np.ones((len(x), 1, 1))

        from mlsmooth.transport import TargetDensity

        with pytest.raises(NonFiniteTargetError) as exc:
            kl_objective(MonotoneTriangularMap.identity(1), TargetDensity(1, derivs), gauss_hermite(1, 5), True)
        assert exc.value.node_index == 4 and "node 4" in str(exc.value)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            KLObjective(MonotoneTriangularMap.identity(2), gaussian_target([0.0], [[1.0]]), gauss_hermite(2, 3))


class TestOptimizer:
    def test_gaussian_affine_optimum(self):
        res = optimize_map(MonotoneTriangularMap.identity(1), gaussian_target([1.0], [[4.0]]), gauss_hermite(1, 5), 1e-8)
        T = res.map
        target = MonotoneTriangularMap.affine_1d(1.0, 2.0)
        assert np.max(np.abs(T.params - target.params)) < 1e-3 or np.max(np.abs(T.params + np.r_[0, 0, 0, 0, 0] - target.params)) < 1e-3
        x = np.linspace(-3, 3, 7)
        assert np.allclose(T.evaluate_component(0, x), 1 + 2 * x, atol=1e-3)

    def test_identity_target_needs_no_iterations(self):
        res = optimize_map(MonotoneTriangularMap.identity(2), gaussian_target([0, 0], np.eye(2)), gauss_hermite(2, 5))
        assert res.converged and res.iterations <= 1

    def test_iteration_cap(self):
        tgt = build_lag1_target(SV, None, 2.0, y_first=-1.5)
        with pytest.raises(NonConvergenceError) as exc:
            optimize_map(MonotoneTriangularMap.identity(2), tgt, gauss_hermite(2, 5), 1e-12, NewtonConfig(max_iter=1))
        assert exc.value.result.grad_norm > 1e-12 and exc.value.result.iterations == 1

    def test_monotone_after_optimization(self, lag1_results):
        probes = make_rng(9).standard_normal((10_000, 2)) * 3
        for res in lag1_results:
            assert res.grad_norm < 1e-4
            assert np.all(res.map.diag_derivative(probes) > 0)

    def test_sv_lag1_monotone(self):
        _, obs = simulate(SV, 5, 2024)
        for res in lag1_maps(SV, obs, 3):
            assert res.converged
            assert np.all(res.map.diag_derivative(make_rng(1).standard_normal((10_000, 2)) * 3) > 0)


class TestTargets:
    def test_first_lag1_hessian(self):
        tgt = build_lag1_target(LG, None, 0.5)
        a, b, t, s0 = PARAMS.alpha, PARAMS.beta, PARAMS.tau, PARAMS.sigma0
        expected = np.array([[-1 / s0**2 - a * a / b**2, a / b**2], [a / b**2, -1 / b**2 - 1 / t**2]])
        _, _, H = tgt.derivs(make_rng(0).standard_normal((3, 2)))
        assert np.allclose(H, expected)

    def test_lag1_with_flat_likelihood(self):
        import dataclasses

        flat = dataclasses.replace(LG, obs_logpdf=lambda x, y: np.zeros(np.shape(x)), obs_derivs=lambda x, y: (np.zeros(np.shape(x)), np.zeros(np.shape(x))))
        T1 = MonotoneTriangularMap.affine_1d(0.5, 1.5)
        x = make_rng(1).standard_normal((10, 2))
        v = build_lag1_target(flat, T1, 0.0).log_unnormalized(x)
        u = 0.5 + 1.5 * x[:, 0]
        expected = -0.5 * math.log(2 * math.pi) - 0.5 * x[:, 0] ** 2 + LG.trans_logpdf(u, x[:, 1])
        assert np.allclose(v, expected)

    def test_finite_at_nodes(self, lg_obs, lag1_results):
        quad = gauss_hermite(2, 5)
        for p in range(1, 4):
            tgt = build_lag1_target(LG, leading(lag1_results[p - 1].map, 1), lg_obs.at(p + 1))
            assert np.all(np.isfinite(tgt.log_unnormalized(quad.nodes)))

    def test_fixed_point_first_at_origin(self):
        y1, y2 = 0.4, -0.8
        v = build_fixedpoint_target(LG, None, y2, y_prev=y1).log_unnormalized(np.zeros((1, 3)))[0]
        c = -0.5 * math.log(2 * math.pi)
        hand = (c - math.log(2.0) - 0.5 * (0 - 1) ** 2 / 4) + 2 * c + (c - 0.5 * y1**2) + (c - 0.5 * y2**2)
        assert v == pytest.approx(hand, abs=1e-14)

    def test_fixed_point_first_needs_y1(self):
        with pytest.raises(ValueError):
            build_fixedpoint_target(LG, None, 0.1)


class TestComposition:
    def test_identity(self):
        I = MonotoneTriangularMap.identity(1)
        M, rms, _ = compose_and_reapproximate(I, I)
        assert rms < 1e-14
        assert np.allclose(M.params, I.params, atol=1e-12)

    def test_affine(self):
        A = MonotoneTriangularMap.affine_1d(0.5, 2.0)
        B = MonotoneTriangularMap.affine_1d(-1.0, 0.7)
        M, rms, _ = compose_and_reapproximate(A, B)
        x = np.linspace(-4, 4, 17)
        assert rms < 1e-10
        assert np.allclose(M.evaluate_component(0, x), 0.5 + 2.0 * (-1.0 + 0.7 * x), atol=1e-9)

    def test_residual_falls_with_order(self):
        residuals = []
        for order in (1, 2, 3, 4):
            basis = BasisSpec(order=order)
            I = MonotoneTriangularMap.identity(1, basis)
            b = np.zeros(len(I.coeffs_b[0]))
            b[0], b[1] = 1.0, 0.3
            nl = MonotoneTriangularMap(1, basis, [np.array([0.1])], [b])
            residuals.append(compose_and_reapproximate(nl, nl)[1])
        assert all(r1 > r2 for r1, r2 in zip(residuals, residuals[1:]))

    def test_rejects_multivariate(self):
        with pytest.raises(ValueError):
            compose_and_reapproximate(MonotoneTriangularMap.identity(2), MonotoneTriangularMap.identity(1))


class TestLag1:
    def test_pushforward_moments(self, lg_obs, lag1_results):
        # the law of (X_p, X_{p+1}) given y_{0:p+1}
        z = make_rng(10).standard_normal((100_000, 2))
        for p in (0, 3):
            xs = lag1_pushforward(lag1_results, p, z)
            mean, cov = lag_one_joint(PARAMS, lg_obs, p)
            se_mean = np.sqrt(np.diag(cov) / len(z))
            assert np.all(np.abs(xs.mean(0) - mean) < 3 * se_mean)
            emp = np.cov(xs.T)
            se_cov = np.sqrt((cov**2 + np.outer(np.diag(cov), np.diag(cov))) / len(z))
            assert np.all(np.abs(emp - cov) < 3 * se_cov)


@pytest.fixture(scope="module")
def pairs(lg_obs):
    return fixed_point_maps(LG, lg_obs.from_time(1), 8)


class TestFixedPoint:
    def test_matches_kalman(self, pairs, lg_obs):
        obs1 = lg_obs.from_time(1)
        mom = fixed_point_moments(PARAMS, obs1, 9)
        q = gauss_hermite(1, 30)
        for pr in pairs:
            x = pr.sample_x0(q.nodes[:, 0])
            mean = q.weights @ x
            var = q.weights @ (x - mean) ** 2
            m, v = mom.at(pr.p + 1)
            assert mean == pytest.approx(m, abs=1e-4)
            assert var == pytest.approx(v, abs=1e-4)
            assert pr.residual < 1e-6 and pr.grad_norm < 1e-4

    def test_joint_sampling(self, pairs):
        z = make_rng(11).standard_normal((5, 2))
        xy = pairs[2].sample_joint(z)
        assert np.array_equal(xy[:, 0], pairs[2].sample_x0(z[:, 0]))

    def test_x0_maps_monotone(self, pairs):
        probes = make_rng(12).standard_normal(10_000) * 4
        for pr in pairs:
            assert np.all(pr.t_x0.diag_derivative(probes[:, None]) > 0)

    def test_increment_variance_vs_exact_coupling(self, pairs, lg_obs):
        mom = fixed_point_moments(PARAMS, lg_obs.from_time(1), 9)
        z = make_rng(13).standard_normal(100_000)
        for p in (2, 3, 4):
            a, b = coupled_sample_pair(pairs[p - 1], pairs[p - 2], z)
            exact = (math.sqrt(mom.var[p + 1]) - math.sqrt(mom.var[p])) ** 2
            assert 0.5 < np.var(a - b) / exact < 2.0

    def test_same_pair_zero_increment(self, pairs):
        z = make_rng(14).standard_normal(100)
        a, b = coupled_sample_pair(pairs[3], pairs[3], z)
        assert np.all(a == b)

    def test_shifted_pair(self):
        I = MonotoneTriangularMap.identity(3)
        mk = lambda shift: FixedPointMapPair(1, MonotoneTriangularMap.affine_1d(shift, 1.3), leading(I, 2), I, 0.0, 0, 0.0, 0.0)
        z = make_rng(15).standard_normal(50)
        a, b = coupled_sample_pair(mk(0.75), mk(0.25), z)
        assert np.allclose(a - b, 0.5, atol=1e-14)

    def test_estimator_cost(self, pairs):
        s = make_schedule(0.1, n_cap=8)
        rep = multilevel_transport_estimate(pairs, s, lambda x: x, make_rng(0))
        ops = pairs[0].t_x0.ops_per_eval
        assert ops == 49
        n = s.n_star
        assert rep.cost_ops == n + ops * (s.n_samples[1] + 2 * sum(s.n_samples[2 : n + 1]))
        assert rep.setup_ops == sum(pr.ops for pr in pairs[:n])

    def test_estimator_needs_maps(self, pairs):
        with pytest.raises(ValueError):
            multilevel_transport_estimate(pairs[:2], make_schedule(0.01), lambda x: x, make_rng(0))

    def test_data_requirement(self, lg_obs):
        with pytest.raises(ValueError):
            fixed_point_maps(LG, lg_obs.from_time(1).upto(3), 5)

    def test_reapproximation_warning(self, lg_obs):
        cfg = TransportConfig(residual_warn=-1.0)
        with pytest.warns(Warning):
            fixed_point_maps(LG, lg_obs.from_time(1), 2, cfg)


def test_gauss_hermite_exactness():
    q = gauss_hermite(2, 4)
    assert q.weights.sum() == pytest.approx(1.0, abs=1e-14) and np.all(q.weights > 0)
    # E[x^6] = 15 and E[x^7 y^4] = 0 are within degree 2*4-1
    assert q.weights @ q.nodes[:, 0] ** 6 == pytest.approx(15.0, abs=1e-11)
    assert q.weights @ (q.nodes[:, 0] ** 2 * q.nodes[:, 1] ** 4) == pytest.approx(3.0, abs=1e-12)
    c, w = gauss_legendre_unit(12)
    assert w.sum() == pytest.approx(1.0) and np.all((c > 0) & (c < 1))
