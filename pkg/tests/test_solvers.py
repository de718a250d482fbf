import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_layer
from memedit.memory import GeometryConfig, LayerMemory, forward, gen_model, random_projector
from memedit.solvers import (SingularGeometryError, allocate_residual, apply_updates, edit_objective,
                             edit_objective_grad, sherman_morrison_inv, solve_closed_form,
                             solve_gradient_oracle, solve_layer, solve_multilayer, solve_projection)

# Exact rational answer for C=[[2,1,0],[1,3,1],[0,1,4]], ridge=1/2, k=(1,-1,2), delta=(3,-1),
# worked by fraction-arithmetic Gauss-Jordan elimination.
RATIONAL_GAMMA = 640 / 259
RATIONAL_BETA = 640 / 899
RATIONAL_DELTA = np.array([[510, -498, 456], [-170, 166, -152]]) / 899


class TestClosedForm:
    def test_rank_one_identity_geometry(self):
        layer = LayerMemory(np.zeros((2, 2)), [1.0, 0.0], np.zeros((2, 2)), ridge=1.0)
        res = solve_closed_form(layer, np.array([2.0, 4.0]))
        np.testing.assert_allclose(res.delta, [[1, 0], [2, 0]], atol=1e-15)
        assert res.gamma == pytest.approx(1.0, abs=1e-15)
        assert res.beta == pytest.approx(0.5, abs=1e-15)
        np.testing.assert_allclose(res.realized_residual, [1, 2], atol=1e-15)

    def test_diagonal_covariance(self):
        layer = LayerMemory(np.zeros((3, 2)), [1.0, 0.0], np.diag([3.0, 0.0]), ridge=1.0)
        delta = np.array([1.0, -2.0, 5.0])
        res = solve_closed_form(layer, delta)
        assert res.gamma == pytest.approx(0.25, abs=1e-15)
        assert res.beta == pytest.approx(0.2, abs=1e-15)
        np.testing.assert_allclose(res.realized_residual, 0.2 * delta, atol=1e-14)

    def test_rational_instance(self):
        C = np.array([[2.0, 1, 0], [1, 3, 1], [0, 1, 4]])
        layer = LayerMemory(np.zeros((2, 3)), [1.0, -1.0, 2.0], C, ridge=0.5)
        res = solve_closed_form(layer, np.array([3.0, -1.0]))
        assert res.gamma == pytest.approx(RATIONAL_GAMMA, rel=1e-13)
        assert res.beta == pytest.approx(RATIONAL_BETA, rel=1e-13)
        np.testing.assert_allclose(res.delta, RATIONAL_DELTA, rtol=1e-13)

    def test_singular_geometry_is_an_error(self):
        layer = LayerMemory(np.zeros((2, 2)), [0.0, 1.0], np.diag([1.0, 0.0]), ridge=0.0)
        with pytest.raises(SingularGeometryError):
            solve_closed_form(layer, np.ones(2))

    def test_wrong_residual_shape(self):
        layer = LayerMemory(np.zeros((2, 2)), [1.0, 0.0], np.eye(2), ridge=1.0)
        with pytest.raises(ValueError):
            solve_closed_form(layer, np.ones(3))

    @given(seed=st.integers(0, 2**32 - 1))
    def test_attenuation_law(self, seed):
        rng = np.random.default_rng(seed)
        layer = random_layer(rng)
        delta = rng.standard_normal(layer.d1)
        res = solve_closed_form(layer, delta)
        assert 0.0 <= res.beta < 1.0
        assert res.beta == pytest.approx(res.gamma / (1 + res.gamma), abs=1e-12)
        assert np.linalg.norm(res.realized_residual - res.beta * delta) <= 1e-8 * np.linalg.norm(delta)
        cos = res.realized_residual @ delta / (np.linalg.norm(res.realized_residual) * np.linalg.norm(delta))
        assert cos == pytest.approx(1.0, abs=1e-9)

    @given(seed=st.integers(0, 2**32 - 1))
    def test_matches_dense_inverse(self, seed):
        rng = np.random.default_rng(seed)
        layer = random_layer(rng, d0=int(rng.integers(1, 12)))
        delta = rng.standard_normal(layer.d1)
        A = layer.covariance + layer.ridge * np.eye(layer.d0) + np.outer(layer.key, layer.key)
        expected = np.outer(delta, layer.key @ np.linalg.inv(A))
        res = solve_closed_form(layer, delta)
        np.testing.assert_allclose(res.delta, expected, rtol=1e-8, atol=1e-10)

    def test_zero_gradient_at_solution(self, rng):
        layer = random_layer(rng, d0=9, d1=5)
        delta = rng.standard_normal(5)
        G = edit_objective_grad(solve_closed_form(layer, delta).delta, layer, delta)
        assert np.linalg.norm(G) < 1e-9

    def test_suppression_monotone_in_eigenvalue_scale(self, rng):
        Q = np.linalg.qr(rng.standard_normal((6, 6)))[0]
        spectrum = np.array([50.0, 40.0, 3.0, 2.0, 1.0, 0.5])
        k = Q[:, :2] @ np.array([0.6, 0.8])
        betas = []
        for c in (1.0, 2.0, 10.0, 100.0):
            s = spectrum.copy()
            s[:2] *= c
            layer = LayerMemory(np.zeros((1, 6)), k, (Q * s) @ Q.T, 0.1)
            betas.append(solve_closed_form(layer, np.ones(1)).beta)
        assert all(b < a for a, b in zip(betas, betas[1:]))


class TestGradientOracle:
    def test_agrees_with_hand_solution(self):
        layer = LayerMemory(np.zeros((2, 2)), [1.0, 0.0], np.zeros((2, 2)), ridge=1.0)
        D = solve_gradient_oracle(layer, np.array([2.0, 4.0]), tol=1e-9)
        assert np.linalg.norm(D - [[1, 0], [2, 0]]) < 1e-6

    def test_zero_residual(self, rng):
        layer = random_layer(rng, d0=4, d1=3)
        np.testing.assert_array_equal(solve_gradient_oracle(layer, np.zeros(3), tol=1e-9), 0.0)

    def test_rejects_bad_tol(self, rng):
        with pytest.raises(ValueError):
            solve_gradient_oracle(random_layer(rng, d0=2, d1=2), np.ones(2), tol=0.0)

    def test_gradient_matches_finite_differences(self, rng):
        for _ in range(20):
            layer = random_layer(rng, d0=int(rng.integers(1, 8)), d1=int(rng.integers(1, 8)))
            delta = rng.standard_normal(layer.d1)
            D = rng.standard_normal((layer.d1, layer.d0))
            G = edit_objective_grad(D, layer, delta)
            G_fd = np.zeros_like(D)
            h = 1e-5
            for idx in np.ndindex(*D.shape):
                E = np.zeros_like(D)
                E[idx] = h
                G_fd[idx] = (edit_objective(D + E, layer, delta) - edit_objective(D - E, layer, delta)) / (2 * h)
            assert np.linalg.norm(G - G_fd) <= 1e-6 * np.linalg.norm(G_fd)

    def test_closed_form_no_worse_than_oracle(self, rng):
        for _ in range(10):
            layer = random_layer(rng, d0=int(rng.integers(1, 10)), d1=int(rng.integers(1, 10)))
            delta = rng.standard_normal(layer.d1)
            D_cf = solve_closed_form(layer, delta).delta
            D_gd = solve_gradient_oracle(layer, delta, tol=1e-9)
            assert edit_objective(D_cf, layer, delta) <= edit_objective(D_gd, layer, delta) + 1e-6
            assert np.linalg.norm(D_cf - D_gd) < 1e-4


class TestShermanMorrison:
    def test_diagonal_update(self):
        out = sherman_morrison_inv(np.eye(2) / 2, np.array([1.0, 0.0]))
        np.testing.assert_allclose(out, np.diag([1 / 3, 1 / 2]), atol=1e-15)

    def test_zero_update(self, rng):
        B = np.linalg.inv(np.eye(4) + np.diag(rng.uniform(size=4)))
        np.testing.assert_allclose(sherman_morrison_inv(B, np.zeros(4)), B, atol=1e-15)

    def test_matches_dense(self, rng):
        G = rng.standard_normal((16, 16))
        A = G @ G.T + np.eye(16)
        k = rng.standard_normal(16)
        direct = np.linalg.inv(A + np.outer(k, k))
        sm = sherman_morrison_inv(np.linalg.inv(A), k)
        assert np.linalg.norm(sm - direct) <= 1e-9 * np.linalg.norm(direct)

    def test_near_singular_denominator(self):
        with pytest.raises(ValueError):
            sherman_morrison_inv(-np.eye(2), np.array([1.0, 0.0]))


class TestProjection:
    def test_full_projector_matches_ridge_case(self):
        delta = np.array([2.0, 4.0])
        proj = LayerMemory(np.zeros((2, 2)), [1.0, 0.0], np.zeros((2, 2)), 1.0, np.eye(2))
        plain = LayerMemory(np.zeros((2, 2)), [1.0, 0.0], np.zeros((2, 2)), 1.0)
        a, b = solve_projection(proj, delta), solve_closed_form(plain, delta)
        assert a.beta == pytest.approx(0.5, abs=1e-15)
        assert np.linalg.norm(a.delta - b.delta) <= 1e-10

    def test_partial_projector(self):
        layer = LayerMemory(np.zeros((2, 2)), [0.6, 0.8], np.zeros((2, 2)), 1.0, np.diag([1.0, 0.0]))
        delta = np.array([1.0, -3.0])
        res = solve_projection(layer, delta)
        assert res.beta == pytest.approx(0.36 / 1.36, abs=1e-12)
        np.testing.assert_allclose(res.delta @ layer.projector @ layer.key, res.beta * delta, atol=1e-12)

    def test_null_projector(self):
        layer = LayerMemory(np.zeros((2, 2)), [0.6, 0.8], np.zeros((2, 2)), 1.0, np.zeros((2, 2)))
        res = solve_projection(layer, np.array([1.0, 1.0]))
        assert res.beta == 0.0
        np.testing.assert_array_equal(res.delta @ layer.key, 0.0)

    def test_missing_projector(self):
        with pytest.raises(ValueError):
            solve_projection(LayerMemory(np.zeros((2, 2)), [1.0, 0.0], np.eye(2), 1.0), np.ones(2))

    def test_needs_positive_ridge(self):
        layer = LayerMemory(np.zeros((2, 2)), [1.0, 0.0], np.eye(2), 0.0, np.eye(2))
        with pytest.raises(SingularGeometryError):
            solve_projection(layer, np.ones(2))

    @given(seed=st.integers(0, 2**32 - 1))
    def test_projected_attenuation(self, seed):
        rng = np.random.default_rng(seed)
        d0, d1 = int(rng.integers(1, 16)), int(rng.integers(1, 16))
        P = random_projector(rng, d0, int(rng.integers(0, d0 + 1)))
        lam = float(rng.choice([0.1, 1.0, 10.0]))
        layer = LayerMemory(np.zeros((d1, d0)), rng.standard_normal(d0), np.zeros((d0, d0)), lam, P)
        delta = rng.standard_normal(d1)
        res = solve_projection(layer, delta)
        pk = P @ layer.key
        beta = pk @ pk / (pk @ pk + lam)
        assert np.linalg.norm(res.delta @ P @ layer.key - beta * delta) <= 1e-8 * np.linalg.norm(delta)
        # executed update never touches the projector's null space
        np.testing.assert_allclose(res.delta @ (np.eye(d0) - P), 0.0, atol=1e-12)

    def test_dispatch(self):
        layer = LayerMemory(np.zeros((2, 2)), [0.6, 0.8], np.eye(2), 1.0, np.diag([1.0, 0.0]))
        assert solve_layer(layer, np.ones(2)).beta == pytest.approx(0.36 / 1.36)


class TestMultilayer:
    def _model(self, n=3, **kw):
        return gen_model(GeometryConfig(d0=6, d1=4, V=3, n_layers=n, **kw))

    def test_single_layer_absorbs_everything(self):
        model = self._model()
        v = np.arange(4.0)
        plan = allocate_residual(model, v, [model.L])
        np.testing.assert_allclose(plan.layer_targets[model.L], v, atol=1e-12)

    def test_zero_residual(self):
        model = self._model()
        v = model.layers[-1].weight @ model.layers[-1].key
        plan = allocate_residual(model, v)
        for l, t in plan.layer_targets.items():
            np.testing.assert_array_equal(t, model.layers[l].weight @ model.layers[l].key)

    def test_four_layer_split(self):
        model = gen_model(GeometryConfig(d0=3, d1=2, V=2, n_layers=4))
        base = model.layers[-1].weight @ model.layers[-1].key
        plan = allocate_residual(model, base + np.array([4.0, 8.0]))
        offsets = [plan.layer_targets[l] - model.layers[l].weight @ model.layers[l].key for l in range(4)]
        for off in offsets:
            np.testing.assert_allclose(off, [1.0, 2.0], atol=1e-12)
        np.testing.assert_allclose(np.sum(offsets, axis=0), [4.0, 8.0], atol=1e-12)

    def test_concentrated_split(self):
        model = self._model()
        base = model.layers[-1].weight @ model.layers[-1].key
        plan = allocate_residual(model, base + 1.0, scheme="last")
        np.testing.assert_allclose(plan.layer_targets[model.L], base + 1.0)
        np.testing.assert_array_equal(plan.layer_targets[0], model.layers[0].weight @ model.layers[0].key)

    @pytest.mark.parametrize("edit_set", [[], [0, 1]])
    def test_rejects_bad_edit_set(self, edit_set):
        with pytest.raises(ValueError):
            allocate_residual(self._model(), np.zeros(4), edit_set)

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            allocate_residual(self._model(), np.zeros(4), scheme="greedy")

    def test_zero_drift_equal_betas(self):
        model = self._model()
        res = solve_multilayer(model, allocate_residual(model, np.ones(4)))
        betas = [r.beta for r in res.values()]
        assert max(betas) - min(betas) <= 1e-10

    def test_single_layer_stack(self):
        model = self._model(n=1)
        layer = model.layers[0]
        v = np.ones(4)
        res = solve_multilayer(model, allocate_residual(model, v))[0]
        ref = solve_closed_form(layer, v - layer.weight @ layer.key)
        np.testing.assert_allclose(res.delta, ref.delta, atol=1e-15)

    def test_forward_residual_composes(self, rng):
        model = self._model(eps_C=0.1, eps_k=0.05)
        k = model.layers[-1].key
        targets = {l: model.layers[l].weight @ model.layers[l].key + rng.standard_normal(4) for l in range(3)}
        from memedit.solvers import AllocationPlan
        res = solve_multilayer(model, AllocationPlan(targets))
        overrides = apply_updates(model, res)
        from memedit.memory import hidden_state
        moved = hidden_state(model, k, overrides) - hidden_state(model, k)
        # each layer reads the shared input key, so layer l contributes D_l k
        expected = sum(res[l].delta @ k for l in range(3))
        np.testing.assert_allclose(moved, expected, atol=1e-10)
        # at each layer's own key, the realized residual follows the attenuation law
        for l in range(3):
            layer = model.layers[l]
            np.testing.assert_allclose(res[l].delta @ layer.key,
                                       res[l].beta * (targets[l] - layer.weight @ layer.key), atol=1e-8)
        # zero drift: forward residual equals the beta-weighted sum
        flat = self._model()
        k = flat.layers[-1].key
        targets = {l: flat.layers[l].weight @ k + rng.standard_normal(4) for l in range(3)}
        res = solve_multilayer(flat, AllocationPlan(targets))
        moved = forward(flat, k, apply_updates(flat, res)) - forward(flat, k)
        expected = flat.readout @ sum(res[l].beta * (targets[l] - flat.layers[l].weight @ k) for l in range(3))
        np.testing.assert_allclose(moved, expected, atol=1e-8)
