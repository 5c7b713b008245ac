import numpy as np
import pytest

from conemin import surface as sf
from conemin import teich
from conemin.errors import GeometryError, SolverError


@pytest.fixture(scope="module")
def pair():
    return sf.build_torus_pair(0.25, 0.40, 0.35, m=6)


@pytest.fixture(scope="module")
def base_eval(pair):
    g1, g2 = pair
    state = teich.ConformalState(g1, np.zeros(g1.n_vertices))
    oracle = teich.EnergyOracle(g1, g1, g2, inner_tol=1e-10)
    return state, oracle, oracle.evaluate(state)


class TestConformalState:
    def test_lengths_formula(self, pair):
        g1, _ = pair
        rng = np.random.default_rng(0)
        phi = 0.01 * rng.standard_normal(g1.n_vertices)
        st = teich.ConformalState(g1, phi)
        e = g1.edges
        expect = g1.lengths * np.exp(0.5 * (phi[e[:, 0]] + phi[e[:, 1]]))
        assert np.allclose(st.lengths(), expect, rtol=0, atol=1e-15)

    def test_gauge_fix(self, pair):
        g1, _ = pair
        st = teich.ConformalState(g1, np.full(g1.n_vertices, 0.3))
        assert abs(st.gauge_fixed().phi.sum()) < 1e-12

    def test_json_round_trip(self, pair):
        g1, _ = pair
        rng = np.random.default_rng(1)
        st = teich.ConformalState(g1, 0.01 * rng.standard_normal(g1.n_vertices))
        back = teich.ConformalState.from_json(st.to_json(), g1)
        assert np.array_equal(back.phi, st.phi)


class TestEnergyInvariance:
    def test_global_scaling_exact(self, pair, base_eval):
        # adding a constant to phi rescales all lengths and leaves the
        # cotangent weights, hence the energy, literally unchanged
        g1, g2 = pair
        state, oracle, ev = base_eval
        shifted = state.replaced(state.phi + 0.37)
        ev2 = oracle.evaluate(shifted, keep=False)
        assert abs(ev2.E - ev.E) < 1e-9 * ev.E

    def test_identity_pair_energy(self, pair):
        g1, _ = pair
        state = teich.ConformalState(g1, np.zeros(g1.n_vertices))
        E, u1, u2 = teich.total_energy(state, g1, g1, inner_tol=1e-10)
        # two near-identity maps: E close to twice the area
        assert abs(E - 2 * g1.total_area()) / (2 * g1.total_area()) < 0.02


class TestGradient:
    def test_fd_audit(self, pair):
        g1, g2 = pair
        rows = teich.gradcheck(g1, g1, g2, n_directions=6, eps=1e-5, seed=2,
                               inner_tol=1e-10)
        errs = [r["rel_err"] for r in rows]
        assert sum(e <= 1e-3 for e in errs) >= 5
        assert np.median(errs) < 1e-4

    def test_gradient_orthogonal_to_scaling(self, pair, base_eval):
        # d E(global scaling) = 0 exactly: the partials sum to zero
        state, oracle, ev = base_eval
        geom = teich.StateGeometry(state.surface())
        G = teich.gradient_tensor(ev.fields1, ev.fields2)
        grad_phi, _ = teich.energy_partials(geom, G)
        assert abs(grad_phi.sum()) < 1e-10 * np.abs(grad_phi).sum()

    def test_tensor_trace_free(self, base_eval):
        state, oracle, ev = base_eval
        G = teich.gradient_tensor(ev.fields1, ev.fields2)
        assert np.abs(G[:, 0] + G[:, 2]).max() < 1e-14

    def test_sharp_consistency(self, pair, base_eval):
        # <grad, grad>_WP equals the FD derivative along the sharp direction
        g1, g2 = pair
        state, oracle, ev = base_eval
        direction, grad_phi, sharp, wp_norm = teich.wp_gradient(state, ev)
        eta = sharp / max(np.linalg.norm(sharp), 1e-300)
        analytic = teich.directional_derivative(state, ev, eta)
        eps = 1e-5
        E_up = oracle.evaluate(state.replaced(state.phi + eps * eta),
                               keep=False).E
        E_dn = oracle.evaluate(state.replaced(state.phi - eps * eta),
                               keep=False).E
        fd = (E_up - E_dn) / (2 * eps)
        assert abs(analytic - fd) <= 1e-3 * max(abs(fd), 1e-12)
        inner = float(np.dot(grad_phi, sharp))
        assert abs(inner - wp_norm ** 2) <= 1e-9 * max(inner, 1e-12)


class TestWpPairing:
    def test_positive_definite(self, base_eval):
        state, oracle, ev = base_eval
        geom = teich.StateGeometry(state.surface())
        G = teich.gradient_tensor(ev.fields1, ev.fields2)
        d = teich.direction_from_tensor(geom, G)
        val = teich.wp_pairing(d, d, state)
        assert val > 0
        zero = teich.DeformationDirection(np.zeros_like(d.tensor),
                                          np.zeros_like(d.delta_l))
        assert teich.wp_pairing(zero, zero, state) == 0.0

    def test_bilinear(self, base_eval):
        state, oracle, ev = base_eval
        geom = teich.StateGeometry(state.surface())
        G = teich.gradient_tensor(ev.fields1, ev.fields2)
        a = teich.direction_from_tensor(geom, G)
        b = teich.direction_from_tensor(geom, 2.5 * G)
        lhs = teich.wp_pairing(a, b, state)
        rhs = 2.5 * teich.wp_pairing(a, a, state)
        assert abs(lhs - rhs) < 1e-10 * max(abs(rhs), 1e-12)

    def test_scaling_direction_orthogonal_to_gradient(self, base_eval):
        # the gradient tensor is trace-free, the scaling direction is pure
        # trace: their pairing vanishes identically
        state, oracle, ev = base_eval
        geom = teich.StateGeometry(state.surface())
        G = teich.gradient_tensor(ev.fields1, ev.fields2)
        grad_dir = teich.direction_from_tensor(geom, G)
        scaling = geom.tensor_from_delta_l(state.surface().lengths.copy())
        scal_dir = teich.DeformationDirection(scaling, state.surface().lengths)
        val = teich.wp_pairing(grad_dir, scal_dir, state)
        scale = teich.wp_pairing(grad_dir, grad_dir, state)
        assert abs(val) < 1e-8 * max(scale, 1e-12)


class TestDescent:
    def test_converges_and_monotone(self, pair):
        g1, g2 = pair
        state0 = teich.ConformalState(g1, np.zeros(g1.n_vertices))
        res = teich.descend(state0, g1, g2, outer_tol=5e-4, rel_tol=1e-6,
                            max_iters=300, inner_tol=1e-10)
        assert res.converged
        energies = [r[1] for r in res.trace]
        assert all(energies[i + 1] <= energies[i] + 1e-12
                   for i in range(len(energies) - 1))
        assert res.trace[-1][4] <= 5e-4

    def test_max_iter_error_has_trace(self, pair):
        g1, g2 = pair
        state0 = teich.ConformalState(g1, np.zeros(g1.n_vertices))
        with pytest.raises(SolverError) as err:
            teich.descend(state0, g1, g2, outer_tol=1e-16, rel_tol=1e-16,
                          max_iters=2, inner_tol=1e-8)
        assert err.value.trace is not None

    def test_gradcheck_rejects_breaking_perturbation(self, pair):
        g1, g2 = pair
        state = teich.ConformalState(g1, np.zeros(g1.n_vertices))
        huge = np.full(g1.n_vertices, 40.0)
        huge[0] = -40.0
        assert not state.feasible(huge)


class TestPropernessProbe:
    def test_pinch_path_energy_grows(self, pair):
        g1, g2 = pair
        states = teich.pinch_path(g1, n_states=8)
        assert len(states) >= 4
        out = teich.properness_probe(g1, g2, states, inner_tol=1e-8)
        vals = [r[1] for r in out["rows"] if r[1] is not None]
        tail = vals[len(vals) // 2:]
        assert all(tail[i + 1] > tail[i] for i in range(len(tail) - 1))

    def test_constant_path_constant_energy(self, pair):
        g1, g2 = pair
        st = teich.ConformalState(g1, np.zeros(g1.n_vertices))
        out = teich.properness_probe(g1, g2, [st, st, st], inner_tol=1e-9)
        vals = [r[1] for r in out["rows"]]
        assert max(vals) - min(vals) < 1e-8 * max(vals)
