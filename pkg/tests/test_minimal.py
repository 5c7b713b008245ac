import numpy as np
import pytest

from conemin import harmonic as hm
from conemin import minimal
from conemin import surface as sf
from conemin import teich
from conemin.errors import GeometryError


@pytest.fixture(scope="module")
def diagonal_graph():
    g1, _ = sf.build_torus_pair(0.25, 0.40, 0.35, m=6)
    state = teich.ConformalState(g1, np.zeros(g1.n_vertices))
    oracle = teich.EnergyOracle(g1, g1, g1, inner_tol=1e-10)
    ev = oracle.evaluate(state)
    pg = minimal.assemble(state.surface(), g1, g1, ev.u1, ev.u2,
                          geom1=ev.geom1, geom2=ev.geom2)
    return state, pg


@pytest.fixture(scope="module")
def converged_graph():
    g1, g2 = sf.build_torus_pair(0.25, 0.40, 0.35, m=6)
    state0 = teich.ConformalState(g1, np.zeros(g1.n_vertices))
    res = teich.descend(state0, g1, g2, outer_tol=5e-4, rel_tol=1e-6,
                        max_iters=300, inner_tol=1e-10)
    pg = minimal.assemble(res.state.surface(), g1, g2, res.ev.u1, res.ev.u2,
                          geom1=res.ev.geom1, geom2=res.ev.geom2)
    return res, pg


class TestDiagonal:
    def test_induced_metric_is_scaled(self, diagonal_graph):
        # u1 = u2 on the diagonal: induced lengths are sqrt(2) the domain's
        # (up to the O(h^2) defect of the identity as a discrete fixed point)
        state, pg = diagonal_graph
        h = float(state.surface().lengths.max())
        ratio = pg.induced_lengths / state.surface().lengths
        assert np.allclose(ratio, np.sqrt(2.0), atol=0.3 * h * h)

    def test_gap_tiny(self, diagonal_graph):
        # on the torus the identity is only an O(h^2) fixed point, so the
        # diagonal gap floors at the squared field noise
        state, pg = diagonal_graph
        h = float(state.surface().lengths.max())
        gap = minimal.area_energy_gap(pg)
        assert gap["gap"] >= -1e-12
        assert gap["gap"] <= h ** 3 * gap["energy"]

    def test_exact_diagonal_gap_on_annulus(self):
        # the ring-balanced annulus makes the identity exactly critical:
        # the diagonal graph there is exactly conformal
        ann = sf.build_cone_annulus(0.3, 1.0, 0.25)
        vid = hm.identity_map(ann, ann)
        vm1, _ = hm.solve_harmonic(ann, ann, vid, tol=1e-11)
        vm2, _ = hm.solve_harmonic(ann, ann, vid, tol=1e-11)
        pg = minimal.assemble(ann, ann, ann, vm1, vm2)
        gap = minimal.area_energy_gap(pg)
        assert gap["gap"] >= -1e-12
        assert gap["gap"] <= 1e-8 * gap["energy"]
        cert = minimal.conformality_certificate(pg)
        assert cert["max_hopf_sum"] < 1e-10

    def test_certificate_small(self, diagonal_graph):
        state, pg = diagonal_graph
        h = float(state.surface().lengths.max())
        cert = minimal.conformality_certificate(pg)
        assert cert["max_hopf_sum"] < 0.5 * h * h

    def test_stability_strictly_positive(self, diagonal_graph):
        _, pg = diagonal_graph
        rep = minimal.stability_suite(pg, n_samples=10, seed=1)
        assert all(s["A_second"] > 0 for s in rep.second_variation_samples)

    def test_psi_is_identity(self, diagonal_graph):
        # u2 o u1^{-1} on the diagonal fixes every vertex
        _, pg = diagonal_graph
        for x in range(0, pg.g1.n_vertices, 5):
            tri = [int(v) for v in pg.g1.faces[pg.psi.face[x]]]
            k = int(np.argmax(pg.psi.bary[x]))
            assert tri[k] == x
            assert pg.psi.bary[x].max() > 1.0 - 1e-6


class TestConvergedGraph:
    def test_area_le_energy(self, converged_graph):
        _, pg = converged_graph
        gap = minimal.area_energy_gap(pg)
        assert gap["gap"] >= -1e-12
        assert gap["area"] <= gap["energy"]

    def test_area_vs_factors(self, converged_graph):
        # Area(induced) at least the larger factor area, up to mesh slack
        _, pg = converged_graph
        a = minimal.graph_area_euclid(pg)
        amax = max(pg.g1.total_area(), pg.g2.total_area())
        h = float(pg.domain.lengths.max())
        assert a >= amax - 10 * h * h * amax

    def test_composition_consistency(self, converged_graph):
        _, pg = converged_graph
        assert minimal.composition_residual(pg) < 1e-10

    def test_maximum_principle_inequalities(self, converged_graph):
        _, pg = converged_graph
        rep = minimal.stability_suite(pg, n_samples=5, seed=2)
        assert rep.hypothesis_met
        assert rep.w_violation_fraction <= 0.01
        assert rep.e_violation_fraction <= 0.01

    def test_second_variation_nonnegative(self, converged_graph):
        _, pg = converged_graph
        rep = minimal.stability_suite(pg, n_samples=20, seed=3)
        eps = rep.eps_h
        for s in rep.second_variation_samples:
            assert s["A_second"] >= -eps * s["psi_norm2"]

    def test_negative_control(self, converged_graph):
        # a random non-critical state must show a distinctly larger defect
        res, pg = converged_graph
        g1, g2 = pg.g1, pg.g2
        rng = np.random.default_rng(7)
        noisy = teich.ConformalState(
            g1, 0.08 * rng.standard_normal(g1.n_vertices)).gauge_fixed()
        while not noisy.feasible(noisy.phi):
            noisy = teich.ConformalState(g1, 0.5 * noisy.phi)
        oracle = teich.EnergyOracle(g1, g1, g2, inner_tol=1e-9)
        ev = oracle.evaluate(noisy)
        pg_bad = minimal.assemble(noisy.surface(), g1, g2, ev.u1, ev.u2,
                                  geom1=ev.geom1, geom2=ev.geom2)
        cert_bad = minimal.conformality_certificate(pg_bad)
        cert_ok = minimal.conformality_certificate(pg)
        assert cert_bad["gap"] > 2.0 * cert_ok["gap"]

    def test_not_a_graph_error(self, converged_graph):
        res, pg = converged_graph
        broken = pg.u1.copy()
        free = np.nonzero(~broken.pinned)[0]
        # collapse several vertices onto one image point: some face flips
        target = (int(broken.face[free[0]]), broken.bary[free[0]].copy())
        for v in free[:8]:
            broken.face[v] = target[0]
            broken.bary[v] = target[1]
        with pytest.raises(GeometryError):
            minimal.assemble(pg.domain, pg.g1, pg.g2, broken, pg.u2)


class TestIntegrand:
    def test_negative_discriminant_raises(self, diagonal_graph):
        _, pg = diagonal_graph
        bad = minimal.ProductGraph(pg.domain, pg.g1, pg.g2, pg.u1, pg.u2,
                                   dict(pg.fields1), dict(pg.fields2),
                                   pg.induced_lengths, pg.psi,
                                   pg.geom1, pg.geom2)
        bad.fields1 = dict(pg.fields1)
        bad.fields1["phi"] = pg.fields1["phi"] + 10.0
        bad.fields1["energy_density"] = 0.0 * pg.fields1["energy_density"]
        bad.fields2 = dict(pg.fields2)
        bad.fields2["phi"] = 0.0 * pg.fields2["phi"]
        bad.fields2["energy_density"] = 0.0 * pg.fields2["energy_density"]
        with pytest.raises(GeometryError):
            minimal.area_energy_gap(bad)
