import numpy as np
import pytest

from conemin import harmonic as hm
from conemin import hypcore as hc
from conemin import radial
from conemin import surface as sf
from conemin.errors import SolverError


@pytest.fixture(scope="module")
def annulus_pair():
    dom = sf.build_cone_annulus(0.3, 1.0, 0.25)
    tgt = sf.build_cone_annulus(0.45, 1.0, 0.25, n_spokes=dom.meta["n_spokes"],
                                n_rings=dom.meta["n_rings"])
    return dom, tgt


@pytest.fixture(scope="module")
def solved_pair(annulus_pair):
    dom, tgt = annulus_pair
    vm, trace = hm.solve_harmonic(dom, tgt, hm.identity_map(dom, tgt), tol=1e-10)
    return dom, tgt, vm, trace


class TestEnergy:
    def test_identity_energy_close_to_area(self):
        s = sf.build_cone_torus(0.25, 0.2, m=10)
        E, flagged = hm.energy(s, s, hm.identity_map(s, s))
        assert not flagged
        assert abs(E - s.total_area()) / s.total_area() < 0.02

    def test_scaling_quadruples_energy(self, annulus_pair):
        dom, _ = annulus_pair
        # doubling all target distances doubles d and quadruples the energy
        tgt2 = dom.with_lengths(2.0 * dom.lengths, check=False)
        vm = hm.identity_map(dom, tgt2)
        E1, _ = hm.energy(dom, dom, hm.identity_map(dom, dom))
        E2, _ = hm.energy(dom, tgt2, vm)
        assert abs(E2 - 4.0 * E1) / E1 < 1e-10

    def test_conformal_invariance_global_scaling(self, annulus_pair):
        # scaling all domain lengths leaves cotangent weights and hence the
        # energy literally unchanged
        dom, tgt = annulus_pair
        vm = hm.identity_map(dom, tgt)
        E1, _ = hm.energy(dom, tgt, vm)
        for lam in (0.5, 2.0):
            dom_s = dom.with_lengths(lam * dom.lengths, check=False)
            E2, _ = hm.energy(dom_s, tgt, vm)
            assert abs(E2 - E1) < 1e-12 * max(E1, 1.0)


class TestIdentityFixedPoint:
    def test_annulus_identity_is_fixed(self):
        ann = sf.build_cone_annulus(0.3, 1.0, 0.25)
        vid = hm.identity_map(ann, ann)
        vm, trace = hm.solve_harmonic(ann, ann, vid, tol=1e-10)
        assert len(trace.sweeps) == 1  # converged before any sweep
        geom = hm.MapGeometry(ann, ann)
        for v in range(ann.n_vertices):
            r1, t1 = geom.image_cone_coords(vid, v)
            r2, t2 = geom.image_cone_coords(vm, v)
            assert hc.cone_distance(r1, t1, r2, t2, 0.3) < 1e-12

    def test_torus_identity_near_fixed(self):
        # on unstructured fixtures the identity balances only to O(h^2);
        # the solve must stay within a mesh-scale neighborhood of it
        s = sf.build_cone_torus(0.25, 0.25, m=8)
        vid = hm.identity_map(s, s)
        vm, trace = hm.solve_harmonic(s, s, vid, tol=1e-9)
        geom = hm.MapGeometry(s, s)
        ed = hm.compute_edge_data(geom, vm)
        # displacement of every vertex from its identity position
        h = float(s.lengths.max())
        for v in range(0, s.n_vertices, 7):
            if vm.pinned[v]:
                continue
            f0 = int(vid.face[v])
            T1, _ = geom._unfold_pair(f0, int(vm.face[v]), int(vm.face[v]))
            p_id = hc.bary_point(geom.corners[f0], vid.bary[v])
            p_new = T1 @ hc.bary_point(geom.corners[vm.face[v]], vm.bary[v])
            assert hc.dist(p_id, p_new) < 0.35 * h


class TestSolve:
    def test_monotone_energy(self, solved_pair):
        _, _, _, trace = solved_pair
        ens = [s[1] for s in trace.sweeps]
        assert all(ens[i + 1] <= ens[i] + 1e-12 for i in range(len(ens) - 1))

    def test_gradient_tolerance(self, solved_pair):
        _, _, _, trace = solved_pair
        assert trace.sweeps[-1][2] <= 1e-10

    def test_jacobians_positive(self, solved_pair):
        dom, tgt, vm, _ = solved_pair
        geom = hm.MapGeometry(dom, tgt)
        ed = hm.compute_edge_data(geom, vm)
        assert np.all(hm.face_jacobian_signs(geom, vm, ed) > 0)

    def test_oracle_agreement(self, solved_pair):
        dom, tgt, vm, _ = solved_pair
        prof = radial.solve_radial(0.3, 0.45, 1.0, 1.0, tol=1e-8)
        err = radial.compare_with_mesh(prof, dom, tgt, vm)
        assert err["l_inf"] < 10.0 * float(dom.lengths.max()) ** 2

    def test_descent_from_perturbed_inits(self, annulus_pair):
        dom, tgt = annulus_pair
        rng = np.random.default_rng(3)
        base = hm.identity_map(dom, tgt)
        E_base, _ = hm.energy(dom, tgt, base)
        for trial in range(3):
            init = base.copy()
            free = np.nonzero(~init.pinned)[0]
            picks = rng.choice(free, size=min(10, len(free)), replace=False)
            for v in picks:
                b = init.bary[v] + rng.uniform(0, 0.4, 3)
                init.bary[v] = b / b.sum()
            E_init, _ = hm.energy(dom, tgt, init)
            vm, trace = hm.solve_harmonic(dom, tgt, init, tol=1e-8)
            assert trace.sweeps[-1][1] <= E_init + 1e-12

    def test_max_sweeps_error_carries_trace(self, annulus_pair):
        dom, tgt = annulus_pair
        with pytest.raises(SolverError) as err:
            # tolerance below the float floor forces the budget error
            hm.solve_harmonic(dom, tgt, hm.identity_map(dom, tgt), tol=1e-18,
                              max_sweeps=1)
        assert err.value.trace is not None and len(err.value.trace) >= 2


class TestUniquenessProbe:
    def test_random_inits_converge_to_same_map(self, annulus_pair):
        dom, tgt = annulus_pair
        rng = np.random.default_rng(11)
        maps = []
        for trial in range(3):
            init = hm.identity_map(dom, tgt)
            free = np.nonzero(~init.pinned)[0]
            for v in rng.choice(free, size=8, replace=False):
                b = init.bary[v] + rng.uniform(0, 0.3, 3)
                init.bary[v] = b / b.sum()
            vm, _ = hm.solve_harmonic(dom, tgt, init, tol=1e-10)
            maps.append(vm)
        geom = hm.MapGeometry(dom, tgt)
        for v in range(dom.n_vertices):
            r0, t0 = geom.image_cone_coords(maps[0], v)
            for other in maps[1:]:
                r1, t1 = geom.image_cone_coords(other, v)
                assert hc.cone_distance(r0, t0, r1, t1, 0.45) < 1e-7


class TestFaceDifferential:
    def test_identity_derivatives(self, annulus_pair):
        dom, _ = annulus_pair
        vm = hm.identity_map(dom, dom)
        geom = hm.MapGeometry(dom, dom)
        ed = hm.compute_edge_data(geom, vm)
        for f in range(0, dom.n_faces, 5):
            a, b, rho2, sigma2 = hm.face_differential(dom, dom, vm, f,
                                                      geom=geom, edge_data=ed)
            assert abs(a - 1.0) < 1e-8
            assert abs(b) < 1e-8
            assert abs(rho2 - sigma2) < 1e-8 * max(rho2, 1.0)

    def test_chart_rotation_weight(self, annulus_pair):
        # under a chart rotation by psi the coefficient picks up e^{-2 i psi}
        dom, tgt = annulus_pair
        vm, _ = hm.solve_harmonic(dom, tgt, hm.identity_map(dom, tgt), tol=1e-8)
        geom = hm.MapGeometry(dom, tgt)
        ed = hm.compute_edge_data(geom, vm)
        psi = 0.7
        f = dom.n_faces // 2
        a0, b0, _, s0 = hm.face_differential(dom, tgt, vm, f, geom=geom, edge_data=ed)
        a1, b1, _, s1 = hm.face_differential(dom, tgt, vm, f, chart_rotation=psi,
                                             geom=geom, edge_data=ed)
        phi0 = s0 * a0 * np.conj(b0)
        phi1 = s1 * a1 * np.conj(b1)
        if abs(phi0) > 1e-13:
            ratio = phi1 / phi0
            assert abs(ratio - np.exp(-2j * psi)) < 1e-6

    def test_flat_field_identities(self, solved_pair):
        dom, tgt, vm, _ = solved_pair
        ff = hm.flat_face_fields(dom, tgt, vm)
        e = ff["energy_density"]
        J = ff["jacobian"]
        nd = ff["norm_del"]
        ndb = ff["norm_delbar"]
        hn = ff["hopf_norm"]
        assert np.allclose(e, nd ** 2 + ndb ** 2, rtol=0, atol=1e-14)
        assert np.allclose(J, nd ** 2 - ndb ** 2, rtol=0, atol=1e-14)
        assert np.allclose(hn, nd * ndb, rtol=0, atol=1e-14)

    def test_jacobian_matches_area_ratio(self, solved_pair):
        # rho^-2 sigma^2 (|a|^2 - |b|^2) vs hyperbolic image/domain area ratio
        dom, tgt, vm, _ = solved_pair
        geom = hm.MapGeometry(dom, tgt)
        ed = hm.compute_edge_data(geom, vm)
        h = float(dom.lengths.max())
        checked = 0
        for f in range(dom.n_faces):
            tri = [int(v) for v in dom.faces[f]]
            if any(v in dom.marked for v in tri):
                continue
            a, b, rho2, sigma2 = hm.face_differential(dom, tgt, vm, f,
                                                      geom=geom, edge_data=ed)
            J_chart = (sigma2 / rho2) * (abs(a) ** 2 - abs(b) ** 2)
            d = ed.dist[dom.face_edges[f]]
            img_area = float(np.pi - hm.hc.triangle_angles(d[None, :]).sum())
            ratio = img_area / dom.areas[f]
            assert abs(J_chart - ratio) < 12.0 * h
            checked += 1
        assert checked > 0


class TestProlongation:
    def test_exact_on_originals(self, annulus_pair):
        dom, tgt = annulus_pair
        vm, _ = hm.solve_harmonic(dom, tgt, hm.identity_map(dom, tgt), tol=1e-8)
        dom2, tgt2 = sf.refine(dom), sf.refine(tgt)
        vm2 = hm.prolong_map(vm, dom, tgt, dom2, tgt2)
        geom1 = hm.MapGeometry(dom, tgt)
        geom2 = hm.MapGeometry(dom2, tgt2)
        for v in range(0, dom.n_vertices, 3):
            r1, t1 = geom1.image_cone_coords(vm, v)
            r2, t2 = geom2.image_cone_coords(vm2, v)
            assert hc.cone_distance(r1, t1, r2, t2, 0.45) < 1e-9
