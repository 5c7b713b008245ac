import numpy as np
import pytest

from conemin import harmonic as hm
from conemin import hopf
from conemin import hypcore as hc
from conemin import surface as sf
from conemin.errors import DomainError


@pytest.fixture(scope="module")
def annulus_pair():
    dom = sf.build_cone_annulus(0.3, 1.0, 0.25)
    tgt = sf.build_cone_annulus(0.45, 1.0, 0.25, n_spokes=dom.meta["n_spokes"],
                                n_rings=dom.meta["n_rings"])
    return dom, tgt


@pytest.fixture(scope="module")
def solved(annulus_pair):
    dom, tgt = annulus_pair
    vm, _ = hm.solve_harmonic(dom, tgt, hm.identity_map(dom, tgt), tol=1e-10)
    return dom, tgt, vm


def planted_pole_field(ann, order=1):
    """Pull phi = z^-order (holomorphic off the apex) into the face charts."""
    coords, placed = sf.develop_around_vertex(ann, 0)
    cc = hopf.face_chart_corners(ann)
    alpha = ann.meta["alpha"]
    phi = np.zeros(ann.n_faces, dtype=complex)
    for f in range(ann.n_faces):
        tri = [int(v) for v in ann.faces[f]]
        pair = [v for v in tri if v != 0][:2]
        ref = coords[pair[0]][1]
        zc = []
        for v in pair:
            r, t = coords[v]
            tw = ref + float(hc.wrap_angle(t - ref, alpha))
            zc.append((alpha * np.tanh(r / 2)) ** (1 / alpha)
                      * np.exp(1j * tw / alpha))
        zf = [cc[f][tri.index(v)] for v in pair]
        T = (zc[1] - zc[0]) / (zf[1] - zf[0])
        zmid = 0.5 * (zc[0] + zc[1])
        phi[f] = zmid ** (-order) * T * T
    return hopf.QuadDiffField(phi, "poincare")


class TestHopfField:
    def test_identity_vanishes(self, annulus_pair):
        dom, _ = annulus_pair
        q = hopf.hopf_field(dom, dom, hm.identity_map(dom, dom))
        assert q.invariant_norm().max() < 1e-10

    def test_algebraic_identities(self, solved):
        dom, tgt, vm = solved
        fields = hopf.scalar_fields(dom, tgt, vm)
        e = fields["energy_density"].values
        J = fields["jacobian"].values
        nd = fields["norm_del"].values
        ndb = fields["norm_delbar"].values
        hn = fields["hopf_norm"].values
        assert np.allclose(e, nd ** 2 + ndb ** 2, atol=1e-14)
        assert np.allclose(J, nd ** 2 - ndb ** 2, atol=1e-14)
        assert np.allclose(hn, nd * ndb, atol=1e-14)

    def test_chart_invariance_of_norm(self, solved):
        # |phi| rho^-2 agrees between rotated charts
        dom, tgt, vm = solved
        geom = hm.MapGeometry(dom, tgt)
        ed = hm.compute_edge_data(geom, vm)
        f = dom.n_faces // 2
        a0, b0, r0, s0 = hm.face_differential(dom, tgt, vm, f, geom=geom,
                                              edge_data=ed)
        a1, b1, r1, s1 = hm.face_differential(dom, tgt, vm, f,
                                              chart_rotation=1.1, geom=geom,
                                              edge_data=ed)
        n0 = abs(s0 * a0 * np.conj(b0)) / r0
        n1 = abs(s1 * a1 * np.conj(b1)) / r1
        assert abs(n0 - n1) < 1e-10 * max(n0, 1.0)


class TestHolomorphicity:
    def test_zero_field(self, annulus_pair):
        dom, _ = annulus_pair
        q = hopf.QuadDiffField(np.zeros(dom.n_faces, dtype=complex), "poincare")
        assert hopf.holomorphicity_residual(dom, q) == 0.0

    def test_planted_holomorphic_residual_decays(self):
        # an exactly holomorphic field has residual dominated by the O(h)
        # per-face variation; refinement must shrink it
        res = []
        for h in (0.25, 0.125):
            ann = sf.build_cone_annulus(0.3, 1.0, h, harmonic_rings=False)
            q = planted_pole_field(ann, order=1)
            res.append(hopf.holomorphicity_residual(ann, q))
        assert res[1] < res[0] / 1.5

    def test_solved_map_residual_decays(self):
        # vertex-recovered Hopf field of the solved map; raw per-face
        # coefficients carry a checkerboard component that cannot decay
        g1, g2 = sf.build_torus_pair(0.25, 0.40, 0.3, m=8)
        prev = None
        for level in range(2):
            if level:
                g1, g2 = sf.refine(g1), sf.refine(g2)
            vm, _ = hm.solve_harmonic(g1, g2, hm.identity_map(g1, g2),
                                      tol=1e-10)
            phi_v, _, _ = hopf.vertex_hopf_field(g1, g2, vm)
            r = hopf.holomorphicity_residual_vertex(g1, phi_v)
            if prev is not None:
                assert r < prev / 1.5
            prev = r


class TestBochner:
    def test_identity_exact_zero(self, annulus_pair):
        dom, _ = annulus_pair
        br = hopf.bochner_residual(dom, dom, hm.identity_map(dom, dom))
        assert np.abs(br["r_plus"]).max() < 1e-9

    def test_residual_decays_on_oracle_fields(self):
        # the oracle study: analytic profile fields through the discrete
        # Laplacian, on a band held fixed away from the cone point
        from conemin import radial
        prof = radial.solve_radial(0.3, 0.45, 1.0, 1.0, tol=1e-8)
        vals = []
        for h in (0.125, 0.0625):
            dom = sf.build_cone_annulus(0.3, 1.0, h)
            br = hopf.bochner_residual_analytic(dom, prof)
            band = (br["rho"] >= 0.45) & (br["rho"] <= 0.85) & br["defined"]
            vals.append(np.abs(br["r_plus"][band]).max())
        assert vals[1] < vals[0] / 1.5

    def test_conformality_emerges(self):
        # recovered |dbar u| of the oracle solve decays: the mesh solution
        # approaches the (conformal) continuum limit
        vals = []
        for h in (0.25, 0.125):
            dom = sf.build_cone_annulus(0.3, 1.0, h)
            tgt = sf.build_cone_annulus(0.45, 1.0, h,
                                        n_spokes=dom.meta["n_spokes"],
                                        n_rings=dom.meta["n_rings"])
            vm, _ = hm.solve_harmonic(dom, tgt, hm.identity_map(dom, tgt),
                                      tol=1e-10)
            _, b = hopf.vertex_derivative_recovery(dom, tgt, vm)
            coords = sf.annulus_cone_coords(dom)
            rho = np.array([coords[v][0] for v in range(dom.n_vertices)])
            ok = np.isfinite(b.real) & (rho >= 0.3)
            vals.append(np.abs(b[ok]).max())
        assert vals[1] < vals[0] / 1.4


class TestPoleOrder:
    def test_zero_field_flag(self, annulus_pair):
        dom, _ = annulus_pair
        q = hopf.QuadDiffField(np.zeros(dom.n_faces, dtype=complex), "poincare")
        est = hopf.pole_order_estimate(dom, q, 0)
        assert est["zero_field"] and est["order"] == 0.0

    def test_planted_simple_pole(self):
        ann = sf.build_cone_annulus(0.3, 1.0, 0.12, harmonic_rings=False)
        q = planted_pole_field(ann, order=1)
        est = hopf.pole_order_estimate(ann, q, 0, n_rings=6)
        assert abs(est["slope"] - (-1.0)) < 0.1

    def test_requires_marked_vertex(self, annulus_pair):
        dom, _ = annulus_pair
        q = hopf.QuadDiffField(np.ones(dom.n_faces, dtype=complex), "poincare")
        with pytest.raises(DomainError):
            hopf.pole_order_estimate(dom, q, 3)

    def test_insufficient_rings(self):
        ann = sf.build_cone_annulus(0.3, 0.6, 0.3, n_rings=2,
                                    harmonic_rings=False)
        q = planted_pole_field(ann, order=1)
        with pytest.raises(DomainError):
            hopf.pole_order_estimate(ann, q, 0, n_rings=6)


class TestLaplacian:
    def test_constant_in_kernel(self, annulus_pair):
        dom, _ = annulus_pair
        lap = hopf.cot_laplacian(dom, np.ones(dom.n_vertices))
        assert np.abs(lap).max() < 1e-12

    def test_analyst_sign(self, annulus_pair):
        # a concentrated bump has negative Laplacian at its peak
        dom, _ = annulus_pair
        vals = np.zeros(dom.n_vertices)
        interior = hopf.interior_vertices(dom)
        vals[interior[0]] = 1.0
        lap = hopf.cot_laplacian(dom, vals)
        assert lap[interior[0]] < 0
