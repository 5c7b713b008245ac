import numpy as np
import pytest

from conemin import hypcore as hc
from conemin.errors import DomainError, GeometryError


def random_points(rng, n, radius=2.0):
    ang = rng.uniform(0, 2 * np.pi, n)
    r = rng.uniform(0, radius, n)
    v = np.stack([r * np.cos(ang), r * np.sin(ang), np.zeros(n)], axis=-1)
    return hc.exp_map(np.broadcast_to(hc.ORIGIN, (n, 3)), v)


class TestDist:
    def test_identity_point(self):
        p = hc.exp_map(hc.ORIGIN, np.array([0.3, -0.7, 0.0]))
        assert hc.dist(p, p) == 0.0

    def test_parametrized_geodesic(self):
        q = np.array([np.sinh(1.0), 0.0, np.cosh(1.0)])
        assert abs(hc.dist(hc.ORIGIN, q) - 1.0) < 1e-14

    def test_cross_model_oracle(self):
        # Poincare-disk formula 2*artanh of the Moebius difference is the
        # independent reference for 1000 random pairs.
        rng = np.random.default_rng(7)
        a = random_points(rng, 1000)
        b = random_points(rng, 1000)
        za = hc.poincare_from_hyperboloid(a)
        zb = hc.poincare_from_hyperboloid(b)
        assert np.max(np.abs(hc.dist(a, b) - hc.dist_poincare(za, zb))) < 1e-10

    def test_symmetry_and_triangle_inequality(self):
        rng = np.random.default_rng(11)
        a, b, c = (random_points(rng, 200) for _ in range(3))
        assert np.allclose(hc.dist(a, b), hc.dist(b, a), atol=1e-12)
        assert np.all(hc.dist(a, c) <= hc.dist(a, b) + hc.dist(b, c) + 1e-10)

    def test_clamping_near_coincident(self):
        p = hc.exp_map(hc.ORIGIN, np.array([1e-9, 0.0, 0.0]))
        q = hc.exp_map(hc.ORIGIN, np.array([1e-9, 1e-12, 0.0]))
        d = hc.dist(p, q)
        assert np.isfinite(d) and d >= 0


class TestLogExp:
    def test_round_trip(self):
        rng = np.random.default_rng(3)
        x = random_points(rng, 100)
        y = random_points(rng, 100)
        v = hc.log_map(x, y)
        assert np.max(hc.dist(hc.exp_map(x, v), y)) < 1e-10

    def test_log_norm_is_distance(self):
        rng = np.random.default_rng(4)
        x = random_points(rng, 50)
        y = random_points(rng, 50)
        v = hc.log_map(x, y)
        assert np.allclose(np.sqrt(hc.mink(v, v)), hc.dist(x, y), atol=1e-12)


class TestConeChart:
    def test_closed_form_radius(self):
        # alpha = 1/2, |z| = 0.09: rho = 2 artanh(0.09^0.5 / 0.5) = 2 artanh(0.6)
        chart = hc.ConeChart(alpha=0.5)
        rho, theta = hc.cone_chart_invert(0.09 + 0j, chart)
        assert abs(rho - 2 * np.arctanh(0.6)) < 1e-12
        assert abs(rho - 1.3862943611198906) < 1e-10
        assert abs(theta) < 1e-14

    def test_round_trip(self):
        rng = np.random.default_rng(5)
        chart = hc.ConeChart(alpha=0.3)
        rho = rng.uniform(0.05, 2.0, 200)
        theta = rng.uniform(0, 2 * np.pi * 0.3, 200)
        z = hc.cone_chart_convert(rho, theta, chart)
        rho2, theta2 = hc.cone_chart_invert(z, chart)
        assert np.max(np.abs(rho - rho2)) < 1e-10
        assert np.max(np.abs(theta - theta2)) < 1e-10

    def test_cone_point_has_no_image(self):
        with pytest.raises(DomainError):
            hc.cone_chart_convert(0.0, 0.0, hc.ConeChart(alpha=0.3))

    def test_metric_pullback(self):
        # Differentiate (rho, theta) -> z numerically and check that the
        # conformal factor pulls the chart metric back to drho^2 + sinh^2 dtheta^2.
        rng = np.random.default_rng(6)
        chart = hc.ConeChart(alpha=0.35)
        a = chart.alpha
        h = 1e-5
        for _ in range(100):
            rho = rng.uniform(0.1, 1.5)
            theta = rng.uniform(0.1, 2 * np.pi * a - 0.1)
            dz_drho = (hc.cone_chart_convert(rho + h, theta, chart)
                       - hc.cone_chart_convert(rho - h, theta, chart)) / (2 * h)
            dz_dtheta = (hc.cone_chart_convert(rho, theta + h, chart)
                         - hc.cone_chart_convert(rho, theta - h, chart)) / (2 * h)
            z = hc.cone_chart_convert(rho, theta, chart)
            s2 = hc.cone_conformal_factor(z, a)
            E = s2 * abs(dz_drho) ** 2
            G = s2 * abs(dz_dtheta) ** 2
            F = s2 * (dz_drho * np.conj(dz_dtheta)).real
            assert abs(E - 1.0) < 1e-6
            assert abs(G - np.sinh(rho) ** 2) / np.sinh(rho) ** 2 < 1e-6
            assert abs(F) < 1e-6

    def test_cone_distance_against_lift(self):
        rng = np.random.default_rng(8)
        a = 0.4
        rho = rng.uniform(0.1, 1.0, (50, 2))
        th = rng.uniform(0, 2 * np.pi * a, (50, 2))
        d = hc.cone_distance(rho[:, 0], th[:, 0], rho[:, 1], th[:, 1], a)
        p = hc.cone_lift(rho[:, 0], th[:, 0], a, theta_ref=th[:, 1])
        q = hc.cone_lift(rho[:, 1], th[:, 1], a, theta_ref=th[:, 1])
        assert np.max(np.abs(d - hc.dist(p, q))) < 1e-12


class TestSolveTriangle:
    def test_equilateral(self):
        l = np.arccosh(3.0)
        tri = hc.solve_triangle([l, l, l])
        expected = np.arccos(0.75)  # (3*3-3)/(sqrt(8)*sqrt(8))
        assert np.allclose(tri.angles, expected, atol=1e-12)
        assert abs(expected - 0.7227342478134157) < 1e-12

    def test_euclidean_limit(self):
        tri = hc.solve_triangle([1e-4, 1e-4, 1e-4])
        assert np.allclose(tri.angles, np.pi / 3, atol=1e-7)

    def test_scalene_angle_sum(self):
        tri = hc.solve_triangle([1.0, 1.2, 1.5])
        assert sum(tri.angles) < np.pi

    def test_degenerate_names_inequality(self):
        with pytest.raises(GeometryError) as err:
            hc.solve_triangle([3.0, 1.0, 1.0])
        assert "l[0]" in str(err.value)

    def test_asa_reconstruction(self):
        # re-solve from one length plus the two adjacent angles
        tri = hc.solve_triangle([0.8, 1.1, 0.9])
        back = hc.triangle_from_angle_side(tri.lengths[0], tri.angles[1], tri.angles[2])
        assert np.allclose(back.lengths, tri.lengths, atol=1e-8)
        assert np.allclose(back.angles, tri.angles, atol=1e-8)


class TestSeparationBound:
    def test_spot_value(self):
        # (1 + cos^2(pi/4)) / sin^2(pi/4) = 3
        b = hc.cone_separation_bound(0.25, 0.25)
        assert abs(b - np.arccosh(3.0)) < 1e-14
        assert abs(b - 1.7627471740390861) < 1e-10

    def test_symmetry(self):
        assert hc.cone_separation_bound(0.1, 0.4) == hc.cone_separation_bound(0.4, 0.1)

    def test_monotone_decreasing(self):
        grid = np.linspace(0.05, 0.45, 20)
        vals = np.array([[hc.cone_separation_bound(a, b) for b in grid] for a in grid])
        assert np.all(np.diff(vals, axis=0) < 0)
        assert np.all(np.diff(vals, axis=1) < 0)

    def test_blowup_at_zero(self):
        assert hc.cone_separation_bound(1e-3, 1e-3) > 10.0

    def test_domain(self):
        for bad in (0.0, 0.5, 0.7, -0.1):
            with pytest.raises(DomainError):
                hc.cone_separation_bound(bad, 0.25)


class TestWeightedCentroid:
    def test_single_point(self):
        p = hc.exp_map(hc.ORIGIN, np.array([0.4, 0.2, 0.0]))
        m = hc.weighted_centroid(p[None, :], np.array([1.0]))
        assert hc.dist(m, p) < 1e-12

    def test_midpoint(self):
        rng = np.random.default_rng(9)
        a, b = random_points(rng, 2)
        m = hc.weighted_centroid(np.stack([a, b]), np.array([1.0, 1.0]))
        assert abs(hc.dist(m, a) - hc.dist(m, b)) < 1e-10
        assert abs(hc.dist(m, a) + hc.dist(m, b) - hc.dist(a, b)) < 1e-10

    def test_optimality(self):
        rng = np.random.default_rng(10)
        pts = random_points(rng, 3, radius=1.0)
        w = rng.uniform(0.2, 2.0, 3)
        m = hc.weighted_centroid(pts, w)
        logs = hc.log_map(np.broadcast_to(m, (3, 3)), pts)
        grad = (w[:, None] * logs).sum(axis=0)
        assert np.sqrt(max(hc.mink(grad, grad), 0.0)) < 1e-10
        obj = lambda x: float((w * hc.dist(np.broadcast_to(x, (3, 3)), pts) ** 2).sum())
        for p in pts:
            assert obj(m) <= obj(p) + 1e-12

    def test_errors(self):
        p = np.broadcast_to(hc.ORIGIN, (2, 3)).copy()
        with pytest.raises(DomainError):
            hc.weighted_centroid(p, np.array([0.0, 0.0]))
        with pytest.raises(DomainError):
            hc.weighted_centroid(p, np.array([1.0, -0.5]))


class TestRealization:
    def test_canonical_corners(self):
        lengths = np.array([0.7, 0.9, 1.1])
        V = hc.canonical_corners(lengths)
        assert hc.orientation(V) > 0
        assert abs(hc.dist(V[1], V[2]) - lengths[0]) < 1e-12
        assert abs(hc.dist(V[0], V[2]) - lengths[1]) < 1e-12
        assert abs(hc.dist(V[0], V[1]) - lengths[2]) < 1e-12

    def test_place_third(self):
        lengths = np.array([0.7, 0.9, 1.1])
        V = hc.canonical_corners(lengths)
        C = hc.place_third(V[0], V[1], lengths[1], lengths[0], side=1.0)
        assert hc.dist(C, V[2]) < 1e-10
        C2 = hc.place_third(V[0], V[1], lengths[1], lengths[0], side=-1.0)
        assert hc.orientation(np.stack([V[0], V[1], C2])) < 0

    def test_bary_round_trip(self):
        rng = np.random.default_rng(12)
        V = hc.canonical_corners(np.array([0.7, 0.9, 1.1]))
        for _ in range(50):
            b = rng.dirichlet([1, 1, 1])
            p = hc.bary_point(V, b)
            b2 = hc.bary_coords(V, p)
            assert np.max(np.abs(b - b2)) < 1e-10

    def test_bary_isometry_invariance(self):
        # the projective combination commutes with repositioning the triangle
        lengths = np.array([0.5, 0.6, 0.55])
        V = hc.canonical_corners(lengths)
        b = np.array([0.2, 0.3, 0.5])
        p = hc.bary_point(V, b)
        A = hc.exp_map(hc.ORIGIN, np.array([0.9, -0.4, 0.0]))
        B = hc.place_third(A, hc.ORIGIN, lengths[2], 99.0, side=1.0)  # dist_b unused sanity
        # realize the same triangle somewhere else via edge gluing
        B = hc.exp_map(A, hc.log_map(A, hc.ORIGIN) * (lengths[2] / hc.dist(A, hc.ORIGIN)))
        C = hc.place_third(A, B, lengths[1], lengths[0], side=1.0)
        W = np.stack([A, B, C])
        q = hc.bary_point(W, b)
        d_expected = hc.dist(p, V[0])
        assert abs(hc.dist(q, W[0]) - d_expected) < 1e-10
