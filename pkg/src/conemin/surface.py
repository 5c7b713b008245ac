"""Triangulated hyperbolic cone surfaces with intrinsic edge-length metric.

A ConeSurface stores combinatorics plus positive hyperbolic edge lengths;
curvature -1 is implicit in hyperbolic triangle trigonometry.  Marked
vertices carry prescribed angle fractions alpha (cone angle 2*pi*alpha).
Fixtures: cone annulus (exact cone-model mesh), one- and two-cone tori
(Klein-grid start + Newton on per-vertex conformal factors until the angle
sums hit their targets), and the doubled-triangle sphere with three cones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from . import hypcore as hc
from .errors import DomainError, GeometryError, SolverError


class ConeSurface:
    """Immutable triangulated marked surface with hyperbolic edge lengths."""

    def __init__(self, faces, edge_lengths, marked, boundary=(), meta=None,
                 check=True):
        self.faces = np.asarray(faces, dtype=int)
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise DomainError("surface", "ConeSurface", "faces must be (F,3)")
        self.n_vertices = int(self.faces.max()) + 1
        self.marked = dict(sorted((int(k), float(v)) for k, v in marked.items()))
        self.boundary = frozenset(int(v) for v in boundary)
        self.meta = dict(meta or {})

        # undirected edge table, i < j, sorted for determinism
        pairs = sorted(edge_lengths.keys())
        self.edges = np.array(pairs, dtype=int).reshape(-1, 2)
        self.lengths = np.array([float(edge_lengths[p]) for p in pairs])
        if np.any(self.lengths <= 0):
            raise DomainError("surface", "ConeSurface", "positive edge lengths required")
        self.edge_index = {p: e for e, p in enumerate(pairs)}

        self._build_tables(check)
        self._build_geometry(check)

    # -- construction ------------------------------------------------------

    def _build_tables(self, check):
        F = len(self.faces)
        self.face_edges = np.empty((F, 3), dtype=int)
        directed = {}
        for f, (a, b, c) in enumerate(self.faces):
            tri = (int(a), int(b), int(c))
            if len(set(tri)) != 3:
                raise GeometryError("surface", "ConeSurface", "degenerate face", str(tri))
            for k in range(3):
                i, j = tri[(k + 1) % 3], tri[(k + 2) % 3]
                key = (i, j) if i < j else (j, i)
                if key not in self.edge_index:
                    raise DomainError("surface", "ConeSurface", "missing edge length", str(key))
                self.face_edges[f, k] = self.edge_index[key]
                if (i, j) in directed:
                    raise GeometryError("surface", "ConeSurface",
                                        "inconsistent orientation", f"edge {(i, j)} repeated")
                directed[(i, j)] = (f, k)

        # neighbor face across the edge opposite corner k; -1 on boundary
        self.face_adjacency = np.full((F, 3), -1, dtype=int)
        self.face_adj_slot = np.full((F, 3), -1, dtype=int)
        boundary_edges = []
        for (i, j), (f, k) in directed.items():
            if (j, i) in directed:
                g, l = directed[(j, i)]
                self.face_adjacency[f, k] = g
                self.face_adj_slot[f, k] = l
            else:
                boundary_edges.append((min(i, j), max(i, j)))
        self.boundary_edges = frozenset(boundary_edges)
        implied_boundary = set(v for e in boundary_edges for v in e)
        if check and not implied_boundary <= set(self.boundary):
            raise GeometryError("surface", "ConeSurface", "unflagged boundary vertex",
                                str(sorted(implied_boundary - set(self.boundary))))

        self.vertex_faces = [[] for _ in range(self.n_vertices)]
        for f, tri in enumerate(self.faces):
            for v in tri:
                self.vertex_faces[int(v)].append(f)
        nbr = [set() for _ in range(self.n_vertices)]
        for i, j in self.edges:
            nbr[i].add(int(j))
            nbr[j].add(int(i))
        self.vertex_neighbors = [sorted(s) for s in nbr]

        if check:
            n_comp, _ = csgraph.connected_components(self.adjacency_matrix(), directed=False)
            if n_comp != 1:
                raise GeometryError("surface", "ConeSurface", "mesh must be connected",
                                    f"{n_comp} components")

    def _build_geometry(self, check):
        self.face_lengths = self.lengths[self.face_edges]
        if check:
            bad = (self.face_lengths >= self.face_lengths.sum(axis=1, keepdims=True)
                   - self.face_lengths)
            if np.any(bad):
                f = int(np.argwhere(bad.any(axis=1))[0][0])
                raise GeometryError("surface", "ConeSurface",
                                    "strict triangle inequality violated",
                                    f"face {f}, lengths {self.face_lengths[f].tolist()}")
        self.angles = hc.triangle_angles(self.face_lengths)
        self.areas = np.maximum(np.pi - self.angles.sum(axis=1), 0.0)
        self.euclid_angles = hc.euclid_angles(self.face_lengths)
        self.euclid_areas = hc.euclid_area(self.face_lengths)

        V, F = self.n_vertices, len(self.faces)
        rows = self.faces.ravel()
        self.angle_sums = np.bincount(rows, weights=self.angles.ravel(), minlength=V)
        self.vertex_areas = np.bincount(rows, weights=np.repeat(self.areas / 3.0, 3),
                                        minlength=V)

        # cotangent weights from the Euclidean realizations of incident faces
        cot = 1.0 / np.tan(self.euclid_angles)
        w = np.zeros(len(self.edges))
        np.add.at(w, self.face_edges.ravel(), 0.5 * cot.ravel())
        self.cot_weights = w

    # -- basic queries -------------------------------------------------------

    @property
    def n_faces(self):
        return len(self.faces)

    @property
    def n_edges(self):
        return len(self.edges)

    def euler_characteristic(self):
        return self.n_vertices - self.n_edges + self.n_faces

    def total_area(self):
        return float(self.areas.sum())

    def adjacency_matrix(self):
        i, j = self.edges[:, 0], self.edges[:, 1]
        data = np.ones(len(self.edges))
        return sp.coo_matrix((np.r_[data, data], (np.r_[i, j], np.r_[j, i])),
                             shape=(self.n_vertices, self.n_vertices)).tocsr()

    def length_of(self, i, j):
        return float(self.lengths[self.edge_index[(min(i, j), max(i, j))]])

    def with_lengths(self, new_lengths, check=True):
        """Same combinatorics with replaced edge-length vector."""
        table = {tuple(e): float(l) for e, l in zip(map(tuple, self.edges), new_lengths)}
        return ConeSurface(self.faces, table, self.marked, self.boundary,
                           meta=self.meta, check=check)

    # -- invariants ----------------------------------------------------------

    def validate(self, tol_angle=1e-6, tol_area=1e-4, mesh_h=None):
        """Run the invariant battery; returns a report dict, raises nothing."""
        report = {"ok": True, "checks": {}}

        def record(name, ok, value):
            report["checks"][name] = {"ok": bool(ok), "value": value}
            if not ok:
                report["ok"] = False

        interior = [v for v in range(self.n_vertices)
                    if v not in self.boundary and v not in self.marked]
        dev = np.abs(self.angle_sums[interior] - 2 * np.pi) if interior else np.array([0.0])
        record("smooth_angle_sums", dev.max() <= tol_angle, float(dev.max()))

        worst = 0.0
        for v, a in self.marked.items():
            if v in self.boundary:
                continue
            worst = max(worst, abs(self.angle_sums[v] - 2 * np.pi * a))
        record("marked_angle_sums", worst <= tol_angle, worst)

        if not self.boundary:
            chi = self.euler_characteristic()
            gb = chi + sum(a - 1.0 for a in self.marked.values())
            record("gauss_bonnet_constraint", gb < 0, float(gb))
            area_target = -2 * np.pi * gb
            record("gauss_bonnet_area",
                   abs(self.total_area() - area_target) <= tol_area,
                   float(self.total_area() - area_target))

        h = mesh_h if mesh_h is not None else float(self.lengths.max())
        marked_ids = [v for v in self.marked if v not in self.boundary]
        pair_worst = 0.0
        for a_i in range(len(marked_ids)):
            for b_i in range(a_i + 1, len(marked_ids)):
                va, vb = marked_ids[a_i], marked_ids[b_i]
                bound = hc.cone_separation_bound(self.marked[va], self.marked[vb])
                d = geodesic_distance(self, va, vb)
                pair_worst = max(pair_worst, bound - 2 * h - d)
        record("cone_separation", pair_worst <= 0.0, float(pair_worst))
        return report


@dataclass
class SurfaceBuilder:
    """Fixture recipe: genus, angle fractions, resolution."""

    genus: int
    alphas: tuple
    h: float
    rho_max: float = 1.0
    extra: dict = field(default_factory=dict)

    def build(self) -> ConeSurface:
        if self.genus == 1 and len(self.alphas) == 1:
            return build_cone_torus(self.alphas[0], self.h, **self.extra)
        if self.genus == 1 and len(self.alphas) == 2:
            return build_two_cone_torus(self.alphas[0], self.alphas[1], self.h, **self.extra)
        if self.genus == 0 and len(self.alphas) == 3:
            return build_sphere_three_cones(self.alphas, self.h, **self.extra)
        raise DomainError("surface", "SurfaceBuilder", "unsupported fixture",
                          f"genus {self.genus}, {len(self.alphas)} cones")


# ---------------------------------------------------------------------------
# annulus fixture: exact mesh of the cone model


def _annulus_identity_imbalance(surf: ConeSurface):
    """Radial Dirichlet imbalance of the identity map, one value per interior
    ring family (integer rings and quad-center rings).

    Uses the surface's own cotangent weights and exact cone-model positions;
    the angular components vanish by the crisscross mesh's mirror symmetry."""
    coords = surf.meta["cone_coords"]
    alpha = surf.meta["alpha"]
    reps = surf.meta["ring_representatives"]
    res = np.zeros(len(reps))
    for idx, v in enumerate(reps):
        rho_v, th_v = coords[v]
        p = hc.cone_lift(rho_v, th_v, alpha, theta_ref=th_v)
        e_rho = np.array([np.cosh(rho_v), 0.0, np.sinh(rho_v)])
        total = 0.0
        for u in surf.vertex_neighbors[v]:
            rho_u, th_u = coords[u]
            q = hc.cone_lift(rho_u, th_u, alpha, theta_ref=th_v)
            w = surf.cot_weights[surf.edge_index[(min(u, v), max(u, v))]]
            total += w * hc.mink(hc.log_map(p, q), e_rho)
        res[idx] = total
    return res


def _annulus_from_radii(alpha, radii, center_radii, n_spokes, h, rho_max) -> ConeSurface:
    """Fan plus crisscross bands: each annular quad splits into 4 triangles
    around a center vertex, so every interior star is mirror-symmetric about
    its spoke and the identity map's angular balance is exact."""
    n_rings = len(radii)
    dth = 2 * np.pi * alpha / n_spokes
    thetas = dth * np.arange(n_spokes)
    cbase = 1 + n_rings * n_spokes

    def vid(j, i):
        return 1 + (j - 1) * n_spokes + (i % n_spokes)

    def cid(j, i):
        return cbase + (j - 1) * n_spokes + (i % n_spokes)

    faces = []
    for i in range(n_spokes):
        faces.append((0, vid(1, i), vid(1, i + 1)))
    for j in range(1, n_rings):
        for i in range(n_spokes):
            quad = (vid(j, i), vid(j + 1, i), vid(j + 1, i + 1), vid(j, i + 1))
            c = cid(j, i)
            for k in range(4):
                faces.append((quad[k], quad[(k + 1) % 4], c))

    coords = {0: (0.0, 0.0)}
    for j in range(1, n_rings + 1):
        for i in range(n_spokes):
            coords[vid(j, i)] = (float(radii[j - 1]), float(thetas[i]))
    for j in range(1, n_rings):
        for i in range(n_spokes):
            coords[cid(j, i)] = (float(center_radii[j - 1]),
                                 float((thetas[i] + 0.5 * dth) % (2 * np.pi * alpha)))

    lengths = {}
    for (a, b, c) in faces:
        for (u, v) in ((a, b), (b, c), (c, a)):
            key = (min(u, v), max(u, v))
            if key not in lengths:
                ru, tu = coords[u]
                rv, tv = coords[v]
                lengths[key] = float(hc.cone_distance(ru, tu, rv, tv, alpha))

    boundary = [vid(n_rings, i) for i in range(n_spokes)]
    reps = [vid(j, 0) for j in range(1, n_rings)] + \
           [cid(j, 0) for j in range(1, n_rings)]
    meta = {"fixture": "annulus", "alpha": alpha, "rho_max": rho_max, "h": h,
            "n_spokes": n_spokes, "n_rings": n_rings,
            "ring_radii": [float(r) for r in radii],
            "center_radii": [float(r) for r in center_radii],
            "ring_representatives": reps}
    surf = ConeSurface(np.array(faces), lengths, {0: alpha}, boundary, meta=meta)
    surf.meta["cone_coords"] = coords
    return surf


def build_cone_annulus(alpha, rho_max, h, n_spokes=None, n_rings=None,
                       harmonic_rings=True) -> ConeSurface:
    """Mesh the cone model out to radius rho_max, boundary flagged.

    Vertices sit at exact (rho, theta) samples and edge lengths are exact cone
    distances, so angle sums hold to roundoff.  With harmonic_rings the
    interior ring radii are tuned (Newton) until the identity map is a
    discrete critical point of the Dirichlet energy: the angular balance holds
    by symmetry and the radial balance is imposed.  This pins the exactness of
    identity-map oracle comparisons without changing any surface invariant."""
    if not 0.0 < alpha < 0.5:
        raise DomainError("surface", "build_cone_annulus", "alpha in (0, 1/2) required")
    if rho_max <= 0 or h <= 0:
        raise DomainError("surface", "build_cone_annulus", "rho_max, h > 0 required")

    if n_spokes is None:
        n_spokes = max(8, int(np.ceil(2 * np.pi * alpha * np.sinh(rho_max) / h)))
    if n_rings is None:
        n_rings = max(3, int(np.ceil(rho_max / h)))
    radii = rho_max * np.arange(1, n_rings + 1) / n_rings
    centers = 0.5 * (np.r_[0.0, radii[:-1]] + radii)[1:]

    if harmonic_rings and n_rings >= 2:
        radii, centers = _balance_annulus_radii(radii, centers, alpha, n_spokes,
                                                h, rho_max)
    return _annulus_from_radii(alpha, radii, centers, n_spokes, h, rho_max)


def _balance_annulus_radii(radii, centers, alpha, n_spokes, h, rho_max,
                           tol=1e-12, max_iter=60):
    """Newton on interior ring and center radii until the identity map is a
    discrete critical point of the Dirichlet energy."""
    radii = np.array(radii, dtype=float)
    centers = np.array(centers, dtype=float)
    K = len(radii)
    x = np.r_[radii[:-1], centers]
    n_unknown = len(x)

    def split(xv):
        return np.r_[xv[:K - 1], radii[-1]], xv[K - 1:]

    def residual(xv):
        rr, cc = split(xv)
        surf = _annulus_from_radii(alpha, rr, cc, n_spokes, h, rho_max)
        return _annulus_identity_imbalance(surf)

    def feasible(xv):
        rr, cc = split(xv)
        if np.any(np.diff(np.r_[0.0, rr]) <= 1e-9):
            return False
        return np.all(cc > np.r_[0.0, rr[:-2]] if K > 2 else cc > 0) \
            and np.all(cc < rr[1:]) and np.all(cc > rr[:-1] * 0.05)

    # residual j couples only to unknowns within one ring: probe the Jacobian
    # with well-separated unknown groups instead of one column at a time
    ring_of = np.r_[np.arange(K - 1, dtype=float), np.arange(K - 1) + 0.5]
    gidx = (np.floor(ring_of * 2.0).astype(int)) % 7
    groups = [np.nonzero(gidx == g)[0] for g in range(7)]
    groups = [g for g in groups if len(g)]
    couple = np.abs(ring_of[:, None] - ring_of[None, :]) <= 1.6

    r = residual(x)
    for _ in range(max_iter):
        if np.max(np.abs(r)) < tol:
            break
        J = np.zeros((n_unknown, n_unknown))
        step = 1e-7
        for grp in groups:
            xp = x.copy()
            xp[grp] += step
            dr = (residual(xp) - r) / step
            for c in grp:
                rows = couple[:, c]
                J[rows, c] = dr[rows]
        try:
            dx = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        done = False
        for _ in range(40):
            xn = x + t * dx
            if feasible(xn):
                try:
                    rn = residual(xn)
                except GeometryError:
                    rn = None
                if rn is not None and (np.max(np.abs(rn)) < np.max(np.abs(r))
                                       or t < 1e-6):
                    x, r = xn, rn
                    done = True
                    break
            t *= 0.5
        if not done:
            break
    rr, cc = split(x)
    return rr, cc


# ---------------------------------------------------------------------------
# torus fixtures: Klein-grid start + Newton angle-sum uniformization


def _hyperbolic_square_corners(alpha, aspect=1.0):
    """Quadrilateral fundamental domain with total corner angle 2*pi*alpha.

    aspect = 1 gives the regular square; aspect != 1 stretches the two
    diagonals (corner distances d and aspect*d), producing a torus with a
    different modulus.  The glued corner angle stays exactly 2*pi*alpha."""
    half = np.pi * alpha / 2.0

    def total_corner_angle(d1):
        d2 = aspect * d1
        angs = []
        for (da, db) in ((d1, d2), (d2, d1)):
            # triangle (center, corner_a, corner_b) with apex angle pi/2
            ca = np.cosh(da)
            cb = np.cosh(db)
            cc = ca * cb  # hyperbolic Pythagoras for the quad side
            side = np.arccosh(cc)
            # angle at corner_a via the law of cosines
            num = np.cosh(da) * np.cosh(side) - np.cosh(db)
            den = np.sinh(da) * np.sinh(side)
            angs.append(np.arccos(np.clip(num / den, -1, 1)))
        # two corners of each type, each seeing two triangle angles
        return 4.0 * (angs[0] + angs[1])

    lo, hi = 0.05, 12.0
    target = 2 * np.pi * alpha
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if total_corner_angle(mid) > target:
            lo = mid
        else:
            hi = mid
    d1 = 0.5 * (lo + hi)
    d2 = aspect * d1
    corners = []
    for k, d in enumerate((d1, d2, d1, d2)):
        ang = np.pi / 4 + k * np.pi / 2
        v = np.array([np.cos(ang), np.sin(ang), 0.0]) * d
        corners.append(hc.exp_map(hc.ORIGIN, v))
    return np.stack(corners)


def _grid_torus(m, alpha_shape, marked_cells, aspect=1.0):
    """Diagonal-split m x m torus grid with initial hyperbolic lengths.

    Positions come from a projective bilinear grid on the regular hyperbolic
    square with corner angle pi*alpha_shape/2; the combination commutes with
    the side-pairing isometries, so seam-crossing lengths are consistent no
    matter which preimage evaluates them.  Around each marked grid cell the
    two touching quad diagonals are flipped toward it, raising the marked
    vertex's degree from 6 to 8 (fan rule for cone vertices)."""
    corners = _hyperbolic_square_corners(alpha_shape, aspect=aspect)

    def P(i, j):
        s = i / m
        t = j / m
        w = np.array([(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t])
        return hc.normalize_point(w @ corners)

    def vid(i, j):
        return (i % m) * m + (j % m)

    flipped = set()
    for (gi, gj) in marked_cells:
        flipped.add(((gi - 1) % m, gj % m))
        flipped.add((gi % m, (gj - 1) % m))

    faces = []
    lengths = {}
    for i in range(m):
        for j in range(m):
            quad = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)]
            pts = [P(a, b) for a, b in quad]
            ids = [vid(a, b) for a, b in quad]
            if (i, j) in flipped:
                tris = [(0, 1, 3), (1, 2, 3)]
                diag = (1, 3)
            else:
                tris = [(0, 1, 2), (0, 2, 3)]
                diag = (0, 2)
            for t in tris:
                faces.append(tuple(ids[k] for k in t))
            pairs = [(0, 1), (1, 2), (2, 3), (3, 0), diag]
            for a, b in pairs:
                key = (min(ids[a], ids[b]), max(ids[a], ids[b]))
                lengths.setdefault(key, float(hc.dist(pts[a], pts[b])))
    return np.array(faces, dtype=int), lengths


def _uniformize(faces, lengths0, targets, tol=1e-11, max_iter=80):
    """Newton on per-vertex log factors until angle sums hit their targets.

    lengths0: dict edge->length.  targets: (V,) array of target angle sums.
    Returns the solved edge-length dict."""
    pairs = sorted(lengths0.keys())
    E = len(pairs)
    V = len(targets)
    l0 = np.array([lengths0[p] for p in pairs])
    ei = {p: k for k, p in enumerate(pairs)}
    F = len(faces)
    fe = np.array([[ei[(min(a, b), max(a, b))] for a, b in
                    ((f[1], f[2]), (f[2], f[0]), (f[0], f[1]))] for f in faces])
    phi = np.zeros(V)
    everts = np.array(pairs)

    def lengths_of(phiv):
        return l0 * np.exp(0.5 * (phiv[everts[:, 0]] + phiv[everts[:, 1]]))

    def angle_state(phiv):
        l = lengths_of(phiv)
        fl = l[fe]
        bad = fl[..., 0] >= fl[..., 1] + fl[..., 2]
        for k in (1, 2):
            bad |= fl[..., k] >= fl[..., (k + 1) % 3] + fl[..., (k + 2) % 3]
        if np.any(bad):
            return None, None, None
        ang = hc.triangle_angles(fl)
        sums = np.bincount(np.asarray(faces).ravel(), weights=ang.ravel(), minlength=V)
        return l, ang, sums

    l, ang, sums = angle_state(phi)
    if l is None:
        raise GeometryError("surface", "_uniformize", "invalid initial lengths")
    res = sums - targets

    for it in range(max_iter):
        if np.max(np.abs(res)) < tol:
            break
        rows, cols, vals = [], [], []
        fl = l[fe]
        sh = np.sinh(fl)
        ch = np.cosh(fl)
        sin_ang = np.sin(ang)
        for k in range(3):
            a, b, c = k, (k + 1) % 3, (k + 2) % 3
            s = np.maximum(sin_ang[:, a], 1e-14)
            dA_da = sh[:, a] / (sh[:, b] * sh[:, c] * s)
            dA_db = (np.cos(ang[:, a]) * ch[:, b] * sh[:, c] - sh[:, b] * ch[:, c]) \
                / (sh[:, b] * sh[:, c] * s)
            dA_dc = (np.cos(ang[:, a]) * ch[:, c] * sh[:, b] - sh[:, c] * ch[:, b]) \
                / (sh[:, b] * sh[:, c] * s)
            vert = np.asarray(faces)[:, k]
            for which, dd in ((a, dA_da), (b, dA_db), (c, dA_dc)):
                e = fe[:, which]
                contrib = dd * 0.5 * l[e]
                for end in (0, 1):
                    rows.append(vert)
                    cols.append(everts[e, end])
                    vals.append(contrib)
        J = sp.coo_matrix((np.concatenate(vals),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(V, V)).tocsc()
        try:
            dphi = spla.spsolve(J, -res)
        except Exception as exc:  # singular Jacobian
            raise SolverError("surface", "_uniformize", "Newton Jacobian solve failed",
                              str(exc))
        t = 1.0
        best = None
        for _ in range(40):
            cand = phi + t * dphi
            lc, angc, sumc = angle_state(cand)
            if lc is not None:
                rc = sumc - targets
                if np.max(np.abs(rc)) < np.max(np.abs(res)) or t < 1e-8:
                    best = (cand, lc, angc, rc)
                    break
            t *= 0.5
        if best is None:
            raise SolverError("surface", "_uniformize", "line search stalled",
                              f"residual {np.max(np.abs(res))}")
        phi, l, ang, res = best
    else:
        raise SolverError("surface", "_uniformize", "Newton did not converge",
                          f"residual {np.max(np.abs(res))}")
    return {p: float(v) for p, v in zip(pairs, l)}


def _torus_from_targets(m, marked, meta, h, aspect=1.0):
    cells = [(v // m, v % m) for v in marked]
    faces, lengths0 = _grid_torus(m, min(marked.values()), cells, aspect=aspect)
    targets = np.full(m * m, 2 * np.pi)
    for v, a in marked.items():
        targets[v] = 2 * np.pi * a
    lengths = _uniformize(faces, lengths0, targets)
    surf = ConeSurface(faces, lengths, marked, meta=meta)

    # midpoint refinement around the cones until their incident edges reach
    # the bulk resolution; metric-preserving, so angle sums stay exact
    for _ in range(12):
        cone_edges = [surf.length_of(v, u) for v in surf.marked
                      for u in surf.vertex_neighbors[v]]
        if max(cone_edges) <= 1.6 * h:
            break
        surf = refine_local(surf, marked_ring_faces(surf, rings=2))
    # then chase any remaining over-long edges (grid distortion)
    for _ in range(8):
        long_face = (surf.face_lengths > 1.6 * h).any(axis=1)
        if not long_face.any():
            break
        surf = refine_local(surf, long_face)
    return surf


def _torus_m_for_h(alpha_total_area, h):
    # calibrated on the alpha = 1/4 fixture: m = 21 keeps the bulk max edge
    # under 2h at h = 0.1 after the adaptive passes
    scale = np.sqrt(alpha_total_area / 4.71)
    return max(6, int(np.ceil(2.1 * scale / h)))


def build_cone_torus(alpha, h, m=None, aspect=1.0, plain=False) -> ConeSurface:
    """Genus-1 fixture with a single cone of angle 2*pi*alpha at vertex 0.

    plain=True skips the adaptive refinement (uniform quad-split grid, no
    closure slivers): coarser at the cone but with O(1) triangle-inequality
    margins, which pinch-path studies need."""
    if not 0.0 < alpha < 0.5:
        raise DomainError("surface", "build_cone_torus", "alpha in (0, 1/2) required")
    if plain:
        if m is None:
            m = _torus_m_for_h(2 * np.pi * (1 - alpha), h)
        meta = {"fixture": "torus", "alpha": alpha, "h": h, "m": m,
                "aspect": aspect, "plain": True}
        cells = [(0, 0)]
        faces, lengths0 = _grid_torus(m, alpha, cells, aspect=aspect)
        targets = np.full(m * m, 2 * np.pi)
        targets[0] = 2 * np.pi * alpha
        lengths = _uniformize(faces, lengths0, targets)
        return ConeSurface(faces, lengths, {0: alpha}, meta=meta)
    area = 2 * np.pi * (1 - alpha)
    if m is None:
        m = _torus_m_for_h(area, h)
    meta = {"fixture": "torus", "alpha": alpha, "h": h, "m": m, "aspect": aspect}
    return _torus_from_targets(m, {0: alpha}, meta, h, aspect=aspect)


def build_two_cone_torus(alpha1, alpha2, h, m=None) -> ConeSurface:
    """Genus-1 fixture with cones at two grid-diagonal vertices."""
    for a in (alpha1, alpha2):
        if not 0.0 < a < 0.5:
            raise DomainError("surface", "build_two_cone_torus",
                              "alpha in (0, 1/2) required")
    area = 2 * np.pi * (2 - alpha1 - alpha2)
    if m is None:
        m = _torus_m_for_h(area, h)
    v2 = (m // 2) * m + (m // 2)
    meta = {"fixture": "two_cone_torus", "alphas": [alpha1, alpha2], "h": h, "m": m}
    return _torus_from_targets(m, {0: alpha1, v2: alpha2}, meta, h)


def build_torus_pair(alpha, alpha_prime, h, m=None, aspect2=1.45):
    """Two one-cone tori with identical combinatorics (shared vertex ids).

    The second torus is built over a stretched fundamental quadrilateral
    (aspect2), so the pair carries genuinely different conformal structures;
    with two squares the D4 symmetry makes the moduli nearly coincide and
    the whole variational problem degenerates to noise level.  Refinement
    masks are unioned across the pair so the adaptive subdivision stays
    combinatorially synchronized (the outer loop maps by vertex id)."""
    for a in (alpha, alpha_prime):
        if not 0.0 < a < 0.5:
            raise DomainError("surface", "build_torus_pair",
                              "alpha in (0, 1/2) required")
    if m is None:
        area = 2 * np.pi * (1 - min(alpha, alpha_prime))
        m = _torus_m_for_h(area, h)
    surfs = []
    for a, asp in ((alpha, 1.0), (alpha_prime, aspect2)):
        meta = {"fixture": "torus", "alpha": a, "h": h, "m": m, "aspect": asp}
        cells = [(0, 0)]
        faces, lengths0 = _grid_torus(m, a, cells, aspect=asp)
        targets = np.full(m * m, 2 * np.pi)
        targets[0] = 2 * np.pi * a
        lengths = _uniformize(faces, lengths0, targets)
        surfs.append(ConeSurface(faces, lengths, {0: a}, meta=meta))

    def needs_cone_rounds(s):
        return max(s.length_of(v, u) for v in s.marked
                   for u in s.vertex_neighbors[v]) > 1.6 * h

    for _ in range(12):
        mask = None
        if any(needs_cone_rounds(s) for s in surfs):
            mask = marked_ring_faces(surfs[0], rings=2)
        else:
            long_face = np.zeros(surfs[0].n_faces, dtype=bool)
            for s in surfs:
                long_face |= (s.face_lengths > 1.6 * h).any(axis=1)
            if long_face.any():
                mask = long_face
        if mask is None:
            break
        surfs = [refine_local(s, mask) for s in surfs]
        if not np.array_equal(surfs[0].faces, surfs[1].faces):
            raise GeometryError("surface", "build_torus_pair",
                                "pair refinement desynchronized")
    return surfs[0], surfs[1]


def build_sphere_three_cones(alphas, h, subdiv=None) -> ConeSurface:
    """Doubled hyperbolic triangle: genus-0 surface with three cone points."""
    alphas = tuple(float(a) for a in alphas)
    if len(alphas) != 3 or not all(0.0 < a < 0.5 for a in alphas):
        raise DomainError("surface", "build_sphere_three_cones",
                          "three alphas in (0, 1/2) required")
    if sum(alphas) >= 1.0:
        raise DomainError("surface", "build_sphere_three_cones",
                          "sum(alphas) < 1 required (Gauss-Bonnet)")
    A, B, C = (np.pi * a for a in alphas)
    cosh_sides = [
        (np.cos(A) + np.cos(B) * np.cos(C)) / (np.sin(B) * np.sin(C)),
        (np.cos(B) + np.cos(C) * np.cos(A)) / (np.sin(C) * np.sin(A)),
        (np.cos(C) + np.cos(A) * np.cos(B)) / (np.sin(A) * np.sin(B)),
    ]
    sides = [float(np.arccosh(x)) for x in cosh_sides]  # side k opposite corner k
    V = hc.canonical_corners(np.array(sides))

    if subdiv is None:
        subdiv = max(3, int(np.ceil(max(sides) / h)))
    n = subdiv

    def P(i, j):
        lam = np.array([(n - i - j) / n, i / n, j / n])
        return hc.bary_point(V, lam)

    # front sheet: grid points and triangles of the subdivided big triangle
    pos = []
    grid_id = {}
    on_side = []
    for i in range(n + 1):
        for j in range(n + 1 - i):
            grid_id[(i, j)] = len(pos)
            pos.append(P(i, j))
            on_side.append(i == 0 or j == 0 or i + j == n)
    tris = []
    for i in range(n):
        for j in range(n - i):
            tris.append((grid_id[(i, j)], grid_id[(i + 1, j)], grid_id[(i, j + 1)]))
            if i + j < n - 1:
                tris.append((grid_id[(i + 1, j)], grid_id[(i + 1, j + 1)],
                             grid_id[(i, j + 1)]))

    # bisect interior edges joining two side vertices: after doubling such an
    # edge would appear twice between the same vertex pair
    def bad_edges(tris):
        count = {}
        for t in tris:
            for k in range(3):
                u, v = t[(k + 1) % 3], t[(k + 2) % 3]
                count.setdefault((min(u, v), max(u, v)), []).append((t, k))
        return {e: inc for e, inc in count.items()
                if len(inc) == 2 and on_side[e[0]] and on_side[e[1]]}

    bad = bad_edges(tris)
    if bad:
        new_tris = []
        mid_of = {}
        for e in bad:
            mid_of[e] = len(pos)
            pos.append(hc.bary_point(np.stack([pos[e[0]], pos[e[1]]] + [pos[e[0]]]),
                                     np.array([0.5, 0.5, 0.0])))
            on_side.append(False)
        for t in tris:
            split = [(k, (min(t[(k + 1) % 3], t[(k + 2) % 3]),
                          max(t[(k + 1) % 3], t[(k + 2) % 3])))
                     for k in range(3)
                     if (min(t[(k + 1) % 3], t[(k + 2) % 3]),
                         max(t[(k + 1) % 3], t[(k + 2) % 3])) in mid_of]
            if not split:
                new_tris.append(t)
                continue
            if len(split) > 1:
                raise GeometryError("surface", "build_sphere_three_cones",
                                    "unexpected double split")
            k, e = split[0]
            m = mid_of[e]
            new_tris += [(t[k], t[(k + 1) % 3], m), (t[k], m, t[(k + 2) % 3])]
        tris = new_tris

    n_front = len(pos)
    back_of = {}
    next_id = n_front
    for v in range(n_front):
        if on_side[v]:
            back_of[v] = v
        else:
            back_of[v] = next_id
            next_id += 1

    faces = []
    for t in tris:
        faces.append(t)
        faces.append((back_of[t[0]], back_of[t[2]], back_of[t[1]]))

    lengths = {}
    pos_of = {v: pos[v] for v in range(n_front)}
    for v, b in back_of.items():
        pos_of.setdefault(b, pos[v])
    for tri in faces:
        for (u, v) in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(u, v), max(u, v))
            if key not in lengths:
                lengths[key] = float(hc.dist(pos_of[u], pos_of[v]))

    marked = {grid_id[(0, 0)]: alphas[0], grid_id[(n, 0)]: alphas[1],
              grid_id[(0, n)]: alphas[2]}
    meta = {"fixture": "sphere3", "alphas": list(alphas), "h": h, "subdiv": n,
            "side_lengths": sides}
    return ConeSurface(np.array(faces, dtype=int), lengths, marked, meta=meta)


# ---------------------------------------------------------------------------
# refinement


def refine(s: ConeSurface) -> ConeSurface:
    """1->4 subdivision at geodesic midpoints; exact on the realized triangles.

    Corner wedges and midpoint half-angles tile each parent face exactly, so
    areas and angle defects are preserved to roundoff."""
    V = s.n_vertices
    mid_id = {e: V + e for e in range(s.n_edges)}
    new_faces = []
    new_lengths = {}

    half = 0.5 * s.lengths
    for e, (i, j) in enumerate(s.edges):
        for (u, v, l) in ((int(i), V + e, half[e]), (int(j), V + e, half[e])):
            new_lengths[(min(u, v), max(u, v))] = float(l)

    corners = hc.canonical_corners(s.face_lengths)
    mids = np.stack([
        hc.bary_point(corners, np.array([0.0, 0.5, 0.5])),
        hc.bary_point(corners, np.array([0.5, 0.0, 0.5])),
        hc.bary_point(corners, np.array([0.5, 0.5, 0.0])),
    ], axis=1)  # (F, 3, 3): mids[f, k] = midpoint of edge opposite corner k
    mm = {}
    for k in range(3):
        a, b = (k + 1) % 3, (k + 2) % 3
        mm[(min(a, b), max(a, b))] = hc.dist(mids[:, a], mids[:, b])

    for f, (v0, v1, v2) in enumerate(s.faces):
        m0, m1, m2 = (mid_id[s.face_edges[f, k]] for k in range(3))
        new_faces += [(int(v0), m2, m1), (int(v1), m0, m2), (int(v2), m1, m0),
                      (m0, m1, m2)]
        for (a, b) in ((0, 1), (1, 2), (0, 2)):
            ia, ib = mid_id[s.face_edges[f, a]], mid_id[s.face_edges[f, b]]
            key = (min(ia, ib), max(ia, ib))
            val = float(mm[(min(a, b), max(a, b))][f])
            prev = new_lengths.get(key)
            if prev is not None and abs(prev - val) > 1e-9:
                raise GeometryError("surface", "refine", "inconsistent midpoint chord",
                                    f"edge {key}: {prev} vs {val}")
            new_lengths[key] = val

    boundary = set(s.boundary)
    for e, (i, j) in enumerate(s.edges):
        if (min(int(i), int(j)), max(int(i), int(j))) in s.boundary_edges:
            boundary.add(mid_id[e])
    meta = dict(s.meta)
    meta["refined_from"] = meta.get("refined_from", 0) + 1
    meta.pop("cone_coords", None)
    meta.pop("ring_radii", None)
    return ConeSurface(np.array(new_faces, dtype=int), new_lengths, s.marked,
                       boundary, meta=meta)


def refine_local(s: ConeSurface, face_mask) -> ConeSurface:
    """Red-green refinement: 1->4 on masked faces, conforming 1->2 closure.

    Midpoint subdivision of realized triangles, so the polyhedral metric is
    unchanged; only resolution improves where asked."""
    face_mask = np.asarray(face_mask, dtype=bool).copy()
    # closure: a face with 2+ split edges must go red; iterate to fixpoint
    split_edge = np.zeros(s.n_edges, dtype=bool)
    while True:
        split_edge[:] = False
        split_edge[s.face_edges[face_mask].ravel()] = True
        n_split = split_edge[s.face_edges].sum(axis=1)
        promote = (~face_mask) & (n_split >= 2)
        if not promote.any():
            break
        face_mask |= promote

    V = s.n_vertices
    mid_id = {}
    new_lengths = {}
    nxt = V
    for e in range(s.n_edges):
        if split_edge[e]:
            mid_id[e] = nxt
            i, j = s.edges[e]
            for u in (int(i), int(j)):
                new_lengths[(min(u, nxt), max(u, nxt))] = float(0.5 * s.lengths[e])
            nxt += 1

    corners = hc.canonical_corners(s.face_lengths)
    new_faces = []
    for f in range(s.n_faces):
        tri = [int(v) for v in s.faces[f]]
        fe = s.face_edges[f]
        n_split = int(split_edge[fe].sum())
        if n_split == 0:
            new_faces.append(tuple(tri))
            continue
        if face_mask[f]:
            mids_pos = [hc.bary_point(corners[f], b) for b in
                        (np.array([0.0, 0.5, 0.5]), np.array([0.5, 0.0, 0.5]),
                         np.array([0.5, 0.5, 0.0]))]
            m = [mid_id[fe[k]] for k in range(3)]
            new_faces += [(tri[0], m[2], m[1]), (tri[1], m[0], m[2]),
                          (tri[2], m[1], m[0]), (m[0], m[1], m[2])]
            for (a, b) in ((0, 1), (1, 2), (0, 2)):
                key = (min(m[a], m[b]), max(m[a], m[b]))
                new_lengths[key] = float(hc.dist(mids_pos[a], mids_pos[b]))
        else:
            k = int(np.argwhere(split_edge[fe])[0][0])
            mid = mid_id[fe[k]]
            mid_pos = hc.bary_point(corners[f], np.roll(np.array([0.0, 0.5, 0.5]), k))
            bisector = float(hc.dist(corners[f, k], mid_pos))
            key = (min(tri[k], mid), max(tri[k], mid))
            new_lengths[key] = bisector
            new_faces += [(tri[k], tri[(k + 1) % 3], mid),
                          (tri[k], mid, tri[(k + 2) % 3])]

    for e, (i, j) in enumerate(s.edges):
        if not split_edge[e]:
            key = (min(int(i), int(j)), max(int(i), int(j)))
            new_lengths[key] = float(s.lengths[e])

    boundary = set(s.boundary)
    for e in mid_id:
        i, j = s.edges[e]
        if (min(int(i), int(j)), max(int(i), int(j))) in s.boundary_edges:
            boundary.add(mid_id[e])
    meta = dict(s.meta)
    meta.pop("cone_coords", None)
    return ConeSurface(np.array(new_faces, dtype=int), new_lengths, s.marked,
                       boundary, meta=meta)


def marked_ring_faces(s: ConeSurface, rings=1):
    """Boolean mask of faces within `rings` combinatorial rings of any marked
    vertex."""
    verts = set(s.marked)
    for _ in range(max(rings - 1, 0)):
        grown = set(verts)
        for v in verts:
            grown.update(s.vertex_neighbors[v])
        verts = grown
    mask = np.zeros(s.n_faces, dtype=bool)
    for v in verts:
        mask[s.vertex_faces[v]] = True
    return mask


# ---------------------------------------------------------------------------
# development around a vertex and geodesic distance


def develop_around_vertex(s: ConeSurface, center: int, max_rho=np.inf,
                          max_rings=None):
    """Develop the polyhedral metric around a vertex into cone coordinates.

    Returns (coords, faces): vid -> (rho, theta mod angle-sum at center) and
    the list of face ids whose three corners were placed consistently.
    Expansion stops at max_rho, at other marked vertices, and wherever a
    placement conflict appears (the developed region stops being a disk)."""
    total = float(s.angle_sums[center])
    coords = {center: (0.0, 0.0)}
    placed_faces = {}
    fan = sorted(s.vertex_faces[center])
    if not fan:
        raise DomainError("surface", "develop_around_vertex", "isolated vertex")

    # walk the fan in orientation order, accumulating the angle at center
    start = fan[0]
    order = [start]
    cur = start
    while True:
        k = list(s.faces[cur]).index(center)
        nxt = s.face_adjacency[cur, (k + 1) % 3]
        if nxt == -1 or nxt == start:
            break
        order.append(int(nxt))
        cur = int(nxt)
        if len(order) > len(fan):
            raise GeometryError("surface", "develop_around_vertex",
                                "fan walk failed", f"vertex {center}")
    if len(order) < len(fan) and center not in s.boundary:
        raise GeometryError("surface", "develop_around_vertex", "non-disk fan",
                            f"vertex {center}")

    theta = 0.0
    for f in order:
        tri = list(s.faces[f])
        k = tri.index(center)
        vb, vc = tri[(k + 1) % 3], tri[(k + 2) % 3]
        lb = s.length_of(center, vb)
        lc = s.length_of(center, vc)
        ang = float(s.angles[f, k])
        if vb not in coords:
            coords[vb] = (lb, theta % total)
        if vc not in coords:
            coords[vc] = (lc, (theta + ang) % total)
        placed_faces[f] = True
        theta += ang

    alpha_eff = total / (2 * np.pi)

    def lift(vid, ref):
        r, t = coords[vid]
        return hc.cone_lift(r, t, alpha_eff, theta_ref=ref)

    def face_consistent(tri):
        for (u, v) in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            ru, tu = coords[u]
            rv, tv = coords[v]
            d = hc.cone_distance(ru, tu, rv, tv, alpha_eff)
            if abs(d - s.length_of(u, v)) > 1e-8 * (1.0 + d):
                return False
        return True

    frontier = list(order)
    seen = set(order)
    while frontier:
        nxt_frontier = []
        for f in sorted(frontier):
            for k in range(3):
                g = int(s.face_adjacency[f, k])
                if g == -1 or g in seen:
                    continue
                tri = [int(v) for v in s.faces[g]]
                known = [v for v in tri if v in coords]
                if len(known) < 2:
                    continue
                seen.add(g)
                if len(known) == 3:
                    # placed via another route; keep only if the wrapped
                    # coordinates still realize this face isometrically
                    if face_consistent(tri):
                        placed_faces[g] = True
                        nxt_frontier.append(g)
                    continue
                new_v = [v for v in tri if v not in coords][0]
                kk = tri.index(new_v)
                a, b = tri[(kk + 1) % 3], tri[(kk + 2) % 3]
                ref = coords[a][1]
                A = lift(a, ref)
                B = lift(b, ref)
                C = hc.place_third(A, B, s.length_of(a, new_v),
                                   s.length_of(b, new_v), side=1.0)
                rho_c = float(np.arccosh(max(C[2], 1.0)))
                th_c = (ref + float(np.arctan2(C[1], C[0]))) % total
                if rho_c > max_rho:
                    continue
                coords[new_v] = (rho_c, th_c)
                placed_faces[g] = True
                if not (new_v in s.marked and new_v != center):
                    # expansion stops at other cone points: their fans do not
                    # develop single-valuedly in this chart
                    nxt_frontier.append(g)
        frontier = nxt_frontier
        if max_rings is not None:
            max_rings -= 1
            if max_rings <= 0:
                break
    return coords, sorted(placed_faces)


def annulus_cone_coords(s: ConeSurface) -> dict:
    """Exact (rho, theta) of every vertex of an annulus-type surface.

    Geodesic triangulations are isometric pieces of the smooth cone, so the
    development around the apex recovers exact model coordinates even after
    refinement.  Cached in the surface meta."""
    if "cone_coords" in s.meta:
        return s.meta["cone_coords"]
    if len(s.marked) != 1:
        raise DomainError("surface", "annulus_cone_coords",
                          "single marked vertex required")
    center = next(iter(s.marked))
    coords, _ = develop_around_vertex(s, center)
    if len(coords) != s.n_vertices:
        raise GeometryError("surface", "annulus_cone_coords",
                            "development did not cover the surface",
                            f"{len(coords)} of {s.n_vertices} vertices")
    s.meta["cone_coords"] = coords
    return coords


def geodesic_distance(s: ConeSurface, a: int, b: int) -> float:
    """Shortest-path distance between two vertices.

    Exact within the mesh's piecewise-geodesic class when an endpoint is a
    marked vertex (cone development); otherwise a Dijkstra upper bound tight
    to O(h) on the structured fixtures."""
    if a == b:
        return 0.0
    graph = sp.coo_matrix(
        (s.lengths, (s.edges[:, 0], s.edges[:, 1])),
        shape=(s.n_vertices, s.n_vertices)).tocsr()
    dmat = csgraph.dijkstra(graph, directed=False, indices=[a])
    ub = float(dmat[0, b])
    if not np.isfinite(ub):
        raise GeometryError("surface", "geodesic_distance", "mesh must be connected",
                            f"no path {a} -> {b}")
    center = None
    if a in s.marked:
        center = a
        other = b
    elif b in s.marked:
        center = b
        other = a
    if center is not None:
        coords, _ = develop_around_vertex(s, center, max_rho=ub + 1e-9)
        if other in coords:
            return min(ub, coords[other][0])
    return ub


# ---------------------------------------------------------------------------
# serialization


def surface_to_json(s: ConeSurface) -> dict:
    verts = []
    for v in range(s.n_vertices):
        entry = {"id": v, "marked": v in s.marked}
        if v in s.marked:
            entry["alpha"] = s.marked[v]
        if v in s.boundary:
            entry["boundary"] = True
        verts.append(entry)
    return {
        "vertices": verts,
        "faces": [[int(x) for x in f] for f in s.faces],
        "edge_lengths": [{"i": int(i), "j": int(j), "l": float(l)}
                         for (i, j), l in zip(map(tuple, s.edges), s.lengths)],
    }


def surface_from_json(data: dict) -> ConeSurface:
    marked = {}
    boundary = []
    for v in data["vertices"]:
        if v.get("marked"):
            marked[int(v["id"])] = float(v["alpha"])
        if v.get("boundary"):
            boundary.append(int(v["id"]))
    lengths = {(min(e["i"], e["j"]), max(e["i"], e["j"])): float(e["l"])
               for e in data["edge_lengths"]}
    return ConeSurface(np.array(data["faces"], dtype=int), lengths, marked, boundary)


def save_surface(s: ConeSurface, path):
    with open(path, "w") as fh:
        json.dump(surface_to_json(s), fh, indent=1, sort_keys=True)


def load_surface(path) -> ConeSurface:
    with open(path) as fh:
        return surface_from_json(json.load(fh))
