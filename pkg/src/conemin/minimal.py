"""Minimal-graph assembly and the inequality suite at critical states.

Given converged maps u1, u2 at a critical conformal structure, the graph of
u2 o u1^{-1} in the metric product is assembled face by face: induced edge
lengths are the root-sum-squares of the two image distances, the composed
map inverts u1 with projective barycentric algebra, and the area functional
uses the integrand sqrt((e1+e2)^2 - 4|phi1+phi2|^2) per face, which makes
Area <= Energy automatic and turns the conformality defect into the gap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import harmonic as hm
from . import hopf as hopf_mod
from . import hypcore as hc
from .errors import DomainError, GeometryError

_DBAR_FLOOR = 1e-12


@dataclass
class ProductGraph:
    """The assembled graph data at one conformal state."""

    domain: object                   # the state surface
    g1: object
    g2: object
    u1: hm.VertexMap
    u2: hm.VertexMap
    fields1: dict
    fields2: dict
    induced_lengths: np.ndarray      # (E,)
    psi: hm.VertexMap                # composed map on g1 vertices
    geom1: hm.MapGeometry
    geom2: hm.MapGeometry

    def induced_face_lengths(self):
        return self.induced_lengths[self.domain.face_edges]

    def vertex_fields(self):
        """Cached star-recovery fields (phi_v, a_v, b_v) for both maps."""
        if not hasattr(self, "_vfields"):
            p1 = hopf_mod.vertex_hopf_field(self.domain, self.g1, self.u1,
                                            geom=self.geom1)
            p2 = hopf_mod.vertex_hopf_field(self.domain, self.g2, self.u2,
                                            geom=self.geom2)
            self._vfields = (p1, p2)
        return self._vfields


@dataclass
class StabilityReport:
    w1: np.ndarray
    w2: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    both_defined: np.ndarray
    w_violation_fraction: float
    e_violation_fraction: float
    hopf_norm_mismatch: float
    second_variation_samples: list
    eps_h: float
    hypothesis_met: bool


def _position_in_frame(geom, f0, fx, corner_pos):
    """Bring a canonical-frame point of face fx into face f0's strip frame."""
    if f0 == fx:
        return corner_pos
    T1, _ = geom._unfold_pair(f0, fx, fx)
    return T1 @ corner_pos


def assemble(state_surface, g1, g2, u1: hm.VertexMap, u2: hm.VertexMap,
             geom1=None, geom2=None) -> ProductGraph:
    """Build the product graph: induced metric plus the composed vertex map.

    Raises when u1 has a nonpositive Jacobian somewhere (the graph is then
    not a graph over the first factor)."""
    dom = state_surface
    if geom1 is None:
        geom1 = hm.MapGeometry(dom, g1)
    if geom2 is None:
        geom2 = hm.MapGeometry(dom, g2)
    ed1 = hm.compute_edge_data(geom1, u1)
    ed2 = hm.compute_edge_data(geom2, u2)
    signs = hm.face_jacobian_signs(geom1, u1, ed1)
    if np.any(signs <= 0):
        f = int(np.argmin(signs))
        raise GeometryError("minimal", "assemble", "not a graph over factor 1",
                            f"u1 Jacobian <= 0 on face {f}")
    induced = np.sqrt(ed1.dist ** 2 + ed2.dist ** 2)
    fields1 = hm.flat_face_fields(dom, g1, u1, geom=geom1, edge_data=ed1)
    fields2 = hm.flat_face_fields(dom, g2, u2, geom=geom2, edge_data=ed2)
    psi = _compose_on_vertices(dom, g1, g2, u1, u2, geom1, geom2)
    return ProductGraph(dom, g1, g2, u1, u2, fields1, fields2, induced, psi,
                        geom1, geom2)


def _compose_on_vertices(dom, g1, g2, u1, u2, geom1, geom2) -> hm.VertexMap:
    """psi = u2 o u1^{-1} evaluated at every g1 vertex.

    For each g1 vertex x, searches the domain faces around x for the one
    whose u1 image contains x (projective barycentric inversion), then pushes
    the same weights through u2."""
    V = g1.n_vertices
    face = np.zeros(V, dtype=int)
    bary = np.zeros((V, 3))
    pinned = np.zeros(V, dtype=bool)
    T1 = geom1.face_strip_transforms(u1)
    T2 = geom2.face_strip_transforms(u2)

    def image_corners(geomX, uX, TX, f):
        tri = dom.faces[f]
        out = np.empty((3, 3))
        out[0] = hc.bary_point(geomX.corners[uX.face[tri[0]]], uX.bary[tri[0]])
        for k in (1, 2):
            own = hc.bary_point(geomX.corners[uX.face[tri[k]]], uX.bary[tri[k]])
            out[k] = TX[f, k - 1] @ own
        return out

    for x in range(V):
        found = None
        best = None
        cand = list(dom.vertex_faces[x])
        seen = set(cand)
        for _ in range(5):  # expand the search by face adjacency if needed
            for f in cand:
                corners1 = image_corners(geom1, u1, T1, f)
                # place the g1 vertex x in the frame of u1(corner0)'s face
                fx = g1.vertex_faces[x][0]
                xpos = hc.canonical_corners(g1.face_lengths[fx])[
                    list(g1.faces[fx]).index(x)]
                xin = _position_in_frame(geom1, int(u1.face[dom.faces[f][0]]),
                                         fx, xpos)
                b = hc.bary_coords(corners1, xin)
                if best is None or b.min() > best[1].min():
                    best = (f, b)
                if b.min() >= -1e-9:
                    found = (f, np.maximum(b, 0.0))
                    break
            if found:
                break
            grow = []
            for f in cand:
                for g in geom1.domain.face_adjacency[f]:
                    if g >= 0 and g not in seen:
                        seen.add(int(g))
                        grow.append(int(g))
            cand = grow
        if found is None and best is not None and best[1].min() > -1e-4:
            # x sits within roundoff-to-mesh-slack of an image edge; clamp
            found = (best[0], np.maximum(best[1], 0.0))
        if not found:
            raise GeometryError("minimal", "assemble",
                                "u1 inversion failed", f"g1 vertex {x}")
        f, b = found
        b = b / b.sum()
        corners2 = image_corners(geom2, u2, T2, f)
        p2 = hc.bary_point(corners2, b)
        f2, b2 = geom2.locate(int(u2.face[dom.faces[f][0]]), p2)
        face[x] = f2
        bary[x] = b2
        pinned[x] = x in g1.marked
    return hm.VertexMap(face, bary, pinned)


def composition_residual(pg: ProductGraph) -> float:
    """max over domain vertices of dist(psi(u1(v)), u2(v)) on g2.

    Exact barycentric bookkeeping keeps this at roundoff for vertices whose
    u1 image lies at a g1 vertex; interior images go through the same
    inversion code path as psi itself."""
    worst = 0.0
    dom = pg.domain
    for v in range(dom.n_vertices):
        b1 = pg.u1.bary[v]
        if b1.max() < 1.0 - 1e-12:
            continue  # u1(v) is not a g1 vertex; covered by psi construction
        x = int(dom.faces[pg.u1.face[v]][int(np.argmax(b1))])
        p_psi = hc.bary_point(pg.geom2.corners[pg.psi.face[x]], pg.psi.bary[x])
        p_u2 = hc.bary_point(pg.geom2.corners[pg.u2.face[v]], pg.u2.bary[v])
        if int(pg.psi.face[x]) != int(pg.u2.face[v]):
            T1, _ = pg.geom2._unfold_pair(int(pg.psi.face[x]),
                                          int(pg.u2.face[v]), int(pg.u2.face[v]))
            p_u2 = T1 @ p_u2
        worst = max(worst, float(hc.dist(p_psi, p_u2)))
    return worst


def induced_cone_angle(pg: ProductGraph, p: int) -> float:
    """Angle sum of the induced metric around the marked vertex (p, p).

    Euclidean corner angles of the induced triangles (curvature-agnostic,
    second-order accurate at mesh scale)."""
    total = 0.0
    L = pg.induced_face_lengths()
    for f in pg.domain.vertex_faces[p]:
        k = list(pg.domain.faces[f]).index(p)
        ang = hc.euclid_angles(L[f][None, :])[0, k]
        total += float(ang)
    return total


def graph_area_euclid(pg: ProductGraph) -> float:
    """Polyhedral area of the induced triangles (Heron)."""
    return float(hc.euclid_area(pg.induced_face_lengths()).sum())


def area_energy_gap(pg: ProductGraph):
    """Area via the product integrand, energy, and their gap.

    Per face the integrand is sqrt((e1+e2)^2 - 4|phi1+phi2|^2) against the
    domain area element; Area <= Energy holds identically and the gap
    vanishes exactly where the Hopf coefficients cancel."""
    e_sum = pg.fields1["energy_density"] + pg.fields2["energy_density"]
    phi_sum = pg.fields1["phi"] + pg.fields2["phi"]
    disc = e_sum ** 2 - 4.0 * np.abs(phi_sum) ** 2
    if np.any(disc < -1e-12):
        f = int(np.argmin(disc))
        raise GeometryError("minimal", "area_energy_gap",
                            "negative area integrand", f"face {f}: {disc[f]}")
    areas = pg.domain.euclid_areas
    area = float(np.dot(areas, np.sqrt(np.maximum(disc, 0.0))))
    energy = float(np.dot(areas, e_sum))
    return {"area": area, "energy": energy, "gap": energy - area,
            "area_induced_euclid": graph_area_euclid(pg)}


def conformality_certificate(pg: ProductGraph):
    """Pointwise Hopf-sum norm and the area-energy gap, both of which must
    be small at certified critical states.

    The pointwise norm uses the per-vertex star recovery: the two maps'
    coefficients share each vertex's frame, so |phi1 + phi2| is chart-free;
    raw per-face coefficients carry a non-decaying checkerboard component
    and are reported separately."""
    (phi1_v, _, _), (phi2_v, _, _) = pg.vertex_fields()
    s = phi1_v + phi2_v
    ok = np.isfinite(s.real)
    phi_sum_face = pg.fields1["phi"] + pg.fields2["phi"]
    gap = area_energy_gap(pg)
    return {
        "max_hopf_sum": float(np.abs(s[ok]).max()),
        "max_hopf_sum_face": float(np.abs(phi_sum_face).max()),
        "gap": gap["gap"],
        "gap_over_energy": gap["gap"] / max(gap["energy"], 1e-300),
        "area": gap["area"],
        "energy": gap["energy"],
    }


# ---------------------------------------------------------------------------
# frame alignment for vector fields along u2


def _image_frame_phases(pg: ProductGraph):
    """Per-vertex rotation from a reference incident face's image frame to
    each incident face's image frame.

    The image realizations of two adjacent faces share an edge whose chord
    has equal length in both frames, so the transition is the pure phase of
    the chord ratio."""
    dom = pg.domain
    d_faces = pg.fields2["edge_dists"][dom.face_edges]
    corners = hm._euclid_corners(d_faces)

    edge_phase = {}
    edge_faces = {}
    for f in range(dom.n_faces):
        for k in range(3):
            edge_faces.setdefault(int(dom.face_edges[f, k]), []).append((f, k))
    for e, inc in edge_faces.items():
        if len(inc) != 2:
            continue
        (f, kf), (g, kg) = inc
        trif = [int(v) for v in dom.faces[f]]
        trig = [int(v) for v in dom.faces[g]]
        pair = [trif[(kf + 1) % 3], trif[(kf + 2) % 3]]
        wf = [corners[f][trif.index(p)] for p in pair]
        wg = [corners[g][trig.index(p)] for p in pair]
        ratio = (wg[1] - wg[0]) / (wf[1] - wf[0])
        edge_phase[(f, g)] = ratio / abs(ratio)
        edge_phase[(g, f)] = np.conj(ratio / abs(ratio))

    ref_face = {}
    phases = {}
    for v in range(dom.n_vertices):
        fan = dom.vertex_faces[v]
        ref = fan[0]
        ref_face[v] = ref
        phases[(v, ref)] = 1.0 + 0.0j
        frontier = [ref]
        placed = {ref}
        while frontier:
            nxt = []
            for f in frontier:
                for g in fan:
                    if g in placed or (f, g) not in edge_phase:
                        continue
                    phases[(v, g)] = phases[(v, f)] * edge_phase[(f, g)]
                    placed.add(g)
                    nxt.append(g)
            frontier = nxt
    return ref_face, phases, edge_phase


def _sample_test_fields(pg: ProductGraph, n_samples, seed, smooth_rounds=3):
    """Random tangent fields along u2, smoothed, zero at marked vertices.

    Each field is a per-vertex complex number in the vertex's reference image
    frame; transport between frames uses the accumulated edge phases."""
    dom = pg.domain
    rng = np.random.default_rng(seed)
    ref_face, phases, edge_phase = _image_frame_phases(pg)

    def vertex_transport(u, v):
        shared = None
        for f in dom.vertex_faces[u]:
            if f in dom.vertex_faces[v]:
                shared = f
                break
        if shared is None:
            return 1.0 + 0.0j
        return phases[(v, shared)].conjugate() * phases[(u, shared)]

    fields = []
    for s in range(n_samples):
        psi = rng.standard_normal(dom.n_vertices) \
            + 1j * rng.standard_normal(dom.n_vertices)
        for v in dom.marked:
            psi[v] = 0.0
        for _ in range(smooth_rounds):
            new = psi.copy()
            for v in range(dom.n_vertices):
                if v in dom.marked:
                    new[v] = 0.0
                    continue
                acc = psi[v]
                cnt = 1.0
                for u in dom.vertex_neighbors[v]:
                    acc += vertex_transport(u, v) * psi[u]
                    cnt += 1.0
                new[v] = acc / cnt
            psi = new
        for v in dom.marked:
            psi[v] = 0.0
        fields.append(psi)
    return fields, ref_face, phases


def second_variation(pg: ProductGraph, psi, ref_face, phases):
    """Discrete second variation of the area under a deformation of u2.

    A'' = E2'' - 4 int |phi'|^2 / (e1 + e2), with E2'' assembled from the
    affine fit of psi per face, the K = -1 curvature term, and
    phi' = del_z psi conj(b) + conj(delbar_z psi) a."""
    dom = pg.domain
    z = hm._euclid_corners(dom.face_lengths)
    a = pg.fields2["a"]
    b = pg.fields2["b"]
    e1 = pg.fields1["energy_density"]
    e2 = pg.fields2["energy_density"]
    areas = dom.euclid_areas

    psi_face = np.empty((dom.n_faces, 3), dtype=complex)
    for f in range(dom.n_faces):
        for k, v in enumerate(dom.faces[f]):
            v = int(v)
            ph = phases.get((v, f), 1.0 + 0.0j)
            psi_face[f, k] = ph * psi[v]
    p, q = hm._affine_fit(z, psi_face)
    psi_bar = psi_face.mean(axis=1)

    grad_term = 2.0 * (np.abs(p) ** 2 + np.abs(q) ** 2)
    curv_term = 2.0 * e2 * np.abs(psi_bar) ** 2
    du_x = a + b
    du_y = 1j * (a - b)
    proj = (np.real(du_x * np.conj(psi_bar)) ** 2
            + np.real(du_y * np.conj(psi_bar)) ** 2)
    E2pp = float(np.dot(areas, grad_term + curv_term - proj))
    phi_prime = p * np.conj(b) + np.conj(q) * a
    corr = 4.0 * float(np.dot(areas, np.abs(phi_prime) ** 2
                              / np.maximum(e1 + e2, 1e-12)))
    App = E2pp - corr
    norm2 = float(np.dot(areas, np.abs(psi_bar) ** 2))
    return App, norm2


def stability_suite(pg: ProductGraph, n_samples=20, seed=0,
                    eps_h=None) -> StabilityReport:
    """Maximum-principle inequalities and second-variation samples.

    Pointwise fields come from the per-vertex star recovery (the per-face
    coefficients do not converge pointwise).  Runs descriptively when the
    angle hypothesis (every alpha_i of g1 below the matching one of g2)
    fails."""
    dom = pg.domain
    if eps_h is None:
        eps_h = 5.0 * float(dom.lengths.max())
    hypothesis = all(pg.g1.marked[v] < pg.g2.marked.get(v, np.inf)
                     for v in pg.g1.marked)
    (phi1_v, a1, b1), (phi2_v, a2, b2) = pg.vertex_fields()
    nd1, ndb1 = np.abs(a1), np.abs(b1)
    nd2, ndb2 = np.abs(a2), np.abs(b2)
    defined = np.isfinite(a1.real) & np.isfinite(a2.real)
    both = defined & (ndb1 > _DBAR_FLOOR) & (ndb2 > _DBAR_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        w1 = np.where(both, np.log(nd1) - np.log(np.maximum(ndb1, 1e-300)), np.inf)
        w2 = np.where(both, np.log(nd2) - np.log(np.maximum(ndb2, 1e-300)), np.inf)
    e1 = np.where(defined, nd1 ** 2 + ndb1 ** 2, np.nan)
    e2 = np.where(defined, nd2 ** 2 + ndb2 ** 2, np.nan)
    w_viol = float(np.mean((w2[both] > w1[both] + eps_h))) if both.any() else 0.0
    e_viol = float(np.mean(e2[defined] > e1[defined] + eps_h))
    hopf_mismatch = float(np.nanmax(np.abs(np.abs(phi1_v) - np.abs(phi2_v))))
    fields, ref_face, phases = _sample_test_fields(pg, n_samples, seed)
    samples = []
    for psi in fields:
        App, norm2 = second_variation(pg, psi, ref_face, phases)
        samples.append({"A_second": App, "psi_norm2": norm2,
                        "ratio": App / max(norm2, 1e-300)})
    return StabilityReport(w1, w2, e1, e2, both, w_viol, e_viol,
                           hopf_mismatch, samples, eps_h, hypothesis)


def w_difference_slope(pg: ProductGraph, p: int, n_rings=6):
    """Fitted slope of (w2 - w1) against the log conformal radius around a
    marked vertex; the continuum value is 2 (alpha'_p - alpha_p)."""
    rep = stability_suite(pg, n_samples=0)
    with np.errstate(invalid="ignore"):
        vals = np.where(rep.both_defined, rep.w2 - rep.w1, np.nan)
    pts, alpha_eff = hopf_mod.ring_profile_vertex(pg.domain, p, vals, n_rings)
    if len(pts) < 3:
        raise DomainError("minimal", "w_difference_slope",
                          ">= 3 populated rings required")
    x = np.array([u for u, _ in pts])
    y = np.array([v for _, v in pts])
    slope, intercept = np.polyfit(x, y, 1)
    return {"slope": float(slope), "intercept": float(intercept),
            "rings": len(pts), "alpha_eff": alpha_eff}
