"""Field-level diagnostics: Hopf coefficients, Bochner residuals, pole fits.

Per-face complex Hopf coefficients live in each face's own conformal chart;
transporting between adjacent charts uses the chord ratio of a shared edge,
which approximates the chart-change derivative to second order.  Elliptic
residuals use the analyst-sign cotangent Laplacian on area-averaged vertex
values (negative at interior maxima, as the maximum-principle arguments
require).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import harmonic as hm
from . import hypcore as hc
from . import surface as sface
from .errors import DomainError, GeometryError

_DBAR_FLOOR = 1e-12


@dataclass
class QuadDiffField:
    """Per-face quadratic-differential coefficient in the face chart frame."""

    phi: np.ndarray                 # (F,) complex
    chart: str                      # "poincare" (centroid charts) or "flat"
    rho2: np.ndarray | float = 4.0  # domain conformal factor per face chart
    pole_orders: dict = field(default_factory=dict)

    def invariant_norm(self, domain=None):
        """Chart-independent pointwise norm |phi| / rho^2."""
        return np.abs(self.phi) / np.asarray(self.rho2)


@dataclass
class ScalarField:
    values: np.ndarray
    role: str


def hopf_field(domain, target, vmap, geom=None, edge_data=None) -> QuadDiffField:
    """phi = sigma^2 del_z u del_z ubar per face, centroid conformal charts."""
    if geom is None:
        geom = hm.MapGeometry(domain, target)
    if edge_data is None:
        edge_data = hm.compute_edge_data(geom, vmap)
    F = domain.n_faces
    phi = np.empty(F, dtype=complex)
    rho2 = np.full(F, 4.0)
    for f in range(F):
        a, b, r2, sigma2 = hm.face_differential(domain, target, vmap, f,
                                                geom=geom, edge_data=edge_data)
        phi[f] = sigma2 * a * np.conj(b)
        rho2[f] = r2
    return QuadDiffField(phi, "poincare", rho2)


def scalar_fields(domain, target, vmap, geom=None, edge_data=None) -> dict:
    """Energy density, Jacobian, frame norms and w per face (flat frames).

    The algebraic identities e = |du|^2 + |dbar u|^2, J = |du|^2 - |dbar u|^2
    and |Phi| = |du| |dbar u| hold exactly for these fields."""
    ff = hm.flat_face_fields(domain, target, vmap, geom=geom, edge_data=edge_data)
    nd = ff["norm_del"]
    ndb = ff["norm_delbar"]
    with np.errstate(divide="ignore"):
        w = np.where(ndb > _DBAR_FLOOR, np.log(nd) - np.log(np.maximum(ndb, 1e-300)),
                     np.inf)
    return {
        "energy_density": ScalarField(ff["energy_density"], "energy_density"),
        "jacobian": ScalarField(ff["jacobian"], "jacobian"),
        "norm_del": ScalarField(nd, "norm_del"),
        "norm_delbar": ScalarField(ndb, "norm_delbar"),
        "w": ScalarField(w, "w"),
        "hopf_norm": ScalarField(ff["hopf_norm"], "hopf_norm"),
        "phi_flat": ff["phi"],
    }


# ---------------------------------------------------------------------------
# chart transport and holomorphicity


def face_chart_corners(domain) -> np.ndarray:
    """(F,3) complex Poincare coordinates of each face's corners in its own
    centroid chart (frame: corner 0 direction)."""
    corners = hc.canonical_corners(domain.face_lengths)
    G = hc.bary_point(corners, np.full(3, 1.0 / 3.0))
    e1 = hc.log_map(G, corners[:, 0])
    n = np.sqrt(np.maximum(hc.mink(e1, e1), 1e-300))
    e1 = e1 / n[:, None]
    e2 = hc.lorentz_cross(G, e1)
    flip = np.array([1.0, 1.0, -1.0])
    L = np.stack([e1 * flip, e2 * flip, G * np.array([-1.0, -1.0, 1.0])], axis=1)
    moved = np.einsum("fab,fkb->fka", L, corners)
    return hc.poincare_from_hyperboloid(moved)


def _edge_chart_transitions(domain, chart_corners):
    """For each interior edge: faces (f, g), and the chart-change derivative
    T = dz_g / dz_f along the shared edge (chord ratio)."""
    edge_faces = {}
    for f in range(domain.n_faces):
        for k in range(3):
            edge_faces.setdefault(int(domain.face_edges[f, k]), []).append((f, k))
    rows = []
    for e in range(domain.n_edges):
        inc = edge_faces.get(e, [])
        if len(inc) != 2:
            continue
        (f, kf), (g, kg) = inc
        trif = [int(v) for v in domain.faces[f]]
        trig = [int(v) for v in domain.faces[g]]
        pf = [trif[(kf + 1) % 3], trif[(kf + 2) % 3]]
        zf_pair = [chart_corners[f][trif.index(p)] for p in pf]
        zg_pair = [chart_corners[g][trig.index(p)] for p in pf]
        T = (zg_pair[1] - zg_pair[0]) / (zf_pair[1] - zf_pair[0])
        rows.append((e, f, g, T))
    return rows


class ChartAtlas:
    """Cached per-surface chart corners and edge transitions."""

    def __init__(self, domain):
        self.domain = domain
        self.corners = face_chart_corners(domain)
        self.transitions = _edge_chart_transitions(domain, self.corners)


def holomorphicity_residual(domain, q: QuadDiffField, atlas=None) -> float:
    """Area-weighted discrete dbar mismatch of the field across interior
    edges, normalized by the field's own size; zero for fields that are
    holomorphic in the mesh's representable class."""
    if atlas is None:
        atlas = ChartAtlas(domain)
    if float(np.max(q.invariant_norm())) < 1e-12:
        return 0.0  # the zero field is holomorphic
    num = 0.0
    den = 0.0
    for (e, f, g, T) in atlas.transitions:
        wgt = (domain.areas[f] + domain.areas[g]) / 3.0
        phi_g_in_f = q.phi[g] * T * T
        num += wgt * abs(q.phi[f] - phi_g_in_f)
        den += wgt * 0.5 * (abs(q.phi[f]) + abs(phi_g_in_f))
    if den <= 1e-300:
        return 0.0
    return float(num / den)


# ---------------------------------------------------------------------------
# vertex-based elliptic residuals


def face_to_vertex(domain, face_values):
    """Area-weighted average of face values onto vertices."""
    V = domain.n_vertices
    num = np.zeros(V)
    den = np.zeros(V)
    rows = domain.faces.ravel()
    np.add.at(num, rows, np.repeat(domain.areas * 1.0, 3) * np.repeat(face_values, 3))
    np.add.at(den, rows, np.repeat(domain.areas, 3))
    return num / np.maximum(den, 1e-300)


def cot_laplacian(domain, vertex_values):
    """Analyst-sign cotangent Laplacian: (1/A_v) sum_j w_vj (f_j - f_v)."""
    V = domain.n_vertices
    i = domain.edges[:, 0]
    j = domain.edges[:, 1]
    w = domain.cot_weights
    diff = vertex_values[j] - vertex_values[i]
    out = np.zeros(V)
    np.add.at(out, i, w * diff)
    np.add.at(out, j, -w * diff)
    return out / np.maximum(domain.vertex_areas, 1e-300)


def recovered_laplacian(domain, vertex_values, rings=2):
    """Pointwise-consistent Laplacian by quadratic fits in normal coordinates.

    At the center of geodesic normal coordinates the Laplace-Beltrami
    operator is the flat Laplacian, so a least-squares quadratic over the
    2-ring gives f_xx + f_yy with O(h) consistency on any mesh.  (The
    cotangent stencil is only weakly consistent and fails pointwise on
    anisotropic stars, which is fatal for residual-decay diagnostics.)"""
    V = domain.n_vertices
    out = np.full(V, np.nan)
    vals = np.asarray(vertex_values, dtype=float)
    skip = set(domain.marked) | set(domain.boundary)
    for v in range(V):
        if v in skip:
            continue
        coords, _ = sface.develop_around_vertex(domain, v, max_rings=rings)
        total = float(domain.angle_sums[v])
        scale = 2 * np.pi / total
        xs, ys, rhs = [], [], []
        for u, (r, t) in coords.items():
            if not np.isfinite(vals[u]):
                continue
            xs.append(r * np.cos(t * scale))
            ys.append(r * np.sin(t * scale))
            rhs.append(vals[u] - vals[v])
        if len(xs) < 7:
            continue
        x = np.array(xs)
        y = np.array(ys)
        # standardize: anisotropic stencils (thin annulus cells) otherwise
        # make the normal equations hopelessly ill-conditioned
        sx = max(float(np.std(x)), 1e-12)
        sy = max(float(np.std(y)), 1e-12)
        xn = x / sx
        yn = y / sy
        A = np.stack([np.ones_like(xn), xn, yn,
                      0.5 * xn * xn, xn * yn, 0.5 * yn * yn], axis=1)
        try:
            sol, *_ = np.linalg.lstsq(A, np.array(rhs), rcond=None)
        except np.linalg.LinAlgError:
            continue
        out[v] = sol[3] / (sx * sx) + sol[5] / (sy * sy)
    return out


def interior_vertices(domain, exclude_marked_rings=1, metric_margin=None):
    """Vertices away from the boundary and from marked-vertex neighborhoods.

    With metric_margin, a FIXED geodesic disk of that radius is removed
    around each marked vertex (and a matching collar along the boundary):
    the pointwise elliptic identities degenerate like log r at the cones, so
    residual-decay studies must hold the excluded region fixed as h -> 0."""
    bad = set(domain.boundary)
    ring = set(domain.marked)
    for _ in range(exclude_marked_rings):
        grown = set(ring)
        for v in ring:
            grown.update(domain.vertex_neighbors[v])
        ring = grown
    bad |= ring
    for v in domain.boundary:
        bad.update(domain.vertex_neighbors[v])
    if metric_margin is not None:
        for p in domain.marked:
            coords, _ = sface.develop_around_vertex(domain, p,
                                                    max_rho=metric_margin * 1.5)
            for v, (r, t) in coords.items():
                if r < metric_margin:
                    bad.add(v)
        if domain.boundary:
            lengths = domain.lengths
            depth = int(np.ceil(metric_margin / max(lengths.min(), 1e-9)))
            collar = set(domain.boundary)
            for _ in range(min(depth, 3)):
                grown = set(collar)
                for v in collar:
                    grown.update(domain.vertex_neighbors[v])
                collar = grown
            bad |= collar
    return np.array([v for v in range(domain.n_vertices) if v not in bad], dtype=int)


def vertex_derivative_recovery(domain, target, vmap, geom=None, edge_data=None):
    """Per-vertex map derivatives by least squares over the vertex star.

    Both sides use exact normal coordinates at the vertex (domain: fan
    development; target: log directions from the edge strips), giving
    second-order-accurate point samples of del u and delbar u, smooth enough
    to sit under a discrete Laplacian.  Marked and boundary vertices are
    skipped (NaN)."""
    if geom is None:
        geom = hm.MapGeometry(domain, target)
    if edge_data is None:
        edge_data = hm.compute_edge_data(geom, vmap)
    V = domain.n_vertices
    a = np.full(V, np.nan, dtype=complex)
    b = np.full(V, np.nan, dtype=complex)
    skip = set(domain.marked) | set(domain.boundary)
    pos = hc.bary_point(geom.corners[vmap.face], vmap.bary)
    e1, e2 = hm._frames_at(pos)
    for v in range(V):
        if v in skip:
            continue
        coords, _ = sface.develop_around_vertex(domain, v, max_rings=1)
        total = float(domain.angle_sums[v])
        scale = 2 * np.pi / total
        zs, ws = [], []
        for u in domain.vertex_neighbors[v]:
            if u not in coords:
                continue
            r, t = coords[u]
            zs.append(r * np.exp(1j * t * scale))
            e = domain.edge_index[(min(u, v), max(u, v))]
            log_vec = edge_data.log_i[e] if v < u else edge_data.log_j[e]
            ws.append(hc.mink(log_vec, e1[v]) + 1j * hc.mink(log_vec, e2[v]))
        if len(zs) < 3:
            continue
        z = np.array(zs)
        w = np.array(ws)
        M = np.array([[np.sum(np.abs(z) ** 2), np.sum(np.conj(z) ** 2)],
                      [np.sum(z ** 2), np.sum(np.abs(z) ** 2)]])
        rhs = np.array([np.sum(np.conj(z) * w), np.sum(z * w)])
        try:
            sol = np.linalg.solve(M, rhs)
        except np.linalg.LinAlgError:
            continue
        a[v], b[v] = sol
    return a, b


def bochner_residual(domain, target, vmap, geom=None, edge_data=None):
    """Residual fields of the elliptic identities for harmonic maps.

    r_plus  = Lap log|du|    - (|du|^2 - |dbar u|^2 - 1)
    r_minus = Lap log|dbaru| - (-|du|^2 + |dbar u|^2 - 1)
    r_w     = Lap w - 2 (|du|^2 - |dbar u|^2)

    The w-equation's right side is evaluated through the exact algebraic
    identity 4 |Phi| sinh(w) = 2(|du|^2 - |dbar u|^2), which stays finite on
    conformal patches where w itself blows up.  Vertices whose recovered
    |dbar u| falls below threshold are excluded from r_minus and r_w and
    listed.  Derivatives come from the vertex-star least-squares recovery;
    plain face averages are too rough to sit under the Laplacian."""
    a, b = vertex_derivative_recovery(domain, target, vmap, geom=geom,
                                      edge_data=edge_data)
    defined = np.isfinite(a.real)
    nd_v = np.where(defined, np.abs(a), 1.0)
    ndb_v = np.where(defined, np.abs(b), 1.0)
    jac_v = np.where(defined, nd_v ** 2 - ndb_v ** 2, 0.0)

    log_nd = np.where(defined, np.log(np.maximum(nd_v, 1e-300)), np.nan)
    lap_nd = recovered_laplacian(domain, log_nd)
    r_plus = lap_nd - (jac_v - 1.0)
    ok_plus = defined & np.isfinite(lap_nd)
    r_plus[~ok_plus] = 0.0

    ok = defined & (ndb_v > _DBAR_FLOOR)
    excluded = sorted(int(v) for v in np.nonzero(defined & ~ok)[0])
    log_ndb = np.where(ok, np.log(np.maximum(ndb_v, 1e-300)), np.nan)
    lap_ndb = recovered_laplacian(domain, log_ndb)
    ok_minus = ok & np.isfinite(lap_ndb)
    r_minus = lap_ndb - (-jac_v - 1.0)
    r_minus[~ok_minus] = 0.0
    w_v = np.where(ok, log_nd - log_ndb, np.nan)
    lap_w = recovered_laplacian(domain, w_v)
    ok_w = ok & np.isfinite(lap_w)
    r_w = lap_w - 2.0 * jac_v
    r_w[~ok_w] = 0.0

    return {"r_plus": r_plus, "r_minus": r_minus, "r_w": r_w,
            "excluded": excluded, "star_ok": ok_w,
            "defined": ok_plus}


# ---------------------------------------------------------------------------
# rings around a marked vertex and pole-order fits


def vertex_hopf_field(domain, target, vmap, geom=None, edge_data=None):
    """Per-vertex Hopf coefficient phi_v = a_v conj(b_v) from the star
    recovery, in each vertex's own development frame.

    Sums and norms of per-vertex coefficients are frame-invariant (both
    maps' recoveries share the vertex frame), which is what the certificates
    need; only cross-vertex comparisons require the edge rotations below."""
    a, b = vertex_derivative_recovery(domain, target, vmap, geom=geom,
                                      edge_data=edge_data)
    phi = a * np.conj(b)
    return phi, a, b


def vertex_edge_rotations(domain):
    """Frame rotation along each edge: a tangent direction with angle beta
    in endpoint i's development frame has angle beta + r in endpoint j's.

    r = (theta_ji + pi) - theta_ij with the development angles of the edge
    at its two endpoints (exact parallel transport along the edge)."""
    cached = getattr(domain, "_edge_rotation_cache", None)
    if cached is not None and len(cached) == domain.n_edges:
        return cached
    V = domain.n_vertices
    dev = {}
    for v in range(V):
        if v in domain.marked or v in domain.boundary:
            continue
        coords, _ = sface.develop_around_vertex(domain, v, max_rings=1)
        scale = 2 * np.pi / float(domain.angle_sums[v])
        dev[v] = {u: t * scale for u, (r, t) in coords.items()}
    rot = np.full(domain.n_edges, np.nan)
    for e, (i, j) in enumerate(map(tuple, domain.edges)):
        if i not in dev or j not in dev:
            continue
        if j not in dev[i] or i not in dev[j]:
            continue
        rot[e] = (dev[j][i] + np.pi) - dev[i][j]
    domain._edge_rotation_cache = rot
    return rot


def holomorphicity_residual_vertex(domain, phi_v) -> float:
    """Edge-mismatch dbar residual of a per-vertex coefficient field.

    phi_v entries are in each vertex's development frame; NaN marks
    undefined vertices.  Zero for exactly parallel (constant) fields and
    O(h) for smoothly varying holomorphic ones."""
    rot = vertex_edge_rotations(domain)
    num = 0.0
    den = 0.0
    for e, (i, j) in enumerate(map(tuple, domain.edges)):
        if not np.isfinite(rot[e]):
            continue
        pi_ = phi_v[i]
        pj = phi_v[j]
        if not (np.isfinite(pi_.real) and np.isfinite(pj.real)):
            continue
        w = domain.vertex_areas[i] + domain.vertex_areas[j]
        pj_in_i = pj * np.exp(2j * rot[e])
        num += w * abs(pi_ - pj_in_i)
        den += w * 0.5 * (abs(pi_) + abs(pj))
    if den <= 1e-300:
        return 0.0
    return float(num / den)


def bochner_residual_analytic(domain, profile):
    """Oracle-field residual: the radial profile's fields sampled at the
    mesh vertices and pushed through the discrete Laplacian.

    This isolates the continuum identity plus operator consistency from the
    inner solver's own pointwise error (second derivatives of a first-order
    finite-element solution do not converge pointwise, so the recovered-field
    residual cannot decay; the oracle-field residual can and must)."""
    coords = sface.annulus_cone_coords(domain)
    V = domain.n_vertices
    rho = np.array([coords[v][0] for v in range(V)])
    with np.errstate(divide="ignore", invalid="ignore"):
        nd = profile.norm_del(np.maximum(rho, 1e-12))
        ndb = profile.norm_delbar(np.maximum(rho, 1e-12))
    defined = rho > 0
    log_nd = np.where(defined, np.log(np.maximum(nd, 1e-300)), np.nan)
    lap = recovered_laplacian(domain, log_nd)
    r_plus = lap - (nd ** 2 - ndb ** 2 - 1.0)
    ok = defined & np.isfinite(lap)
    r_plus[~ok] = 0.0
    return {"r_plus": r_plus, "defined": ok, "rho": rho}


def cone_rings(domain, p, n_rings=None):
    """Combinatorial vertex rings around p with exact development radii.

    Returns (ring_index per vertex or -1, rho per vertex, alpha_eff)."""
    if p not in domain.marked:
        raise DomainError("hopf", "cone_rings", "marked vertex required")
    coords, _ = sface.develop_around_vertex(domain, p)
    Vr = np.full(domain.n_vertices, -1, dtype=int)
    Vr[p] = 0
    frontier = [p]
    ring = 0
    while frontier:
        ring += 1
        nxt = []
        for v in frontier:
            for u in domain.vertex_neighbors[v]:
                if Vr[u] < 0:
                    Vr[u] = ring
                    nxt.append(u)
        frontier = nxt
        if n_rings is not None and ring >= n_rings:
            break
    rho = np.full(domain.n_vertices, np.nan)
    for v, (r, t) in coords.items():
        rho[v] = r
    alpha_eff = float(domain.angle_sums[p] / (2 * np.pi))
    return Vr, rho, alpha_eff


def conformal_radius(rho, alpha_eff):
    """Chart radius |z| = (alpha * tanh(rho/2))^(1/alpha) of the cone chart."""
    return (alpha_eff * np.tanh(np.asarray(rho) / 2.0)) ** (1.0 / alpha_eff)


def ring_profile(domain, p, face_values, n_rings, min_faces=2):
    """Per-ring (log conformal radius, area-weighted mean value).

    A face belongs to ring k if the smallest ring index of its corners is k;
    rings 1..n_rings are returned where populated."""
    Vr, rho, alpha_eff = cone_rings(domain, p, n_rings=n_rings + 1)
    face_ring = Vr[domain.faces].min(axis=1)
    corner_rho = np.where(rho[domain.faces] > 0, rho[domain.faces], np.nan)
    out = []
    for k in range(1, n_rings + 1):
        sel = face_ring == k
        if sel.sum() < min_faces:
            continue
        vals = face_values[sel]
        wgt = domain.areas[sel]
        good = np.isfinite(vals)
        if good.sum() < min_faces:
            continue
        mean_rho = float(np.nanmean(corner_rho[sel]))
        r_conf = float(conformal_radius(mean_rho, alpha_eff))
        out.append((np.log(r_conf),
                    float(np.sum(wgt[good] * vals[good]) / np.sum(wgt[good]))))
    return out, alpha_eff


def pole_order_estimate(domain, q: QuadDiffField, p, n_rings=6):
    """Least-squares slope of log|phi| against log r around a marked vertex.

    phi is transported from face charts to the cone's conformal chart before
    fitting; continuum fields with a pole of order n have slope -n."""
    if p not in domain.marked:
        raise DomainError("hopf", "pole_order_estimate", "marked vertex required")
    if len(domain.vertex_faces[p]) < 8:
        raise DomainError("hopf", "pole_order_estimate",
                          "fan of >= 8 faces required", f"vertex {p}")
    scale = float(np.abs(q.phi).max())
    if scale < 1e-14:
        return {"order": 0.0, "slope": 0.0, "fit_residual": 0.0, "zero_field": True}

    phi_cone = transport_to_cone_chart(domain, q, p)
    vals = np.abs(phi_cone)
    pts, alpha_eff = ring_profile(domain, p, vals, n_rings)
    pts = [(x, v) for (x, v) in pts if v > 1e-300]
    if len(pts) < 3:
        raise DomainError("hopf", "pole_order_estimate",
                          ">= 3 populated rings required", f"got {len(pts)}")
    x = np.array([a for a, _ in pts])
    y = np.log(np.array([b for _, b in pts]))
    slope, intercept = np.polyfit(x, y, 1)
    resid = float(np.sqrt(np.mean((y - (slope * x + intercept)) ** 2)))
    return {"order": float(-slope), "slope": float(slope),
            "fit_residual": resid, "zero_field": False, "n_rings": len(pts)}


def ring_profile_vertex(domain, p, vertex_values, n_rings, min_verts=3):
    """Per-ring (log conformal radius, mean value) of a vertex field."""
    Vr, rho, alpha_eff = cone_rings(domain, p, n_rings=n_rings + 1)
    vals = np.asarray(vertex_values, dtype=float)
    out = []
    for k in range(1, n_rings + 1):
        sel = np.nonzero((Vr == k) & np.isfinite(vals) & (rho > 0))[0]
        if len(sel) < min_verts:
            continue
        r_conf = conformal_radius(float(np.mean(rho[sel])), alpha_eff)
        out.append((float(np.log(r_conf)), float(np.mean(vals[sel]))))
    return out, alpha_eff


def pole_order_estimate_vertex(domain, phi_v, p, n_rings=6):
    """Pole-order fit of a per-vertex coefficient field around p.

    Ring means of |phi_v| (invariant norms) against the cone chart radius;
    same contract as pole_order_estimate but fed by the star recovery, which
    is the convergent pointwise representation of a solved map's Hopf
    field."""
    if p not in domain.marked:
        raise DomainError("hopf", "pole_order_estimate", "marked vertex required")
    if len(domain.vertex_faces[p]) < 8:
        raise DomainError("hopf", "pole_order_estimate",
                          "fan of >= 8 faces required", f"vertex {p}")
    vals = np.abs(phi_v)
    scale = np.nanmax(vals)
    if not np.isfinite(scale) or scale < 1e-14:
        return {"order": 0.0, "slope": 0.0, "fit_residual": 0.0, "zero_field": True}
    pts, alpha_eff = ring_profile_vertex(domain, p, vals, n_rings)
    pts = [(x, v) for (x, v) in pts if v > 1e-300]
    if len(pts) < 3:
        raise DomainError("hopf", "pole_order_estimate",
                          ">= 3 populated rings required", f"got {len(pts)}")
    x = np.array([a for a, _ in pts])
    y = np.log(np.array([b for _, b in pts]))
    slope, intercept = np.polyfit(x, y, 1)
    resid = float(np.sqrt(np.mean((y - (slope * x + intercept)) ** 2)))
    return {"order": float(-slope), "slope": float(slope),
            "fit_residual": resid, "zero_field": False, "n_rings": len(pts)}


def transport_to_cone_chart(domain, q: QuadDiffField, p, max_rings=None):
    """phi per face expressed in the cone conformal chart centered at p.

    Faces outside the development get NaN.  The chart-change derivative is
    approximated by the chord ratio of one face edge in both charts."""
    coords, placed = sface.develop_around_vertex(domain, p)
    alpha_eff = float(domain.angle_sums[p] / (2 * np.pi))
    chart_c = face_chart_corners(domain)
    F = domain.n_faces
    out = np.full(F, np.nan + 0j, dtype=complex)
    placed_set = set(placed)
    for f in range(F):
        if f not in placed_set:
            continue
        tri = [int(v) for v in domain.faces[f]]
        if any(v not in coords for v in tri):
            continue
        # pick the corner pair away from the apex for the chord
        pair = [v for v in tri if v != p][:2]
        zc = []
        ref = coords[pair[0]][1]
        for v in pair:
            r, t = coords[v]
            if r <= 0:
                zc = None
                break
            twrapped = ref + float(hc.wrap_angle(t - ref, alpha_eff))
            zc.append((alpha_eff * np.tanh(r / 2.0)) ** (1.0 / alpha_eff)
                      * np.exp(1j * twrapped / alpha_eff))
        if zc is None:
            continue
        zf = [chart_c[f][tri.index(v)] for v in pair]
        T = (zc[1] - zc[0]) / (zf[1] - zf[0])  # d z_cone / d z_face
        out[f] = q.phi[f] / (T * T)
    return out
