"""Discrete harmonic maps into a fixed cone-surface target.

A map assigns each domain vertex an image (target face, projective
barycentric coordinates).  The discrete Dirichlet energy is
(1/2) sum_e w_e d(u_i, u_j)^2 with cotangent weights w_e from the domain and
geodesic distances d on the target.  Distances, log directions, and Jacobian
signs are computed by unfolding short strips of target faces into the
hyperboloid; each strip collapses to a cached Lorentz transform, so the hot
loop is pure array arithmetic.  Minimization is nonlinear Gauss-Seidel with
weighted-centroid vertex moves (color blocks, deterministic order), with
optional over-relaxation safeguarded by local energy decrease.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import hypcore as hc
from .errors import DomainError, GeometryError, SolverError

_ETA = np.diag([1.0, 1.0, -1.0])
_MAX_PATH = 96   # must exceed half the largest cone-fan degree
_JAC_FLOOR = 1e-10


@dataclass
class VertexMap:
    """Per-vertex image: target face id and projective barycentric coords."""

    face: np.ndarray           # (V,) int
    bary: np.ndarray           # (V,3) float, rows sum to 1
    pinned: np.ndarray         # (V,) bool

    def copy(self) -> "VertexMap":
        return VertexMap(self.face.copy(), self.bary.copy(), self.pinned.copy())

    def to_json(self) -> dict:
        return {str(v): {"face": int(self.face[v]),
                         "bary": [float(x) for x in self.bary[v]],
                         "pinned": bool(self.pinned[v])}
                for v in range(len(self.face))}

    @classmethod
    def from_json(cls, data: dict) -> "VertexMap":
        n = len(data)
        face = np.zeros(n, dtype=int)
        bary = np.zeros((n, 3))
        pinned = np.zeros(n, dtype=bool)
        for key, rec in data.items():
            v = int(key)
            face[v] = rec["face"]
            bary[v] = rec["bary"]
            pinned[v] = rec.get("pinned", False)
        return cls(face, bary, pinned)


def identity_map(domain, target) -> VertexMap:
    """Index map between surfaces of shared combinatorics; marked and
    boundary vertices pinned."""
    if domain.n_vertices != target.n_vertices or domain.n_faces != target.n_faces:
        raise DomainError("harmonic", "identity_map", "shared combinatorics required")
    V = domain.n_vertices
    face = np.zeros(V, dtype=int)
    bary = np.zeros((V, 3))
    for v in range(V):
        f = target.vertex_faces[v][0]
        face[v] = f
        bary[v, list(target.faces[f]).index(v)] = 1.0
    pinned = np.zeros(V, dtype=bool)
    pinned[list(domain.marked)] = True
    pinned[list(domain.boundary)] = True
    return VertexMap(face, bary, pinned)


def dirichlet_weights(domain) -> np.ndarray:
    """Cotangent edge weights from the Euclidean realizations of the faces."""
    return domain.cot_weights.copy()


def _child_face_bary(face, bary, lengths):
    """Map a coarse (face, bary) to the 1->4 refined child face and bary.

    Children of face f sit at 4f + (corner0, corner1, corner2, central).  In
    projective barycentric coordinates the subdivision regions are bounded by
    the lines b_k = 1/2; the in-child weights pick up the normalization
    factor s_k = 2 cosh(l_k / 2) of each midpoint vertex (lengths[k] is the
    coarse edge opposite corner k)."""
    b0, b1, b2 = bary
    s = 2.0 * np.cosh(0.5 * np.asarray(lengths))
    if b0 >= 0.5:
        w = np.array([b0 - b1 - b2, b1 * s[2], b2 * s[1]])
        child = 0
    elif b1 >= 0.5:
        w = np.array([b1 - b0 - b2, b2 * s[0], b0 * s[2]])
        child = 1
    elif b2 >= 0.5:
        w = np.array([b2 - b0 - b1, b0 * s[1], b1 * s[0]])
        child = 2
    else:
        w = np.array([(1 - 2 * b0) * s[0], (1 - 2 * b1) * s[1], (1 - 2 * b2) * s[2]])
        child = 3
    return 4 * face + child, w / w.sum()


def prolong_map(vmap: VertexMap, domain_coarse, target_coarse, domain_fine,
                target_fine) -> VertexMap:
    """Carry a converged map to the refined pair as a warm start.

    Original vertices keep their (exactly subdivided) images; new midpoint
    vertices start at the geodesic midpoint of their edge endpoints' images."""
    geom_c = MapGeometry(domain_coarse, target_coarse)
    geom_f = MapGeometry(domain_fine, target_fine)
    ed = compute_edge_data(geom_c, vmap)
    Vc = domain_coarse.n_vertices
    Vf = domain_fine.n_vertices
    face = np.zeros(Vf, dtype=int)
    bary = np.zeros((Vf, 3))
    pinned = np.zeros(Vf, dtype=bool)
    for v in range(Vc):
        f, b = _child_face_bary(int(vmap.face[v]), vmap.bary[v],
                                target_coarse.face_lengths[int(vmap.face[v])])
        b = np.maximum(b, 0.0)
        face[v] = f
        bary[v] = b / b.sum()
        pinned[v] = vmap.pinned[v]
    fine_boundary = domain_fine.boundary
    for e in range(domain_coarse.n_edges):
        v_new = Vc + e
        mid = hc.normalize_point(ed.pos_i[e] + ed.pos_j_in_i[e])
        # express the midpoint in a fine child frame of the coarse face F_i
        Fi = int(vmap.face[domain_coarse.edges[e, 0]])
        child = 4 * Fi + 3
        Tc = _coarse_to_child_transform(geom_c, geom_f, Fi, child)
        f_new, b_new = geom_f.locate(child, Tc @ mid)
        face[v_new] = f_new
        bary[v_new] = b_new
        pinned[v_new] = v_new in fine_boundary
    out = VertexMap(face, bary, pinned)
    # pinned boundary midpoints must land exactly on their target midpoints
    for e in range(domain_coarse.n_edges):
        v_new = Vc + e
        if pinned[v_new]:
            f0 = target_fine.vertex_faces[v_new][0]
            out.face[v_new] = f0
            out.bary[v_new] = 0.0
            out.bary[v_new, list(target_fine.faces[f0]).index(v_new)] = 1.0
    return out


def _coarse_to_child_transform(geom_c, geom_f, coarse_face, child_face):
    """Lorentz map from the coarse face's canonical frame to the child's."""
    Vc = geom_c.corners[coarse_face]
    tri_f = geom_f.target.faces[child_face]
    n_coarse = geom_c.target.n_vertices
    pos_in_coarse = []
    tri_c = [int(v) for v in geom_c.target.faces[coarse_face]]
    for v in tri_f:
        v = int(v)
        if v < n_coarse:
            pos_in_coarse.append(Vc[tri_c.index(v)])
        else:
            e = v - n_coarse
            i, j = geom_c.target.edges[e]
            pos_in_coarse.append(hc.normalize_point(Vc[tri_c.index(int(i))]
                                                    + Vc[tri_c.index(int(j))]))
    U = np.stack(pos_in_coarse)
    return np.linalg.solve(U, geom_f.corners[child_face]).T


class MapGeometry:
    """Strip-unfolding caches for one (domain, target) pair."""

    def __init__(self, domain, target):
        self.domain = domain
        self.target = target
        self.corners = hc.canonical_corners(target.face_lengths)  # (F,3,3)
        self._bfs_cache = {}
        self._unfold_cache = {}
        self._pair_cache = {}
        E = domain.n_edges
        self._tr = np.tile(np.eye(3), (E, 1, 1))
        self._tr_faces = np.full((E, 2), -1, dtype=int)
        F = domain.n_faces
        self._ftr = np.tile(np.eye(3), (F, 2, 1, 1))
        self._ftr_faces = np.full((F, 3), -1, dtype=int)
        self._cycles = self._vertex_face_cycles(target)
        self._same_face_ids = (domain.n_faces == target.n_faces
                               and np.array_equal(domain.faces, target.faces))
        self._edge_faces = {}
        for f in range(target.n_faces):
            for k in range(3):
                self._edge_faces.setdefault(int(target.face_edges[f, k]), []).append(f)

    @staticmethod
    def _vertex_face_cycles(target):
        """Fan faces around each target vertex in orientation order."""
        cycles = []
        for v in range(target.n_vertices):
            fan = target.vertex_faces[v]
            if not fan:
                cycles.append([])
                continue
            start = fan[0]
            # walk backwards first so open (boundary) fans start at one end
            cur = start
            for _ in range(len(fan) + 1):
                k = list(target.faces[cur]).index(v)
                prv = int(target.face_adjacency[cur, (k + 2) % 3])
                if prv == -1 or prv == start:
                    break
                cur = prv
            first = cur
            order = [first]
            cur = first
            for _ in range(len(fan)):
                k = list(target.faces[cur]).index(v)
                nxt = int(target.face_adjacency[cur, (k + 1) % 3])
                if nxt == -1 or nxt == first:
                    break
                order.append(nxt)
                cur = nxt
            cycles.append(order)
        return cycles

    def _fan_arc(self, v, f_from, f_to):
        """Shortest arc of fan faces around v from f_from to f_to, or None."""
        cyc = self._cycles[v]
        if f_from not in cyc or f_to not in cyc:
            return None
        a, b = cyc.index(f_from), cyc.index(f_to)
        n = len(cyc)
        closed = n == len(self.target.vertex_faces[v]) and v not in self.target.boundary
        fwd = [cyc[(a + s) % n] for s in range(((b - a) % n) + 1)]
        bwd = [cyc[(a - s) % n] for s in range(((a - b) % n) + 1)]
        if not closed:
            fwd = fwd if a <= b else None
            bwd = bwd if a >= b else None
            options = [p for p in (fwd, bwd) if p is not None]
        else:
            options = [fwd, bwd]
        if not options:
            return None
        return min(options, key=len)

    # -- target strip machinery -------------------------------------------

    def _face_path(self, f0, f1):
        """Shortest dual-graph path of target faces, deterministic BFS."""
        if f0 == f1:
            return (f0,)
        key = (f0, f1)
        hit = self._bfs_cache.get(key)
        if hit is not None:
            return hit
        prev = {f0: -1}
        frontier = [f0]
        found = False
        for _ in range(_MAX_PATH):
            nxt = []
            for f in frontier:
                for g in self.target.face_adjacency[f]:
                    g = int(g)
                    if g < 0 or g in prev:
                        continue
                    prev[g] = f
                    if g == f1:
                        found = True
                        break
                    nxt.append(g)
                if found:
                    break
            if found:
                break
            frontier = nxt
        if not found:
            raise GeometryError("harmonic", "face_path", "image faces too far apart",
                                f"faces {f0} -> {f1}")
        path = [f1]
        while path[-1] != f0:
            path.append(prev[path[-1]])
        path.reverse()
        out = tuple(path)
        self._bfs_cache[key] = out
        return out

    def _unfold_transform(self, path):
        """Lorentz map taking path[-1]'s canonical frame into path[0]'s."""
        hit = self._unfold_cache.get(path)
        if hit is not None:
            return hit
        placed = self.corners[path[0]].copy()
        tri0 = [int(v) for v in self.target.faces[path[0]]]
        pos = {tri0[k]: placed[k] for k in range(3)}
        for g in path[1:]:
            tri = [int(v) for v in self.target.faces[g]]
            new_v = [v for v in tri if v not in pos]
            if not new_v:
                continue  # strip revisits already-placed vertices
            nv = new_v[0]
            kk = tri.index(nv)
            a, b = tri[(kk + 1) % 3], tri[(kk + 2) % 3]
            pos[nv] = hc.place_third(pos[a], pos[b], self.target.length_of(a, nv),
                                     self.target.length_of(b, nv), side=1.0)
        tri_last = [int(v) for v in self.target.faces[path[-1]]]
        U = np.stack([pos[v] for v in tri_last])
        C = self.corners[path[-1]]
        out = np.linalg.solve(C, U).T
        self._unfold_cache[path] = out
        return out

    def edge_transform(self, e, fi, fj):
        """Transform from face fj's canonical frame into face fi's frame,
        cached per edge until the image faces change."""
        if self._tr_faces[e, 0] == fi and self._tr_faces[e, 1] == fj:
            return self._tr[e]
        L = np.eye(3) if fi == fj else self._unfold_transform(self._face_path(fi, fj))
        self._tr[e] = L
        self._tr_faces[e] = (fi, fj)
        return self._tr[e]

    def _edge_strip_path(self, e, fi, fj):
        """Strip of target faces for domain edge e with endpoint faces fi, fj.

        Near-identity maps keep each image inside its vertex's star; the
        canonical strip then runs around endpoint i's fan to a face of the
        target edge (i, j) itself and on around endpoint j's fan, which
        contains the true geodesic.  Falls back to dual-graph BFS when an
        image has wandered out of its star."""
        if fi == fj:
            return (fi,)
        i, j = (int(x) for x in self.domain.edges[e])
        te = self.target.edge_index.get((i, j))
        if te is not None:
            best = None
            for fmid in self._edge_faces.get(te, []):
                arc_i = self._fan_arc(i, fi, fmid)
                arc_j = self._fan_arc(j, fmid, fj)
                if arc_i is None or arc_j is None:
                    continue
                path = list(arc_i) + list(arc_j)[1:]
                dedup = [path[0]]
                for f in path[1:]:
                    if f != dedup[-1]:
                        dedup.append(f)
                if best is None or len(dedup) < len(best):
                    best = dedup
            if best is not None:
                return tuple(best)
        return self._face_path(fi, fj)

    def edge_transforms(self, vmap: "VertexMap"):
        """All edge transforms for the current face assignment; only edges
        whose endpoint faces changed are recomputed."""
        ei = self.domain.edges[:, 0]
        ej = self.domain.edges[:, 1]
        fi = vmap.face[ei]
        fj = vmap.face[ej]
        dirty = (self._tr_faces[:, 0] != fi) | (self._tr_faces[:, 1] != fj)
        for e in np.nonzero(dirty)[0]:
            a, b = int(fi[e]), int(fj[e])
            if a == b:
                self._tr[e] = np.eye(3)
            else:
                path = self._edge_strip_path(int(e), a, b)
                self._tr[e] = (np.eye(3) if len(path) == 1
                               else self._unfold_transform(path))
            self._tr_faces[e] = (a, b)
        return self._tr

    def _develop_chain(self, chain, frames_of):
        """Develop a connected face chain from chain[0]'s canonical frame and
        return the transforms of the requested faces' canonical frames."""
        placed = self.corners[chain[0]].copy()
        tri0 = [int(v) for v in self.target.faces[chain[0]]]
        pos = {tri0[k]: placed[k] for k in range(3)}
        for g in chain[1:]:
            tri = [int(v) for v in self.target.faces[g]]
            new_v = [v for v in tri if v not in pos]
            if not new_v:
                continue
            nv = new_v[0]
            kk = tri.index(nv)
            a, b = tri[(kk + 1) % 3], tri[(kk + 2) % 3]
            pos[nv] = hc.place_third(pos[a], pos[b], self.target.length_of(a, nv),
                                     self.target.length_of(b, nv), side=1.0)
        out = []
        for fk in frames_of:
            tri = [int(v) for v in self.target.faces[fk]]
            U = np.stack([pos[v] for v in tri])
            out.append(np.linalg.solve(self.corners[fk], U).T)
        return out

    def _unfold_pair(self, f0, f1, f2, dom_face=None):
        """Transforms of f1's and f2's canonical frames into one connected
        strip anchored at f0.

        With dom_face given (shared face ids between domain and target), the
        strip routes through that face via the corner fans, which keeps the
        development geometrically local even around cone vertices; plain
        dual-graph paths may wrap a cone the wrong way and scramble
        orientations."""
        key = (f0, f1, f2, dom_face)
        hit = self._pair_cache.get(key)
        if hit is not None:
            return hit
        chain = None
        if dom_face is not None and self._same_face_ids:
            tri = [int(v) for v in self.domain.faces[dom_face]]
            arc0 = self._fan_arc(tri[0], f0, dom_face)
            arc1 = self._fan_arc(tri[1], dom_face, f1)
            arc2 = self._fan_arc(tri[2], dom_face, f2)
            if arc0 is not None and arc1 is not None and arc2 is not None:
                chain = list(arc0) + list(arc1)[1:] + list(arc2)[1:]
        if chain is None:
            chain = list(self._face_path(f0, f1))
            chain += list(self._face_path(f1, f2))[1:]
        out = self._develop_chain(chain, (f1, f2))
        self._pair_cache[key] = out
        return out

    def face_strip_transforms(self, vmap: "VertexMap"):
        """Per-domain-face transforms bringing the corner-1 and corner-2
        image frames into corner 0's, through one connected strip."""
        tri = self.domain.faces
        f0 = vmap.face[tri[:, 0]]
        f1 = vmap.face[tri[:, 1]]
        f2 = vmap.face[tri[:, 2]]
        dirty = ((self._ftr_faces[:, 0] != f0) | (self._ftr_faces[:, 1] != f1)
                 | (self._ftr_faces[:, 2] != f2))
        for f in np.nonzero(dirty)[0]:
            T1, T2 = self._unfold_pair(int(f0[f]), int(f1[f]), int(f2[f]),
                                       dom_face=int(f))
            self._ftr[f, 0] = T1
            self._ftr[f, 1] = T2
            self._ftr_faces[f] = (f0[f], f1[f], f2[f])
        return self._ftr

    # -- positions and point location --------------------------------------

    def position(self, vmap: VertexMap, v):
        """Image point in its own face's canonical frame."""
        return hc.bary_point(self.corners[vmap.face[v]], vmap.bary[v])

    def image_cone_coords(self, vmap: VertexMap, v):
        """(rho, theta) of an image point on an annulus target."""
        from . import surface as sface
        coords = sface.annulus_cone_coords(self.target)
        alpha = self.target.meta["alpha"]
        f = int(vmap.face[v])
        tri = [int(x) for x in self.target.faces[f]]
        ref = None
        for t in tri:
            if coords[t][0] > 0:
                ref = coords[t][1]
                break
        lifts = np.stack([hc.cone_lift(coords[t][0], coords[t][1], alpha,
                                       theta_ref=ref) for t in tri])
        p = hc.bary_point(lifts, vmap.bary[v])
        rho = float(np.arccosh(max(p[2], 1.0)))
        theta = (ref + float(np.arctan2(p[1], p[0]))) % (2 * np.pi * alpha)
        return rho, theta

    def locate(self, start_face, point, frame_face=None, max_steps=12):
        """Walk from start_face to the face containing `point`.

        `point` is given in start_face's canonical frame; returns
        (face, bary).  Each crossing unfolds the neighbor into the same
        frame, so the walk happens in a single strip."""
        f = int(start_face)
        tri = [int(v) for v in self.target.faces[f]]
        pos = {tri[k]: self.corners[f][k].copy() for k in range(3)}
        visited = [f]
        for _ in range(max_steps):
            tri = [int(v) for v in self.target.faces[f]]
            P = np.stack([pos[v] for v in tri])
            b = hc.bary_coords(P, point)
            k = int(np.argmin(b))
            if b[k] >= -1e-12:
                b = np.maximum(b, 0.0)
                return f, b / b.sum()
            g = int(self.target.face_adjacency[f, k])
            if g < 0:
                # boundary: clamp onto the edge
                b = np.maximum(b, 0.0)
                return f, b / b.sum()
            trig = [int(v) for v in self.target.faces[g]]
            nv = [v for v in trig if v not in pos]
            if nv:
                nvv = nv[0]
                kk = trig.index(nvv)
                a, bb = trig[(kk + 1) % 3], trig[(kk + 2) % 3]
                pos[nvv] = hc.place_third(pos[a], pos[bb],
                                          self.target.length_of(a, nvv),
                                          self.target.length_of(bb, nvv), side=1.0)
            f = g
            visited.append(f)
        raise GeometryError("harmonic", "locate", "point location walk failed",
                            f"visited {visited}")


@dataclass
class EdgeData:
    """Per-domain-edge geometry of the current map state."""

    dist: np.ndarray       # (E,)
    pos_i: np.ndarray      # (E,3) image of endpoint i in its face frame
    pos_j_in_i: np.ndarray  # (E,3) image of endpoint j moved into i's frame
    log_i: np.ndarray      # (E,3) tangent at pos_i toward j, i-frame
    log_j: np.ndarray      # (E,3) tangent at pos_j toward i, j-frame
    transforms: np.ndarray  # (E,3,3) fj-frame -> fi-frame


def compute_edge_data(geom: MapGeometry, vmap: VertexMap) -> EdgeData:
    dom = geom.domain
    ei = dom.edges[:, 0]
    ej = dom.edges[:, 1]
    transforms = geom.edge_transforms(vmap)
    Pi = hc.bary_point(geom.corners[vmap.face[ei]], vmap.bary[ei])
    Pj_own = hc.bary_point(geom.corners[vmap.face[ej]], vmap.bary[ej])
    Pj = np.einsum("eab,eb->ea", transforms, Pj_own)
    d = hc.dist(Pi, Pj)
    log_i = hc.log_map(Pi, Pj)
    inv = np.einsum("ab,ebc,cd->ead", _ETA, np.swapaxes(transforms, 1, 2), _ETA)
    Pi_in_j = np.einsum("eab,eb->ea", inv, Pi)
    log_j = hc.log_map(Pj_own, Pi_in_j)
    return EdgeData(d, Pi, Pj, log_i, log_j, transforms)


def energy(domain, target, vmap: VertexMap):
    """Dirichlet energy (1/2) sum w_e d_e^2 plus a Jacobian flag list.

    Returns (value, flagged_faces); flagged faces have nonpositive discrete
    Jacobian but the value is still returned."""
    geom = MapGeometry(domain, target)
    ed = compute_edge_data(geom, vmap)
    val = 0.5 * float(np.dot(domain.cot_weights, ed.dist ** 2))
    signs = face_jacobian_signs(geom, vmap, ed)
    flagged = [int(f) for f in np.nonzero(signs <= 0)[0]]
    return val, flagged


def face_jacobian_signs(geom: MapGeometry, vmap: VertexMap, ed: EdgeData):
    """Orientation determinant of each face's image triple.

    All three image points are developed into one connected strip per face
    (a consistent chart even around cone vertices, where independent per-edge
    strips would disagree by the cone holonomy)."""
    dom = geom.domain
    tri = dom.faces
    T = geom.face_strip_transforms(vmap)
    base = np.empty((dom.n_faces, 3, 3))
    base[:, 0] = hc.bary_point(geom.corners[vmap.face[tri[:, 0]]],
                               vmap.bary[tri[:, 0]])
    for k in (1, 2):
        own = hc.bary_point(geom.corners[vmap.face[tri[:, k]]], vmap.bary[tri[:, k]])
        base[:, k] = np.einsum("fab,fb->fa", T[:, k - 1], own)
    return np.linalg.det(base)


def _vertex_colors(domain):
    """Greedy graph coloring by ascending vertex id (deterministic)."""
    colors = np.full(domain.n_vertices, -1, dtype=int)
    for v in range(domain.n_vertices):
        used = {colors[u] for u in domain.vertex_neighbors[v] if colors[u] >= 0}
        c = 0
        while c in used:
            c += 1
        colors[v] = c
    return colors


@dataclass
class SolveTrace:
    sweeps: list = field(default_factory=list)   # (sweep, energy, max_grad)

    def rows(self):
        return list(self.sweeps)


def solve_harmonic(domain, target, init: VertexMap, tol=1e-10, max_sweeps=20000,
                   omega=1.8, accel_every=5, geom: MapGeometry | None = None):
    """Minimize the Dirichlet energy by per-vertex weighted-centroid moves.

    Vertices are processed in color blocks (ascending color, ascending id;
    within a block updates are independent, so the result is deterministic).
    A move is kept only if it lowers the vertex's local energy; if a move
    would push a face Jacobian below the floor it is bisected toward the
    previous position up to 30 times, then the solve aborts.  Every
    accel_every sweeps an Aitken extrapolation of the slowest error mode is
    attempted and kept only if the energy does not increase."""
    if geom is None:
        geom = MapGeometry(domain, target)
    vmap = init.copy()
    w = domain.cot_weights
    colors = _vertex_colors(domain)
    blocks = [np.array([v for v in range(domain.n_vertices)
                        if colors[v] == c and not vmap.pinned[v]], dtype=int)
              for c in range(colors.max() + 1)]
    blocks = [b for b in blocks if len(b)]

    # per-vertex incident edge table, padded
    deg = np.array([len(domain.vertex_neighbors[v]) for v in range(domain.n_vertices)])
    maxdeg = int(deg.max())
    inc_edge = np.full((domain.n_vertices, maxdeg), -1, dtype=int)
    inc_side = np.zeros((domain.n_vertices, maxdeg), dtype=bool)  # True: v is edge's i
    for v in range(domain.n_vertices):
        for s, u in enumerate(domain.vertex_neighbors[v]):
            e = domain.edge_index[(min(u, v), max(u, v))]
            inc_edge[v, s] = e
            inc_side[v, s] = v < u
    trace = SolveTrace()

    ed = compute_edge_data(geom, vmap)
    snap1 = snap2 = None
    sweep = 0
    while True:
        en = 0.5 * float(np.dot(w, ed.dist ** 2))
        grad = _vertex_gradients(domain, ed, w, inc_edge, inc_side)
        gnorm = np.sqrt(np.maximum(hc.mink(grad, grad), 0.0))
        gnorm[vmap.pinned] = 0.0
        max_grad = float(gnorm.max()) if len(gnorm) else 0.0
        trace.sweeps.append((sweep, en, max_grad))
        if max_grad <= tol:
            break
        if sweep >= max_sweeps:
            raise SolverError("harmonic", "solve_harmonic",
                              "no convergence within sweep budget",
                              f"max_grad {max_grad} > tol {tol}", trace=trace.rows())
        for block in blocks:
            _update_block(geom, vmap, ed, w, inc_edge, inc_side, block, omega)
            ed = compute_edge_data(geom, vmap)
        sweep += 1
        # sparse Newton on all free vertices once a sweep has smoothed the
        # iterate; falls back to sweeping when the step is rejected
        if (sweep - 1) % 3 == 0:
            vmap, ed, done = _newton_phase(geom, vmap, ed, w, tol, trace)
            if done:
                continue
        if accel_every and sweep % accel_every == 0:
            state = (vmap.face.copy(),
                     hc.bary_point(geom.corners[vmap.face], vmap.bary))
            if snap2 is not None:
                vmap, ed, en_new = _aitken_step(geom, vmap, ed, w, en,
                                                snap2, snap1, state)
            snap2, snap1 = snap1, state
    signs = face_jacobian_signs(geom, vmap, ed)
    if np.any(signs <= 0):
        f = int(np.argmin(signs))
        raise SolverError("harmonic", "solve_harmonic", "degeneration",
                          f"nonpositive Jacobian on face {f}", trace=trace.rows())
    return vmap, trace


def _aitken_step(geom, vmap, ed, w, en_now, snap2, snap1, state):
    """Extrapolate the dominant error mode; revert if the energy grows."""
    face2, x2 = snap2
    face1, x1 = snap1
    face0, x0 = state
    stable = (face2 == face1) & (face1 == face0) & ~vmap.pinned
    if stable.sum() == 0:
        return vmap, ed, en_now
    d_prev = hc.log_map(x1[stable], x2[stable])
    d_now = hc.log_map(x0[stable], x1[stable])
    n_prev = float(np.sqrt(np.maximum(hc.mink(d_prev, d_prev), 0.0).sum()))
    n_now = float(np.sqrt(np.maximum(hc.mink(d_now, d_now), 0.0).sum()))
    if n_prev <= 1e-300 or n_now <= 1e-300:
        return vmap, ed, en_now
    r = n_now / n_prev
    if not 0.05 < r < 0.995:
        return vmap, ed, en_now
    gamma = min(r / (1.0 - r), 60.0)
    # note log(x0 -> x1) points backwards; extrapolate forward
    step = -gamma * d_now
    x_target = hc.exp_map(x0[stable], step)
    cand = vmap.copy()
    idx = np.nonzero(stable)[0]
    try:
        for pos, v in enumerate(idx):
            f_new, b_new = geom.locate(int(vmap.face[v]), x_target[pos])
            cand.face[v] = f_new
            cand.bary[v] = b_new
    except GeometryError:
        return vmap, ed, en_now
    ed_cand = compute_edge_data(geom, cand)
    en_cand = 0.5 * float(np.dot(w, ed_cand.dist ** 2))
    signs = face_jacobian_signs(geom, cand, ed_cand)
    if en_cand <= en_now and np.all(signs > _JAC_FLOOR):
        return cand, ed_cand, en_cand
    ed_back = compute_edge_data(geom, vmap)
    return vmap, ed_back, en_now


def _vertex_gradients(domain, ed: EdgeData, w, inc_edge, inc_side):
    """Energy gradient per vertex: -sum_e w_e log_e (own frame)."""
    V = domain.n_vertices
    grad = np.zeros((V, 3))
    we = w[:, None]
    np.add.at(grad, domain.edges[:, 0], we * ed.log_i)
    np.add.at(grad, domain.edges[:, 1], we * ed.log_j)
    return grad


def _frames_at(x):
    """Deterministic orthonormal tangent frames at hyperboloid points."""
    x = np.asarray(x, dtype=float)
    a = np.zeros_like(x)
    use_x_axis = np.abs(x[..., 0]) < 0.9 * x[..., 2]
    a[..., 0] = np.where(use_x_axis, 1.0, 0.0)
    a[..., 1] = np.where(use_x_axis, 0.0, 1.0)
    e1 = a + hc.mink(a, x)[..., None] * x
    n = np.sqrt(np.maximum(hc.mink(e1, e1), 1e-300))
    e1 = e1 / n[..., None]
    e2 = hc.lorentz_cross(x, e1)
    return e1, e2


def _edge_energy_hessian(geom, vmap, ed, w, frames):
    """Sparse Hessian of the Dirichlet energy in per-vertex tangent frames.

    Per edge, the 4x4 block of (1/2) w d^2 over both endpoints' tangent
    coordinates is built by central differences of the closed-form gradient;
    step 1e-6 gives ~1e-8 accuracy, plenty for a safeguarded Newton
    direction."""
    dom = geom.domain
    V = dom.n_vertices
    e1, e2 = frames
    ei = dom.edges[:, 0]
    ej = dom.edges[:, 1]
    Pi = ed.pos_i
    Pj = ed.pos_j_in_i
    # endpoint j's frame must be expressed in the i-frame strip to perturb
    T = ed.transforms
    e1j = np.einsum("eab,eb->ea", T, e1[ej])
    e2j = np.einsum("eab,eb->ea", T, e2[ej])
    basis = [
        (0, e1[ei], Pi, True), (1, e2[ei], Pi, True),
        (2, e1j, Pj, False), (3, e2j, Pj, False),
    ]
    h = 1e-6
    H = np.zeros((len(ei), 4, 4))

    def grads(xi, xj):
        li = hc.log_map(xi, xj)
        lj = hc.log_map(xj, xi)
        gi = -w[:, None] * li
        gj = -w[:, None] * lj
        out = np.empty((len(ei), 4))
        out[:, 0] = hc.mink(gi, e1[ei])
        out[:, 1] = hc.mink(gi, e2[ei])
        out[:, 2] = hc.mink(gj, e1j)
        out[:, 3] = hc.mink(gj, e2j)
        return out

    for col, vec, base, is_i in basis:
        up = hc.exp_map(base, h * vec)
        dn = hc.exp_map(base, -h * vec)
        if is_i:
            gu = grads(up, Pj)
            gd = grads(dn, Pj)
        else:
            gu = grads(Pi, up)
            gd = grads(Pi, dn)
        H[:, :, col] = (gu - gd) / (2 * h)
    H = 0.5 * (H + np.swapaxes(H, 1, 2))

    free = ~vmap.pinned
    index = np.full(V, -1, dtype=int)
    index[free] = np.arange(int(free.sum()))
    rows, cols, vals = [], [], []
    slot_vertex = [ei, ei, ej, ej]
    slot_coord = [0, 1, 0, 1]
    for a in range(4):
        va = index[slot_vertex[a]]
        for b in range(4):
            vb = index[slot_vertex[b]]
            ok = (va >= 0) & (vb >= 0)
            rows.append(2 * va[ok] + slot_coord[a])
            cols.append(2 * vb[ok] + slot_coord[b])
            vals.append(H[ok, a, b])
    n = 2 * int(free.sum())
    Hs = sp.coo_matrix((np.concatenate(vals),
                        (np.concatenate(rows), np.concatenate(cols))),
                       shape=(n, n)).tocsc()
    return Hs, index


def _newton_phase(geom, vmap, ed, w, tol, trace, max_newton=12):
    """Safeguarded Newton iterations on all unpinned vertex positions.

    Falls back silently (returns control to the sweep loop) when the step is
    not a descent direction or the line search fails."""
    dom = geom.domain
    for it in range(max_newton):
        en = 0.5 * float(np.dot(w, ed.dist ** 2))
        grad = np.zeros((dom.n_vertices, 3))
        np.add.at(grad, dom.edges[:, 0], w[:, None] * ed.log_i)
        np.add.at(grad, dom.edges[:, 1], w[:, None] * ed.log_j)
        grad = -grad  # energy gradient
        x_all = hc.bary_point(geom.corners[vmap.face], vmap.bary)
        frames = _frames_at(x_all)
        gnorm = np.sqrt(np.maximum(hc.mink(grad, grad), 0.0))
        gnorm[vmap.pinned] = 0.0
        if float(gnorm.max()) <= tol:
            return vmap, ed, True
        Hs, index = _edge_energy_hessian(geom, vmap, ed, w, frames)
        free = ~vmap.pinned
        g_flat = np.empty(2 * int(free.sum()))
        g_flat[0::2] = hc.mink(grad, frames[0])[free]
        g_flat[1::2] = hc.mink(grad, frames[1])[free]
        lam = 0.0
        delta = None
        for _ in range(4):
            try:
                M = Hs if lam == 0.0 else Hs + lam * sp.eye(Hs.shape[0],
                                                            format="csc")
                delta = spla.spsolve(M, -g_flat)
            except Exception:
                delta = None
            if delta is not None and np.isfinite(delta).all() \
                    and float(np.dot(delta, g_flat)) < 0:
                break
            lam = max(lam * 10.0, 1e-6 * abs(Hs.diagonal()).mean())
            delta = None
        if delta is None:
            return vmap, ed, False
        step_vec = np.zeros((dom.n_vertices, 3))
        step_vec[free] = (delta[0::2, None] * frames[0][free]
                          + delta[1::2, None] * frames[1][free])
        t = 1.0
        accepted = False
        for _ in range(20):
            cand = vmap.copy()
            targets = hc.exp_map(x_all, t * step_vec)
            ok = _relocate_batch(geom, cand, targets, free)
            if ok:
                ed_cand = compute_edge_data(geom, cand)
                en_cand = 0.5 * float(np.dot(w, ed_cand.dist ** 2))
                if en_cand <= en - 1e-14 * max(abs(en), 1.0) * t:
                    signs = face_jacobian_signs(geom, cand, ed_cand)
                    if np.all(signs > _JAC_FLOOR):
                        vmap.face[:] = cand.face
                        vmap.bary[:] = cand.bary
                        ed = ed_cand
                        accepted = True
                        break
            t *= 0.25
        if not accepted:
            ed = compute_edge_data(geom, vmap)
            return vmap, ed, False
    return vmap, ed, False


def _relocate_batch(geom, vmap, targets, free):
    """Move each free vertex to its target point (own-frame coordinates)."""
    idx = np.nonzero(free)[0]
    b_new = hc.bary_coords(geom.corners[vmap.face[idx]], targets[idx])
    in_face = b_new.min(axis=1) >= -1e-12
    stay = idx[in_face]
    bb = np.maximum(b_new[in_face], 0.0)
    vmap.bary[stay] = bb / bb.sum(axis=1, keepdims=True)
    for v in idx[~in_face]:
        try:
            f_new, b_val = geom.locate(int(vmap.face[v]), targets[v])
        except GeometryError:
            return False
        vmap.face[v] = f_new
        vmap.bary[v] = b_val
    return True


def _update_block(geom, vmap, ed, w, inc_edge, inc_side, block, omega):
    """Move each block vertex to the (over-relaxed) weighted centroid of its
    neighbors' images, with local-energy safeguards."""
    nb = len(block)
    maxdeg = inc_edge.shape[1]
    e_ids = inc_edge[block]                       # (nb, maxdeg)
    mask = e_ids >= 0
    e_safe = np.where(mask, e_ids, 0)
    side = inc_side[block]
    # neighbor image positions in each vertex's own frame; where v is the
    # edge's j endpoint, pos_i must be moved into j's frame with the inverse
    Q = np.where(side[..., None], ed.pos_j_in_i[e_safe], ed.pos_i[e_safe])
    inv_needed = ~side & mask
    if inv_needed.any():
        idx = np.nonzero(inv_needed)
        L = ed.transforms[e_safe[idx]]
        Linv = np.einsum("ab,ebc,cd->ead", _ETA, np.swapaxes(L, 1, 2), _ETA)
        Q[idx] = np.einsum("eab,eb->ea", Linv, ed.pos_i[e_safe[idx]])
    wq = np.where(mask, w[e_safe], 0.0)
    x0 = hc.bary_point(geom.corners[vmap.face[block]], vmap.bary[block])

    wsum = wq.sum(axis=1)
    ok = wsum > 1e-12
    x = x0.copy()
    for _ in range(30):
        logs = hc.log_map(x[:, None, :], Q)
        g = np.einsum("vk,vkj->vj", wq, logs)
        gn = np.sqrt(np.maximum(hc.mink(g, g), 0.0))
        if np.all(gn[ok] <= 1e-13 * np.maximum(wsum[ok], 1.0)):
            break
        step = np.where(ok, 1.0 / np.maximum(wsum, 1e-12), 0.0)
        x = hc.exp_map(x, g * step[:, None])

    def local_energy(xc):
        d = hc.dist(xc[:, None, :], Q)
        return (wq * d * d).sum(axis=1)

    e_old = local_energy(x0)
    if omega != 1.0:
        v_step = hc.log_map(x0, x)
        x_try = hc.exp_map(x0, omega * v_step)
        e_try = local_energy(x_try)
        e_cen = local_energy(x)
        use_sor = e_try <= e_cen
        x = np.where(use_sor[:, None], x_try, x)
    e_new = local_energy(x)
    worse = e_new > e_old + 1e-15 * np.abs(e_old)
    if worse.any():
        x[worse] = x0[worse]

    # relocate: vectorized in-face bary update; walk only actual crossers,
    # bisecting toward the old position if a face Jacobian would collapse
    moved = (hc.dist(x, x0) > 0.0) & ok
    if not moved.any():
        return
    idx = np.nonzero(moved)[0]
    b_new = hc.bary_coords(geom.corners[vmap.face[block[idx]]], x[idx])
    in_face = b_new.min(axis=1) >= -1e-12
    stay = idx[in_face]
    bb = np.maximum(b_new[in_face], 0.0)
    vmap.bary[block[stay]] = bb / bb.sum(axis=1, keepdims=True)
    for bi in idx[~in_face]:
        v = int(block[bi])
        target_pt = x[bi]
        old_face, old_bary = int(vmap.face[v]), vmap.bary[v].copy()
        for attempt in range(31):
            try:
                f_new, b_val = geom.locate(old_face, target_pt)
            except GeometryError:
                f_new, b_val = None, None
            if f_new is not None:
                vmap.face[v] = f_new
                vmap.bary[v] = b_val
                if f_new == old_face or _star_jacobians_ok(geom, vmap, v):
                    break
                vmap.face[v] = old_face
                vmap.bary[v] = old_bary
            if attempt == 30:
                raise SolverError("harmonic", "solve_harmonic", "degeneration",
                                  f"vertex {v} cannot move without face collapse")
            target_pt = hc.exp_map(x0[bi], 0.5 ** (attempt + 1)
                                   * hc.log_map(x0[bi], x[bi]))


def _star_jacobians_ok(geom, vmap, v):
    """Orientation check of the faces around one vertex after a move."""
    dom = geom.domain
    for f in dom.vertex_faces[v]:
        tri = [int(x) for x in dom.faces[f]]
        T1, T2 = geom._unfold_pair(int(vmap.face[tri[0]]), int(vmap.face[tri[1]]),
                                   int(vmap.face[tri[2]]), dom_face=int(f))
        base = np.empty((3, 3))
        base[0] = hc.bary_point(geom.corners[int(vmap.face[tri[0]])], vmap.bary[tri[0]])
        base[1] = T1 @ hc.bary_point(geom.corners[int(vmap.face[tri[1]])],
                                     vmap.bary[tri[1]])
        base[2] = T2 @ hc.bary_point(geom.corners[int(vmap.face[tri[2]])],
                                     vmap.bary[tri[2]])
        if np.linalg.det(base) <= _JAC_FLOOR:
            return False
    return True


# ---------------------------------------------------------------------------
# per-face differentials


def _euclid_corners(lengths):
    """Euclidean realization as complex coordinates, corner 0 at the origin.

    lengths[..., k] opposite corner k; positively oriented."""
    l = np.asarray(lengths, dtype=float)
    ang = hc.euclid_angles(l)
    z0 = np.zeros(l.shape[:-1], dtype=complex)
    z1 = l[..., 2].astype(complex)
    z2 = l[..., 1] * np.exp(1j * ang[..., 0])
    return np.stack([z0, z1, z2], axis=-1)


def _affine_fit(z, u):
    """Exact affine fit u = c + a z + b conj(z) through three corners."""
    dz1 = z[..., 1] - z[..., 0]
    dz2 = z[..., 2] - z[..., 0]
    du1 = u[..., 1] - u[..., 0]
    du2 = u[..., 2] - u[..., 0]
    det = dz1 * np.conj(dz2) - np.conj(dz1) * dz2
    a = (du1 * np.conj(dz2) - du2 * np.conj(dz1)) / det
    b = (dz1 * du2 - dz2 * du1) / det
    return a, b


def flat_face_fields(domain, target, vmap: VertexMap, geom=None,
                     edge_data=None) -> dict:
    """Per-face first-order data in the Euclidean realization frames.

    The domain face is realized with its own edge lengths; the image triangle
    is realized with the geodesic distances between the three image points.
    With these frames the cotangent energy identity E = sum_f A_f e_f is
    exact, which makes the gradient assembly in `teich` the exact derivative
    of the discrete energy.  Returns complex derivatives a = del u,
    b = delbar u per face plus the derived scalar fields."""
    if geom is None:
        geom = MapGeometry(domain, target)
    if edge_data is None:
        edge_data = compute_edge_data(geom, vmap)
    d_faces = edge_data.dist[domain.face_edges]        # (F,3) image side lengths
    z = _euclid_corners(domain.face_lengths)
    u = _euclid_corners(d_faces)
    a, b = _affine_fit(z, u)
    e = np.abs(a) ** 2 + np.abs(b) ** 2
    J = np.abs(a) ** 2 - np.abs(b) ** 2
    phi = a * np.conj(b)
    return {
        "a": a, "b": b,
        "phi": phi,
        "energy_density": e,
        "jacobian": J,
        "norm_del": np.abs(a),
        "norm_delbar": np.abs(b),
        "hopf_norm": np.abs(phi),
        "areas": domain.euclid_areas.copy(),
        "edge_dists": edge_data.dist.copy(),
    }


def face_differential(domain, target, vmap: VertexMap, f: int,
                      chart_rotation=0.0, geom=None, edge_data=None):
    """Conformal-chart derivatives of the map on one face.

    Generic faces use Poincare charts centered at the face centroid and the
    image centroid (rho2 = sigma2 = 4 there).  Faces with a corner pinned to
    a marked vertex use the matching conformal cone charts on BOTH sides, so
    conformal maps keep a vanishing anti-holomorphic part across the apex.
    Returns (del_z u, delbar_z u, rho2, sigma2)."""
    if geom is None:
        geom = MapGeometry(domain, target)
    if edge_data is None:
        edge_data = compute_edge_data(geom, vmap)
    tri = [int(v) for v in domain.faces[f]]
    d = edge_data.dist[domain.face_edges[f]]

    marked_corner = None
    for k, v in enumerate(tri):
        if (vmap.pinned[v] and v in domain.marked and v in geom.target.marked
                and vmap.bary[v].max() > 1.0 - 1e-12):
            marked_corner = k
            break

    if marked_corner is None:
        Vd = hc.canonical_corners(domain.face_lengths[f])
        zd = _poincare_chart(Vd, rotation=chart_rotation)
        rho2 = 4.0
        Vt = hc.canonical_corners(d)
        if not np.isfinite(Vt).all():
            raise GeometryError("harmonic", "face_differential",
                                "degenerate image triangle", f"face {f}")
        zt = _poincare_chart(Vt)
        sigma2 = 4.0
    else:
        alpha_d = float(domain.angle_sums[tri[marked_corner]] / (2 * np.pi))
        zd, rho2 = _cone_chart_face(domain.face_lengths[f],
                                    float(domain.angles[f, marked_corner]),
                                    marked_corner, alpha_d)
        zd = zd * np.exp(1j * chart_rotation)
        zt, sigma2 = _cone_chart_image(geom, d, marked_corner, tri)
    a, b = _affine_fit(zd[None, :], zt[None, :])
    return complex(a[0]), complex(b[0]), float(rho2), float(sigma2)


def _poincare_chart(corners, rotation=0.0):
    """Poincare-disk coordinates of a realized triangle, centroid at 0."""
    G = hc.bary_point(corners, np.array([1.0, 1.0, 1.0]) / 3.0)
    e1 = hc.log_map(G, corners[0])
    n = np.sqrt(max(hc.mink(e1, e1), 1e-300))
    e1 = e1 / n
    e2 = hc.lorentz_cross(G, e1)
    L = np.stack([e1 * [1, 1, -1], e2 * [1, 1, -1], G * [-1, -1, 1]])
    moved = (L @ corners.T).T
    z = hc.poincare_from_hyperboloid(moved)
    return z * np.exp(1j * rotation)


def _cone_chart_face(lengths, apex_angle, k0, alpha):
    """Triangle corners in the conformal cone chart, corner k0 at the apex.

    Corner k0+1 sits on the theta = 0 ray; k0+2 at the apex angle (counter-
    clockwise, matching positively oriented realizations).  Also returns the
    conformal factor at the in-chart centroid."""
    k1, k2 = (k0 + 1) % 3, (k0 + 2) % 3
    rho1 = lengths[k2]   # edge opposite k2 joins corners k0, k1
    rho2 = lengths[k1]
    chart = hc.ConeChart(alpha=alpha)
    z = np.zeros(3, dtype=complex)
    z[k1] = hc.cone_chart_convert(rho1, 0.0, chart)
    z[k2] = hc.cone_chart_convert(rho2, apex_angle, chart)
    z0 = z.mean()
    factor = hc.cone_conformal_factor(z0, alpha) if abs(z0) > 0 else np.inf
    return z, factor


def _cone_chart_image(geom, d, k0, tri):
    """Image corners in the marked target vertex's conformal cone chart."""
    target = geom.target
    if tri[k0] not in target.marked:
        raise GeometryError("harmonic", "face_differential",
                            "pinned corner is not a marked target vertex")
    alpha = target.marked[tri[k0]]
    apex_angle = float(hc.triangle_angles(np.asarray(d, dtype=float)[None, :])[0, k0])
    limit = 2.0 * hc.cone_separation_bound(min(alpha, 0.49), min(alpha, 0.49))
    if max(d) > limit:
        raise GeometryError("harmonic", "face_differential",
                            "image outside the cone chart's injectivity radius")
    return _cone_chart_face(np.asarray(d, dtype=float), apex_angle, k0, alpha)
