"""Outer loop: energy descent over discrete conformal structures.

A conformal structure is a vector of per-vertex log factors phi on a fixed
reference surface, acting on edge lengths by l = l0 exp((phi_i + phi_j)/2).
The total energy E(phi) = E(u1) + E(u2) sums the Dirichlet energies of the
two inner harmonic solves.  Its exact derivative has the Hopf form: for a
piecewise-flat perturbation h of the face metrics,

    dE(h) = sum_f A_f < h_f, -2 Re((phi1 + phi2) dz^2) >_f

with the coefficients taken from the Euclidean-realization affine fits, an
identity that holds to solver precision (not just to mesh order) because the
cotangent energy IS the flat Dirichlet energy of those fits.  The descent
direction is the sharp of this differential under the discrete
Weil-Petersson pairing <h,k> = 8 sum_f A_f <h_f, k_f>.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import harmonic as hm
from . import hopf as hopf_mod
from . import hypcore as hc
from .errors import DomainError, GeometryError, SolverError
from .surface import ConeSurface


@dataclass
class ConformalState:
    """Reference surface plus per-vertex logarithmic conformal factors."""

    reference: ConeSurface
    phi: np.ndarray

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float)
        if len(self.phi) != self.reference.n_vertices:
            raise DomainError("teich", "ConformalState", "phi must be per-vertex")
        self._surface = None
        self._surface_phi = None

    def lengths(self):
        e = self.reference.edges
        return self.reference.lengths * np.exp(0.5 * (self.phi[e[:, 0]]
                                                      + self.phi[e[:, 1]]))

    def surface(self) -> ConeSurface:
        if self._surface is None or not np.array_equal(self._surface_phi, self.phi):
            self._surface = self.reference.with_lengths(self.lengths(), check=True)
            self._surface_phi = self.phi.copy()
        return self._surface

    def replaced(self, phi) -> "ConformalState":
        return ConformalState(self.reference, np.asarray(phi, dtype=float))

    def gauge_fixed(self) -> "ConformalState":
        """Remove the global-scaling null direction: sum phi = 0."""
        return self.replaced(self.phi - self.phi.mean())

    def feasible(self, phi) -> bool:
        e = self.reference.edges
        l = self.reference.lengths * np.exp(0.5 * (phi[e[:, 0]] + phi[e[:, 1]]))
        fl = l[self.reference.face_edges]
        for k in range(3):
            if np.any(fl[:, k] >= fl[:, (k + 1) % 3] + fl[:, (k + 2) % 3]):
                return False
        return True

    def to_json(self, reference_path="") -> dict:
        return {"phi": {str(v): float(x) for v, x in enumerate(self.phi)},
                "reference": reference_path}

    @classmethod
    def from_json(cls, data, reference: ConeSurface) -> "ConformalState":
        phi = np.zeros(reference.n_vertices)
        for k, v in data["phi"].items():
            phi[int(k)] = float(v)
        return cls(reference, phi)


@dataclass
class DeformationDirection:
    """Per-face symmetric 2-tensor (components h_xx, h_xy, h_yy in the face's
    Euclidean realization frame) plus the derived per-edge length shift."""

    tensor: np.ndarray   # (F, 3)
    delta_l: np.ndarray  # (E,)

    def max_delta_l(self):
        return float(np.abs(self.delta_l).max())


# ---------------------------------------------------------------------------
# per-face tensor algebra


def _face_frames(surface):
    """Euclidean corner coordinates and edge vectors per face."""
    z = hm._euclid_corners(surface.face_lengths)
    # edge k joins corners k+1, k+2
    vec = np.stack([z[:, (k + 2) % 3] - z[:, (k + 1) % 3] for k in range(3)], axis=1)
    return z, vec


def _edge_to_tensor_matrices(surface):
    """Per face, the inverse of the map (tensor components) -> h(e_k, e_k).

    Rows of M are (vx^2, 2 vx vy, vy^2) per edge vector; h components solve
    M h = s with s_k = 2 l_k delta_l_k."""
    _, vec = _face_frames(surface)
    M = np.empty((surface.n_faces, 3, 3))
    M[:, :, 0] = vec.real ** 2
    M[:, :, 1] = 2.0 * vec.real * vec.imag
    M[:, :, 2] = vec.imag ** 2
    return np.linalg.inv(M)


# tensor inner product on (h_xx, h_xy, h_yy) components: the half-weighted
# contraction <h,k> = (hxx kxx + hyy kyy)/2 + hxy kxy, the convention under
# which dE(h) = sum_f A_f <h_f, -2Re(Phi) _f> holds exactly for the discrete
# energy (full contraction would double it)
_K_GRAM = np.diag([0.5, 1.0, 0.5])


class StateGeometry:
    """Cached flat-frame tensor tables for one conformal state's surface."""

    def __init__(self, surface):
        self.surface = surface
        self.Minv = _edge_to_tensor_matrices(surface)
        self.areas = surface.euclid_areas
        # dE/d(delta_l_e) assembly: per (face, local edge) pair
        F = surface.n_faces
        self.face_edge_ids = surface.face_edges
        self.face_lengths = surface.face_lengths

    def tensor_from_delta_l(self, delta_l):
        """Piecewise-constant metric perturbation matching edge shifts."""
        s = 2.0 * self.face_lengths * delta_l[self.face_edge_ids]
        return np.einsum("fab,fb->fa", self.Minv, s)

    def pair_density(self, h, k):
        """Pointwise tensor inner product <h_f, k_f> per face."""
        return np.einsum("fa,ab,fb->f", h, _K_GRAM, k)


def gradient_tensor(fields1, fields2):
    """-2 Re((phi1 + phi2) dz^2) as per-face components in the flat frames."""
    phi_sum = fields1["phi"] + fields2["phi"]
    G = np.empty((len(phi_sum), 3))
    G[:, 0] = -2.0 * phi_sum.real
    G[:, 1] = 2.0 * phi_sum.imag
    G[:, 2] = 2.0 * phi_sum.real
    return G


def energy_partials(geom: StateGeometry, G):
    """Exact partials dE/dphi_v of the discrete energy.

    dE(h) = sum_f A_f <h_f, G_f>; chaining through delta_l_e = (l_e/2) eta_i
    + (l_e/2) eta_j gives the per-vertex derivative."""
    surface = geom.surface
    KG = np.einsum("ab,fb->fa", _K_GRAM, G)
    # coefficient of delta_l_e: sum over incident faces of A_f (Minv^T KG)_k 2 l
    coeff = np.einsum("fab,fa->fb", geom.Minv, KG)  # (F,3): per local edge slot
    dE_dl = np.zeros(surface.n_edges)
    np.add.at(dE_dl, surface.face_edges.ravel(),
              (geom.areas[:, None] * coeff * 2.0 * geom.face_lengths).ravel())
    grad_phi = np.zeros(surface.n_vertices)
    l = np.array([surface.lengths]).ravel()
    half_l_dE = 0.5 * l * dE_dl
    np.add.at(grad_phi, surface.edges[:, 0], half_l_dE)
    np.add.at(grad_phi, surface.edges[:, 1], half_l_dE)
    return grad_phi, dE_dl


def wp_matrix(geom: StateGeometry):
    """Sparse Weil-Petersson Gram matrix on vertex-factor directions:
    W[v,w] = 8 sum_f A_f <htilde(delta_v), htilde(delta_w)>."""
    surface = geom.surface
    F = surface.n_faces
    tri = surface.faces
    # local map: corner eta values -> delta_l per local edge: C[k, c]
    C = np.zeros((F, 3, 3))
    for k in range(3):
        C[:, k, (k + 1) % 3] = 0.5 * geom.face_lengths[:, k]
        C[:, k, (k + 2) % 3] = 0.5 * geom.face_lengths[:, k]
    S = 2.0 * geom.face_lengths[:, :, None] * C          # s_k = 2 l_k dl_k
    B = np.einsum("fab,fbc->fac", geom.Minv, S)          # components per corner
    local = 8.0 * geom.areas[:, None, None] * np.einsum(
        "fax,ab,fby->fxy", B, _K_GRAM, B)
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    W = sp.coo_matrix((local.ravel(), (rows, cols)),
                      shape=(surface.n_vertices,) * 2).tocsc()
    return W


def wp_pairing(a: DeformationDirection, b: DeformationDirection,
               state: ConformalState) -> float:
    """8 sum_f area_f <a_f, b_f> with the face-frame tensor inner product."""
    geom = StateGeometry(state.surface())
    return 8.0 * float(np.dot(geom.areas, geom.pair_density(a.tensor, b.tensor)))


def direction_from_tensor(geom: StateGeometry, G) -> DeformationDirection:
    """Attach the spec's per-edge length shift to a tensor field: the average
    over incident faces of h(e,e) / (2 l)."""
    surface = geom.surface
    _, vec = _face_frames(surface)
    dl = np.zeros(surface.n_edges)
    cnt = np.zeros(surface.n_edges)
    h_ee = (G[:, 0][:, None] * vec.real ** 2
            + 2.0 * G[:, 1][:, None] * vec.real * vec.imag
            + G[:, 2][:, None] * vec.imag ** 2)
    np.add.at(dl, surface.face_edges.ravel(),
              (h_ee / (2.0 * geom.face_lengths)).ravel())
    np.add.at(cnt, surface.face_edges.ravel(), np.ones(3 * surface.n_faces))
    return DeformationDirection(G, dl / np.maximum(cnt, 1.0))


# ---------------------------------------------------------------------------
# energy evaluation with warm-started inner solves


@dataclass
class EnergyEval:
    E: float
    E1: float
    E2: float
    u1: hm.VertexMap
    u2: hm.VertexMap
    fields1: dict
    fields2: dict
    geom1: hm.MapGeometry
    geom2: hm.MapGeometry


class EnergyOracle:
    """Evaluates E(phi) by running the two inner solves, warm-started."""

    def __init__(self, reference, g1, g2, inner_tol=1e-10, max_sweeps=40000):
        self.reference = reference
        self.g1 = g1
        self.g2 = g2
        self.inner_tol = inner_tol
        self.max_sweeps = max_sweeps
        self.u1 = None
        self.u2 = None
        self._share1 = None
        self._share2 = None
        self.n_solves = 0
        self.n_sweeps = 0

    def evaluate(self, state: ConformalState, keep=True) -> EnergyEval:
        surf = state.surface()
        geom1 = hm.MapGeometry(surf, self.g1)
        geom2 = hm.MapGeometry(surf, self.g2)
        if self._share1 is not None:
            geom1._bfs_cache = self._share1._bfs_cache
            geom1._unfold_cache = self._share1._unfold_cache
            geom1._pair_cache = self._share1._pair_cache
        if self._share2 is not None:
            geom2._bfs_cache = self._share2._bfs_cache
            geom2._unfold_cache = self._share2._unfold_cache
            geom2._pair_cache = self._share2._pair_cache
        init1 = self.u1 if self.u1 is not None else hm.identity_map(surf, self.g1)
        init2 = self.u2 if self.u2 is not None else hm.identity_map(surf, self.g2)
        u1, tr1 = hm.solve_harmonic(surf, self.g1, init1, tol=self.inner_tol,
                                    max_sweeps=self.max_sweeps, geom=geom1)
        u2, tr2 = hm.solve_harmonic(surf, self.g2, init2, tol=self.inner_tol,
                                    max_sweeps=self.max_sweeps, geom=geom2)
        self.n_solves += 2
        self.n_sweeps += len(tr1.sweeps) + len(tr2.sweeps) - 2
        ed1 = hm.compute_edge_data(geom1, u1)
        ed2 = hm.compute_edge_data(geom2, u2)
        f1 = hm.flat_face_fields(surf, self.g1, u1, geom=geom1, edge_data=ed1)
        f2 = hm.flat_face_fields(surf, self.g2, u2, geom=geom2, edge_data=ed2)
        E1 = tr1.sweeps[-1][1]
        E2 = tr2.sweeps[-1][1]
        if keep:
            self.u1, self.u2 = u1, u2
            self._share1, self._share2 = geom1, geom2
        return EnergyEval(E1 + E2, E1, E2, u1, u2, f1, f2, geom1, geom2)


def total_energy(state: ConformalState, g1, g2, inner_tol=1e-10):
    """Run both inner solves at the given state; returns (E, u1, u2)."""
    oracle = EnergyOracle(state.reference, g1, g2, inner_tol=inner_tol)
    ev = oracle.evaluate(state)
    return ev.E, ev.u1, ev.u2


def wp_gradient(state: ConformalState, ev: EnergyEval):
    """Gradient data at a solved state.

    Returns (direction, grad_phi, sharp, wp_norm): `direction` carries the
    Hopf tensor -2Re(phi1+phi2) and its edge shifts; `sharp` is the
    Weil-Petersson sharp of the exact differential, so that
    grad_phi . sharp = |grad|_WP^2 and the descent step is -sharp."""
    geom = StateGeometry(state.surface())
    G = gradient_tensor(ev.fields1, ev.fields2)
    grad_phi, dE_dl = energy_partials(geom, G)
    W = wp_matrix(geom)
    solver = spla.factorized(W)
    sharp = solver(grad_phi)
    wp_norm = float(np.sqrt(max(np.dot(grad_phi, sharp), 0.0)))
    direction = direction_from_tensor(geom, G)
    return direction, grad_phi, sharp, wp_norm


def directional_derivative(state: ConformalState, ev: EnergyEval, eta):
    """Exact discrete pairing <dE, eta> via the Hopf tensor assembly."""
    geom = StateGeometry(state.surface())
    G = gradient_tensor(ev.fields1, ev.fields2)
    grad_phi, _ = energy_partials(geom, G)
    return float(np.dot(grad_phi, np.asarray(eta, dtype=float)))


# ---------------------------------------------------------------------------
# finite-difference audit


def gradcheck(reference, g1, g2, n_directions=20, eps=1e-5, seed=0,
              inner_tol=1e-10, state=None):
    """Central-difference audit of the Hopf-form gradient.

    Returns one row per direction: (analytic, fd, rel_err)."""
    rng = np.random.default_rng(seed)
    if state is None:
        state = ConformalState(reference, np.zeros(reference.n_vertices))
    oracle = EnergyOracle(reference, g1, g2, inner_tol=inner_tol)
    base = oracle.evaluate(state)
    rows = []
    for d in range(n_directions):
        eta = rng.standard_normal(reference.n_vertices)
        nrm = float(np.linalg.norm(eta))
        if nrm == 0:
            raise DomainError("teich", "gradcheck", "zero perturbation direction")
        eta = eta / nrm
        analytic = directional_derivative(state, base, eta)
        up = state.replaced(state.phi + eps * eta)
        dn = state.replaced(state.phi - eps * eta)
        if not (state.feasible(up.phi) and state.feasible(dn.phi)):
            raise GeometryError("teich", "gradcheck", "perturbation breaks triangles")
        E_up = oracle.evaluate(up, keep=False).E
        E_dn = oracle.evaluate(dn, keep=False).E
        fd = (E_up - E_dn) / (2.0 * eps)
        denom = max(abs(analytic), abs(fd), 1e-30)
        rows.append({"direction": d, "analytic": analytic, "fd": fd,
                     "rel_err": abs(analytic - fd) / denom})
    return rows


# ---------------------------------------------------------------------------
# descent


@dataclass
class DescentResult:
    state: ConformalState
    trace: list
    ev: EnergyEval
    wp_norm: float
    converged: bool


def descend(state0: ConformalState, g1, g2, outer_tol=1e-4, rel_tol=1e-6,
            max_iters=400, inner_tol=1e-10, c_armijo=1e-4,
            max_backtracks=30) -> DescentResult:
    """Backtracking descent along the Weil-Petersson sharp direction.

    Stops when the WP gradient norm falls under max(rel_tol * initial,
    outer_tol).  Raises `stalled` when the line search underflows and the
    sweep budget when max_iters runs out; both carry the trace."""
    state = state0.gauge_fixed()
    oracle = EnergyOracle(state.reference, g1, g2, inner_tol=inner_tol)
    ev = oracle.evaluate(state)
    direction, grad_phi, sharp, wp_norm = wp_gradient(state, ev)
    target = max(rel_tol * wp_norm, outer_tol)
    trace = []
    step = 1.0
    prev_phi = None
    prev_grad = None
    for it in range(max_iters + 1):
        hopf_res = float(np.abs(ev.fields1["phi"] + ev.fields2["phi"]).max())
        trace.append((it, ev.E, ev.E1, ev.E2, wp_norm, step, hopf_res))
        if wp_norm <= target:
            return DescentResult(state, trace, ev, wp_norm, True)
        if it == max_iters:
            raise SolverError("teich", "descend", "max iterations reached",
                              f"wp_norm {wp_norm} > {target}", trace=trace)
        d = -sharp
        d = d - d.mean()  # keep the global-scaling gauge
        slope = float(np.dot(grad_phi, d))
        if slope >= 0:
            raise SolverError("teich", "descend", "not a descent direction",
                              f"slope {slope}", trace=trace)
        # Barzilai-Borwein step seed
        if prev_phi is not None:
            s_vec = state.phi - prev_phi
            y_vec = grad_phi - prev_grad
            sy = float(np.dot(s_vec, y_vec))
            if sy > 1e-300:
                step = float(np.dot(s_vec, s_vec)) / sy
            else:
                step = 1.0
        step = min(max(step, 1e-12), 1e3)
        accepted = False
        t = step
        for bt in range(max_backtracks):
            cand_phi = state.phi + t * d
            if state.feasible(cand_phi):
                cand = state.replaced(cand_phi).gauge_fixed()
                ev_cand = oracle.evaluate(cand)
                if ev_cand.E <= ev.E + c_armijo * t * slope:
                    accepted = True
                    break
            t *= 0.5
            if t < 1e-14:
                break
        if not accepted:
            raise SolverError("teich", "descend", "stalled",
                              f"line search underflow at iter {it}", trace=trace)
        prev_phi = state.phi.copy()
        prev_grad = grad_phi.copy()
        state = cand
        ev = ev_cand
        step = t
        direction, grad_phi, sharp, wp_norm = wp_gradient(state, ev)
    raise SolverError("teich", "descend", "unreachable", trace=trace)


def pinch_path(reference, n_states=8, band_fraction=0.35):
    """Conformal path degenerating a non-peripheral loop of a torus fixture.

    A smooth negative conformal bump (graph-distance profile from one grid
    column) shrinks a band of the torus; the path walks toward the largest
    feasible amplitude, where the transverse systole collapses."""
    import scipy.sparse.csgraph as csgraph
    m = reference.meta.get("m")
    if m is None:
        raise DomainError("teich", "pinch_path", "torus fixture required")
    col0 = [i * m for i in range(m)]  # one grid column (a homotopy loop)
    graph = reference.adjacency_matrix()
    dist = csgraph.dijkstra(graph, directed=False, indices=col0,
                            unweighted=True).min(axis=0)
    width = max(band_fraction * m, 2.0)
    profile = -np.maximum(0.0, 1.0 - dist / width)
    base = ConformalState(reference, np.zeros(reference.n_vertices))
    t_max = 0.0
    t = 0.25
    while t < 60.0 and base.feasible(t * profile):
        t_max = t
        t *= 1.3
    amplitudes = np.linspace(0.0, 0.95 * t_max, n_states)
    return [ConformalState(reference, amp * profile) for amp in amplitudes]


def properness_probe(g1, g2, states, inner_tol=1e-8):
    """Energy along a pinch path; truncates at the first solver failure.

    Returns rows (param index, E) plus a monotone-tail verdict: the tail is
    the second half of the valid rows."""
    oracle = EnergyOracle(states[0].reference, g1, g2, inner_tol=inner_tol)
    rows = []
    for k, st in enumerate(states):
        try:
            ev = oracle.evaluate(st)
        except (SolverError, GeometryError) as exc:
            rows.append((k, None, str(exc)))
            break
        rows.append((k, ev.E, ""))
    vals = [r[1] for r in rows if r[1] is not None]
    verdict = False
    if len(vals) >= 3:
        tail = vals[len(vals) // 2:]
        increasing = all(tail[i + 1] > tail[i] for i in range(len(tail) - 1))
        verdict = increasing and vals[-1] >= 10.0 * vals[0]
    return {"rows": rows, "monotone_tail_and_10x": verdict}
