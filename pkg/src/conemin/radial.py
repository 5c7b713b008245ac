"""Rotationally symmetric harmonic maps between cone models: the ODE oracle.

With the ansatz u(rho, theta) = (f(rho), k * theta), k = alpha'/alpha, the
harmonic-map equation between the cone models of angles 2*pi*alpha and
2*pi*alpha' reduces to the two-point boundary value problem

    f'' + coth(rho) f' - k^2 sinh(f) cosh(f) / sinh(rho)^2 = 0,
    f(0) = 0,  f(R) = R_target,

with indicial behavior f ~ c * rho^k at the cone point.  See
docs/radial_ode.md for the derivation, including the closed forms used as
oracles for the field diagnostics:

    |del u|    = (f' + k S) / 2,   S = sinh(f)/sinh(rho)
    |delbar u| = |f' - k S| / 2
    hopf norm  = |f'^2 - k^2 S^2| / 4     (invariant norm of the quadratic
                                           differential of the map)

Identity case: alpha = alpha', R_target = R gives f(rho) = rho exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .errors import DomainError, SolverError

_F_CAP = 60.0  # integration abort: cosh(f) overflows well before this matters


@dataclass
class RadialProfile:
    """Sampled solution of the reduced harmonic-map ODE."""

    alpha: float
    alpha_prime: float
    R: float
    R_target: float
    rho: np.ndarray
    f: np.ndarray
    f_prime: np.ndarray
    residual: np.ndarray       # independent collocation residual per node
    residual_bound: float
    shoot_coefficient: float

    @property
    def k(self):
        return self.alpha_prime / self.alpha

    def interp(self, rho):
        """f and f' at arbitrary radii (monotone cubic via f' samples)."""
        rho = np.asarray(rho, dtype=float)
        f = np.interp(rho, self.rho, self.f)
        fp = np.interp(rho, self.rho, self.f_prime)
        return f, fp

    def stretch_ratio(self, rho):
        """S = sinh f / sinh rho, the angular stretch factor."""
        f, _ = self.interp(rho)
        return np.sinh(f) / np.sinh(rho)

    def norm_del(self, rho):
        f, fp = self.interp(rho)
        return 0.5 * (fp + self.k * np.sinh(f) / np.sinh(rho))

    def norm_delbar(self, rho):
        f, fp = self.interp(rho)
        return 0.5 * np.abs(fp - self.k * np.sinh(f) / np.sinh(rho))

    def hopf_norm(self, rho):
        """Invariant norm of the map's quadratic differential at radius rho."""
        f, fp = self.interp(rho)
        S = np.sinh(f) / np.sinh(rho)
        return 0.25 * np.abs(fp ** 2 - self.k ** 2 * S ** 2)

    def energy_density(self, rho):
        f, fp = self.interp(rho)
        S = np.sinh(f) / np.sinh(rho)
        return 0.5 * (fp ** 2 + self.k ** 2 * S ** 2)

    def w_value(self, rho):
        """w = log(|del u| / |delbar u|); +inf where the map is conformal."""
        nd = self.norm_del(rho)
        ndb = self.norm_delbar(rho)
        with np.errstate(divide="ignore"):
            return np.log(nd) - np.log(ndb)

    def to_rows(self):
        return [(float(r), float(v), float(p), float(e))
                for r, v, p, e in zip(self.rho, self.f, self.f_prime, self.residual)]


def _rhs(rho, f, fp, k):
    with np.errstate(over="ignore"):  # overshoots hit the cap and are rejected
        return -fp / np.tanh(rho) + k * k * np.sinh(f) * np.cosh(f) / np.sinh(rho) ** 2


def _grid(R, n, eps):
    """Geometric near the singular end, uniform after 0.1 R."""
    split = max(0.1 * R, 2 * eps)
    n_geo = max(n // 4, 8)
    geo = np.geomspace(eps, split, n_geo)
    uni = np.linspace(split, R, n - n_geo + 1)[1:]
    return np.concatenate([geo, uni])


def _integrate(c, k, grid):
    """RK4 along the grid from a series launch f = c rho^k at grid[0].

    Returns (f, fp) arrays, or None if the solution blew past the cap."""
    rho0 = grid[0]
    f = np.empty_like(grid)
    fp = np.empty_like(grid)
    f[0] = c * rho0 ** k
    fp[0] = c * k * rho0 ** (k - 1.0)
    y, yp = f[0], fp[0]
    for i in range(len(grid) - 1):
        h = grid[i + 1] - grid[i]
        r = grid[i]
        k1 = yp
        l1 = _rhs(r, y, yp, k)
        k2 = yp + 0.5 * h * l1
        l2 = _rhs(r + 0.5 * h, y + 0.5 * h * k1, yp + 0.5 * h * l1, k)
        k3 = yp + 0.5 * h * l2
        l3 = _rhs(r + 0.5 * h, y + 0.5 * h * k2, yp + 0.5 * h * l2, k)
        k4 = yp + h * l3
        l4 = _rhs(r + h, y + h * k3, yp + h * l3, k)
        y = y + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        yp = yp + h * (l1 + 2 * l2 + 2 * l3 + l4) / 6.0
        if not np.isfinite(y) or y > _F_CAP:
            return None, None
        f[i + 1] = y
        fp[i + 1] = yp
    return f, fp


def _deriv_5pt(x, y):
    """Fourth-order first derivative of samples y(x) on a smooth grid.

    Lagrange differentiation on centered 5-point stencils; endpoints fall
    back to one-sided stencils and are excluded by callers."""
    n = len(x)
    d = np.zeros(n)
    idx = np.arange(2, n - 2)
    stencil = np.stack([x[idx + o] for o in (-2, -1, 0, 1, 2)], axis=1)
    vals = np.stack([y[idx + o] for o in (-2, -1, 0, 1, 2)], axis=1)
    xc = stencil[:, 2]
    out = np.zeros(len(idx))
    for j in range(5):
        others = [p for p in range(5) if p != j]
        denom = np.ones(len(idx))
        for p in others:
            denom *= stencil[:, j] - stencil[:, p]
        num = np.zeros(len(idx))
        for mth in others:
            prod = np.ones(len(idx))
            for p in others:
                if p != mth:
                    prod *= xc - stencil[:, p]
            num += prod
        out += vals[:, j] * num / denom
    d[idx] = out
    return d


def _collocation_residual(grid, f, fp, k):
    """Normalized defect of the ODE at interior nodes.

    f'' is reconstructed from the f' samples alone (5-point differentiation),
    independently of the integrator's internal stages.  The raw residual is
    scaled by the size of the stiff coefficients (which grow like 1/rho at
    the cone point), giving a defect that is meaningful uniformly in rho."""
    fpp = _deriv_5pt(grid, fp)
    t1 = fp / np.tanh(grid)
    t2 = k * k * np.sinh(f) * np.cosh(f) / np.sinh(grid) ** 2
    res = (fpp + t1 - t2) / (1.0 + np.abs(t1) + np.abs(t2))
    res[:2] = 0.0
    res[-2:] = 0.0
    return res


def solve_radial(alpha, alpha_prime, R, R_target, tol=1e-8,
                 max_nodes=400000) -> RadialProfile:
    """Shooting solution of the radial harmonic-map problem.

    Launches from rho = 1e-6 R with the indicial series f = c rho^k and
    bisects on c until f(R) = R_target; the node count grows until the
    independent collocation residual is below tol at every interior node."""
    for name, a in (("alpha", alpha), ("alpha_prime", alpha_prime)):
        if not 0.0 < a < 0.5:
            raise DomainError("radial", "solve_radial", f"{name} in (0, 1/2) required")
    if R <= 0 or R_target <= 0:
        raise DomainError("radial", "solve_radial", "R, R_target > 0 required")
    k = alpha_prime / alpha
    eps = 1e-6 * R

    # bracket + solve for the shooting coefficient on a coarse grid
    coarse = _grid(R, 1200, eps)

    def gap_on(grid):
        def gap(c):
            f, _ = _integrate(c, k, grid)
            if f is None:
                return _F_CAP
            return f[-1] - R_target
        return gap

    gap_c = gap_on(coarse)
    c_lo, c_hi = 1e-8, 1.0
    g_lo, g_hi = gap_c(c_lo), gap_c(c_hi)
    tries = 0
    while g_lo > 0 and tries < 60:
        c_lo *= 0.25
        g_lo = gap_c(c_lo)
        tries += 1
    while g_hi < 0 and tries < 120:
        c_hi *= 4.0
        g_hi = gap_c(c_hi)
        tries += 1
    if g_lo > 0 or g_hi < 0:
        raise SolverError("radial", "solve_radial", "shooting bracket failed",
                          f"gap({c_lo}) = {g_lo}, gap({c_hi}) = {g_hi}")
    c_star = brentq(gap_c, c_lo, c_hi, xtol=1e-15, rtol=8.9e-16)

    n = 2400
    profile = None
    while True:
        grid = _grid(R, n, eps)
        gap = gap_on(grid)
        # secant polish of the coarse coefficient at this resolution
        g0 = gap(c_star)
        c1 = c_star * (1.0 + 1e-7)
        g1 = gap(c1)
        for _ in range(8):
            if abs(g0) <= 1e-13 * max(R_target, 1.0) or g1 == g0:
                break
            c_new = c_star - g0 * (c1 - c_star) / (g1 - g0)
            c1, g1 = c_star, g0
            c_star = c_new
            g0 = gap(c_star)
        f, fp = _integrate(c_star, k, grid)
        res = _collocation_residual(grid, f, fp, k)
        bound = float(np.max(np.abs(res)))
        profile = RadialProfile(alpha, alpha_prime, R, R_target,
                                grid, f, fp, res, bound, float(c_star))
        if bound <= tol or n >= max_nodes:
            break
        n *= 2
    if profile.residual_bound > tol:
        raise SolverError("radial", "solve_radial", "residual tolerance not reached",
                          f"bound {profile.residual_bound} > tol {tol}")
    if np.any(profile.f_prime <= 0):
        raise SolverError("radial", "solve_radial", "profile not strictly increasing")
    return profile


def indicial_exponent_fit(profile: RadialProfile, n_points=40):
    """Slope of log f against log rho near the cone point."""
    sel = slice(1, n_points)
    x = np.log(profile.rho[sel])
    y = np.log(profile.f[sel])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def compare_with_mesh(profile: RadialProfile, domain, target, vmap) -> dict:
    """Vertex-wise errors between a mesh harmonic solve and the ODE profile.

    domain and target are cone annuli built by build_cone_annulus with
    matching angles; vmap is the converged vertex map.  Errors are geodesic
    distances on the target between each image point and the profile's
    prediction (f(rho_v), k * theta_v)."""
    from . import harmonic  # local import: radial stays importable standalone
    from . import surface as sface

    dom_coords = sface.annulus_cone_coords(domain)
    tgt_alpha = target.meta["alpha"]
    geom = harmonic.MapGeometry(domain, target)
    errs = []
    for v in range(domain.n_vertices):
        if v in domain.marked:
            continue
        rho_v, th_v = dom_coords[v]
        f_v, _ = profile.interp(np.array([rho_v]))
        rho_img, th_img = geom.image_cone_coords(vmap, v)
        d = hc_cone_distance(rho_img, th_img, float(f_v[0]),
                             (profile.k * th_v) % (2 * np.pi * tgt_alpha), tgt_alpha)
        errs.append(float(d))
    errs = np.array(errs)
    return {
        "l_inf": float(errs.max()),
        "l2": float(np.sqrt(np.mean(errs ** 2))),
        "n": len(errs),
    }


def hc_cone_distance(r1, t1, r2, t2, alpha):
    from . import hypcore as hc
    return float(hc.cone_distance(r1, t1, r2, t2, alpha))
