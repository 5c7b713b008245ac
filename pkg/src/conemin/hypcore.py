"""Hyperbolic-plane and cone-model primitives.

Points of the hyperbolic plane live on the upper hyperboloid sheet
x^2 + y^2 - t^2 = -1, t > 0, with the Minkowski pairing
<a,b> = a_x b_x + a_y b_y - a_t b_t.  The Poincare disk appears only for
conformal charts; the cone model of total angle 2*pi*alpha is handled in
cylindrical coordinates (rho, theta mod 2*pi*alpha) with local hyperboloid
lifts.  All functions accept batched arrays (leading axes broadcast).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, GeometryError, SolverError

ORIGIN = np.array([0.0, 0.0, 1.0])

_EPS_NORM = 1e-12


def mink(a, b):
    """Minkowski pairing <a,b> with signature (+,+,-)."""
    a = np.asarray(a)
    b = np.asarray(b)
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] - a[..., 2] * b[..., 2]


def normalize_point(p):
    """Rescale onto the hyperboloid sheet (<p,p> = -1, t > 0)."""
    p = np.asarray(p, dtype=float)
    q = mink(p, p)
    if np.any(q >= 0):
        raise GeometryError("hypcore", "normalize_point", "timelike vector required",
                            f"<p,p> = {np.max(q)}")
    out = p / np.sqrt(-q)[..., None]
    return np.where(out[..., 2:3] > 0, out, -out)


def dist(a, b):
    """Geodesic distance arccosh(-<a,b>).

    Evaluated as 2*arcsinh(|a-b|_M / 2), which is the same function but keeps
    full precision near coincident points where arccosh loses half the digits."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    q = np.sqrt(np.maximum(mink(d, d), 0.0))
    return 2.0 * np.arcsinh(0.5 * q)


def log_map(x, y):
    """Tangent vector at x pointing to y with |v| = dist(x, y)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = dist(x, y)
    u = y + mink(x, y)[..., None] * x          # component of y orthogonal to x
    n = np.sqrt(np.maximum(mink(u, u), 0.0))
    scale = np.where(n > _EPS_NORM, d / np.where(n > _EPS_NORM, n, 1.0), 0.0)
    return u * scale[..., None]


def exp_map(x, v):
    """Geodesic exponential at x of tangent vector v."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    n = np.sqrt(np.maximum(mink(v, v), 0.0))
    small = n <= _EPS_NORM
    safe = np.where(small, 1.0, n)
    out = np.cosh(n)[..., None] * x + (np.sinh(n) / safe)[..., None] * v
    return normalize_point(np.where(small[..., None], x + v, out))


def lorentz_cross(a, b):
    """Minkowski cross product: <cross(a,b), x> = det[a, b, x]."""
    a = np.asarray(a)
    b = np.asarray(b)
    c = np.empty(np.broadcast(a, b).shape, dtype=float)
    c[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    c[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    c[..., 2] = -(a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0])
    return c


def poincare_from_hyperboloid(p):
    """Poincare-disk coordinate z = (x + i y)/(1 + t)."""
    p = np.asarray(p, dtype=float)
    return (p[..., 0] + 1j * p[..., 1]) / (1.0 + p[..., 2])


def hyperboloid_from_poincare(z):
    z = np.asarray(z, dtype=complex)
    r2 = np.abs(z) ** 2
    if np.any(r2 >= 1.0):
        raise DomainError("hypcore", "hyperboloid_from_poincare", "|z| < 1 required")
    w = 1.0 / (1.0 - r2)
    out = np.empty(z.shape + (3,), dtype=float)
    out[..., 0] = 2.0 * z.real * w
    out[..., 1] = 2.0 * z.imag * w
    out[..., 2] = (1.0 + r2) * w
    return out


def dist_poincare(z1, z2):
    """Disk-model distance 2*artanh of the Moebius difference."""
    z1 = np.asarray(z1, dtype=complex)
    z2 = np.asarray(z2, dtype=complex)
    m = np.abs((z1 - z2) / (1.0 - np.conj(z1) * z2))
    return 2.0 * np.arctanh(np.minimum(m, 1.0 - 1e-16))


def poincare_conformal_factor(z):
    """rho^2 with g = rho^2 |dz|^2 in the Poincare disk."""
    return 4.0 / (1.0 - np.abs(np.asarray(z)) ** 2) ** 2


# ---------------------------------------------------------------------------
# triangles


@dataclass(frozen=True)
class HTriangle:
    """Geodesic triangle given by side lengths; angles derived.

    Index convention: lengths[k] is the side opposite corner k."""

    lengths: tuple
    angles: tuple


def _check_triangle(lengths, module="hypcore", op="solve_triangle"):
    l = np.asarray(lengths, dtype=float)
    if l.shape != (3,):
        raise DomainError(module, op, "exactly three lengths required")
    if np.any(l <= 0):
        raise DomainError(module, op, "positive lengths required", f"got {l.tolist()}")
    for k in range(3):
        if l[k] >= l[(k + 1) % 3] + l[(k + 2) % 3]:
            raise GeometryError(
                module, op, "strict triangle inequality violated",
                f"l[{k}] = {l[k]} >= l[{(k + 1) % 3}] + l[{(k + 2) % 3}] "
                f"= {l[(k + 1) % 3] + l[(k + 2) % 3]}")


def triangle_angles(lengths):
    """Batched hyperbolic law of cosines: lengths (...,3) -> angles (...,3).

    angles[..., k] is at the corner opposite lengths[..., k]."""
    l = np.asarray(lengths, dtype=float)
    # u = cosh(l) - 1 computed without cancellation; keeps tiny triangles exact
    u = 2.0 * np.sinh(0.5 * l) ** 2
    sh = np.sinh(l)
    ang = np.empty_like(l)
    for k in range(3):
        a, b, c = k, (k + 1) % 3, (k + 2) % 3
        num = u[..., b] + u[..., c] - u[..., a] + u[..., b] * u[..., c]
        cos_k = num / (sh[..., b] * sh[..., c])
        ang[..., k] = np.arccos(np.clip(cos_k, -1.0, 1.0))
    return ang


def solve_triangle(lengths) -> HTriangle:
    """Angles of the hyperbolic triangle with the given side lengths."""
    _check_triangle(lengths)
    ang = triangle_angles(np.asarray(lengths, dtype=float))
    # roundoff slack: near-Euclidean triangles compute their sum to ~1e-8 only
    if ang.sum() >= np.pi + 1e-8:
        raise GeometryError("hypcore", "solve_triangle", "angle sum < pi violated",
                            f"sum = {ang.sum()}")
    return HTriangle(tuple(float(x) for x in lengths), tuple(float(a) for a in ang))


def triangle_from_angle_side(side, ang_b, ang_c) -> HTriangle:
    """ASA solver: side a between angles B and C; returns the full triangle."""
    for name, v in (("side", side), ("ang_b", ang_b), ("ang_c", ang_c)):
        if v <= 0:
            raise DomainError("hypcore", "triangle_from_angle_side", f"{name} > 0 required")
    cos_a = -np.cos(ang_b) * np.cos(ang_c) + np.sin(ang_b) * np.sin(ang_c) * np.cosh(side)
    if cos_a <= -1.0:
        raise GeometryError("hypcore", "triangle_from_angle_side", "angles too large")
    ang_a = np.arccos(np.clip(cos_a, -1.0, 1.0))
    cosh_b = (np.cos(ang_b) + np.cos(ang_a) * np.cos(ang_c)) / (np.sin(ang_a) * np.sin(ang_c))
    cosh_c = (np.cos(ang_c) + np.cos(ang_a) * np.cos(ang_b)) / (np.sin(ang_a) * np.sin(ang_b))
    lengths = (float(side), float(np.arccosh(max(cosh_b, 1.0))),
               float(np.arccosh(max(cosh_c, 1.0))))
    return HTriangle(lengths, (float(ang_a), float(ang_b), float(ang_c)))


def euclid_angles(lengths):
    """Euclidean law of cosines on the same side lengths (cot-weight source)."""
    l = np.asarray(lengths, dtype=float)
    ang = np.empty_like(l)
    for k in range(3):
        a, b, c = k, (k + 1) % 3, (k + 2) % 3
        cos_k = (l[..., b] ** 2 + l[..., c] ** 2 - l[..., a] ** 2) / (2 * l[..., b] * l[..., c])
        ang[..., k] = np.arccos(np.clip(cos_k, -1.0, 1.0))
    return ang


def euclid_area(lengths):
    """Heron's formula, batched."""
    l = np.asarray(lengths, dtype=float)
    s = 0.5 * l.sum(axis=-1)
    prod = s * (s - l[..., 0]) * (s - l[..., 1]) * (s - l[..., 2])
    return np.sqrt(np.maximum(prod, 0.0))


def canonical_corners(lengths):
    """Positively oriented hyperboloid realization.

    Corner 0 at the origin, corner 1 on the +x geodesic ray, corner 2 in the
    upper half; lengths (...,3) with lengths[...,k] opposite corner k."""
    l = np.asarray(lengths, dtype=float)
    ang = triangle_angles(l)
    shape = l.shape[:-1]
    V = np.zeros(shape + (3, 3))
    V[..., 0, 2] = 1.0
    V[..., 1, 0] = np.sinh(l[..., 2])
    V[..., 1, 2] = np.cosh(l[..., 2])
    V[..., 2, 0] = np.sinh(l[..., 1]) * np.cos(ang[..., 0])
    V[..., 2, 1] = np.sinh(l[..., 1]) * np.sin(ang[..., 0])
    V[..., 2, 2] = np.cosh(l[..., 1])
    return V


def place_third(A, B, dist_a, dist_b, side=1.0):
    """Point C with dist(A,C) = dist_a, dist(B,C) = dist_b.

    side = +1 puts C to the left of the oriented segment A->B."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    c = dist(A, B)
    sh_c = np.sinh(c)
    e1 = (B + mink(A, B)[..., None] * A) / sh_c[..., None]
    e2 = lorentz_cross(A, e1)
    ch_a, sh_a = np.cosh(dist_a), np.sinh(dist_a)
    cos_t = (np.cosh(dist_a) * np.cosh(c) - np.cosh(dist_b)) / (sh_a * sh_c)
    cos_t = np.clip(cos_t, -1.0, 1.0)
    sin_t = np.sqrt(1.0 - cos_t ** 2)
    C = (ch_a[..., None] * A
         + (sh_a * cos_t)[..., None] * e1
         + (np.asarray(side) * sh_a * sin_t)[..., None] * e2)
    return normalize_point(C)


def bary_point(corners, bary):
    """Projective barycentric combination: normalize(sum b_i V_i).

    Commutes with isometries, exact at corners and along edges."""
    corners = np.asarray(corners, dtype=float)
    bary = np.asarray(bary, dtype=float)
    return normalize_point(np.einsum("...k,...kj->...j", bary, corners))


def bary_coords(corners, p):
    """Inverse of bary_point: projective coordinates of p in the triangle."""
    corners = np.asarray(corners, dtype=float)
    p = np.asarray(p, dtype=float)
    M = np.swapaxes(corners, -1, -2)
    raw = np.linalg.solve(M, p[..., None])[..., 0]
    return raw / raw.sum(axis=-1, keepdims=True)


def orientation(corners):
    """det[V0,V1,V2]; positive for counterclockwise triples."""
    return np.linalg.det(np.asarray(corners, dtype=float))


# ---------------------------------------------------------------------------
# the cone model H^2_alpha


@dataclass(frozen=True)
class ConeChart:
    """Conformal or cylindrical chart of the cone of total angle 2*pi*alpha."""

    alpha: float
    kind: str = "conformal"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise DomainError("hypcore", "ConeChart", "alpha in (0,1) required",
                              f"alpha = {self.alpha}")
        if self.kind not in ("conformal", "cylindrical"):
            raise DomainError("hypcore", "ConeChart", "unknown chart kind", self.kind)


def wrap_angle(theta, alpha):
    """Reduce to the symmetric fundamental interval (-pi*alpha, pi*alpha]."""
    period = 2.0 * np.pi * alpha
    t = np.mod(np.asarray(theta, dtype=float) + np.pi * alpha, period) - np.pi * alpha
    return np.where(t <= -np.pi * alpha, t + period, t)


def cone_chart_convert(rho, theta, chart: ConeChart):
    """Cylindrical (rho, theta) -> conformal coordinate z.

    |z| = (alpha * tanh(rho/2))^(1/alpha), arg z = theta/alpha."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho <= 0):
        raise DomainError("hypcore", "cone_chart_convert", "rho > 0 required",
                          "the cone point itself has no chart image")
    a = chart.alpha
    r = (a * np.tanh(rho / 2.0)) ** (1.0 / a)
    return r * np.exp(1j * np.asarray(theta, dtype=float) / a)


def cone_chart_invert(z, chart: ConeChart):
    """Conformal z -> cylindrical (rho, theta); theta in [0, 2*pi*alpha)."""
    z = np.asarray(z, dtype=complex)
    a = chart.alpha
    r = np.abs(z)
    if np.any(r <= 0):
        raise DomainError("hypcore", "cone_chart_invert", "z != 0 required")
    s = r ** a / a
    if np.any(s >= 1.0):
        raise DomainError("hypcore", "cone_chart_invert", "|z|^alpha < alpha required")
    rho = 2.0 * np.arctanh(s)
    theta = np.mod(np.angle(z) * a, 2.0 * np.pi * a)
    return rho, theta


def cone_conformal_factor(z, alpha):
    """sigma^2 with g_alpha = sigma^2 |dz|^2 in the conformal cone chart."""
    r = np.abs(np.asarray(z))
    return 4.0 * r ** (2.0 * (alpha - 1.0)) / (1.0 - r ** (2.0 * alpha) / alpha ** 2) ** 2


def cone_lift(rho, theta, alpha, theta_ref=0.0):
    """Hyperboloid lift of a cone point, unrolled about the angle theta_ref."""
    d = wrap_angle(np.asarray(theta) - theta_ref, alpha)
    rho = np.asarray(rho, dtype=float)
    out = np.empty(np.broadcast(rho, d).shape + (3,))
    out[..., 0] = np.sinh(rho) * np.cos(d)
    out[..., 1] = np.sinh(rho) * np.sin(d)
    out[..., 2] = np.cosh(rho)
    return out


def cone_distance(rho1, theta1, rho2, theta2, alpha):
    """Geodesic distance on H^2_alpha (valid for cone angle < pi)."""
    p = cone_lift(rho1, theta1, alpha, theta_ref=theta2)
    q = cone_lift(rho2, theta2, alpha, theta_ref=theta2)
    return dist(p, q)


def cone_separation_bound(alpha1: float, alpha2: float) -> float:
    """Closed-form lower bound on the distance between two cone points.

    arccosh((1 + cos(pi a1) cos(pi a2)) / (sin(pi a1) sin(pi a2))), valid for
    angle fractions in (0, 1/2)."""
    for a in (alpha1, alpha2):
        if not 0.0 < a < 0.5:
            raise DomainError("hypcore", "cone_separation_bound",
                              "alpha in (0, 1/2) required", f"alpha = {a}")
    num = 1.0 + np.cos(np.pi * alpha1) * np.cos(np.pi * alpha2)
    den = np.sin(np.pi * alpha1) * np.sin(np.pi * alpha2)
    return float(np.arccosh(num / den))


# ---------------------------------------------------------------------------
# weighted centroids (Karcher means)


def karcher_mean_batch(points, weights, mask=None, tol=1e-13, max_iter=60):
    """Batched minimizer of sum_i w_i dist(x, p_i)^2 over the hyperboloid.

    points (...,k,3), weights (...,k); masked entries ignored.  Returns the
    minimizer and the final gradient norms.  Weights may carry either sign as
    long as the local problem stays convex (small point spreads)."""
    points = np.asarray(points, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if mask is not None:
        weights = np.where(mask, weights, 0.0)
    wsum = weights.sum(axis=-1)
    wsafe = np.where(np.abs(wsum) > _EPS_NORM, wsum, 1.0)
    x = normalize_point(np.einsum("...k,...kj->...j", weights, points) / wsafe[..., None])
    gnorm = np.zeros(x.shape[:-1])
    for _ in range(max_iter):
        logs = log_map(x[..., None, :], points)
        g = np.einsum("...k,...kj->...j", weights, logs)
        gnorm = np.sqrt(np.maximum(mink(g, g), 0.0))
        if np.all(gnorm <= tol * np.maximum(np.abs(wsum), 1.0)):
            break
        x = exp_map(x, g / wsafe[..., None])
    return x, gnorm


def weighted_centroid(points, weights, tol=1e-12):
    """Unique minimizer of sum_i w_i dist(x, p_i)^2; weights nonnegative."""
    points = np.asarray(points, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if points.ndim != 2 or points.shape[-1] != 3:
        raise DomainError("hypcore", "weighted_centroid", "points must be (k,3)")
    if np.any(weights < 0):
        raise DomainError("hypcore", "weighted_centroid", "nonnegative weights required")
    if not np.any(weights > 0):
        raise DomainError("hypcore", "weighted_centroid", "at least one positive weight")
    x, gnorm = karcher_mean_batch(points[None], weights[None], tol=tol, max_iter=200)
    if float(gnorm[0]) > tol * max(float(weights.sum()), 1.0):
        raise SolverError("hypcore", "weighted_centroid", "gradient tolerance not reached",
                          f"|grad| = {float(gnorm[0])}")
    return x[0]
