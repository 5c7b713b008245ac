"""Batch driver: build fixtures, run the pipeline, emit reports.

All artifacts are deterministic given (config, seed): dictionary keys are
sorted, floats are written with shortest round-trip repr, and no wall-clock
content enters any report.  Parallelism is capped by CONE_MINIMAL_THREADS;
the pipeline itself runs sequentially, which trivially respects any cap.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, asdict

import numpy as np

from . import harmonic as hm
from . import hopf as hopf_mod
from . import minimal
from . import radial
from . import surface as sf
from . import teich
from .errors import ConeminError, DomainError


@dataclass
class RunConfig:
    fixture: str = "torus"
    alpha: float = 0.25
    alpha_prime: float = 0.40
    h: float = 0.1
    levels: int = 1
    inner_tol: float = 1e-10
    outer_tol: float = 3e-4
    seed: int = 0
    out: str = "run_out"

    def validate(self):
        for name, a in (("alpha", self.alpha), ("alpha_prime", self.alpha_prime)):
            if not 0.0 < a < 0.5:
                raise DomainError("cli", "RunConfig", f"{name} in (0, 1/2) required",
                                  str(a))
        if self.fixture not in ("torus", "annulus"):
            raise DomainError("cli", "RunConfig", "unknown fixture", self.fixture)
        if self.h <= 0 or self.levels < 1:
            raise DomainError("cli", "RunConfig", "h > 0, levels >= 1 required")
        # Gauss-Bonnet feasibility for the torus fixtures: chi = 0, alpha < 1
        return self


def _fmt(x):
    return repr(float(x))


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(x) if isinstance(x, float) else str(x)
                             for x in row) + "\n")


def _thread_cap():
    try:
        return max(1, int(os.environ.get("CONE_MINIMAL_THREADS", "1")))
    except ValueError:
        return 1


def _field_dump(out_dir, tag, state_surface, g, u, geom):
    ed = hm.compute_edge_data(geom, u)
    q = hopf_mod.hopf_field(state_surface, g, u, geom=geom, edge_data=ed)
    fields = hopf_mod.scalar_fields(state_surface, g, u, geom=geom, edge_data=ed)
    rows = []
    w = fields["w"].values
    for f in range(state_surface.n_faces):
        rows.append((f, float(q.phi[f].real), float(q.phi[f].imag),
                     float(fields["energy_density"].values[f]),
                     float(fields["jacobian"].values[f]),
                     float(fields["norm_del"].values[f]),
                     float(fields["norm_delbar"].values[f]),
                     float(w[f]) if np.isfinite(w[f]) else float("nan")))
    _write_csv(os.path.join(out_dir, f"fields_{tag}.csv"),
               ["face_id", "re_phi", "im_phi", "e", "J", "norm_d", "norm_dbar", "w"],
               rows)
    _write_json(os.path.join(out_dir, f"fields_{tag}_frames.json"),
                {"chart": "centroid conformal chart, x-axis toward corner 0; "
                          "cone charts at faces pinned to marked vertices",
                 "rho2": [float(x) for x in np.asarray(q.rho2, dtype=float)]})
    return [f"fields_{tag}.csv", f"fields_{tag}_frames.json"]


def _torus_level(config, out_dir, level, g1, g2, state0, artifacts, report):
    tol = config.outer_tol
    res = teich.descend(state0, g1, g2, outer_tol=tol, rel_tol=1e-6,
                        max_iters=600, inner_tol=config.inner_tol)
    _write_csv(os.path.join(out_dir, f"descent_L{level}.csv"),
               ["iter", "E", "E1", "E2", "wp_grad_norm", "step",
                "hopf_sum_residual"],
               [tuple(r) for r in res.trace])
    artifacts.append(f"descent_L{level}.csv")

    pg = minimal.assemble(res.state.surface(), g1, g2, res.ev.u1, res.ev.u2,
                          geom1=res.ev.geom1, geom2=res.ev.geom2)
    cert = minimal.conformality_certificate(pg)
    stab = minimal.stability_suite(pg, n_samples=50, seed=config.seed)
    marked0 = sorted(g1.marked)[0]
    angle = minimal.induced_cone_angle(pg, marked0)
    target_angle = 2 * np.pi * min(g1.marked[marked0], g2.marked[marked0])
    try:
        wslope = minimal.w_difference_slope(pg, marked0, n_rings=6)
    except (DomainError,) as exc:
        wslope = {"error": str(exc)}
    (phi1_v, _, _), (phi2_v, _, _) = pg.vertex_fields()
    hol_res = hopf_mod.holomorphicity_residual_vertex(res.state.surface(),
                                                      phi1_v + phi2_v)
    try:
        pole = hopf_mod.pole_order_estimate_vertex(res.state.surface(),
                                                   phi1_v, marked0)
    except DomainError as exc:
        pole = {"error": str(exc)}

    level_report = {
        "level": level,
        "n_vertices": int(g1.n_vertices),
        "outer_iters": len(res.trace) - 1,
        "wp_norm": res.wp_norm,
        "certificate": cert,
        "pass_hopf_sum": bool(cert["max_hopf_sum"] <= 10 * tol),
        "pass_gap": bool(cert["gap_over_energy"] <= 10 * tol),
        "induced_cone_angle": {"value": angle, "target": float(target_angle),
                               "rel_err": abs(angle - target_angle) / target_angle},
        "stability": {
            "hypothesis_met": stab.hypothesis_met,
            "w_violation_fraction": stab.w_violation_fraction,
            "e_violation_fraction": stab.e_violation_fraction,
            "hopf_norm_mismatch": stab.hopf_norm_mismatch,
            "eps_h": stab.eps_h,
            "min_second_variation_ratio":
                min(s["ratio"] for s in stab.second_variation_samples),
        },
        "w_slope": wslope,
        "holomorphicity_residual": hol_res,
        "pole_fit": pole,
        "composition_residual": minimal.composition_residual(pg),
    }
    artifacts.extend(_field_dump(out_dir, f"u1_L{level}", res.state.surface(),
                                 g1, res.ev.u1, res.ev.geom1))
    artifacts.extend(_field_dump(out_dir, f"u2_L{level}", res.state.surface(),
                                 g2, res.ev.u2, res.ev.geom2))
    _write_json(os.path.join(out_dir, f"state_L{level}.json"),
                res.state.to_json(reference_path=f"surface_g1_L{level}.json"))
    artifacts.append(f"state_L{level}.json")
    report["levels"].append(level_report)
    return res


def run(config: RunConfig) -> int:
    """Build, descend, certify; exit 0 iff all certificates pass."""
    config.validate()
    out_dir = config.out
    os.makedirs(out_dir, exist_ok=True)
    artifacts = []
    report = {"config": asdict(config), "levels": [],
              "thread_cap": _thread_cap()}
    try:
        if config.fixture == "torus":
            g1, g2 = sf.build_torus_pair(config.alpha, config.alpha_prime,
                                         config.h)
            for tag, s in (("g1", g1), ("g2", g2)):
                sf.save_surface(s, os.path.join(out_dir, f"surface_{tag}_L0.json"))
                artifacts.append(f"surface_{tag}_L0.json")
            state0 = teich.ConformalState(g1, np.zeros(g1.n_vertices))
            res = _torus_level(config, out_dir, 0, g1, g2, state0, artifacts,
                               report)
            for level in range(1, config.levels):
                g1f, g2f = sf.refine(g1), sf.refine(g2)
                phi_f = _prolong_phi(res.state, g1)
                state0f = teich.ConformalState(g1f, phi_f)
                g1, g2 = g1f, g2f
                res = _torus_level(config, out_dir, level, g1, g2, state0f,
                                   artifacts, report)
            ok = all(lv["pass_hopf_sum"] and lv["pass_gap"]
                     for lv in report["levels"])
            if len(report["levels"]) >= 2:
                a, b = report["levels"][-2], report["levels"][-1]
                report["refinement_decrease"] = {
                    "hopf_sum": b["certificate"]["max_hopf_sum"]
                    < a["certificate"]["max_hopf_sum"],
                    "gap": b["certificate"]["gap_over_energy"]
                    < a["certificate"]["gap_over_energy"],
                }
                ok = ok and all(report["refinement_decrease"].values())
            report["pass"] = bool(ok)
        else:
            report.update(_run_annulus(config, out_dir, artifacts))
            ok = report["pass"]
    except ConeminError as exc:
        _write_json(os.path.join(out_dir, "error.json"), exc.to_dict())
        _write_json(os.path.join(out_dir, "manifest.json"),
                    {"artifacts": sorted(artifacts + ["error.json"]),
                     "config": asdict(config)})
        return 2
    _write_json(os.path.join(out_dir, "certification.json"), report)
    artifacts.append("certification.json")
    _write_json(os.path.join(out_dir, "manifest.json"),
                {"artifacts": sorted(artifacts), "config": asdict(config)})
    return 0 if report["pass"] else 1


def _prolong_phi(state, coarse_ref):
    phi = state.phi
    new = np.empty(coarse_ref.n_vertices + coarse_ref.n_edges)
    new[:coarse_ref.n_vertices] = phi
    mids = 0.5 * (phi[coarse_ref.edges[:, 0]] + phi[coarse_ref.edges[:, 1]])
    new[coarse_ref.n_vertices:] = mids
    return new


def _run_annulus(config, out_dir, artifacts):
    """Oracle pipeline: mesh solves against the radial BVP across levels."""
    alpha, alpha_p = config.alpha, config.alpha_prime
    R = 1.0
    prof = radial.solve_radial(alpha, alpha_p, R, R, tol=1e-8)
    _write_csv(os.path.join(out_dir, "radial_profile.csv"),
               ["rho", "f", "f_prime", "ode_residual"], prof.to_rows())
    artifacts.append("radial_profile.csv")
    rows = []
    r_plus_rows = []
    for level in range(config.levels):
        h = config.h / (2 ** level)
        dom = sf.build_cone_annulus(alpha, R, h)
        tgt = sf.build_cone_annulus(alpha_p, R, h,
                                    n_spokes=dom.meta["n_spokes"],
                                    n_rings=dom.meta["n_rings"])
        vm, trace = hm.solve_harmonic(dom, tgt, hm.identity_map(dom, tgt),
                                      tol=config.inner_tol)
        err = radial.compare_with_mesh(prof, dom, tgt, vm)
        rows.append((level, float(h), int(dom.n_vertices),
                     err["l_inf"], err["l2"]))
        br = hopf_mod.bochner_residual(dom, tgt, vm)
        interior = hopf_mod.interior_vertices(dom, exclude_marked_rings=2)
        r_plus_rows.append((level, float(np.abs(br["r_plus"][interior]).max())))
    _write_csv(os.path.join(out_dir, "oracle_table.csv"),
               ["level", "h", "n_vertices", "l_inf", "l2"], rows)
    _write_csv(os.path.join(out_dir, "bochner_table.csv"),
               ["level", "r_plus_interior_max"], r_plus_rows)
    artifacts += ["oracle_table.csv", "bochner_table.csv"]
    decays = [rows[i][3] / rows[i + 1][3] for i in range(len(rows) - 1)]
    bdecays = [r_plus_rows[i][1] / r_plus_rows[i + 1][1]
               for i in range(len(r_plus_rows) - 1)]
    ok = all(d >= 1.7 for d in decays) and all(d >= 1.5 for d in bdecays)
    return {"pass": bool(ok), "oracle_decay": decays, "bochner_decay": bdecays}


def gradcheck_cmd(config: RunConfig) -> int:
    """Finite-difference audit of the energy gradient; nonzero exit on fail."""
    config.validate()
    os.makedirs(config.out, exist_ok=True)
    g1, g2 = sf.build_torus_pair(config.alpha, config.alpha_prime, config.h)
    try:
        rows = teich.gradcheck(g1, g1, g2, n_directions=20, eps=1e-5,
                               seed=config.seed, inner_tol=config.inner_tol)
    except ConeminError as exc:
        _write_json(os.path.join(config.out, "error.json"), exc.to_dict())
        return 2
    _write_csv(os.path.join(config.out, "gradcheck.csv"),
               ["direction", "analytic", "fd", "rel_err"],
               [(r["direction"], r["analytic"], r["fd"], r["rel_err"])
                for r in rows])
    n_pass = sum(r["rel_err"] <= 1e-3 for r in rows)
    _write_json(os.path.join(config.out, "gradcheck.json"),
                {"n_pass": n_pass, "n_total": len(rows), "seed": config.seed,
                 "pass": bool(n_pass >= 19)})
    return 0 if n_pass >= 19 else 1


def validate_only(path) -> int:
    s = sf.load_surface(path)
    report = s.validate()
    print(json.dumps(report, indent=1, sort_keys=True, default=float))
    return 0 if report["ok"] else 1


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="conemin",
                                 description="minimal-map pipeline driver")
    ap.add_argument("--fixture", default="torus", choices=["torus", "annulus"])
    ap.add_argument("--alpha", type=float, default=0.25)
    ap.add_argument("--alpha-prime", type=float, default=0.40)
    ap.add_argument("--h", type=float, default=0.1)
    ap.add_argument("--levels", type=int, default=1)
    ap.add_argument("--inner-tol", type=float, default=1e-10)
    ap.add_argument("--outer-tol", type=float, default=3e-4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="run_out")
    ap.add_argument("--validate-only", metavar="SURFACE_JSON")
    ap.add_argument("--gradcheck", action="store_true")
    args = ap.parse_args(argv)
    if args.validate_only:
        return validate_only(args.validate_only)
    config = RunConfig(fixture=args.fixture, alpha=args.alpha,
                       alpha_prime=args.alpha_prime, h=args.h,
                       levels=args.levels, inner_tol=args.inner_tol,
                       outer_tol=args.outer_tol, seed=args.seed, out=args.out)
    try:
        if args.gradcheck:
            return gradcheck_cmd(config)
        return run(config)
    except ConeminError as exc:
        os.makedirs(config.out, exist_ok=True)
        _write_json(os.path.join(config.out, "error.json"), exc.to_dict())
        print(json.dumps(exc.to_dict(), indent=1, sort_keys=True),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
