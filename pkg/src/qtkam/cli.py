"""Command-line front end: lattice queries, series algebra, measure
estimates and the KAM iteration, with file outputs and a run report.

Every invocation writes report.json into --out carrying the command
echo, a config hash, the produced file paths and any warnings; apart
from the timing field the outputs are a pure function of config plus
inputs.  Monte-Carlo commands take --seed (fixed default).  Exit codes:
0 success, 1 validation error (bad flags, malformed inputs), 2
numerical failure (Melnikov rejection, iteration breakdown).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from fractions import Fraction
from pathlib import Path

from qtkam.kam import (
    KamError,
    NlsTruncation,
    Schedule,
    build_nls,
    excluded_measure,
    initial_state,
    iterate,
    resonant_measure,
)
from qtkam.lattice import decompose_region, optimal_presentation, standard_cut
from qtkam.params import (
    AnalysisParams,
    Config,
    CutParams,
    LatticeParams,
    Problem,
    frac,
    load_config,
)
from qtkam.series import (
    grid_for,
    load_series,
    poisson_bracket,
    save_series,
    vector_field_norm,
)
from qtkam.toeplitz import quasi_toeplitz_norm


def default_config() -> Config:
    """Two-mode desk instance; a config file overrides it wholesale.

    The parameter box is centered on (696/1024, 282/1024), whose
    frequency vector clears every integer resonance with |k|_1 <= 15 by
    more than 5e-3; boxes with coordinates like 0.5 sit exactly on
    low-order resonances and lose every grid point to the Melnikov
    check."""
    return Config(
        problem=Problem(d=2, b=2, sites=((0, 0), (1, 0))),
        lattice=LatticeParams(tau0=2, tau1=17, c=Fraction(1, 2), C=4,
                              N0=2, mode="desk", gap=1),
        cut=CutParams(N=3, theta=Fraction(3, 5), mu=Fraction(39, 10),
                      tau=Fraction(2)),
        analysis=AnalysisParams(
            xi_box=((0.6640625, 0.6953125), (0.259765625, 0.291015625)),
            xi_points=1),
    )


def _parse_point(text: str) -> tuple:
    try:
        return tuple(int(x) for x in text.replace("(", "").replace(")", "")
                     .split(","))
    except ValueError as exc:
        raise ValueError(f"bad point {text!r}: expected comma-separated "
                         f"integers") from exc


def _parse_box(text: str) -> tuple:
    out = []
    for part in text.split(","):
        lo, _, hi = part.partition(":")
        out.append((int(lo), int(hi)))
        if out[-1][0] > out[-1][1]:
            raise ValueError(f"bad range {part!r}")
    return tuple(out)


def _parse_sites(text: str) -> tuple:
    return tuple(_parse_point(p) for p in text.split(";") if p.strip())


def _parse_l(text: str) -> dict:
    # "0,1:1;1,0:-1" -> {(0,1): 1, (1,0): -1}
    out = {}
    for part in text.split(";"):
        if not part.strip():
            continue
        site, _, mult = part.rpartition(":")
        out[_parse_point(site)] = int(mult)
    return out


def _read_header(path) -> dict:
    with open(path) as fh:
        return json.loads(fh.readline())


def _series_problem(path, fallback: Problem) -> Problem:
    header = _read_header(path)
    meta = header.get("problem")
    if not meta:
        return fallback
    return Problem(d=int(meta["d"]), b=int(meta["b"]),
                   sites=tuple(tuple(int(x) for x in s)
                               for s in meta["sites"]))


def _build_instance(cfg: Config, args):
    """Grid, normal form and perturbation of the configured NLS."""
    ap = cfg.analysis or AnalysisParams()
    grid = grid_for(cfg.problem, ap.xi_box, ap.xi_points)
    trunc = NlsTruncation(normal_sites=_parse_sites(args.normal_sites),
                          degree_max=ap.degree_max)
    mults = [float(x) for x in args.i0.split(",")]
    while len(mults) < cfg.problem.b:
        mults.append(mults[-1])
    I0 = tuple(m * ap.r ** 2 for m in mults[:cfg.problem.b])
    nf, P = build_nls(cfg.problem, args.power, I0, trunc, grid, ap.r,
                      strength=args.strength)
    if getattr(args, "perturbation", None):
        P = load_series(args.perturbation)
        if P.b != cfg.problem.b:
            raise ValueError("perturbation series has wrong tangential "
                             "dimension")
    return grid, nf, P


# -- commands ----------------------------------------------------------------


def cmd_present(args, cfg, out_dir, warnings):
    point = _parse_point(args.point)
    problem = cfg.problem
    if len(point) != problem.d:
        # the lattice layer is dimension-generic; a bare point query
        # should not force a matching config
        problem = Problem(d=len(point), b=1, sites=((0,) * len(point),))
        warnings.append(f"point has d={len(point)}; using a zero-site "
                        f"problem of that dimension")
    pres = optimal_presentation(point, args.N, problem, cfg.lattice)
    if pres is None:
        print(f"no presentation of {point} inside the N={args.N} ball")
        return 2, {"point": list(point), "N": args.N, "presentation": None}, {}
    print(f"optimal presentation of {point} at N = {args.N}:")
    for v, p in pres.rows:
        print(f"  {p:>6}  |  ({','.join(str(x) for x in v)})")
    return 0, {"point": list(point), "N": args.N,
               "presentation": [[p, list(v)] for v, p in pres.rows],
               "label": pres.label()}, {}


def cmd_cut(args, cfg, out_dir, warnings):
    point = _parse_point(args.point)
    problem = cfg.problem
    if len(point) != problem.d:
        problem = Problem(d=len(point), b=1, sites=((0,) * len(point),))
        warnings.append(f"point has d={len(point)}; using a zero-site "
                        f"problem of that dimension")
    sc = standard_cut(point, args.N, problem, cfg.lattice)
    sub = None if sc.subspace is None else sc.subspace.label()
    print(f"standard cut of {point} at N = {args.N}: ell = {sc.ell}, "
          f"tau = {sc.tau}, level = {sc.level}")
    print(f"  presentation {sc.presentation.label()}  subspace {sub}")
    return 0, {"point": list(point), "N": args.N, "ell": sc.ell,
               "tau": str(sc.tau_exact), "level": sc.level,
               "presentation": sc.presentation.label(),
               "subspace": sub}, {}


def _svg_decomposition(dec, box, problem) -> str:
    (x0, x1), (y0, y1) = box
    pad = 2
    w, h = x1 - x0 + 2 * pad, y1 - y0 + 2 * pad
    # SVG y runs downward; flip via  y -> y1 + pad - y
    def pt(x, y):
        return x - x0 + pad, y1 - y + pad
    colors = {"core": "#8a8a8a", "a0": "#4a7fb5", "portion": "#2a9d4e",
              "uncovered": "#d64545"}
    rows = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w} {h}"'
            f' width="{min(12 * w, 1400)}" height="{min(12 * h, 1400)}">',
            f'<rect width="{w}" height="{h}" fill="white"/>']
    for A, members in sorted(dec.portions.items(),
                             key=lambda kv: kv[0].label()):
        (v, p), = A.rows
        # line v.x = p clipped to the box
        ends = []
        vx, vy = v
        for xx in (x0 - pad, x1 + pad):
            if vy != 0:
                yy = (p - vx * xx) / vy
                if y0 - pad <= yy <= y1 + pad:
                    ends.append(pt(xx, yy))
        for yy in (y0 - pad, y1 + pad):
            if vx != 0:
                xx = (p - vy * yy) / vx
                if x0 - pad <= xx <= x1 + pad:
                    ends.append(pt(xx, yy))
        if len(ends) >= 2:
            (ax, ay), (bx, by) = ends[0], ends[-1]
            rows.append(f'<line x1="{ax:.2f}" y1="{ay:.2f}" x2="{bx:.2f}" '
                        f'y2="{by:.2f}" stroke="{colors["portion"]}" '
                        f'stroke-width="0.08" opacity="0.5"/>')
        # bold segment over the member extent
        if members:
            dirv = (-vy, vx)
            ts = sorted((m[0] * dirv[0] + m[1] * dirv[1], m)
                        for m in members)
            (ax, ay), (bx, by) = pt(*ts[0][1]), pt(*ts[-1][1])
            rows.append(f'<line x1="{ax:.2f}" y1="{ay:.2f}" x2="{bx:.2f}" '
                        f'y2="{by:.2f}" stroke="{colors["portion"]}" '
                        f'stroke-width="0.22"/>')
    buckets = [("core", dec.core), ("a0", dec.a0),
               ("uncovered", dec.uncovered)]
    for name, pts in buckets:
        for m in sorted(pts):
            cx, cy = pt(*m)
            rows.append(f'<circle cx="{cx}" cy="{cy}" r="0.28" '
                        f'fill="{colors[name]}"/>')
    for members in dec.portions.values():
        for m in sorted(members):
            cx, cy = pt(*m)
            rows.append(f'<circle cx="{cx}" cy="{cy}" r="0.28" '
                        f'fill="{colors["portion"]}"/>')
    for s in problem.sites:
        if box[0][0] <= s[0] <= box[0][1] and box[1][0] <= s[1] <= box[1][1]:
            cx, cy = pt(*s)
            rows.append(f'<rect x="{cx - 0.4}" y="{cy - 0.4}" width="0.8" '
                        f'height="0.8" fill="black"/>')
    rows.append("</svg>")
    return "\n".join(rows) + "\n"


def cmd_decompose(args, cfg, out_dir, warnings):
    box = _parse_box(args.box)
    radius = None if args.radius is None else Fraction(args.radius)
    dec = decompose_region(box, args.N, cfg.problem, cfg.lattice,
                           radius=radius)
    counts = dec.counts()
    print(f"decomposition of {args.box} at N = {args.N}: {counts}")
    labels = {}
    for A, members in dec.portions.items():
        for m in members:
            labels[m] = A.label()
    csv_path = out_dir / "decomposition.csv"
    with open(csv_path, "w") as fh:
        fh.write("x,y,class,subspace\n" if cfg.problem.d == 2
                 else "point,class,subspace\n")
        rows = [(m, "core", "") for m in dec.core]
        rows += [(m, "a0", "") for m in dec.a0]
        rows += [(m, "portion", labels[m]) for s in dec.portions.values()
                 for m in s]
        rows += [(m, "uncovered", "") for m in dec.uncovered]
        for m, kind, label in sorted(rows):
            coord = (",".join(str(x) for x in m) if cfg.problem.d == 2
                     else "(" + " ".join(str(x) for x in m) + ")")
            fh.write(f'{coord},{kind},"{label}"\n')
    outputs = {"csv": str(csv_path)}
    if cfg.problem.d == 2:
        svg_path = out_dir / "decomposition.svg"
        svg_path.write_text(_svg_decomposition(dec, box, cfg.problem))
        outputs["svg"] = str(svg_path)
    code = 0 if not dec.uncovered else 2
    if dec.uncovered:
        warnings.append(f"{len(dec.uncovered)} uncovered points")
    return code, {"N": args.N, "box": [list(b) for b in box],
                  "counts": counts}, outputs


def cmd_bracket(args, cfg, out_dir, warnings):
    F = load_series(args.series)
    G = load_series(getattr(args, "with"))
    trunc = None
    if args.trunc:
        deg, _, kmax = args.trunc.partition(",")
        trunc = (int(deg), int(kmax))
    H = poisson_bracket(F, G, trunc=trunc)
    out_path = Path(args.out_file) if args.out_file \
        else out_dir / "bracket.jsonl"
    save_series(H, out_path, problem=_series_problem(args.series,
                                                     cfg.problem))
    print(f"{{F, G}}: {len(H.terms)} terms, dropped mass {H.dropped:.3e} "
          f"-> {out_path}")
    return 0, {"terms": len(H.terms), "dropped": H.dropped}, \
        {"series": str(out_path)}


def cmd_norm(args, cfg, out_dir, warnings):
    F = load_series(args.series)
    problem = _series_problem(args.series, cfg.problem)
    val = vector_field_norm(F, args.r, args.s, args.rho, problem)
    print(f"{val!r}")
    return 0, {"norm": val, "r": args.r, "s": args.s, "rho": args.rho}, {}


def cmd_qt_norm(args, cfg, out_dir, warnings):
    F = load_series(args.series)
    problem = _series_problem(args.series, cfg.problem)
    ap = cfg.analysis or AnalysisParams()
    r = args.r if args.r is not None else ap.r
    s = args.s if args.s is not None else ap.s
    rep = {}
    try:
        val = quasi_toeplitz_norm(
            F, args.K, frac(args.theta), frac(args.mu), None, None,
            r, s, args.rho, problem, cfg.lattice, report=rep)
    except ValueError as exc:
        print(f"quasi-Toeplitz norm undefined: {exc}")
        return 2, {"error": str(exc)}, {}
    print(f"quasi-Toeplitz norm at K = {args.K}: {val!r}")
    table = out_dir / "qt_norm.json"
    table.write_text(json.dumps(rep, indent=2, default=str) + "\n")
    return 0, {"qt_norm": val, "K": args.K}, {"table": str(table)}


def cmd_measure(args, cfg, out_dir, warnings):
    ap = cfg.analysis or AnalysisParams()
    grid, nf, _ = _build_instance(cfg, args)
    K = args.K if args.K is not None else ap.K
    gamma = args.gamma if args.gamma is not None else ap.gamma
    if args.excluded:
        rep = {}
        frac_excl, bound = excluded_measure(
            nf, K, gamma, grid, cfg.problem, cfg.lattice, C=args.C,
            report=rep, good_radius=args.good_radius)
        print(f"excluded fraction {frac_excl:.6f}  scaling bound "
              f"{bound:.6e}")
        return 0, {"excluded_fraction": frac_excl, "bound": bound,
                   "K": K, "gamma": gamma,
                   "failing_points": rep.get("failing_points")}, {}
    if not args.k:
        raise ValueError("measure needs --k unless --excluded is set")
    rep = {}
    est, bound = resonant_measure(
        nf, _parse_point(args.k), _parse_l(args.l), args.rho_exp, gamma,
        K, samples=args.samples, seed=args.seed, report=rep)
    print(f"resonant measure estimate {est:.6e}  a-priori bound "
          f"{bound:.6e}  ({rep['method']}, {rep['samples']} samples)")
    return 0, {"estimate": est, "bound": bound, "K": K, "gamma": gamma,
               "method": rep["method"], "width": rep["width"],
               "hits": rep["hits"], "stderr": rep["stderr"]}, {}


def cmd_kam_run(args, cfg, out_dir, warnings):
    ap = cfg.analysis or AnalysisParams()
    grid, nf, P = _build_instance(cfg, args)
    state = initial_state(nf, P, ap, theta=float(args.theta0),
                          mu=float(args.mu0), problem=cfg.problem,
                          lp=cfg.lattice)
    schedule = Schedule(s0=ap.s, r0=ap.r, eps0=state.params.eps, K0=ap.K,
                        theta0=float(args.theta0), mu0=float(args.mu0),
                        gamma=ap.gamma, chi=ap.chi, lp=cfg.lattice,
                        d=cfg.problem.d, kmax=ap.kmax)
    warnings.extend(schedule.warnings)
    mel_opts = {}
    if args.good_radius is not None:
        mel_opts["good_radius"] = args.good_radius
    states, report = iterate(state, schedule, args.steps, cfg.problem,
                             cfg.lattice, ap, mel_opts=mel_opts,
                             jobs=args.jobs)
    generators = report.pop("generators")
    gen_paths = []
    for i, F in enumerate(generators):
        path = out_dir / f"generator_{i:03d}.jsonl"
        save_series(F, path, problem=cfg.problem)
        gen_paths.append(str(path))
    report["generator_files"] = gen_paths
    report["omega_final"] = [list(row) for row in report["omega_final"]]
    for rep in report["steps"]:
        warnings.extend(rep.get("warnings", []))
    steps_path = out_dir / "kam_steps.json"
    steps_path.write_text(json.dumps(report, indent=2, default=str) + "\n")
    nf_final = states[-1].nf
    nf_path = out_dir / "normal_form.json"
    nf_path.write_text(json.dumps({
        "e": list(nf_final.e),
        "omega": [list(row) for row in nf_final.omega],
        "omega_tilde": {",".join(str(x) for x in s): list(v)
                        for s, v in sorted(nf_final.omega_tilde.items())},
        "grid": {"box": [[str(lo), str(hi)] for lo, hi in grid.box],
                 "npts": grid.npts},
        "M": nf_final.M, "L": nf_final.L,
        "surviving": list(states[-1].surviving),
    }, indent=2) + "\n")
    eps = report["eps_sequence"]
    print(f"{len(states) - 1} steps: eps " +
          " -> ".join(f"{e:.3e}" for e in eps))
    print(f"surviving fraction {states[-1].surviving_fraction:.3f}, "
          f"omega drift {report['omega_drift']:.3e}")
    outputs = {"steps": str(steps_path), "normal_form": str(nf_path),
               "generators": gen_paths}
    return 0, {"eps_sequence": eps, "K_sequence": report["K_sequence"],
               "omega_drift": report["omega_drift"],
               "surviving_fraction": states[-1].surviving_fraction}, outputs


# -- plumbing ----------------------------------------------------------------


def _add_instance_flags(sp):
    sp.add_argument("--normal-sites",
                    default="(-1,0);(0,1);(0,-1);(1,1)",
                    help="normal-mode truncation window, ';'-separated")
    sp.add_argument("--i0", default="2.5,3.0",
                    help="action center as multiples of r^2")
    sp.add_argument("--power", type=int, default=2,
                    help="half-degree p of the |u|^(2p-2) u nonlinearity")
    sp.add_argument("--strength", type=float, default=1e-6)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="qtkam",
        description="quasi-Toeplitz KAM machinery: lattice geometry, "
                    "Hamiltonian series and the desk-scale iteration")
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("--mode", choices=("paper", "desk"),
                    help="override the lattice validation mode")
    ap.add_argument("--seed", type=int, default=2026)
    ap.add_argument("--jobs", type=int, default=None)
    ap.add_argument("--out", default=".", help="output directory")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("present", help="optimal presentation of a point")
    sp.add_argument("--point", required=True)
    sp.add_argument("--N", type=int, required=True)
    sp.set_defaults(fn=cmd_present)

    sp = sub.add_parser("cut", help="standard cut of a point")
    sp.add_argument("--point", required=True)
    sp.add_argument("--N", type=int, required=True)
    sp.set_defaults(fn=cmd_cut)

    sp = sub.add_parser("decompose", help="classify a lattice box")
    sp.add_argument("--box", required=True, help='e.g. "-50:50,-50:50"')
    sp.add_argument("--N", type=int, required=True)
    sp.add_argument("--radius", default=None,
                    help="good-portion radius override (default N^tau1)")
    sp.set_defaults(fn=cmd_decompose)

    sp = sub.add_parser("bracket", help="Poisson bracket of two series")
    sp.add_argument("--series", required=True)
    sp.add_argument("--with", required=True, dest="with")
    sp.add_argument("--trunc", default=None, help='"degree,kmax"')
    sp.add_argument("--out-file", default=None)
    sp.set_defaults(fn=cmd_bracket)

    sp = sub.add_parser("norm", help="majorant vector-field norm")
    sp.add_argument("--series", required=True)
    sp.add_argument("--r", type=float, required=True)
    sp.add_argument("--s", type=float, required=True)
    sp.add_argument("--rho", type=float, default=1.0)
    sp.set_defaults(fn=cmd_norm)

    sp = sub.add_parser("qt-norm", help="quasi-Toeplitz surrogate norm")
    sp.add_argument("--series", required=True)
    sp.add_argument("--K", type=int, required=True)
    sp.add_argument("--theta", required=True)
    sp.add_argument("--mu", required=True)
    sp.add_argument("--r", type=float, default=None)
    sp.add_argument("--s", type=float, default=None)
    sp.add_argument("--rho", type=float, default=1.0)
    sp.set_defaults(fn=cmd_qt_norm)

    sp = sub.add_parser("measure", help="resonant-set measure estimates")
    sp.add_argument("--k", default=None)
    sp.add_argument("--l", default="", help='e.g. "0,1:1;1,0:-1"')
    sp.add_argument("--K", type=int, default=None)
    sp.add_argument("--gamma", type=float, default=None)
    sp.add_argument("--rho-exp", type=float, default=3.0)
    sp.add_argument("--samples", type=int, default=20000)
    sp.add_argument("--excluded", action="store_true",
                    help="union over all Melnikov conditions instead")
    sp.add_argument("--C", type=float, default=1.0)
    sp.add_argument("--good-radius", type=int, default=None)
    _add_instance_flags(sp)
    sp.set_defaults(fn=cmd_measure)

    sp = sub.add_parser("kam-run", help="run the iteration")
    sp.add_argument("--steps", type=int, default=3)
    sp.add_argument("--theta0", type=float, default=0.6)
    sp.add_argument("--mu0", type=float, default=3.9)
    sp.add_argument("--good-radius", type=int, default=None)
    sp.add_argument("--perturbation", default=None,
                    help="series file replacing the built-in nonlinearity")
    _add_instance_flags(sp)
    sp.set_defaults(fn=cmd_kam_run)
    return ap


_VALUE_FLAGS = {"--point", "--box", "--k", "--l", "--i0", "--normal-sites",
                "--radius", "--theta", "--mu"}


def _merge_dashed_values(argv) -> list:
    """Join "--point -11,15" into "--point=-11,15" so argparse does not
    read the value as an option."""
    out = []
    i = 0
    while i < len(argv):
        a = argv[i]
        if a in _VALUE_FLAGS and i + 1 < len(argv) \
                and argv[i + 1].startswith("-"):
            out.append(f"{a}={argv[i + 1]}")
            i += 2
            continue
        out.append(a)
        i += 1
    return out


def run(argv) -> int:
    t0 = time.time()
    try:
        args = build_parser().parse_args(_merge_dashed_values(list(argv)))
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        cfg_hash = None
        if args.config:
            data = Path(args.config).read_bytes()
            cfg_hash = hashlib.sha256(data).hexdigest()
            cfg = load_config(args.config)
        else:
            cfg = default_config()
        if args.mode:
            lat = cfg.lattice
            cfg = Config(problem=cfg.problem,
                         lattice=LatticeParams(
                             tau0=lat.tau0, tau1=lat.tau1, c=lat.c, C=lat.C,
                             N0=lat.N0, mode=args.mode, gap=lat.gap),
                         cut=cfg.cut, analysis=cfg.analysis)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        warnings: list = []
        code, results, outputs = args.fn(args, cfg, out_dir, warnings)
    except KamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    report = {
        "command": list(argv),
        "config": args.config or "builtin",
        "config_hash": cfg_hash,
        "mode": cfg.lattice.mode,
        "seed": args.seed,
        "results": results,
        "outputs": outputs,
        "warnings": warnings,
        "timing_s": round(time.time() - t0, 3),
    }
    (out_dir / "report.json").write_text(
        json.dumps(report, indent=2, default=str) + "\n")
    for w in warnings[:10]:
        print(f"warning: {w}", file=sys.stderr)
    if len(warnings) > 10:
        print(f"warning: ... {len(warnings) - 10} more", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run(sys.argv[1:]))
