"""Command-line frontend.

Subcommands:
  solve        solve a game spec and dump the equilibrium artifacts
  simulate     solve + Monte Carlo simulation of the closed loop
  verify       validation report, best-response perturbation suite,
               sampled convexity probes and the boundary-value oracle
  example      built-in scalar production-supply game
  dump-blocks  stage coefficient blocks at a chosen time, as JSON

Exit codes: 0 success, 1 validation/usage failure, 2 solver or regularity
failure, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import augment, equilibrium, montecarlo
from .model import (BlowUpError, MatrixPath, RegularityError, SpecError,
                    load_spec, make_grid, validate_spec)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_SOLVER = 2
EXIT_VERIFICATION = 3


class _Parser(argparse.ArgumentParser):
    # usage problems count as validation failures, keeping exit code 2
    # reserved for solver breakdowns
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_path_csv(path: MatrixPath, dest):
    """Matrix path as CSV: one row per node, entries flattened row-major."""
    r, c = path.shape
    header = "t," + ",".join(f"p_{i + 1}{j + 1}" for i in range(r) for j in range(c))
    lines = [header]
    for k, t in enumerate(path.grid.nodes):
        flat = path.samples[k].reshape(-1)
        lines.append(",".join([_fmt(t)] + [_fmt(v) for v in flat]))
    dest = Path(dest)
    dest.write_text("\n".join(lines) + "\n")


def _echo(args, keys):
    resolved = {k: getattr(args, k) for k in keys}
    print("resolved configuration:", json.dumps(resolved, sort_keys=True, default=str))


def _load(args):
    spec = load_spec(args.spec)
    if args.grid_n is not None and args.grid_n != spec.grid.steps:
        spec = _regrid(spec, args.grid_n)
    return spec


def _regrid(spec, N):
    from .model import GameSpec, _MATRIX_SHAPES
    grid = make_grid(spec.grid.horizon, N)
    paths = {name: MatrixPath.from_function(grid, getattr(spec, name).at)
             for name in _MATRIX_SHAPES}
    return GameSpec(n=spec.n, m1=spec.m1, m2=spec.m2, grid=grid, G=spec.G,
                    alpha=spec.alpha, gamma=spec.gamma, xi=spec.xi, **paths)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_solution(sol, out: Path):
    write_path_csv(sol.P, out / "P.csv")
    write_path_csv(sol.P1, out / "P1.csv")
    write_path_csv(sol.Phat, out / "Phat.csv")
    write_path_csv(sol.phihat, out / "phihat.csv")
    write_path_csv(sol.L, out / "L.csv")
    write_path_csv(sol.psi, out / "psi.csv")
    write_path_csv(sol.gains.PM1, out / "PM1.csv")
    write_path_csv(sol.gains.PM2, out / "PM2.csv")
    write_path_csv(sol.gains.phiM1, out / "phiM1.csv")
    write_path_csv(sol.gains.phiM2, out / "phiM2.csv")


def _solution_summary(sol) -> dict:
    grid = sol.spec.grid
    probe_ts = [grid.nodes[int(round(f * grid.steps))] for f in (0.0, 0.25, 0.5, 0.75, 1.0)]
    gains_at = []
    for t in probe_ts:
        gains_at.append({
            "t": t,
            "PM1": sol.gains.PM1.at(t).tolist(),
            "PM2": sol.gains.PM2.at(t).tolist(),
            "phiM1": sol.gains.phiM1.at(t)[:, 0].tolist(),
            "phiM2": sol.gains.phiM2.at(t)[:, 0].tolist(),
        })
    regularity = {}
    for name, arr in sol.regularity.items():
        arr = np.asarray(arr)
        regularity[name] = {"min": float(arr.min()), "max": float(arr.max())}
    return {
        "value": equilibrium.value(sol),
        "regularity": regularity,
        "gains_at": gains_at,
    }


def _write_json(obj, dest):
    Path(dest).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_solve(args) -> int:
    _echo(args, ("spec", "out", "grid_n", "delta"))
    spec = _load(args)
    sol = equilibrium.solve_game(spec, delta=args.delta)
    out = _outdir(args)
    _dump_solution(sol, out)
    summary = _solution_summary(sol)
    _write_json(summary, out / "summary.json")
    print(f"value: {summary['value']:.12g}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    _echo(args, ("spec", "out", "grid_n", "delta", "paths", "seed", "substeps"))
    spec = _load(args)
    sol = equilibrium.solve_game(spec, delta=args.delta)
    cfg = montecarlo.SimConfig(paths=args.paths, seed=args.seed, substeps=args.substeps)
    sim = montecarlo.simulate(sol, cfg)
    out = _outdir(args)
    summary = sim.summary()
    summary["value"] = equilibrium.value(sol)
    _write_json(summary, out / "sim_summary.json")
    if args.per_path:
        lines = ["path,j,j_follower,j_leader"]
        for i in range(len(sim.j)):
            lines.append(",".join([str(i), _fmt(sim.j[i]), _fmt(sim.j_follower[i]),
                                   _fmt(sim.j_leader[i])]))
        (out / "paths.csv").write_text("\n".join(lines) + "\n")
    print(f"j mean {summary['j']['mean']:.12g} (stderr {summary['j']['stderr']:.3g}), "
          f"value {summary['value']:.12g}")
    return EXIT_OK


def cmd_verify(args) -> int:
    _echo(args, ("spec", "out", "grid_n", "delta", "paths", "seed", "substeps",
                 "eps", "directions"))
    spec = _load(args)
    out = _outdir(args)
    report = validate_spec(spec, delta=args.delta)
    (out / "validation.txt").write_text("\n".join(report.lines()) + "\n")
    if not report.ok:
        print("validation FAILED:")
        for line in report.lines():
            print(" ", line)
        return EXIT_VALIDATION

    sol = equilibrium.solve_game(spec, delta=args.delta)
    cfg = montecarlo.SimConfig(paths=args.paths, seed=args.seed, substeps=args.substeps)
    eps = tuple(args.eps) if args.eps else (0.05,)
    perturb = montecarlo.perturb_best_response(sol, cfg, directions=args.directions,
                                               eps=eps)
    (out / "perturbation.csv").write_text("\n".join(perturb.csv_lines()) + "\n")
    convexity = montecarlo.sampled_convexity(
        sol, cfg, samples=min(args.directions, 10))
    (out / "convexity.csv").write_text("\n".join(convexity.csv_lines()) + "\n")

    diffusion_free = (np.all(spec.C.samples == 0.0) and np.all(spec.D1.samples == 0.0)
                      and np.all(spec.D2.samples == 0.0))
    oracle = {"applicable": bool(diffusion_free)}
    if diffusion_free:
        res64 = montecarlo.bvp_oracle(sol, 64)
        res128 = montecarlo.bvp_oracle(sol, 128)
        oracle.update(gap_n64=res64.gap, gap_n128=res128.gap,
                      ok=bool(res64.gap <= 1e-3 and res128.gap <= 0.6 * res64.gap))
    _write_json({"oracle": oracle,
                 "perturbation_ok": perturb.ok,
                 "convexity_ok": convexity.ok}, out / "verify_summary.json")

    failed = not perturb.ok or not convexity.ok or not oracle.get("ok", True)
    n_rows = len(perturb.rows)
    n_bad = sum(r.verdict != "pass" for r in perturb.rows)
    print(f"perturbation: {n_rows - n_bad}/{n_rows} pass; convexity "
          f"{'ok' if convexity.ok else 'FAILED'}; oracle "
          f"{oracle if diffusion_free else 'not applicable (C, D1, D2 nonzero)'}")
    return EXIT_VERIFICATION if failed else EXIT_OK


def cmd_example(args) -> int:
    _echo(args, ("a", "c", "q", "g", "r1", "r2", "alpha", "gamma", "xi", "T", "N", "out"))
    out = _outdir(args)
    P = equilibrium.scalar_bode(args.a, args.c, args.q, args.g, args.r1,
                                args.T, args.N)
    write_path_csv(P, out / "bode.csv")
    print(f"production game: P(0) = {P.samples[0, 0, 0]:.9f}, "
          f"P(T) = {P.samples[-1, 0, 0]:.9f}")

    from .model import build_spec
    spec = build_spec(
        n=1, m1=1, m2=1, T=args.T, N=args.N, alpha=args.alpha, gamma=args.gamma,
        xi=[args.xi], G=[[args.g]], A=1.0 - args.a, C=args.c, B1=1.0, D1=1.0,
        B2=1.0, D2=1.0, Q=args.q, R1=args.r1, R2=args.r2, R0=1.0, R0hat=1.0,
    )
    sol = equilibrium.solve_game(spec)
    # clamped strategies along the deterministic skeleton (outputs are
    # productions, so negative prescriptions are cut at zero)
    X = montecarlo._integrate_forward(sol.Atil, sol.Btil, sol.dh.Xi[:, 0], spec.grid)
    lines = ["t,u1,u2,u1_clamped,u2_clamped,f,f1_implied,f2"]
    for k, t in enumerate(spec.grid.nodes):
        s = equilibrium.feedback(sol, X[k], t)
        cl = equilibrium.clamp_nonnegative(s)
        lines.append(",".join(_fmt(v) for v in (
            t, s.u1[0], s.u2[0], cl.u1[0], cl.u2[0], s.f[0], s.f[0] - s.f2[0], s.f2[0])))
    (out / "strategies.csv").write_text("\n".join(lines) + "\n")
    print(f"value: {equilibrium.value(sol):.9f}")
    return EXIT_OK


def cmd_dump_blocks(args) -> int:
    _echo(args, ("spec", "stage", "t", "out", "delta"))
    spec = _load(args)
    from .backward import solve_riccati_follower
    P = solve_riccati_follower(spec, args.delta).P
    hat = augment.build_hat(spec, P, args.delta)
    stage = None
    if args.stage == "hat":
        stage = hat
    elif args.stage == "check":
        stage = augment.build_check(spec, P, args.delta)
    elif args.stage == "weights":
        stage = augment.build_cost_weights(spec, P, args.delta)
    elif args.stage in ("blackboard", "doublehat"):
        check = augment.build_check(spec, P, args.delta)
        bb = augment.build_blackboard(check, hat, spec.gamma, spec.R0hat)
        if args.stage == "blackboard":
            stage = bb
        else:
            w = augment.build_cost_weights(spec, P, args.delta)
            stage = augment.build_doublehat(bb, w)
    doc = {"stage": args.stage, "t": args.t, "blocks": {}}
    for name in stage.__dataclass_fields__:
        val = getattr(stage, name)
        if isinstance(val, MatrixPath):
            doc["blocks"][name] = val.at(args.t).tolist()
        elif isinstance(val, np.ndarray):
            doc["blocks"][name] = val.tolist()
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        _outdir(args)
        (Path(args.out) / f"blocks_{args.stage}.json").write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robustlq", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, sim=False):
        p.add_argument("--spec", required=True, help="game spec JSON file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--grid-n", type=int, default=None,
                       help="override the spec's grid step count")
        p.add_argument("--delta", type=float, default=1e-8,
                       help="strong-positivity threshold")
        if sim:
            p.add_argument("--paths", type=int, default=10_000)
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--substeps", type=int, default=1)

    p = sub.add_parser("solve", help="solve and dump equilibrium artifacts")
    common(p)
    p.set_defaults(fn=cmd_solve)

    p = sub.add_parser("simulate", help="solve and run Monte Carlo")
    common(p, sim=True)
    p.add_argument("--per-path", action="store_true", help="write per-path costs")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("verify", help="validation + statistical verification")
    common(p, sim=True)
    p.add_argument("--eps", type=float, nargs="*", default=[0.05])
    p.add_argument("--directions", type=int, default=20)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("example", help="scalar production-supply game")
    p.add_argument("--a", type=float, default=0.5, help="purchase rate")
    p.add_argument("--c", type=float, default=-1.0, help="environment effect")
    p.add_argument("--q", type=float, default=1.0)
    p.add_argument("--g", type=float, default=1.0)
    p.add_argument("--r1", type=float, default=-0.5)
    p.add_argument("--r2", type=float, default=0.2)
    p.add_argument("--alpha", type=float, default=400.0)
    p.add_argument("--gamma", type=float, default=400.0)
    p.add_argument("--xi", type=float, default=1.0)
    p.add_argument("--T", type=float, default=2.0)
    p.add_argument("--N", type=int, default=2000)
    p.add_argument("--out", default="out")
    p.set_defaults(fn=cmd_example)

    p = sub.add_parser("dump-blocks", help="stage blocks at one time, as JSON")
    p.add_argument("--spec", required=True)
    p.add_argument("--stage", required=True,
                   choices=["hat", "check", "blackboard", "doublehat", "weights"])
    p.add_argument("--t", type=float, default=0.0)
    p.add_argument("--out", default=None)
    p.add_argument("--grid-n", type=int, default=None)
    p.add_argument("--delta", type=float, default=1e-8)
    p.set_defaults(fn=cmd_dump_blocks)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except SpecError as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (RegularityError, BlowUpError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except FileNotFoundError as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except json.JSONDecodeError as exc:
        print(f"spec error: malformed JSON at line {exc.lineno}, column {exc.colno}: "
              f"{exc.msg}", file=sys.stderr)
        return EXIT_VALIDATION


def main():
    raise SystemExit(run())


if __name__ == "__main__":
    main()
