"""Command-line entry point: run benchmarks, verify oracles, sweep, scale."""

import argparse
import json
import os
import sys

import numpy as np

from .bench import (
    BenchConfig,
    measure_rank_scaling,
    run_benchmark,
    speedup_report,
    sweep_damping,
)


def _load_config(args):
    cfg = BenchConfig.from_ini(args.config) if args.config else BenchConfig()
    if getattr(args, "ranks", None):
        cfg.ranks = args.ranks
    if getattr(args, "levels", None):
        cfg.levels = args.levels
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def cmd_run(args):
    cfg = _load_config(args)

    def progress(n, c_d, c_l, st):
        print(
            f"step {n:5d}  t={st.t_end:8.4f}  c_D={c_d:+.5f}  c_L={c_l:+.5f}  "
            f"newton={st.newton_iters}  gmres={st.gmres_total}",
            flush=True,
        )

    summary = run_benchmark(cfg, progress=progress if args.verbose else None)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_verify(args):
    """Quick oracle battery (the full suite lives in the pytest tree)."""
    from .dofs import enumerate_dofs, local_block_size
    from .elements import gauss_radau_right
    from .gmg import GmgConfig, GmgPreconditioner, build_hierarchy_caches, build_prolongation
    from .assembly import ProblemData, assemble_jacobian, assemble_residual
    from .mesh import ChannelGeometry, build_hierarchy
    from .vanka import precompute_inverses, vanka_sweep

    failures = 0

    def check(name, ok):
        nonlocal failures
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
        failures += 0 if ok else 1

    rule = gauss_radau_right(2)
    check(
        "right Radau(2) nodes {1/3, 1}, weights {3/4, 1/4}",
        np.allclose(rule.points, [1 / 3, 1.0]) and np.allclose(rule.weights, [0.75, 0.25]),
    )
    check("local block sizes 85 / 170", local_block_size(3, 2, 0, 4) == 85
          and local_block_size(3, 2, 1, 4) == 170)

    mesh = build_hierarchy(ChannelGeometry(1.0, 1.0, cylinder_diameter=0.0), 2, 2)
    layouts = [enumerate_dofs(mesh, g, r=2, k=1) for g in (1, 2)]
    g = lambda p, t: np.column_stack([p[:, 1] * (1 - p[:, 1]), np.zeros(len(p))])
    data = ProblemData(nu=0.05, tau=0.1, g=g, convection=False)
    ops = [assemble_jacobian(np.zeros(l.n_total), data, l) for l in layouts]

    rng = np.random.default_rng(0)
    X = 0.3 * rng.normal(size=layouts[1].n_total)
    data_ns = ProblemData(nu=0.05, tau=0.1, g=g)
    J = assemble_jacobian(X, data_ns, layouts[1])
    ok = True
    for j in rng.choice(layouts[1].n_total, size=10, replace=False):
        e = np.zeros_like(X)
        e[j] = 1e-6
        fd = (
            assemble_residual(X + e, data_ns, layouts[1])
            - assemble_residual(X - e, data_ns, layouts[1])
        ) / 2e-6
        col = J.csr[:, [j]].toarray().ravel()
        ok &= np.linalg.norm(fd - col) <= 1e-6 * (1 + np.linalg.norm(col))
    check("Jacobian matches central differences", ok)

    cache = precompute_inverses(ops[0], layouts[0])
    r0 = rng.normal(size=layouts[0].n_total)
    d = vanka_sweep(np.zeros_like(r0), r0, ops[0], layouts[0], cache)
    check(
        "Vanka exact on the coarse level in one sweep"
        if layouts[0].n_cells == 1
        else "Vanka sweep reduces the coarse residual",
        np.linalg.norm(r0 - ops[0].csr @ d) < np.linalg.norm(r0),
    )

    T = build_prolongation(layouts[0], layouts[1])
    Xc = rng.normal(size=layouts[0].n_total)
    a = rng.normal(size=layouts[1].n_total)
    adj = abs(np.dot(T.restrict(a), Xc) - np.dot(a, T.prolongate(Xc)))
    check("transfer adjoint identity", adj <= 1e-13 * max(1.0, abs(np.dot(a, T.prolongate(Xc)))))

    caches = build_hierarchy_caches(ops, layouts)
    pre = GmgPreconditioner(ops, caches, layouts, [T], GmgConfig())
    rhs = rng.normal(size=layouts[1].n_total)
    xstar = np.linalg.solve(ops[1].csr.toarray(), rhs)
    x = np.zeros_like(rhs)
    errs = []
    for _ in range(5):
        x = x + pre.apply(rhs - ops[1].csr @ x)
        errs.append(np.linalg.norm(x - xstar))
    check("two-level V(1,1) contracts", all(errs[i + 1] < errs[i] for i in range(4))
          and errs[0] < np.linalg.norm(xstar))

    print(f"{'all checks passed' if failures == 0 else f'{failures} check(s) FAILED'}")
    return 1 if failures else 0


def cmd_sweep(args):
    cfg = _load_config(args)
    out = os.path.join(cfg.out_dir, "sweep.csv")
    os.makedirs(cfg.out_dir, exist_ok=True)
    nus = [float(v) for v in args.nu.split(",")]
    oms = [float(v) for v in args.damping.split(",")]
    results = sweep_damping(cfg, nus=nus, dampings=oms, out_path=out)
    for row in results:
        print(
            f"nu={row['nu']:g} omega={row['omega']:g} "
            f"newton_avg={row['newton_avg']:.2f} "
            f"gmres_per_newton={row['gmres_per_newton_avg']:.2f}"
        )
    print(f"wrote {out}")
    return 0


def cmd_scale(args):
    cfg = _load_config(args)
    counts = [int(v) for v in args.rank_counts.split(",")]
    times = measure_rank_scaling(cfg, rank_counts=counts, repeats=args.repeats)
    for row in speedup_report(times):
        print(
            f"ranks={row['ranks']}  wall={row['wall_seconds']:.3f}s  "
            f"S={row['speedup']:.2f}"
        )
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="stmg",
        description="Space-time multigrid flow solver: benchmark runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a benchmark from a config file")
    p_run.add_argument("--config", type=str, default=None)
    p_run.add_argument("--ranks", type=int, default=None)
    p_run.add_argument("--levels", type=int, default=None)
    p_run.add_argument("--out", type=str, default=None)
    p_run.add_argument("--verbose", action="store_true")
    p_run.set_defaults(fn=cmd_run)

    p_ver = sub.add_parser("verify", help="run the quick property/oracle battery")
    p_ver.set_defaults(fn=cmd_verify)

    p_swp = sub.add_parser("sweep", help="viscosity x damping study")
    p_swp.add_argument("--config", type=str, default=None)
    p_swp.add_argument("--nu", type=str, default="1e-3,5e-4")
    p_swp.add_argument("--damping", type=str, default="1.0,0.7")
    p_swp.add_argument("--out", type=str, default=None)
    p_swp.set_defaults(fn=cmd_sweep)

    p_scl = sub.add_parser("scale", help="thread-rank scaling measurement")
    p_scl.add_argument("--config", type=str, default=None)
    p_scl.add_argument("--rank-counts", type=str, default="1,2,4")
    p_scl.add_argument("--repeats", type=int, default=1)
    p_scl.add_argument("--out", type=str, default=None)
    p_scl.set_defaults(fn=cmd_scale)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
