"""The 2d flow-around-cylinder benchmark: goal functionals, studies, output.

Drag and lift are evaluated as boundary integrals over the cylinder polygon,
F_D = S∮ (nu dv_t/dn n_y - P n_x) ds and F_L = -∮ (nu dv_t/dn n_x - P n_y) ds,
with the normal pointing out of the cylinder into the fluid and the tangent
t = (n_y, -n_x); the coefficients scale the forces by 2 / (Ubar^2 L).
"""

import configparser
import json
import time as _time
from dataclasses import asdict, dataclass

import numpy as np

from .elements import PDiscBasis, QBasis, gauss_quadrature
from .gmg import GmgConfig
from .mesh import CYLINDER, FACE_CORNERS, ChannelGeometry, build_hierarchy, partition, write_vtk
from .solvers import FgmresConfig, NavierStokesSolver, NewtonConfig


def coefficients(f_drag, f_lift, u_mean, length_scale):
    """Nondimensional drag/lift coefficients 2 F / (Ubar^2 L).

    A zero reference velocity (quiescent configuration) falls back to a unit
    normalization so zero forces stay zero coefficients.
    """
    u_ref = u_mean if u_mean > 0 else 1.0
    scale = 2.0 / (u_ref**2 * length_scale)
    return scale * f_drag, scale * f_lift


def cylinder_face_tables(layout):
    """Quadrature data of the cylinder faces on one level."""
    r = layout.r
    lvl = layout.mesh.level(layout.g)
    rule = gauss_quadrature(r + 2)
    s = rule.points
    ref_by_face = [
        np.column_stack([s, np.zeros_like(s)]),
        np.column_stack([np.ones_like(s), s]),
        np.column_stack([1.0 - s, np.ones_like(s)]),
        np.column_stack([np.zeros_like(s), 1.0 - s]),
    ]
    qb, pb = QBasis(r), PDiscBasis(r - 1)
    groups = []
    for f in range(4):
        cells = np.flatnonzero(lvl.face_tags[:, f] == CYLINDER)
        if len(cells) == 0:
            continue
        a, b = FACE_CORNERS[f]
        va = lvl.vertices[lvl.cells[cells, a]]
        vb = lvl.vertices[lvl.cells[cells, b]]
        edge = vb - va
        length = np.linalg.norm(edge, axis=1)
        # the fluid cell's outward normal points into the cylinder; the
        # benchmark normal is its negative (out of the cylinder)
        normal = -np.column_stack([edge[:, 1], -edge[:, 0]]) / length[:, None]
        ref = ref_by_face[f]
        corners = lvl.cell_corners(cells)
        xi, eta = ref[:, 0], ref[:, 1]
        dxi = (
            np.einsum("q,cd->cqd", 1 - eta, corners[:, 1] - corners[:, 0])
            + np.einsum("q,cd->cqd", eta, corners[:, 2] - corners[:, 3])
        )
        deta = (
            np.einsum("q,cd->cqd", 1 - xi, corners[:, 3] - corners[:, 0])
            + np.einsum("q,cd->cqd", xi, corners[:, 2] - corners[:, 1])
        )
        det = dxi[..., 0] * deta[..., 1] - dxi[..., 1] * deta[..., 0]
        Gf = qb.grad(ref)
        gx = (
            deta[..., 1][:, :, None] * Gf[None, :, :, 0]
            - dxi[..., 1][:, :, None] * Gf[None, :, :, 1]
        ) / det[:, :, None]
        gy = (
            -deta[..., 0][:, :, None] * Gf[None, :, :, 0]
            + dxi[..., 0][:, :, None] * Gf[None, :, :, 1]
        ) / det[:, :, None]
        groups.append(
            {
                "cells": cells,
                "normal": normal,
                "wf": rule.weights[None, :] * length[:, None],
                "N": qb.eval(ref),
                "P": pb.eval(ref),
                "gradN": np.stack([gx, gy], axis=-1),
            }
        )
    if not groups:
        raise ValueError("mesh has no cylinder boundary faces")
    return groups


def drag_lift(layout, v_coeffs, p_coeffs, nu, u_mean, length_scale, tables=None):
    """Drag/lift coefficients of one velocity/pressure snapshot."""
    groups = tables if tables is not None else cylinder_face_tables(layout)
    R, n_p = layout.R, layout.n_p
    f_drag = f_lift = 0.0
    for grp in groups:
        cells = grp["cells"]
        n = grp["normal"]
        vloc = np.stack(
            [v_coeffs[i * R + layout.cell_scalar_nodes[cells]] for i in range(2)],
            axis=1,
        )  # (nf, 2, nvl)
        grad = np.einsum("fqad,fia->fqid", grp["gradN"], vloc)  # (nf, nq, i, d)
        # dv_t/dn with t = (n_y, -n_x)
        t = np.column_stack([n[:, 1], -n[:, 0]])
        dvt_dn = np.einsum("fi,fqid,fd->fq", t, grad, n)
        ploc = p_coeffs[cells[:, None] * n_p + np.arange(n_p)[None, :]]
        pvals = np.einsum("qb,fb->fq", grp["P"], ploc)
        f_drag += np.einsum(
            "fq,fq->", grp["wf"], nu * dvt_dn * n[:, 1][:, None] - pvals * n[:, 0][:, None]
        )
        f_lift -= np.einsum(
            "fq,fq->", grp["wf"], nu * dvt_dn * n[:, 0][:, None] - pvals * n[:, 1][:, None]
        )
    return coefficients(f_drag, f_lift, u_mean, length_scale)


def parabolic_inflow(u_max, height, x_inflow=0.0, tol=1e-12):
    """Dirichlet datum: parabola on the inflow plane, no-slip elsewhere."""

    def g(points, t):
        x, y = points[:, 0], points[:, 1]
        profile = 4.0 * u_max * y * (height - y) / height**2
        u = np.where(np.abs(x - x_inflow) <= tol, profile, 0.0)
        return np.column_stack([u, np.zeros_like(u)])

    return g


@dataclass
class BenchConfig:
    """Everything one benchmark run needs; `from_ini` parses the file format."""

    length: float = 2.2
    height: float = 0.41
    cylinder_x: float = 0.2
    cylinder_y: float = 0.2
    diameter: float = 0.1
    n0: int = 4
    nu: float = 1e-3
    u_max: float = 1.5
    t_final: float = 10.0
    tau: float = 0.005
    r: int = 2
    k: int = 1
    levels: int = 3
    pre_smooth: int = 1
    post_smooth: int = 1
    mg_damping: float = None  # defaults to the vanka damping
    coarse_level: int = 1
    vanka_damping: float = 1.0
    vanka_mode: str = "deterministic"
    newton_abs_tol: float = 1e-10
    newton_rel_reduction: float = 1e4
    newton_max_iter: int = 20
    fgmres_rel_tol: float = 1e-4
    fgmres_max_iter: int = 200
    fgmres_restart: int = 0
    ranks: int = 1
    out_dir: str = "out"
    vtk_stride: int = 0
    deterministic_output: bool = True

    @property
    def geometry(self):
        return ChannelGeometry(
            self.length, self.height, (self.cylinder_x, self.cylinder_y), self.diameter
        )

    @property
    def u_mean(self):
        return 2.0 * self.u_max / 3.0

    @property
    def damping(self):
        return self.vanka_damping if self.mg_damping is None else self.mg_damping

    def gmg_config(self):
        return GmgConfig(
            pre_smooth=self.pre_smooth,
            post_smooth=self.post_smooth,
            damping=self.damping,
            coarse_level=self.coarse_level,
        )

    def newton_config(self):
        return NewtonConfig(
            abs_tol=self.newton_abs_tol,
            rel_reduction=self.newton_rel_reduction,
            max_iter=self.newton_max_iter,
        )

    def fgmres_config(self):
        return FgmresConfig(
            rel_tol=self.fgmres_rel_tol,
            max_iter=self.fgmres_max_iter,
            restart=self.fgmres_restart,
        )

    @classmethod
    def from_ini(cls, path):
        parser = configparser.ConfigParser()
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
        cfg = cls()
        mapping = {
            ("geometry", "length"): ("length", float),
            ("geometry", "height"): ("height", float),
            ("geometry", "cylinder_x"): ("cylinder_x", float),
            ("geometry", "cylinder_y"): ("cylinder_y", float),
            ("geometry", "diameter"): ("diameter", float),
            ("geometry", "n0"): ("n0", int),
            ("problem", "nu"): ("nu", float),
            ("problem", "u_max"): ("u_max", float),
            ("problem", "t_final"): ("t_final", float),
            ("problem", "tau"): ("tau", float),
            ("discretization", "r"): ("r", int),
            ("discretization", "k"): ("k", int),
            ("discretization", "levels"): ("levels", int),
            ("mg", "pre_smooth"): ("pre_smooth", int),
            ("mg", "post_smooth"): ("post_smooth", int),
            ("mg", "damping"): ("mg_damping", float),
            ("mg", "coarse_level"): ("coarse_level", int),
            ("vanka", "damping"): ("vanka_damping", float),
            ("vanka", "mode"): ("vanka_mode", str),
            ("newton", "abs_tol"): ("newton_abs_tol", float),
            ("newton", "rel_reduction"): ("newton_rel_reduction", float),
            ("newton", "max_iter"): ("newton_max_iter", int),
            ("fgmres", "rel_tol"): ("fgmres_rel_tol", float),
            ("fgmres", "max_iter"): ("fgmres_max_iter", int),
            ("fgmres", "restart"): ("fgmres_restart", int),
            ("parallel", "ranks"): ("ranks", int),
            ("output", "dir"): ("out_dir", str),
            ("output", "vtk_stride"): ("vtk_stride", int),
            ("output", "deterministic"): ("deterministic_output", None),
        }
        for (section, key), (attr, cast) in mapping.items():
            if parser.has_option(section, key):
                if cast is None:
                    setattr(cfg, attr, parser.getboolean(section, key))
                else:
                    setattr(cfg, attr, cast(parser.get(section, key)))
        return cfg


def build_solver(cfg, mesh=None):
    if mesh is None:
        mesh = build_hierarchy(cfg.geometry, cfg.n0, cfg.levels)
        if cfg.ranks > 1:
            mesh = partition(mesh, cfg.ranks)
    return NavierStokesSolver(
        mesh,
        r=cfg.r,
        k=cfg.k,
        nu=cfg.nu,
        g=parabolic_inflow(cfg.u_max, cfg.height),
        gmg=cfg.gmg_config(),
        newton=cfg.newton_config(),
        krylov=cfg.fgmres_config(),
        vanka_mode=cfg.vanka_mode,
    )


CSV_HEADER = "step,t,c_D,c_L,newton_iters,gmres_iters_total,wall_seconds"


def run_benchmark(cfg, out_dir=None, progress=None):
    """Time-march the benchmark; write the series CSV and summary JSON.

    Returns the summary dict.  In deterministic mode the wall-seconds column
    is written as zero so that repeated runs produce byte-identical CSV.
    """
    import os

    out_dir = cfg.out_dir if out_dir is None else out_dir
    os.makedirs(out_dir, exist_ok=True)
    solver = build_solver(cfg)
    layout = solver.layout
    tables = cylinder_face_tables(layout)
    v0 = np.zeros(2 * layout.R)
    rows = []
    series = []

    def callback(n, X, st):
        v_end = solver.endpoint_velocity(X)
        p_end = solver.endpoint_pressure(X)
        c_d, c_l = drag_lift(
            layout, v_end, p_end, cfg.nu, cfg.u_mean, cfg.diameter, tables
        )
        wall = 0.0 if cfg.deterministic_output else st.wall_seconds
        rows.append(
            f"{n},{st.t_end:.12g},{c_d:.12e},{c_l:.12e},"
            f"{st.newton_iters},{st.gmres_total},{wall:.3f}"
        )
        series.append((st.t_end, c_d, c_l, st.newton_iters, st.gmres_total))
        if cfg.vtk_stride and n % cfg.vtk_stride == 0:
            vertices = layout.mesh.level(layout.g).n_vertices
            vel = np.column_stack([v_end[:vertices], v_end[layout.R : layout.R + vertices]])
            p_cells = p_end[:: layout.n_p]
            write_vtk(
                layout.mesh,
                layout.g,
                os.path.join(out_dir, f"fields_{n:06d}.vtk"),
                cell_data={"pressure": p_cells},
                point_data={"velocity": vel},
            )
        if progress is not None:
            progress(n, c_d, c_l, st)

    _, stats = solver.time_march(cfg.t_final, cfg.tau, v0, callback=callback)
    with open(os.path.join(out_dir, "series.csv"), "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        fh.write("\n".join(rows) + "\n")
    newton = [s.newton_iters for s in stats]
    gmres_per_newton = [s.gmres_total / max(s.newton_iters, 1) for s in stats]
    summary = {
        "c_D_max": max(c for _, c, _, _, _ in series),
        "c_L_max": max(c for _, _, c, _, _ in series),
        "newton_avg": float(np.mean(newton)),
        "gmres_per_newton_avg": float(np.mean(gmres_per_newton)),
    }
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def sweep_damping(cfg, nus=(1e-3, 5e-4), dampings=(1.0, 0.7), out_path=None):
    """The viscosity-robustness grid: mean GMRES-per-Newton per (nu, omega)."""
    results = []
    for nu in nus:
        for omega in dampings:
            case = BenchConfig(**{**asdict(cfg), "nu": nu, "vanka_damping": omega,
                                  "mg_damping": None})
            solver = build_solver(case)
            v0 = np.zeros(2 * solver.layout.R)
            _, stats = solver.time_march(case.t_final, case.tau, v0)
            results.append(
                {
                    "nu": nu,
                    "omega": omega,
                    "newton_avg": float(np.mean([s.newton_iters for s in stats])),
                    "gmres_per_newton_avg": float(
                        np.mean([s.gmres_total / max(s.newton_iters, 1) for s in stats])
                    ),
                }
            )
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write("nu,omega,newton_avg,gmres_per_newton_avg\n")
            for row in results:
                fh.write(
                    f"{row['nu']},{row['omega']},{row['newton_avg']:.4f},"
                    f"{row['gmres_per_newton_avg']:.4f}\n"
                )
    return results


def speedup_report(wall_times):
    """Amdahl-style speedup table S = t(n_min)/t(n) from measured times."""
    if len(wall_times) < 2:
        raise ValueError("need wall times for at least two rank counts")
    n_min = min(wall_times)
    base = wall_times[n_min]
    return [
        {"ranks": n, "wall_seconds": t, "speedup": base / t}
        for n, t in sorted(wall_times.items())
    ]


def measure_rank_scaling(cfg, rank_counts=(1, 2, 4), repeats=1):
    """Wall-time the distributed linear-solve pipeline per rank count."""
    from .assembly import assemble_level_jacobians, assemble_residual
    from .exchange import distributed_linear_solve

    times = {}
    for n_ranks in rank_counts:
        mesh = partition(build_hierarchy(cfg.geometry, cfg.n0, cfg.levels), n_ranks)
        solver = build_solver(cfg, mesh=mesh)
        layout = solver.layout
        data = solver.problem_data(cfg.tau, 0.0, np.zeros(2 * layout.R))
        states = solver.level_states(np.zeros(layout.n_total))
        ops = assemble_level_jacobians(states, data, solver.layouts)
        rhs = -assemble_residual(np.zeros(layout.n_total), data, layout)
        best = np.inf
        for _ in range(repeats):
            tic = _time.perf_counter()
            distributed_linear_solve(
                ops, solver.layouts, solver.transfers, cfg.gmg_config(),
                cfg.fgmres_config(), rhs, n_ranks, mode=cfg.vanka_mode,
            )
            best = min(best, _time.perf_counter() - tic)
        times[n_ranks] = best
    return times
