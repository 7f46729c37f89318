"""Flexible GMRES, damped Newton, and the time-marching driver.

Each subinterval solves F_n(X_n) = 0 by Newton's method with backtracking
line search; every Newton step solves the linearized system with flexible
GMRES, right-preconditioned by one geometric multigrid V-cycle (zero initial
guess) built on rediscretized level Jacobians at restricted states.
"""

import json
import time as _time
from dataclasses import dataclass

import numpy as np

from .assembly import ProblemData, assemble_jacobian, assemble_residual
from .dofs import enumerate_dofs
from .gmg import GmgConfig, GmgPreconditioner, build_hierarchy_caches, build_prolongation


@dataclass
class FgmresConfig:
    rel_tol: float = 1e-4
    max_iter: int = 200
    restart: int = 0  # 0 = no restart

    def __post_init__(self):
        if not 0.0 < self.rel_tol < 1.0:
            raise ValueError("rel_tol must lie in (0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class NewtonConfig:
    abs_tol: float = 1e-10
    rel_reduction: float = 1e4
    max_iter: int = 20
    ls_factor: float = 0.5
    ls_max: int = 10

    def __post_init__(self):
        if self.abs_tol <= 0:
            raise ValueError("abs_tol must be positive")
        if self.rel_reduction <= 1:
            raise ValueError("rel_reduction must exceed 1")


class FgmresError(RuntimeError):
    """Non-convergence, carrying the relative-residual history."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


class NewtonError(RuntimeError):
    """Newton failure, carrying the residual-norm trace."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class FgmresResult:
    x: np.ndarray
    iterations: int
    residuals: list
    breakdown: bool = False

    def __iter__(self):  # allows `x, iters = fgmres(...)`
        return iter((self.x, self.iterations))


def _as_matvec(op):
    if callable(op) and not hasattr(op, "csr") and not hasattr(op, "dot"):
        return op
    mat = getattr(op, "csr", op)
    return lambda v: mat @ v


def fgmres(op, rhs, preconditioner=None, cfg=None):
    """Right-preconditioned flexible GMRES (modified Gram-Schmidt + Givens).

    The preconditioner is a callable applied once per iteration and may vary
    between iterations (here: one V-cycle from a zero initial guess).
    """
    cfg = cfg or FgmresConfig()
    A = _as_matvec(op)
    M = preconditioner if preconditioner is not None else (lambda v: v)
    n = len(rhs)
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return FgmresResult(x=np.zeros(n), iterations=0, residuals=[0.0])

    cycle = cfg.restart if cfg.restart > 0 else cfg.max_iter
    x = np.zeros(n)
    history = []
    total = 0
    while True:
        r = rhs - A(x) if total else rhs.copy()
        beta = np.linalg.norm(r)
        m = min(cycle, cfg.max_iter - total)
        V = np.zeros((m + 1, n))
        Z = np.zeros((m, n))
        H = np.zeros((m + 1, m))
        cs, sn = np.zeros(m), np.zeros(m)
        gvec = np.zeros(m + 1)
        gvec[0] = beta
        V[0] = r / beta
        j_done = 0
        breakdown = False
        for j in range(m):
            Z[j] = M(V[j])
            w = A(Z[j])
            for i in range(j + 1):
                H[i, j] = V[i] @ w
                w -= H[i, j] * V[i]
            H[j + 1, j] = np.linalg.norm(w)
            # apply accumulated Givens rotations to the new column
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            denom = np.hypot(H[j, j], H[j + 1, j])
            cs[j], sn[j] = H[j, j] / denom, H[j + 1, j] / denom
            H[j, j] = denom
            gvec[j + 1] = -sn[j] * gvec[j]
            gvec[j] = cs[j] * gvec[j]
            j_done = j + 1
            total += 1
            rel = abs(gvec[j + 1]) / bnorm
            history.append(rel)
            if H[j + 1, j] <= 1e-14 * max(1.0, abs(H[j, j])):
                breakdown = True
                break
            if rel <= cfg.rel_tol:
                break
            V[j + 1] = w / H[j + 1, j]
        y = np.zeros(j_done)
        for i in range(j_done - 1, -1, -1):
            y[i] = (gvec[i] - H[i, i + 1 : j_done] @ y[i + 1 :]) / H[i, i]
        x = x + Z[:j_done].T @ y
        rel = history[-1] if history else 0.0
        if breakdown or rel <= cfg.rel_tol:
            return FgmresResult(x=x, iterations=total, residuals=history, breakdown=breakdown)
        if total >= cfg.max_iter:
            raise FgmresError(
                f"FGMRES did not reach rel_tol={cfg.rel_tol} in {total} iterations "
                f"(last relative residual {rel:.3e})",
                history,
            )


def n_subintervals(t_final, tau):
    """Number of equal subintervals covering (0, T]."""
    if tau <= 0 or t_final <= 0:
        raise ValueError("need positive T and tau")
    n = int(round(t_final / tau))
    if abs(n * tau - t_final) > 1e-9 * t_final:
        raise ValueError(f"tau={tau} does not divide T={t_final}")
    return n


@dataclass
class SlabStats:
    n: int
    t_end: float
    newton_iters: int
    gmres_iters: list
    residuals: list
    wall_seconds: float
    cache_cells: int = 0
    cache_bytes: int = 0

    @property
    def gmres_total(self):
        return int(sum(self.gmres_iters))


class NavierStokesSolver:
    """Hierarchy-bound solver: layouts, transfers, and the slab Newton loop."""

    def __init__(
        self,
        mesh,
        r=2,
        k=1,
        nu=1e-3,
        f=None,
        g=None,
        gamma1=35.0,
        gamma2=35.0,
        convection=True,
        gmg=None,
        newton=None,
        krylov=None,
        vanka_mode="deterministic",
        coarse_level=None,
    ):
        self.mesh = mesh
        self.r, self.k = r, k
        self.nu = nu
        self.f, self.g = f, g
        self.gamma1, self.gamma2 = gamma1, gamma2
        self.convection = convection
        self.gmg_cfg = gmg or GmgConfig()
        if coarse_level is not None:
            self.gmg_cfg.coarse_level = coarse_level
        self.newton_cfg = newton or NewtonConfig()
        self.krylov_cfg = krylov or FgmresConfig()
        self.vanka_mode = vanka_mode
        self.G = mesh.n_levels
        self.layouts = [enumerate_dofs(mesh, g_, r, k) for g_ in range(1, self.G + 1)]
        self.transfers = [
            build_prolongation(self.layouts[i], self.layouts[i + 1])
            for i in range(self.G - 1)
        ]

    @property
    def layout(self):
        """Finest-level layout."""
        return self.layouts[-1]

    def problem_data(self, tau, t_start, v_minus):
        return ProblemData(
            nu=self.nu,
            tau=tau,
            t_start=t_start,
            f=self.f,
            g=self.g,
            gamma1=self.gamma1,
            gamma2=self.gamma2,
            v_minus=v_minus,
            convection=self.convection,
        )

    def level_states(self, X):
        states = [None] * self.G
        states[-1] = X
        for i in range(self.G - 2, -1, -1):
            states[i] = self.transfers[i].restrict_state(states[i + 1])
        return states

    def build_preconditioner(self, X, data):
        states = self.level_states(X)
        ops = [
            assemble_jacobian(s, data, lay) for s, lay in zip(states, self.layouts)
        ]
        caches = build_hierarchy_caches(ops, self.layouts)
        pre = GmgPreconditioner(
            ops, caches, self.layouts, self.transfers, self.gmg_cfg, mode=self.vanka_mode
        )
        self.cache_cells = sum(len(c.cells) for c in caches)
        self.cache_bytes = sum(c.nbytes for c in caches)
        return ops[-1], pre

    def solve_slab(self, n, v_minus, t_start, tau, X0=None):
        """Newton iteration for one subinterval; returns (X, SlabStats)."""
        layout = self.layout
        cfg = self.newton_cfg
        data = self.problem_data(tau, t_start, v_minus)
        X = np.zeros(layout.n_total) if X0 is None else X0.copy()
        tic = _time.perf_counter()
        F = assemble_residual(X, data, layout)
        norm = np.linalg.norm(F)
        norm0 = norm
        trace = [norm]
        gmres_counts = []
        for _ in range(cfg.max_iter):
            op, pre = self.build_preconditioner(X, data)
            result = fgmres(op, -F, pre.apply, self.krylov_cfg)
            gmres_counts.append(result.iterations)
            D = result.x
            alpha = 1.0
            for _trial in range(cfg.ls_max):
                X_new = X + alpha * D
                F_new = assemble_residual(X_new, data, layout)
                norm_new = np.linalg.norm(F_new)
                if norm_new < norm or norm_new <= cfg.abs_tol:
                    break
                alpha *= cfg.ls_factor
            else:
                raise NewtonError(
                    f"line search exhausted on subinterval {n} "
                    f"(residuals {trace})",
                    trace,
                )
            X, F, norm = X_new, F_new, norm_new
            trace.append(norm)
            if norm <= cfg.abs_tol or norm <= norm0 / cfg.rel_reduction:
                break
        else:
            raise NewtonError(
                f"Newton did not converge on subinterval {n} (residuals {trace})",
                trace,
            )
        stats = SlabStats(
            n=n,
            t_end=t_start + tau,
            newton_iters=len(gmres_counts),
            gmres_iters=gmres_counts,
            residuals=trace,
            wall_seconds=_time.perf_counter() - tic,
            cache_cells=getattr(self, "cache_cells", 0),
            cache_bytes=getattr(self, "cache_bytes", 0),
        )
        return X, stats

    def initial_guess(self, v_minus, p_prev=None):
        """Constant-in-time extension of the incoming trace, warm pressure."""
        layout = self.layout
        X0 = np.zeros(layout.n_total)
        for l in range(self.k + 1):
            for i in range(2):
                X0[layout.velocity_slice(l, i)] = v_minus[i * layout.R : (i + 1) * layout.R]
            if p_prev is not None:
                X0[layout.pressure_slice(l)] = p_prev
        return X0

    def endpoint_velocity(self, X):
        """Velocity trace at t_n^- (the last temporal node is the endpoint)."""
        layout = self.layout
        return np.concatenate(
            [X[layout.velocity_slice(self.k, i)] for i in range(2)]
        )

    def endpoint_pressure(self, X):
        return X[self.layout.pressure_slice(self.k)].copy()

    def time_march(self, t_final, tau, v0, callback=None, log_path=None):
        """March Problem 1 over (0, T]; returns (trajectory of X_n, stats).

        `v0` holds the initial velocity coefficients (d*R,), used as the
        incoming trace of the first subinterval.
        """
        n_steps = n_subintervals(t_final, tau)
        v_minus = v0.copy()
        p_prev = None
        trajectory = []
        stats = []
        log = open(log_path, "w", encoding="utf-8") if log_path else None
        if log:
            log.write(
                "n,t,newton_iters,gmres_iters,residual,wall_seconds,"
                "cache_cells,cache_bytes\n"
            )
        try:
            for n in range(1, n_steps + 1):
                t_start = (n - 1) * tau
                X0 = self.initial_guess(v_minus, p_prev)
                try:
                    X, st = self.solve_slab(n, v_minus, t_start, tau, X0)
                except (NewtonError, FgmresError) as exc:
                    raise RuntimeError(
                        f"time marching aborted on subinterval {n} "
                        f"(t in ({t_start:.6g}, {t_start + tau:.6g}]): {exc}"
                    ) from exc
                trajectory.append(X)
                stats.append(st)
                v_minus = self.endpoint_velocity(X)
                p_prev = self.endpoint_pressure(X)
                if log:
                    gm = ";".join(str(c) for c in st.gmres_iters)
                    log.write(
                        f"{n},{st.t_end:.12g},{st.newton_iters},{gm},"
                        f"{st.residuals[-1]:.6e},{st.wall_seconds:.3f},"
                        f"{st.cache_cells},{st.cache_bytes}\n"
                    )
                if callback is not None:
                    callback(n, X, st)
        finally:
            if log:
                log.close()
        return trajectory, stats

    def velocity_interpolant(self, func, t=0.0):
        """Q_r nodal interpolation of a velocity field (d*R coefficients)."""
        layout = self.layout
        vals = func(layout.node_coords, t)
        return np.concatenate([vals[:, 0], vals[:, 1]])

    # ----- checkpointing ---------------------------------------------------
    def save_checkpoint(self, path, X, n_steps):
        layout = self.layout
        endpoint = np.concatenate(
            [self.endpoint_velocity(X), self.endpoint_pressure(X)]
        )
        endpoint.astype("<f8").tofile(str(path))
        sidecar = {
            "level": self.G,
            "r": self.r,
            "k": self.k,
            "N": int(n_steps),
        }
        with open(str(path) + ".json", "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh)

    def load_checkpoint(self, path):
        with open(str(path) + ".json", encoding="utf-8") as fh:
            sidecar = json.load(fh)
        if (sidecar["level"], sidecar["r"], sidecar["k"]) != (self.G, self.r, self.k):
            raise ValueError(
                f"checkpoint {sidecar} does not match solver "
                f"(level={self.G}, r={self.r}, k={self.k})"
            )
        layout = self.layout
        data = np.fromfile(str(path), dtype="<f8")
        expect = 2 * layout.R + layout.S
        if len(data) != expect:
            raise ValueError(f"checkpoint has {len(data)} values, expected {expect}")
        return data[: 2 * layout.R], data[2 * layout.R :], sidecar["N"]
