"""Geometric multigrid V-cycle over the mesh hierarchy.

Prolongation interpolates coarse finite element functions into the nested
fine space (exactly, since refinement is affine-quadrant nesting); restriction
is the transpose.  Smoothing is the cell-based Vanka sweep, the coarsest level
is solved directly by a sparse LU factorization that is refreshed whenever the
level Jacobian changes.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .elements import PDiscBasis, QBasis, gauss_quadrature, tensor_rule
from .mesh import QUADRANT_OFFSETS
from .vanka import precompute_inverses, vanka_sweep


def _quadrant_embeddings(r):
    """Velocity and pressure stencils of the four child quadrants."""
    qb, pb = QBasis(r), PDiscBasis(r - 1)
    rule = tensor_rule(gauss_quadrature(r + 2))
    Ev, Ep = [], []
    for off in QUADRANT_OFFSETS:
        mapped_nodes = 0.5 * (qb.nodes + off)
        Ev.append(qb.eval(mapped_nodes))  # (nvl fine nodes, nvl coarse)
        coarse_at_fine_quad = pb.eval(0.5 * (rule.points + off))  # (nq, npl)
        fine_at_quad = pb.eval(rule.points)
        Ep.append(np.einsum("q,qa,qb->ba", rule.weights, coarse_at_fine_quad, fine_at_quad))
    return Ev, Ep


@dataclass
class TransferOperator:
    """Sparse prolongation between two consecutive levels (full ST layout)."""

    P: sp.csr_matrix
    layout_coarse: object
    layout_fine: object
    scalar_injection: np.ndarray  # coarse scalar node -> coincident fine node
    pressure_restrict: sp.csr_matrix  # L2-projection of fine onto coarse pressure

    def prolongate(self, coarse_vec):
        return self.P @ coarse_vec

    def restrict(self, fine_vec):
        return self.P.T @ fine_vec

    def restrict_state(self, X_fine):
        """Coarse linearization state: velocity by injection at coincident
        nodes (exact on nested functions), pressure by cellwise projection."""
        lc, lf = self.layout_coarse, self.layout_fine
        out = np.empty(lc.n_total)
        for l in range(lc.k + 1):
            for i in range(2):
                out[lc.velocity_slice(l, i)] = X_fine[lf.velocity_slice(l, i)][
                    self.scalar_injection
                ]
            out[lc.pressure_slice(l)] = self.pressure_restrict @ X_fine[lf.pressure_slice(l)]
        return out


def build_prolongation(layout_coarse, layout_fine):
    """Interpolation prolongation from level g-1 to level g."""
    lc, lf = layout_coarse, layout_fine
    if lf.g != lc.g + 1 or lf.mesh is not lc.mesh or lf.r != lc.r or lf.k != lc.k:
        raise ValueError("prolongation needs consecutive layouts of one hierarchy")
    mesh, r = lc.mesh, lc.r
    children = mesh.children[lc.g]
    Ev, Ep = _quadrant_embeddings(r)
    nvl, npl = lc.n_vel_local, lc.n_p

    rows, cols, vals = [], [], []
    filled = np.zeros(lf.R, dtype=bool)
    parent = mesh.level(lf.g).parent
    quadrant = np.empty(lf.mesh.level(lf.g).n_cells, dtype=np.int64)
    for pc in range(lc.n_cells):
        quadrant[children[pc]] = np.arange(4)
    for fc in range(lf.n_cells):
        pc, q = parent[fc], quadrant[fc]
        coarse_nodes = lc.cell_scalar_nodes[pc]
        fine_nodes = lf.cell_scalar_nodes[fc]
        new = ~filled[fine_nodes]
        if not new.any():
            continue
        filled[fine_nodes[new]] = True
        E = Ev[q][new]
        nz = E != 0.0
        for loc_row, gnode in enumerate(fine_nodes[new]):
            m = nz[loc_row]
            rows.extend([gnode] * m.sum())
            cols.extend(coarse_nodes[m])
            vals.extend(E[loc_row, m])
    Ps = sp.csr_matrix((vals, (rows, cols)), shape=(lf.R, lc.R))

    prows, pcols, pvals = [], [], []
    for pc in range(lc.n_cells):
        for q, fc in enumerate(children[pc]):
            for b in range(npl):
                for a in range(npl):
                    v = Ep[q][b, a]
                    if v != 0.0:
                        prows.append(fc * npl + b)
                        pcols.append(pc * npl + a)
                        pvals.append(v)
    Pp = sp.csr_matrix((pvals, (prows, pcols)), shape=(lf.S, lc.S))

    block = sp.block_diag([Ps, Ps, Pp], format="csr")
    P = sp.block_diag([block] * (lc.k + 1), format="csr")

    # injection: coarse node (ix/r, jy/r) of cell pc coincides with a fine node
    injection = np.full(lc.R, -1, dtype=np.int64)
    for pc in range(lc.n_cells):
        for jy in range(r + 1):
            for ix in range(r + 1):
                loc = jy * (r + 1) + ix
                gnode = lc.cell_scalar_nodes[pc, loc]
                if injection[gnode] >= 0:
                    continue
                sx = 0 if 2 * ix <= r else 1
                sy = 0 if 2 * jy <= r else 1
                q = {(0, 0): 0, (1, 0): 1, (1, 1): 2, (0, 1): 3}[(sx, sy)]
                floc = (2 * jy - sy * r) * (r + 1) + (2 * ix - sx * r)
                injection[gnode] = lf.cell_scalar_nodes[children[pc][q], floc]
    assert (injection >= 0).all()

    # cellwise least-squares projection of the four children onto the parent
    M4 = np.zeros((npl, npl))
    for q in range(4):
        M4 += Ep[q].T @ Ep[q]
    M4inv = np.linalg.inv(M4)
    rrows, rcols, rvals = [], [], []
    for pc in range(lc.n_cells):
        for q, fc in enumerate(children[pc]):
            blk = M4inv @ Ep[q].T  # (npl coarse, npl fine)
            for a in range(npl):
                for b in range(npl):
                    if blk[a, b] != 0.0:
                        rrows.append(pc * npl + a)
                        rcols.append(fc * npl + b)
                        rvals.append(blk[a, b])
    Rp = sp.csr_matrix((rvals, (rrows, rcols)), shape=(lc.S, lf.S))

    return TransferOperator(
        P=P,
        layout_coarse=lc,
        layout_fine=lf,
        scalar_injection=injection,
        pressure_restrict=Rp,
    )


def restrict(transfer, r_fine):
    """Transpose-prolongation restriction."""
    return transfer.restrict(r_fine)


@dataclass
class GmgConfig:
    pre_smooth: int = 1
    post_smooth: int = 1
    damping: float = 1.0
    coarse_level: int = 1
    cycle: str = "V"
    zero_pressure_rhs: bool = False  # the strong-BC r_0 sweep convention

    def __post_init__(self):
        if self.pre_smooth < 0 or self.post_smooth < 0:
            raise ValueError("smoothing counts must be >= 0")
        if self.pre_smooth == 0 and self.post_smooth == 0:
            raise ValueError("at least one smoothing sweep is required")
        if self.cycle != "V":
            raise ValueError("only V-cycles are supported")


def coarse_solve(op, rhs, factor_cache=None):
    """Direct solve on the coarsest level via sparse LU, refactored per version."""
    if factor_cache is not None and factor_cache.get("version") == op.version:
        lu = factor_cache["lu"]
    else:
        try:
            lu = spla.splu(op.csr.tocsc())
        except RuntimeError as exc:
            n = op.shape[0]
            est = np.linalg.cond(op.csr.toarray()) if n <= 2000 else float("inf")
            raise RuntimeError(
                f"coarse matrix singular (condition estimate {est:.3e})"
            ) from exc
        if factor_cache is not None:
            factor_cache["version"] = op.version
            factor_cache["lu"] = lu
    return lu.solve(rhs)


class GmgPreconditioner:
    """One multigrid V-cycle with Vanka smoothing, used inside FGMRES.

    `operators`, `caches`, `layouts` are indexed by level g = 1..G (position
    g-1); `transfers[g-2]` prolongates level g-1 to g.
    """

    def __init__(self, operators, caches, layouts, transfers, cfg, mode="deterministic", diag=None):
        self.operators = operators
        self.caches = caches
        self.layouts = layouts
        self.transfers = transfers
        self.cfg = cfg
        self.mode = mode
        self.diag = diag  # callable(level, pre_norm, post_norm) or None
        self.trace = None  # set to a list to record (phase, level, sweeps)
        self._coarse_cache = {}
        self.G = len(operators)
        if not 1 <= cfg.coarse_level <= self.G:
            raise ValueError("coarse level outside the hierarchy")

    # the three primitives a distributed engine overrides
    def _matvec(self, g, vec):
        return self.operators[g - 1].csr @ vec

    def _smooth(self, g, d, r, count):
        for _ in range(count):
            d = vanka_sweep(
                d,
                r,
                self.operators[g - 1],
                self.layouts[g - 1],
                self.caches[g - 1],
                omega=self.cfg.damping,
                mode=self.mode,
                zero_pressure_rhs=self.cfg.zero_pressure_rhs,
            )
        return d

    def _coarse(self, rhs):
        g = self.cfg.coarse_level
        return coarse_solve(self.operators[g - 1], rhs, self._coarse_cache)

    def apply(self, r):
        """Preconditioner action: one V-cycle from a zero initial guess."""
        return self.cycle(np.zeros_like(r), r, self.G)

    def cycle(self, d, r, g):
        if g == self.cfg.coarse_level:
            if self.trace is not None:
                self.trace.append(("coarse", g, 0))
            return self._coarse(r)
        if self.diag is not None:
            pre = np.linalg.norm(r - self._matvec(g, d))
        if self.trace is not None:
            self.trace.append(("pre", g, self.cfg.pre_smooth))
        d = self._smooth(g, d, r, self.cfg.pre_smooth)
        residual = r - self._matvec(g, d)
        r_coarse = self.transfers[g - 2].restrict(residual)
        d_coarse = self.cycle(np.zeros_like(r_coarse), r_coarse, g - 1)
        d = d + self.transfers[g - 2].prolongate(d_coarse)
        if self.trace is not None:
            self.trace.append(("post", g, self.cfg.post_smooth))
        d = self._smooth(g, d, r, self.cfg.post_smooth)
        if self.diag is not None:
            post = np.linalg.norm(r - self._matvec(g, d))
            self.diag(g, pre, post)
        return d


def build_hierarchy_caches(operators, layouts, owned_cells=None):
    """Vanka inverse caches for every level (all cells unless restricted)."""
    caches = []
    for op, layout in zip(operators, layouts):
        cells = None if owned_cells is None else owned_cells[layout.g - 1]
        caches.append(precompute_inverses(op, layout, cells=cells))
    return caches
