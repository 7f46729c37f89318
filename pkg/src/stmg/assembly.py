"""Nonlinear space-time residual and sparse Jacobian assembly.

One subinterval of the dG(k) time marching couples k+1 spatial saddle-point
systems: time-derivative and jump terms, convection, viscosity,
pressure/divergence couplings, and boundary terms that impose the Dirichlet
data weakly (consistency plus penalty).  The do-nothing outflow contributes
no boundary terms.  Assembly is vectorized over cells; Jacobian values are
scattered into a precomputed CSR pattern whose pressure-pressure blocks are
never written (structural saddle-point zeros).
"""

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .dofs import DofLayout
from .elements import (
    PDiscBasis,
    QBasis,
    TimeBasis,
    gauss_quadrature,
    gauss_radau_right,
    tensor_rule,
)
from .mesh import DIRICHLET_TAGS, FACE_CORNERS

_jacobian_version = itertools.count(1)

#: cells per assembly chunk (bounds the dense local-block workspace)
CHUNK = 4096


def _zero_field(points, t):
    return np.zeros((len(points), 2))


@dataclass
class ProblemData:
    """Physical data and discretization parameters of one subinterval."""

    nu: float
    tau: float
    t_start: float = 0.0
    f: object = None  # body force: (points, t) -> (n, 2)
    g: object = None  # Dirichlet datum: (points, t) -> (n, 2)
    gamma1: float = 35.0
    gamma2: float = 35.0
    v_minus: np.ndarray = None  # velocity trace coefficients (d*R) at t_{n-1}^-
    convection: bool = True

    def __post_init__(self):
        if self.nu < 0:
            raise ValueError("viscosity must be >= 0")
        if self.tau <= 0:
            raise ValueError("time step must be positive")
        if self.gamma1 <= 0 or self.gamma2 <= 0:
            raise ValueError("Nitsche penalties must be positive")
        if self.f is None:
            self.f = _zero_field
        if self.g is None:
            self.g = _zero_field


@dataclass
class SparseOperator:
    """CSR Jacobian of one level, stamped with an assembly generation."""

    csr: sp.csr_matrix
    layout: DofLayout
    version: int = field(default_factory=lambda: next(_jacobian_version))

    @property
    def shape(self):
        return self.csr.shape

    def __matmul__(self, vec):
        return self.csr @ vec


class TimeTables:
    """Temporal basis/quadrature couplings of the dG(k) slab."""

    def __init__(self, k):
        self.k = k
        basis = TimeBasis(k)
        quad = gauss_radau_right(k + 2)
        self.t_nodes = quad.points  # reference times of the quadrature
        self.w = quad.weights
        self.C = basis.values(quad.points).T  # (k+1, nt): C[l, s]
        self.D = basis.derivs(quad.points).T
        self.chi0 = basis.values(np.array([0.0]))[0]  # values at t_{n-1}^+
        self.basis_nodes = basis.nodes
        # d/dt + jump coupling and the L2(I_n) mass (to be scaled by tau)
        self.TS = np.einsum("s,ls,ms->ml", self.w, self.D, self.C) + np.outer(
            self.chi0, self.chi0
        )
        self.TM_hat = np.einsum("s,ls,ms->ml", self.w, self.C, self.C)


class SpaceTables:
    """Per-level basis values, geometry factors, and scatter maps."""

    def __init__(self, layout):
        self.layout = layout
        r, k = layout.r, layout.k
        lvl = layout.mesh.level(layout.g)
        self.time = TimeTables(k)

        vol = tensor_rule(gauss_quadrature(r + 2))
        qb, pb = QBasis(r), PDiscBasis(r - 1)
        self.N = qb.eval(vol.points)  # (nq, nvl)
        Ghat = qb.grad(vol.points)  # (nq, nvl, 2)
        self.Pv = pb.eval(vol.points)  # (nq, npl)

        corners = lvl.cell_corners()  # (nc, 4, 2)
        xi, eta = vol.points[:, 0], vol.points[:, 1]

        def geometry(ref_xi, ref_eta):
            dxi = (
                np.einsum("q,cd->cqd", 1 - ref_eta, corners[:, 1] - corners[:, 0])
                + np.einsum("q,cd->cqd", ref_eta, corners[:, 2] - corners[:, 3])
            )
            deta = (
                np.einsum("q,cd->cqd", 1 - ref_xi, corners[:, 3] - corners[:, 0])
                + np.einsum("q,cd->cqd", ref_xi, corners[:, 2] - corners[:, 1])
            )
            det = dxi[..., 0] * deta[..., 1] - dxi[..., 1] * deta[..., 0]
            return dxi, deta, det

        dxi, deta, det = geometry(xi, eta)
        if (det <= 0).any():
            raise ValueError("non-positive mapping Jacobian during assembly setup")
        self.detJxW = det * vol.weights[None, :]  # (nc, nq)
        # physical gradients: grad_x = (y_eta g_xi - y_xi g_eta)/det, etc.
        gx = (
            deta[..., 1][:, :, None] * Ghat[None, :, :, 0]
            - dxi[..., 1][:, :, None] * Ghat[None, :, :, 1]
        ) / det[:, :, None]
        gy = (
            -deta[..., 0][:, :, None] * Ghat[None, :, :, 0]
            + dxi[..., 0][:, :, None] * Ghat[None, :, :, 1]
        ) / det[:, :, None]
        self.gradN = np.stack([gx, gy], axis=-1)  # (nc, nq, nvl, 2)
        w4 = np.stack(
            [(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta], axis=1
        )  # (nq, 4)
        self.xq = np.einsum("qv,cvd->cqd", w4, corners)  # (nc, nq, 2)

        self.nvl = layout.n_vel_local
        self.npl = layout.n_p
        self.nls = layout.n_loc_space

        # scalar mass and Stokes-part local matrices (state independent)
        self.mass = np.einsum("cq,qa,qb->cab", self.detJxW, self.N, self.N)
        nvl, npl, nls = self.nvl, self.npl, self.nls
        nc = lvl.n_cells
        stiff = np.einsum("cq,cqad,cqbd->cab", self.detJxW, self.gradN, self.gradN)
        # div coupling per component: B_i[c, b, a] = <d_i phi_a, xi_b>
        Bdiv = np.einsum("cq,qb,cqai->ciba", self.detJxW, self.Pv, self.gradN)

        # the viscous part is scaled by nu at assembly time
        self.visc = np.zeros((nc, nls, nls))
        for i in range(2):
            vi = slice(i * nvl, (i + 1) * nvl)
            self.visc[:, vi, vi] = stiff
        psl = slice(2 * nvl, nls)
        self.incomp = np.zeros((nc, nls, nls))
        for i in range(2):
            vi = slice(i * nvl, (i + 1) * nvl)
            self.incomp[:, vi, psl] -= np.transpose(Bdiv[:, i], (0, 2, 1))  # -<p, div psi>
            self.incomp[:, psl, vi] += Bdiv[:, i]  # +<div v, xi>

        # mass on the component diagonal (time derivative + jump coupling)
        self.mass_comp = np.zeros((nc, nls, nls))
        for i in range(2):
            vi = slice(i * nvl, (i + 1) * nvl)
            self.mass_comp[:, vi, vi] = self.mass

        self._build_boundary(layout, lvl, qb, pb, r)
        self._build_scatter(layout)

    # ----- Dirichlet boundary face tables ---------------------------------
    def _build_boundary(self, layout, lvl, qb, pb, r):
        rule = gauss_quadrature(r + 2)
        s = rule.points
        ref_by_face = [
            np.column_stack([s, np.zeros_like(s)]),
            np.column_stack([np.ones_like(s), s]),
            np.column_stack([1.0 - s, np.ones_like(s)]),
            np.column_stack([np.zeros_like(s), 1.0 - s]),
        ]
        diam = lvl.diameters()
        groups = []
        for f in range(4):
            cells = np.flatnonzero(np.isin(lvl.face_tags[:, f], DIRICHLET_TAGS))
            if len(cells) == 0:
                continue
            a, b = FACE_CORNERS[f]
            va = lvl.vertices[lvl.cells[cells, a]]
            vb = lvl.vertices[lvl.cells[cells, b]]
            edge = vb - va
            length = np.linalg.norm(edge, axis=1)
            normal = np.column_stack([edge[:, 1], -edge[:, 0]]) / length[:, None]
            ref = ref_by_face[f]
            Nf = qb.eval(ref)  # (nqf, nvl)
            Gf = qb.grad(ref)
            Pf = pb.eval(ref)
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
            gx = (
                deta[..., 1][:, :, None] * Gf[None, :, :, 0]
                - dxi[..., 1][:, :, None] * Gf[None, :, :, 1]
            ) / det[:, :, None]
            gy = (
                -deta[..., 0][:, :, None] * Gf[None, :, :, 0]
                + dxi[..., 0][:, :, None] * Gf[None, :, :, 1]
            ) / det[:, :, None]
            w4 = np.stack(
                [(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta], axis=1
            )
            groups.append(
                {
                    "cells": cells,
                    "normal": normal,  # outward of the fluid cell
                    "wf": rule.weights[None, :] * length[:, None],  # (nf, nqf)
                    "h": diam[cells],
                    "N": Nf,
                    "P": Pf,
                    "gradN": np.stack([gx, gy], axis=-1),  # (nf, nqf, nvl, 2)
                    "points": np.einsum("qv,cvd->cqd", w4, corners),
                }
            )
        self.bnd_groups = groups

    def boundary_operator(self, data):
        """Spatial Nitsche/consistency matrix, dense per boundary cell.

        Returns (cells, blocks) with blocks (nf, nls, nls); linear in the
        unknowns, so it can be cached per ProblemData parameters.
        """
        nvl, npl, nls = self.nvl, self.npl, self.nls
        out_cells, out_blocks = [], []
        for grp in self.bnd_groups:
            nf = len(grp["cells"])
            blk = np.zeros((nf, nls, nls))
            N, G, P = grp["N"], grp["gradN"], grp["P"]
            n, wf, h = grp["normal"], grp["wf"], grp["h"]
            dn = np.einsum("fqad,fd->fqa", G, n)  # normal derivative of phi
            pen = (
                data.gamma1 * data.nu / h[:, None]
            )  # gamma_1 nu / h per face
            pen2 = data.gamma2 / h[:, None]
            for i in range(2):
                vi = slice(i * nvl, (i + 1) * nvl)
                # -<nu dn(v), psi> - <v, nu dn(psi)> + gamma1 nu/h <v, psi>
                blk[:, vi, vi] += (
                    -data.nu * np.einsum("fq,qa,fqb->fab", wf, N, dn)
                    - data.nu * np.einsum("fq,fqa,qb->fab", wf, dn, N)
                    + np.einsum("fq,f,qa,qb->fab", wf, pen[:, 0], N, N)
                )
                for j in range(2):
                    vj = slice(j * nvl, (j + 1) * nvl)
                    # gamma2/h <(v.n) n_i, psi_i>
                    blk[:, vi, vj] += np.einsum(
                        "fq,f,qa,qb->fab",
                        wf,
                        pen2[:, 0] * n[:, i] * n[:, j],
                        N,
                        N,
                    )
                psl = slice(2 * nvl, nls)
                # +<p n_i, psi_i> (consistency), -<v_i n_i, xi> (adjoint)
                blk[:, vi, psl] += np.einsum("fq,f,qa,qb->fab", wf, n[:, i], N, P)
                blk[:, psl, vi] -= np.einsum("fq,f,qa,qb->fab", wf, n[:, i], P, N)
            out_cells.append(grp["cells"])
            out_blocks.append(blk)
        return out_cells, out_blocks

    # ----- CSR pattern and scatter map -------------------------------------
    def _build_scatter(self, layout):
        nvl, npl, nls = self.nvl, self.npl, self.nls
        k = layout.k
        nloc = layout.n_loc
        # local (row, col) positions excluding pressure-pressure couplings
        pos = np.arange(nloc)
        is_p = (pos % nls) >= 2 * nvl
        rows_l, cols_l = np.meshgrid(pos, pos, indexing="ij")
        keep = ~(is_p[rows_l] & is_p[cols_l])
        self.loc_rows = rows_l[keep]
        self.loc_cols = cols_l[keep]

        gr = layout.cell_dofs_ref[:, self.loc_rows].ravel()
        gc = layout.cell_dofs_ref[:, self.loc_cols].ravel()
        order = np.lexsort((gc, gr))
        rs, cs = gr[order], gc[order]
        first = np.empty(len(rs), dtype=bool)
        first[0] = True
        first[1:] = (rs[1:] != rs[:-1]) | (cs[1:] != cs[:-1])
        upos = np.cumsum(first) - 1
        datapos = np.empty(len(rs), dtype=np.int64)
        datapos[order] = upos
        self.datapos = datapos
        self.nnz = int(upos[-1]) + 1
        self.indices = cs[first].astype(np.int32)
        counts = np.bincount(rs[first], minlength=layout.n_total)
        self.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)
        self.n_entries_per_cell = len(self.loc_rows)


def space_tables(layout):
    """The (cached) assembly tables of a layout."""
    if layout._tables is None:
        layout._tables = SpaceTables(layout)
    return layout._tables


def _check_state(X, layout):
    if X.shape != (layout.n_total,):
        raise ValueError(
            f"state has length {len(X)}, layout expects {layout.n_total}"
        )
    if not np.isfinite(X).all():
        bad = int(np.flatnonzero(~np.isfinite(X))[0])
        cells = np.flatnonzero((layout.cell_dofs == bad).any(axis=1))
        raise FloatingPointError(
            f"non-finite state entry at dof {bad} "
            f"(cell {cells[0] if len(cells) else '?'} on level {layout.g})"
        )


def _local_state(X, layout, sl):
    """(chunk, k+1, nls) local coefficients in reference node order."""
    return X[layout.cell_dofs_ref[sl]].reshape(-1, layout.k + 1, layout.n_loc_space)


def assemble_residual(X, data, layout):
    """Space-time residual F_n(X) of the current subinterval."""
    tab = space_tables(layout)
    _check_state(X, layout)
    time = tab.time
    k, nvl, npl, nls = layout.k, tab.nvl, tab.npl, tab.nls
    tau = data.tau
    v_minus = data.v_minus
    if v_minus is None:
        v_minus = np.zeros(2 * layout.R)

    bcells, bblocks = tab.boundary_operator(data)
    res = np.zeros(layout.n_total)
    nc = layout.n_cells
    for start in range(0, nc, CHUNK):
        sl = slice(start, min(start + CHUNK, nc))
        loc = _local_state(X, layout, sl)  # (m, k+1, nls)
        V = loc[:, :, : 2 * nvl].reshape(-1, k + 1, 2, nvl)
        rloc = np.zeros_like(loc)

        # time derivative + jump, minus the incoming trace
        mass = tab.mass[sl]
        rloc[:, :, : 2 * nvl] += np.einsum(
            "ml,clib->cmib", time.TS, np.einsum("cab,clib->clia", mass, V)
        ).reshape(loc.shape[0], k + 1, 2 * nvl)
        vm = np.stack(
            [v_minus[i * layout.R + layout.cell_scalar_nodes[sl]] for i in range(2)],
            axis=1,
        )  # (m, 2, nvl)
        rloc[:, :, : 2 * nvl] -= np.einsum(
            "m,cia->cmia", time.chi0, np.einsum("cab,cib->cia", mass, vm)
        ).reshape(loc.shape[0], k + 1, 2 * nvl)

        stokes = data.nu * tab.visc[sl] + tab.incomp[sl]
        for s in range(len(time.t_nodes)):
            t_s = data.t_start + tau * time.t_nodes[s]
            state_s = np.einsum("l,clx->cx", time.C[:, s], loc)  # (m, nls)
            r_s = np.einsum("cxy,cy->cx", stokes, state_s)
            if data.convection:
                Vs = state_s[:, : 2 * nvl].reshape(-1, 2, nvl)
                u = np.einsum("qa,cia->cqi", tab.N, Vs)  # (m, nq, 2)
                du = np.einsum("cqad,cia->cqid", tab.gradN[sl], Vs)
                advect = np.einsum("cqj,cqij->cqi", u, du)
                r_s[:, : 2 * nvl] += np.einsum(
                    "cq,qa,cqi->cia", tab.detJxW[sl], tab.N, advect
                ).reshape(-1, 2 * nvl)
            fv = data.f(tab.xq[sl].reshape(-1, 2), t_s).reshape(-1, tab.N.shape[0], 2)
            r_s[:, : 2 * nvl] -= np.einsum(
                "cq,qa,cqi->cia", tab.detJxW[sl], tab.N, fv
            ).reshape(-1, 2 * nvl)
            rloc += tau * time.w[s] * np.einsum("m,cx->cmx", time.C[:, s], r_s)
        res += np.bincount(
            layout.cell_dofs_ref[sl].ravel(),
            weights=rloc.ravel(),
            minlength=layout.n_total,
        )

    # boundary: state terms are in `bblocks`; the datum g enters the rhs
    for grp, blk in zip(tab.bnd_groups, bblocks):
        cells = grp["cells"]
        loc = X[layout.cell_dofs_ref[cells]].reshape(len(cells), k + 1, nls)
        rloc = np.zeros_like(loc)
        N, G, P = grp["N"], grp["gradN"], grp["P"]
        n, wf, h = grp["normal"], grp["wf"], grp["h"]
        dn = np.einsum("fqad,fd->fqa", G, n)
        for s in range(len(time.t_nodes)):
            t_s = data.t_start + tau * time.t_nodes[s]
            state_s = np.einsum("l,clx->cx", time.C[:, s], loc)
            r_s = np.einsum("cxy,cy->cx", blk, state_s)
            gv = data.g(grp["points"].reshape(-1, 2), t_s).reshape(len(cells), -1, 2)
            gdotn = np.einsum("fqi,fi->fq", gv, n)
            for i in range(2):
                vi = slice(i * nvl, (i + 1) * nvl)
                r_s[:, vi] -= (
                    -data.nu * np.einsum("fq,fq,fqa->fa", wf, gv[:, :, i], dn)
                    + data.gamma1 * data.nu * np.einsum("fq,f,fq,qa->fa", wf, 1.0 / h, gv[:, :, i], N)
                    + data.gamma2 * np.einsum("fq,f,fq,f,qa->fa", wf, 1.0 / h, gdotn, n[:, i], N)
                )
            r_s[:, 2 * nvl :] += np.einsum("fq,fq,qb->fb", wf, gdotn, P)
            rloc += tau * time.w[s] * np.einsum("m,cx->cmx", time.C[:, s], r_s)
        res += np.bincount(
            layout.cell_dofs_ref[cells].ravel(),
            weights=rloc.ravel(),
            minlength=layout.n_total,
        )
    return res


def assemble_jacobian(X, data, layout):
    """Exact derivative of `assemble_residual` at state X, as a SparseOperator."""
    tab = space_tables(layout)
    _check_state(X, layout)
    time = tab.time
    k, nvl, nls = layout.k, tab.nvl, tab.nls
    tau = data.tau
    nt = len(time.t_nodes)
    TMtau = tau * time.TM_hat

    bcells, bblocks = tab.boundary_operator(data)
    bnd_full = {}
    for cells, blk in zip(bcells, bblocks):
        for j, c in enumerate(cells):
            if c in bnd_full:
                bnd_full[c] = bnd_full[c] + blk[j]
            else:
                bnd_full[c] = blk[j]

    data_arr = np.zeros(tab.nnz)
    nc = layout.n_cells
    epc = tab.n_entries_per_cell
    for start in range(0, nc, CHUNK):
        sl = slice(start, min(start + CHUNK, nc))
        m = sl.stop - sl.start
        loc = _local_state(X, layout, sl)
        stokes = data.nu * tab.visc[sl] + tab.incomp[sl]
        for c_local, c_global in enumerate(range(sl.start, sl.stop)):
            if c_global in bnd_full:
                stokes[c_local] = stokes[c_local] + bnd_full[c_global]

        conv = None
        if data.convection:
            conv = np.zeros((nt, m, 2 * nvl, 2 * nvl))
            for s in range(nt):
                Vs = np.einsum("l,clia->cia", time.C[:, s], loc[:, :, : 2 * nvl].reshape(m, k + 1, 2, nvl))
                u = np.einsum("qa,cia->cqi", tab.N, Vs)
                du = np.einsum("cqad,cia->cqid", tab.gradN[sl], Vs)
                udotgrad = np.einsum("cqj,cqbj->cqb", u, tab.gradN[sl])
                t2 = np.einsum("cq,qa,cqb->cab", tab.detJxW[sl], tab.N, udotgrad)
                t1 = np.einsum("cq,qa,qb,cqij->ciajb", tab.detJxW[sl], tab.N, tab.N, du)
                for i in range(2):
                    vi = slice(i * nvl, (i + 1) * nvl)
                    conv[s, :, vi, vi] += t2
                conv[s] += t1.reshape(m, 2 * nvl, 2 * nvl)

        Jloc = np.zeros((m, k + 1, nls, k + 1, nls))
        for mrow in range(k + 1):
            for lcol in range(k + 1):
                blk = time.TS[mrow, lcol] * tab.mass_comp[sl] + TMtau[mrow, lcol] * stokes
                if conv is not None:
                    wsum = tau * time.w * time.C[mrow] * time.C[lcol]  # (nt,)
                    blk[:, : 2 * nvl, : 2 * nvl] += np.einsum("s,scab->cab", wsum, conv)
                Jloc[:, mrow, :, lcol, :] = blk
        Jloc = Jloc.reshape(m, layout.n_loc, layout.n_loc)
        vals = Jloc[:, tab.loc_rows, tab.loc_cols].ravel()
        seg = tab.datapos[sl.start * epc : sl.stop * epc]
        data_arr += np.bincount(seg, weights=vals, minlength=tab.nnz)

    csr = sp.csr_matrix(
        (data_arr, tab.indices.copy(), tab.indptr.copy()),
        shape=(layout.n_total, layout.n_total),
    )
    return SparseOperator(csr=csr, layout=layout)


def assemble_level_jacobians(states, data, layouts):
    """Level Jacobians for the V-cycle, from per-level linearization states."""
    return [assemble_jacobian(X, data, lay) for X, lay in zip(states, layouts)]


def dump_matrix_market(op, path):
    from scipy.io import mmwrite

    mmwrite(str(path), op.csr)


def dump_vector(vec, path):
    with open(path, "w", encoding="utf-8") as fh:
        for v in vec:
            fh.write(f"{v:.17e}\n")
