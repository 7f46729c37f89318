"""Cell-based Vanka smoother with precomputed local inverses.

For every cell the space-time saddle-point block J_T coupling all of the
cell's velocity and pressure DoFs (all k+1 time DoFs) is extracted from the
global Jacobian, inverted densely, and cached in a hash map keyed by cell id.
A sweep computes the global defect once, then overwrites each cell's solution
entries with the damped local correction; a DoF shared by several cells keeps
the value of the last cell that wrote it.
"""

from dataclasses import dataclass

import numpy as np


def inverse_memory_bytes(block_size, n_cells=1):
    """Memory for dense cached inverses at 8 bytes per entry."""
    return n_cells * block_size * block_size * 8


def _extraction_positions(op, layout):
    """Map (cell, local row, local col) -> position in csr.data, -1 if absent.

    Valid for every Jacobian assembled on this layout (fixed sparsity), so it
    is cached on the layout's tables.
    """
    tab = layout._tables
    key = "_vanka_extract_pos"
    cached = getattr(tab, key, None)
    if cached is not None:
        return cached
    csr = op.csr
    n = csr.shape[0]
    row_of_nnz = np.repeat(np.arange(n, dtype=np.int64), np.diff(csr.indptr))
    keys = row_of_nnz * n + csr.indices
    idx = layout.cell_dofs  # (nc, nloc), ascending per row
    qrows = np.repeat(idx, layout.n_loc, axis=1).reshape(layout.n_cells, layout.n_loc, layout.n_loc)
    qcols = np.tile(idx[:, None, :], (1, layout.n_loc, 1))
    qkeys = qrows.astype(np.int64) * n + qcols
    pos = np.searchsorted(keys, qkeys.ravel())
    pos_clipped = np.minimum(pos, len(keys) - 1)
    found = keys[pos_clipped] == qkeys.ravel()
    out = np.where(found, pos_clipped, -1).reshape(qkeys.shape)
    setattr(tab, key, out)
    return out


def extract_local_jacobian(J, cell, layout, exchange=None):
    """Dense local block J_T of one cell, ordered like its LocalIndexSet.

    With `exchange` (a RankLevel view from the exchange module) the rows this
    rank does not own are served from the ghost-entry map; a missing entry is
    a protocol error.
    """
    idx = layout.cell_dofs[cell]
    if exchange is None:
        pos = _extraction_positions(J, layout)[cell]
        vals = np.where(pos >= 0, J.csr.data[np.maximum(pos, 0)], 0.0)
        return vals
    return exchange.extract_block(idx)


def extract_all_local_jacobians(J, layout, cells=None):
    """Vectorized extraction of every (owned) cell's dense block."""
    pos = _extraction_positions(J, layout)
    if cells is not None:
        pos = pos[cells]
    return np.where(pos >= 0, J.csr.data[np.maximum(pos, 0)], 0.0)


@dataclass
class InverseCache:
    """Per-level hash map cell id -> dense inverse, stamped by Jacobian version."""

    level: int
    cells: np.ndarray
    inverses: np.ndarray  # (n, m, m)
    version: int

    def __post_init__(self):
        self.index = {int(c): i for i, c in enumerate(self.cells)}

    def __contains__(self, cell):
        return cell in self.index

    def inverse(self, cell):
        return self.inverses[self.index[cell]]

    @property
    def nbytes(self):
        n, m, _ = self.inverses.shape
        return inverse_memory_bytes(m, n)


def precompute_inverses(J, layout, cells=None, blocks=None):
    """Invert every (owned) cell's local Jacobian with dense LU (LAPACK).

    `blocks` may carry pre-extracted dense blocks (the distributed path
    assembles them through the exchange protocol).
    """
    if cells is None:
        cells = np.arange(layout.n_cells)
    cells = np.asarray(cells)
    if blocks is None:
        blocks = extract_all_local_jacobians(J, layout, cells)
    try:
        inverses = np.linalg.inv(blocks)
    except np.linalg.LinAlgError:
        for c, blk in zip(cells, blocks):
            try:
                np.linalg.inv(blk)
            except np.linalg.LinAlgError:
                raise RuntimeError(
                    f"singular local Jacobian on cell {int(c)} of level {layout.g}"
                ) from None
        raise
    return InverseCache(
        level=layout.g, cells=cells, inverses=inverses, version=J.version
    )


def _sweep_order(layout, mode, counter=[0]):
    if mode == "deterministic":
        return np.arange(layout.n_cells)
    if mode == "racy":
        # emulate nondeterministic write ordering with a reproducible shuffle
        counter[0] += 1
        rng = np.random.default_rng(counter[0])
        return rng.permutation(layout.n_cells)
    raise ValueError(f"unknown vanka mode {mode!r}")


def smoother_rhs(r, layout):
    """Arrange a sweep right-hand side with zeroed pressure blocks.

    This is the r_0 convention of the strong-Dirichlet setting, where the
    divergence rows of the Newton residual vanish identically.  With the
    weakly imposed (Nitsche) boundary conditions used here the pressure rows
    carry boundary data, so the solver keeps them by default; see
    `vanka_sweep(zero_pressure_rhs=...)`.
    """
    return layout.zero_pressure_blocks(r)


def vanka_sweep(d, r0, J, layout, cache, omega=1.0, mode="deterministic",
                zero_pressure_rhs=False):
    """One damped additive-overwrite sweep over all cells.

    The defect (r_0 - J d) is computed once from the incoming iterate (the
    sweep is Jacobi-like); every cell then overwrites its DoFs with
    d_T + omega * J_T^{-1} (r_0 - J d)_T, later cells winning on shared DoFs.
    With `zero_pressure_rhs` the sweep arranges its right-hand side via
    `smoother_rhs` (a no-op when the caller already passes that arrangement).
    """
    if cache.version != J.version:
        raise RuntimeError(
            f"stale inverse cache (cache version {cache.version}, "
            f"Jacobian version {J.version})"
        )
    if zero_pressure_rhs:
        r0 = smoother_rhs(r0, layout)
    defect = r0 - J.csr @ d
    idx = layout.cell_dofs[cache.cells]
    upd = d[idx] + omega * np.einsum("cij,cj->ci", cache.inverses, defect[idx])
    order = _sweep_order(layout, mode)
    if len(cache.cells) != layout.n_cells:
        order = order[np.isin(order, cache.cells)]
        pos = {int(c): i for i, c in enumerate(cache.cells)}
        order_rows = np.array([pos[int(c)] for c in order])
    else:
        order_rows = order
    out = d.copy()
    # fancy assignment writes sequentially, so the last cell in `order` wins
    out[idx[order_rows].ravel()] = upd[order_rows].ravel()
    return out
