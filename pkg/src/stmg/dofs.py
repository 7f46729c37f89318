"""Global DoF enumeration per mesh level and the space-time coefficient layout.

Velocity components use continuous Q_r scalar nodes (shared across cells via
vertex/edge identification), the pressure uses n_p modal DoFs per cell with no
sharing.  Per time DoF l the block ordering is: all v_1 scalar DoFs, then v_2,
then the pressure; the k+1 time blocks are concatenated, giving a space-time
vector of length (k+1) * (d*R + S).
"""

from dataclasses import dataclass

import numpy as np

from .elements import PDiscBasis, QBasis, pressure_dof_count
from .mesh import FACE_CORNERS


def local_block_size(d, r, k, n_p=None):
    """Cell-local space-time block dimension (k+1) * (d*(r+1)^d + n_p)."""
    if n_p is None:
        n_p = pressure_dof_count(d, r - 1)
    return (k + 1) * (d * (r + 1) ** d + n_p)


# reference tensor nodes of face f in CCW corner order: (fraction axis, ...)
_FACE_OF_NODE_CACHE = {}


def _classify_reference_nodes(r):
    """For each tensor node: ('v', corner) | ('e', face, fraction) | ('i', m)."""
    if r in _FACE_OF_NODE_CACHE:
        return _FACE_OF_NODE_CACHE[r]
    out = []
    interior = 0
    for jy in range(r + 1):
        for ix in range(r + 1):
            on_x = ix in (0, r)
            on_y = jy in (0, r)
            if on_x and on_y:
                corner = {(0, 0): 0, (r, 0): 1, (r, r): 2, (0, r): 3}[(ix, jy)]
                out.append(("v", corner, None))
            elif on_y and jy == 0:
                out.append(("e", 0, ix / r))  # along corner0 -> corner1
            elif on_x and ix == r:
                out.append(("e", 1, jy / r))  # along corner1 -> corner2
            elif on_y and jy == r:
                out.append(("e", 2, 1.0 - ix / r))  # along corner2 -> corner3
            elif on_x and ix == 0:
                out.append(("e", 3, 1.0 - jy / r))  # along corner3 -> corner0
            else:
                out.append(("i", interior, None))
                interior += 1
    _FACE_OF_NODE_CACHE[r] = out
    return out


@dataclass
class LocalIndexSet:
    """Global indices of one cell's space-time DoFs in local block order."""

    cell: int
    indices: np.ndarray

    def __post_init__(self):
        self._lo = int(self.indices.min())
        self._hi = int(self.indices.max())

    def __len__(self):
        return len(self.indices)


class DofLayout:
    """Per-level enumeration of velocity and pressure DoFs."""

    def __init__(self, mesh, g, r, k):
        if r < 2:
            raise ValueError(f"the mixed pair needs r >= 2, got r={r}")
        self.mesh = mesh
        self.g = g
        self.r = r
        self.k = k
        self.d = 2
        lvl = mesh.level(g)
        self.n_cells = lvl.n_cells
        self.n_p = pressure_dof_count(self.d, r - 1)
        self.n_vel_local = (r + 1) ** 2

        pairs, edges = lvl.edge_table()
        nv, ne, nc = lvl.n_vertices, len(edges), lvl.n_cells
        per_edge = r - 1
        per_cell = (r - 1) ** 2
        self.R = nv + ne * per_edge + nc * per_cell
        self.S = self.n_p * nc

        kinds = _classify_reference_nodes(r)
        cell_scalar = np.empty((nc, self.n_vel_local), dtype=np.int64)
        for c in range(nc):
            quad = lvl.cells[c]
            for loc, (kind, which, frac) in enumerate(kinds):
                if kind == "v":
                    cell_scalar[c, loc] = quad[which]
                elif kind == "e":
                    a, b = FACE_CORNERS[which]
                    u, w = quad[a], quad[b]
                    if u < w:
                        m = round(frac * r) - 1
                    else:
                        m = round((1.0 - frac) * r) - 1
                    e = pairs[(min(u, w), max(u, w))]
                    cell_scalar[c, loc] = nv + e * per_edge + m
                else:
                    cell_scalar[c, loc] = nv + ne * per_edge + c * per_cell + which
        self.cell_scalar_nodes = cell_scalar

        # canonical scalar-node coordinates (edge nodes from the lower vertex)
        coords = np.empty((self.R, 2))
        coords[:nv] = lvl.vertices
        for (u, w), e in pairs.items():
            for m in range(per_edge):
                frac = (m + 1) / r
                coords[nv + e * per_edge + m] = lvl.vertices[u] + frac * (
                    lvl.vertices[w] - lvl.vertices[u]
                )
        if per_cell:
            qb = QBasis(r)
            inner = [loc for loc, (kind, _, _) in enumerate(kinds) if kind == "i"]
            xi, eta = qb.nodes[inner][:, 0], qb.nodes[inner][:, 1]
            q1 = np.array(
                [(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta]
            )  # (4, n_inner): straight-quad map of the interior nodes
            for c in range(nc):
                pts = q1.T @ lvl.vertices[lvl.cells[c]]
                coords[cell_scalar[c, inner]] = pts
        self.node_coords = coords

        # ownership: scalar node -> min touching cell rank; pressure -> cell rank
        owner = np.full(self.R, np.iinfo(np.int32).max, dtype=np.int32)
        ranks = lvl.owner_rank
        for c in range(nc):
            np.minimum.at(owner, cell_scalar[c], ranks[c])
        self.scalar_node_owner = owner

        self.n_space = self.d * self.R + self.S
        self.n_total = (self.k + 1) * self.n_space

        # cell -> all space-time DoFs.  Two orderings are kept: the assembly
        # order follows the reference tensor nodes; the smoother/local-block
        # order sorts each velocity component block by global index (so a
        # single-cell mesh yields the identity mapping).
        nloc_s = self.d * self.n_vel_local + self.n_p
        self.n_loc_space = nloc_s
        self.n_loc = (k + 1) * nloc_s
        scalar_sorted = np.sort(cell_scalar, axis=1)
        cell_dofs = np.empty((nc, self.n_loc), dtype=np.int64)
        cell_dofs_ref = np.empty((nc, self.n_loc), dtype=np.int64)
        for l in range(k + 1):
            off = l * self.n_space
            for i in range(self.d):
                cols = slice(l * nloc_s + i * self.n_vel_local, l * nloc_s + (i + 1) * self.n_vel_local)
                cell_dofs[:, cols] = off + i * self.R + scalar_sorted
                cell_dofs_ref[:, cols] = off + i * self.R + cell_scalar
            pcols = off + self.d * self.R + (
                np.arange(nc)[:, None] * self.n_p + np.arange(self.n_p)[None, :]
            )
            cell_dofs[:, l * nloc_s + self.d * self.n_vel_local : (l + 1) * nloc_s] = pcols
            cell_dofs_ref[:, l * nloc_s + self.d * self.n_vel_local : (l + 1) * nloc_s] = pcols
        self.cell_dofs = cell_dofs
        self.cell_dofs_ref = cell_dofs_ref

        dof_owner = np.empty(self.n_total, dtype=np.int32)
        for l in range(k + 1):
            off = l * self.n_space
            for i in range(self.d):
                dof_owner[off + i * self.R : off + (i + 1) * self.R] = owner
            dof_owner[off + self.d * self.R : off + self.n_space] = np.repeat(
                ranks, self.n_p
            )
        self.dof_owner = dof_owner
        self._tables = None  # assembly caches a SpaceTables here

    # ----- index helpers -------------------------------------------------
    def velocity_index(self, l, i, node):
        return l * self.n_space + i * self.R + node

    def velocity_slice(self, l, i):
        off = l * self.n_space + i * self.R
        return slice(off, off + self.R)

    def pressure_slice(self, l):
        off = l * self.n_space + self.d * self.R
        return slice(off, off + self.S)

    def pressure_rows(self):
        """All pressure DoF indices across time blocks."""
        idx = []
        for l in range(self.k + 1):
            s = self.pressure_slice(l)
            idx.append(np.arange(s.start, s.stop))
        return np.concatenate(idx)

    def velocity_trace_size(self):
        """Length of one velocity snapshot (d * R)."""
        return self.d * self.R

    def zero_pressure_blocks(self, vec):
        """Copy of vec with every pressure block zeroed (the smoother rhs)."""
        out = vec.copy()
        for l in range(self.k + 1):
            out[self.pressure_slice(l)] = 0.0
        return out


def enumerate_dofs(mesh, g, r, k):
    """Build the DofLayout of level g."""
    return DofLayout(mesh, g, r, k)


def local_indices(layout, cell):
    """The cell's space-time DoFs in the local block ordering."""
    if not 0 <= cell < layout.n_cells:
        raise IndexError(f"cell {cell} not on level {layout.g}")
    return LocalIndexSet(cell=cell, indices=layout.cell_dofs[cell])


def gather(vec, idx):
    """Dense local vector of the DoFs in `idx`."""
    if idx._lo < 0 or idx._hi >= len(vec):
        raise IndexError(
            f"index set of cell {idx.cell} out of range for vector of length {len(vec)}"
        )
    return vec[idx.indices]


def scatter_overwrite(local, idx, vec):
    """Write `local` into `vec` at `idx`; plain overwrite, no accumulation."""
    if idx._lo < 0 or idx._hi >= len(vec):
        raise IndexError(
            f"index set of cell {idx.cell} out of range for vector of length {len(vec)}"
        )
    vec[idx.indices] = local


# ----- discrete field evaluation (used by transfers, benchmarks, tests) ----


def _invert_bilinear(corners, pt):
    """Reference coordinates of `pt` under the bilinear map of `corners`."""
    ref = np.array([0.5, 0.5])
    for _ in range(30):
        xi, eta = ref
        w = np.array([(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta])
        res = w @ corners - pt
        dxi = np.array([-(1 - eta), (1 - eta), eta, -eta]) @ corners
        deta = np.array([-(1 - xi), -xi, xi, (1 - xi)]) @ corners
        jac = np.column_stack([dxi, deta])
        step = np.linalg.solve(jac, res)
        ref = ref - step
        if np.abs(step).max() < 1e-14:
            break
    return ref


def locate_point(mesh, g, pt, tol=1e-10):
    """Find (cell, reference coords) containing the physical point."""
    lvl = mesh.level(g)
    corners = lvl.cell_corners()
    lo = corners.min(axis=1) - tol
    hi = corners.max(axis=1) + tol
    candidates = np.flatnonzero(
        (pt[0] >= lo[:, 0]) & (pt[0] <= hi[:, 0]) & (pt[1] >= lo[:, 1]) & (pt[1] <= hi[:, 1])
    )
    for c in candidates:
        ref = _invert_bilinear(corners[c], np.asarray(pt, dtype=float))
        if (-tol <= ref).all() and (ref <= 1 + tol).all():
            w = np.array(
                [
                    (1 - ref[0]) * (1 - ref[1]),
                    ref[0] * (1 - ref[1]),
                    ref[0] * ref[1],
                    (1 - ref[0]) * ref[1],
                ]
            )
            if np.linalg.norm(w @ corners[c] - pt) < 1e-8:
                return int(c), np.clip(ref, 0.0, 1.0)
    raise ValueError(f"point {pt} not found on level {g}")


def eval_scalar_function(layout, coeffs, points):
    """Evaluate a continuous Q_r function (R coefficients) at physical points."""
    qb = QBasis(layout.r)
    out = np.empty(len(points))
    for n, pt in enumerate(np.atleast_2d(points)):
        c, ref = locate_point(layout.mesh, layout.g, pt)
        out[n] = qb.eval(ref[None, :])[0] @ coeffs[layout.cell_scalar_nodes[c]]
    return out


def eval_pressure_function(layout, coeffs, points):
    """Evaluate a piecewise P_{r-1} pressure (S coefficients) at physical points."""
    pb = PDiscBasis(layout.r - 1)
    out = np.empty(len(points))
    for n, pt in enumerate(np.atleast_2d(points)):
        c, ref = locate_point(layout.mesh, layout.g, pt)
        out[n] = pb.eval(ref[None, :])[0] @ coeffs[c * layout.n_p : (c + 1) * layout.n_p]
    return out
