"""Rank-partitioned ghost-entry exchange for the distributed smoother.

Ranks are realized as threads of one process talking over typed message
channels; the wire behavior (who sends what, when) follows the two-phase
query/reply protocol literally, so the design ports to real message passing
unchanged.  Every rank owns the Jacobian rows of its DoFs and reads foreign
rows only through the per-neighbor maps built here:

* `build_exchange_map` discovers, once per static partition, the (row, col)
  pairs of foreign-owned entries each local cell block needs;
* `update_exchange_values` refreshes their values after a Jacobian update by
  one some-to-some query round and one reply round;
* `extract_defect_ghosts` completes the smoother defect on rank-boundary
  cells.

Neighbor discovery uses a shared immutable ownership table (the one
deliberate simplification at desk scale).  Messages are length-prefixed
little-endian arrays of (row: u64, col: u64, value: f64) triples, bit-stable
for replay.
"""

import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from .gmg import GmgPreconditioner, coarse_solve
from .solvers import fgmres
from .vanka import precompute_inverses

TRIPLE_DTYPE = np.dtype([("row", "<u8"), ("col", "<u8"), ("val", "<f8")])
PAIR_DTYPE = np.dtype([("idx", "<u8"), ("val", "<f8")])


class ProtocolError(RuntimeError):
    pass


def encode_triples(rows, cols, vals):
    arr = np.empty(len(rows), dtype=TRIPLE_DTYPE)
    arr["row"], arr["col"], arr["val"] = rows, cols, vals
    return np.uint64(len(arr)).tobytes() + arr.tobytes()


def decode_triples(payload):
    n = int(np.frombuffer(payload[:8], dtype="<u8")[0])
    arr = np.frombuffer(payload[8:], dtype=TRIPLE_DTYPE, count=n)
    return arr["row"].astype(np.int64), arr["col"].astype(np.int64), arr["val"].copy()


def encode_pairs(idx, vals):
    arr = np.empty(len(idx), dtype=PAIR_DTYPE)
    arr["idx"], arr["val"] = idx, vals
    return np.uint64(len(arr)).tobytes() + arr.tobytes()


def decode_pairs(payload):
    n = int(np.frombuffer(payload[:8], dtype="<u8")[0])
    arr = np.frombuffer(payload[8:], dtype=PAIR_DTYPE, count=n)
    return arr["idx"].astype(np.int64), arr["val"].copy()


class ThreadComm:
    """Point-to-point queues plus a barrier for a fixed rank group."""

    def __init__(self, n_ranks, trace=None):
        self.n_ranks = n_ranks
        self.inbox = [queue.Queue() for _ in range(n_ranks)]
        self._barrier = threading.Barrier(n_ranks)
        self.trace = trace  # list collecting (phase, src, dst, nbytes)
        self._trace_lock = threading.Lock()

    def send(self, src, dst, payload, phase=""):
        if self.trace is not None:
            with self._trace_lock:
                self.trace.append((phase, src, dst, len(payload)))
        self.inbox[dst].put((src, payload))

    def recv_count(self, dst, count):
        out = {}
        for _ in range(count):
            src, payload = self.inbox[dst].get()
            out[src] = payload
        return out

    def barrier(self):
        if self.n_ranks > 1:
            self._barrier.wait()


def dump_message_trace(trace, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("phase,from,to,bytes\n")
        for phase, src, dst, nbytes in trace:
            fh.write(f"{phase},{src},{dst},{nbytes}\n")


# --------------------------------------------------------------------------
# discovery (runs once per static partition) and the per-rank matrix view
# --------------------------------------------------------------------------


def build_exchange_map(layout, owned_cells, rank):
    """Discovery pass: foreign couplings of the owned cells' local blocks.

    For every owned cell, every cell DoF owned by another rank contributes the
    (foreign row, any cell column) pairs needed to complete that cell's local
    Jacobian; all are recorded with value zero under the owning rank's key.
    """
    maps = {}
    owner = layout.dof_owner
    for c in owned_cells:
        idx = layout.cell_dofs[c]
        owners = owner[idx]
        for a, q in zip(idx[owners != rank], owners[owners != rank]):
            dest = maps.setdefault(int(q), {})
            for b in idx:
                dest[(int(a), int(b))] = 0.0
    return maps


@dataclass
class RankLevel:
    """One rank's view of one level: owned rows plus the ghost-entry map."""

    rank: int
    layout: object
    owned_cells: np.ndarray
    owned_dofs: np.ndarray  # sorted
    rows: object  # csr row-slice J[owned_dofs, :]
    version: int
    exchange: dict = field(default_factory=dict)  # neighbor -> {(r, c): val}
    exchange_version: int = -1

    def row_position(self, dof):
        pos = int(np.searchsorted(self.owned_dofs, dof))
        if pos >= len(self.owned_dofs) or self.owned_dofs[pos] != dof:
            raise ProtocolError(f"rank {self.rank} does not own row {dof}")
        return pos

    def read_entries(self, row, cols):
        """Entries of an owned row at the given columns (0 where absent)."""
        pos = self.row_position(row)
        lo, hi = self.rows.indptr[pos], self.rows.indptr[pos + 1]
        rc = self.rows.indices[lo:hi]
        rv = self.rows.data[lo:hi]
        if len(rc) == 0:
            return np.zeros(len(cols)), np.zeros(len(cols), dtype=bool)
        where = np.minimum(np.searchsorted(rc, cols), len(rc) - 1)
        hit = rc[where] == cols
        return np.where(hit, rv[where], 0.0), hit

    def extract_block(self, idx):
        """Dense J_T over global indices `idx`, ghosts from the exchange map."""
        if self.exchange_version != self.version:
            raise ProtocolError(
                f"rank {self.rank}: exchange values stale "
                f"(have {self.exchange_version}, Jacobian {self.version})"
            )
        n = len(idx)
        out = np.empty((n, n))
        owner = self.layout.dof_owner
        for i, a in enumerate(idx):
            if owner[a] == self.rank:
                out[i], _ = self.read_entries(a, idx)
            else:
                q = int(owner[a])
                neigh = self.exchange.get(q)
                for j, b in enumerate(idx):
                    if neigh is None or (int(a), int(b)) not in neigh:
                        raise ProtocolError(
                            f"missing ghost entry (row {int(a)}, col {int(b)}, "
                            f"neighbor rank {q})"
                        )
                    out[i, j] = neigh[(int(a), int(b))]
        return out


def make_rank_level(op, layout, rank):
    """Row-partitioned view of one assembled level for one rank."""
    lvl = layout.mesh.level(layout.g)
    owned_cells = np.flatnonzero(lvl.owner_rank == rank)
    owned_dofs = np.flatnonzero(layout.dof_owner == rank)
    view = RankLevel(
        rank=rank,
        layout=layout,
        owned_cells=owned_cells,
        owned_dofs=owned_dofs,
        rows=op.csr[owned_dofs],
        version=op.version,
    )
    view.exchange = build_exchange_map(layout, owned_cells, rank)
    return view


def neighbor_tables(layout, n_ranks):
    """Outbound neighbor lists per rank and who queries whom (inbound)."""
    outbound = []
    lvl = layout.mesh.level(layout.g)
    for p in range(n_ranks):
        cells = np.flatnonzero(lvl.owner_rank == p)
        if len(cells):
            owners = np.unique(layout.dof_owner[layout.cell_dofs[cells].ravel()])
            outbound.append(sorted(int(q) for q in owners if q != p))
        else:
            outbound.append([])
    inbound = [[p for p in range(n_ranks) if q in outbound[p]] for q in range(n_ranks)]
    return outbound, inbound


def update_exchange_values(view, comm, outbound, inbound, phase_tag="update"):
    """Value refresh after a Jacobian update: query owners, fill, reply.

    Collective over the rank group; afterwards every owned cell's full J_T is
    available locally with no further communication.
    """
    rank = view.rank
    # phase 1: send the query sets (sorted keys, deterministic wire content)
    for q in outbound[rank]:
        keys = sorted(view.exchange.get(q, {}).keys())
        rows = np.array([k[0] for k in keys], dtype=np.uint64)
        cols = np.array([k[1] for k in keys], dtype=np.uint64)
        comm.send(rank, q, encode_triples(rows, cols, np.zeros(len(keys))),
                  phase=f"{phase_tag}:query")
    comm.barrier()
    # phase 2: owners fill the queried values from their rows
    queries = comm.recv_count(rank, len(inbound[rank]))
    for src in sorted(queries):
        rows, cols, _ = decode_triples(queries[src])
        vals = np.empty(len(rows))
        order = np.argsort(rows, kind="stable")
        for i in order:
            got, hit = view.read_entries(int(rows[i]), np.array([int(cols[i])]))
            if not hit[0]:
                raise ProtocolError(
                    f"rank {rank}: query ({int(rows[i])}, {int(cols[i])}) from "
                    f"rank {src} lies outside the owner's sparsity"
                )
            vals[i] = got[0]
        comm.send(rank, src, encode_triples(rows, cols, vals), phase=f"{phase_tag}:reply")
    comm.barrier()
    # phase 3: store the returned values
    replies = comm.recv_count(rank, len(outbound[rank]))
    for src, payload in replies.items():
        rows, cols, vals = decode_triples(payload)
        dest = view.exchange[src]
        for a, b, v in zip(rows, cols, vals):
            dest[(int(a), int(b))] = float(v)
    view.exchange_version = view.version
    comm.barrier()


# --------------------------------------------------------------------------
# vector plumbing: ghost defects and replicated-vector assembly
# --------------------------------------------------------------------------


def ghost_dof_set(layout, rank):
    """DoFs of owned cells minus owned DoFs."""
    lvl = layout.mesh.level(layout.g)
    cells = np.flatnonzero(lvl.owner_rank == rank)
    dofs = np.unique(layout.cell_dofs[cells].ravel()) if len(cells) else np.array([], dtype=np.int64)
    owned = np.flatnonzero(layout.dof_owner == rank)
    return np.setdiff1d(dofs, owned)


def sweep_authority(layout):
    """Rank holding each DoF's post-sweep value: the owner of the largest-id
    touching cell (the last writer of the sequential cell loop)."""
    n = layout.n_total
    touch_max = np.full(n, -1, dtype=np.int64)
    nc, nloc = layout.cell_dofs.shape
    np.maximum.at(touch_max, layout.cell_dofs.ravel(), np.repeat(np.arange(nc), nloc))
    lvl = layout.mesh.level(layout.g)
    return np.where(touch_max >= 0, lvl.owner_rank[np.maximum(touch_max, 0)], 0)


def _push_plan(layout, n_ranks, need_sets, have_of):
    """Static plan: rank p sends need_sets[q] ∩ have_of(p) to q."""
    sends = {p: [] for p in range(n_ranks)}
    counts = [0] * n_ranks
    for q in range(n_ranks):
        need = need_sets[q]
        if len(need) == 0:
            continue
        owner = have_of[need]
        for p in range(n_ranks):
            if p == q:
                continue
            part = need[owner == p]
            if len(part):
                sends[p].append((q, part))
                counts[q] += 1
    return {p: (sends[p], counts[p]) for p in range(n_ranks)}


def vector_plans(layout, n_ranks):
    """All static send/receive plans of one level.

    `defect`: owners push the ghost defect values boundary cells need.
    `replicate`: owners push their owned slices to everyone (replicated
    full vectors for the collective matvec).
    `sweep`: the last-writer authority pushes post-sweep values.
    """
    owner = layout.dof_owner
    ghost_sets = [ghost_dof_set(layout, q) for q in range(n_ranks)]
    defect = _push_plan(layout, n_ranks, ghost_sets, owner)

    all_dofs = np.arange(layout.n_total)
    everything = [all_dofs] * n_ranks
    replicate = _push_plan(layout, n_ranks, everything, owner)

    authority = sweep_authority(layout)
    sweep = _push_plan(layout, n_ranks, everything, authority)
    return {
        "defect": defect,
        "replicate": replicate,
        "sweep": sweep,
        "authority": authority,
    }


def push_values(rank, vec, comm, plan, phase_tag):
    """Execute one push plan; incoming values overwrite entries of `vec`."""
    sends, recv_count = plan[rank]
    for dst, idx in sends:
        comm.send(rank, dst, encode_pairs(idx, vec[idx]), phase=phase_tag)
    comm.barrier()
    out = vec
    for src, payload in comm.recv_count(rank, recv_count).items():
        idx, vals = decode_pairs(payload)
        out[idx] = vals
    comm.barrier()
    return out


def extract_defect_ghosts(view, d, r0, comm, plan, phase_tag="defect"):
    """Complete the defect (r_0 - J d) on all DoFs of owned cells.

    Each rank computes the owned rows of the defect and receives the ghost
    values (owned-cell DoFs it does not own) from their owners.
    """
    defect = np.zeros(len(d))
    defect[view.owned_dofs] = r0[view.owned_dofs] - view.rows @ d
    return push_values(view.rank, defect, comm, plan, phase_tag)


# --------------------------------------------------------------------------
# the distributed V-cycle engine and the SPMD linear-solve pipeline
# --------------------------------------------------------------------------


class _RowsOnlyOperator:
    """Operator facade: any attempt to touch non-owned rows is a hard error."""

    def __init__(self, view):
        self.view = view
        self.version = view.version
        self.shape = (view.layout.n_total,) * 2

    @property
    def csr(self):
        raise ProtocolError(
            f"rank {self.view.rank} attempted to read non-owned matrix rows"
        )


class DistributedGmg(GmgPreconditioner):
    """One rank's V-cycle: owned-row matvecs, protocol-fed Vanka blocks,
    last-writer reconciliation of sweeps, replicated coarse direct solve."""

    def __init__(self, views, caches, layouts, transfers, cfg, comm, plans,
                 coarse_op, mode="deterministic"):
        operators = [_RowsOnlyOperator(v) for v in views]
        super().__init__(operators, caches, layouts, transfers, cfg, mode=mode)
        self.views = views
        self.comm = comm
        self.plans = plans
        self.coarse_op = coarse_op
        self.rank = views[0].rank

    def _matvec(self, g, vec):
        view = self.views[g - 1]
        out = np.zeros(len(vec))
        out[view.owned_dofs] = view.rows @ vec
        return push_values(self.rank, out, self.comm, self.plans[g - 1]["replicate"],
                           phase_tag=f"matvec:L{g}")

    def _smooth(self, g, d, r, count):
        view = self.views[g - 1]
        layout = self.layouts[g - 1]
        cache = self.caches[g - 1]
        plans = self.plans[g - 1]
        r0 = layout.zero_pressure_blocks(r) if self.cfg.zero_pressure_rhs else r
        idx = layout.cell_dofs[view.owned_cells]
        for _ in range(count):
            defect = extract_defect_ghosts(view, d, r0, self.comm, plans["defect"],
                                           phase_tag=f"defect:L{g}")
            d_new = d.copy()
            if len(view.owned_cells):
                upd = d[idx] + self.cfg.damping * np.einsum(
                    "cij,cj->ci", cache.inverses, defect[idx]
                )
                d_new[idx.ravel()] = upd.ravel()  # ascending local cell order
            # the owner of the globally last touching cell pushes the value
            d = push_values(self.rank, d_new, self.comm, plans["sweep"],
                            phase_tag=f"sweep:L{g}")
        return d

    def _coarse(self, rhs):
        # level `coarse_level` is replicated on every rank (documented
        # desk-scale deviation): identical local factorization and solve
        return coarse_solve(self.coarse_op, rhs, self._coarse_cache)


def build_rank_engine(rank, comm, ops, layouts, transfers, cfg, n_ranks,
                      mode="deterministic"):
    """Views, exchanged ghost values, Vanka caches, and the engine of a rank."""
    views, caches, plans = [], [], []
    for op, layout in zip(ops, layouts):
        view = make_rank_level(op, layout, rank)
        outbound, inbound = neighbor_tables(layout, n_ranks)
        update_exchange_values(view, comm, outbound, inbound,
                               phase_tag=f"update:L{layout.g}")
        if len(view.owned_cells):
            blocks = np.stack(
                [view.extract_block(layout.cell_dofs[c]) for c in view.owned_cells]
            )
        else:
            blocks = np.zeros((0, layout.n_loc, layout.n_loc))
        caches.append(precompute_inverses(op, layout, cells=view.owned_cells, blocks=blocks))
        views.append(view)
        plans.append(vector_plans(layout, n_ranks))
    engine = DistributedGmg(
        views, caches, layouts, transfers, cfg, comm, plans,
        coarse_op=ops[cfg.coarse_level - 1], mode=mode,
    )
    return engine


def _linear_solve_rank(rank, comm, ops, layouts, transfers, cfg, krylov_cfg,
                       rhs, n_ranks, mode):
    engine = build_rank_engine(rank, comm, ops, layouts, transfers, cfg, n_ranks, mode)
    G = len(ops)
    result = fgmres(lambda v: engine._matvec(G, v), rhs, engine.apply, krylov_cfg)
    return {
        "x": result.x,
        "iterations": result.iterations,
        "engine": engine,
    }


def distributed_linear_solve(ops, layouts, transfers, cfg, krylov_cfg, rhs,
                             n_ranks, mode="deterministic", trace=None):
    """SPMD FGMRES+GMG solve of one frozen Newton system on n_ranks threads."""
    return run_spmd(
        n_ranks, _linear_solve_rank, ops, layouts, transfers, cfg, krylov_cfg,
        rhs, n_ranks, mode, trace=trace,
    )


def run_spmd(n_ranks, fn, *args, trace=None):
    """Run fn(rank, comm, *args) on n_ranks threads; returns per-rank results."""
    comm = ThreadComm(n_ranks, trace=trace)
    results = [None] * n_ranks
    errors = [None] * n_ranks

    def worker(rank):
        try:
            results[rank] = fn(rank, comm, *args)
        except BaseException as exc:
            errors[rank] = exc
            comm._barrier.abort()

    threads = [threading.Thread(target=worker, args=(p,)) for p in range(n_ranks)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for exc in errors:
        if exc is not None:
            raise exc
    return results
