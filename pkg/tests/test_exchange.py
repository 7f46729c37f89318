import numpy as np
import pytest

from stmg.assembly import ProblemData, assemble_jacobian
from stmg.dofs import enumerate_dofs
from stmg.exchange import (
    ProtocolError,
    ThreadComm,
    build_exchange_map,
    build_rank_engine,
    decode_pairs,
    decode_triples,
    dump_message_trace,
    encode_pairs,
    encode_triples,
    extract_defect_ghosts,
    ghost_dof_set,
    make_rank_level,
    neighbor_tables,
    run_spmd,
    sweep_authority,
    update_exchange_values,
    vector_plans,
)
from stmg.gmg import GmgConfig, build_prolongation
from stmg.mesh import ChannelGeometry, build_hierarchy, generate_channel_mesh, partition
from stmg.vanka import extract_all_local_jacobians


def poiseuille_g(p, t):
    return np.column_stack([p[:, 1] * (1 - p[:, 1]), np.zeros(len(p))])


def two_cell_setup(k=0):
    mesh = partition(
        generate_channel_mesh(ChannelGeometry(2.0, 1.0, cylinder_diameter=0.0), 1), 2
    )
    layout = enumerate_dofs(mesh, 1, r=2, k=k)
    data = ProblemData(nu=0.05, tau=0.1, g=poiseuille_g, convection=False)
    op = assemble_jacobian(np.zeros(layout.n_total), data, layout)
    return mesh, layout, op


def test_serialization_bit_stable():
    rows = np.array([3, 5], dtype=np.uint64)
    cols = np.array([7, 2], dtype=np.uint64)
    vals = np.array([1.25, -3.5e-17])
    payload = encode_triples(rows, cols, vals)
    assert payload == encode_triples(rows, cols, vals)
    r2, c2, v2 = decode_triples(payload)
    assert (r2 == [3, 5]).all() and (c2 == [7, 2]).all() and (v2 == vals).all()
    p2 = encode_pairs(np.array([9], dtype=np.uint64), np.array([0.1]))
    i, v = decode_pairs(p2)
    assert i[0] == 9 and v[0] == 0.1


class TestBuildMap:
    def test_single_rank_empty(self):
        mesh = build_hierarchy(ChannelGeometry(1.0, 1.0, cylinder_diameter=0.0), 2, 2)
        for g in (1, 2):
            layout = enumerate_dofs(mesh, g, r=2, k=0)
            cells = np.arange(layout.n_cells)
            assert build_exchange_map(layout, cells, 0) == {}

    def test_two_adjacent_cells_counts(self):
        # rank 1 owns one cell; the 3 shared-face nodes per component belong
        # to rank 0, so its map couples those 6 foreign DoFs with all 21 local
        # cell DoFs
        mesh, layout, _ = two_cell_setup(k=0)
        lvl = mesh.level(1)
        for rank in (0, 1):
            cells = np.flatnonzero(lvl.owner_rank == rank)
            maps = build_exchange_map(layout, cells, rank)
            if rank == 0 and not maps:
                continue  # the min-rank rule can make rank 0 self-sufficient
            if rank == 1:
                assert list(maps.keys()) == [0]
                assert len(maps[0]) == 6 * 21

    def test_brute_force_cross_rank_couplings(self):
        mesh, layout, _ = two_cell_setup(k=0)
        lvl = mesh.level(1)
        for rank in (0, 1):
            cells = np.flatnonzero(lvl.owner_rank == rank)
            maps = build_exchange_map(layout, cells, rank)
            expect = set()
            for c in cells:
                idx = layout.cell_dofs[c]
                for a in idx:
                    if layout.dof_owner[a] != rank:
                        for b in idx:
                            expect.add((layout.dof_owner[a], int(a), int(b)))
            got = {(q, a, b) for q, m in maps.items() for (a, b) in m}
            assert got == expect

    def test_keys_subset_of_sparsity(self):
        mesh, layout, op = two_cell_setup(k=1)
        lvl = mesh.level(1)
        csr = op.csr
        pattern = set()
        for row in range(csr.shape[0]):
            for col in csr.indices[csr.indptr[row] : csr.indptr[row + 1]]:
                pattern.add((row, int(col)))
        prows = set(layout.pressure_rows().tolist())
        for rank in (0, 1):
            cells = np.flatnonzero(lvl.owner_rank == rank)
            maps = build_exchange_map(layout, cells, rank)
            for m in maps.values():
                for (a, b) in m:
                    # pressure-pressure couplings are structural zeros and
                    # legitimately absent from the assembled pattern
                    if a in prows and b in prows:
                        continue
                    assert (a, b) in pattern


class TestUpdateValues:
    def test_single_rank_no_messages(self):
        mesh = build_hierarchy(ChannelGeometry(1.0, 1.0, cylinder_diameter=0.0), 2, 1)
        layout = enumerate_dofs(mesh, 1, r=2, k=0)
        data = ProblemData(nu=0.05, tau=0.1, convection=False)
        op = assemble_jacobian(np.zeros(layout.n_total), data, layout)
        trace = []

        def worker(rank, comm):
            view = make_rank_level(op, layout, rank)
            outbound, inbound = neighbor_tables(layout, 1)
            update_exchange_values(view, comm, outbound, inbound)
            return view

        run_spmd(1, worker, trace=trace)
        assert trace == []

    def test_values_match_sequential_assembly(self):
        mesh, layout, op = two_cell_setup(k=0)
        dense = op.csr.toarray()

        def worker(rank, comm):
            view = make_rank_level(op, layout, rank)
            outbound, inbound = neighbor_tables(layout, 2)
            update_exchange_values(view, comm, outbound, inbound)
            return view

        views = run_spmd(2, worker)
        for view in views:
            for q, m in view.exchange.items():
                for (a, b), v in m.items():
                    assert v == dense[a, b]

    def test_message_count_bound(self):
        mesh, layout, op = two_cell_setup(k=0)
        outbound, inbound = neighbor_tables(layout, 2)
        n_directed = sum(len(o) for o in outbound)
        trace = []

        def worker(rank, comm):
            view = make_rank_level(op, layout, rank)
            update_exchange_values(view, comm, outbound, inbound)

        run_spmd(2, worker, trace=trace)
        assert len(trace) == 2 * n_directed

    def test_idempotent(self):
        mesh, layout, op = two_cell_setup(k=1)

        def worker(rank, comm):
            view = make_rank_level(op, layout, rank)
            outbound, inbound = neighbor_tables(layout, 2)
            update_exchange_values(view, comm, outbound, inbound)
            first = {q: dict(m) for q, m in view.exchange.items()}
            update_exchange_values(view, comm, outbound, inbound)
            return first, view.exchange

        for first, second in run_spmd(2, worker):
            assert first == second

    def test_query_outside_sparsity_fatal(self):
        mesh, layout, op = two_cell_setup(k=0)
        # a velocity DoF interior to cell 0 never couples with a DoF
        # exclusive to cell 1
        only0 = np.setdiff1d(layout.cell_dofs[0], layout.cell_dofs[1])
        only1 = np.setdiff1d(layout.cell_dofs[1], layout.cell_dofs[0])
        row = int(only0[layout.dof_owner[only0] == 0][0])
        col = int(only1[0])

        def worker(rank, comm):
            view = make_rank_level(op, layout, rank)
            if rank == 1:
                target = 0
                view.exchange.setdefault(target, {})[(row, col)] = 0.0
            outbound, inbound = neighbor_tables(layout, 2)
            update_exchange_values(view, comm, outbound, inbound)

        with pytest.raises(ProtocolError, match="outside the owner's sparsity"):
            run_spmd(2, worker)


class TestDefectGhosts:
    def test_ghost_set_definition(self):
        mesh, layout, _ = two_cell_setup(k=0)
        for rank in (0, 1):
            ghosts = ghost_dof_set(layout, rank)
            lvl = mesh.level(1)
            cells = np.flatnonzero(lvl.owner_rank == rank)
            dofs = np.unique(layout.cell_dofs[cells].ravel())
            owned = np.flatnonzero(layout.dof_owner == rank)
            assert (np.sort(ghosts) == np.setdiff1d(dofs, owned)).all()

    def test_single_rank_identity(self):
        mesh = build_hierarchy(ChannelGeometry(1.0, 1.0, cylinder_diameter=0.0), 2, 1)
        layout = enumerate_dofs(mesh, 1, r=2, k=0)
        data = ProblemData(nu=0.05, tau=0.1, convection=False)
        op = assemble_jacobian(np.zeros(layout.n_total), data, layout)
        rng = np.random.default_rng(0)
        d = rng.normal(size=layout.n_total)
        r0 = rng.normal(size=layout.n_total)

        def worker(rank, comm):
            view = make_rank_level(op, layout, rank)
            plan = vector_plans(layout, 1)["defect"]
            return extract_defect_ghosts(view, d, r0, comm, plan)

        [defect] = run_spmd(1, worker)
        assert (defect == r0 - op.csr @ d).all()

    def test_distributed_matches_sequential(self):
        mesh, layout, op = two_cell_setup(k=1)
        rng = np.random.default_rng(1)
        d = rng.normal(size=layout.n_total)
        r0 = rng.normal(size=layout.n_total)
        seq = r0 - op.csr @ d

        def worker(rank, comm):
            view = make_rank_level(op, layout, rank)
            plan = vector_plans(layout, 2)["defect"]
            return view, extract_defect_ghosts(view, d, r0, comm, plan)

        for view, defect in run_spmd(2, worker):
            cell_dofs = np.unique(layout.cell_dofs[view.owned_cells].ravel())
            assert np.abs(defect[cell_dofs] - seq[cell_dofs]).max() <= 1e-13


class TestEquivalence:
    def test_blocks_equal_sequential_for_partitions(self):
        base = build_hierarchy(ChannelGeometry(1.0, 1.0, cylinder_diameter=0.0), 2, 2)
        for P in (1, 2, 4):
            mesh = partition(base, P)
            layouts = [enumerate_dofs(mesh, g, r=2, k=0) for g in (1, 2)]
            transfers = [build_prolongation(layouts[0], layouts[1])]
            data = ProblemData(nu=0.05, tau=0.1, g=poiseuille_g, convection=False)
            ops = [assemble_jacobian(np.zeros(l.n_total), data, l) for l in layouts]
            seq_blocks = [extract_all_local_jacobians(op, l) for op, l in zip(ops, layouts)]

            def worker(rank, comm):
                return build_rank_engine(
                    rank, comm, ops, layouts, transfers, GmgConfig(), P
                )

            for engine in run_spmd(P, worker):
                for g in (1, 2):
                    view = engine.views[g - 1]
                    for c in view.owned_cells:
                        got = view.extract_block(layouts[g - 1].cell_dofs[c])
                        assert (got == seq_blocks[g - 1][c]).all()

    def test_rows_only_facade(self):
        mesh, layout, op = two_cell_setup(k=0)

        def worker(rank, comm):
            view = make_rank_level(op, layout, rank)
            outbound, inbound = neighbor_tables(layout, 2)
            update_exchange_values(view, comm, outbound, inbound)
            from stmg.exchange import _RowsOnlyOperator

            facade = _RowsOnlyOperator(view)
            with pytest.raises(ProtocolError):
                _ = facade.csr
            return True

        assert all(run_spmd(2, worker))


def test_sweep_authority_is_last_writer():
    mesh, layout, _ = two_cell_setup(k=0)
    authority = sweep_authority(layout)
    lvl = mesh.level(1)
    # DoFs of the shared face are touched by both cells; cell 1 writes last
    shared = np.intersect1d(layout.cell_dofs[0], layout.cell_dofs[1])
    assert (authority[shared] == lvl.owner_rank[1]).all()


def test_trace_dump(tmp_path):
    trace = [("update:query", 0, 1, 64), ("update:reply", 1, 0, 64)]
    dump_message_trace(trace, tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().strip().split("\n")
    assert lines[0] == "phase,from,to,bytes"
    assert lines[1] == "update:query,0,1,64"
