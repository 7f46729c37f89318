import numpy as np
import pytest
import scipy.sparse as sp

from stmg.assembly import ProblemData, SparseOperator, assemble_jacobian
from stmg.dofs import (
    enumerate_dofs,
    eval_pressure_function,
    eval_scalar_function,
)
from stmg.gmg import (
    GmgConfig,
    GmgPreconditioner,
    build_hierarchy_caches,
    build_prolongation,
    coarse_solve,
    restrict,
)
from stmg.mesh import ChannelGeometry, generate_channel_mesh, refine_uniform


def poiseuille_g(p, t):
    return np.column_stack([p[:, 1] * (1 - p[:, 1]), 0 * p[:, 0]])


def two_level_setup(n0=2, k=1, nu=0.05):
    mesh = refine_uniform(
        generate_channel_mesh(ChannelGeometry(1.0, 1.0, cylinder_diameter=0.0), n0)
    )
    layouts = [enumerate_dofs(mesh, g, r=2, k=k) for g in (1, 2)]
    transfer = build_prolongation(layouts[0], layouts[1])
    data = ProblemData(nu=nu, tau=0.1, g=poiseuille_g, convection=False)
    ops = [assemble_jacobian(np.zeros(l.n_total), data, l) for l in layouts]
    return layouts, transfer, ops


@pytest.fixture(scope="module")
def two_level():
    return two_level_setup()


class TestProlongation:
    def test_constant_preserved(self, two_level):
        layouts, T, _ = two_level
        const = np.zeros(layouts[0].n_total)
        for l in range(2):
            for i in range(2):
                const[layouts[0].velocity_slice(l, i)] = 3.5
        fine = T.prolongate(const)
        for l in range(2):
            for i in range(2):
                assert np.allclose(fine[layouts[1].velocity_slice(l, i)], 3.5, atol=1e-13)

    def test_velocity_row_sums_one(self, two_level):
        layouts, T, _ = two_level
        rs = np.asarray(T.P.sum(axis=1)).ravel()
        for l in range(2):
            for i in range(2):
                s = layouts[1].velocity_slice(l, i)
                assert np.allclose(rs[s.start : s.stop], 1.0, atol=1e-13)

    def test_point_evaluation_oracle(self, two_level):
        # random coarse function: the prolongated fine function is the same
        # function, checked at 50 random physical points
        layouts, T, _ = two_level
        rng = np.random.default_rng(7)
        Xc = rng.normal(size=layouts[0].n_total)
        Xf = T.prolongate(Xc)
        pts = rng.random((50, 2))
        cv = eval_scalar_function(layouts[0], Xc[layouts[0].velocity_slice(0, 1)], pts)
        fv = eval_scalar_function(layouts[1], Xf[layouts[1].velocity_slice(0, 1)], pts)
        assert np.abs(cv - fv).max() <= 1e-12
        cp = eval_pressure_function(layouts[0], Xc[layouts[0].pressure_slice(1)], pts)
        fp = eval_pressure_function(layouts[1], Xf[layouts[1].pressure_slice(1)], pts)
        assert np.abs(cp - fp).max() <= 1e-12

    def test_rejects_mismatched_layouts(self, two_level):
        layouts, _, _ = two_level
        with pytest.raises(ValueError):
            build_prolongation(layouts[1], layouts[0])


class TestRestriction:
    def test_adjoint_identity(self, two_level):
        layouts, T, _ = two_level
        rng = np.random.default_rng(8)
        for _ in range(20):
            a = rng.normal(size=layouts[1].n_total)
            b = rng.normal(size=layouts[0].n_total)
            lhs = np.dot(restrict(T, a), b)
            rhs = np.dot(a, T.prolongate(b))
            assert abs(lhs - rhs) <= 1e-13 * max(1.0, abs(rhs))

    def test_zero_maps_to_zero(self, two_level):
        layouts, T, _ = two_level
        assert (restrict(T, np.zeros(layouts[1].n_total)) == 0).all()

    def test_galerkin_image_matches_dense(self, two_level):
        layouts, T, _ = two_level
        rng = np.random.default_rng(9)
        c = rng.normal(size=layouts[0].n_total)
        dense = T.P.toarray()
        assert np.allclose(restrict(T, T.prolongate(c)), dense.T @ (dense @ c), atol=1e-11)

    def test_state_restriction_exact_on_nested(self, two_level):
        layouts, T, _ = two_level
        rng = np.random.default_rng(10)
        Xc = rng.normal(size=layouts[0].n_total)
        assert np.abs(T.restrict_state(T.prolongate(Xc)) - Xc).max() <= 1e-12


class TestCoarseSolve:
    def test_identity_matrix(self):
        layout = object()
        op = SparseOperator(csr=sp.identity(10, format="csr"), layout=layout)
        r = np.arange(10.0)
        assert np.allclose(coarse_solve(op, r), r, atol=1e-14)

    def test_dense_lu_oracle(self, two_level):
        layouts, _, ops = two_level
        rng = np.random.default_rng(11)
        r = rng.normal(size=layouts[0].n_total)
        d = coarse_solve(ops[0], r)
        oracle = np.linalg.solve(ops[0].csr.toarray(), r)
        assert np.linalg.norm(d - oracle) <= 1e-10 * np.linalg.norm(oracle)
        assert np.linalg.norm(ops[0].csr @ d - r) <= 1e-12 * np.linalg.norm(r)

    def test_refactorization_guard(self, two_level):
        layouts, _, ops = two_level
        cache = {}
        r = np.ones(layouts[0].n_total)
        coarse_solve(ops[0], r, cache)
        v1 = cache["version"]
        scaled = SparseOperator(csr=2.0 * ops[0].csr, layout=layouts[0])
        d = coarse_solve(scaled, r, cache)
        assert cache["version"] != v1
        assert np.linalg.norm(scaled.csr @ d - r) <= 1e-10 * np.linalg.norm(r)

    def test_singular_fatal(self):
        op = SparseOperator(csr=sp.csr_matrix((5, 5)), layout=None)
        with pytest.raises(RuntimeError, match="singular"):
            coarse_solve(op, np.ones(5))


class TestVCycle:
    def test_single_level_is_direct_solve(self):
        mesh = generate_channel_mesh(ChannelGeometry(1.0, 1.0, cylinder_diameter=0.0), 2)
        layout = enumerate_dofs(mesh, 1, r=2, k=1)
        data = ProblemData(nu=0.05, tau=0.1, g=poiseuille_g, convection=False)
        op = assemble_jacobian(np.zeros(layout.n_total), data, layout)
        pre = GmgPreconditioner([op], build_hierarchy_caches([op], [layout]), [layout], [], GmgConfig())
        rng = np.random.default_rng(12)
        r = rng.normal(size=layout.n_total)
        d = pre.apply(r)
        assert np.linalg.norm(op.csr @ d - r) <= 1e-12 * np.linalg.norm(r)

    def test_two_level_contraction(self, two_level):
        layouts, T, ops = two_level
        caches = build_hierarchy_caches(ops, layouts)
        pre = GmgPreconditioner(ops, caches, layouts, [T], GmgConfig(1, 1, 1.0))
        J = ops[1].csr
        rng = np.random.default_rng(13)
        r = rng.normal(size=layouts[1].n_total)
        xstar = np.linalg.solve(J.toarray(), r)
        x = np.zeros_like(r)
        errs = [np.linalg.norm(x - xstar)]
        for _ in range(10):
            x = x + pre.apply(r - J @ x)
            errs.append(np.linalg.norm(x - xstar))
        rates = [errs[i + 1] / errs[i] for i in range(10)]
        assert max(rates) < 1.0

    def test_v44_contracts_at_least_as_fast_as_v11(self, two_level):
        layouts, T, ops = two_level
        caches = build_hierarchy_caches(ops, layouts)
        J = ops[1].csr
        rng = np.random.default_rng(14)
        r = rng.normal(size=layouts[1].n_total)
        xstar = np.linalg.solve(J.toarray(), r)

        def contraction(cfg):
            pre = GmgPreconditioner(ops, caches, layouts, [T], cfg)
            x = np.zeros_like(r)
            e0 = np.linalg.norm(x - xstar)
            for _ in range(6):
                x = x + pre.apply(r - J @ x)
            return (np.linalg.norm(x - xstar) / e0) ** (1 / 6)

        assert contraction(GmgConfig(4, 4)) <= contraction(GmgConfig(1, 1))

    def test_zero_rhs_zero_correction(self, two_level):
        layouts, T, ops = two_level
        caches = build_hierarchy_caches(ops, layouts)
        pre = GmgPreconditioner(ops, caches, layouts, [T], GmgConfig())
        assert (pre.apply(np.zeros(layouts[1].n_total)) == 0).all()

    def test_preconditioner_is_linear(self, two_level):
        layouts, T, ops = two_level
        caches = build_hierarchy_caches(ops, layouts)
        pre = GmgPreconditioner(ops, caches, layouts, [T], GmgConfig(2, 1, 0.9))
        rng = np.random.default_rng(15)
        a = rng.normal(size=layouts[1].n_total)
        b = rng.normal(size=layouts[1].n_total)
        lin = pre.apply(2.0 * a - 0.5 * b)
        sup = 2.0 * pre.apply(a) - 0.5 * pre.apply(b)
        scale = max(np.abs(lin).max(), 1.0)
        assert np.abs(lin - sup).max() <= 1e-12 * scale

    def test_algorithm_trace(self):
        # three levels: exact visiting order G, G-1, 1, G-1, G with the
        # configured sweep counts
        mesh = generate_channel_mesh(ChannelGeometry(1.0, 1.0, cylinder_diameter=0.0), 1)
        mesh = refine_uniform(refine_uniform(mesh))
        layouts = [enumerate_dofs(mesh, g, r=2, k=0) for g in (1, 2, 3)]
        transfers = [build_prolongation(layouts[i], layouts[i + 1]) for i in range(2)]
        data = ProblemData(nu=0.05, tau=0.1, g=poiseuille_g, convection=False)
        ops = [assemble_jacobian(np.zeros(l.n_total), data, l) for l in layouts]
        caches = build_hierarchy_caches(ops, layouts)
        pre = GmgPreconditioner(ops, caches, layouts, transfers, GmgConfig(2, 3))
        pre.trace = []
        pre.apply(np.ones(layouts[2].n_total))
        assert pre.trace == [
            ("pre", 3, 2),
            ("pre", 2, 2),
            ("coarse", 1, 0),
            ("post", 2, 3),
            ("post", 3, 3),
        ]

    def test_diagnostics_csv_lines(self, two_level):
        layouts, T, ops = two_level
        caches = build_hierarchy_caches(ops, layouts)
        lines = []
        pre = GmgPreconditioner(
            ops, caches, layouts, [T], GmgConfig(),
            diag=lambda g, a, b: lines.append(f"{g},{a:.6e},{b:.6e}"),
        )
        pre.apply(np.ones(layouts[1].n_total))
        assert len(lines) == 1 and lines[0].startswith("2,")


def test_gmg_config_validation():
    with pytest.raises(ValueError):
        GmgConfig(pre_smooth=0, post_smooth=0)
    with pytest.raises(ValueError):
        GmgConfig(cycle="W")
    GmgConfig(pre_smooth=0, post_smooth=1)
