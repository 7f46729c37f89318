import numpy as np
import pytest

from stmg.assembly import (
    ProblemData,
    assemble_jacobian,
    assemble_level_jacobians,
    assemble_residual,
    dump_matrix_market,
    dump_vector,
)
from stmg.dofs import enumerate_dofs
from stmg.mesh import ChannelGeometry, generate_channel_mesh, refine_uniform


def four_cell_mesh():
    return refine_uniform(
        generate_channel_mesh(ChannelGeometry(1.0, 1.0, cylinder_diameter=0.0), 1)
    )


def poiseuille_g(p, t):
    return np.column_stack([p[:, 1] * (1 - p[:, 1]), 0 * p[:, 0]])


def smooth_f(p, t):
    return np.column_stack([np.sin(p[:, 0] + t), 0.5 * p[:, 1]])


@pytest.fixture(scope="module")
def layouts():
    mesh = four_cell_mesh()
    return {k: enumerate_dofs(mesh, 2, r=2, k=k) for k in (0, 1)}


class TestResidual:
    def test_zero_state_zero_data(self, layouts):
        for layout in layouts.values():
            data = ProblemData(nu=0.01, tau=0.2)
            F = assemble_residual(np.zeros(layout.n_total), data, layout)
            assert (F == 0).all()

    def test_stokes_direct_solve(self, layouts):
        # Dense LU oracle: in the linear (no convection) regime the residual
        # at the solved state must vanish.
        layout = layouts[1]
        data = ProblemData(
            nu=0.05, tau=0.1, g=poiseuille_g, v_minus=np.zeros(2 * layout.R),
            convection=False,
        )
        X0 = np.zeros(layout.n_total)
        F0 = assemble_residual(X0, data, layout)
        J = assemble_jacobian(X0, data, layout)
        X = np.linalg.solve(J.csr.toarray(), -F0)
        assert np.abs(assemble_residual(X, data, layout)).max() <= 1e-10

    def test_residual_quadratic_in_state(self, layouts):
        layout = layouts[1]
        rng = np.random.default_rng(1)
        data = ProblemData(
            nu=0.05, tau=0.1, g=poiseuille_g, v_minus=0.1 * rng.normal(size=2 * layout.R)
        )
        X = rng.normal(size=layout.n_total)
        F = {a: assemble_residual(a * X, data, layout) for a in (0.0, 1.0, 2.0, 3.0)}
        quad = (F[2.0] - 2 * F[1.0] + F[0.0]) / 2
        lin = F[1.0] - F[0.0] - quad
        pred = F[0.0] + 3 * lin + 9 * quad
        err = np.abs(pred - F[3.0]).max() / (1 + np.abs(F[3.0]).max())
        assert err < 1e-12

    def test_galilean_constant_field(self, layouts):
        # nu = 0, constant divergence-free state with matching datum and
        # incoming trace: every term of the residual vanishes.
        layout = layouts[1]
        c = np.array([0.7, -0.3])
        g = lambda p, t: np.tile(c, (len(p), 1))
        vm = np.concatenate([np.full(layout.R, c[0]), np.full(layout.R, c[1])])
        data = ProblemData(nu=0.0, tau=0.25, g=g, v_minus=vm)
        X = np.zeros(layout.n_total)
        for l in range(layout.k + 1):
            for i in range(2):
                X[layout.velocity_slice(l, i)] = c[i]
        F = assemble_residual(X, data, layout)
        assert np.abs(F).max() < 1e-12

    def test_data_homogeneity(self, layouts):
        # F(0) is linear in (f, g, v_minus).
        layout = layouts[0]
        rng = np.random.default_rng(3)
        vm = rng.normal(size=2 * layout.R)
        make = lambda s: ProblemData(
            nu=0.01,
            tau=0.2,
            f=lambda p, t: s * smooth_f(p, t),
            g=lambda p, t: s * poiseuille_g(p, t),
            v_minus=s * vm,
        )
        X0 = np.zeros(layout.n_total)
        F1 = assemble_residual(X0, make(1.0), layout)
        F3 = assemble_residual(X0, make(3.0), layout)
        assert np.allclose(F3, 3 * F1, atol=1e-13, rtol=1e-12)

    def test_nonfinite_state_fatal(self, layouts):
        layout = layouts[0]
        X = np.zeros(layout.n_total)
        X[5] = np.nan
        with pytest.raises(FloatingPointError, match="cell"):
            assemble_residual(X, ProblemData(nu=0.01, tau=0.1), layout)


class TestJacobian:
    @pytest.mark.parametrize("k", [0, 1])
    def test_matches_central_differences(self, layouts, k):
        layout = layouts[k]
        rng = np.random.default_rng(42)
        data = ProblemData(
            nu=0.01,
            tau=0.2,
            f=smooth_f,
            g=lambda p, t: poiseuille_g(p, t) * (1 + 0.1 * t),
            v_minus=0.1 * rng.normal(size=2 * layout.R),
        )
        eps = 1e-6
        for _ in range(3):
            X = 0.3 * rng.normal(size=layout.n_total)
            J = assemble_jacobian(X, data, layout)
            for j in rng.choice(layout.n_total, size=25, replace=False):
                e = np.zeros_like(X)
                e[j] = eps
                fd = (
                    assemble_residual(X + e, data, layout)
                    - assemble_residual(X - e, data, layout)
                ) / (2 * eps)
                col = J.csr[:, [j]].toarray().ravel()
                assert np.linalg.norm(fd - col) <= 1e-6 * (1 + np.linalg.norm(col))

    def test_convection_vanishes_at_zero_state(self, layouts):
        layout = layouts[1]
        X0 = np.zeros(layout.n_total)
        base = dict(nu=0.05, tau=0.1, g=poiseuille_g)
        J_ns = assemble_jacobian(X0, ProblemData(convection=True, **base), layout)
        J_st = assemble_jacobian(X0, ProblemData(convection=False, **base), layout)
        assert abs(J_ns.csr - J_st.csr).max() == 0.0

    def test_pressure_pressure_structurally_zero(self, layouts):
        layout = layouts[1]
        rng = np.random.default_rng(0)
        X = rng.normal(size=layout.n_total)
        J = assemble_jacobian(X, ProblemData(nu=0.01, tau=0.1, g=poiseuille_g), layout)
        prows = layout.pressure_rows()
        assert J.csr[prows][:, prows].nnz == 0

    def test_sparsity_structurally_symmetric(self, layouts):
        layout = layouts[1]
        J = assemble_jacobian(
            np.ones(layout.n_total), ProblemData(nu=0.01, tau=0.1), layout
        )
        pattern = J.csr.copy()
        pattern.data[:] = 1.0
        assert (pattern != pattern.T).nnz == 0

    def test_versions_increase(self, layouts):
        layout = layouts[0]
        data = ProblemData(nu=0.01, tau=0.1)
        X = np.zeros(layout.n_total)
        a = assemble_jacobian(X, data, layout)
        b = assemble_jacobian(X, data, layout)
        assert b.version > a.version


class TestLevels:
    def test_single_level_matches_direct(self):
        mesh = generate_channel_mesh(ChannelGeometry(1.0, 1.0, cylinder_diameter=0.0), 1)
        layout = enumerate_dofs(mesh, 1, r=2, k=0)
        data = ProblemData(nu=0.02, tau=0.1, g=poiseuille_g)
        X = np.random.default_rng(2).normal(size=layout.n_total)
        [J] = assemble_level_jacobians([X], data, [layout])
        J_direct = assemble_jacobian(X, data, layout)
        assert abs(J.csr - J_direct.csr).max() == 0.0

    def test_level_dimensions(self):
        mesh = four_cell_mesh()
        layouts = [enumerate_dofs(mesh, g, r=2, k=1) for g in (1, 2)]
        data = ProblemData(nu=0.02, tau=0.1, convection=False)
        states = [np.zeros(l.n_total) for l in layouts]
        ops = assemble_level_jacobians(states, data, layouts)
        for op, layout in zip(ops, layouts):
            assert op.shape == (2 * (2 * layout.R + layout.S),) * 2

    def test_stokes_state_independent(self):
        mesh = four_cell_mesh()
        layout = enumerate_dofs(mesh, 1, r=2, k=1)
        data = ProblemData(nu=0.02, tau=0.1, convection=False)
        rng = np.random.default_rng(4)
        Ja = assemble_jacobian(rng.normal(size=layout.n_total), data, layout)
        Jb = assemble_jacobian(rng.normal(size=layout.n_total), data, layout)
        assert abs(Ja.csr - Jb.csr).max() == 0.0


def test_debug_dumps(tmp_path, layouts):
    layout = layouts[0]
    J = assemble_jacobian(np.zeros(layout.n_total), ProblemData(nu=0.01, tau=0.1), layout)
    dump_matrix_market(J, tmp_path / "jac.mtx")
    assert (tmp_path / "jac.mtx").read_text().startswith("%%MatrixMarket")
    dump_vector(np.array([1.0, -2.5]), tmp_path / "vec.txt")
    lines = (tmp_path / "vec.txt").read_text().strip().split("\n")
    assert len(lines) == 2 and float(lines[1]) == -2.5
