"""Reference-element bases and quadrature rules.

Provides tensor-product Lagrange bases Q_r on the unit square, the
L2-orthonormal discontinuous polynomial basis P_deg used for the pressure,
Gauss-Legendre rules on [0, 1], and right Gauss-Radau rules (right endpoint
included) that carry the temporal Lagrange basis of the dG time stepping.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import roots_jacobi


@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature points and weights on a reference domain."""

    points: np.ndarray  # (n,) in 1d, (n, 2) in 2d
    weights: np.ndarray

    def __post_init__(self):
        if len(self.points) != len(self.weights):
            raise ValueError("points/weights length mismatch")


def gauss_quadrature(n):
    """Gauss-Legendre rule on [0, 1], exact for polynomials of degree 2n-1."""
    if not 1 <= n <= 10:
        raise ValueError(f"gauss_quadrature supports 1 <= n <= 10, got {n}")
    x, w = np.polynomial.legendre.leggauss(n)
    return QuadratureRule(points=0.5 * (x + 1.0), weights=0.5 * w)


def gauss_radau_right(n):
    """Right Gauss-Radau rule on [0, 1]: t = 1 is a node, exact to degree 2n-2."""
    if not 1 <= n <= 5:
        raise ValueError(f"gauss_radau_right supports 1 <= n <= 5, got {n}")
    if n == 1:
        return QuadratureRule(points=np.array([1.0]), weights=np.array([1.0]))
    # Left Radau on [-1, 1]: endpoint -1 plus the Gauss-Jacobi(0, 1) nodes;
    # reflect x -> -x and map to [0, 1] to move the fixed node to t = 1.
    xj, wj = roots_jacobi(n - 1, 0.0, 1.0)
    nodes = np.concatenate([[-1.0], xj])
    weights = np.concatenate([[2.0 / n**2], wj / (1.0 + xj)])
    t = 0.5 * (1.0 - nodes)
    order = np.argsort(t)
    return QuadratureRule(points=t[order], weights=0.5 * weights[order])


def tensor_rule(rule):
    """Tensorize a 1d rule to the unit square (x running fastest)."""
    pts, wts = rule.points, rule.weights
    X, Y = np.meshgrid(pts, pts, indexing="xy")
    W = np.outer(wts, wts)  # W[j, i] = w_j * w_i
    points = np.column_stack([X.ravel(), Y.ravel()])
    return QuadratureRule(points=points, weights=W.ravel())


def _lagrange_1d(nodes, x):
    """Values and derivatives of the Lagrange basis on `nodes` at points `x`.

    Returns (values, derivs), each of shape (len(x), len(nodes)).
    """
    nodes = np.asarray(nodes, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = len(nodes)
    vals = np.ones((len(x), n))
    ders = np.zeros((len(x), n))
    for j in range(n):
        denom = nodes[j] - nodes
        for m in range(n):
            if m == j:
                continue
            vals[:, j] *= (x - nodes[m]) / denom[m]
        for m in range(n):
            if m == j:
                continue
            term = np.ones_like(x) / denom[m]
            for q in range(n):
                if q in (j, m):
                    continue
                term *= (x - nodes[q]) / denom[q]
            ders[:, j] += term
    return vals, ders


class QBasis:
    """Tensor-product Lagrange basis of degree r on the unit square.

    Nodes are the (r+1)^2 equispaced tensor points, ordered with the x index
    running fastest: node n = jy*(r+1) + ix sits at (ix/r, jy/r).
    """

    def __init__(self, r):
        if r < 1:
            raise ValueError(f"Q basis needs degree r >= 1, got {r}")
        self.r = r
        self.nodes_1d = np.linspace(0.0, 1.0, r + 1)
        ix, jy = np.meshgrid(range(r + 1), range(r + 1), indexing="xy")
        self.nodes = np.column_stack(
            [self.nodes_1d[ix.ravel()], self.nodes_1d[jy.ravel()]]
        )
        self.n_fun = (r + 1) ** 2

    def eval(self, points):
        """Basis values at reference points, shape (npts, (r+1)^2)."""
        points = np.atleast_2d(points)
        vx, _ = _lagrange_1d(self.nodes_1d, points[:, 0])
        vy, _ = _lagrange_1d(self.nodes_1d, points[:, 1])
        return np.einsum("pi,pj->pji", vx, vy).reshape(len(points), self.n_fun)

    def grad(self, points):
        """Reference gradients at reference points, shape (npts, (r+1)^2, 2)."""
        points = np.atleast_2d(points)
        vx, dx = _lagrange_1d(self.nodes_1d, points[:, 0])
        vy, dy = _lagrange_1d(self.nodes_1d, points[:, 1])
        gx = np.einsum("pi,pj->pji", dx, vy).reshape(len(points), self.n_fun)
        gy = np.einsum("pi,pj->pji", vx, dy).reshape(len(points), self.n_fun)
        return np.stack([gx, gy], axis=-1)


def q_basis_eval(r, ref_point):
    """Values and reference gradients of all (r+1)^2 Q_r functions at a point."""
    basis = QBasis(r)
    pt = np.atleast_2d(ref_point)
    return basis.eval(pt)[0], basis.grad(pt)[0]


def pressure_dof_count(d, deg):
    """Number of complete-degree polynomial basis functions: binom(d+deg, deg)."""
    if deg < 0:
        raise ValueError("pressure degree must be >= 0")
    return math.comb(d + deg, deg)


class PDiscBasis:
    """Complete-degree polynomial basis, L2-orthonormal on the unit square.

    Built by Cholesky orthonormalization of the monomials 1, x, y, x^2, xy,
    y^2, ... in graded-lexicographic order; there are no interpolation points.
    """

    def __init__(self, deg):
        if deg < 0:
            raise ValueError(f"P basis needs degree >= 0, got {deg}")
        self.deg = deg
        self.exponents = [(t - s, s) for t in range(deg + 1) for s in range(t + 1)]
        self.n_fun = len(self.exponents)
        assert self.n_fun == pressure_dof_count(2, deg)
        n = self.n_fun
        gram = np.empty((n, n))
        for a, (pa, qa) in enumerate(self.exponents):
            for b, (pb, qb) in enumerate(self.exponents):
                gram[a, b] = 1.0 / ((pa + pb + 1) * (qa + qb + 1))
        L = np.linalg.cholesky(gram)
        # basis_i = sum_j coeff[i, j] * monomial_j  with  C G C^T = I
        self.coeff = np.linalg.inv(L)

    def eval(self, points):
        """Basis values at reference points, shape (npts, n_fun)."""
        points = np.atleast_2d(points)
        mono = np.empty((len(points), self.n_fun))
        for j, (p, q) in enumerate(self.exponents):
            mono[:, j] = points[:, 0] ** p * points[:, 1] ** q
        return mono @ self.coeff.T


def p_disc_basis_eval(deg, ref_point):
    """Values of the n_p orthonormal pressure basis functions at a point."""
    return PDiscBasis(deg).eval(np.atleast_2d(ref_point))[0]


class TimeBasis:
    """Temporal Lagrange basis on the k+1 right Gauss-Radau nodes of [0, 1].

    The last node is t = 1, so the trace at the right interval end is read off
    the last coefficient directly.
    """

    def __init__(self, k):
        if k < 0:
            raise ValueError("temporal degree k must be >= 0")
        self.k = k
        self.nodes = gauss_radau_right(k + 1).points

    def values(self, ts):
        vals, _ = _lagrange_1d(self.nodes, ts)
        return vals

    def derivs(self, ts):
        _, ders = _lagrange_1d(self.nodes, ts)
        return ders
