"""Space-time finite element flow solver with a Vanka-smoothed geometric
multigrid preconditioner.

The package solves the incompressible Navier-Stokes equations on hierarchies
of nested quadrilateral meshes.  Time is discretized by a discontinuous
Galerkin method of order k (time marching over subintervals), space by the
inf-sup stable Q_r / P_{r-1}^disc pair.  The Newton-linearized systems are
solved by flexible GMRES preconditioned with a geometric multigrid V-cycle
whose smoother solves small cell-local saddle-point blocks with precomputed
dense inverses.  A rank-partitioned exchange protocol provides the foreign
matrix entries those blocks need when the mesh is distributed.
"""

__version__ = "0.1.0"
