"""Hierarchies of nested quadrilateral meshes for channel-with-cylinder flow.

The coarse mesh embeds an O-grid ring of quads around the cylinder in a
structured channel grid.  Refinement is uniform midpoint bisection, so every
child cell is the image of its parent under one of four fixed affine quadrant
maps and the finite element spaces on successive levels nest exactly.  The
circle is discretized once, on the coarse level, as a polygon whose vertices
lie exactly on the circle; edge midpoints created by refinement are NOT
re-projected, which keeps all cell maps straight-sided.
"""

from dataclasses import dataclass, field

import numpy as np

# boundary face tags
INTERIOR = 0
INFLOW = 1
WALL = 2
OUTFLOW = 3
CYLINDER = 4

#: faces carrying a (weak) Dirichlet velocity condition
DIRICHLET_TAGS = (INFLOW, WALL, CYLINDER)
#: the no-slip wall set: channel walls plus the cylinder polygon
GAMMA_W_TAGS = (WALL, CYLINDER)

# local face f of a quad connects corner f to corner (f+1) % 4
FACE_CORNERS = ((0, 1), (1, 2), (2, 3), (3, 0))


@dataclass(frozen=True)
class ChannelGeometry:
    """Rectangular channel, optionally with a circular obstacle.

    A `cylinder_diameter` of zero means no obstacle (plain rectangle).
    """

    length: float = 2.2
    height: float = 0.41
    cylinder_center: tuple = (0.2, 0.2)
    cylinder_diameter: float = 0.1

    def __post_init__(self):
        if self.length <= 0 or self.height <= 0:
            raise ValueError("channel must have positive length and height")
        if self.cylinder_diameter < 0:
            raise ValueError("cylinder diameter must be >= 0")
        if self.cylinder_diameter > 0:
            cx, cy = self.cylinder_center
            rad = 0.5 * self.cylinder_diameter
            if not (
                cx - rad > 0
                and cx + rad < self.length
                and cy - rad > 0
                and cy + rad < self.height
            ):
                raise ValueError(
                    "degenerate geometry: cylinder of diameter "
                    f"{self.cylinder_diameter} at {self.cylinder_center} touches "
                    f"the channel walls (channel {self.length} x {self.height})"
                )

    @property
    def has_cylinder(self):
        return self.cylinder_diameter > 0


def dfg_geometry():
    """The 2d DFG flow-around-cylinder geometry."""
    return ChannelGeometry(2.2, 0.41, (0.2, 0.2), 0.1)


@dataclass
class MeshLevel:
    """One level of the hierarchy: straight-sided quads with CCW corners."""

    vertices: np.ndarray  # (nv, 2)
    cells: np.ndarray  # (nc, 4) vertex indices, counterclockwise
    face_tags: np.ndarray  # (nc, 4) int8, INTERIOR on inner faces
    parent: np.ndarray  # (nc,) cell id on the previous level, -1 on level 1
    owner_rank: np.ndarray  # (nc,)

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_vertices(self):
        return len(self.vertices)

    def cell_corners(self, ids=slice(None)):
        """Corner coordinates, shape (nc, 4, 2)."""
        return self.vertices[self.cells[ids]]

    def centroids(self):
        return self.cell_corners().mean(axis=1)

    def signed_areas(self):
        """Shoelace area per cell (positive for CCW corners)."""
        c = self.cell_corners()
        x, y = c[:, :, 0], c[:, :, 1]
        xn, yn = np.roll(x, -1, axis=1), np.roll(y, -1, axis=1)
        return 0.5 * np.sum(x * yn - xn * y, axis=1)

    def diameters(self):
        """Max corner distance per cell."""
        c = self.cell_corners()
        d = 0.0
        for i in range(4):
            for j in range(i + 1, 4):
                d = np.maximum(d, np.linalg.norm(c[:, i] - c[:, j], axis=1))
        return d

    def edge_table(self):
        """Map sorted vertex pair -> edge id, plus the (ne, 2) pair array."""
        pairs = {}
        edges = []
        for quad in self.cells:
            for a, b in FACE_CORNERS:
                key = (min(quad[a], quad[b]), max(quad[a], quad[b]))
                if key not in pairs:
                    pairs[key] = len(edges)
                    edges.append(key)
        return pairs, np.asarray(edges, dtype=np.int64)


@dataclass
class HierarchicalMesh:
    """Nested mesh levels g = 1..G with parent/child links and rank ownership."""

    geometry: ChannelGeometry
    levels: list = field(default_factory=list)
    children: dict = field(default_factory=dict)  # g -> (nc_g, 4) child ids on g+1
    num_ranks: int = 1

    @property
    def n_levels(self):
        return len(self.levels)

    def level(self, g):
        """Level access with the 1-based numbering g = 1..G."""
        if not 1 <= g <= self.n_levels:
            raise ValueError(f"level {g} not in 1..{self.n_levels}")
        return self.levels[g - 1]

    def cell_children(self, g, cell):
        return self.children[g][cell]

    def total_area(self, g):
        return self.level(g).signed_areas().sum()


def domain_polygon_area(geom, mesh=None):
    """Area of the polygonally approximated domain.

    With a cylinder, the hole is the polygon of the coarse cylinder faces, so
    the mesh (any level; areas coincide) is consulted for its shoelace area.
    """
    area = geom.length * geom.height
    if geom.has_cylinder:
        if mesh is None:
            raise ValueError("need the mesh to measure the cylinder polygon")
        area -= cylinder_polygon_area(mesh, 1)
    return area


def cylinder_polygon(mesh, g):
    """Vertices on the cylinder boundary of level g, ordered along the polygon."""
    lvl = mesh.level(g)
    segs = []
    for c in range(lvl.n_cells):
        for f in range(4):
            if lvl.face_tags[c, f] == CYLINDER:
                a, b = FACE_CORNERS[f]
                segs.append((lvl.cells[c, a], lvl.cells[c, b]))
    if not segs:
        return np.empty((0, 2)), []
    nxt = {a: b for a, b in segs}
    start = segs[0][0]
    loop = [start]
    while True:
        n = nxt[loop[-1]]
        if n == start:
            break
        loop.append(n)
    return lvl.vertices[loop], loop


def cylinder_polygon_area(mesh, g):
    pts, _ = cylinder_polygon(mesh, g)
    if len(pts) == 0:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    return abs(0.5 * np.sum(x * yn - xn * y))


def _structured_tags(i, j, nx, ny):
    tags = np.zeros(4, dtype=np.int8)
    if j == 0:
        tags[0] = WALL
    if i == nx - 1:
        tags[1] = OUTFLOW
    if j == ny - 1:
        tags[2] = WALL
    if i == 0:
        tags[3] = INFLOW
    return tags


def generate_channel_mesh(geom, n0):
    """Build the coarse level (g = 1) of the channel mesh.

    `n0` is the number of cell rows over the channel height; the column count
    follows from keeping cells close to square.  With a cylinder, a block of
    structured cells around it is replaced by an O-grid ring whose inner
    polygon vertices lie exactly on the circle.
    """
    if n0 < 1:
        raise ValueError("n0 must be >= 1")
    ny = int(n0)
    dy = geom.height / ny
    nx = max(1, round(geom.length / dy))
    dx = geom.length / nx

    xs = np.linspace(0.0, geom.length, nx + 1)
    ys = np.linspace(0.0, geom.height, ny + 1)
    vid = lambda i, j: j * (nx + 1) + i
    verts = [(x, y) for y in ys for x in xs]

    if not geom.has_cylinder:
        cells, tags = [], []
        for j in range(ny):
            for i in range(nx):
                cells.append((vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)))
                tags.append(_structured_tags(i, j, nx, ny))
        level = MeshLevel(
            vertices=np.asarray(verts, dtype=float),
            cells=np.asarray(cells, dtype=np.int64),
            face_tags=np.asarray(tags, dtype=np.int8),
            parent=np.full(len(cells), -1, dtype=np.int64),
            owner_rank=np.zeros(len(cells), dtype=np.int32),
        )
        return HierarchicalMesh(geometry=geom, levels=[level])

    cx, cy = geom.cylinder_center
    rad = 0.5 * geom.cylinder_diameter
    margin = 1.25 * rad
    i_lo, i_hi = int(np.floor((cx - margin) / dx)), int(np.ceil((cx + margin) / dx))
    j_lo, j_hi = int(np.floor((cy - margin) / dy)), int(np.ceil((cy + margin) / dy))
    if i_lo < 1 or j_lo < 1 or i_hi > nx - 1 or j_hi > ny - 1:
        raise ValueError(
            f"coarse resolution n0={n0} cannot embed the cylinder o-grid away "
            "from the channel walls; increase n0"
        )
    if not (
        i_lo * dx < cx - rad
        and i_hi * dx > cx + rad
        and j_lo * dy < cy - rad
        and j_hi * dy > cy + rad
    ):
        raise ValueError(
            f"cylinder crosses the o-grid hole boundary at n0={n0}; increase n0"
        )

    cells, tags = [], []
    for j in range(ny):
        for i in range(nx):
            if i_lo <= i < i_hi and j_lo <= j < j_hi:
                continue  # hole for the o-grid
            cells.append((vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)))
            tags.append(_structured_tags(i, j, nx, ny))

    # hole boundary loop, counterclockwise, starting at the lower-left corner
    loop = []
    loop += [vid(i, j_lo) for i in range(i_lo, i_hi)]
    loop += [vid(i_hi, j) for j in range(j_lo, j_hi)]
    loop += [vid(i, j_hi) for i in range(i_hi, i_lo, -1)]
    loop += [vid(i_lo, j) for j in range(j_hi, j_lo, -1)]

    circle_ids = []
    for v in loop:
        vx, vy = verts[v]
        theta = np.arctan2(vy - cy, vx - cx)
        circle_ids.append(len(verts))
        verts.append((cx + rad * np.cos(theta), cy + rad * np.sin(theta)))

    m = len(loop)
    for a in range(m):
        b = (a + 1) % m
        cells.append((loop[a], loop[b], circle_ids[b], circle_ids[a]))
        t = np.zeros(4, dtype=np.int8)
        t[2] = CYLINDER  # face between the two circle vertices
        tags.append(t)

    # drop lattice vertices orphaned inside the hole
    cells = np.asarray(cells, dtype=np.int64)
    used = np.unique(cells)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    level = MeshLevel(
        vertices=np.asarray(verts, dtype=float)[used],
        cells=remap[cells],
        face_tags=np.asarray(tags, dtype=np.int8),
        parent=np.full(len(cells), -1, dtype=np.int64),
        owner_rank=np.zeros(len(cells), dtype=np.int32),
    )
    if (level.signed_areas() <= 0).any():
        raise ValueError("coarse mesh contains inverted cells")
    return HierarchicalMesh(geometry=geom, levels=[level])


# child q covers reference quadrant q of the parent; offsets of the quadrant maps
QUADRANT_OFFSETS = np.array([(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)])


def refine_uniform(mesh):
    """Return a new hierarchy with one more, uniformly refined level.

    New vertices sit at edge midpoints and cell corner averages, so child
    cells are exact quadrant images of their parents (nested spaces).
    """
    if mesh.n_levels == 0:
        raise ValueError("mesh has no levels")
    top = mesh.levels[-1]
    pairs, edges = top.edge_table()

    verts = [tuple(v) for v in top.vertices]
    mid_of_edge = {}
    for e, (a, b) in enumerate(edges):
        mid_of_edge[e] = len(verts)
        verts.append(tuple(0.5 * (top.vertices[a] + top.vertices[b])))

    cells, tags, parent = [], [], []
    children = np.empty((top.n_cells, 4), dtype=np.int64)
    for c in range(top.n_cells):
        quad = top.cells[c]
        mids = []
        for a, b in FACE_CORNERS:
            key = (min(quad[a], quad[b]), max(quad[a], quad[b]))
            mids.append(mid_of_edge[pairs[key]])
        center = len(verts)
        verts.append(tuple(top.vertices[quad].mean(axis=0)))
        v0, v1, v2, v3 = quad
        m0, m1, m2, m3 = mids
        child_quads = (
            (v0, m0, center, m3),
            (m0, v1, m1, center),
            (center, m1, v2, m2),
            (m3, center, m2, v3),
        )
        # child faces lying on parent face f: (child, its local face)
        inherit = (((0, 0), (1, 0)), ((1, 1), (2, 1)), ((2, 2), (3, 2)), ((3, 3), (0, 3)))
        child_tags = np.zeros((4, 4), dtype=np.int8)
        for f in range(4):
            for ch, cf in inherit[f]:
                child_tags[ch, cf] = top.face_tags[c, f]
        for q in range(4):
            children[c, q] = len(cells)
            cells.append(child_quads[q])
            tags.append(child_tags[q])
            parent.append(c)

    new_level = MeshLevel(
        vertices=np.asarray(verts, dtype=float),
        cells=np.asarray(cells, dtype=np.int64),
        face_tags=np.asarray(tags, dtype=np.int8),
        parent=np.asarray(parent, dtype=np.int64),
        owner_rank=np.zeros(len(cells), dtype=np.int32),
    )
    new_children = dict(mesh.children)
    new_children[mesh.n_levels] = children
    refined = HierarchicalMesh(
        geometry=mesh.geometry,
        levels=list(mesh.levels) + [new_level],
        children=new_children,
        num_ranks=mesh.num_ranks,
    )
    if mesh.num_ranks > 1:
        return partition(refined, mesh.num_ranks)
    return refined


def build_hierarchy(geom, n0, n_levels):
    """Coarse mesh plus n_levels - 1 uniform refinements."""
    mesh = generate_channel_mesh(geom, n0)
    for _ in range(n_levels - 1):
        mesh = refine_uniform(mesh)
    return mesh


def morton_keys(points, bbox=None):
    """Z-order keys of 2d points, quantized to 16 bits per axis."""
    points = np.asarray(points)
    if bbox is None:
        lo, hi = points.min(axis=0), points.max(axis=0)
    else:
        lo, hi = np.asarray(bbox[0]), np.asarray(bbox[1])
    span = np.where(hi > lo, hi - lo, 1.0)
    quant = np.clip(((points - lo) / span * (1 << 16)).astype(np.uint64), 0, (1 << 16) - 1)

    def spread(v):
        v = v & np.uint64(0xFFFF)
        v = (v | (v << np.uint64(8))) & np.uint64(0x00FF00FF)
        v = (v | (v << np.uint64(4))) & np.uint64(0x0F0F0F0F)
        v = (v | (v << np.uint64(2))) & np.uint64(0x33333333)
        v = (v | (v << np.uint64(1))) & np.uint64(0x55555555)
        return v

    return spread(quant[:, 0]) | (spread(quant[:, 1]) << np.uint64(1))


def chunk_sizes(n_items, n_ranks):
    """Balanced contiguous chunk sizes (differ by at most one)."""
    base, rem = divmod(n_items, n_ranks)
    return [base + 1 if p < rem else base for p in range(n_ranks)]


def partition(mesh, num_ranks):
    """Assign every cell of every level to a rank.

    Cells are ordered along the Morton curve of their centroids and split into
    contiguous, balanced blocks; the construction is deterministic.
    """
    if num_ranks < 1:
        raise ValueError("num_ranks must be >= 1")
    geom = mesh.geometry
    bbox = ((0.0, 0.0), (geom.length, geom.height))
    new_levels = []
    for lvl in mesh.levels:
        order = np.argsort(morton_keys(lvl.centroids(), bbox), kind="stable")
        owner = np.empty(lvl.n_cells, dtype=np.int32)
        start = 0
        for p, size in enumerate(chunk_sizes(lvl.n_cells, num_ranks)):
            owner[order[start : start + size]] = p
            start += size
        new_levels.append(
            MeshLevel(
                vertices=lvl.vertices,
                cells=lvl.cells,
                face_tags=lvl.face_tags,
                parent=lvl.parent,
                owner_rank=owner,
            )
        )
    return HierarchicalMesh(
        geometry=geom, levels=new_levels, children=dict(mesh.children), num_ranks=num_ranks
    )


def write_vtk(mesh, g, path, cell_data=None, point_data=None):
    """Write one level as legacy ASCII VTK (UNSTRUCTURED_GRID, cell type 9)."""
    lvl = mesh.level(g)
    lines = [
        "# vtk DataFile Version 3.0",
        f"quad mesh level {g}",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {lvl.n_vertices} double",
    ]
    for x, y in lvl.vertices:
        lines.append(f"{x:.15g} {y:.15g} 0")
    lines.append(f"CELLS {lvl.n_cells} {5 * lvl.n_cells}")
    for quad in lvl.cells:
        lines.append("4 " + " ".join(str(v) for v in quad))
    lines.append(f"CELL_TYPES {lvl.n_cells}")
    lines.extend(["9"] * lvl.n_cells)
    if cell_data:
        lines.append(f"CELL_DATA {lvl.n_cells}")
        for name, values in cell_data.items():
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(f"{v:.15g}" for v in values)
    if point_data:
        lines.append(f"POINT_DATA {lvl.n_vertices}")
        for name, values in point_data.items():
            values = np.asarray(values)
            if values.ndim == 2:
                lines.append(f"VECTORS {name} double")
                lines.extend(f"{v[0]:.15g} {v[1]:.15g} 0" for v in values)
            else:
                lines.append(f"SCALARS {name} double 1")
                lines.append("LOOKUP_TABLE default")
                lines.extend(f"{v:.15g}" for v in values)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
