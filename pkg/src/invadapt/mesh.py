"""Hierarchical conforming tetrahedral meshes on the unit cube.

Meshes are built as a Kuhn (6-tets-per-subcube) triangulation of
[0,1]^3 and refined by longest-edge bisection with recursive conformity
closure.  A mesh object is immutable after construction; ``refine`` and
``coarsen`` return new meshes that share the (append-only) vertex array
of their lineage, which makes nodal transfer between related meshes a
pure index operation.
"""
from __future__ import annotations

import uuid
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SimplicialMesh",
    "Geometry",
    "MeshError",
    "DegenerateElementError",
    "CoarsenResult",
    "build_structured_cube",
    "refine",
    "coarsen",
    "geometry_tables",
    "conformity_audit",
]

# local vertex index pairs of the 6 edges of a tet
_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
# local vertex triples of the 4 faces (face i omits vertex i)
_FACES = ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2))

_MAX_CLOSURE_PASSES = 500


class MeshError(Exception):
    """Raised for invalid mesh operations or broken mesh invariants."""


class DegenerateElementError(MeshError):
    """A tetrahedron with non-positive volume was detected."""


@dataclass(frozen=True)
class Geometry:
    """Per-element and per-face geometric tables of one mesh.

    Face normals on interior faces point from the lower-index adjacent
    cell toward the higher-index one; boundary normals point outward.
    """

    volumes: np.ndarray        # (E,) element volumes
    h_k: np.ndarray            # (E,) element diameters
    grads: np.ndarray          # (E, 4, 3) gradients of barycentric coords
    faces: np.ndarray          # (F, 3) vertex triples, sorted
    face_cells: np.ndarray     # (F, 2) adjacent cell ids, -1 = boundary
    face_areas: np.ndarray     # (F,)
    h_e: np.ndarray            # (F,) face diameters
    normals: np.ndarray        # (F, 3) unit normals

    @property
    def interior(self) -> np.ndarray:
        return self.face_cells[:, 1] >= 0

    @property
    def boundary(self) -> np.ndarray:
        return self.face_cells[:, 1] < 0


class SimplicialMesh:
    """Conforming tetrahedral mesh with refinement genealogy.

    The full bisection forest is retained: ``refine``/``coarsen`` flip
    activity flags and append children, so sibling merges and genealogy
    queries stay cheap.  Public element indices (``cells`` rows) always
    refer to the *active* tets.
    """

    def __init__(self, vertices, vertex_parents, tets, parent, level,
                 active, newest, lineage=(), structured_n=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.vertex_parents = np.ascontiguousarray(vertex_parents, dtype=np.int64)
        self._tets = np.ascontiguousarray(tets, dtype=np.int64)
        self._parent = np.ascontiguousarray(parent, dtype=np.int64)
        self._level = np.ascontiguousarray(level, dtype=np.int64)
        self._active = np.ascontiguousarray(active, dtype=bool)
        self._newest = np.ascontiguousarray(newest, dtype=np.int64)
        self.mesh_id = uuid.uuid4().hex[:12]
        self.lineage: tuple[str, ...] = tuple(lineage)
        self.structured_n = structured_n
        self._cache: dict = {}

    # ------------------------------------------------------------------
    # basic views
    # ------------------------------------------------------------------
    @property
    def active_ids(self) -> np.ndarray:
        """Forest indices of the active tets, in element order."""
        out = self._cache.get("active_ids")
        if out is None:
            out = np.flatnonzero(self._active)
            self._cache["active_ids"] = out
        return out

    @property
    def cells(self) -> np.ndarray:
        """(E, 4) connectivity of the active tets."""
        out = self._cache.get("cells")
        if out is None:
            out = self._tets[self.active_ids]
            self._cache["cells"] = out
        return out

    @property
    def n_cells(self) -> int:
        return len(self.active_ids)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def levels(self) -> np.ndarray:
        """(E,) refinement generation of each active tet."""
        return self._level[self.active_ids]

    @property
    def parents(self) -> np.ndarray:
        """(E,) forest index of each active tet's parent (-1 for roots)."""
        return self._parent[self.active_ids]

    @property
    def used_mask(self) -> np.ndarray:
        """Vertices referenced by at least one active tet."""
        out = self._cache.get("used_mask")
        if out is None:
            out = np.zeros(self.n_vertices, dtype=bool)
            out[self.cells] = True
            self._cache["used_mask"] = out
        return out

    @property
    def n_used_vertices(self) -> int:
        return int(self.used_mask.sum())

    def forest_cell(self, forest_id: int) -> np.ndarray:
        return self._tets[forest_id]

    def descends_from(self, other: "SimplicialMesh") -> bool:
        return other.mesh_id in self.lineage or other.mesh_id == self.mesh_id

    # ------------------------------------------------------------------
    # midpoint registry
    # ------------------------------------------------------------------
    def _midpoint_map(self) -> dict:
        """Map (a, b) sorted vertex pair -> index of its midpoint vertex."""
        out = self._cache.get("midpoints")
        if out is None:
            vp = self.vertex_parents
            created = np.flatnonzero(vp[:, 0] != vp[:, 1])
            out = {}
            for v in created:
                a, b = vp[v]
                out[(min(a, b), max(a, b))] = int(v)
            self._cache["midpoints"] = out
        return out

    # ------------------------------------------------------------------
    # geometry
    # ------------------------------------------------------------------
    def geometry(self) -> Geometry:
        geo = self._cache.get("geometry")
        if geo is None:
            geo = _compute_geometry(self)
            self._cache["geometry"] = geo
        return geo

    def __repr__(self):
        return (f"SimplicialMesh(id={self.mesh_id}, cells={self.n_cells}, "
                f"vertices={self.n_vertices})")


# ----------------------------------------------------------------------
# construction
# ----------------------------------------------------------------------

def build_structured_cube(n: int) -> SimplicialMesh:
    """Kuhn triangulation of [0,1]^3 with n subdivisions per axis.

    Yields (n+1)^3 vertices and 6 n^3 tets; every tet of a subcube
    shares the subcube's main diagonal, so the triangulation is
    conforming across subcubes.
    """
    if n < 1:
        raise ValueError(f"subdivision count must be >= 1, got {n}")
    axis = np.linspace(0.0, 1.0, n + 1)
    zz, yy, xx = np.meshgrid(axis, axis, axis, indexing="ij")
    vertices = np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])

    def vid(i, j, k):  # i,j,k along x,y,z
        return (k * (n + 1) + j) * (n + 1) + i

    # the six permutations of axis insertion order; each gives one Kuhn tet
    perms = ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))
    tets = np.empty((6 * n**3, 4), dtype=np.int64)
    t = 0
    for k in range(n):
        for j in range(n):
            for i in range(n):
                base = np.array([i, j, k])
                for perm in perms:
                    idx = [base.copy()]
                    cur = base.copy()
                    for ax in perm:
                        cur = cur.copy()
                        cur[ax] += 1
                        idx.append(cur)
                    tets[t] = [vid(*p) for p in idx]
                    t += 1
    tets = _orient_positive(vertices, tets)
    nt = len(tets)
    vp = np.repeat(np.arange(len(vertices))[:, None], 2, axis=1)
    return SimplicialMesh(
        vertices, vp, tets,
        parent=np.full(nt, -1), level=np.zeros(nt, dtype=np.int64),
        active=np.ones(nt, dtype=bool), newest=np.full(nt, -1),
        structured_n=n,
    )


def _orient_positive(vertices, tets):
    p = vertices[tets]
    vol6 = np.einsum("ij,ij->i",
                     np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]),
                     p[:, 3] - p[:, 0])
    flip = vol6 < 0
    tets = tets.copy()
    tets[flip, 2], tets[flip, 3] = tets[flip, 3].copy(), tets[flip, 2].copy()
    return tets


# ----------------------------------------------------------------------
# refinement
# ----------------------------------------------------------------------

class _Forest:
    """Mutable scratch copy of a mesh's bisection forest."""

    def __init__(self, mesh: SimplicialMesh):
        self.coords = list(mesh.vertices)
        self.vparents = list(map(tuple, mesh.vertex_parents))
        self.tets = list(map(tuple, mesh._tets))
        self.parent = list(mesh._parent)
        self.level = list(mesh._level)
        self.active = list(mesh._active)
        self.newest = list(mesh._newest)
        self.midpoints = dict(mesh._midpoint_map())

    def midpoint_vertex(self, a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        v = self.midpoints.get(key)
        if v is None:
            v = len(self.coords)
            self.coords.append(0.5 * (self.coords[a] + self.coords[b]))
            self.vparents.append(key)
            self.midpoints[key] = v
        return v

    def refinement_edge(self, t: int) -> tuple[int, int]:
        """Longest edge of tet t with a deterministic geometric tie-break."""
        conn = self.tets[t]
        best = None
        best_key = None
        for i, j in _EDGES:
            a, b = conn[i], conn[j]
            pa, pb = self.coords[a], self.coords[b]
            d = pb - pa
            length = float(d @ d)
            m = 0.5 * (pa + pb)
            key = (-length, m[0], m[1], m[2], min(a, b), max(a, b))
            if best_key is None or key < best_key:
                best_key = key
                best = (a, b)
        return best

    def bisect(self, t: int) -> None:
        a, b = self.refinement_edge(t)
        m = self.midpoint_vertex(a, b)
        conn = self.tets[t]
        child_a = tuple(m if v == a else v for v in conn)
        child_b = tuple(m if v == b else v for v in conn)
        self.active[t] = False
        lvl = self.level[t] + 1
        for child in (child_a, child_b):
            self.tets.append(child)
            self.parent.append(t)
            self.level.append(lvl)
            self.active.append(True)
            self.newest.append(m)

    def hanging_tets(self) -> np.ndarray:
        """Active tets having an edge whose midpoint is a used vertex."""
        active_ids = np.flatnonzero(self.active)
        cells = np.asarray(self.tets, dtype=np.int64)[active_ids]
        if len(self.midpoints) == 0:
            return np.empty(0, dtype=np.int64)
        used = np.zeros(len(self.coords), dtype=bool)
        used[cells] = True
        mids = np.array([(a, b, v) for (a, b), v in self.midpoints.items()],
                        dtype=np.int64)
        live = mids[used[mids[:, 2]]]
        if len(live) == 0:
            return np.empty(0, dtype=np.int64)
        stride = len(self.coords) + 1
        live_codes = np.sort(live[:, 0] * stride + live[:, 1])
        hang = np.zeros(len(active_ids), dtype=bool)
        for i, j in _EDGES:
            a = cells[:, i]
            b = cells[:, j]
            lo = np.minimum(a, b)
            hi = np.maximum(a, b)
            codes = lo * stride + hi
            pos = np.searchsorted(live_codes, codes)
            pos[pos == len(live_codes)] = 0
            hang |= live_codes[pos] == codes
        return active_ids[hang]

    def to_mesh(self, base: SimplicialMesh) -> SimplicialMesh:
        return SimplicialMesh(
            np.asarray(self.coords), np.asarray(self.vparents, dtype=np.int64),
            np.asarray(self.tets, dtype=np.int64),
            np.asarray(self.parent, dtype=np.int64),
            np.asarray(self.level, dtype=np.int64),
            np.asarray(self.active, dtype=bool),
            np.asarray(self.newest, dtype=np.int64),
            lineage=base.lineage + (base.mesh_id,),
            structured_n=None,
        )


def refine(mesh: SimplicialMesh, marked, h_min: float = 0.0) -> SimplicialMesh:
    """Bisect the marked elements and close the mesh to conformity.

    ``marked`` holds element (active-cell) indices.  Elements whose
    diameter is already below ``2 * h_min`` are left alone, bounding the
    work of the adaptive driver.  Closure bisections ignore the guard:
    conformity always wins.
    """
    marked = np.unique(np.asarray(list(marked), dtype=np.int64))
    if marked.size == 0:
        return mesh
    if marked.min() < 0 or marked.max() >= mesh.n_cells:
        raise MeshError("marked element index out of range")
    if h_min > 0.0:
        keep = mesh.geometry().h_k[marked] >= 2.0 * h_min
        marked = marked[keep]
        if marked.size == 0:
            return mesh

    forest = _Forest(mesh)
    for t in mesh.active_ids[marked]:
        if forest.active[t]:
            forest.bisect(int(t))
    for _ in range(_MAX_CLOSURE_PASSES):
        hanging = forest.hanging_tets()
        if hanging.size == 0:
            break
        for t in hanging:
            if forest.active[t]:
                forest.bisect(int(t))
    else:
        raise MeshError("conformity closure did not terminate")
    return forest.to_mesh(mesh)


# ----------------------------------------------------------------------
# coarsening
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class CoarsenResult:
    mesh: SimplicialMesh
    skipped: int


def coarsen(mesh: SimplicialMesh, marked) -> CoarsenResult:
    """Merge marked sibling pairs back into their parents.

    Only complete sibling pairs whose shared bisection vertex is used by
    no other surviving tet are merged; ineligible marks are counted in
    ``skipped``.  Level-0 tets are never removed.
    """
    marked = np.unique(np.asarray(list(marked), dtype=np.int64))
    if marked.size == 0:
        return CoarsenResult(mesh, 0)
    if marked.min() < 0 or marked.max() >= mesh.n_cells:
        raise MeshError("marked element index out of range")

    forest_ids = set(int(t) for t in mesh.active_ids[marked])
    parent = mesh._parent
    newest = mesh._newest
    active = mesh._active.copy()

    # children per parent, among the marked set
    by_parent: dict[int, list[int]] = {}
    for t in forest_ids:
        p = int(parent[t])
        if p >= 0:
            by_parent.setdefault(p, []).append(t)
    candidates = {p: ch for p, ch in by_parent.items() if len(ch) == 2}

    merged_tets: set[int] = set()
    changed = True
    while changed:
        changed = False
        # group still-mergeable candidate pairs by their shared midpoint
        groups: dict[int, list[tuple[int, list[int]]]] = {}
        for p, ch in candidates.items():
            if active[ch[0]] and active[ch[1]]:
                groups.setdefault(int(newest[ch[0]]), []).append((p, ch))
        if not groups:
            break
        # users of each candidate midpoint among currently active tets
        users: dict[int, set[int]] = {v: set() for v in groups}
        act_ids = np.flatnonzero(active)
        cells = mesh._tets[act_ids]
        hit = np.isin(cells, np.fromiter(groups, dtype=np.int64))
        for row in np.flatnonzero(hit.any(axis=1)):
            t = int(act_ids[row])
            for v in cells[row]:
                v = int(v)
                if v in users:
                    users[v].add(t)
        # merge a group when every active user of its midpoint merges too
        for v, pairs in groups.items():
            merging = set()
            for _, ch in pairs:
                merging.update(ch)
            if users.get(v) == merging:
                for p, ch in pairs:
                    active[ch[0]] = False
                    active[ch[1]] = False
                    active[p] = True
                    merged_tets.update(ch)
                changed = True

    skipped = len(forest_ids - merged_tets)
    if not merged_tets:
        return CoarsenResult(mesh, skipped)
    new = SimplicialMesh(
        mesh.vertices, mesh.vertex_parents, mesh._tets, mesh._parent,
        mesh._level, active, mesh._newest,
        lineage=mesh.lineage + (mesh.mesh_id,), structured_n=None,
    )
    return CoarsenResult(new, skipped)


# ----------------------------------------------------------------------
# geometry tables
# ----------------------------------------------------------------------

def _compute_geometry(mesh: SimplicialMesh) -> Geometry:
    cells = mesh.cells
    p = mesh.vertices[cells]                      # (E, 4, 3)
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    d3 = p[:, 3] - p[:, 0]
    vol6 = np.einsum("ij,ij->i", np.cross(d1, d2), d3)
    volumes = vol6 / 6.0
    if np.any(volumes <= 0.0):
        bad = int(np.argmin(volumes))
        raise DegenerateElementError(
            f"element {bad} has non-positive volume {volumes[bad]:.3e}")

    # diameters: max pairwise vertex distance
    h_k = np.zeros(len(cells))
    for i in range(4):
        for j in range(i + 1, 4):
            d = np.linalg.norm(p[:, i] - p[:, j], axis=1)
            np.maximum(h_k, d, out=h_k)

    # gradients of barycentric coordinates: rows of inverse edge matrix
    edge = np.stack([d1, d2, d3], axis=1)          # (E, 3, 3)
    inv = np.linalg.inv(edge)                      # (E, 3, 3)
    grads = np.empty((len(cells), 4, 3))
    grads[:, 1:, :] = np.transpose(inv, (0, 2, 1))
    grads[:, 0, :] = -grads[:, 1:, :].sum(axis=1)

    faces, face_cells = _face_adjacency(cells)
    fp = mesh.vertices[faces]                      # (F, 3, 3)
    cr = np.cross(fp[:, 1] - fp[:, 0], fp[:, 2] - fp[:, 0])
    areas = 0.5 * np.linalg.norm(cr, axis=1)
    h_e = np.zeros(len(faces))
    for i in range(3):
        for j in range(i + 1, 3):
            np.maximum(h_e, np.linalg.norm(fp[:, i] - fp[:, j], axis=1),
                       out=h_e)
    normals = cr / np.linalg.norm(cr, axis=1)[:, None]
    # orient: from left cell outward (toward right cell / domain exterior)
    left_centroid = mesh.vertices[cells[face_cells[:, 0]]].mean(axis=1)
    face_centroid = fp.mean(axis=1)
    flip = np.einsum("ij,ij->i", normals, face_centroid - left_centroid) < 0
    normals[flip] *= -1.0
    return Geometry(volumes, h_k, grads, faces, face_cells, areas, h_e,
                    normals)


def _face_adjacency(cells: np.ndarray):
    E = len(cells)
    tri = np.sort(
        np.concatenate([cells[:, f] for f in _FACES], axis=0), axis=1)
    owner = np.tile(np.arange(E, dtype=np.int64), 4)
    order = np.lexsort((tri[:, 2], tri[:, 1], tri[:, 0]))
    tri = tri[order]
    owner = owner[order]
    new = np.ones(len(tri), dtype=bool)
    new[1:] = np.any(tri[1:] != tri[:-1], axis=1)
    group = np.cumsum(new) - 1
    n_faces = group[-1] + 1
    counts = np.bincount(group, minlength=n_faces)
    if counts.max() > 2:
        raise MeshError("face shared by more than two tets")
    faces = tri[new]
    face_cells = np.full((n_faces, 2), -1, dtype=np.int64)
    starts = np.flatnonzero(new)
    face_cells[:, 0] = owner[starts]
    second = counts == 2
    face_cells[second, 1] = owner[starts[second] + 1]
    # convention: left = lower cell index
    swap = (face_cells[:, 1] >= 0) & (face_cells[:, 0] > face_cells[:, 1])
    face_cells[swap] = face_cells[swap][:, ::-1]
    return faces, face_cells


def geometry_tables(mesh: SimplicialMesh) -> Geometry:
    """Volumes, diameters, barycentric gradients and face tables."""
    return mesh.geometry()


# ----------------------------------------------------------------------
# audits
# ----------------------------------------------------------------------

def conformity_audit(mesh: SimplicialMesh, atol: float = 1e-12) -> None:
    """Exhaustive mesh-legality check; raises MeshError on violation.

    Checks: positive volumes, every face shared by exactly two tets or
    lying flat on the cube boundary, boundary faces tiling the full
    surface (area 6), total volume 1, and absence of hanging vertices.
    """
    geo = mesh.geometry()
    if abs(geo.volumes.sum() - 1.0) > 1e-10:
        raise MeshError(f"total volume {geo.volumes.sum()!r} != 1")
    bdry = geo.boundary
    coords = mesh.vertices[geo.faces[bdry]]        # (B, 3, 3)
    on_plane = np.isclose(coords, 0.0, atol=atol) | np.isclose(coords, 1.0,
                                                               atol=atol)
    if not np.all(on_plane.all(axis=1).any(axis=1)):
        raise MeshError("single-sided face not on the domain boundary")
    if abs(geo.face_areas[bdry].sum() - 6.0) > 1e-9:
        raise MeshError("boundary faces do not tile the cube surface")
    # hanging vertices: a used vertex sitting at an edge midpoint
    mids = mesh._midpoint_map()
    if mids:
        used = mesh.used_mask
        cells = mesh.cells
        stride = mesh.n_vertices + 1
        live = np.array([(a, b) for (a, b), v in mids.items() if used[v]],
                        dtype=np.int64)
        if len(live):
            live_codes = np.sort(live[:, 0] * stride + live[:, 1])
            for i, j in _EDGES:
                lo = np.minimum(cells[:, i], cells[:, j])
                hi = np.maximum(cells[:, i], cells[:, j])
                codes = lo * stride + hi
                pos = np.searchsorted(live_codes, codes)
                pos[pos == len(live_codes)] = 0
                if np.any(live_codes[pos] == codes):
                    raise MeshError("hanging vertex detected")


def shape_regularity(mesh: SimplicialMesh) -> float:
    """Max ratio of element diameter to inscribed-sphere diameter."""
    geo = mesh.geometry()
    cells = mesh.cells
    p = mesh.vertices[cells]
    area = np.zeros(len(cells))
    for f in _FACES:
        q = p[:, f]
        area += 0.5 * np.linalg.norm(
            np.cross(q[:, 1] - q[:, 0], q[:, 2] - q[:, 0]), axis=1)
    r_in = 3.0 * geo.volumes / area
    return float(np.max(geo.h_k / (2.0 * r_in)))


def genealogy_audit(mesh: SimplicialMesh, atol: float = 1e-12) -> None:
    """Check every non-root active tet lies inside its parent's closure."""
    ids = mesh.active_ids
    par = mesh._parent[ids]
    child_ids = ids[par >= 0]
    if len(child_ids) == 0:
        return
    pconn = mesh._tets[mesh._parent[child_ids]]
    pts = mesh.vertices[mesh._tets[child_ids]]     # (C, 4, 3)
    p0 = mesh.vertices[pconn[:, 0]]
    edge = np.stack([mesh.vertices[pconn[:, k]] - p0 for k in (1, 2, 3)],
                    axis=1)                        # (C, 3, 3)
    inv = np.linalg.inv(np.transpose(edge, (0, 2, 1)))
    lam = np.einsum("cij,cvj->cvi", inv, pts - p0[:, None, :])
    bary = np.concatenate([1.0 - lam.sum(axis=2, keepdims=True), lam], axis=2)
    if bary.min() < -1e-9:
        raise MeshError("child tet escapes its parent's closure")
