"""Simplicial meshes on box domains: construction, geometry, quality measures.

Meshes are 1D interval chains or 2D triangulations with fixed connectivity.
Connectivity (a MeshTopology) is built once and shared by every mesh derived
from it, so "same connectivity" checks reduce to object identity.  Vertex
positions are immutable; moving a mesh produces a new SimplicialMesh.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

INTERIOR = 0
CORNER = -1
# boundary edge ids on a box: 1 = x min, 2 = x max, 3 = y min, 4 = y max


class MeshError(Exception):
    pass


class MeshTanglingError(MeshError):
    """A mesh update produced an element with non-positive volume."""

    def __init__(self, element, volume):
        self.element = int(element)
        self.volume = float(volume)
        super().__init__(f"element {element} has non-positive volume {volume:.3e}")


class OutOfDomainError(MeshError):
    pass


@dataclass(frozen=True)
class ReferenceElement:
    """Equilateral d-simplex with unit volume."""

    dim: int
    vertices: np.ndarray

    @property
    def edge_matrix(self):
        return (self.vertices[1:] - self.vertices[0]).T


def reference_element(dim):
    if dim == 1:
        verts = np.array([[0.0], [1.0]])
    elif dim == 2:
        # side length a with area sqrt(3)/4 * a^2 = 1
        a = 2.0 / 3.0 ** 0.25
        verts = np.array([[0.0, 0.0], [a, 0.0], [a / 2.0, a * math.sqrt(3.0) / 2.0]])
    else:
        raise ValueError(f"unsupported dimension {dim}")
    return ReferenceElement(dim, verts)


def _local_faces(dim):
    # face k is opposite local vertex k
    if dim == 1:
        return [(1,), (0,)]
    return [(1, 2), (2, 0), (0, 1)]


class MeshTopology:
    """Connectivity shared by all meshes of one run.

    Holds elements, boundary markers, vertex patches, the face list used by
    DG fluxes (interior faces plus periodic boundary pairs), and the periodic
    partner maps used to keep sliding boundary vertices conformal.
    """

    def __init__(self, dim, elements, boundary, domain, init_vertices):
        self.dim = int(dim)
        self.elements = np.asarray(elements, dtype=np.intp)
        self.boundary = np.asarray(boundary, dtype=np.intp)
        self.domain = np.asarray(domain, dtype=float).reshape(dim, 2)
        self.n_elements = self.elements.shape[0]
        self.n_vertices = self.boundary.shape[0]
        if self.elements.shape[1] != dim + 1:
            raise MeshError("element tuples must have d+1 vertices")
        if self.elements.min() < 0 or self.elements.max() >= self.n_vertices:
            raise MeshError("element tuple indexes an invalid vertex")
        self._build_periodic_partners(np.asarray(init_vertices, dtype=float))
        self._build_faces(np.asarray(init_vertices, dtype=float))
        self._build_neighbors()

    def _build_periodic_partners(self, verts):
        """Match opposite-boundary vertices by their tangential coordinate."""
        self.partner = np.full((self.n_vertices, self.dim), -1, dtype=np.intp)
        if self.dim == 1:
            lo = np.where(np.isclose(verts[:, 0], self.domain[0, 0]))[0]
            hi = np.where(np.isclose(verts[:, 0], self.domain[0, 1]))[0]
            if len(lo) == 1 and len(hi) == 1:
                self.partner[lo[0], 0] = hi[0]
                self.partner[hi[0], 0] = lo[0]
            return
        for axis in range(2):
            tang = 1 - axis
            scale = max(self.domain[tang, 1] - self.domain[tang, 0], 1.0)
            lo = np.where(np.isclose(verts[:, axis], self.domain[axis, 0]))[0]
            hi = np.where(np.isclose(verts[:, axis], self.domain[axis, 1]))[0]
            lo = lo[np.argsort(verts[lo, tang])]
            hi = hi[np.argsort(verts[hi, tang])]
            if len(lo) != len(hi):
                raise MeshError("periodic boundaries have mismatched vertex counts")
            if len(lo) and np.max(np.abs(verts[lo, tang] - verts[hi, tang])) > 1e-9 * scale:
                raise MeshError("periodic boundary vertices are not conformal")
            self.partner[lo, axis] = hi
            self.partner[hi, axis] = lo

    def _build_faces(self, verts):
        faces = {}
        local = _local_faces(self.dim)
        for k in range(self.n_elements):
            for lf, slots in enumerate(local):
                gids = tuple(sorted(self.elements[k, list(slots)]))
                faces.setdefault(gids, []).append((k, lf))
        interior, boundary_faces = [], {}
        for gids, owners in faces.items():
            if len(owners) == 2:
                interior.append((gids, owners[0], owners[1], False))
            elif len(owners) == 1:
                boundary_faces[gids] = owners[0]
            else:
                raise MeshError(f"face {gids} shared by {len(owners)} elements")
        # pair each boundary face with its periodic image
        seen = set()
        for gids, owner in boundary_faces.items():
            if gids in seen:
                continue
            axis = self._face_axis(gids, verts)
            mapped = tuple(sorted(self.partner[list(gids), axis]))
            if min(mapped) < 0 or mapped not in boundary_faces:
                raise MeshError(f"boundary face {gids} has no periodic partner")
            seen.add(gids)
            seen.add(mapped)
            if gids == mapped:
                raise MeshError("degenerate periodic face")
            interior.append((gids, owner, boundary_faces[mapped], True))

        F = len(interior)
        d = self.dim
        self.face_elems = np.empty((F, 2), dtype=np.intp)
        self.face_slots = np.empty((F, 2, d), dtype=np.intp)
        self.face_gv = np.empty((F, d), dtype=np.intp)
        self.face_local = np.empty((F, 2), dtype=np.intp)
        self.face_periodic = np.zeros(F, dtype=bool)
        sign = np.empty(F)
        for i, (gids, (kl, lfl), (kr, lfr), periodic) in enumerate(interior):
            self.face_elems[i] = (kl, kr)
            self.face_local[i] = (lfl, lfr)
            self.face_periodic[i] = periodic
            self.face_gv[i] = gids
            left = list(self.elements[kl])
            self.face_slots[i, 0] = [left.index(g) for g in gids]
            if periodic:
                axis = self._face_axis(gids, verts)
                rgids = self.partner[list(gids), axis]
            else:
                rgids = gids
            right = list(self.elements[kr])
            self.face_slots[i, 1] = [right.index(g) for g in rgids]
            sign[i] = self._outward_sign(i, kl, verts)
        self.face_sign = sign

    def _face_axis(self, gids, verts):
        for axis in range(self.dim):
            for side in range(2):
                if np.allclose(verts[list(gids), axis], self.domain[axis, side]):
                    return axis
        raise MeshError(f"boundary face {gids} does not lie on a domain edge")

    def _outward_sign(self, i, kl, verts):
        if self.dim == 1:
            v = self.face_gv[i, 0]
            other = self.elements[kl][self.elements[kl] != v][0]
            return 1.0 if verts[v, 0] > verts[other, 0] else -1.0
        a, b = self.face_gv[i]
        t = verts[b] - verts[a]
        n = np.array([t[1], -t[0]])
        opp_slot = [s for s in range(3) if s not in self.face_slots[i, 0]][0]
        opp = verts[self.elements[kl, opp_slot]]
        mid = 0.5 * (verts[a] + verts[b])
        return 1.0 if np.dot(n, opp - mid) < 0 else -1.0

    def _build_neighbors(self):
        d = self.dim
        self.elem_neighbors = np.full((self.n_elements, d + 1), -1, dtype=np.intp)
        self.elem_neighbors_interior = np.full((self.n_elements, d + 1), -1, dtype=np.intp)
        for i in range(self.face_elems.shape[0]):
            kl, kr = self.face_elems[i]
            lfl, lfr = self.face_local[i]
            self.elem_neighbors[kl, lfl] = kr
            self.elem_neighbors[kr, lfr] = kl
            if not self.face_periodic[i]:
                self.elem_neighbors_interior[kl, lfl] = kr
                self.elem_neighbors_interior[kr, lfr] = kl

    @cached_property
    def free_axes(self):
        """Per-vertex mask of coordinate axes free to move (MMPDE boundary rule)."""
        free = np.ones((self.n_vertices, self.dim), dtype=bool)
        marks = self.boundary
        free[marks == CORNER] = False
        if self.dim == 2:
            free[marks == 1, 0] = False
            free[marks == 2, 0] = False
            free[marks == 3, 1] = False
            free[marks == 4, 1] = False
        return free

    @cached_property
    def vertex_rings(self):
        """Padded per-vertex candidate element tables (one-ring, two-ring).

        Used to accelerate point location for points that track mesh vertices.
        """
        one_ring = [[] for _ in range(self.n_vertices)]
        for k, elem in enumerate(self.elements):
            for v in elem:
                one_ring[v].append(k)
        two_ring = []
        for v in range(self.n_vertices):
            cand = set()
            for k in one_ring[v]:
                for w in self.elements[k]:
                    cand.update(one_ring[w])
            two_ring.append(sorted(cand))

        def pad(rows):
            width = max(len(r) for r in rows)
            out = np.full((self.n_vertices, width), -1, dtype=np.intp)
            for v, r in enumerate(rows):
                out[v, : len(r)] = r
            return out

        return pad(one_ring), pad(two_ring)


class SimplicialMesh:
    """Vertex positions over a shared MeshTopology.

    Hot geometric quantities (edge matrices, volumes) are computed eagerly at
    construction, which also validates that every element keeps positive
    volume; the rest is cached on first use.
    """

    def __init__(self, topology, vertices, validate=True):
        self.topology = topology
        self.vertices = np.asarray(vertices, dtype=float)
        if self.vertices.shape != (topology.n_vertices, topology.dim):
            raise MeshError("vertex array shape does not match topology")
        xc = self.vertices[topology.elements]
        self.element_coords = xc
        E = np.swapaxes(xc[:, 1:, :] - xc[:, :1, :], 1, 2)
        self.edge_matrices = E
        if topology.dim == 1:
            self.edge_dets = E[:, 0, 0].copy()
        else:
            self.edge_dets = E[:, 0, 0] * E[:, 1, 1] - E[:, 0, 1] * E[:, 1, 0]
        self.volumes = self.edge_dets / math.factorial(topology.dim)
        if validate:
            worst = int(np.argmin(self.volumes))
            if self.volumes[worst] <= 0.0:
                raise MeshTanglingError(worst, self.volumes[worst])

    @property
    def dim(self):
        return self.topology.dim

    @property
    def n_vertices(self):
        return self.topology.n_vertices

    @property
    def n_elements(self):
        return self.topology.n_elements

    @property
    def elements(self):
        return self.topology.elements

    @property
    def boundary(self):
        return self.topology.boundary

    def with_vertices(self, vertices, validate=True):
        return SimplicialMesh(self.topology, vertices, validate=validate)

    @cached_property
    def edge_inverses(self):
        E = self.edge_matrices
        if self.dim == 1:
            return 1.0 / E
        det = self.edge_dets[:, None, None]
        inv = np.empty_like(E)
        inv[:, 0, 0] = E[:, 1, 1]
        inv[:, 1, 1] = E[:, 0, 0]
        inv[:, 0, 1] = -E[:, 0, 1]
        inv[:, 1, 0] = -E[:, 1, 0]
        return inv / det

    @cached_property
    def basis_gradients(self):
        """Gradients of the nodal P1 basis, shape (N, d+1, d)."""
        einv = self.edge_inverses
        g = np.empty((self.n_elements, self.dim + 1, self.dim))
        g[:, 1:, :] = einv
        g[:, 0, :] = -einv.sum(axis=1)
        return g

    @cached_property
    def centroids(self):
        return self.element_coords.mean(axis=1)

    @cached_property
    def diameters(self):
        """Longest edge per element."""
        xc = self.element_coords
        if self.dim == 1:
            return np.abs(xc[:, 1, 0] - xc[:, 0, 0])
        d01 = np.linalg.norm(xc[:, 0] - xc[:, 1], axis=1)
        d12 = np.linalg.norm(xc[:, 1] - xc[:, 2], axis=1)
        d20 = np.linalg.norm(xc[:, 2] - xc[:, 0], axis=1)
        return np.maximum(np.maximum(d01, d12), d20)

    @cached_property
    def altitudes(self):
        """Smallest height per element, the length scale for CFL limits."""
        if self.dim == 1:
            return self.volumes
        return 2.0 * self.volumes / self.diameters

    def vertex_patch_average(self, per_element):
        """Volume-weighted average of element data over each vertex patch."""
        vals = np.asarray(per_element, dtype=float)
        vol = self.volumes
        topo = self.topology
        flat = topo.elements.ravel()
        k = topo.dim + 1
        den = np.bincount(flat, weights=np.repeat(vol, k), minlength=topo.n_vertices)
        if vals.ndim == 1:
            num = np.bincount(flat, weights=np.repeat(vol * vals, k),
                              minlength=topo.n_vertices)
            return num / den
        extra = vals.shape[1:]
        wvals = np.repeat((vol.reshape((-1,) + (1,) * len(extra)) * vals)[:, None],
                          k, axis=1).reshape((len(flat), -1))
        num = np.stack(
            [np.bincount(flat, weights=wvals[:, j], minlength=topo.n_vertices)
             for j in range(wvals.shape[1])],
            axis=1,
        ).reshape((topo.n_vertices,) + extra)
        return num / den.reshape((-1,) + (1,) * len(extra))


def replicate_topology(topology, count):
    """Disjoint union of `count` copies of a topology (members side by side).

    Element/vertex/face tables are tiled with block offsets; the copies share
    no faces, so batched operations on the union behave exactly like per-copy
    operations.  Used to advance a whole ensemble in one array program.
    """
    if count < 1:
        raise ValueError("count must be positive")
    if count == 1:
        return topology
    t = MeshTopology.__new__(MeshTopology)
    d = topology.dim
    n, m = topology.n_elements, topology.n_vertices
    t.dim = d
    t.domain = topology.domain
    t.n_elements = n * count
    t.n_vertices = m * count
    voff = np.arange(count, dtype=np.intp) * m
    eoff = np.arange(count, dtype=np.intp) * n

    def tile_idx(arr, off):
        tiled = np.tile(arr, (count,) + (1,) * arr.ndim)
        shift = off.reshape((count,) + (1,) * arr.ndim)
        tiled = np.where(tiled >= 0, tiled + shift, -1)
        return tiled.reshape((-1,) + arr.shape[1:])

    t.elements = tile_idx(topology.elements, voff)
    t.boundary = np.tile(topology.boundary, count)
    t.partner = tile_idx(topology.partner, voff)
    t.face_elems = tile_idx(topology.face_elems, eoff)
    t.face_slots = np.tile(topology.face_slots, (count, 1, 1))
    t.face_gv = tile_idx(topology.face_gv, voff)
    t.face_local = np.tile(topology.face_local, (count, 1))
    t.face_periodic = np.tile(topology.face_periodic, count)
    t.face_sign = np.tile(topology.face_sign, count)
    t.elem_neighbors = tile_idx(topology.elem_neighbors, eoff)
    t.elem_neighbors_interior = tile_idx(topology.elem_neighbors_interior, eoff)
    t.__dict__["free_axes"] = np.tile(topology.free_axes, (count, 1))
    r1, r2 = topology.vertex_rings
    t.__dict__["vertex_rings"] = (tile_idx(r1, eoff), tile_idx(r2, eoff))
    return t


def build_uniform_mesh(domain, resolution):
    """Uniform mesh of an axis-aligned box.

    domain: (lo, hi) in 1D or ((xlo, xhi), (ylo, yhi)) in 2D.
    resolution: vertex count per axis (>= 2); in 2D each grid cell is split
    into two triangles along the lower-left to upper-right diagonal.
    """
    dom = np.asarray(domain, dtype=float)
    if dom.ndim == 1:
        dom = dom[None, :]
    dim = dom.shape[0]
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (dim,))
    if np.any(res < 2):
        raise ValueError("resolution must be at least 2 vertices per axis")
    if np.any(dom[:, 1] <= dom[:, 0]):
        raise ValueError("degenerate domain: each axis needs positive extent")

    if dim == 1:
        m = int(res[0])
        verts = np.linspace(dom[0, 0], dom[0, 1], m)[:, None]
        elems = np.stack([np.arange(m - 1), np.arange(1, m)], axis=1)
        marks = np.full(m, INTERIOR, dtype=np.intp)
        marks[0] = CORNER
        marks[-1] = CORNER
    elif dim == 2:
        nx, ny = int(res[0]), int(res[1])
        xs = np.linspace(dom[0, 0], dom[0, 1], nx)
        ys = np.linspace(dom[1, 0], dom[1, 1], ny)
        X, Y = np.meshgrid(xs, ys, indexing="xy")
        verts = np.stack([X.ravel(), Y.ravel()], axis=1)
        elems = []
        for j in range(ny - 1):
            for i in range(nx - 1):
                v00 = j * nx + i
                v10 = v00 + 1
                v01 = v00 + nx
                v11 = v01 + 1
                elems.append((v00, v10, v11))
                elems.append((v00, v11, v01))
        elems = np.asarray(elems, dtype=np.intp)
        marks = np.full(nx * ny, INTERIOR, dtype=np.intp)
        idx = np.arange(nx * ny)
        ii, jj = idx % nx, idx // nx
        marks[ii == 0] = 1
        marks[ii == nx - 1] = 2
        marks[jj == 0] = 3
        marks[jj == ny - 1] = 4
        corner = ((ii == 0) | (ii == nx - 1)) & ((jj == 0) | (jj == ny - 1))
        marks[corner] = CORNER
    else:
        raise ValueError(f"unsupported dimension {dim}")

    topo = MeshTopology(dim, elems, marks, dom, verts)
    return SimplicialMesh(topo, verts)


def edge_matrix(mesh, k):
    """Edge matrix of element k, columns x_i - x_0."""
    return mesh.edge_matrices[k]


def locate_points(mesh, points, tol=1e-10):
    """Locate points in the mesh; returns (element ids, barycentric coords).

    Ties on shared faces go to the lowest element id.  Points outside the
    domain closure (beyond tol) raise OutOfDomainError.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    x0 = mesh.element_coords[:, 0, :]
    # lam[p, n, i] = barycentric coordinate i+1 of point p in element n
    diff = pts[:, None, :] - x0[None, :, :]
    lam = np.einsum("nij,pnj->pni", mesh.edge_inverses, diff)
    b0 = 1.0 - lam.sum(axis=2)
    bary = np.concatenate([b0[:, :, None], lam], axis=2)
    violation = np.maximum(-bary.min(axis=2), bary.max(axis=2) - 1.0)
    inside = violation <= tol
    found = inside.any(axis=1)
    if not found.all():
        bad = pts[~found][0]
        raise OutOfDomainError(f"point {bad} lies outside the mesh")
    elem = inside.argmax(axis=1)
    out = bary[np.arange(len(pts)), elem]
    out = np.clip(out, 0.0, 1.0)
    out /= out.sum(axis=1, keepdims=True)
    return elem, out


def locate_point(mesh, x, tol=1e-10):
    elem, bary = locate_points(mesh, np.asarray(x, dtype=float)[None, :], tol=tol)
    return int(elem[0]), bary[0]


def _locate_in_candidates(mesh, pts, rings, tol):
    valid = rings >= 0
    safe = np.where(valid, rings, 0)
    x0 = mesh.element_coords[:, 0, :][safe]  # (P, R, d)
    einv = mesh.edge_inverses[safe]  # (P, R, d, d)
    dx = pts[:, None, :] - x0
    if mesh.dim == 1:
        l1 = einv[:, :, 0, 0] * dx[:, :, 0]
        bary = np.stack([1.0 - l1, l1], axis=2)
    else:
        l1 = einv[:, :, 0, 0] * dx[:, :, 0] + einv[:, :, 0, 1] * dx[:, :, 1]
        l2 = einv[:, :, 1, 0] * dx[:, :, 0] + einv[:, :, 1, 1] * dx[:, :, 1]
        bary = np.stack([1.0 - l1 - l2, l1, l2], axis=2)
    violation = np.maximum(-bary.min(axis=2), bary.max(axis=2) - 1.0)
    violation = np.where(valid, violation, np.inf)
    inside = violation <= tol
    found = inside.any(axis=1)
    pick = inside.argmax(axis=1)
    elem = safe[np.arange(len(pts)), pick]
    return elem, bary[np.arange(len(pts)), pick], found


def locate_vertex_tracked(mesh, points, tol=1e-9):
    """Locate point i using the element rings of vertex i as candidates.

    points must have one row per mesh vertex.  Tries the one-ring, then the
    two-ring, and finally a full scan for points that escaped both.  Candidate
    rings are sorted so the lowest-id containing element wins, like
    locate_points.
    """
    pts = np.asarray(points, dtype=float)
    ring1, ring2 = mesh.topology.vertex_rings
    elem, out, found = _locate_in_candidates(mesh, pts, ring1, tol)
    if not found.all():
        missing = np.where(~found)[0]
        e2, b2, f2 = _locate_in_candidates(mesh, pts[missing], ring2[missing], tol)
        elem[missing] = e2
        out[missing] = b2
        found[missing] = f2
        if not f2.all():
            left = missing[~f2]
            e3, b3 = locate_points(mesh, pts[left], tol=max(tol, 1e-10))
            elem[left] = e3
            out[left] = b3
    out = np.clip(out, 0.0, 1.0)
    out /= out.sum(axis=1, keepdims=True)
    return elem, out


def _metric_matrices(metric):
    return getattr(metric, "matrices", np.asarray(metric))


def _metric_dets(matrices, dim):
    if dim == 1:
        return matrices[:, 0, 0]
    return matrices[:, 0, 0] * matrices[:, 1, 1] - matrices[:, 0, 1] * matrices[:, 1, 0]


def equidistribution_quality(mesh, metric):
    """Per-element ratio q_K = |K| sqrt(det M_K) N / sigma_h (1 when equidistributed)."""
    M = _metric_matrices(metric)
    dets = _metric_dets(M, mesh.dim)
    if np.any(dets <= 0.0):
        raise ValueError("metric must be positive definite")
    w = mesh.volumes * np.sqrt(dets)
    sigma = w.sum()
    return w * mesh.n_elements / sigma


def alignment_quality(mesh, metric):
    """Per-element AM/GM ratio of (F')^-1 M^-1 (F')^-T; 1 iff equilateral in M."""
    M = _metric_matrices(metric)
    ref = reference_element(mesh.dim)
    Ehat = ref.edge_matrix
    E = mesh.edge_matrices
    d = mesh.dim
    # F' maps the reference element onto K: F' = E Ehat^-1
    Fp = E @ np.linalg.inv(Ehat)[None, :, :]
    if np.any(np.abs(np.linalg.det(Fp)) < 1e-300):
        raise ValueError("singular element map")
    Fpi = np.linalg.inv(Fp)
    S = Fpi @ np.linalg.inv(M) @ np.swapaxes(Fpi, 1, 2)
    tr = np.trace(S, axis1=1, axis2=2) / d
    det = np.linalg.det(S) ** (1.0 / d)
    return tr / det


def write_mesh(mesh, path):
    """Plain-text snapshot: `dim M N`, vertices, elements, boundary markers."""
    with open(path, "w") as fh:
        fh.write(f"{mesh.dim} {mesh.n_vertices} {mesh.n_elements}\n")
        for v in mesh.vertices:
            fh.write(" ".join(repr(float(c)) for c in v) + "\n")
        for e in mesh.elements:
            fh.write(" ".join(str(int(i)) for i in e) + "\n")
        for b in mesh.boundary:
            fh.write(f"{int(b)}\n")


def read_mesh(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    dim, m, n = (int(t) for t in lines[0].split())
    verts = np.array([[float(t) for t in ln.split()] for ln in lines[1 : 1 + m]])
    elems = np.array([[int(t) for t in ln.split()] for ln in lines[1 + m : 1 + m + n]])
    marks = np.array([int(ln) for ln in lines[1 + m + n : 1 + m + n + m]])
    dom = np.stack([verts.min(axis=0), verts.max(axis=0)], axis=1)
    topo = MeshTopology(dim, elems, marks, dom, verts)
    return SimplicialMesh(topo, verts)
