"""State transfer between same-connectivity meshes.

dg_interpolate solves the pseudo-time transport of the state along the linear
deformation from source to target mesh with the moving-mesh DG machinery, so
total mass is conserved to roundoff.  linear_interpolate is the lossy nodal
baseline used for comparison runs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .mesh import MeshError, OutOfDomainError, SimplicialMesh, locate_vertex_tracked
from .solver import DGState, step, vertex_values

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MeshDeformation:
    """Linear vertex path x(z) = (1-z) source + z target, z in [0, 1]."""

    source: SimplicialMesh
    target: SimplicialMesh

    def __post_init__(self):
        if self.source.topology is not self.target.topology:
            raise MeshError("deformation endpoints must share connectivity")

    @property
    def displacement(self):
        return self.target.vertices - self.source.vertices

    def mesh_at(self, zeta):
        if zeta <= 0.0:
            return self.source
        if zeta >= 1.0:
            return self.target
        verts = (1.0 - zeta) * self.source.vertices + zeta * self.target.vertices
        return SimplicialMesh(self.source.topology, verts)


def default_substeps(deformation, minimum=5):
    """Pseudo-time resolution: ten crossings of the smallest element diameter.

    A second bound keeps the transport solve inside its CFL limit even when
    some element's height is much smaller than any diameter.
    """
    disp = float(np.sqrt((deformation.displacement ** 2).sum(axis=1)).max())
    diam = float(min(deformation.source.diameters.min(), deformation.target.diameters.min()))
    alt = float(min(deformation.source.altitudes.min(), deformation.target.altitudes.min()))
    if diam <= 0.0 or alt <= 0.0:
        raise MeshError("deformation endpoint has a degenerate element")
    return max(minimum, int(math.ceil(10.0 * disp / diam)),
               int(math.ceil(disp / (0.25 * alt))))


def dg_interpolate(state, deformation, substeps=None):
    """Conservative DG transfer of state from the source to the target mesh."""
    if state.mesh is not deformation.source:
        if state.mesh.topology is not deformation.source.topology or not np.array_equal(
            state.mesh.vertices, deformation.source.vertices
        ):
            raise MeshError("state does not live on the deformation's source mesh")
    n = substeps if substeps is not None else default_substeps(deformation)
    dz = 1.0 / n
    out = DGState(state.coeffs, deformation.source, state.time)
    for k in range(n):
        m_from = deformation.mesh_at(k * dz)
        m_to = deformation.mesh_at((k + 1) * dz)
        out = step(out, m_from, m_to, dz, problem=None, limiter=False)
    return DGState(out.coeffs, deformation.target, state.time)


def linear_interpolate(vertex_vals, source, target):
    """Barycentric interpolation of vertex values onto the target's vertices.

    Target vertices that fall outside the source mesh are wrapped periodically
    in 1D and clamped to the domain closure otherwise.
    """
    vals = np.asarray(vertex_vals, dtype=float)
    if vals.shape[0] != source.n_vertices:
        raise ValueError("vertex value array does not match the source mesh")
    pts = np.array(target.vertices, dtype=float)
    dom = source.topology.domain
    if source.dim == 1:
        width = dom[0, 1] - dom[0, 0]
        outside = (pts[:, 0] < dom[0, 0]) | (pts[:, 0] > dom[0, 1])
        if outside.any():
            log.debug("wrapped %d out-of-domain vertices periodically", int(outside.sum()))
            pts[outside, 0] = np.mod(pts[outside, 0] - dom[0, 0], width) + dom[0, 0]
    clipped = np.clip(pts, dom[:, 0], dom[:, 1])
    if not np.array_equal(clipped, pts):
        log.debug("clamped %d vertices to the domain closure",
                  int((clipped != pts).any(axis=1).sum()))
        pts = clipped
    try:
        elem, bary = locate_vertex_tracked(source, pts)
    except OutOfDomainError:
        # roundoff can push a clamped point just outside; retry with slack
        elem, bary = locate_vertex_tracked(source, pts, tol=1e-8)
    return np.einsum("pk,pk->p", bary, vals[source.elements[elem]])


def linear_transfer_state(state, source, target):
    """Lossy baseline transfer: vertex averages, then nodal reinterpolation."""
    vv = vertex_values(state, source)
    tv = linear_interpolate(vv, source, target)
    return DGState(tv[target.elements], target, state.time)
