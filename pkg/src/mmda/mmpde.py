"""Mesh movement toward metric uniformity via a gradient flow.

The flow evolves an intermediate computational mesh: starting from the fixed
uniform reference mesh, the computational vertices follow the (damped)
negative gradient of the meshing energy while the physical mesh stays put;
the new physical mesh is then read off by piecewise-linear correspondence.
Explicit Euler substeps with backtracking keep the energy non-increasing and
every intermediate mesh nonsingular.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import (
    CORNER,
    MeshError,
    MeshTanglingError,
    SimplicialMesh,
    locate_vertex_tracked,
)
from . import metric as metric_mod


@dataclass(frozen=True)
class MeshTriple:
    """Physical mesh, intermediate computational mesh, fixed uniform reference."""

    physical: SimplicialMesh
    computational: SimplicialMesh
    reference: SimplicialMesh

    def __post_init__(self):
        if not (
            self.physical.topology is self.computational.topology
            and self.physical.topology is self.reference.topology
        ):
            raise MeshError("meshes of a triple must share connectivity")


def make_triple(mesh, reference=None):
    ref = reference if reference is not None else mesh
    return MeshTriple(mesh, ref, ref)


def enforce_boundary(topology, coords):
    """Snap boundary vertices onto the box and tie periodic partners.

    Corner vertices are pinned, edge vertices keep their sliding coordinate,
    and partner vertices across a periodic axis are averaged tangentially so
    opposing boundary faces stay conformal.
    """
    out = np.array(coords, dtype=float)
    marks = topology.boundary
    dom = topology.domain
    d = topology.dim
    if d == 1:
        # endpoints are corners; restore their exact coordinates
        c = marks == CORNER
        out[c, 0] = np.where(
            np.abs(out[c, 0] - dom[0, 0]) < np.abs(out[c, 0] - dom[0, 1]),
            dom[0, 0],
            dom[0, 1],
        )
        return out
    for axis, side, mark in ((0, 0, 1), (0, 1, 2), (1, 0, 3), (1, 1, 4)):
        out[marks == mark, axis] = dom[axis, side]
    corner = marks == CORNER
    for axis in range(d):
        out[corner, axis] = np.where(
            np.abs(out[corner, axis] - dom[axis, 0]) < np.abs(out[corner, axis] - dom[axis, 1]),
            dom[axis, 0],
            dom[axis, 1],
        )
    for axis in range(d):
        tang = 1 - axis
        p = topology.partner[:, axis]
        pair = np.where((p >= 0) & (np.arange(len(p)) < p))[0]
        if len(pair):
            avg = 0.5 * (out[pair, tang] + out[p[pair], tang])
            out[pair, tang] = avg
            out[p[pair], tang] = avg
    return out


def _spd_inv_det(M, d):
    if d == 1:
        det = M[:, 0, 0].copy()
        return 1.0 / M, det
    det = M[:, 0, 0] * M[:, 1, 1] - M[:, 0, 1] * M[:, 1, 0]
    inv = np.empty_like(M)
    inv[:, 0, 0] = M[:, 1, 1]
    inv[:, 1, 1] = M[:, 0, 0]
    inv[:, 0, 1] = -M[:, 0, 1]
    inv[:, 1, 0] = -M[:, 1, 0]
    return inv / det[:, None, None], det


def _mul22(A, B):
    out = np.empty_like(A)
    out[:, 0, 0] = A[:, 0, 0] * B[:, 0, 0] + A[:, 0, 1] * B[:, 1, 0]
    out[:, 0, 1] = A[:, 0, 0] * B[:, 0, 1] + A[:, 0, 1] * B[:, 1, 1]
    out[:, 1, 0] = A[:, 1, 0] * B[:, 0, 0] + A[:, 1, 1] * B[:, 1, 0]
    out[:, 1, 1] = A[:, 1, 0] * B[:, 0, 1] + A[:, 1, 1] * B[:, 1, 1]
    return out


class _FlowSetup:
    """Quantities fixed while the physical mesh is held and xi evolves."""

    def __init__(self, physical, metric, tau):
        M = metric.matrices if hasattr(metric, "matrices") else np.asarray(metric)
        d = physical.dim
        self.topo = physical.topology
        self.dim = d
        self.phys_vertices = physical.vertices
        self.einv = physical.edge_inverses
        self.det_e = physical.edge_dets
        self.vol = physical.volumes
        self.minv, self.det_m = _spd_inv_det(M, d)
        if self.det_m.min() <= 0.0:
            raise ValueError("metric must be positive definite")
        self.sqrt_det_m = np.sqrt(self.det_m)
        mv = physical.vertex_patch_average(M.reshape(-1, d * d)).reshape(-1, d, d)
        _, det_mv = _spd_inv_det(mv, d)
        self.vertex_factor = np.sqrt(det_mv) / tau
        self.p1 = 0.75 * d  # exponent 3d/4
        self.dpow = d ** (0.75 * d)

    def _jacobians(self, xi):
        xc = xi[self.topo.elements]
        ec = np.swapaxes(xc[:, 1:, :] - xc[:, :1, :], 1, 2)
        if self.dim == 1:
            J = ec * self.einv
            det_ec = ec[:, 0, 0]
        else:
            J = _mul22(ec, self.einv)
            det_ec = ec[:, 0, 0] * ec[:, 1, 1] - ec[:, 0, 1] * ec[:, 1, 0]
        det_j = det_ec / self.det_e
        return ec, J, det_j

    def _energy_terms(self, J, det_j):
        if self.dim == 1:
            t = J[:, 0, 0] ** 2 * self.minv[:, 0, 0]
        else:
            m = self.minv
            t = (
                J[:, 0, 0] * (J[:, 0, 0] * m[:, 0, 0] + J[:, 0, 1] * m[:, 1, 0])
                + J[:, 0, 1] * (J[:, 0, 0] * m[:, 0, 1] + J[:, 0, 1] * m[:, 1, 1])
                + J[:, 1, 0] * (J[:, 1, 0] * m[:, 0, 0] + J[:, 1, 1] * m[:, 1, 0])
                + J[:, 1, 1] * (J[:, 1, 0] * m[:, 0, 1] + J[:, 1, 1] * m[:, 1, 1])
            )
        term1 = t ** self.p1 / 3.0
        term2 = self.dpow / 3.0 * (det_j / self.sqrt_det_m) ** 1.5
        e = float(np.sum(self.vol * self.sqrt_det_m * (term1 + term2)))
        return t, e

    def eval_geometry(self, xi):
        """Jacobians plus energy at xi, or None if an element inverted."""
        ec, J, det_j = self._jacobians(xi)
        if det_j.min() <= 0.0:
            return None
        t, e = self._energy_terms(J, det_j)
        return {"ec": ec, "J": J, "det_j": det_j, "t": t, "e": e}

    def energy(self, xi):
        g = self.eval_geometry(xi)
        if g is None:
            _, _, det_j = self._jacobians(xi)
            k = int(np.argmin(det_j))
            raise MeshTanglingError(k, det_j[k])
        return g["e"]

    def element_velocity_blocks(self, xi, with_energy=False):
        """Local velocity rows (v_0 .. v_d) per element, shape (N, d+1, d)."""
        g = self.eval_geometry(xi)
        if g is None:
            _, _, det_j = self._jacobians(xi)
            k = int(np.argmin(det_j))
            raise MeshTanglingError(k, det_j[k])
        blocks = self._blocks_from(g)
        return (blocks, g["e"]) if with_energy else blocks

    def _blocks_from(self, g):
        ec, J, det_j, t = g["ec"], g["J"], g["det_j"], g["t"]
        if self.dim == 1:
            minv_jt = self.minv * np.swapaxes(J, 1, 2)
        else:
            minv_jt = _mul22(self.minv, np.swapaxes(J, 1, 2))
        dg_dj = (0.5 * self.dim) * (self.sqrt_det_m * t ** (self.p1 - 1.0))[:, None, None] * minv_jt
        dg_ddet = 0.5 * self.dpow * self.det_m ** -0.25 * np.sqrt(det_j)
        if self.dim == 1:
            ecinv = 1.0 / ec
            rows = -self.einv * dg_dj - (dg_ddet * det_j)[:, None, None] * ecinv
        else:
            det_ec = det_j * self.det_e
            ecinv = np.empty_like(ec)
            ecinv[:, 0, 0] = ec[:, 1, 1]
            ecinv[:, 1, 1] = ec[:, 0, 0]
            ecinv[:, 0, 1] = -ec[:, 0, 1]
            ecinv[:, 1, 0] = -ec[:, 1, 0]
            ecinv = ecinv / det_ec[:, None, None]
            rows = -_mul22(self.einv, dg_dj) - (dg_ddet * det_j)[:, None, None] * ecinv
        blocks = np.empty((rows.shape[0], self.dim + 1, self.dim))
        blocks[:, 1:, :] = rows
        blocks[:, 0, :] = -rows.sum(axis=1)
        return blocks

    def velocities_from(self, g):
        """Assemble vertex velocities from an eval_geometry result."""
        blocks = self._blocks_from(g)
        contrib = (self.vol[:, None, None] * blocks).reshape(-1, self.dim)
        flat = self.topo.elements.ravel()
        v = np.stack(
            [np.bincount(flat, weights=contrib[:, a], minlength=self.topo.n_vertices)
             for a in range(self.dim)],
            axis=1,
        )
        v *= self.vertex_factor[:, None]
        v[~self.topo.free_axes] = 0.0
        if self.dim == 2:
            for axis in range(2):
                p = self.topo.partner[:, axis]
                pair = np.where((p >= 0) & (np.arange(len(p)) < p))[0]
                if len(pair):
                    tang = 1 - axis
                    avg = 0.5 * (v[pair, tang] + v[p[pair], tang])
                    v[pair, tang] = avg
                    v[p[pair], tang] = avg
        return v

    def velocities(self, xi):
        """Computational vertex velocities with boundary projection and ties."""
        g = self.eval_geometry(xi)
        if g is None:
            _, _, det_j = self._jacobians(xi)
            k = int(np.argmin(det_j))
            raise MeshTanglingError(k, det_j[k])
        return self.velocities_from(g)


def energy(triple, metric):
    """Meshing energy of the triple (physical mesh measured in the metric)."""
    setup = _FlowSetup(triple.physical, metric, tau=1.0)
    return setup.energy(triple.computational.vertices)


def nodal_velocities(triple, metric, tau):
    """Gradient-flow velocities of the computational vertices, shape (M, d)."""
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    setup = _FlowSetup(triple.physical, metric, tau)
    return setup.velocities(triple.computational.vertices)


def move_mesh(triple, metric, tau, dt, substeps=5, stats=None, max_halvings=40):
    """One physical time step of mesh movement.

    Integrates the computational vertices from the reference mesh with
    explicit Euler substeps (halving a substep whenever it would raise the
    energy or tangle), then maps the reference vertices through the updated
    correspondence to produce the new physical mesh.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    setup = _FlowSetup(triple.physical, metric, tau)
    topo = triple.physical.topology
    xi = triple.reference.vertices.copy()
    geom = setup.eval_geometry(xi)
    if geom is None:
        raise MeshError("reference computational mesh is singular in this correspondence")
    h = dt / substeps
    for _ in range(substeps):
        v = setup.velocities_from(geom)
        step = h
        e_start = geom["e"]
        for _ in range(max_halvings):
            trial = xi + step * v
            g_new = setup.eval_geometry(trial)
            if g_new is not None and g_new["e"] <= geom["e"] * (1.0 + 1e-12):
                xi = trial
                geom = g_new
                break
            step *= 0.5
        else:
            raise MeshError("mesh relaxation failed: no descending substep found")
        if stats is not None:
            stats.append((e_start, geom["e"]))

    comp_new = SimplicialMesh(topo, xi)
    elem, bary = locate_vertex_tracked(comp_new, triple.reference.vertices)
    x_new = np.einsum("pk,pkd->pd", bary, triple.physical.vertices[topo.elements[elem]])
    x_new = enforce_boundary(topo, x_new)
    phys_new = SimplicialMesh(topo, x_new)
    return MeshTriple(phys_new, comp_new, triple.reference)


def generate_common_mesh(previous_common, combined_metric, tau=0.01, dt=None,
                         max_iter=50, tol=1e-4, substeps=5):
    """Relax the previous common mesh toward uniformity in the combined metric.

    Iterates move_mesh until the largest vertex displacement drops below
    tol times the mean element diameter, or max_iter iterations.
    """
    step = dt if dt is not None else tau
    scale = float(np.mean(previous_common.physical.diameters))
    triple = previous_common
    for _ in range(max_iter):
        new = move_mesh(triple, combined_metric, tau, step, substeps=substeps)
        disp = np.abs(new.physical.vertices - triple.physical.vertices).max()
        triple = new
        if disp < tol * scale:
            break
    return triple.physical


def remesh_member(state, triple, tau=0.01, sweeps=2, max_iter=5, tol=1e-4, substeps=5,
                  metric_det_cap=100.0):
    """Adapt a member's mesh to its analysis state and transport the state.

    Rebuilds the curvature metric from the state, relaxes the mesh toward it,
    and conservatively interpolates the state onto the new mesh.
    """
    from . import interp  # late import: interp builds on the solver machinery

    phys = triple.physical
    m = metric_mod.smooth_metric(
        metric_mod.hessian_metric(phys, state, det_cap=metric_det_cap), phys, sweeps
    )
    new_mesh = generate_common_mesh(triple, m, tau=tau, max_iter=max_iter,
                                    tol=tol, substeps=substeps)
    new_triple = MeshTriple(new_mesh, triple.reference, triple.reference)
    deformation = interp.MeshDeformation(phys, new_mesh)
    new_state = interp.dg_interpolate(state, deformation)
    return new_state, new_triple
