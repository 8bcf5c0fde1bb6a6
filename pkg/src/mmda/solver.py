"""Moving-mesh P1 discontinuous Galerkin solver for inviscid Burgers.

States are element-local nodal values (one coefficient per element vertex),
so jumps across faces are allowed.  Time stepping is SSP-RK3 on the moment
vector w = M(t) u with the mesh interpolated linearly across the step; this
keeps free-stream preservation and total-mass conservation exact to roundoff
under periodic boundary conditions.  Fluxes are local Lax-Friedrichs with an
ALE correction for the mesh velocity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .mesh import SimplicialMesh, locate_points
from . import metric as metric_mod
from . import mmpde


class CFLError(Exception):
    pass


class ConservationError(Exception):
    pass


@dataclass
class DGState:
    """Per-element P1 coefficients (values at the element's own vertices)."""

    coeffs: np.ndarray
    mesh: SimplicialMesh
    time: float = 0.0

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        n, d = self.mesh.n_elements, self.mesh.dim
        if self.coeffs.shape != (n, d + 1):
            raise ValueError(f"expected coefficient array {(n, d + 1)}, got {self.coeffs.shape}")


@dataclass(frozen=True)
class BurgersProblem:
    dim: int
    domain: np.ndarray
    ic: Callable[[np.ndarray], np.ndarray]
    name: str


def burgers_1d(s=20.0):
    """u_t + u u_x = 0 on [0, s) with the shifted-sine initial hump."""
    dom = np.array([[0.0, s]])

    def ic(x):
        return 0.5 + np.sin(2.0 * np.pi * x[..., 0] / s)

    return BurgersProblem(1, dom, ic, "burgers1d")


def burgers_2d(half_width=0.5, upper=1.0):
    """u_t + u u_x + u u_y = 0 on (-0.5, 1)^2 with a narrow Gaussian bump."""
    dom = np.array([[-half_width, upper], [-half_width, upper]])
    gamma = -math.log(1e-16)

    def ic(x):
        return np.exp(-gamma * (x[..., 0] ** 2 + x[..., 1] ** 2))

    return BurgersProblem(2, dom, ic, "burgers2d")


# reference quadrature and mass data per dimension
def _volume_quadrature(d):
    if d == 1:
        g = 1.0 / (2.0 * math.sqrt(3.0))
        pts = np.array([[0.5 - g], [0.5 + g]])
        lam = np.concatenate([1.0 - pts.sum(axis=1, keepdims=True), pts], axis=1)
        w = np.array([0.5, 0.5])
    else:
        lam = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
        w = np.array([1.0, 1.0, 1.0]) / 3.0
    return lam, w


_VOLQ = {d: _volume_quadrature(d) for d in (1, 2)}
_FACEQ_Z = np.array([0.5 - 1.0 / (2.0 * math.sqrt(3.0)), 0.5 + 1.0 / (2.0 * math.sqrt(3.0))])


def _mass_matrices(d):
    m = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
    return m, np.linalg.inv(m)


_MHAT = {d: _mass_matrices(d) for d in (1, 2)}


def initial_condition(problem, mesh):
    """L2 projection of the analytic initial data onto the P1 elements."""
    lam, w = _VOLQ[mesh.dim]
    xq = np.einsum("qk,nkd->nqd", lam, mesh.element_coords)
    vals = problem.ic(xq)  # (N, q)
    rhs = np.einsum("q,nq,qk->nk", w, vals, lam)
    _, minv = _MHAT[mesh.dim]
    return DGState(rhs @ minv, mesh, 0.0)


def _flux_coeff(problem):
    return 1.0 if problem is not None else 0.0


class _VelocityData:
    """Per-step precomputed mesh-velocity gathers shared by all RK stages."""

    def __init__(self, topo, velocities):
        v = np.asarray(velocities, dtype=float)
        self.topo = topo
        self.vels_elem = v[topo.elements]  # (N, d+1, d)
        self.edge_vel = np.swapaxes(
            self.vels_elem[:, 1:, :] - self.vels_elem[:, :1, :], 1, 2
        )
        gv = topo.face_gv
        if topo.dim == 1:
            self.vface = v[gv[:, 0], 0]
        else:
            self.va = v[gv[:, 0]]
            self.vb = v[gv[:, 1]]

    def vol_rate(self, mesh):
        """d|K|/dt at this geometry: |K| tr(E^-1 dE/dt)."""
        einv = mesh.edge_inverses
        ev = self.edge_vel
        if self.topo.dim == 1:
            tr = einv[:, 0, 0] * ev[:, 0, 0]
        else:
            tr = (
                einv[:, 0, 0] * ev[:, 0, 0]
                + einv[:, 0, 1] * ev[:, 1, 0]
                + einv[:, 1, 0] * ev[:, 0, 1]
                + einv[:, 1, 1] * ev[:, 1, 1]
            )
        return mesh.volumes * tr


def _residual(topo, mesh, vdata, coeffs, fc):
    """Weak-form rate of the moment vector w_i = int u phi_i, shape (N, d+1).

    fc = 1 for Burgers flux u^2/2 in each advected direction, 0 for pure
    mesh transport.  The gradients of P1 basis functions are constant and the
    volume quadrature weights are uniform, so the volume term reduces to
    vol * grad_i . mean_q(adv).
    """
    d = topo.dim
    lam, wq = _VOLQ[d]
    vol = mesh.volumes
    grads = mesh.basis_gradients
    uq = coeffs @ lam.T  # (N, q)
    vq = np.moveaxis(np.tensordot(vdata.vels_elem, lam, axes=([1], [1])), 2, 1)
    adv = (0.5 * fc) * uq[:, :, None] ** 2 - uq[:, :, None] * vq
    mean_adv = adv.mean(axis=1)  # (N, d)
    if d == 1:
        R = (vol * grads[:, :, 0].T * mean_adv[:, 0]).T
    else:
        R = (
            grads[:, :, 0] * mean_adv[:, None, 0] + grads[:, :, 1] * mean_adv[:, None, 1]
        ) * vol[:, None]

    fe = topo.face_elems
    fs = topo.face_slots
    sign = topo.face_sign
    n_loc = d + 1
    size = topo.n_elements * n_loc
    if d == 1:
        um = coeffs[fe[:, 0], fs[:, 0, 0]]
        up = coeffs[fe[:, 1], fs[:, 1, 0]]
        vface = vdata.vface
        am = (0.5 * fc * um * um - um * vface) * sign
        ap = (0.5 * fc * up * up - up * vface) * sign
        if fc:
            lmax = np.maximum(np.abs(um - vface), np.abs(up - vface))
        else:
            lmax = np.abs(vface)
        ghat = 0.5 * (am + ap) - 0.5 * lmax * (up - um)
        idx_m = fe[:, 0] * n_loc + fs[:, 0, 0]
        idx_p = fe[:, 1] * n_loc + fs[:, 1, 0]
        flat = np.bincount(idx_m, weights=ghat, minlength=size)
        flat -= np.bincount(idx_p, weights=ghat, minlength=size)
        return R - flat.reshape(-1, n_loc)

    X = mesh.vertices
    gv = topo.face_gv
    xa = X[gv[:, 0]]
    xb = X[gv[:, 1]]
    nx = (xb[:, 1] - xa[:, 1]) * sign  # length-weighted outward normal
    ny = (xa[:, 0] - xb[:, 0]) * sign
    nsum = nx + ny
    ua = coeffs[fe[:, 0], fs[:, 0, 0]]
    ub = coeffs[fe[:, 0], fs[:, 0, 1]]
    ra = coeffs[fe[:, 1], fs[:, 1, 0]]
    rb = coeffs[fe[:, 1], fs[:, 1, 1]]
    van = vdata.va[:, 0] * nx + vdata.va[:, 1] * ny
    vbn = vdata.vb[:, 0] * nx + vdata.vb[:, 1] * ny

    z0, z1 = _FACEQ_Z
    wa = np.zeros_like(ua)
    wb = np.zeros_like(ua)
    lmax = np.zeros_like(ua)
    ghats = []
    for z in (z0, z1):
        pa, pb = 1.0 - z, z
        um = ua * pa + ub * pb
        up = ra * pa + rb * pb
        vdotn = van * pa + vbn * pb
        cm = um * nsum - vdotn
        cp = up * nsum - vdotn
        if fc:
            np.maximum(lmax, np.maximum(np.abs(cm), np.abs(cp)), out=lmax)
        else:
            np.maximum(lmax, np.abs(vdotn), out=lmax)
        am = (0.5 * fc) * um * um * nsum - um * vdotn
        ap = (0.5 * fc) * up * up * nsum - up * vdotn
        ghats.append((0.5 * (am + ap), up - um, pa, pb))
    for gmean, jump, pa, pb in ghats:
        ghat = gmean - 0.5 * lmax * jump
        wa += 0.5 * pa * ghat
        wb += 0.5 * pb * ghat

    flat = np.bincount(fe[:, 0] * n_loc + fs[:, 0, 0], weights=wa, minlength=size)
    flat += np.bincount(fe[:, 0] * n_loc + fs[:, 0, 1], weights=wb, minlength=size)
    flat -= np.bincount(fe[:, 1] * n_loc + fs[:, 1, 0], weights=wa, minlength=size)
    flat -= np.bincount(fe[:, 1] * n_loc + fs[:, 1, 1], weights=wb, minlength=size)
    return R - flat.reshape(-1, n_loc)


def mmdg_rhs(state, mesh, mesh_velocity):
    """Coefficient time derivative of the moving-mesh DG semi-discretization."""
    topo = mesh.topology
    vdata = _VelocityData(topo, mesh_velocity)
    R = _residual(topo, mesh, vdata, state.coeffs, 1.0)
    _, minv = _MHAT[mesh.dim]
    vol = mesh.volumes
    rate = vdata.vol_rate(mesh) / vol
    return (R @ minv) / vol[:, None] - rate[:, None] * state.coeffs


def _minmod3(a, b, c):
    s = np.sign(a)
    agree = (s == np.sign(b)) & (s == np.sign(c))
    m = s * np.minimum(np.abs(a), np.minimum(np.abs(b), np.abs(c)))
    return np.where(agree, m, 0.0)


def _limit(coeffs, mesh, tvb_m):
    topo = mesh.topology
    if topo.dim == 1:
        ubar = 0.5 * (coeffs[:, 0] + coeffs[:, 1])
        dev = coeffs[:, 1] - ubar
        right = topo.elem_neighbors[:, 0]
        left = topo.elem_neighbors[:, 1]
        dplus = ubar[right] - ubar
        dminus = ubar - ubar[left]
        h = mesh.volumes
        keep = np.abs(dev) <= tvb_m * h * h
        new_dev = np.where(keep, dev, _minmod3(dev, dplus, dminus))
        return np.stack([ubar - new_dev, ubar + new_dev], axis=1)

    ubar = coeffs.mean(axis=1)
    nbr = topo.elem_neighbors
    nbar = ubar[nbr]
    lo = np.minimum(ubar, nbar.min(axis=1))
    hi = np.maximum(ubar, nbar.max(axis=1))
    dev = coeffs - ubar[:, None]
    h2 = 2.0 * mesh.volumes
    keep = np.abs(dev).max(axis=1) <= tvb_m * h2
    tiny = 1e-14
    up = dev > tiny
    dn = dev < -tiny
    ratio = np.ones_like(dev)
    ratio = np.where(up, (hi[:, None] - ubar[:, None]) / np.where(up, dev, 1.0), ratio)
    ratio = np.where(dn, (lo[:, None] - ubar[:, None]) / np.where(dn, dev, 1.0), ratio)
    theta = np.clip(ratio.min(axis=1), 0.0, 1.0)
    theta = np.where(keep, 1.0, theta)
    return ubar[:, None] + theta[:, None] * dev


def cfl_dt(mesh, coeffs, mesh_velocity=None, problem=None, cfl=0.3):
    """Largest stable step: cfl * min element height / max signal speed."""
    d = mesh.dim
    umax = float(np.abs(coeffs).max()) if problem is not None else 0.0
    vmax = 0.0
    if mesh_velocity is not None:
        v = np.asarray(mesh_velocity)
        vmax = float(np.sqrt((v * v).sum(axis=1)).max())
    smax = math.sqrt(d) * umax + vmax
    if smax < 1e-14:
        return np.inf
    return cfl * float(mesh.altitudes.min()) / smax


def total_mass(state, mesh=None):
    mesh = mesh if mesh is not None else state.mesh
    return float(np.sum(mesh.volumes * state.coeffs.mean(axis=1)))


def step(state, mesh_from, mesh_to, dt, problem=None, cfl=0.3, limiter=True,
         tvb_m=5.0, enforce_cfl=True, conservation_tol=1e-10):
    """One SSP-RK3 step with the mesh interpolated linearly in time.

    problem=None solves pure transport by the mesh motion (used by the
    conservative interpolation); otherwise the Burgers flux is active.
    """
    if mesh_from.topology is not mesh_to.topology:
        raise ValueError("meshes must share connectivity")
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    topo = mesh_from.topology
    d = topo.dim
    xf = mesh_from.vertices
    xt = mesh_to.vertices
    vmesh = (xt - xf) / dt
    if enforce_cfl:
        limit = cfl_dt(mesh_from, state.coeffs, vmesh, problem, cfl)
        if dt > limit * (1.0 + 1e-9):
            raise CFLError(f"dt={dt:.3e} exceeds the CFL limit {limit:.3e}; reduce dt")

    fc = _flux_coeff(problem)
    mhat, minv = _MHAT[d]
    mesh_half = SimplicialMesh(topo, 0.5 * (xf + xt))

    # Stage volumes are evolved with the same RK combinations via the exact
    # rate d|K|/dt (instead of reading geometric volumes), which keeps the
    # discrete geometric conservation law, so constants survive exactly.
    vdata = _VelocityData(topo, vmesh)

    def to_w(u, vol):
        return (u @ mhat) * vol[:, None]

    def to_u(w, vol):
        return (w @ minv) / vol[:, None]

    def apply_limit(u, mesh):
        return _limit(u, mesh, tvb_m) if limiter else u

    u0 = state.coeffs
    v0 = mesh_from.volumes
    w0 = to_w(u0, v0)
    mass0 = w0.sum()

    w1 = w0 + dt * _residual(topo, mesh_from, vdata, u0, fc)
    v1 = v0 + dt * vdata.vol_rate(mesh_from)
    u1 = apply_limit(to_u(w1, v1), mesh_to)
    w1 = to_w(u1, v1)

    w2 = 0.75 * w0 + 0.25 * (w1 + dt * _residual(topo, mesh_to, vdata, u1, fc))
    v2 = 0.75 * v0 + 0.25 * (v1 + dt * vdata.vol_rate(mesh_to))
    u2 = apply_limit(to_u(w2, v2), mesh_half)
    w2 = to_w(u2, v2)

    w3 = w0 / 3.0 + (2.0 / 3.0) * (w2 + dt * _residual(topo, mesh_half, vdata, u2, fc))
    v3 = v0 / 3.0 + (2.0 / 3.0) * (v2 + dt * vdata.vol_rate(mesh_half))
    u3 = apply_limit(to_u(w3, v3), mesh_to)

    mass3 = float(np.sum(mesh_to.volumes * u3.mean(axis=1)))
    # relative to the absolute moment scale so that states with cancelling
    # signs (near-zero net mass) are still checked meaningfully
    denom = max(abs(mass0), float(np.abs(w0).sum()), 1e-12)
    if abs(mass3 - mass0) > conservation_tol * denom:
        raise ConservationError(
            f"mass drifted by {abs(mass3 - mass0):.3e} (relative {abs(mass3 - mass0) / denom:.3e})"
        )
    return DGState(u3, mesh_to, state.time + dt)


@dataclass
class IntegrationLog:
    """Optional per-step diagnostics collected by integrate()."""

    times: list = field(default_factory=list)
    min_volume: list = field(default_factory=list)
    energy_steps: list = field(default_factory=list)  # (before, after) per substep
    mass_pairs: list = field(default_factory=list)  # (before, after) per PDE step

    @property
    def cumulative_mass_drift(self):
        return float(sum(abs(a - b) for b, a in self.mass_pairs))


def integrate(problem, state, triple, t0, t1, tau=0.01, sweeps=2, cfl=0.3,
              limiter=True, tvb_m=5.0, mesh_substeps=5, log=None, metric_groups=1,
              metric_det_cap=100.0):
    """Advance state and mesh together from t0 to t1.

    Each physical step recomputes the smoothed curvature metric from the
    current state, moves the mesh one step toward it, and advances the PDE on
    the moving mesh with a CFL-limited dt.  metric_groups > 1 marks the mesh
    as a disjoint ensemble union with per-member metric regularization.
    """
    if t1 < t0:
        raise ValueError("t1 must not precede t0")
    t = t0
    mesh_speed = 0.0
    while t < t1 - 1e-12:
        mesh = triple.physical
        m = metric_mod.smooth_metric(
            metric_mod.hessian_metric(mesh, state, groups=metric_groups,
                                      det_cap=metric_det_cap),
            mesh, sweeps,
        )
        d = mesh.dim
        umax = float(np.abs(state.coeffs).max())
        hmin = float(mesh.altitudes.min())
        dt = cfl * hmin / max(math.sqrt(d) * umax + mesh_speed, 1e-14)
        dt = min(dt, t1 - t)
        new_triple = None
        for _ in range(6):
            stats = [] if log is not None else None
            new_triple = mmpde.move_mesh(triple, m, tau, dt, substeps=mesh_substeps,
                                         stats=stats)
            v = (new_triple.physical.vertices - mesh.vertices) / dt
            vmax = float(np.sqrt((v * v).sum(axis=1)).max())
            limit = cfl * hmin / max(math.sqrt(d) * umax + vmax, 1e-14)
            if dt <= limit * (1.0 + 1e-9):
                break
            dt = min(0.7 * limit, t1 - t)
        mass_before = total_mass(state)
        state = step(state, mesh, new_triple.physical, dt, problem=problem, cfl=cfl,
                     limiter=limiter, tvb_m=tvb_m)
        if log is not None:
            log.times.append(t + dt)
            log.min_volume.append(float(new_triple.physical.volumes.min()))
            log.energy_steps.extend(stats)
            log.mass_pairs.append((mass_before, total_mass(state)))
        mesh_speed = vmax
        triple = new_triple
        t += dt
    return state, triple


def evaluate_at(state, points, tol=1e-10):
    """Element-local polynomial values at arbitrary points (tie: lowest id)."""
    elem, bary = locate_points(state.mesh, points, tol=tol)
    return np.einsum("pk,pk->p", bary, state.coeffs[elem])


def evaluate(state, x):
    return float(evaluate_at(state, np.asarray(x, dtype=float)[None, :])[0])


def vertex_values(state, mesh=None):
    """Volume-weighted average of the element limits at each vertex.

    Accepts a DGState or a bare coefficient array (with mesh given).
    """
    coeffs = state.coeffs if hasattr(state, "coeffs") else np.asarray(state, dtype=float)
    mesh = mesh if mesh is not None else state.mesh
    coeffs = coeffs.reshape(mesh.n_elements, mesh.dim + 1)
    topo = mesh.topology
    vol = mesh.volumes
    flat = topo.elements.ravel()
    num = np.bincount(flat, weights=(vol[:, None] * coeffs).ravel(),
                      minlength=topo.n_vertices)
    den = np.bincount(flat, weights=np.repeat(vol, topo.dim + 1),
                      minlength=topo.n_vertices)
    return num / den


def write_state(state, path):
    """Plain-text snapshot: element id then its coefficient vector."""
    with open(path, "w") as fh:
        for k, row in enumerate(state.coeffs):
            fh.write(f"{k} " + " ".join(repr(float(c)) for c in row) + "\n")


def read_state(path, mesh, time=0.0):
    rows = []
    with open(path) as fh:
        for ln in fh:
            parts = ln.split()
            if parts:
                rows.append([float(p) for p in parts[1:]])
    return DGState(np.asarray(rows), mesh, time)
