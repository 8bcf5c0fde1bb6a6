"""Ensemble filters on the common mesh.

The state vector is the flattened DG coefficient vector; each coefficient
inherits the physical position of its element vertex for localization
distances.  etkf_update is the global transform filter, letkf_update solves
independent per-vertex local analyses, and enkf_gc_update applies the
gain-form update with Gaspari-Cohn tapering in model or observation space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import SimplicialMesh, locate_points
from .solver import vertex_values as _state_vertex_values


class FilterError(Exception):
    pass


@dataclass(frozen=True)
class LocalizationScheme:
    """Variant tag plus its parameters; all parameters must be positive."""

    kind: str  # mt | gc_mod | gc_obs | fixed | none
    L: float = 1.0
    c: float = 8.0
    radius: float = 1.0

    def __post_init__(self):
        if self.kind not in ("mt", "gc_mod", "gc_obs", "fixed", "none"):
            raise ValueError(f"unknown localization scheme {self.kind!r}")
        if min(self.L, self.c, self.radius) <= 0.0:
            raise ValueError("localization parameters must be positive")


class EnsembleOnCommonMesh:
    """Member coefficient vectors (n x Ne) on one common mesh."""

    def __init__(self, members, mesh):
        self.members = np.asarray(members, dtype=float)
        self.mesh = mesh
        n = mesh.n_elements * (mesh.dim + 1)
        if self.members.ndim != 2 or self.members.shape[0] != n:
            raise ValueError(f"expected member matrix with {n} rows")

    @property
    def n_members(self):
        return self.members.shape[1]

    @property
    def mean(self):
        return self.members.mean(axis=1)

    @property
    def perturbations(self):
        """Columns (u_i - mean)/sqrt(Ne - 1), so P_b = X X^T."""
        ne = self.n_members
        return (self.members - self.mean[:, None]) / np.sqrt(ne - 1.0)

    def member_state_coeffs(self, i):
        d = self.mesh.dim
        return self.members[:, i].reshape(-1, d + 1)

    def mean_vertex_values(self):
        return _state_vertex_values(self.mean, self.mesh)

    def spread(self):
        """RMS ensemble standard deviation over vertex values."""
        vv = np.stack([_state_vertex_values(self.members[:, i], self.mesh)
                       for i in range(self.n_members)], axis=1)
        var = vv.var(axis=1, ddof=1)
        return float(np.sqrt(var.mean()))


def coefficient_positions(mesh):
    """Physical position of each DG coefficient (its element vertex)."""
    return mesh.vertices[mesh.elements.ravel()]


@dataclass
class ObservationSet:
    locations: np.ndarray
    values: np.ndarray
    r_diag: np.ndarray
    H: np.ndarray

    def __post_init__(self):
        if np.any(self.r_diag <= 0.0):
            raise ValueError("observation error variances must be positive")


def make_observation_set(mesh, locations, values, r_diag):
    """Build the P1-evaluation observation operator at the given locations."""
    locs = np.atleast_2d(np.asarray(locations, dtype=float))
    elem, bary = locate_points(mesh, locs)
    d = mesh.dim
    n = mesh.n_elements * (d + 1)
    H = np.zeros((len(locs), n))
    for j in range(len(locs)):
        H[j, elem[j] * (d + 1) + np.arange(d + 1)] = bary[j]
    r = np.broadcast_to(np.asarray(r_diag, dtype=float), (len(locs),)).copy()
    return ObservationSet(locs, np.asarray(values, dtype=float), r, H)


def gaspari_cohn(r):
    """Compactly supported fifth-order correlation; 1 at 0, 0 beyond 2."""
    r = np.asarray(r, dtype=float)
    scalar = r.ndim == 0
    r = np.atleast_1d(r)
    if np.any(r < 0.0):
        raise ValueError("distance must be non-negative")
    out = np.zeros_like(r)
    near = r <= 1.0
    far = (r > 1.0) & (r <= 2.0)
    rn = r[near]
    out[near] = -0.25 * rn**5 + 0.5 * rn**4 + 0.625 * rn**3 - (5.0 / 3.0) * rn**2 + 1.0
    rf = r[far]
    out[far] = (
        rf**5 / 12.0
        - 0.5 * rf**4
        + 0.625 * rf**3
        + (5.0 / 3.0) * rf**2
        - 5.0 * rf
        + 4.0
        - (2.0 / 3.0) / rf
    )
    out = np.clip(out, 0.0, 1.0)
    return float(out[0]) if scalar else out


def mt_radii(metric, L, c, mesh=None):
    """Adaptive localization radii r_i = L exp(-d_i / (2 d_min)).

    d_i is the (capped) determinant of the patch-averaged ensemble metric at
    vertex i, so radii shrink where the mesh concentrates.  The bounds
    L e^{-c/(2 d_min)} <= r_i <= L/sqrt(e) hold by construction.
    """
    if L <= 0.0 or c <= 0.0:
        raise ValueError("L and c must be positive")
    mesh = mesh if mesh is not None else metric.mesh
    mv = mesh.vertex_patch_average(metric.matrices)
    dets = np.linalg.det(mv)
    d_i = np.minimum(dets, c)
    d_min = max(float(d_i.min()), 1e-12)
    return L * np.exp(-d_i / (2.0 * d_min))


def inflate(ensemble, rho):
    """Scale perturbations about the mean by rho (multiplicative inflation)."""
    if rho < 1.0:
        raise ValueError("inflation factor must be at least 1")
    mean = ensemble.mean
    members = mean[:, None] + rho * (ensemble.members - mean[:, None])
    return EnsembleOnCommonMesh(members, ensemble.mesh)


def _sym_sqrt(T, floor=1e-12):
    w, Q = np.linalg.eigh(T)
    if w.min() < -1e-8 * max(w.max(), 1.0):
        raise FilterError(f"transform matrix has negative eigenvalue {w.min():.3e}")
    return (Q * np.sqrt(np.maximum(w, floor))) @ Q.T


def _transform_weights(X_obs, r_diag, innovation):
    """ETKF weights: mean weight vector and sqrt-transform, in ensemble space."""
    ne = X_obs.shape[1]
    C = X_obs.T / r_diag  # (Ne, D)
    T = np.linalg.inv(np.eye(ne) + C @ X_obs)
    T = 0.5 * (T + T.T)
    wbar = T @ (C @ innovation)
    W = _sym_sqrt(T) * np.sqrt(ne - 1.0)
    return wbar, W


def etkf_update(ensemble, obs):
    """Global ensemble transform Kalman filter update."""
    if ensemble.n_members < 2:
        raise ValueError("need at least two members")
    X = ensemble.perturbations
    mean = ensemble.mean
    HX = obs.H @ X
    innov = obs.values - obs.H @ mean
    wbar, W = _transform_weights(HX, obs.r_diag, innov)
    members = mean[:, None] + X @ (wbar[:, None] + W)
    return EnsembleOnCommonMesh(members, ensemble.mesh)


def enkf_gc_update(ensemble, obs, scheme):
    """Gain-form deterministic update with Gaspari-Cohn localization.

    gc_mod tapers the model-space covariance, gc_obs tapers the two
    observation-space blocks; every member is moved by the same gain.
    """
    if scheme.kind not in ("gc_mod", "gc_obs"):
        raise ValueError("scheme must be gc_mod or gc_obs")
    X = ensemble.perturbations
    H = obs.H
    R = np.diag(obs.r_diag)
    pos = coefficient_positions(ensemble.mesh)
    L = scheme.L
    if scheme.kind == "gc_mod":
        dist = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2))
        rho = gaspari_cohn(dist / L)
        Pl = rho * (X @ X.T)
        PHt = Pl @ H.T
        S = H @ PHt + R
    else:
        PHt = X @ (H @ X).T  # P H^T
        dist1 = np.sqrt(((pos[:, None, :] - obs.locations[None, :, :]) ** 2).sum(axis=2))
        rho1 = gaspari_cohn(dist1 / L)
        dist2 = np.sqrt(
            ((obs.locations[:, None, :] - obs.locations[None, :, :]) ** 2).sum(axis=2)
        )
        rho2 = gaspari_cohn(dist2 / L)
        PHt = rho1 * PHt
        S = rho2 * ((H @ X) @ (H @ X).T) + R
    try:
        K = np.linalg.solve(S.T, PHt.T).T
    except np.linalg.LinAlgError as exc:
        raise FilterError(f"innovation matrix is singular: {exc}") from exc
    members = ensemble.members + K @ (obs.values[:, None] - H @ ensemble.members)
    return EnsembleOnCommonMesh(members, ensemble.mesh)


def letkf_update(ensemble, obs, radii):
    """Local ETKF: each vertex assimilates only observations within its radius."""
    mesh = ensemble.mesh
    radii = np.broadcast_to(np.asarray(radii, dtype=float), (mesh.n_vertices,))
    X = ensemble.perturbations
    mean = ensemble.mean
    HX = obs.H @ X
    innov = obs.values - obs.H @ mean
    dist = np.sqrt(
        ((mesh.vertices[:, None, :] - obs.locations[None, :, :]) ** 2).sum(axis=2)
    )
    members = ensemble.members.copy()
    d = mesh.dim
    coeff_vertex = mesh.elements.ravel()
    order = np.argsort(coeff_vertex, kind="stable")
    starts = np.searchsorted(coeff_vertex[order], np.arange(mesh.n_vertices))
    ends = np.searchsorted(coeff_vertex[order], np.arange(mesh.n_vertices) + 1)
    sel_cache = {}
    for j in range(mesh.n_vertices):
        rows = order[starts[j] : ends[j]]
        if len(rows) == 0:
            continue
        sel = np.where(dist[j] <= radii[j])[0]
        if len(sel) == 0:
            continue  # analysis equals forecast at this vertex
        key = sel.tobytes()
        if key not in sel_cache:
            sel_cache[key] = _transform_weights(HX[sel], obs.r_diag[sel], innov[sel])
        wbar, W = sel_cache[key]
        members[rows] = mean[rows, None] + X[rows] @ (wbar[:, None] + W)
    return EnsembleOnCommonMesh(members, ensemble.mesh)


def rmse(truth_vertex_vals, mean_vertex_vals):
    """Root mean square error over the common-mesh vertices."""
    a = np.asarray(truth_vertex_vals, dtype=float)
    b = np.asarray(mean_vertex_vals, dtype=float)
    if a.shape != b.shape:
        raise ValueError("vertex value arrays differ in length")
    return float(np.linalg.norm(a - b) / np.sqrt(a.size))
