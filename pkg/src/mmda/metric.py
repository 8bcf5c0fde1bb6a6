"""Metric tensor fields: Hessian-based construction, intersection, smoothing.

A MetricField stores one SPD d x d matrix per element.  A mesh that is
uniform in such a metric concentrates elements where the metric is large,
so these fields drive all mesh adaptation in the package.
"""

from __future__ import annotations

import math

import numpy as np

from .mesh import SimplicialMesh


def _dets(mats):
    d = mats.shape[-1]
    if d == 1:
        return mats[..., 0, 0]
    return mats[..., 0, 0] * mats[..., 1, 1] - mats[..., 0, 1] * mats[..., 1, 0]


def _identity_field(n, d):
    return np.broadcast_to(np.eye(d), (n, d, d)).copy()


class MetricField:
    """Per-element SPD matrices plus the cached adaptation weight sigma_h."""

    def __init__(self, matrices, mesh, alpha=None, check=True):
        self.matrices = np.asarray(matrices, dtype=float)
        self.mesh = mesh
        self.alpha = alpha
        n, d = mesh.n_elements, mesh.dim
        if self.matrices.shape != (n, d, d):
            raise ValueError(f"expected {(n, d, d)} metric array, got {self.matrices.shape}")
        if check:
            sym_err = np.abs(self.matrices - np.swapaxes(self.matrices, 1, 2)).max()
            if sym_err > 1e-12 * max(1.0, np.abs(self.matrices).max()):
                raise ValueError(f"metric not symmetric (max asymmetry {sym_err:.3e})")
            eigs = np.linalg.eigvalsh(self.matrices)
            if eigs.min() <= 0.0:
                k = int(np.argmin(eigs.min(axis=1)))
                raise ValueError(
                    f"metric not positive definite: element {k}, eigenvalue {eigs.min():.3e}"
                )

    @property
    def dets(self):
        return _dets(self.matrices)

    @property
    def sigma_h(self):
        return float(np.sum(self.mesh.volumes * np.sqrt(self.dets)))

    def on_mesh(self, mesh):
        """Rebind the same per-element values to another same-connectivity mesh."""
        if mesh.topology is not self.mesh.topology:
            raise ValueError("meshes do not share connectivity")
        return MetricField(self.matrices, mesh, alpha=self.alpha, check=False)


def recover_hessian(mesh, state):
    """Recovered per-element Hessian of a DG state.

    Double recovery: element P1 gradients, volume-weighted vertex averages,
    then the element gradient of the recovered gradient, symmetrized.  Exact
    for globally quadratic data on patch-symmetric (uniform) meshes.
    """
    coeffs = np.asarray(state.coeffs if hasattr(state, "coeffs") else state, dtype=float)
    einv = mesh.edge_inverses
    du = coeffs[:, 1:] - coeffs[:, :1]
    grad = np.einsum("nij,ni->nj", einv, du)
    gv = mesh.vertex_patch_average(grad)
    gve = gv[mesh.elements]
    dg = gve[:, 1:, :] - gve[:, :1, :]
    H = np.einsum("nia,nib->nab", dg, einv)
    return 0.5 * (H + np.swapaxes(H, 1, 2))


def _abs_spd(mats):
    """|H| = Q |diag| Q^T for symmetric H, batched (closed form for 2x2)."""
    d = mats.shape[-1]
    if d == 1:
        return np.abs(mats)
    # H = p I + r U with U symmetric, U^2 = I; |H| = a I + b U
    a11, a12, a22 = mats[:, 0, 0], mats[:, 0, 1], mats[:, 1, 1]
    p = 0.5 * (a11 + a22)
    r = np.hypot(0.5 * (a11 - a22), a12)
    lo, hi = np.abs(p - r), np.abs(p + r)
    a = 0.5 * (hi + lo)
    b = 0.5 * (hi - lo)
    scale = np.where(r > 1e-300, b / np.maximum(r, 1e-300), 0.0)
    out = np.empty_like(mats)
    out[:, 0, 0] = a + scale * (a11 - p)
    out[:, 1, 1] = a + scale * (a22 - p)
    out[:, 0, 1] = scale * a12
    out[:, 1, 0] = out[:, 0, 1]
    return out


def hessian_metric(mesh, state, bisect_lo=1e-8, bisect_hi=1e8, rtol=1e-6, groups=1,
                   det_cap=100.0):
    """Curvature-based metric optimal for P1 interpolation error.

    M_K = det(I + |H_K|/a)^(-1/(d+4)) (I + |H_K|/a) with the regularization a
    solving

        sum |K| det(I + |H_K|/a)^(2/(d+4)) = 2 sum |K| det(|H_K|/a)^(2/(d+4)),

    equivalently sum |K| det(aI + |H_K|)^(2/(d+4)) = 2 sum |K| det(|H_K|)^(2/(d+4)),
    whose left side is strictly increasing in a, so a unique root exists
    whenever some det |H_K| is positive and a log-space bisection finds it.
    A field with zero curvature determinant everywhere yields the identity
    metric.

    det_cap bounds det(M_K) by isotropic rescaling.  The recovered curvature
    of a captured discontinuity grows like 1/h^2 as the mesh concentrates, so
    an uncapped metric keeps demanding more concentration without limit; the
    cap pins the maximum compression ratio instead.

    groups > 1 treats the mesh as that many disjoint blocks of equal element
    count (an ensemble advanced side by side) and solves one regularization
    parameter per block.
    """
    H = recover_hessian(mesh, state)
    d = mesh.dim
    B = _abs_spd(H)
    vol = mesh.volumes
    p = 2.0 / (d + 4)
    n = mesh.n_elements
    if n % groups:
        raise ValueError("element count is not divisible by the group count")
    per = n // groups
    volg = vol.reshape(groups, per)
    rhs = 2.0 * (volg * (_dets(B) ** p).reshape(groups, per)).sum(axis=1)

    eye = np.eye(d)

    def scaled_lhs(log_a):
        a = np.exp(log_a)
        A = np.repeat(a, per)[:, None, None] * eye + B
        return (volg * (_dets(A) ** p).reshape(groups, per)).sum(axis=1)

    lo = np.full(groups, math.log(bisect_lo))
    hi = np.full(groups, math.log(bisect_hi))
    flat = rhs <= 0.0
    pinned_lo = ~flat & (scaled_lhs(lo) > rhs)  # curvature tiny everywhere
    pinned_hi = ~flat & (scaled_lhs(hi) < rhs)
    active = ~(flat | pinned_hi | pinned_lo)
    if active.any():
        span = math.log(bisect_hi) - math.log(bisect_lo)
        for _ in range(max(1, int(math.ceil(math.log2(span / rtol))))):
            mid = 0.5 * (lo + hi)
            go_hi = scaled_lhs(mid) < rhs
            lo = np.where(active & go_hi, mid, lo)
            hi = np.where(active & ~go_hi, mid, hi)
    log_alpha = 0.5 * (lo + hi)
    log_alpha = np.where(pinned_lo, math.log(bisect_lo), log_alpha)
    log_alpha = np.where(pinned_hi, math.log(bisect_hi), log_alpha)
    alpha = np.exp(log_alpha)
    alpha = np.where(flat, np.inf, alpha)  # identity metric for flat blocks

    A = eye + B / np.repeat(alpha, per)[:, None, None]
    M = _dets(A)[:, None, None] ** (-1.0 / (d + 4)) * A
    if det_cap is not None:
        dm = _dets(M)
        over = dm > det_cap
        if over.any():
            M[over] *= (det_cap / dm[over])[:, None, None] ** (1.0 / d)
    a_meta = float(alpha[0]) if groups == 1 and np.isfinite(alpha[0]) else None
    return MetricField(M, mesh, alpha=a_meta, check=False)


def _intersect_many(A, B):
    """Batched metric intersection P^-1 diag(max(1, b_i)) P^-T."""
    if A.shape[-1] == 1:
        return np.maximum(A, B)
    L = np.linalg.cholesky(A)
    Linv = np.linalg.inv(L)
    C = Linv @ B @ np.swapaxes(Linv, -1, -2)
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    w, Q = np.linalg.eigh(C)
    w = np.maximum(w, 1.0)
    LQ = L @ Q
    out = np.einsum("...ik,...k,...jk->...ij", LQ, w, LQ)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def _check_spd(name, mat):
    w = np.linalg.eigvalsh(mat)
    if w.min() <= 0.0:
        raise ValueError(f"{name} is not SPD: smallest eigenvalue {w.min():.3e}")


def intersect_pair(A, B):
    """Intersection of two SPD matrices; dominates both in the Loewner order."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    _check_spd("A", A)
    _check_spd("B", B)
    return _intersect_many(A[None], B[None])[0]


def intersect_ensemble(metrics, on_mesh=None):
    """Greedy sequential intersection of the members' metric fields.

    Per element, the accumulator starts from the member with the smallest
    determinant and at each step absorbs the remaining member that minimizes
    the determinant of the partial intersection (ties to the lowest member
    index).  In 1D this reduces to the elementwise maximum in any order.
    """
    if not metrics:
        raise ValueError("need at least one metric field")
    mesh = on_mesh if on_mesh is not None else metrics[0].mesh
    for m in metrics:
        if m.mesh.topology is not mesh.topology:
            raise ValueError("metric fields do not share connectivity")
    stack = np.stack([m.matrices for m in metrics])  # (Ne, N, d, d)
    ne, n = stack.shape[0], stack.shape[1]
    if ne == 1:
        return MetricField(stack[0], mesh, check=False)

    dets = _dets(stack)  # (Ne, N)
    used = np.zeros((ne, n), dtype=bool)
    first = np.argmin(dets, axis=0)
    acc = stack[first, np.arange(n)]
    used[first, np.arange(n)] = True
    for _ in range(ne - 1):
        cand_det = np.full((ne, n), np.inf)
        cands = []
        for i in range(ne):
            c = _intersect_many(acc, stack[i])
            cands.append(c)
            det = _dets(c)
            cand_det[i] = np.where(used[i], np.inf, det)
        pick = np.argmin(cand_det, axis=0)
        acc = np.stack(cands)[pick, np.arange(n)]
        used[pick, np.arange(n)] = True
    return MetricField(acc, mesh, check=False)


def observation_metric(mesh, obs_locations, ensemble_metric):
    """Isotropic metric concentrating the mesh near observation locations.

    Each element centroid accumulates chi(|x_c - x_o|) per observation, where
    chi peaks at the ensemble metric's largest sqrt-determinant and decays as
    exp(-4 w^2) away from the observation.
    """
    obs = np.atleast_2d(np.asarray(obs_locations, dtype=float))
    peak = float(np.sqrt(ensemble_metric.dets).max())
    if peak <= 0.0:
        raise ValueError("ensemble metric must have positive determinant")
    cent = mesh.centroids
    w2 = ((cent[:, None, :] - obs[None, :, :]) ** 2).sum(axis=2)
    chi = 1.0 / (np.exp(np.minimum(4.0 * w2, 700.0)) - 1.0 + 1.0 / peak)
    s = chi.sum(axis=1)
    mats = s[:, None, None] * np.eye(mesh.dim)
    return MetricField(mats, mesh, check=False)


def combine_metrics(mode, Mm, Mo):
    """Select the common-mesh metric: members only, observations only, or both."""
    if mode == "ensemble":
        return Mm
    if mode == "observation":
        return Mo
    if mode == "intersect":
        if Mo.mesh.topology is not Mm.mesh.topology:
            raise ValueError("metric fields do not share connectivity")
        return MetricField(_intersect_many(Mm.matrices, Mo.matrices), Mm.mesh, check=False)
    raise ValueError(f"unknown combine mode {mode!r}")


def smooth_metric(metric, mesh, sweeps=2):
    """Low-pass filter: each sweep averages half self, half the face neighbors."""
    if sweeps < 0:
        raise ValueError("sweeps must be non-negative")
    if mesh.topology is not metric.mesh.topology:
        raise ValueError("mesh does not share the metric's connectivity")
    M = metric.matrices.copy()
    vol = mesh.volumes
    nbrs = mesh.topology.elem_neighbors_interior
    have = nbrs >= 0
    safe = np.where(have, nbrs, 0)
    for _ in range(int(sweeps)):
        wn = np.where(have, vol[safe], 0.0)  # (N, d+1)
        wsum = wn.sum(axis=1)
        avg = np.einsum("nk,nkij->nij", wn, M[safe])
        avg = np.where(
            (wsum > 0.0)[:, None, None],
            avg / np.maximum(wsum, 1e-300)[:, None, None],
            M,
        )
        M = 0.5 * M + 0.5 * avg
    return MetricField(M, mesh, alpha=metric.alpha, check=False)


def write_metric(metric, path):
    """Debug dump: one line per element, id then row-major matrix entries."""
    with open(path, "w") as fh:
        for k, m in enumerate(metric.matrices):
            entries = " ".join(repr(float(v)) for v in m.ravel())
            fh.write(f"{k} {entries}\n")
