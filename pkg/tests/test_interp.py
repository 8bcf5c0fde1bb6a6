import numpy as np
import pytest

from mmda import interp, mesh as M, solver


def perturbed_mesh(mesh, rng, frac=0.1):
    inner = mesh.topology.boundary == 0
    h = float(np.mean(mesh.volumes)) ** (1.0 / mesh.dim)
    xv = mesh.vertices.copy()
    xv[inner] += rng.uniform(-frac, frac, (int(inner.sum()), mesh.dim)) * h
    return mesh.with_vertices(xv)


def test_identity_deformation_is_noop():
    m = M.build_uniform_mesh((0.0, 20.0), 30)
    rng = np.random.default_rng(0)
    st = solver.DGState(rng.normal(size=(29, 2)), m)
    out = interp.dg_interpolate(st, interp.MeshDeformation(m, m))
    assert np.abs(out.coeffs - st.coeffs).max() < 1e-12
    assert out.mesh is m


def test_constant_state_any_deformation():
    rng = np.random.default_rng(1)
    m = M.build_uniform_mesh(((0.0, 1.0), (0.0, 1.0)), 6)
    m2 = perturbed_mesh(m, rng, 0.2)
    st = solver.DGState(np.full((m.n_elements, 3), -1.7), m)
    out = interp.dg_interpolate(st, interp.MeshDeformation(m, m2))
    np.testing.assert_allclose(out.coeffs, -1.7, atol=1e-12)


def test_random_state_mass_conserved():
    rng = np.random.default_rng(2)
    m = M.build_uniform_mesh((0.0, 20.0), 50)
    m2 = perturbed_mesh(m, rng, 0.1)
    st = solver.DGState(rng.normal(size=(49, 2)), m)
    mass0 = solver.total_mass(st)
    for n in (None, 8, 32):
        out = interp.dg_interpolate(st, interp.MeshDeformation(m, m2), substeps=n)
        assert abs(solver.total_mass(out) - mass0) <= 1e-10 * max(abs(mass0), 1.0)


def test_substep_refinement_reduces_l2_change():
    rng = np.random.default_rng(21)
    m = M.build_uniform_mesh((0.0, 20.0), 50)
    m2 = perturbed_mesh(m, rng, 0.25)
    x = m.element_coords[:, :, 0]
    st = solver.DGState(np.sin(2 * np.pi * x / 20.0), m)

    def l2(state, mesh):
        lam, w = solver._VOLQ[1]
        uq = state.coeffs @ lam.T
        return float(np.sqrt(np.sum(w * uq**2 * mesh.volumes[:, None])))

    base = l2(st, m)
    deform = interp.MeshDeformation(m, m2)
    changes = [abs(l2(interp.dg_interpolate(st, deform, substeps=n), m2) - base)
               for n in (5, 40)]
    assert changes[1] <= changes[0]


def test_round_trip_mass_and_bounded_diffusion():
    rng = np.random.default_rng(3)
    m = M.build_uniform_mesh((0.0, 20.0), 50)
    m2 = perturbed_mesh(m, rng, 0.1)
    x = m.element_coords[:, :, 0]
    st = solver.DGState(np.sin(2 * np.pi * x / 20.0) + 0.5, m)
    mass0 = solver.total_mass(st)
    there = interp.dg_interpolate(st, interp.MeshDeformation(m, m2))
    back = interp.dg_interpolate(there, interp.MeshDeformation(m2, m))
    assert abs(solver.total_mass(back) - mass0) <= 1e-10 * abs(mass0)
    rel = np.linalg.norm(back.coeffs - st.coeffs) / np.linalg.norm(st.coeffs)
    assert rel < 0.02  # smooth data on a mild deformation barely diffuses


def test_deformation_requires_shared_topology():
    a = M.build_uniform_mesh((0.0, 1.0), 5)
    b = M.build_uniform_mesh((0.0, 1.0), 5)
    with pytest.raises(M.MeshError):
        interp.MeshDeformation(a, b)


def test_dg_interpolate_rejects_foreign_state():
    m = M.build_uniform_mesh((0.0, 1.0), 5)
    m2 = m.with_vertices(m.vertices * 1.0)
    rng = np.random.default_rng(0)
    other = perturbed_mesh(m, rng)
    st = solver.DGState(np.zeros((4, 2)), other)
    with pytest.raises(M.MeshError):
        interp.dg_interpolate(st, interp.MeshDeformation(m, m2))


def test_linear_interpolate_identity_and_affine():
    rng = np.random.default_rng(4)
    m = M.build_uniform_mesh(((0.0, 2.0), (0.0, 2.0)), 7)
    m2 = perturbed_mesh(m, rng, 0.15)
    vals = rng.normal(size=m.n_vertices)
    np.testing.assert_allclose(interp.linear_interpolate(vals, m, m), vals, atol=1e-12)
    affine = 2.0 * m.vertices[:, 0] - 0.7 * m.vertices[:, 1] + 0.3
    got = interp.linear_interpolate(affine, m, m2)
    want = 2.0 * m2.vertices[:, 0] - 0.7 * m2.vertices[:, 1] + 0.3
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_linear_interpolate_wraps_periodically_1d():
    m = M.build_uniform_mesh((0.0, 10.0), 11)
    vals = np.sin(2 * np.pi * m.vertices[:, 0] / 10.0)
    target = m.with_vertices(m.vertices + 10.0, validate=True)
    got = interp.linear_interpolate(vals, m, target)
    np.testing.assert_allclose(got, vals, atol=1e-12)


def test_linear_transfer_front_no_overshoot_and_mass_drift():
    m = M.build_uniform_mesh((0.0, 10.0), 60)
    x = m.element_coords[:, :, 0]
    st = solver.DGState(np.tanh((x - 5.0) / 0.15), m)
    # concentrate the target mesh away from the front
    t = np.linspace(0.0, 1.0, 60)
    warped = 10.0 * t**1.5
    target = m.with_vertices(warped[:, None])
    out = interp.linear_transfer_state(st, m, target)
    assert out.coeffs.max() <= st.coeffs.max() + 1e-12
    assert out.coeffs.min() >= st.coeffs.min() - 1e-12
    drift = abs(solver.total_mass(out, target) - solver.total_mass(st, m))
    assert drift > 1e-10  # the nodal baseline is not conservative
    # the conservative transfer on the same deformation is
    dg = interp.dg_interpolate(st, interp.MeshDeformation(m, target))
    dg_drift = abs(solver.total_mass(dg) - solver.total_mass(st, m))
    assert dg_drift <= 1e-10 * max(abs(solver.total_mass(st, m)), 1.0)


def test_union_transfer_matches_per_member():
    # transferring a two-member union equals two independent transfers
    rng = np.random.default_rng(5)
    m = M.build_uniform_mesh((0.0, 20.0), 26)
    ma = perturbed_mesh(m, rng, 0.12)
    mb = perturbed_mesh(m, rng, 0.12)
    target = perturbed_mesh(m, rng, 0.1)
    ca = rng.normal(size=(25, 2))
    cb = rng.normal(size=(25, 2))
    outa = interp.dg_interpolate(solver.DGState(ca, ma), interp.MeshDeformation(ma, target))
    outb = interp.dg_interpolate(solver.DGState(cb, mb), interp.MeshDeformation(mb, target))

    topo2 = M.replicate_topology(m.topology, 2)
    mu = M.SimplicialMesh(topo2, np.concatenate([ma.vertices, mb.vertices]))
    tu = M.SimplicialMesh(topo2, np.tile(target.vertices, (2, 1)))
    su = solver.DGState(np.concatenate([ca, cb]), mu)
    n_sub = max(
        interp.default_substeps(interp.MeshDeformation(ma, target)),
        interp.default_substeps(interp.MeshDeformation(mb, target)),
    )
    out_u = interp.dg_interpolate(su, interp.MeshDeformation(mu, tu), substeps=n_sub)
    outa2 = interp.dg_interpolate(solver.DGState(ca, ma),
                                  interp.MeshDeformation(ma, target), substeps=n_sub)
    outb2 = interp.dg_interpolate(solver.DGState(cb, mb),
                                  interp.MeshDeformation(mb, target), substeps=n_sub)
    np.testing.assert_allclose(out_u.coeffs[:25], outa2.coeffs, atol=1e-13)
    np.testing.assert_allclose(out_u.coeffs[25:], outb2.coeffs, atol=1e-13)
    # and both member transfers conserve their own mass
    assert abs(solver.total_mass(outa) - solver.total_mass(solver.DGState(ca, ma))) < 1e-10
    assert abs(solver.total_mass(outb) - solver.total_mass(solver.DGState(cb, mb))) < 1e-10
