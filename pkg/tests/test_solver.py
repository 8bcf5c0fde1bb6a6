import math

import numpy as np
import pytest

from mmda import mesh as M, mmpde, solver


def characteristics_oracle(x, t, s=20.0):
    """Fixed-point solve of u = u0(x - u t), valid before shock formation."""
    u = 0.5 + np.sin(2 * np.pi * x / s)
    for _ in range(300):
        u = 0.5 + np.sin(2 * np.pi * (x - u * t) / s)
    return u


def fixed_mesh_dg_rhs_oracle(coeffs, verts):
    """Straightforward 1D periodic P1-DG Burgers residual (du/dt form).

    Written independently of the solver: explicit per-element loops, 2-point
    Gauss quadrature, local Lax-Friedrichs flux, dense local mass solves.
    """
    n = coeffs.shape[0]
    out = np.zeros_like(coeffs)
    g1, g2 = 0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0)
    for k in range(n):
        a, b = verts[k], verts[k + 1]
        h = b - a
        ua, ub = coeffs[k]
        # volume term: int f(u) dphi_i, dphi = (-1/h, +1/h)
        vol = 0.0
        for g in (g1, g2):
            u = ua * (1 - g) + ub * g
            vol += 0.5 * 0.5 * u * u  # weight 1/2 per point, f = u^2/2
        resid = np.array([-vol, vol])
        # faces: left neighbor right trace vs own left trace, and own right
        km = (k - 1) % n
        kp = (k + 1) % n
        u_left_out = coeffs[km][1]
        u_right_in = coeffs[kp][0]

        def llf(um, up):
            lam = max(abs(um), abs(up))
            return 0.5 * (0.5 * um * um + 0.5 * up * up) - 0.5 * lam * (up - um)

        resid[0] += llf(u_left_out, ua)  # flux enters through the left face
        resid[1] -= llf(ub, u_right_in)  # and leaves through the right face
        mass = h * np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
        out[k] = np.linalg.solve(mass, resid)
    return out


def test_initial_condition_1d_accuracy():
    prob = solver.burgers_1d()
    m = M.build_uniform_mesh(prob.domain, 101)
    st = solver.initial_condition(prob, m)
    u5 = solver.evaluate(st, np.array([5.0]))
    assert abs(u5 - 1.5) < 5e-3  # O(h^2) projection error
    dense = np.linspace(0.0, 20.0, 777)
    vals = solver.evaluate_at(st, dense[:, None])
    exact = 0.5 + np.sin(2 * np.pi * dense / 20.0)
    assert np.abs(vals - exact).max() < 5e-3


def test_initial_condition_constant_exact():
    prob = solver.BurgersProblem(1, np.array([[0.0, 1.0]]),
                                 lambda x: np.full(x.shape[:-1], 2.5), "const")
    m = M.build_uniform_mesh((0.0, 1.0), 7)
    st = solver.initial_condition(prob, m)
    np.testing.assert_allclose(st.coeffs, 2.5, rtol=1e-14)


def test_initial_condition_2d_origin():
    prob = solver.burgers_2d()
    assert prob.ic(np.zeros((1, 2)))[0] == 1.0
    m = M.build_uniform_mesh(prob.domain, 15)
    st = solver.initial_condition(prob, m)
    assert solver.evaluate(st, np.array([0.0, 0.0])) > 0.3
    assert np.isfinite(st.coeffs).all()


def test_mmdg_rhs_free_stream():
    rng = np.random.default_rng(0)
    m = M.build_uniform_mesh(((0.0, 1.0), (0.0, 1.0)), 5)
    vel = rng.normal(size=m.vertices.shape)
    vel[~m.topology.free_axes] = 0.0
    st = solver.DGState(np.full((m.n_elements, 3), 1.3), m)
    rhs = solver.mmdg_rhs(st, m, vel)
    np.testing.assert_allclose(rhs, 0.0, atol=1e-12)


def test_mmdg_rhs_matches_fixed_mesh_oracle():
    m = M.build_uniform_mesh((0.0, 1.0), 6)  # 5 elements
    x = m.element_coords[:, :, 0]
    st = solver.DGState(0.4 + 0.3 * np.sin(2 * np.pi * x), m)
    got = solver.mmdg_rhs(st, m, np.zeros_like(m.vertices))
    want = fixed_mesh_dg_rhs_oracle(st.coeffs, m.vertices[:, 0])
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_mmdg_rhs_mass_rate_zero():
    m = M.build_uniform_mesh((0.0, 1.0), 9)
    x = m.element_coords[:, :, 0]
    st = solver.DGState(np.sin(2 * np.pi * x) + 0.2, m)
    rhs = solver.mmdg_rhs(st, m, np.zeros_like(m.vertices))
    rate = np.sum(m.volumes * rhs.mean(axis=1))
    assert abs(rate) < 1e-13


def test_step_constant_state():
    prob = solver.burgers_1d()
    m = M.build_uniform_mesh(prob.domain, 21)
    shift = m.vertices.copy()
    inner = m.topology.boundary == 0
    shift[inner, 0] += 0.05
    m2 = m.with_vertices(shift)
    st = solver.DGState(np.full((20, 2), 0.8), m)
    out = solver.step(st, m, m2, 0.01, problem=prob)
    np.testing.assert_allclose(out.coeffs, 0.8, atol=1e-12)


def test_step_mass_conservation_and_cfl_error():
    prob = solver.burgers_1d()
    m = M.build_uniform_mesh(prob.domain, 51)
    st = solver.initial_condition(prob, m)
    mass0 = solver.total_mass(st)
    dt = solver.cfl_dt(m, st.coeffs, None, prob)
    out = solver.step(st, m, m, dt, problem=prob)
    assert abs(solver.total_mass(out) - mass0) <= 1e-10 * abs(mass0)
    with pytest.raises(solver.CFLError, match="reduce dt"):
        solver.step(st, m, m, 10.0 * dt, problem=prob)


def test_pre_shock_accuracy_vs_characteristics():
    prob = solver.burgers_1d()
    m = M.build_uniform_mesh(prob.domain, 101)
    st = solver.initial_condition(prob, m)
    t = 0.0
    while t < 1.0 - 1e-12:
        dt = min(solver.cfl_dt(m, st.coeffs, None, prob), 1.0 - t)
        st = solver.step(st, m, m, dt, problem=prob)
        t += dt
    lam, w = solver._VOLQ[1]
    xq = np.einsum("qk,nkd->nqd", lam, m.element_coords)
    uq = st.coeffs @ lam.T
    uex = characteristics_oracle(xq[:, :, 0], 1.0)
    err = math.sqrt(float(np.sum(w * (uq - uex) ** 2 * m.volumes[:, None])))
    assert err < 1e-3


def test_integrate_zero_interval_is_identity():
    prob = solver.burgers_1d()
    m = M.build_uniform_mesh(prob.domain, 21)
    st = solver.initial_condition(prob, m)
    tri = mmpde.make_triple(m)
    st2, tri2 = solver.integrate(prob, st, tri, 1.0, 1.0)
    assert st2 is st and tri2 is tri


@pytest.mark.slow
def test_integrate_shock_speed_and_mesh_tracking():
    prob = solver.burgers_1d()
    m = M.build_uniform_mesh(prob.domain, 101)
    st = solver.initial_condition(prob, m)
    tri = mmpde.make_triple(m)
    times = np.arange(5.0, 12.5, 1.5)
    shock_pos, density_pos = [], []
    t_prev = 0.0
    for t_k in times:
        st, tri = solver.integrate(prob, st, tri, t_prev, float(t_k))
        t_prev = float(t_k)
        mesh = tri.physical
        slopes = np.abs(st.coeffs[:, 1] - st.coeffs[:, 0]) / mesh.volumes
        k_shock = int(np.argmax(slopes))
        shock_pos.append(mesh.centroids[k_shock, 0])
        k_dense = int(np.argmin(mesh.volumes))
        density_pos.append(mesh.centroids[k_dense, 0])
        # the densest element sits within two elements of the steepest slope
        assert abs(k_dense - k_shock) <= 2
    # shock propagates rightward at roughly the mean state 0.5
    fit = np.polyfit(times, shock_pos, 1)[0]
    assert 0.35 < fit < 0.65


def test_evaluate_examples():
    m = M.build_uniform_mesh((0.0, 1.0), 5)
    st = solver.DGState(np.full((4, 2), 3.0), m)
    assert solver.evaluate(st, np.array([0.37])) == pytest.approx(3.0)
    # vertex evaluation picks the limit from the lowest containing element
    st2 = solver.DGState(np.array([[0.0, 1.0], [2.0, 3.0], [4.0, 5.0], [6.0, 7.0]]), m)
    assert solver.evaluate(st2, m.vertices[1]) == pytest.approx(1.0)
    # barycentric re-expansion oracle at a random interior point
    x = np.array([0.615])
    k, bary = M.locate_point(m, x)
    expect = float(bary @ st2.coeffs[k])
    assert solver.evaluate(st2, x) == pytest.approx(expect, abs=1e-12)


def test_vertex_values_volume_weighted():
    verts = np.array([0.0, 0.4, 1.0])[:, None]
    m = M.build_uniform_mesh((0.0, 1.0), 3).with_vertices(verts)
    st = solver.DGState(np.array([[1.0, 2.0], [4.0, 8.0]]), m)
    vv = solver.vertex_values(st)
    np.testing.assert_allclose(vv, [1.0, (0.4 * 2 + 0.6 * 4) / 1.0, 8.0])


def test_state_snapshot_roundtrip(tmp_path):
    m = M.build_uniform_mesh((0.0, 1.0), 4)
    st = solver.DGState(np.array([[1.0, 2.0], [3.5, -1.0], [0.0, 0.25]]), m, 2.5)
    path = tmp_path / "state.txt"
    solver.write_state(st, path)
    st2 = solver.read_state(path, m, 2.5)
    np.testing.assert_array_equal(st2.coeffs, st.coeffs)


def test_free_stream_on_moving_mesh_2d():
    rng = np.random.default_rng(7)
    prob = solver.burgers_2d()
    m = M.build_uniform_mesh(prob.domain, 6)
    inner = m.topology.boundary == 0
    xv = m.vertices.copy()
    xv[inner] += rng.uniform(-0.05, 0.05, (inner.sum(), 2)) * 0.3
    m2 = m.with_vertices(xv)
    st = solver.DGState(np.full((m.n_elements, 3), -0.4), m)
    out = solver.step(st, m, m2, 0.002, problem=prob)
    np.testing.assert_allclose(out.coeffs, -0.4, atol=1e-12)
