import numpy as np
import pytest

from mmda import mesh as M, metric as MT, solver


def random_spd(rng, d, n=1):
    W = rng.normal(size=(n, d, d))
    out = W @ np.swapaxes(W, 1, 2) + 0.2 * np.eye(d)
    return out if n > 1 else out[0]


def nodal_state(mesh, f):
    return solver.DGState(f(mesh.element_coords), mesh)


def test_recover_hessian_quadratic_1d():
    m = M.build_uniform_mesh((0.0, 1.0), 21)
    state = nodal_state(m, lambda xc: xc[:, :, 0] ** 2)
    H = MT.recover_hessian(m, state)
    np.testing.assert_allclose(H[4:-4, 0, 0], 2.0, atol=1e-8)


def test_recover_hessian_constant():
    m = M.build_uniform_mesh(((0.0, 1.0), (0.0, 1.0)), 6)
    state = nodal_state(m, lambda xc: np.full(xc.shape[:2], 3.7))
    H = MT.recover_hessian(m, state)
    np.testing.assert_allclose(H, 0.0, atol=1e-12)


def test_recover_hessian_xy_2d():
    m = M.build_uniform_mesh(((0.0, 1.0), (0.0, 1.0)), 11)
    state = nodal_state(m, lambda xc: xc[:, :, 0] * xc[:, :, 1])
    H = MT.recover_hessian(m, state)
    # elements whose vertices are all interior have symmetric patches
    inner_v = m.boundary == 0
    sel = inner_v[m.elements].all(axis=1)
    assert sel.sum() > 10
    expect = np.broadcast_to(np.array([[0.0, 1.0], [1.0, 0.0]]), H[sel].shape)
    np.testing.assert_allclose(H[sel], expect, atol=1e-8)


def test_hessian_metric_flat_field():
    m = M.build_uniform_mesh((0.0, 1.0), 11)
    state = nodal_state(m, lambda xc: np.full(xc.shape[:2], 0.25))
    mf = MT.hessian_metric(m, state)
    np.testing.assert_allclose(mf.matrices, 1.0)
    assert mf.alpha is None


def alpha_oracle(vol, absH, d, rhs):
    """Plain bisection on alpha (not log) for the regularization equation.

    Solves sum |K| det(aI + |H|)^(2/(d+4)) = 2 sum |K| det(|H|)^(2/(d+4)),
    whose left side increases in a.
    """
    p = 2.0 / (d + 4)

    def lhs(a):
        return np.sum(vol * (a + absH) ** p)

    lo, hi = 1e-10, 1e10
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if lhs(mid) < rhs:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_hessian_metric_alpha_against_bisection_oracle():
    m = M.build_uniform_mesh((0.0, 2.0), 41)
    state = nodal_state(m, lambda xc: 0.5 * xc[:, :, 0] ** 2 + np.sin(3 * xc[:, :, 0]))
    mf = MT.hessian_metric(m, state)
    H = MT.recover_hessian(m, state)[:, 0, 0]
    rhs = 2.0 * np.sum(m.volumes * np.abs(H) ** 0.4)
    a_ref = alpha_oracle(m.volumes, np.abs(H), 1, rhs)
    assert abs(mf.alpha - a_ref) / a_ref < 1e-4
    # metric grows with curvature
    order = np.argsort(np.abs(H))
    dets = mf.dets
    assert dets[order[-1]] > dets[order[0]]


def test_hessian_metric_constant_curvature_value():
    # |H| = 2 everywhere gives (a + 2)^(2/5) = 2 * 2^(2/5), i.e.
    # a = 2^(7/2) - 2; one-sided boundary patches shift it by a few percent
    m = M.build_uniform_mesh((0.0, 1.0), 41)
    state = nodal_state(m, lambda xc: xc[:, :, 0] ** 2)
    mf = MT.hessian_metric(m, state)
    a_expect = 2.0 ** 3.5 - 2.0
    np.testing.assert_allclose(mf.alpha, a_expect, rtol=0.05)


def test_hessian_metric_scale_invariance_preserves_ordering():
    # the regularization equation is homogeneous in the state amplitude, so
    # scaling u rescales alpha identically and the metric (hence the
    # concentration ordering) is unchanged
    m = M.build_uniform_mesh((0.0, 20.0), 51)
    state = nodal_state(m, lambda xc: np.sin(2 * np.pi * xc[:, :, 0] / 20.0))
    big = solver.DGState(4.0 * state.coeffs, m)
    f1 = MT.hessian_metric(m, state)
    f4 = MT.hessian_metric(m, big)
    np.testing.assert_allclose(f4.dets, f1.dets, rtol=1e-4)
    np.testing.assert_allclose(f4.alpha, 4.0 * f1.alpha, rtol=1e-4)
    assert set(np.argsort(f4.dets)[-5:]) == set(np.argsort(f1.dets)[-5:])


def test_hessian_metric_grouped_matches_per_member():
    m = M.build_uniform_mesh((0.0, 20.0), 26)
    sa = nodal_state(m, lambda xc: np.sin(2 * np.pi * xc[:, :, 0] / 20.0))
    sb = nodal_state(m, lambda xc: np.cos(6 * np.pi * xc[:, :, 0] / 20.0))
    topo2 = M.replicate_topology(m.topology, 2)
    mu = M.SimplicialMesh(topo2, np.tile(m.vertices, (2, 1)))
    su = solver.DGState(np.concatenate([sa.coeffs, sb.coeffs]), mu)
    grouped = MT.hessian_metric(mu, su, groups=2)
    ma = MT.hessian_metric(m, sa)
    mb = MT.hessian_metric(m, sb)
    n = m.n_elements
    np.testing.assert_allclose(grouped.matrices[:n], ma.matrices, rtol=1e-5)
    np.testing.assert_allclose(grouped.matrices[n:], mb.matrices, rtol=1e-5)


def test_intersect_pair_examples():
    np.testing.assert_allclose(MT.intersect_pair(np.eye(2), np.eye(2)), np.eye(2))
    np.testing.assert_allclose(MT.intersect_pair([[2.0]], [[5.0]]), [[5.0]])
    out = MT.intersect_pair(np.diag([4.0, 1.0]), np.diag([1.0, 4.0]))
    np.testing.assert_allclose(out, np.diag([4.0, 4.0]), atol=1e-12)


def test_intersect_pair_loewner_dominance():
    rng = np.random.default_rng(0)
    for d in (1, 2):
        A = random_spd(rng, d, 200)
        B = random_spd(rng, d, 200)
        C = MT._intersect_many(A, B)
        for X in (A, B):
            w = np.linalg.eigvalsh(C - X)
            assert w.min() >= -1e-10
    # idempotence
    A = random_spd(rng, 2, 50)
    C = MT._intersect_many(A, A)
    assert np.abs(C - A).max() < 1e-10


def test_intersect_pair_rejects_non_spd():
    with pytest.raises(ValueError, match="eigenvalue"):
        MT.intersect_pair(np.diag([1.0, -1.0]), np.eye(2))


def test_intersect_ensemble_single_and_1d_max():
    m = M.build_uniform_mesh((0.0, 1.0), 4)
    vals = [2.0, 7.0, 3.0]
    fields = [MT.MetricField(np.full((3, 1, 1), v), m, check=False) for v in vals]
    single = MT.intersect_ensemble(fields[:1])
    np.testing.assert_array_equal(single.matrices, fields[0].matrices)
    for order in ([0, 1, 2], [2, 1, 0], [1, 0, 2]):
        out = MT.intersect_ensemble([fields[i] for i in order])
        np.testing.assert_allclose(out.matrices, 7.0)


def test_intersect_ensemble_greedy_2d():
    rng = np.random.default_rng(2)
    m = M.build_uniform_mesh(((0.0, 1.0), (0.0, 1.0)), 3)
    n = m.n_elements
    fields = [MT.MetricField(random_spd(rng, 2, n), m, check=False) for _ in range(3)]
    out = MT.intersect_ensemble(fields)
    # dominates every input
    for f in fields:
        w = np.linalg.eigvalsh(out.matrices - f.matrices)
        assert w.min() > -1e-9
    # greedy determinant never exceeds the worst fixed ordering
    import itertools

    worst = np.full(n, -np.inf)
    for perm in itertools.permutations(range(3)):
        acc = fields[perm[0]].matrices
        for i in perm[1:]:
            acc = MT._intersect_many(acc, fields[i].matrices)
        worst = np.maximum(worst, np.linalg.det(acc))
    assert (np.linalg.det(out.matrices) <= worst * (1 + 1e-9)).all()


def test_observation_metric_values():
    m = M.build_uniform_mesh((0.0, 10.0), 11)
    ens = MT.MetricField(np.linspace(1.0, 9.0, 10)[:, None, None], m, check=False)
    peak = np.sqrt(9.0)
    # observation exactly at an element centroid
    obs = m.centroids[4]
    mo = MT.observation_metric(m, obs[None, :], ens)
    np.testing.assert_allclose(mo.matrices[4, 0, 0], peak, rtol=1e-12)
    # far away the weight decays like exp(-4 w^2) but stays positive
    w = 3.0
    obs = np.array([[m.centroids[2, 0] + w]])
    mo = MT.observation_metric(m, obs, ens)
    expect = 1.0 / (np.exp(4 * w * w) - 1.0 + 1.0 / peak)
    np.testing.assert_allclose(mo.matrices[2, 0, 0], expect, rtol=1e-9)
    assert (np.linalg.eigvalsh(mo.matrices) > 0).all()


def test_observation_metric_symmetry():
    m = M.build_uniform_mesh((0.0, 10.0), 21)
    ens = MT.MetricField(np.ones((20, 1, 1)), m, check=False)
    c = m.centroids[10, 0]
    obs = np.array([[c - 1.3], [c + 1.3]])
    mo = MT.observation_metric(m, obs, ens)
    single = MT.observation_metric(m, obs[:1], ens)
    # contributions add, and the two equidistant sites contribute equally
    chi = 1.0 / (np.exp(4 * 1.3**2) - 1.0 + 1.0)
    np.testing.assert_allclose(mo.matrices[10, 0, 0], 2 * chi, rtol=1e-9)
    assert mo.matrices[10, 0, 0] > single.matrices[10, 0, 0]


def test_combine_metrics_modes():
    m = M.build_uniform_mesh((0.0, 1.0), 5)
    a = MT.MetricField(np.full((4, 1, 1), 3.0), m, check=False)
    b = MT.MetricField(np.full((4, 1, 1), 2.0), m, check=False)
    assert MT.combine_metrics("ensemble", a, b) is a
    assert MT.combine_metrics("observation", a, b) is b
    both = MT.combine_metrics("intersect", a, b)
    np.testing.assert_allclose(both.matrices, 3.0)  # elementwise max in 1D
    # a dominated observation metric leaves the ensemble metric unchanged
    eps = MT.MetricField(np.full((4, 1, 1), 1e-6), m, check=False)
    np.testing.assert_allclose(
        MT.combine_metrics("intersect", a, eps).matrices, a.matrices, rtol=1e-12
    )
    with pytest.raises(ValueError):
        MT.combine_metrics("nope", a, b)


def test_smooth_metric_examples():
    m = M.build_uniform_mesh((0.0, 1.0), 6)
    field = MT.MetricField(np.array([1.0, 1.0, 9.0, 1.0, 1.0])[:, None, None], m,
                           check=False)
    out0 = MT.smooth_metric(field, m, 0)
    np.testing.assert_array_equal(out0.matrices, field.matrices)
    out = MT.smooth_metric(field, m, 1)
    np.testing.assert_allclose(out.matrices[:, 0, 0], [1.0, 3.0, 5.0, 3.0, 1.0])
    const = MT.MetricField(np.full((5, 1, 1), 2.0), m, check=False)
    np.testing.assert_allclose(MT.smooth_metric(const, m, 4).matrices, 2.0)


def test_smooth_metric_preserves_spd():
    rng = np.random.default_rng(9)
    m = M.build_uniform_mesh(((0.0, 1.0), (0.0, 1.0)), 6)
    field = MT.MetricField(random_spd(rng, 2, m.n_elements), m, check=False)
    for sweeps in (1, 3, 10):
        out = MT.smooth_metric(field, m, sweeps)
        assert np.linalg.eigvalsh(out.matrices).min() > 0


def test_metric_field_validation():
    m = M.build_uniform_mesh((0.0, 1.0), 3)
    good = np.ones((2, 1, 1))
    MT.MetricField(good, m)
    with pytest.raises(ValueError):
        MT.MetricField(np.array([[[1.0]], [[-2.0]]]), m)


def test_metric_dump(tmp_path):
    m = M.build_uniform_mesh((0.0, 1.0), 3)
    field = MT.MetricField(np.array([2.0, 5.0])[:, None, None], m, check=False)
    path = tmp_path / "metric.txt"
    MT.write_metric(field, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].split() == ["0", "2.0"]
    assert lines[1].split() == ["1", "5.0"]
