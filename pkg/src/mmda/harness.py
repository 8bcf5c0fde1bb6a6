"""Twin-experiment driver: truth generation, DA cycling, sweeps, and output.

A run generates a deterministic fine-mesh truth, spins an ensemble of members
that each evolve on their own adaptive mesh, and per observation cycle builds
the adaptive common mesh from the members' metric tensors (optionally
concentrated near the observations), transfers members to it, applies the
filter, and transfers them back.
"""

from __future__ import annotations

import hashlib
import math
import multiprocessing
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import da, interp, metric as metric_mod, mmpde, solver
from .mesh import (
    MeshError,
    MeshTanglingError,
    SimplicialMesh,
    build_uniform_mesh,
    equidistribution_quality,
    replicate_topology,
    write_mesh,
)
from .solver import CFLError, ConservationError


class ConfigError(Exception):
    pass


@dataclass
class ExperimentConfig:
    problem: str = "burgers1d"
    mesh_size: int = 50
    truth_mesh_size: int = 0  # 0 selects the per-problem default (100 / 31)
    n_ensemble: int = 5
    n_obs: int = 5
    obs_interval: float = 0.5
    sigma_model: float = 0.01
    r_obs: float = 0.01
    p0_b: float = 0.01
    r_truth: float = -1.0  # negative means "same as r_obs"
    inflation: float = 1.1
    loc_scheme: str = "mt"
    loc_L: float = 1.0
    loc_c: float = 8.0
    loc_radius: float = 1.0
    mesh_mode: str = "intersect"  # ensemble | observation | intersect
    interpolation: str = "dg"  # dg | linear
    fixed_obs_vertex: bool = False
    obs_drift_speed: float = 0.0
    obs_perturb_frac: float = 0.1
    tau: float = 0.01
    smoothing_sweeps: int = 2
    remesh_threshold: float = 0.1
    metric_floor: float = 1e-8
    metric_det_cap: float = 100.0
    t_end: float = 100.0
    window_start: float = 25.0
    window_end: float = -1.0  # negative means t_end
    run_count: int = 10
    master_seed: int = 12345
    cfl: float = 0.3
    limiter: bool = True
    tvb_m: float = 5.0
    mesh_substeps: int = 5
    snapshot_every: int = 0
    record_radii: bool = True

    def validate(self):
        if self.problem not in ("burgers1d", "burgers2d"):
            raise ConfigError(f"unknown problem {self.problem!r}")
        if self.mesh_size < 2:
            raise ConfigError("mesh_size must be at least 2")
        if self.n_ensemble < 2:
            raise ConfigError("need at least two ensemble members")
        if self.obs_interval <= 0.0 or self.t_end <= 0.0:
            raise ConfigError("time parameters must be positive")
        if self.r_obs <= 0.0:
            raise ConfigError("r_obs must be positive")
        if min(self.sigma_model, self.p0_b) < 0.0:
            raise ConfigError("covariances must be non-negative")
        if self.inflation < 1.0:
            raise ConfigError("inflation must be at least 1")
        if self.loc_scheme not in ("mt", "gc_mod", "gc_obs", "fixed", "none"):
            raise ConfigError(f"unknown localization scheme {self.loc_scheme!r}")
        if self.mesh_mode not in ("ensemble", "observation", "intersect"):
            raise ConfigError(f"unknown mesh mode {self.mesh_mode!r}")
        if self.interpolation not in ("dg", "linear"):
            raise ConfigError(f"unknown interpolation {self.interpolation!r}")
        if self.run_count < 1:
            raise ConfigError("run_count must be at least 1")
        return self

    @property
    def r_truth_value(self):
        return self.r_obs if self.r_truth < 0.0 else self.r_truth

    @property
    def window(self):
        end = self.t_end if self.window_end < 0.0 else self.window_end
        return self.window_start, end

    def resolved_dict(self):
        return asdict(self)


def default_config(problem="burgers1d", **overrides):
    cfg = ExperimentConfig(problem=problem)
    if problem == "burgers2d":
        cfg.mesh_size = 15
        cfg.n_obs = 16
        cfg.t_end = 50.0
        cfg.window_start = 15.0
    for key, val in overrides.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown config field {key!r}")
        setattr(cfg, key, val)
    return cfg.validate()


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def load_config(path):
    """Parse a `key = value` config file mirroring ExperimentConfig fields."""
    values = {}
    with open(path) as fh:
        for ln_no, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln_no}: expected key = value")
            key, val = (p.strip() for p in line.split("=", 1))
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{ln_no}: unknown config field {key!r}")
            values[key] = _parse_value(key, val)
    problem = values.pop("problem", "burgers1d")
    return default_config(problem, **values)


def _parse_value(key, text):
    kind = _FIELD_TYPES[key]
    if kind in ("bool", bool):
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean {text!r} for {key}")
    if kind in ("int", int):
        return int(text)
    if kind in ("float", float):
        return float(text)
    return text.strip("\"'")


@dataclass
class RunResult:
    t: np.ndarray
    rmse_forecast: np.ndarray
    rmse_analysis: np.ndarray
    spread: np.ndarray
    min_volume: np.ndarray
    equidist_ratio: np.ndarray
    obs_counts: np.ndarray  # (cycles, n_obs) vertices within 0.5 of each obs
    radii: np.ndarray | None
    vertex_spacing: np.ndarray | None
    vertex_positions: np.ndarray | None
    mt_dmin: np.ndarray | None
    shock_position: np.ndarray
    max_step_mass_drift: float
    cumulative_mass_drift: float
    status: str = "ok"
    failure_cycle: int = -1
    message: str = ""
    seed: int = 0

    @property
    def ok(self):
        return self.status == "ok"


def windowed_mean(result, start, end, field_name="rmse_analysis"):
    sel = (result.t >= start) & (result.t <= end)
    if not sel.any():
        return math.nan
    return float(np.asarray(getattr(result, field_name))[sel].mean())


def observation_layout(domain, n_obs, rng, perturb_frac=0.1):
    """Linearly spaced observation sites, each jittered by a spacing fraction.

    1D: n points at (j + 1/2) dx.  2D: a g x g grid (n_obs must be square).
    """
    dom = np.asarray(domain, dtype=float)
    if n_obs < 1:
        raise ConfigError("need at least one observation")
    if dom.shape[0] == 1:
        width = dom[0, 1] - dom[0, 0]
        spacing = width / n_obs
        base = dom[0, 0] + (np.arange(n_obs) + 0.5) * spacing
        jitter = rng.uniform(-perturb_frac, perturb_frac, size=n_obs) * spacing
        return (base + jitter)[:, None]
    g = round(math.sqrt(n_obs))
    if g * g != n_obs:
        raise ConfigError("2D observation count must be a perfect square")
    pts = []
    axes = []
    for ax in range(2):
        width = dom[ax, 1] - dom[ax, 0]
        spacing = width / g
        axes.append(dom[ax, 0] + (np.arange(g) + 0.5) * spacing)
    gx, gy = np.meshgrid(axes[0], axes[1], indexing="xy")
    base = np.stack([gx.ravel(), gy.ravel()], axis=1)
    spacings = np.array([(dom[0, 1] - dom[0, 0]) / g, (dom[1, 1] - dom[1, 0]) / g])
    jitter = rng.uniform(-perturb_frac, perturb_frac, size=base.shape) * spacings
    return base + jitter


def _problem_for(config):
    return solver.burgers_1d() if config.problem == "burgers1d" else solver.burgers_2d()


def _truth_resolution(config):
    if config.truth_mesh_size > 0:
        return config.truth_mesh_size
    return 100 if config.problem == "burgers1d" else 31


_TRUTH_CACHE: dict = {}


def _truth_key(config):
    return (
        config.problem,
        _truth_resolution(config),
        round(config.t_end, 12),
        round(config.obs_interval, 12),
        round(config.tau, 12),
        config.smoothing_sweeps,
        round(config.cfl, 12),
        config.limiter,
        round(config.tvb_m, 12),
        config.mesh_substeps,
    )


def truth_trajectory(config):
    """States of the no-model-noise truth at every observation time.

    The trajectory is deterministic for a given configuration, so it is
    cached in memory and, when MMDA_TRUTH_CACHE names a directory, on disk.
    """
    key = _truth_key(config)
    if key in _TRUTH_CACHE:
        return _TRUTH_CACHE[key]

    problem = _problem_for(config)
    mesh = build_uniform_mesh(problem.domain, _truth_resolution(config))
    cache_dir = os.environ.get("MMDA_TRUTH_CACHE", "")
    path = ""
    if cache_dir:
        digest = hashlib.sha1(repr(key).encode()).hexdigest()[:16]
        path = os.path.join(cache_dir, f"truth_{digest}.npz")
        if os.path.exists(path):
            data = np.load(path)
            times = list(data["times"])
            states = [
                solver.DGState(data[f"coeffs_{k}"],
                               mesh.with_vertices(data[f"verts_{k}"]), t)
                for k, t in enumerate(times)
            ]
            _TRUTH_CACHE[key] = (times, states)
            return _TRUTH_CACHE[key]

    state = solver.initial_condition(problem, mesh)
    triple = mmpde.make_triple(mesh)
    times = _cycle_times(config)
    states = []
    t_prev = 0.0
    for t_k in times:
        state, triple = solver.integrate(
            problem, state, triple, t_prev, t_k, tau=config.tau,
            sweeps=config.smoothing_sweeps, cfl=config.cfl, limiter=config.limiter,
            tvb_m=config.tvb_m, mesh_substeps=config.mesh_substeps,
            metric_det_cap=config.metric_det_cap,
        )
        states.append(state)
        t_prev = t_k
    if path:
        os.makedirs(cache_dir, exist_ok=True)
        payload = {"times": np.asarray(times)}
        for k, st in enumerate(states):
            payload[f"coeffs_{k}"] = st.coeffs
            payload[f"verts_{k}"] = st.mesh.vertices
        np.savez(path, **payload)
    _TRUTH_CACHE[key] = (times, states)
    return _TRUTH_CACHE[key]


def _cycle_times(config):
    n = int(round(config.t_end / config.obs_interval))
    return [config.obs_interval * (k + 1) for k in range(n)]


def _floor_metric(m, floor_rel):
    """Lift tiny eigenvalues so mesh generation stays well conditioned."""
    if floor_rel <= 0.0:
        return m
    w, Q = np.linalg.eigh(m.matrices)
    eps = floor_rel * float(w.max())
    if w.min() >= eps:
        return m
    lifted = np.einsum("nik,nk,njk->nij", Q, np.maximum(w, eps), Q)
    return metric_mod.MetricField(lifted, m.mesh, check=False)


def _shock_position(truth_state):
    mesh = truth_state.mesh
    if mesh.dim != 1:
        return math.nan
    grad = np.abs(truth_state.coeffs[:, 1] - truth_state.coeffs[:, 0]) / mesh.volumes
    return float(mesh.centroids[int(np.argmax(grad)), 0])


def _pin_vertices(mesh, obs_locs):
    """Move the nearest interior vertex onto each observation location."""
    verts = mesh.vertices.copy()
    free = mesh.topology.boundary == 0
    for x in obs_locs:
        dist = np.linalg.norm(verts - x[None, :], axis=1)
        dist[~free] = np.inf
        j = int(np.argmin(dist))
        verts[j] = x
    try:
        return mesh.with_vertices(verts)
    except MeshTanglingError:
        return mesh  # pinning would tangle; keep the unpinned mesh


_RUN_ERRORS = (
    MeshError,
    CFLError,
    ConservationError,
    da.FilterError,
    ConfigError,
    FloatingPointError,
    np.linalg.LinAlgError,
    ValueError,
)


def run_twin_experiment(config, seed=None, snapshot_dir=None):
    """Execute one twin experiment and collect per-cycle series.

    The ensemble is advanced as one disjoint union mesh (members side by
    side), which batches the member integrations and transfers into single
    array programs; member blocks are extracted for the filter update.
    """
    config.validate()
    master = config.master_seed if seed is None else seed
    ss = np.random.SeedSequence(master)
    rng_layout, rng_ic, rng_obs, rng_model = (np.random.default_rng(c) for c in ss.spawn(4))

    problem = _problem_for(config)
    times, truth_states = truth_trajectory(config)
    base_obs = observation_layout(problem.domain, config.n_obs, rng_layout,
                                  config.obs_perturb_frac)
    mesh0 = build_uniform_mesh(problem.domain, config.mesh_size)
    reference = mesh0
    common = mmpde.make_triple(mesh0)
    ne = config.n_ensemble
    n_elem = mesh0.n_elements

    topo_u = replicate_topology(mesh0.topology, ne)
    ref_u = SimplicialMesh(topo_u, np.tile(mesh0.vertices, (ne, 1)))
    union = mmpde.MeshTriple(ref_u, ref_u, ref_u)

    ic_state = solver.initial_condition(problem, mesh0)
    coeffs_u = np.tile(ic_state.coeffs, (ne, 1)) + rng_ic.normal(
        0.0, math.sqrt(config.p0_b), size=(ne * n_elem, mesh0.dim + 1)
    )
    state_u = solver.DGState(coeffs_u, ref_u, 0.0)

    series = {k: [] for k in ("t", "rmse_forecast", "rmse_analysis", "spread",
                              "min_volume", "equidist_ratio", "shock_position")}
    obs_counts, radii_rows, spacing_rows, vertex_rows, dmin_rows = [], [], [], [], []
    max_drift = 0.0
    cum_drift = 0.0
    status, failure_cycle, message = "ok", -1, ""

    t_prev = 0.0
    for cycle, t_k in enumerate(times):
        try:
            lg = solver.IntegrationLog()
            state_u, union = solver.integrate(
                problem, state_u, union, t_prev, t_k, tau=config.tau,
                sweeps=config.smoothing_sweeps, cfl=config.cfl,
                limiter=config.limiter, tvb_m=config.tvb_m,
                mesh_substeps=config.mesh_substeps, log=lg, metric_groups=ne,
                metric_det_cap=config.metric_det_cap,
            )
            for before, after in lg.mass_pairs:
                drift = abs(after - before) / max(abs(before), 1e-12)
                max_drift = max(max_drift, drift)
            cum_drift = max(cum_drift, lg.cumulative_mass_drift)

            metric_u = metric_mod.smooth_metric(
                metric_mod.hessian_metric(union.physical, state_u, groups=ne,
                                          det_cap=config.metric_det_cap),
                union.physical, config.smoothing_sweeps,
            )
            member_metrics = [
                metric_mod.MetricField(
                    metric_u.matrices[i * n_elem : (i + 1) * n_elem],
                    common.physical, check=False,
                )
                for i in range(ne)
            ]
            m_ens = metric_mod.intersect_ensemble(member_metrics, on_mesh=common.physical)

            obs_locs = _current_obs(config, base_obs, problem, t_k)
            if config.mesh_mode == "ensemble":
                m_combined = m_ens
            else:
                m_obs = metric_mod.observation_metric(common.physical, obs_locs, m_ens)
                m_combined = metric_mod.combine_metrics(config.mesh_mode, m_ens, m_obs)
            m_combined = _floor_metric(m_combined, config.metric_floor)

            new_common_mesh = mmpde.generate_common_mesh(
                common, m_combined, tau=config.tau, substeps=config.mesh_substeps,
            )
            if config.fixed_obs_vertex:
                new_common_mesh = _pin_vertices(new_common_mesh, obs_locs)
            new_common = mmpde.MeshTriple(new_common_mesh, reference, reference)

            radii = None
            mt_dmin = math.nan
            if config.loc_scheme == "mt":
                radii = da.mt_radii(m_ens.on_mesh(new_common_mesh), config.loc_L,
                                    config.loc_c)
                mv = new_common_mesh.vertex_patch_average(m_ens.matrices)
                d_i = np.minimum(np.linalg.det(mv), config.loc_c)
                mt_dmin = max(float(d_i.min()), 1e-12)
            elif config.loc_scheme == "fixed":
                radii = np.full(new_common_mesh.n_vertices, config.loc_radius)

            common_u = SimplicialMesh(topo_u, np.tile(new_common_mesh.vertices, (ne, 1)))
            if config.interpolation == "dg":
                deform = interp.MeshDeformation(union.physical, common_u)
                forecast_u = interp.dg_interpolate(state_u, deform)
            else:
                forecast_u = interp.linear_transfer_state(state_u, union.physical, common_u)
            forecast_members = forecast_u.coeffs.reshape(ne, -1)

            ens = da.EnsembleOnCommonMesh(forecast_members.T, new_common_mesh)

            truth_state = truth_states[cycle]
            y_clean = solver.evaluate_at(truth_state, obs_locs)
            noise_std = math.sqrt(config.r_truth_value)
            y = y_clean + rng_obs.normal(0.0, 1.0, size=len(obs_locs)) * noise_std
            obs_set = da.make_observation_set(new_common_mesh, obs_locs, y, config.r_obs)

            truth_vv = solver.evaluate_at(truth_state, new_common_mesh.vertices)
            rmse_fore = da.rmse(truth_vv, ens.mean_vertex_values())

            ens = da.inflate(ens, config.inflation)
            if config.loc_scheme in ("mt", "fixed"):
                ens = da.letkf_update(ens, obs_set, radii)
            elif config.loc_scheme in ("gc_mod", "gc_obs"):
                scheme = da.LocalizationScheme(config.loc_scheme, L=config.loc_L)
                ens = da.enkf_gc_update(ens, obs_set, scheme)
            else:
                ens = da.etkf_update(ens, obs_set)

            rmse_anal = da.rmse(truth_vv, ens.mean_vertex_values())
            spread = ens.spread()
            if not (np.isfinite(rmse_anal) and np.isfinite(ens.members).all()):
                raise FloatingPointError("non-finite analysis")

            analysis_u = solver.DGState(
                ens.members.T.reshape(ne * n_elem, -1), common_u, t_k
            )
            if config.interpolation == "dg":
                deform = interp.MeshDeformation(common_u, union.physical)
                back_u = interp.dg_interpolate(analysis_u, deform)
            else:
                back_u = interp.linear_transfer_state(analysis_u, common_u, union.physical)

            # remesh members whose analysis moved far from their forecast
            inc = np.linalg.norm(
                ens.members.T - forecast_members, axis=1
            ) / np.maximum(np.linalg.norm(forecast_members, axis=1), 1e-12)
            verts_u = union.physical.vertices
            coeffs_new = back_u.coeffs
            if (inc > config.remesh_threshold).any():
                verts_u = verts_u.copy()
                coeffs_new = coeffs_new.copy()
                n_vert = mesh0.n_vertices
                for i in np.where(inc > config.remesh_threshold)[0]:
                    vs = slice(i * n_vert, (i + 1) * n_vert)
                    es = slice(i * n_elem, (i + 1) * n_elem)
                    mesh_i = SimplicialMesh(mesh0.topology, verts_u[vs])
                    st_i = solver.DGState(coeffs_new[es], mesh_i, t_k)
                    tri_i = mmpde.MeshTriple(mesh_i, reference, reference)
                    st_i, tri_i = mmpde.remesh_member(
                        st_i, tri_i, tau=config.tau, sweeps=config.smoothing_sweeps,
                        substeps=config.mesh_substeps,
                        metric_det_cap=config.metric_det_cap,
                    )
                    verts_u[vs] = tri_i.physical.vertices
                    coeffs_new[es] = st_i.coeffs
            noise = rng_model.normal(
                0.0, math.sqrt(config.sigma_model), size=coeffs_new.shape
            )
            phys_u = SimplicialMesh(topo_u, verts_u)
            state_u = solver.DGState(coeffs_new + noise, phys_u, t_k)
            union = mmpde.MeshTriple(phys_u, ref_u, ref_u)

            series["t"].append(t_k)
            series["rmse_forecast"].append(rmse_fore)
            series["rmse_analysis"].append(rmse_anal)
            series["spread"].append(spread)
            series["min_volume"].append(float(new_common_mesh.volumes.min()))
            q = equidistribution_quality(new_common_mesh, m_combined)
            series["equidist_ratio"].append(float(q.max() / max(q.min(), 1e-300)))
            series["shock_position"].append(_shock_position(truth_state))
            dists = np.linalg.norm(
                new_common_mesh.vertices[:, None, :] - obs_locs[None, :, :], axis=2
            )
            obs_counts.append((dists <= 0.5).sum(axis=0))
            if config.record_radii and radii is not None:
                radii_rows.append(radii.copy())
                spacing_rows.append(
                    new_common_mesh.vertex_patch_average(
                        new_common_mesh.volumes ** (1.0 / new_common_mesh.dim)
                    )
                )
                vertex_rows.append(new_common_mesh.vertices.copy())
                dmin_rows.append(mt_dmin)
            if snapshot_dir and config.snapshot_every > 0 and (
                (cycle + 1) % config.snapshot_every == 0
            ):
                os.makedirs(snapshot_dir, exist_ok=True)
                write_mesh(new_common_mesh,
                           os.path.join(snapshot_dir, f"common_mesh_{cycle + 1:04d}.txt"))
                mean_state = solver.DGState(
                    ens.mean.reshape(-1, new_common_mesh.dim + 1), new_common_mesh, t_k
                )
                solver.write_state(
                    mean_state,
                    os.path.join(snapshot_dir, f"analysis_mean_{cycle + 1:04d}.txt"),
                )

            common = new_common
            t_prev = t_k
        except _RUN_ERRORS as exc:
            status = "failed"
            failure_cycle = cycle
            message = f"{type(exc).__name__}: {exc}"
            break

    return RunResult(
        t=np.asarray(series["t"]),
        rmse_forecast=np.asarray(series["rmse_forecast"]),
        rmse_analysis=np.asarray(series["rmse_analysis"]),
        spread=np.asarray(series["spread"]),
        min_volume=np.asarray(series["min_volume"]),
        equidist_ratio=np.asarray(series["equidist_ratio"]),
        obs_counts=np.asarray(obs_counts) if obs_counts else np.zeros((0, config.n_obs)),
        radii=np.asarray(radii_rows) if radii_rows else None,
        vertex_spacing=np.asarray(spacing_rows) if spacing_rows else None,
        vertex_positions=np.asarray(vertex_rows) if vertex_rows else None,
        mt_dmin=np.asarray(dmin_rows) if dmin_rows else None,
        shock_position=np.asarray(series["shock_position"]),
        max_step_mass_drift=max_drift,
        cumulative_mass_drift=cum_drift,
        status=status,
        failure_cycle=failure_cycle,
        message=message,
        seed=master,
    )


def _current_obs(config, base_obs, problem, t):
    if config.obs_drift_speed == 0.0:
        return base_obs
    locs = base_obs.copy()
    dom = problem.domain
    width = dom[0, 1] - dom[0, 0]
    locs[:, 0] = np.mod(locs[:, 0] + config.obs_drift_speed * t - dom[0, 0], width) + dom[0, 0]
    return locs


def _run_seed(args):
    config, seed = args
    return run_twin_experiment(config, seed=seed)


def run_many(config, run_count=None, workers=None):
    """Run run_count seeds (master_seed, master_seed+1, ...) of one config.

    Independent runs execute concurrently on forked workers (results keep
    seed order); MMDA_WORKERS=1 forces sequential execution.
    """
    count = run_count if run_count is not None else config.run_count
    seeds = [config.master_seed + i for i in range(count)]
    if workers is None:
        env = os.environ.get("MMDA_WORKERS", "")
        workers = int(env) if env else (os.cpu_count() or 1)
    workers = min(workers, count)
    if workers <= 1 or multiprocessing.get_start_method(allow_none=False) != "fork":
        return [run_twin_experiment(config, seed=s) for s in seeds]
    truth_trajectory(config)  # warm the cache so forked workers inherit it
    with multiprocessing.get_context("fork").Pool(workers) as pool:
        return pool.map(_run_seed, [(config, s) for s in seeds])


def tune_grid(config, inflations, loc_values):
    """Mean windowed analysis RMSE over a (inflation x localization) grid."""
    if not len(inflations) or not len(loc_values):
        raise ConfigError("tuning grids must be non-empty")
    start, end = config.window
    rows = []
    for rho in inflations:
        for L in loc_values:
            params = config.resolved_dict()
            problem = params.pop("problem")
            cfg = default_config(problem, **params)
            cfg.inflation = float(rho)
            if cfg.loc_scheme == "fixed":
                cfg.loc_radius = float(L)
            else:
                cfg.loc_L = float(L)
            results = run_many(cfg)
            ok = [r for r in results if r.ok]
            means = [windowed_mean(r, start, end) for r in ok]
            rows.append(
                {
                    "inflation": float(rho),
                    "loc": float(L),
                    "mean_rmse": float(np.mean(means)) if means else math.nan,
                    "n_ok": len(ok),
                    "n_failed": len(results) - len(ok),
                }
            )
    return rows


def compare(configs, labels, run_count=None):
    """Run several configs side by side; they should differ in one field."""
    if len(configs) != len(labels):
        raise ConfigError("one label per config")
    out = []
    for cfg, label in zip(configs, labels):
        results = run_many(cfg, run_count)
        start, end = cfg.window
        ok = [r for r in results if r.ok]
        out.append(
            {
                "label": label,
                "results": results,
                "mean_rmse": float(np.mean([windowed_mean(r, start, end) for r in ok]))
                if ok
                else math.nan,
                "n_ok": len(ok),
                "n_failed": len(results) - len(ok),
            }
        )
    return out


# tuned parameters per problem and scheme (inflation, localization scale)
TUNED = {
    "burgers1d": {"mt": (1.1, 1.0), "gc_mod": (1.1, 0.5), "gc_obs": (1.0, 0.5)},
    "burgers2d": {"mt": (1.1, 1.0), "gc_mod": (1.0, 0.5), "gc_obs": (1.1, 1.0)},
}


def tuned_config(problem, scheme, **overrides):
    rho, L = TUNED[problem][scheme]
    return default_config(problem, loc_scheme=scheme, inflation=rho, loc_L=L,
                          **overrides)


def write_rmse_csv(result, path):
    with open(path, "w") as fh:
        fh.write("t,rmse_forecast,rmse_analysis,spread\n")
        for row in zip(result.t, result.rmse_forecast, result.rmse_analysis,
                       result.spread):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def write_summary_csv(results, path, window):
    start, end = window
    with open(path, "w") as fh:
        fh.write("seed,status,failure_cycle,rmse_forecast,rmse_analysis,spread\n")
        for r in results:
            fh.write(
                f"{r.seed},{r.status},{r.failure_cycle},"
                f"{windowed_mean(r, start, end, 'rmse_forecast')!r},"
                f"{windowed_mean(r, start, end, 'rmse_analysis')!r},"
                f"{windowed_mean(r, start, end, 'spread')!r}\n"
            )
        ok = [r for r in results if r.ok]
        agg = np.mean([windowed_mean(r, start, end) for r in ok]) if ok else math.nan
        fh.write(f"aggregate,{len(ok)}/{len(results)} ok,,,{agg!r},\n")


def write_manifest(config, path, extra=None):
    with open(path, "w") as fh:
        for key, val in sorted(config.resolved_dict().items()):
            fh.write(f"{key} = {val}\n")
        for key, val in sorted((extra or {}).items()):
            fh.write(f"{key} = {val}\n")
