"""Ensemble Kalman filtering on adaptive moving meshes."""

from .mesh import (
    MeshError,
    MeshTanglingError,
    OutOfDomainError,
    ReferenceElement,
    SimplicialMesh,
    alignment_quality,
    build_uniform_mesh,
    edge_matrix,
    equidistribution_quality,
    locate_point,
    locate_points,
    reference_element,
)
from .metric import (
    MetricField,
    combine_metrics,
    hessian_metric,
    intersect_ensemble,
    intersect_pair,
    observation_metric,
    recover_hessian,
    smooth_metric,
)
from .mmpde import MeshTriple, energy, generate_common_mesh, make_triple, move_mesh, \
    nodal_velocities, remesh_member
from .solver import (
    BurgersProblem,
    CFLError,
    ConservationError,
    DGState,
    burgers_1d,
    burgers_2d,
    evaluate,
    evaluate_at,
    initial_condition,
    integrate,
    mmdg_rhs,
    step,
    total_mass,
    vertex_values,
)
from .interp import MeshDeformation, dg_interpolate, linear_interpolate, linear_transfer_state
from .da import (
    EnsembleOnCommonMesh,
    LocalizationScheme,
    ObservationSet,
    enkf_gc_update,
    etkf_update,
    gaspari_cohn,
    inflate,
    letkf_update,
    make_observation_set,
    mt_radii,
    rmse,
)
from .harness import (
    ExperimentConfig,
    RunResult,
    default_config,
    load_config,
    observation_layout,
    run_twin_experiment,
    tune_grid,
    compare,
    windowed_mean,
)

__version__ = "0.1.0"
