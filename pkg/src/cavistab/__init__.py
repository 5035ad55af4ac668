"""cavistab: a numerical laboratory for spectral stability of the penalized
curl-curl cavity eigenproblem on atlas-described domains with oscillating
boundary perturbations."""

from .atlas import (
    Atlas,
    AtlasChart,
    AtlasDomain,
    PerturbationFamily,
    ProfileFunction,
    chart_local_coords,
    check_atlas_class,
    check_convergence_conditions,
    domain_contains,
    oscillating_box_family,
    profile_eval,
)
from .eigensolver import Spectrum, classify_modes, cluster_eigenvalues, solve_gevp
from .fem import (
    FemSpace,
    SparseSymOp,
    assemble_h1,
    assemble_mass,
    assemble_stiffness,
    build_space,
    divergence_l2,
)
from .gaffney import (
    ModulusOfContinuity,
    d32_seminorm,
    dini_integral,
    discrete_gaffney_constant,
    mazya_criterion,
    scaling_law_check,
)
from .harness import (
    ConvergenceReport,
    MeshPolicy,
    SolverConfig,
    analytic_cube_spectrum,
    cube_benchmark,
    e_distance,
    e_distance_subspace,
    sweep_epsilon,
)
from .mesh import TetMesh, mesh_box, mesh_quality, shear_fit
from .piola import (
    AnalyticVectorField,
    PartitionOfUnity,
    PiolaMap,
    h_map,
    make_box_test_fields,
    phi_psi_map,
    piola_map_for_family,
    piola_pullback,
    pullback_curl,
    pullback_div,
    verify_piolamain,
)

__version__ = "0.1.0"
