"""Distributed-memory meshless solver for the Poisson equation.

RBF-FD discretization on scattered nodes (polyharmonic splines with
monomial augmentation), explicit Jacobi iteration, regular-grid domain
decomposition with halo exchange, and a benchmarking harness with a
latency/bandwidth communication model.
"""

from .nodeset import (
    Domain,
    NodeSet,
    generate,
    discretize_boundary,
    fill_interior,
    nearest_neighbors,
    support_sets,
    classify_nodes,
    BC_NONE,
    BC_DIRICHLET,
    BC_NEUMANN,
    save_csv,
    load_csv,
    SpacingError,
    InsufficientNodesError,
)
from .rbffd import (
    ApproxConfig,
    StencilSet,
    phs,
    phs_laplacian,
    monomial_count,
    monomial_exponents,
    build_stencil,
    build_stencil_set,
    weights_batch,
    apply_stencil,
    neumann_supports,
    LAPLACIAN,
    NORMAL_DERIVATIVE,
    DegenerateSupportError,
)
from .partition import (
    PartitionPlan,
    SubdomainMap,
    LocalIndexMap,
    assign_owners,
    build_exchange_maps,
    localize,
    plan_summary,
    ClosureError,
)
from .transport import (
    NetModel,
    StepTiming,
    InprocNetwork,
    TcpHub,
    TcpEndpoint,
    simulate_cost,
    TransportError,
)
from .solver import (
    ProblemSpec,
    TimeStep,
    RunResult,
    run,
    dt_max,
    solution_error,
    save_solution_csv,
    DivergenceError,
)
from .bench import (
    SweepSpec,
    BenchRecord,
    FitResult,
    run_sweep,
    fit_latency,
    scaling_report,
    measure_comm_samples,
    emit_csv,
    read_csv,
    IllPosedFitError,
)

__version__ = "1.0.0"
