"""Markowitz portfolio problems as QUBO penalty models.

Modules:

* ``model``: assets, constraints, problem files and synthetic instances
* ``encoding``: K-bit weight and slack encoding
* ``compiler``: penalty terms H1..H4, assembly, natural-form model
* ``solvers``: brute force, simulated annealing, tabu, adaptive penalty loop,
  continuous reference
* ``analysis``: post-selection, KPIs, discretization-error statistics
* ``cli``: command-line front end
"""
from .analysis import (
    ErrorStats,
    ExperimentRecord,
    Kpis,
    ViolationReport,
    check_constraints,
    error_stats_monte_carlo,
    error_stats_theory,
    kpis,
    success_probability,
    summarize,
)
from .compiler import (
    H4Mode,
    PenaltyWeights,
    QuadraticModel,
    assemble,
    build_constrained,
    default_penalty_weights,
    export_qubo,
    penalty_energy_direct,
    read_qubo,
)
from .encoding import (
    EncodingLayout,
    InfeasibleConstraintError,
    build_layout,
    decode_solution,
    granularity,
    max_effective_granularity,
)
from .model import (
    Asset,
    AssetClass,
    ConstraintOp,
    LinearConstraint,
    Problem,
    ProblemError,
    ValidationError,
    generate_instance,
    load_problem,
    make_problem,
    save_problem,
)
from .solvers import (
    SampleSet,
    SamplerConfig,
    brute_force,
    derive_seed,
    reference_continuous,
    simulated_anneal,
    solve_constrained,
    tabu_search,
)

__version__ = "0.1.0"
