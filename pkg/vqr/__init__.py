from .convex_analysis import (
    ContactReport,
    GridFunction,
    check_relaxed_spec,
    convex_envelope_1d,
    envelope_via_double_transform,
    legendre,
    write_contact_csv,
)
from .lp_core import LinearProgram, LPSolution, SolverError, dump_lp, lp_duality_gap, solve_lp
from .measures import (
    Coupling,
    DiscreteSample,
    GridSizeError,
    ParseError,
    Schema,
    UGrid,
    center,
    load_sample,
    make_grid,
    save_sample,
)
from .qr1d import (
    MonotoneQrSolution,
    QuantileModel1D,
    assemble_monotone_lp,
    build_uqr,
    conditional_polar_factorization,
    conditional_quantile_curves,
    equivalence_report,
    kb_fit_t,
    kb_objective,
    kb_scan,
    level_grid,
    matched_levels,
    moment_residuals,
    monotone_kb_lp,
    pinball_loss,
    quasi_spec_check,
    sup_over_nonincreasing,
    threshold_coupling,
)
from .synthetic import NOISE_MODES, PRESETS, SyntheticSpec, gen_synthetic
from .transport import TransportResult, barycentric_map, max_correlation, vector_quantile_1d
from .vqr_solver import (
    ConvergenceError,
    InternalError,
    VqrSolution,
    assemble_vqr_lp,
    conditional_model,
    dual_objective,
    solve_vqr_entropic,
    solve_vqr_exact,
    verify_duals,
)

__version__ = "0.1.0"
