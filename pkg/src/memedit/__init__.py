"""Closed-form weight editing on synthetic linear associative memories."""

from .memory import (GeometryConfig, LayerMemory, SyntheticModel, forward, gen_model, hidden_state,
                     load_model, save_model)
from .solvers import (AllocationPlan, SingularGeometryError, SolveResult, allocate_residual,
                      apply_updates, sherman_morrison_inv, solve_closed_form, solve_gradient_oracle,
                      solve_multilayer, solve_projection)
from .spectral import (SpectralReport, TrapWitness, ball_ellipsoid_gap, margin_to_progress,
                       spectral_report, static_trap_witness, trap_scan, trust_region_radius)
from .meta import (DivergenceError, EditRequest, MetaLoss, MetaTrace, StructuralGate, build_gate,
                   meta_loss, meta_loss_grad_W, metake_run, proxy_update, static_target_baseline)
from .fidelity import (FidelityReport, PreconditionError, check_geometry_discrepancy,
                       check_inverse_perturbation, fidelity_report, true_hypergradient)
from .harness import (ExperimentConfig, ResultsRecord, emit_results, read_results, run_experiment,
                      verify_all)

__version__ = "0.1.0"
