"""Ensemble weak-measurement and quantum feedback simulator."""

from .linalg import (
    DensityMatrix,
    KrausChannel,
    Observable,
    UnitaryOp,
    apply_kraus,
    apply_unitary,
    bloch_vector,
    density_from_bloch,
    expectation,
    fidelity_to_pure,
    gell_mann_basis,
    partial_trace,
    random_density,
    random_pure,
    random_unitary,
    sup_distance,
    tensor_product,
    trace_distance,
)
from .measurement import (
    MeasurementRecord,
    TomographyResult,
    WeakMeasurementConfig,
    averaged_channel,
    collective_outcomes,
    collective_weak_measure,
    damping_factor,
    default_observable_set,
    estimator_accuracy,
    gaussian_povm_element,
    outcome_density,
    perturbation_size,
    single_weak_measure,
    weak_tomography,
)
from .pointer import (
    CouplingConfig,
    JointState,
    PointerState,
    ProbeSpec,
    couple_and_evolve,
    make_gaussian_pointer,
    multi_probe_measure,
    pointer_marginal,
    strong_limit_measure,
    system_reduced,
)
from .feedback import (
    FeedbackPolicy,
    FeedbackStepRecord,
    IntegrationError,
    Trajectory,
    builtin_policies,
    drive_to_target,
    feedback_step,
    ideal_feedback_step,
    integrate_nls,
    iterate_policy_map,
    make_policy,
    quantize_estimate,
    run_closed_loop,
)
from .chaos import (
    DivergenceSeries,
    LyapunovFit,
    bootstrap_ci,
    finite_time_lyapunov,
    linear_invariance_check,
    lyapunov_ensemble,
    random_kick,
    schrodinger_microscope,
    trajectory_divergence,
)

__version__ = "0.1.0"
