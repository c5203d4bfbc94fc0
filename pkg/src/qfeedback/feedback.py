"""Closed-loop control from collective readouts.

Two discrete step flavors: ``feedback_step`` runs tomography on the
ensemble, quantizes the estimate to the policy's discrimination grid,
and conjugates the measurement-perturbed state by the policy unitary;
``ideal_feedback_step`` is the exact-knowledge limit, a state-dependent
conjugation with no estimation noise or back-action. Because the applied
unitary depends on the state, these maps are not affine on density
matrices, and repeated cycles realize an effectively nonlinear dynamics:
in the continuous limit the state obeys

    d rho / dt = -i [H(rho), rho]

for a state-dependent Hamiltonian policy, integrated here by a classic
4th-order one-step method with per-step re-Hermitization and trace
renormalization. Eigenvalue drift is monitored, never projected away, so
an unstable step size surfaces as a diagnostic abort instead of a
silently doctored trajectory.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import (
    PAULI_X,
    PAULI_Y,
    PAULI_Z,
    DensityMatrix,
    Observable,
    UnitaryOp,
    apply_unitary,
    fidelity_to_pure,
    gell_mann_basis,
    sup_distance,
    trace_distance,
)
from .measurement import (
    WeakMeasurementConfig,
    averaged_channel,
    default_observable_set,
    perturbation_size,
    project_to_state,
    weak_tomography,
)

POLICY_KINDS = ("unitary_map", "hamiltonian_map", "eigen_map", "channel_map")

DEFAULT_DT = 0.01
DRIFT_TOL_PER_TIME = 1e-9


class IntegrationError(RuntimeError):
    """Trajectory aborted by a conservation monitor; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class FeedbackPolicy:
    """Control law evaluated on a state estimate.

    ``func`` maps the (quantized) estimate to an object fixed by ``kind``:
    a UnitaryOp, a Hermitian Hamiltonian matrix, an isospectral state, or
    an arbitrary replacement state. ``discrimination_accuracy`` is the
    pitch at which the policy can tell estimates apart; 0 means perfectly
    resolved. Stroboscopic unitary policies carry their ``period``.
    """

    name: str
    kind: str
    func: object
    params: tuple = ()
    discrimination_accuracy: float = 0.0
    period: float | None = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}; expected one of {POLICY_KINDS}")
        if self.discrimination_accuracy < 0:
            raise ValueError("discrimination accuracy must be >= 0")


@dataclass(frozen=True)
class Trajectory:
    """Sampled state history with conservation diagnostics."""

    times: np.ndarray
    states: tuple
    records: tuple | None = None
    diagnostics: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", tuple(self.states))


@dataclass(frozen=True)
class FeedbackStepRecord:
    """What one measure-then-act cycle saw and did."""

    estimate: DensityMatrix
    quantized_estimate: DensityMatrix
    outcomes: np.ndarray | None
    applied: UnitaryOp
    perturbation_sup: float
    perturbation_trace: float
    perturbation_bound: float


def quantize_estimate(rho: DensityMatrix, pitch: float) -> DensityMatrix:
    """Round generalized Bloch coordinates to a grid of the given pitch."""
    if pitch == 0.0:
        return rho
    if pitch < 0:
        raise ValueError("quantization pitch must be >= 0")
    d = rho.dim
    basis = gell_mann_basis(d)
    m = np.eye(d, dtype=complex) / d
    for b in basis:
        c = float(np.trace(rho.matrix @ b).real)
        m = m + pitch * round(c / pitch) * b
    return project_to_state(m)


def policy_unitary(policy: FeedbackPolicy, estimate: DensityMatrix, dt: float | None = None) -> UnitaryOp:
    """Evaluate a policy to the unitary it applies for one step."""
    if policy.kind == "unitary_map":
        u = policy.func(estimate)
        return u if isinstance(u, UnitaryOp) else UnitaryOp(u)
    if policy.kind == "hamiltonian_map":
        if dt is None:
            raise ValueError("a Hamiltonian policy needs a step duration")
        return UnitaryOp.from_hamiltonian(np.asarray(policy.func(estimate)), dt)
    raise ValueError(f"policy kind {policy.kind!r} does not define a unitary")


def ideal_feedback_step(rho: DensityMatrix, policy: FeedbackPolicy, dt: float | None = None) -> DensityMatrix:
    """Exact-knowledge control step: act with the policy evaluated on rho itself.

    Because the conjugation depends on the state, the map is generally
    not affine: feeding it a mixture need not give the mixture of the
    individually controlled states.
    """
    if policy.kind in ("unitary_map", "hamiltonian_map"):
        quantized = quantize_estimate(rho, policy.discrimination_accuracy)
        return apply_unitary(rho, policy_unitary(policy, quantized, dt))
    if policy.kind == "eigen_map":
        return apply_eigen_map(rho, policy)
    return apply_channel_map(rho, policy)


def apply_eigen_map(rho: DensityMatrix, policy: FeedbackPolicy) -> DensityMatrix:
    """Apply a spectrum-preserving state map, verifying isospectrality."""
    if policy.kind != "eigen_map":
        raise ValueError(f"expected an eigen_map policy, got {policy.kind!r}")
    out = policy.func(rho)
    if not isinstance(out, DensityMatrix):
        out = DensityMatrix(np.asarray(out))
    drift = float(np.max(np.abs(out.spectrum - rho.spectrum)))
    if drift > 1e-10:
        raise ValueError(f"eigen map changed the spectrum by {drift:.3e} > 1e-10")
    return out


def apply_channel_map(rho: DensityMatrix, policy: FeedbackPolicy) -> DensityMatrix:
    """Apply an arbitrary state-to-state map (output validity enforced)."""
    if policy.kind != "channel_map":
        raise ValueError(f"expected a channel_map policy, got {policy.kind!r}")
    out = policy.func(rho)
    return out if isinstance(out, DensityMatrix) else DensityMatrix(np.asarray(out))


def feedback_step(
    rho: DensityMatrix,
    policy: FeedbackPolicy,
    meas_cfg: WeakMeasurementConfig,
    rng_seed=None,
    observables=None,
    exact: bool = False,
    margin: float = 1.0,
    dt: float | None = None,
) -> tuple[DensityMatrix, FeedbackStepRecord]:
    """One measure-then-act cycle on the ensemble.

    Runs tomography (one collective readout per observable), quantizes
    the estimate to the policy grid, and conjugates the readout-perturbed
    state by the policy unitary. ``exact=True`` injects the state itself
    as the estimate with zero back-action, so the result coincides with
    ``ideal_feedback_step`` bit for bit. The returned record carries the
    realized disturbance norms next to the a-priori bound
    (n_observables x max per-observable perturbation) x (1 + margin).
    """
    if policy.kind not in ("unitary_map", "hamiltonian_map"):
        raise ValueError("feedback_step acts through a unitary policy")
    obs_set = list(observables) if observables is not None else default_observable_set(rho.dim)

    if exact:
        perturbed = rho
        estimate = rho
        tomo = None
    else:
        tomo = weak_tomography(rho, obs_set, meas_cfg, rng_seed)
        perturbed = tomo.post_state
        estimate = tomo.estimate
    quantized = quantize_estimate(estimate, policy.discrimination_accuracy)
    u = policy_unitary(policy, quantized, dt)
    new_state = apply_unitary(perturbed, u)

    if exact or meas_cfg.delta == 0.0:
        bound = 0.0 if exact else float("inf")
    else:
        eps = max(
            perturbation_size(replace(meas_cfg, observable=o), rho) for o in obs_set
        )
        bound = len(obs_set) * eps * (1.0 + margin)
    record = FeedbackStepRecord(
        estimate=estimate,
        quantized_estimate=quantized,
        outcomes=None if tomo is None else tomo.outcomes,
        applied=u,
        perturbation_sup=sup_distance(perturbed, rho),
        perturbation_trace=trace_distance(perturbed, rho),
        perturbation_bound=bound,
    )
    return new_state, record


def _rhs(h: np.ndarray, rho: np.ndarray) -> np.ndarray:
    return -1j * (h @ rho - rho @ h)


def integrate_nls(
    rho0: DensityMatrix,
    policy: FeedbackPolicy,
    t_final: float,
    dt: float = DEFAULT_DT,
    sample_every: int = 1,
    drift_tol: float = DRIFT_TOL_PER_TIME,
) -> Trajectory:
    """Integrate d rho/dt = -i [H(rho), rho] for a Hamiltonian policy.

    Classic 4th-order steps; after each step the state is re-Hermitized
    (the guard rejects asymmetry above 1e-10) and trace-renormalized.
    Sorted eigenvalues are compared against the initial spectrum at every
    sample: the flow is isospectral, so drift beyond ``drift_tol`` per
    unit time means the step size is unstable and the run aborts.
    """
    if policy.kind != "hamiltonian_map":
        raise ValueError("integrate_nls needs a hamiltonian_map policy")
    if dt <= 0 or t_final <= 0:
        raise ValueError("need positive dt and t_final")
    h0 = np.asarray(policy.func(rho0), dtype=complex)
    h_norm = float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (h0 + h0.conj().T)))))
    if dt * h_norm > 0.1:
        raise ValueError(f"dt*|H| = {dt*h_norm:.3g} > 0.1: refine the step size")

    n_steps = int(round(t_final / dt))
    spectrum0 = np.sort(np.linalg.eigvalsh(rho0.matrix))
    rho = rho0.matrix.astype(complex)
    times = [0.0]
    states = [rho0]
    max_trace_defect = 0.0
    max_asym = 0.0
    max_drift_rate = 0.0

    def ham(m):
        # Stage points sit O(dt^2) outside the state set, so bypass the
        # positivity check; policies only read expectation values.
        h = np.asarray(policy.func(DensityMatrix._trusted(_renorm(m))), dtype=complex)
        asym = float(np.max(np.abs(h - h.conj().T)))
        if asym > 1e-12:
            raise ValueError(f"policy Hamiltonian asymmetry {asym:.3e} > 1e-12")
        return h

    for step in range(1, n_steps + 1):
        k1 = _rhs(ham(rho), rho)
        k2 = _rhs(ham(rho + 0.5 * dt * k1), rho + 0.5 * dt * k1)
        k3 = _rhs(ham(rho + 0.5 * dt * k2), rho + 0.5 * dt * k2)
        k4 = _rhs(ham(rho + dt * k3), rho + dt * k3)
        rho = rho + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

        asym = float(np.max(np.abs(rho - rho.conj().T)))
        if asym > 1e-10:
            raise IntegrationError(
                f"state lost Hermiticity (asymmetry {asym:.3e}) at t = {step*dt:.4g}",
                {"asymmetry": asym, "t": step * dt},
            )
        max_asym = max(max_asym, asym)
        rho = 0.5 * (rho + rho.conj().T)
        tr = float(np.trace(rho).real)
        max_trace_defect = max(max_trace_defect, abs(tr - 1.0))
        rho = rho / tr

        if step % sample_every == 0 or step == n_steps:
            t = step * dt
            drift = float(np.max(np.abs(np.sort(np.linalg.eigvalsh(rho)) - spectrum0)))
            rate = drift / t
            max_drift_rate = max(max_drift_rate, rate)
            if rate > drift_tol:
                raise IntegrationError(
                    f"eigenvalue drift {rate:.3e} per unit time exceeds {drift_tol:.1e} "
                    f"at t = {t:.4g}: step size dt = {dt} looks unstable",
                    {"drift_rate": rate, "t": t, "dt": dt},
                )
            times.append(t)
            # The drift monitor just vouched for this sample; the strict
            # constructor would reject excursions it deliberately tolerates.
            states.append(DensityMatrix._trusted(rho.copy()))

    return Trajectory(
        times=np.array(times),
        states=tuple(states),
        diagnostics={
            "max_trace_defect": max_trace_defect,
            "max_hermiticity_defect": max_asym,
            "max_eigenvalue_drift_rate": max_drift_rate,
            "n_steps": n_steps,
        },
        metadata={"policy": policy.name, "dt": dt},
    )


def _renorm(m: np.ndarray) -> np.ndarray:
    m = 0.5 * (m + m.conj().T)
    return m / np.trace(m).real


def iterate_policy_map(rho0: DensityMatrix, policy: FeedbackPolicy, n_steps: int) -> Trajectory:
    """Iterate a stroboscopic unitary policy with exact estimates."""
    if policy.kind != "unitary_map":
        raise ValueError("iterate_policy_map needs a unitary_map policy")
    period = policy.period if policy.period is not None else 1.0
    states = [rho0]
    rho = rho0
    for _ in range(n_steps):
        rho = ideal_feedback_step(rho, policy)
        states.append(rho)
    return Trajectory(
        times=period * np.arange(n_steps + 1),
        states=tuple(states),
        metadata={"policy": policy.name, "period": period},
    )


def run_closed_loop(
    rho0: DensityMatrix,
    policy: FeedbackPolicy,
    t_final: float,
    dt: float,
    meas_cfg: WeakMeasurementConfig | None = None,
    observables=None,
    rng_seed=None,
) -> Trajectory:
    """Repeated measure-then-act cycles, one per dt.

    With ``meas_cfg=None`` the estimates are exact, and refining dt makes
    the trajectory converge (first order) to the ``integrate_nls`` flow
    of the same Hamiltonian policy.
    """
    if policy.kind != "hamiltonian_map":
        raise ValueError("run_closed_loop needs a hamiltonian_map policy")
    n_steps = int(round(t_final / dt))
    states = [rho0]
    records = []
    rho = rho0
    from .seeding import spawn_seeds

    seeds = spawn_seeds(rng_seed, n_steps) if meas_cfg is not None else [None] * n_steps
    for i in range(n_steps):
        if meas_cfg is None:
            rho = ideal_feedback_step(rho, policy, dt=dt)
            records.append(None)
        else:
            rho, rec = feedback_step(
                rho, policy, meas_cfg, seeds[i], observables=observables, dt=dt
            )
            records.append(rec)
        states.append(rho)
    return Trajectory(
        times=dt * np.arange(n_steps + 1),
        states=tuple(states),
        records=tuple(records),
        metadata={"policy": policy.name, "dt": dt},
    )


def _rotation_between(v: np.ndarray, t: np.ndarray) -> UnitaryOp:
    """Unitary equal to identity off span{v, t} that maps v onto t."""
    d = v.size
    v = v / np.linalg.norm(v)
    t = t / np.linalg.norm(t)
    alpha = complex(np.vdot(v, t))
    rest = t - alpha * v
    beta = float(np.linalg.norm(rest))
    if beta < 1e-14:
        # states already parallel up to phase
        return UnitaryOp(np.eye(d, dtype=complex))
    e2 = rest / beta
    u = np.eye(d, dtype=complex)
    u = u - np.outer(v, v.conj()) - np.outer(e2, e2.conj())
    u = u + np.outer(t, v.conj())
    u = u + np.outer(-beta * v + np.conj(alpha) * e2, e2.conj())
    return UnitaryOp(u)


def dominant_eigenvector(rho: DensityMatrix) -> np.ndarray:
    """Eigenvector of the largest eigenvalue; lowest index wins ties."""
    w, v = np.linalg.eigh(rho.matrix)
    top = np.nonzero(w >= w[-1] - 1e-12)[0]
    return v[:, int(top[0])]


def drive_to_target(
    rho0: DensityMatrix,
    target: np.ndarray,
    meas_cfg: WeakMeasurementConfig,
    rng_seed=None,
    threshold: float = 0.0,
    max_iterations: int = 10,
    exact: bool = False,
    observables=None,
) -> Trajectory:
    """Steer an ensemble of unknown identical pure states onto a target.

    Each cycle estimates the state, then rotates the estimated dominant
    eigenvector onto the target. The loop stops once the estimated
    infidelity falls to ``threshold`` (checked before acting, so a state
    already on target performs zero rotations) or after
    ``max_iterations``. Every applied rotation is recorded in the
    metadata, so the whole protocol can be undone exactly by conjugating
    with the inverses in reverse order: steering never destroys
    coherence, it only redirects it.
    """
    target = np.asarray(target, dtype=complex).ravel()
    target = target / np.linalg.norm(target)
    if target.size != rho0.dim:
        raise ValueError("target dimension does not match the state")
    obs_set = list(observables) if observables is not None else default_observable_set(rho0.dim)
    from .seeding import spawn_seeds

    seeds = spawn_seeds(rng_seed, max_iterations) if not exact else [None] * max_iterations

    rho = rho0
    states = [rho0]
    times = [0.0]
    unitaries = []
    iterations = 0
    warned = False
    for i in range(max_iterations):
        tomo = weak_tomography(rho, obs_set, meas_cfg, seeds[i], exact=exact)
        estimate = tomo.estimate
        if estimate.purity() < 1.0 - 1e-6 and not warned:
            warnings.warn(
                f"estimate purity {estimate.purity():.6f} below pure-state tolerance; "
                "steering on the dominant eigenvector",
                stacklevel=2,
            )
            warned = True
        if 1.0 - fidelity_to_pure(estimate, target) <= threshold:
            break
        u = _rotation_between(dominant_eigenvector(estimate), target)
        rho = apply_unitary(tomo.post_state, u)
        unitaries.append(u)
        iterations += 1
        states.append(rho)
        times.append(float(iterations))
    return Trajectory(
        times=np.array(times),
        states=tuple(states),
        metadata={
            "policy": "rotate_to_target",
            "iterations": iterations,
            "final_infidelity": 1.0 - fidelity_to_pure(rho, target),
            "unitaries": tuple(unitaries),
        },
    )


# ---------------------------------------------------------------------------
# Policy catalog


def _mean_field_bloch(gx: float, gy: float, gz: float) -> FeedbackPolicy:
    gs = (gx, gy, gz)
    paulis = (PAULI_X, PAULI_Y, PAULI_Z)

    def ham(rho: DensityMatrix) -> np.ndarray:
        h = np.zeros((2, 2), dtype=complex)
        for g, p in zip(gs, paulis):
            h = h + g * float(np.trace(rho.matrix @ p).real) * p
        return h

    return FeedbackPolicy(name="mean_field_bloch", kind="hamiltonian_map", func=ham, params=gs)


def _kicked_nonlinear_top(k: float, period: float = 1.0, omega: float = math.pi / 4.0) -> FeedbackPolicy:
    """Linear precession about y, then an instantaneous kick about z.

    The kick unitary is exp(-i k <sigma_z> sigma_z) evaluated on the
    precessed state. At the default precession (quarter turn per period)
    the stroboscopic map develops a large chaotic sea for k of order 2
    and above; k = 0 is exactly the linear precession.
    """
    u0 = UnitaryOp.from_hamiltonian(omega * PAULI_Y, period)

    def unitary(rho: DensityMatrix) -> UnitaryOp:
        rho1 = u0.matrix @ rho.matrix @ u0.matrix.conj().T
        z1 = float(np.trace(rho1 @ PAULI_Z).real)
        kick = UnitaryOp.from_hamiltonian(k * z1 * PAULI_Z, 1.0)
        return UnitaryOp(kick.matrix @ u0.matrix)

    return FeedbackPolicy(
        name="kicked_nonlinear_top",
        kind="unitary_map",
        func=unitary,
        params=(k, period, omega),
        period=period,
    )


def _rotate_to_target(target) -> FeedbackPolicy:
    target = np.asarray(target, dtype=complex).ravel()
    target = target / np.linalg.norm(target)

    def unitary(rho: DensityMatrix) -> UnitaryOp:
        return _rotation_between(dominant_eigenvector(rho), target)

    return FeedbackPolicy(
        name="rotate_to_target", kind="unitary_map", func=unitary, params=tuple(target.tolist())
    )


def _identity_policy(dim: int = 2) -> FeedbackPolicy:
    def unitary(rho: DensityMatrix) -> UnitaryOp:
        return UnitaryOp(np.eye(rho.dim, dtype=complex))

    return FeedbackPolicy(name="identity", kind="unitary_map", func=unitary)


_CATALOG = {
    "mean_field_bloch": {
        "factory": _mean_field_bloch,
        "kind": "hamiltonian_map",
        "parameters": "gx, gy, gz (real couplings; any magnitude, keep dt*|g| <= 0.1)",
        "description": "H(rho) = sum_i g_i <sigma_i> sigma_i on a qubit",
    },
    "kicked_nonlinear_top": {
        "factory": _kicked_nonlinear_top,
        "kind": "unitary_map",
        "parameters": "k (kick strength, >= 0; chaotic for k >~ 2), period > 0, omega (precession rate, default pi/4)",
        "description": "stroboscopic map: quarter-turn precession then a <sigma_z>-conditioned kick",
    },
    "rotate_to_target": {
        "factory": _rotate_to_target,
        "kind": "unitary_map",
        "parameters": "target (complex state vector, any dimension)",
        "description": "rotate the estimated dominant eigenvector onto a fixed pure target",
    },
    "identity": {
        "factory": _identity_policy,
        "kind": "unitary_map",
        "parameters": "none",
        "description": "do nothing (open-loop reference)",
    },
}


def builtin_policies() -> dict:
    """Catalog of named policies: id -> kind, description, parameter notes."""
    return {
        name: {k: v for k, v in entry.items() if k != "factory"}
        for name, entry in _CATALOG.items()
    }


def make_policy(policy_id: str, *args, **kwargs) -> FeedbackPolicy:
    """Instantiate a cataloged policy by id."""
    if policy_id not in _CATALOG:
        raise ValueError(f"unknown policy {policy_id!r}; known: {sorted(_CATALOG)}")
    return _CATALOG[policy_id]["factory"](*args, **kwargs)
