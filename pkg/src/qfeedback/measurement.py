"""Collective weak measurement of an observable on an ensemble of systems.

A readout of width ``delta`` applied jointly to ``n_systems`` identical
copies of a state produces one number: the ensemble average of the
measured observable, blurred by readout noise. The outcome law factors
into two exact stages,

    outcome = (sum of per-system eigenvalue draws + gaussian(0, delta)) / n,

where each eigenvalue is drawn from the Born weights of the single-system
state. Estimator accuracy follows

    accuracy = sqrt(delta^2 / n^2 + spread^2 / n),

with ``spread`` the standard deviation of the observable in the state.
The price of the readout is dephasing between eigenspaces: after
averaging over outcomes, the off-diagonal block (a, a') of each system
is multiplied by a Gaussian overlap factor (see ``damping_factor``),
and the per-system disturbance scale is

    perturbation = spread^2 / (2 delta^2).

Weak readouts (large delta relative to the spectral spread) disturb each
copy only slightly while the ensemble average remains sharp, which is
what makes state estimation inside a feedback loop possible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .linalg import (
    DensityMatrix,
    Observable,
    expectation,
    gell_mann_basis,
    hermitianize,
    std_dev,
    sup_distance,
)
from .seeding import as_generator, spawn_seeds

# Off-diagonal damping after outcome averaging is
# exp(-(a - a')^2 / (denom * delta^2)). The exact Gaussian kernel overlap
# gives denom = 8; a cruder convention that treats the kernel product as a
# single full-width Gaussian quotes denom = 2. Everything in this package
# computes with the exact constant; the coarse one is exposed only for
# side-by-side comparison.
EXACT_DAMPING_DENOM = 8.0
COARSE_DAMPING_DENOM = 2.0

# Hard cap on the number of distinct eigenvalue sums tracked by the
# selective (outcome-conditioned) post-state path.
MAX_SUM_SUPPORT = 200_000


@dataclass(frozen=True)
class WeakMeasurementConfig:
    """Collective readout setup: what to measure, how blurred, how many copies.

    ``delta = 0`` is allowed and means a noiseless readout of the ensemble
    average (the projective limit); formulas that diverge there say so.
    """

    observable: Observable
    delta: float
    n_systems: int = 1

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError(f"readout width must be >= 0, got {self.delta}")
        if self.n_systems < 1:
            raise ValueError(f"need at least one system, got {self.n_systems}")


@dataclass(frozen=True)
class MeasurementRecord:
    """One collective measurement: the outcome and what it did to the state."""

    outcome: float
    post_state: DensityMatrix
    damping_factors: dict
    sampled_eigenvalues: np.ndarray
    perturbation_norm: float


@dataclass(frozen=True)
class TomographyResult:
    """State estimate from one round of collective readouts."""

    estimate: DensityMatrix
    outcomes: np.ndarray
    post_state: DensityMatrix
    observables: tuple


def eigenvalue_probabilities(rho: DensityMatrix, obs: Observable) -> tuple[np.ndarray, np.ndarray]:
    """Distinct eigenvalues of the observable and their Born weights."""
    if rho.dim != obs.dim:
        raise ValueError(f"dimension mismatch: state {rho.dim}, observable {obs.dim}")
    values, projectors = obs.spectral_projectors
    probs = np.array([float(np.trace(p @ rho.matrix).real) for p in projectors])
    probs = np.clip(probs, 0.0, None)
    return values, probs / probs.sum()


def gaussian_povm_element(obs: Observable, mu: float, delta: float) -> np.ndarray:
    """Measurement operator for outcome ``mu`` on one system.

    Diagonal in the observable eigenbasis with Gaussian weights of width
    ``2 delta`` around each eigenvalue; normalized so the elements resolve
    the identity when integrated over all outcomes.
    """
    if delta <= 0:
        raise ValueError("povm elements need a strictly positive readout width")
    values, projectors = obs.spectral_projectors
    c = (2.0 * math.pi) ** (-0.25) / math.sqrt(delta)
    out = np.zeros((obs.dim, obs.dim), dtype=complex)
    for a, p in zip(values, projectors):
        out += c * math.exp(-((a - mu) ** 2) / (4.0 * delta**2)) * p
    return out


def povm_completeness_defect(
    obs: Observable, delta: float, span_sigmas: float = 10.0, n_points: int = 4001
) -> float:
    """sup-norm defect of the quadrature of A_mu† A_mu over outcomes."""
    values, _ = obs.spectral_projectors
    lo = float(values[0]) - span_sigmas * delta
    hi = float(values[-1]) + span_sigmas * delta
    mus = np.linspace(lo, hi, n_points)
    total = np.zeros((obs.dim, obs.dim), dtype=complex)
    for mu in mus:
        a = gaussian_povm_element(obs, float(mu), delta)
        total += a.conj().T @ a
    total *= (hi - lo) / (n_points - 1)
    # trapezoid end correction
    for mu in (mus[0], mus[-1]):
        a = gaussian_povm_element(obs, float(mu), delta)
        total -= 0.5 * (a.conj().T @ a) * (hi - lo) / (n_points - 1)
    return float(np.max(np.abs(total - np.eye(obs.dim))))


def damping_factor(a: float, a2: float, delta: float, denom: float = EXACT_DAMPING_DENOM) -> float:
    """Off-diagonal survival factor between eigenvalues ``a`` and ``a2``."""
    if a == a2:
        return 1.0
    if delta == 0.0:
        return 0.0
    return math.exp(-((a - a2) ** 2) / (denom * delta**2))


def averaged_channel(rho: DensityMatrix, obs: Observable, delta: float) -> DensityMatrix:
    """Non-selective state change: damp each eigenspace coherence.

    This is the outcome-averaged effect of one collective readout on any
    single member of the ensemble, independent of the ensemble size.
    """
    if rho.dim != obs.dim:
        raise ValueError(f"dimension mismatch: state {rho.dim}, observable {obs.dim}")
    values, projectors = obs.spectral_projectors
    out = np.zeros_like(rho.matrix)
    for i, (a_i, p_i) in enumerate(zip(values, projectors)):
        for j, (a_j, p_j) in enumerate(zip(values, projectors)):
            out = out + damping_factor(a_i, a_j, delta) * (p_i @ rho.matrix @ p_j)
    return DensityMatrix(out)


def estimator_accuracy(cfg: WeakMeasurementConfig, rho: DensityMatrix) -> float:
    """Root-mean-square error of the collective outcome around tr(rho A)."""
    spread = std_dev(rho, cfg.observable)
    n = cfg.n_systems
    return math.sqrt(cfg.delta**2 / n**2 + spread**2 / n)


def mixed_ensemble_accuracy(cfg: WeakMeasurementConfig, states) -> float:
    """Outcome RMSE when the ensemble members differ.

    Relative to the accuracy formula evaluated on the average state, the
    per-system variance term is reduced by the dispersion of the
    per-system means:

        var = delta^2/n^2 + (spread(rho_bar)^2 - dispersion) / n,
        dispersion = mean over systems of (mean_l - grand mean)^2.
    """
    states = list(states)
    n = len(states)
    if n != cfg.n_systems:
        raise ValueError(f"config says {cfg.n_systems} systems, got {n} states")
    means = np.array([expectation(s, cfg.observable) for s in states])
    avg = DensityMatrix(sum(s.matrix for s in states) / n)
    spread_sq = std_dev(avg, cfg.observable) ** 2
    dispersion = float(np.mean((means - means.mean()) ** 2))
    return math.sqrt(cfg.delta**2 / n**2 + max(spread_sq - dispersion, 0.0) / n)


def perturbation_size(cfg: WeakMeasurementConfig, rho: DensityMatrix) -> float:
    """Leading-order per-system disturbance, spread^2 / (2 delta^2)."""
    if cfg.delta == 0.0:
        raise ValueError("projective readout (delta = 0): disturbance is not perturbative")
    spread = std_dev(rho, cfg.observable)
    return spread**2 / (2.0 * cfg.delta**2)


def _sum_distribution(values: np.ndarray, probs: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact distribution of a sum of ``n`` i.i.d. eigenvalue draws."""
    sums = np.array([0.0])
    weights = np.array([1.0])
    for _ in range(n):
        s2 = np.round((sums[:, None] + values[None, :]).ravel(), 12)
        w2 = (weights[:, None] * probs[None, :]).ravel()
        sums, inverse = np.unique(s2, return_inverse=True)
        weights = np.bincount(inverse, weights=w2)
        if sums.size > MAX_SUM_SUPPORT:
            raise ValueError(
                "too many distinct eigenvalue sums for the outcome-conditioned "
                f"post-state ({sums.size} > {MAX_SUM_SUPPORT}); use the averaged channel"
            )
    return sums, weights


def _basis_damped(rho: DensityMatrix, obs: Observable, factor_matrix: np.ndarray) -> DensityMatrix:
    """Apply per-eigenvalue-pair factors to the state in the observable basis."""
    values, projectors = obs.spectral_projectors
    out = np.zeros_like(rho.matrix)
    for i, p_i in enumerate(projectors):
        for j, p_j in enumerate(projectors):
            out = out + factor_matrix[i, j] * (p_i @ rho.matrix @ p_j)
    return DensityMatrix(out / np.trace(out).real)


def _conditioned_state(
    rho: DensityMatrix, cfg: WeakMeasurementConfig, outcome: float
) -> DensityMatrix:
    """Single-system state conditioned on the collective outcome."""
    if cfg.delta == 0.0:
        raise ValueError("outcome-conditioned state needs delta > 0")
    values, probs = eigenvalue_probabilities(rho, cfg.observable)
    rest_sums, rest_w = _sum_distribution(values, probs, cfg.n_systems - 1)
    target = cfg.n_systems * outcome
    k = np.exp(
        -((values[:, None] + rest_sums[None, :] - target) ** 2) / (4.0 * cfg.delta**2)
    )
    factor = np.einsum("r,ar,br->ab", rest_w, k, k)
    return _basis_damped(rho, cfg.observable, factor)


def collective_weak_measure(
    rho: DensityMatrix,
    cfg: WeakMeasurementConfig,
    rng_seed=None,
    selective: bool = False,
) -> MeasurementRecord:
    """One collective readout of the ensemble average.

    Samples the outcome through the exact two-stage law (per-system
    eigenvalue draws plus Gaussian readout noise). ``post_state`` is the
    outcome-averaged single-system state by default; with
    ``selective=True`` it is conditioned on the sampled outcome instead,
    which costs an exact bookkeeping of eigenvalue sums and is only
    practical for modest ensembles or small spectra.
    """
    rng = as_generator(rng_seed)
    values, probs = eigenvalue_probabilities(rho, cfg.observable)
    draws = rng.choice(values, size=cfg.n_systems, p=probs)
    noise = rng.normal(0.0, cfg.delta) if cfg.delta > 0 else 0.0
    outcome = (float(draws.sum()) + noise) / cfg.n_systems

    if selective:
        post = _conditioned_state(rho, cfg, outcome)
    else:
        post = averaged_channel(rho, cfg.observable, cfg.delta)

    factors = {}
    for i, a_i in enumerate(values):
        for j in range(i + 1, len(values)):
            factors[(float(a_i), float(values[j]))] = damping_factor(a_i, values[j], cfg.delta)
    return MeasurementRecord(
        outcome=outcome,
        post_state=post,
        damping_factors=factors,
        sampled_eigenvalues=draws,
        perturbation_norm=sup_distance(post, rho),
    )


def single_weak_measure(
    rho: DensityMatrix,
    cfg: WeakMeasurementConfig,
    rng_seed=None,
    selective: bool = False,
) -> MeasurementRecord:
    """One blurred readout of a single system (``n_systems`` must be 1)."""
    if cfg.n_systems != 1:
        raise ValueError("single_weak_measure needs a one-system config")
    return collective_weak_measure(rho, cfg, rng_seed, selective=selective)


def collective_outcomes(
    rho: DensityMatrix, cfg: WeakMeasurementConfig, n_trials: int, rng_seed=None
) -> np.ndarray:
    """Vectorized outcome sampler for repeated independent readouts.

    The per-trial eigenvalue draws enter only through their sum, so trials
    are generated from multinomial counts; the law is identical to
    ``collective_weak_measure`` outcome by outcome.
    """
    rng = as_generator(rng_seed)
    values, probs = eigenvalue_probabilities(rho, cfg.observable)
    counts = rng.multinomial(cfg.n_systems, probs, size=n_trials)
    sums = counts @ values
    if cfg.delta > 0:
        sums = sums + rng.normal(0.0, cfg.delta, size=n_trials)
    return sums / cfg.n_systems


def outcome_density(
    rho: DensityMatrix, cfg: WeakMeasurementConfig, mu_grid: np.ndarray
) -> np.ndarray:
    """Exact probability density of the collective outcome on a grid."""
    if cfg.delta <= 0:
        raise ValueError("outcome density needs delta > 0")
    values, probs = eigenvalue_probabilities(rho, cfg.observable)
    sums, weights = _sum_distribution(values, probs, cfg.n_systems)
    mu = np.asarray(mu_grid, dtype=float)
    width = cfg.delta / cfg.n_systems
    dens = np.zeros_like(mu)
    for s, w in zip(sums, weights):
        dens += w * np.exp(-((mu - s / cfg.n_systems) ** 2) / (2.0 * width**2))
    return dens / (math.sqrt(2.0 * math.pi) * width)


def average_state_estimate(
    states, cfg: WeakMeasurementConfig, rng_seed=None
) -> MeasurementRecord:
    """Collective readout over systems prepared in different states.

    The outcome estimates the observable mean of the average state; its
    RMSE is ``mixed_ensemble_accuracy``. Every member suffers the same
    eigenspace damping, so the reported ``post_state`` is the damped
    average state (equal to the average of the damped members).
    """
    states = list(states)
    if len(states) != cfg.n_systems:
        raise ValueError(f"config says {cfg.n_systems} systems, got {len(states)} states")
    rng = as_generator(rng_seed)
    values, _ = cfg.observable.spectral_projectors
    draws = np.empty(len(states))
    for i, s in enumerate(states):
        _, probs = eigenvalue_probabilities(s, cfg.observable)
        draws[i] = rng.choice(values, p=probs)
    noise = rng.normal(0.0, cfg.delta) if cfg.delta > 0 else 0.0
    outcome = (float(draws.sum()) + noise) / cfg.n_systems

    avg = DensityMatrix(sum(s.matrix for s in states) / len(states))
    post = averaged_channel(avg, cfg.observable, cfg.delta)
    factors = {}
    for i, a_i in enumerate(values):
        for j in range(i + 1, len(values)):
            factors[(float(a_i), float(values[j]))] = damping_factor(a_i, values[j], cfg.delta)
    return MeasurementRecord(
        outcome=outcome,
        post_state=post,
        damping_factors=factors,
        sampled_eigenvalues=draws,
        perturbation_norm=sup_distance(post, avg),
    )


def project_to_state(matrix: np.ndarray) -> DensityMatrix:
    """Nearest valid state by eigenvalue clipping at zero plus renormalization."""
    m = hermitianize(np.asarray(matrix, dtype=complex), atol=np.inf)
    w, v = np.linalg.eigh(m)
    w = np.clip(w, 0.0, None)
    total = float(w.sum())
    if total <= 0.0:
        raise ValueError("matrix has no positive spectral weight to project onto")
    return DensityMatrix((v * (w / total)) @ v.conj().T)


def default_observable_set(dim: int) -> list[Observable]:
    """A spanning set of dim^2 - 1 traceless observables (Paulis for qubits)."""
    return [Observable(math.sqrt(2.0) * b) for b in gell_mann_basis(dim)]


def _check_spanning(observables, dim: int) -> None:
    vecs = [np.eye(dim, dtype=complex).ravel()]
    vecs += [o.matrix.ravel() for o in observables]
    v = np.array(vecs)
    gram = v @ v.conj().T
    if np.linalg.matrix_rank(gram, tol=1e-10) < dim * dim:
        raise ValueError("observables plus identity do not span the Hermitian space")


def weak_tomography(
    rho_true: DensityMatrix,
    observables,
    cfg: WeakMeasurementConfig,
    rng_seed=None,
    exact: bool = False,
) -> TomographyResult:
    """Estimate a state from one collective readout per observable.

    Each observable is read out on the ensemble in list order; later
    readouts see the dephasing left by earlier ones, and ``post_state``
    is the ensemble member state after the full round. The estimate is a
    linear inversion over an orthonormal traceless basis, projected back
    to the state simplex by eigenvalue clipping. ``exact=True`` bypasses
    sampling and back-action entirely (the infinite-ensemble, vanishing
    disturbance limit), in which case the reconstruction is exact up to
    roundoff. The ``observable`` field of ``cfg`` is ignored here.
    """
    observables = list(observables)
    dim = rho_true.dim
    if len(observables) < dim * dim - 1:
        raise ValueError(f"need at least {dim*dim - 1} observables for dimension {dim}")
    _check_spanning(observables, dim)

    outcomes = np.empty(len(observables))
    if exact:
        post = rho_true
        for i, obs in enumerate(observables):
            outcomes[i] = expectation(rho_true, obs)
    else:
        seeds = spawn_seeds(rng_seed, len(observables))
        post = rho_true
        for i, obs in enumerate(observables):
            sub = replace(cfg, observable=obs)
            rec = collective_weak_measure(post, sub, seeds[i])
            outcomes[i] = rec.outcome
            post = averaged_channel(post, obs, cfg.delta)

    basis = gell_mann_basis(dim)
    g = np.array([[np.trace(o.matrix @ b).real for b in basis] for o in observables])
    y = outcomes - np.array([np.trace(o.matrix).real / dim for o in observables])
    coeffs, *_ = np.linalg.lstsq(g, y, rcond=None)
    m = np.eye(dim, dtype=complex) / dim
    for c, b in zip(coeffs, basis):
        m = m + c * b
    estimate = project_to_state(m)
    return TomographyResult(
        estimate=estimate, outcomes=outcomes, post_state=post, observables=tuple(observables)
    )
