"""Sensitivity diagnostics for state-dependent dynamics.

Linear quantum evolution preserves overlaps, so two nearby states stay
nearby forever and nothing here would ever fire. Feedback makes the
effective dynamics nonlinear, and these tools quantify the consequences:
pairs of trajectories that start a controlled distance apart, the
exponential rate at which they separate, and the time a detector
watching that separation needs to tell two almost identical preparations
apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feedback import FeedbackPolicy, ideal_feedback_step, integrate_nls
from .linalg import DensityMatrix, apply_unitary, sup_distance, trace_distance
from .seeding import as_generator, spawn_seeds

_METRICS = {"trace": trace_distance, "sup": sup_distance}


@dataclass(frozen=True)
class LyapunovFit:
    """Least-squares exponent of log-separation growth."""

    rate: float
    intercept: float
    r_squared: float
    window: tuple
    n_points: int
    window_found: bool


@dataclass(frozen=True)
class DivergenceSeries:
    times: np.ndarray
    separations: np.ndarray
    metric: str
    initial_separation: float


@dataclass(frozen=True)
class OverlapSeries:
    """Pair overlap under linear evolution; deviation should be noise."""

    times: np.ndarray
    overlaps: np.ndarray
    max_deviation: float


def _metric_fn(metric: str):
    if metric not in _METRICS:
        raise ValueError(f"unknown metric {metric!r}; use one of {sorted(_METRICS)}")
    return _METRICS[metric]


def random_kick(rho: DensityMatrix, size: float, metric: str = "trace", rng_seed=None) -> DensityMatrix:
    """Unitarily kick a state to a prescribed distance from itself.

    The generator is a random Hermitian matrix with unit spectral norm;
    the kick angle is tuned by bisection until the requested separation
    is met to one part in a thousand. Unitary kicks preserve the
    spectrum, so the perturbed state is as pure as the original.
    """
    if size <= 0:
        raise ValueError("kick size must be positive")
    rng = as_generator(rng_seed)
    dist = _metric_fn(metric)
    d = rho.dim
    g = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    g = 0.5 * (g + g.conj().T)
    w, v = np.linalg.eigh(g)
    w = w / np.max(np.abs(w))

    def kicked(angle: float) -> DensityMatrix:
        u = (v * np.exp(-1j * angle * w)) @ v.conj().T
        return DensityMatrix(u @ rho.matrix @ u.conj().T)

    hi = size
    for _ in range(60):
        if dist(kicked(hi), rho) >= size:
            break
        hi *= 2.0
    else:
        raise ValueError(
            f"no unitary kick of this generator reaches separation {size:g}; "
            "the state may be too mixed to move"
        )
    lo = 0.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        err = dist(kicked(mid), rho) - size
        if abs(err) <= 1e-3 * size:
            return kicked(mid)
        if err < 0:
            lo = mid
        else:
            hi = mid
    return kicked(0.5 * (lo + hi))


def _propagate_pair(rho_a, rho_b, policy: FeedbackPolicy, t_final: float, dt: float, metric: str):
    dist = _metric_fn(metric)
    if policy.kind == "unitary_map":
        period = policy.period if policy.period is not None else 1.0
        n = int(round(t_final / period))
        times = [0.0]
        seps = [dist(rho_a, rho_b)]
        a, b = rho_a, rho_b
        for k in range(1, n + 1):
            a = ideal_feedback_step(a, policy)
            b = ideal_feedback_step(b, policy)
            times.append(k * period)
            seps.append(dist(a, b))
        return np.array(times), np.array(seps)
    if policy.kind == "hamiltonian_map":
        ta = integrate_nls(rho_a, policy, t_final, dt)
        tb = integrate_nls(rho_b, policy, t_final, dt)
        seps = [dist(sa, sb) for sa, sb in zip(ta.states, tb.states)]
        return ta.times, np.array(seps)
    raise ValueError(f"cannot propagate a {policy.kind!r} policy pair")


def trajectory_divergence(
    rho0: DensityMatrix,
    size: float,
    policy: FeedbackPolicy,
    t_final: float,
    dt: float = 0.01,
    metric: str = "trace",
    rng_seed=None,
) -> DivergenceSeries:
    """Separation history of a fiducial state and a kicked twin."""
    rho_b = random_kick(rho0, size, metric, rng_seed)
    times, seps = _propagate_pair(rho0, rho_b, policy, t_final, dt, metric)
    return DivergenceSeries(times=times, separations=seps, metric=metric, initial_separation=size)


def finite_time_lyapunov(series: DivergenceSeries) -> LyapunovFit:
    """Fit an exponential growth rate inside the linear-growth window.

    The window keeps separations above 10x the initial size (past the
    transient) and below a tenth of the observed saturation level. When
    fewer than three samples land there, as for regular dynamics whose
    separation never grows, the fit is flagged and the rate pinned to 0.
    """
    s0 = series.initial_separation
    sat = float(np.max(series.separations))
    mask = (series.separations >= 10.0 * s0) & (series.separations <= 0.1 * sat)
    mask &= series.separations > 0
    if int(np.count_nonzero(mask)) < 3:
        return LyapunovFit(0.0, 0.0, 0.0, (np.nan, np.nan), int(np.count_nonzero(mask)), False)
    t = series.times[mask]
    y = np.log(series.separations[mask])
    coeffs = np.polyfit(t, y, 1)
    fit = np.polyval(coeffs, t)
    ss_res = float(np.sum((y - fit) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return LyapunovFit(
        rate=float(coeffs[0]),
        intercept=float(coeffs[1]),
        r_squared=r2,
        window=(float(t[0]), float(t[-1])),
        n_points=int(t.size),
        window_found=True,
    )


def lyapunov_ensemble(
    policy: FeedbackPolicy,
    dim: int,
    n_states: int,
    size: float,
    t_final: float,
    rng_seed=None,
    metric: str = "trace",
) -> np.ndarray:
    """Finite-time exponents over random pure initial states."""
    seeds = spawn_seeds(rng_seed, n_states)
    rates = np.empty(n_states)
    for i, seed in enumerate(seeds):
        rng = as_generator(seed)
        vec = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
        rho = DensityMatrix.pure(vec / np.linalg.norm(vec))
        series = trajectory_divergence(rho, size, policy, t_final, metric=metric, rng_seed=rng)
        rates[i] = finite_time_lyapunov(series).rate
    return rates


def linear_invariance_check(
    phi0: np.ndarray,
    phi0_perturbed: np.ndarray,
    hamiltonian: np.ndarray,
    t_final: float = 20.0,
    dt: float = 0.1,
) -> OverlapSeries:
    """Overlap of two pure states under a fixed (state-independent) Hamiltonian.

    Propagation uses the exact spectral propagator, so any drift in the
    overlap is roundoff, not integration error. This is the control
    experiment for the divergence diagnostics: without feedback the
    separation cannot grow.
    """
    h = np.asarray(hamiltonian, dtype=complex)
    w, v = np.linalg.eigh(0.5 * (h + h.conj().T))
    a = np.asarray(phi0, dtype=complex).ravel()
    b = np.asarray(phi0_perturbed, dtype=complex).ravel()
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    ca = v.conj().T @ a
    cb = v.conj().T @ b
    times = np.arange(0.0, t_final + 0.5 * dt, dt)
    overlaps = np.empty(times.size)
    for i, t in enumerate(times):
        phase = np.exp(-1j * w * t)
        overlaps[i] = abs(np.vdot(v @ (phase * ca), v @ (phase * cb)))
    return OverlapSeries(
        times=times,
        overlaps=overlaps,
        max_deviation=float(np.max(np.abs(overlaps - overlaps[0]))),
    )


def schrodinger_microscope(
    rho_a: DensityMatrix,
    rho_b: DensityMatrix,
    policy: FeedbackPolicy,
    threshold: float = 0.5,
    t_max: float = 100.0,
    dt: float = 0.01,
    metric: str = "trace",
):
    """Time for feedback dynamics to amplify a tiny state difference.

    Returns ``(t_detect, series)`` where t_detect is the first sampled
    time at which the separation reaches the threshold, or None if it
    never does within t_max. Exponential sensitivity makes t_detect grow
    only logarithmically as the initial separation shrinks, which is what
    lets a chaotic feedback loop distinguish preparations far below the
    resolution of any fixed measurement.
    """
    dist = _metric_fn(metric)
    s0 = dist(rho_a, rho_b)
    if s0 <= 0:
        raise ValueError("the two states must differ")
    if threshold <= s0:
        return 0.0, DivergenceSeries(np.array([0.0]), np.array([s0]), metric, s0)
    times, seps = _propagate_pair(rho_a, rho_b, policy, t_max, dt, metric)
    series = DivergenceSeries(times=times, separations=seps, metric=metric, initial_separation=s0)
    hits = np.nonzero(seps >= threshold)[0]
    t_detect = float(times[hits[0]]) if hits.size else None
    return t_detect, series


def bootstrap_ci(samples, n_resamples: int = 2000, level: float = 0.95, rng_seed=None):
    """Percentile bootstrap confidence interval for the mean."""
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two samples")
    rng = as_generator(rng_seed)
    idx = rng.integers(0, x.size, size=(n_resamples, x.size))
    means = x[idx].mean(axis=1)
    alpha = 0.5 * (1.0 - level)
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return float(lo), float(hi)
