"""Divergence diagnostics: null results for linear dynamics, positive
exponents for the kicked map, detection-time scaling."""

import math

import numpy as np
import pytest

from qfeedback.chaos import (
    DivergenceSeries,
    bootstrap_ci,
    finite_time_lyapunov,
    linear_invariance_check,
    lyapunov_ensemble,
    random_kick,
    schrodinger_microscope,
    trajectory_divergence,
)
from qfeedback.feedback import make_policy
from qfeedback.linalg import (
    PAULI_X,
    PAULI_Z,
    DensityMatrix,
    random_pure,
    trace_distance,
)


def test_random_kick_hits_requested_separation():
    rng = np.random.default_rng(2)
    rho = DensityMatrix.pure(random_pure(rng, 2))
    for size in (1e-2, 1e-5, 1e-8):
        kicked = random_kick(rho, size, rng_seed=7)
        assert trace_distance(kicked, rho) == pytest.approx(size, rel=1.5e-3)
        # unitary kicks cannot mix a pure state
        assert kicked.purity() == pytest.approx(1.0, abs=1e-10)


def test_random_kick_cannot_move_maximally_mixed():
    with pytest.raises(ValueError, match="mixed"):
        random_kick(DensityMatrix.maximally_mixed(2), 1e-3, rng_seed=0)


def test_linear_invariance_overlap_constant():
    """|<phi|phi'>| under a fixed Hamiltonian cannot drift."""
    rng = np.random.default_rng(4)
    h0 = PAULI_X + 0.3 * PAULI_Z
    report = linear_invariance_check(random_pure(rng, 2), random_pure(rng, 2), h0, t_final=20.0)
    assert report.max_deviation <= 1e-10
    assert report.times[-1] == pytest.approx(20.0)


def test_finite_time_lyapunov_exact_exponential():
    """A synthetic pure-exponential series is fit without bias."""
    t = np.arange(0.0, 40.0, 0.5)
    s0 = 1e-8
    series = DivergenceSeries(
        times=t, separations=s0 * np.exp(0.5 * t), metric="trace", initial_separation=s0
    )
    fit = finite_time_lyapunov(series)
    assert fit.window_found
    assert fit.rate == pytest.approx(0.5, abs=1e-9)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)


def test_finite_time_lyapunov_flags_flat_series():
    t = np.arange(0.0, 20.0, 1.0)
    series = DivergenceSeries(
        times=t, separations=np.full_like(t, 1e-6), metric="trace", initial_separation=1e-6
    )
    fit = finite_time_lyapunov(series)
    assert not fit.window_found
    assert fit.rate == 0.0


def test_kicked_top_divergence_positive_rate():
    pol = make_policy("kicked_nonlinear_top", 3.0)
    rho0 = DensityMatrix.pure([math.cos(0.35), math.sin(0.35)])
    series = trajectory_divergence(rho0, 1e-8, pol, t_final=60.0, rng_seed=9)
    assert series.separations[0] == pytest.approx(1e-8, rel=2e-3)
    fit = finite_time_lyapunov(series)
    assert fit.window_found
    assert fit.rate > 0.2
    assert fit.r_squared > 0.5


def test_kicked_top_zero_kick_shows_no_growth():
    pol = make_policy("kicked_nonlinear_top", 0.0)
    rho0 = DensityMatrix.pure([math.cos(0.35), math.sin(0.35)])
    series = trajectory_divergence(rho0, 1e-8, pol, t_final=60.0, rng_seed=9)
    # linear map: separation cannot grow past the kick size scale
    assert np.max(series.separations) < 10 * 1e-8
    fit = finite_time_lyapunov(series)
    assert not fit.window_found and fit.rate == 0.0


def test_lyapunov_ensemble_bootstrap_excludes_zero():
    pol = make_policy("kicked_nonlinear_top", 3.0)
    rates = lyapunov_ensemble(pol, dim=2, n_states=10, size=1e-8, t_final=60.0, rng_seed=42)
    lo, hi = bootstrap_ci(rates, rng_seed=1)
    assert lo > 0.0
    assert hi > lo


def test_bootstrap_ci_requires_samples():
    with pytest.raises(ValueError):
        bootstrap_ci([1.0])


def test_hamiltonian_policy_divergence_dispatch():
    pol = make_policy("mean_field_bloch", 1.0, 0.0, 0.7)
    rho0 = DensityMatrix.pure([math.cos(0.5), math.sin(0.5)])
    series = trajectory_divergence(rho0, 1e-4, pol, t_final=2.0, dt=0.02, rng_seed=3)
    assert series.times[-1] == pytest.approx(2.0)
    assert np.all(series.separations >= 0.0)


def test_microscope_detects_faster_for_larger_differences():
    pol = make_policy("kicked_nonlinear_top", 3.0)
    rho_a = DensityMatrix.pure([math.cos(0.7), math.sin(0.7)])
    detect = []
    for s0 in (1e-3, 1e-4, 1e-5):
        rho_b = random_kick(rho_a, s0, rng_seed=5)
        t_d, series = schrodinger_microscope(rho_a, rho_b, pol, threshold=0.3, t_max=80.0)
        assert t_d is not None
        detect.append(t_d)
        assert series.separations.size == 81
    assert detect[0] <= detect[1] <= detect[2]


def test_microscope_detection_time_scales_with_log_separation():
    pol = make_policy("kicked_nonlinear_top", 3.0)
    rho_a = DensityMatrix.pure([math.cos(0.7), math.sin(0.7)])
    sizes = (1e-3, 1e-4, 1e-5)
    ts, xs = [], []
    for s0 in sizes:
        rho_b = random_kick(rho_a, s0, rng_seed=5)
        t_d, _ = schrodinger_microscope(rho_a, rho_b, pol, threshold=0.3, t_max=80.0)
        ts.append(t_d)
        xs.append(math.log(0.3 / s0))
    coeffs = np.polyfit(xs, ts, 1)
    fit = np.polyval(coeffs, xs)
    ss_res = float(np.sum((np.array(ts) - fit) ** 2))
    ss_tot = float(np.sum((np.array(ts) - np.mean(ts)) ** 2))
    assert 1.0 - ss_res / ss_tot >= 0.9


def test_microscope_trivial_when_already_separated():
    pol = make_policy("kicked_nonlinear_top", 3.0)
    zero = DensityMatrix.pure([1.0, 0.0])
    one = DensityMatrix.pure([0.0, 1.0])
    t_d, series = schrodinger_microscope(zero, one, pol, threshold=0.5, t_max=10.0)
    assert t_d == 0.0
    assert series.separations[0] == pytest.approx(1.0)


def test_microscope_rejects_identical_states():
    pol = make_policy("kicked_nonlinear_top", 3.0)
    zero = DensityMatrix.pure([1.0, 0.0])
    with pytest.raises(ValueError, match="differ"):
        schrodinger_microscope(zero, zero, pol)
