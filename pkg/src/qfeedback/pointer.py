"""Continuous pointer (meter) model of the collective readout.

Systems couple to a one-dimensional pointer through an impulsive
interaction that translates the pointer by (sum of eigenvalues) x
``gamma_t``. Because the coupling is diagonal in the measured basis, the
joint state after coupling is a finite sum of branches labelled by how
many systems sit at each distinct eigenvalue; each branch carries a
rigidly shifted copy of the pointer wave packet. Translations are applied
in the spectral (momentum) representation, so they are exact up to the
band limit of the grid and compose additively without interpolation
error.

The pointer position marginal is the mixture of shifted packet densities
(the readout law), and tracing the pointer out leaves each system damped
by the overlap of packets shifted by (a - a') * gamma_t: the same
channel the abstract measurement module applies with readout width
delta = pointer width / gamma_t. That correspondence is the oracle this
module is checked against.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .linalg import ATOL_SPECTRAL, DensityMatrix, Observable, partial_trace
from .seeding import as_generator

# Storage cap for branch amplitudes (complex entries) and for the
# multi-probe state tensor.
MAX_BRANCH_ENTRIES = 2**23
MAX_PROBE_ENTRIES = 2**22


@dataclass(frozen=True)
class PointerState:
    """Wave packet sampled on a uniform symmetric grid."""

    grid: np.ndarray
    psi: np.ndarray
    width: float

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        psi = np.asarray(self.psi, dtype=complex)
        if grid.ndim != 1 or grid.shape != psi.shape:
            raise ValueError("grid and amplitudes must be matching 1-d arrays")
        steps = np.diff(grid)
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
            raise ValueError("grid must be uniform")
        norm = float(np.sum(np.abs(psi) ** 2) * steps[0])
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"pointer norm {norm!r} is not 1")
        for name, arr in (("grid", grid), ("psi", psi)):
            arr = np.ascontiguousarray(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dq(self) -> float:
        return float(self.grid[1] - self.grid[0])

    @property
    def m(self) -> int:
        return self.grid.size

    def density(self) -> np.ndarray:
        return np.abs(self.psi) ** 2

    def mean_q(self) -> float:
        return float(np.sum(self.grid * self.density()) * self.dq)

    def std_q(self) -> float:
        mean = self.mean_q()
        var = float(np.sum((self.grid - mean) ** 2 * self.density()) * self.dq)
        return math.sqrt(max(var, 0.0))


@dataclass(frozen=True)
class CouplingConfig:
    """Impulsive system-pointer coupling: total kick strength and copy count."""

    observable: Observable
    gamma_t: float
    n_systems: int = 1

    def __post_init__(self):
        if self.n_systems < 1:
            raise ValueError(f"need at least one system, got {self.n_systems}")


@dataclass(frozen=True)
class Branch:
    """One eigenvalue configuration: occupation counts, weight, pointer shift."""

    counts: tuple
    weight: float
    shift: float
    psi: np.ndarray


@dataclass(frozen=True)
class JointState:
    """Joint system-pointer state after the coupling.

    ``branches`` caches the diagonal (readout-visible) part; together with
    the input state, observable, and kick strength it determines the full
    joint density operator, which is never stored densely.
    """

    pointer: PointerState
    observable: Observable
    rho: DensityMatrix
    gamma_t: float
    n_systems: int
    branches: tuple

    @property
    def dims(self) -> list:
        return [self.rho.dim] * self.n_systems + [self.pointer.m]

    def weight_defect(self) -> float:
        return abs(sum(b.weight for b in self.branches) - 1.0)

    def norm_defect(self) -> float:
        dq = self.pointer.dq
        total = sum(b.weight * float(np.sum(np.abs(b.psi) ** 2) * dq) for b in self.branches)
        return abs(total - 1.0)


@dataclass(frozen=True)
class PointerMarginal:
    """Pointer position density after coupling, with one readout sample."""

    grid: np.ndarray
    density: np.ndarray
    sample: float
    estimate: float


@dataclass(frozen=True)
class StrongMeasurementRecord:
    """Sharp-pointer readout: eigenvalue outcome and collapsed state."""

    outcome: float
    readout: float
    post_state: DensityMatrix


@dataclass(frozen=True)
class ProbeSpec:
    """One pointer in a multi-probe arrangement."""

    observable: Observable
    gamma_t: float
    width: float
    grid_m: int = 256


@dataclass(frozen=True)
class MultiProbeRecord:
    """Simultaneous multi-pointer readout results."""

    readouts: tuple
    estimates: tuple
    degenerate: tuple
    system_state: DensityMatrix
    reduced_state: DensityMatrix


def make_gaussian_pointer(
    width: float, m: int = 2048, half_extent: float | None = None, max_shift: float = 0.0
) -> PointerState:
    """Gaussian packet of standard deviation ``width`` centered at zero.

    The default extent is 8 x (width + expected maximum shift) on each
    side, which keeps truncated mass below 1e-12 for every shifted copy.
    """
    if width <= 0:
        raise ValueError(f"pointer width must be positive, got {width}")
    if half_extent is None:
        half_extent = 8.0 * (width + abs(max_shift))
    grid = (np.arange(m) - m // 2) * (2.0 * half_extent / m)
    psi = np.exp(-(grid**2) / (4.0 * width**2)).astype(complex)
    psi /= math.sqrt(float(np.sum(np.abs(psi) ** 2)) * (grid[1] - grid[0]))
    return PointerState(grid=grid, psi=psi, width=width)


def make_square_pointer(
    width: float, m: int = 2048, half_extent: float | None = None, max_shift: float = 0.0
) -> PointerState:
    """Flat packet with the same standard deviation convention as the Gaussian."""
    if width <= 0:
        raise ValueError(f"pointer width must be positive, got {width}")
    half_width = width * math.sqrt(3.0)
    if half_extent is None:
        half_extent = 8.0 * (width + abs(max_shift))
    grid = (np.arange(m) - m // 2) * (2.0 * half_extent / m)
    psi = (np.abs(grid) <= half_width).astype(complex)
    psi /= math.sqrt(float(np.sum(np.abs(psi) ** 2)) * (grid[1] - grid[0]))
    return PointerState(grid=grid, psi=psi, width=width)


def spectral_shift(psi: np.ndarray, dq: float, shift: float) -> np.ndarray:
    """Translate a sampled wave function by ``shift`` via a momentum phase ramp."""
    k = 2.0 * math.pi * np.fft.fftfreq(psi.size, dq)
    return np.fft.ifft(np.fft.fft(psi) * np.exp(-1j * k * shift))


def _eigen_data(rho: DensityMatrix, obs: Observable):
    values, projectors = obs.spectral_projectors
    probs = np.array([float(np.trace(p @ rho.matrix).real) for p in projectors])
    probs = np.clip(probs, 0.0, None)
    return values, projectors, probs / probs.sum()


def couple_and_evolve(rho: DensityMatrix, pointer: PointerState, cfg: CouplingConfig) -> JointState:
    """Kick the pointer by gamma_t x (sum of eigenvalues) in every branch.

    Branches are labelled by occupation counts over distinct eigenvalues
    (systems prepared identically are exchangeable), with multinomial
    weights; each branch stores its exactly shifted pointer packet.
    """
    if rho.dim != cfg.observable.dim:
        raise ValueError(f"dimension mismatch: state {rho.dim}, observable {cfg.observable.dim}")
    values, _, probs = _eigen_data(rho, cfg.observable)
    n, n_groups = cfg.n_systems, len(values)

    max_shift = max(abs(float(values[0])), abs(float(values[-1]))) * abs(cfg.gamma_t) * n
    half_extent = float(-pointer.grid[0])
    if half_extent < max_shift + 8.0 * pointer.width:
        raise ValueError(
            f"grid half extent {half_extent:.3g} cannot hold shifts up to "
            f"{max_shift:.3g} plus an 8-sigma guard band"
        )

    n_branches = math.comb(n + n_groups - 1, n_groups - 1)
    if n_branches * pointer.m > MAX_BRANCH_ENTRIES:
        raise ValueError(
            f"{n_branches} branches x {pointer.m} grid points exceeds the storage cap; "
            "use the abstract measurement channel for ensembles this large"
        )

    branches = []
    for combo in itertools.combinations_with_replacement(range(n_groups), n):
        counts = tuple(combo.count(g) for g in range(n_groups))
        if any(c > 0 and p == 0.0 for c, p in zip(counts, probs)):
            continue
        log_w = math.lgamma(n + 1)
        for c, p in zip(counts, probs):
            log_w -= math.lgamma(c + 1)
            if c > 0:
                log_w += c * math.log(p)
        weight = math.exp(log_w)
        if weight == 0.0:
            continue
        shift = float(np.dot(counts, values)) * cfg.gamma_t
        psi_b = spectral_shift(pointer.psi, pointer.dq, shift)
        branches.append(Branch(counts=counts, weight=float(weight), shift=shift, psi=psi_b))
    return JointState(
        pointer=pointer,
        observable=cfg.observable,
        rho=rho,
        gamma_t=cfg.gamma_t,
        n_systems=n,
        branches=tuple(branches),
    )


def pointer_marginal(joint: JointState, rng_seed=None) -> PointerMarginal:
    """Position density of the pointer, plus one sampled readout.

    The estimate divides the sample by gamma_t x n_systems; it is NaN for
    a zero kick strength (the readout then carries no signal).
    """
    rng = as_generator(rng_seed)
    dq = joint.pointer.dq
    density = np.zeros(joint.pointer.m)
    for b in joint.branches:
        density += b.weight * np.abs(b.psi) ** 2
    weights = np.array([b.weight for b in joint.branches])
    pick = rng.choice(len(joint.branches), p=weights / weights.sum())
    cell = np.abs(joint.branches[pick].psi) ** 2 * dq
    sample = float(rng.choice(joint.pointer.grid, p=cell / cell.sum()))
    scale = joint.gamma_t * joint.n_systems
    estimate = sample / scale if scale != 0 else float("nan")
    return PointerMarginal(grid=joint.pointer.grid, density=density, sample=sample, estimate=estimate)


def density_moments(grid: np.ndarray, density: np.ndarray) -> tuple[float, float]:
    """Mean and variance of a sampled density by quadrature."""
    dq = float(grid[1] - grid[0])
    total = float(np.sum(density) * dq)
    mean = float(np.sum(grid * density) * dq / total)
    var = float(np.sum((grid - mean) ** 2 * density) * dq / total)
    return mean, var


def packet_overlap(pointer: PointerState, shift: float) -> complex:
    """Grid quadrature of conj(psi(q - shift)) psi(q)."""
    shifted = spectral_shift(pointer.psi, pointer.dq, shift)
    return complex(np.vdot(shifted, pointer.psi) * pointer.dq)


def system_reduced(joint: JointState, index: int = 0) -> DensityMatrix:
    """State of one system after tracing out the pointer and the other copies.

    Coherence between eigenvalues a and a' survives with the packet
    overlap at relative shift (a - a') gamma_t; the common shift from the
    remaining copies cancels exactly because spectral translations
    compose additively. All copies are prepared identically, so the
    result does not depend on ``index`` (kept for interface clarity).
    """
    if not 0 <= index < joint.n_systems:
        raise ValueError(f"system index {index} out of range for {joint.n_systems} copies")
    values, projectors, _ = _eigen_data(joint.rho, joint.observable)
    out = np.zeros_like(joint.rho.matrix)
    for i, p_i in enumerate(projectors):
        for j, p_j in enumerate(projectors):
            if i == j:
                factor = 1.0
            else:
                factor = packet_overlap(joint.pointer, (values[i] - values[j]) * joint.gamma_t)
            out = out + factor * (p_i @ joint.rho.matrix @ p_j)
    return DensityMatrix(out)


def strong_limit_measure(
    rho: DensityMatrix, cfg: CouplingConfig, width: float, rng_seed=None
) -> StrongMeasurementRecord:
    """Sharp-pointer readout of a single system.

    With the packet much narrower than the smallest eigenvalue gap times
    gamma_t, the readout resolves the spectrum: outcomes follow the Born
    weights and the state collapses onto the matching eigenspace. The
    Gaussian packet is used in closed form here (no grid), so the readout
    law and the conditioning are exact.
    """
    if cfg.n_systems != 1:
        raise ValueError("sharp readout is implemented for a single system")
    if width <= 0:
        raise ValueError(f"pointer width must be positive, got {width}")
    gap = cfg.observable.min_gap
    if math.isfinite(gap) and width > gap * abs(cfg.gamma_t) / 8.0:
        raise ValueError(
            f"width {width:.3g} cannot resolve a spectral gap of {gap:.3g} "
            f"at kick strength {cfg.gamma_t:.3g}; need width <= gap*gamma_t/8"
        )
    rng = as_generator(rng_seed)
    values, projectors, probs = _eigen_data(rho, cfg.observable)
    pick = rng.choice(len(values), p=probs)
    readout = float(values[pick]) * cfg.gamma_t + rng.normal(0.0, width)

    amps = np.exp(-((readout - values * cfg.gamma_t) ** 2) / (4.0 * width**2))
    m = np.zeros_like(rho.matrix)
    for amp, p in zip(amps, projectors):
        m = m + amp * p
    post = m @ rho.matrix @ m.conj().T
    post = DensityMatrix(post / np.trace(post).real)
    outcome = float(values[np.argmin(np.abs(values - readout / cfg.gamma_t))])
    return StrongMeasurementRecord(outcome=outcome, readout=readout, post_state=post)


def _collective_operator(obs: Observable, n_systems: int) -> np.ndarray:
    """Sum of single-copy observables on the n-fold product space."""
    d = obs.dim
    total = np.zeros((d**n_systems, d**n_systems), dtype=complex)
    for m in range(n_systems):
        op = np.eye(1, dtype=complex)
        for k in range(n_systems):
            op = np.kron(op, obs.matrix if k == m else np.eye(d))
        total += op
    return total


def multi_probe_measure(
    rho: DensityMatrix, probes, n_systems: int = 1, rng_seed=None
) -> MultiProbeRecord:
    """Couple several pointers at once, possibly to non-commuting observables.

    The joint evolution is computed exactly: in the momentum representation
    of every pointer the coupling is a system Hamiltonian parametrized by
    the momentum tuple, which is diagonalized point by point. Readouts are
    sampled from the joint position density of all pointers, so
    cross-pointer correlations are kept. A probe with zero kick strength
    is flagged degenerate: its readout is pure packet noise and its
    estimate is NaN.
    """
    probes = list(probes)
    if not probes:
        raise ValueError("need at least one probe")
    d = rho.dim
    dim_sys = d**n_systems
    grids, dqs, packets = [], [], []
    for p in probes:
        if p.observable.dim != d:
            raise ValueError("probe observable dimension does not match the state")
        values = p.observable.eigenvalues
        max_shift = max(abs(float(values[0])), abs(float(values[-1]))) * abs(p.gamma_t) * n_systems
        ps = make_gaussian_pointer(p.width, m=p.grid_m, max_shift=max_shift)
        grids.append(ps.grid)
        dqs.append(ps.dq)
        packets.append(ps.psi)
    n_cells = int(np.prod([g.size for g in grids]))
    if dim_sys * n_cells > MAX_PROBE_ENTRIES:
        raise ValueError("multi-probe state tensor exceeds the storage cap")

    # Hamiltonian per momentum tuple, diagonalized once and reused.
    k_axes = [2.0 * math.pi * np.fft.fftfreq(g.size, dq) for g, dq in zip(grids, dqs)]
    k_mesh = np.meshgrid(*k_axes, indexing="ij")
    ops = [p.gamma_t * _collective_operator(p.observable, n_systems) for p in probes]
    h = np.zeros((n_cells, dim_sys, dim_sys), dtype=complex)
    for km, op in zip(k_mesh, ops):
        h += km.ravel()[:, None, None] * op[None]
    w, v = np.linalg.eigh(h)
    phases = np.exp(-1j * w)

    weights, vecs = np.linalg.eigh(rho.matrix)
    grid_shape = tuple(g.size for g in grids)
    joint_density = np.zeros(grid_shape)
    sys_out = np.zeros((dim_sys, dim_sys), dtype=complex)
    cell_volume = float(np.prod(dqs))
    for member in itertools.product(range(d), repeat=n_systems):
        wgt = float(np.prod([weights[i] for i in member]))
        if wgt < 1e-15:
            continue
        vec = np.eye(1, dtype=complex).ravel()
        for i in member:
            vec = np.kron(vec, vecs[:, i])
        psi = vec.reshape((dim_sys,) + (1,) * len(grids))
        for axis, packet in enumerate(packets):
            shape = [1] * (1 + len(grids))
            shape[1 + axis] = packet.size
            psi = psi * packet.reshape(shape)
        for axis in range(len(grids)):
            psi = np.fft.fft(psi, axis=1 + axis)
        flat = psi.reshape(dim_sys, n_cells).T
        coeff = np.einsum("nij,nj->ni", v.conj().transpose(0, 2, 1), flat)
        flat = np.einsum("nij,nj->ni", v, coeff * phases)
        psi = flat.T.reshape((dim_sys,) + grid_shape)
        for axis in range(len(grids)):
            psi = np.fft.ifft(psi, axis=1 + axis)
        joint_density += wgt * np.sum(np.abs(psi) ** 2, axis=0) * cell_volume
        f = psi.reshape(dim_sys, n_cells)
        sys_out += wgt * (f @ f.conj().T) * cell_volume

    rng = as_generator(rng_seed)
    flat_density = joint_density.ravel()
    cell = int(rng.choice(n_cells, p=flat_density / flat_density.sum()))
    idx = np.unravel_index(cell, grid_shape)
    readouts, estimates, degenerate = [], [], []
    for g, p, i in zip(grids, probes, idx):
        q = float(g[i])
        readouts.append(q)
        if p.gamma_t == 0.0:
            estimates.append(float("nan"))
            degenerate.append(True)
        else:
            estimates.append(q / (p.gamma_t * n_systems))
            degenerate.append(False)

    system_state = DensityMatrix(sys_out / np.trace(sys_out).real)
    if n_systems == 1:
        reduced = system_state
    else:
        reduced = partial_trace(system_state, [d] * n_systems, keep=0)
    return MultiProbeRecord(
        readouts=tuple(readouts),
        estimates=tuple(estimates),
        degenerate=tuple(degenerate),
        system_state=system_state,
        reduced_state=reduced,
    )
