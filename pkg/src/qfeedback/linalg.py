"""Dense linear algebra for finite-dimensional quantum states and operators.

Conventions used throughout the package: hbar = 1, eigenvalues are sorted
ascending, and composite indices are little-endian (index 0 is the leftmost
Kronecker factor). Hermitian inputs pass through a symmetrization guard
that rejects anything with asymmetry above ``ATOL_SPECTRAL``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

# Tolerance ladder: algebraic identities at 1e-12, anything derived from an
# eigendecomposition at 1e-10.
ATOL_ALGEBRAIC = 1e-12
ATOL_SPECTRAL = 1e-10

# Default cap on composite operators: d^2 complex entries per matrix.
MAX_TENSOR_ENTRIES = 2**20

PAULI_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
PAULI_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
PAULI_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)


def hermitianize(m: np.ndarray, atol: float = ATOL_SPECTRAL) -> np.ndarray:
    """Return (M + M†)/2 after checking the asymmetry is below ``atol``."""
    m = np.asarray(m, dtype=complex)
    asym = float(np.max(np.abs(m - m.conj().T))) if m.size else 0.0
    if asym > atol:
        raise ValueError(f"matrix is not Hermitian: max asymmetry {asym:.3e} > {atol:.1e}")
    return 0.5 * (m + m.conj().T)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DensityMatrix:
    """Hermitian, unit-trace, positive-semidefinite matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"density matrix must be square, got shape {m.shape}")
        m = hermitianize(m)
        tr = float(np.trace(m).real)
        if abs(tr - 1.0) > 1e-9:
            raise ValueError(f"density matrix trace {tr!r} is not 1")
        m = m / tr
        if float(np.min(np.linalg.eigvalsh(m))) < -ATOL_SPECTRAL:
            raise ValueError("density matrix has a negative eigenvalue beyond tolerance")
        object.__setattr__(self, "matrix", _freeze(m))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def pure(cls, vec: np.ndarray) -> "DensityMatrix":
        """Projector onto a normalized state vector."""
        v = np.asarray(vec, dtype=complex).ravel()
        v = v / np.linalg.norm(v)
        return cls(np.outer(v, v.conj()))

    @classmethod
    def maximally_mixed(cls, dim: int) -> "DensityMatrix":
        return cls(np.eye(dim, dtype=complex) / dim)

    @classmethod
    def _trusted(cls, matrix: np.ndarray) -> "DensityMatrix":
        # Validation-free path for integrator stage points, which may sit
        # a hair outside the state set. Never expose externally.
        obj = object.__new__(cls)
        object.__setattr__(obj, "matrix", _freeze(np.asarray(matrix, dtype=complex)))
        return obj

    def purity(self) -> float:
        return float(np.trace(self.matrix @ self.matrix).real)

    @cached_property
    def spectrum(self) -> np.ndarray:
        """Eigenvalues, ascending."""
        return _freeze(np.linalg.eigvalsh(self.matrix))


@dataclass(frozen=True)
class Observable:
    """Hermitian operator with a cached spectral decomposition."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"observable must be square, got shape {m.shape}")
        object.__setattr__(self, "matrix", _freeze(hermitianize(m)))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @cached_property
    def _eigh(self) -> tuple[np.ndarray, np.ndarray]:
        w, v = np.linalg.eigh(self.matrix)
        return _freeze(w), _freeze(v)

    @property
    def eigenvalues(self) -> np.ndarray:
        """Eigenvalues, ascending."""
        return self._eigh[0]

    @property
    def eigenvectors(self) -> np.ndarray:
        """Eigenvector columns, ordered to match ``eigenvalues``."""
        return self._eigh[1]

    @cached_property
    def spectral_projectors(self) -> tuple[np.ndarray, tuple[np.ndarray, ...]]:
        """Distinct eigenvalues with their eigenprojectors.

        Eigenvalues closer than 1e-9 (relative to the spectral range) are
        grouped into one degenerate block, so every routine built on this
        decomposition is invariant under re-basing inside a block.
        """
        w, v = self.eigenvalues, self.eigenvectors
        scale = max(1.0, float(np.max(np.abs(w))))
        values, projectors = [], []
        i = 0
        while i < len(w):
            j = i
            while j + 1 < len(w) and w[j + 1] - w[i] <= 1e-9 * scale:
                j += 1
            block = v[:, i : j + 1]
            values.append(float(np.mean(w[i : j + 1])))
            projectors.append(_freeze(block @ block.conj().T))
            i = j + 1
        return _freeze(np.array(values)), tuple(projectors)

    @property
    def min_gap(self) -> float:
        """Smallest spacing between distinct eigenvalues (inf if only one)."""
        values, _ = self.spectral_projectors
        if len(values) < 2:
            return float("inf")
        return float(np.min(np.diff(values)))


@dataclass(frozen=True)
class UnitaryOp:
    """Unitary matrix, checked to ``ATOL_SPECTRAL``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"unitary must be square, got shape {m.shape}")
        err = float(np.max(np.abs(m.conj().T @ m - np.eye(m.shape[0]))))
        if err > ATOL_SPECTRAL:
            raise ValueError(f"matrix is not unitary: max |U†U - I| = {err:.3e}")
        object.__setattr__(self, "matrix", _freeze(m))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "UnitaryOp":
        return cls(np.eye(dim, dtype=complex))

    @classmethod
    def from_hamiltonian(cls, h: np.ndarray, t: float = 1.0) -> "UnitaryOp":
        """exp(-i H t) for Hermitian H, via eigendecomposition."""
        h = hermitianize(h)
        w, v = np.linalg.eigh(h)
        return cls((v * np.exp(-1j * w * t)) @ v.conj().T)


@dataclass(frozen=True)
class KrausChannel:
    """Completely positive trace-preserving map given by Kraus operators."""

    operators: tuple

    def __post_init__(self):
        ops = tuple(np.asarray(k, dtype=complex) for k in self.operators)
        if not ops:
            raise ValueError("channel needs at least one Kraus operator")
        d = ops[0].shape[0]
        if any(k.shape != (d, d) for k in ops):
            raise ValueError("Kraus operators must share one square shape")
        total = sum(k.conj().T @ k for k in ops)
        err = float(np.max(np.abs(total - np.eye(d))))
        if err > ATOL_SPECTRAL:
            raise ValueError(f"channel is not trace preserving: max |ΣK†K - I| = {err:.3e}")
        object.__setattr__(self, "operators", tuple(_freeze(k) for k in ops))

    @property
    def dim(self) -> int:
        return self.operators[0].shape[0]


def expectation(rho: DensityMatrix, obs: Observable) -> float:
    """tr(rho A)."""
    if rho.dim != obs.dim:
        raise ValueError(f"dimension mismatch: state {rho.dim}, observable {obs.dim}")
    return float(np.trace(rho.matrix @ obs.matrix).real)


def std_dev(rho: DensityMatrix, obs: Observable) -> float:
    """sqrt(tr(rho A^2) - tr(rho A)^2)."""
    if rho.dim != obs.dim:
        raise ValueError(f"dimension mismatch: state {rho.dim}, observable {obs.dim}")
    mean = expectation(rho, obs)
    second = float(np.trace(rho.matrix @ obs.matrix @ obs.matrix).real)
    return float(np.sqrt(max(second - mean**2, 0.0)))


def apply_unitary(rho: DensityMatrix, u: UnitaryOp) -> DensityMatrix:
    """U rho U†."""
    if rho.dim != u.dim:
        raise ValueError(f"dimension mismatch: state {rho.dim}, unitary {u.dim}")
    return DensityMatrix(u.matrix @ rho.matrix @ u.matrix.conj().T)


def apply_kraus(rho: DensityMatrix, channel: KrausChannel) -> DensityMatrix:
    """Sum_k K_k rho K_k†."""
    if rho.dim != channel.dim:
        raise ValueError(f"dimension mismatch: state {rho.dim}, channel {channel.dim}")
    out = sum(k @ rho.matrix @ k.conj().T for k in channel.operators)
    return DensityMatrix(out)


def tensor_product(states, max_entries: int = MAX_TENSOR_ENTRIES) -> DensityMatrix:
    """Kronecker product of states; index 0 is the leftmost factor."""
    states = list(states)
    if not states:
        raise ValueError("need at least one state")
    total = 1
    for s in states:
        total *= s.dim
    if total * total > max_entries:
        raise ValueError(f"composite matrix would hold {total*total} entries > cap {max_entries}")
    m = states[0].matrix
    for s in states[1:]:
        m = np.kron(m, s.matrix)
    return DensityMatrix(m)


def partial_trace(rho: DensityMatrix, dims, keep) -> DensityMatrix:
    """Trace out all factors not in ``keep``; ``dims[0]`` is the leftmost."""
    dims = [int(d) for d in dims]
    n = len(dims)
    if int(np.prod(dims)) != rho.dim:
        raise ValueError(f"dims {dims} do not factor dimension {rho.dim}")
    keep = [keep] if isinstance(keep, (int, np.integer)) else sorted(int(k) for k in keep)
    if not keep or any(k < 0 or k >= n for k in keep):
        raise ValueError(f"keep indices {keep} out of range for {n} factors")
    t = rho.matrix.reshape(dims + dims)
    row = list(range(n))
    col = [k + n if k in keep else k for k in range(n)]
    out = [k for k in row if k in keep] + [k + n for k in keep]
    m = np.einsum(t, row + col, out)
    d_keep = int(np.prod([dims[k] for k in keep]))
    return DensityMatrix(m.reshape(d_keep, d_keep))


def trace_distance(rho1: DensityMatrix, rho2: DensityMatrix) -> float:
    """Half the trace norm of the difference."""
    if rho1.dim != rho2.dim:
        raise ValueError("dimension mismatch between states")
    w = np.linalg.eigvalsh(rho1.matrix - rho2.matrix)
    return float(0.5 * np.sum(np.abs(w)))


def sup_distance(rho1: DensityMatrix, rho2: DensityMatrix) -> float:
    """Largest entrywise absolute difference."""
    if rho1.dim != rho2.dim:
        raise ValueError("dimension mismatch between states")
    return float(np.max(np.abs(rho1.matrix - rho2.matrix)))


def pure_overlap(v1: np.ndarray, v2: np.ndarray) -> complex:
    """<v1|v2> for normalized state vectors."""
    a = np.asarray(v1, dtype=complex).ravel()
    b = np.asarray(v2, dtype=complex).ravel()
    if a.shape != b.shape:
        raise ValueError("dimension mismatch between vectors")
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    return complex(np.vdot(a, b))


def fidelity_to_pure(rho: DensityMatrix, vec: np.ndarray) -> float:
    """<v|rho|v> for a normalized target vector."""
    v = np.asarray(vec, dtype=complex).ravel()
    v = v / np.linalg.norm(v)
    if v.size != rho.dim:
        raise ValueError("dimension mismatch between state and vector")
    return float(np.real(v.conj() @ rho.matrix @ v))


def bloch_vector(rho: DensityMatrix) -> np.ndarray:
    """(tr rho sigma_x, tr rho sigma_y, tr rho sigma_z) for a qubit."""
    if rho.dim != 2:
        raise ValueError("Bloch coordinates are defined for qubits only")
    m = rho.matrix
    return np.array([np.trace(m @ p).real for p in (PAULI_X, PAULI_Y, PAULI_Z)])


def density_from_bloch(r) -> DensityMatrix:
    """Qubit state (I + r . sigma)/2; |r| must not exceed 1."""
    r = np.asarray(r, dtype=float)
    if r.shape != (3,):
        raise ValueError("Bloch vector must have three components")
    if np.linalg.norm(r) > 1.0 + ATOL_SPECTRAL:
        raise ValueError(f"Bloch vector length {np.linalg.norm(r):.6f} exceeds 1")
    m = 0.5 * (np.eye(2, dtype=complex) + r[0] * PAULI_X + r[1] * PAULI_Y + r[2] * PAULI_Z)
    return DensityMatrix(m)


def gell_mann_basis(dim: int) -> list[np.ndarray]:
    """Orthonormal traceless Hermitian basis, tr(B_i B_j) = delta_ij.

    For dim = 2 this is the Pauli set divided by sqrt(2). The dim^2 - 1
    coefficients c_j = tr(rho B_j) coordinatize states alongside I/dim.
    """
    if dim < 2:
        raise ValueError("need dim >= 2")
    basis = []
    for j in range(dim):
        for k in range(j + 1, dim):
            sym = np.zeros((dim, dim), dtype=complex)
            sym[j, k] = sym[k, j] = 1.0 / np.sqrt(2.0)
            basis.append(sym)
            asym = np.zeros((dim, dim), dtype=complex)
            asym[j, k] = -1j / np.sqrt(2.0)
            asym[k, j] = 1j / np.sqrt(2.0)
            basis.append(asym)
    for l in range(1, dim):
        diag = np.zeros((dim, dim), dtype=complex)
        diag[:l, :l] = np.eye(l)
        diag[l, l] = -l
        basis.append(diag / np.sqrt(l * (l + 1)))
    return [_freeze(b) for b in basis]


def amplitude_damping_channel(p: float) -> KrausChannel:
    """Qubit decay channel with excited-state loss probability p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"decay probability {p} outside [0, 1]")
    k0 = np.array([[1.0, 0.0], [0.0, np.sqrt(1.0 - p)]], dtype=complex)
    k1 = np.array([[0.0, np.sqrt(p)], [0.0, 0.0]], dtype=complex)
    return KrausChannel((k0, k1))


def random_pure(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Haar-random state vector."""
    v = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    return v / np.linalg.norm(v)


def random_density(rng: np.random.Generator, dim: int) -> DensityMatrix:
    """Full-rank random state from a Ginibre matrix."""
    g = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    m = g @ g.conj().T
    return DensityMatrix(m / np.trace(m).real)


def random_unitary(rng: np.random.Generator, dim: int) -> UnitaryOp:
    """Haar-random unitary via QR with phase correction."""
    g = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    q, r = np.linalg.qr(g)
    phases = np.diag(r).copy()
    phases /= np.abs(phases)
    return UnitaryOp(q * phases)


def validate(obj) -> dict:
    """Invariant report for any of the four operator types."""
    if isinstance(obj, DensityMatrix):
        m = obj.matrix
        w = np.linalg.eigvalsh(m)
        return {
            "kind": "density_matrix",
            "trace_error": abs(float(np.trace(m).real) - 1.0),
            "hermiticity_error": float(np.max(np.abs(m - m.conj().T))),
            "min_eigenvalue": float(w[0]),
            "ok": True,
        }
    if isinstance(obj, Observable):
        m = obj.matrix
        return {
            "kind": "observable",
            "hermiticity_error": float(np.max(np.abs(m - m.conj().T))),
            "eigenvalue_range": [float(obj.eigenvalues[0]), float(obj.eigenvalues[-1])],
            "ok": True,
        }
    if isinstance(obj, UnitaryOp):
        m = obj.matrix
        return {
            "kind": "unitary",
            "unitarity_error": float(np.max(np.abs(m.conj().T @ m - np.eye(obj.dim)))),
            "ok": True,
        }
    if isinstance(obj, KrausChannel):
        total = sum(k.conj().T @ k for k in obj.operators)
        return {
            "kind": "kraus_channel",
            "completeness_error": float(np.max(np.abs(total - np.eye(obj.dim)))),
            "n_operators": len(obj.operators),
            "ok": True,
        }
    raise TypeError(f"no invariant report for {type(obj).__name__}")


# ---------------------------------------------------------------------------
# JSON serialization: matrices as row-major [re, im] pairs.


def matrix_to_json(m: np.ndarray) -> dict:
    m = np.asarray(m, dtype=complex)
    d = m.shape[0]
    return {"dim": d, "entries": [[float(z.real), float(z.imag)] for z in m.ravel()]}


def matrix_from_json(obj: dict) -> np.ndarray:
    d = int(obj["dim"])
    entries = obj["entries"]
    if len(entries) != d * d:
        raise ValueError(f"expected {d*d} entries, got {len(entries)}")
    flat = np.array([complex(re, im) for re, im in entries])
    return flat.reshape(d, d)


def density_to_json(rho: DensityMatrix) -> dict:
    return {"kind": "density_matrix", **matrix_to_json(rho.matrix)}


def density_from_json(obj: dict) -> DensityMatrix:
    if obj.get("kind") != "density_matrix":
        raise ValueError(f"expected kind 'density_matrix', got {obj.get('kind')!r}")
    return DensityMatrix(matrix_from_json(obj))


def observable_to_json(obs: Observable) -> dict:
    return {"kind": "observable", **matrix_to_json(obs.matrix)}


def observable_from_json(obj: dict) -> Observable:
    if obj.get("kind") != "observable":
        raise ValueError(f"expected kind 'observable', got {obj.get('kind')!r}")
    return Observable(matrix_from_json(obj))
