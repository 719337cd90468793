"""Exact simulation backend: Hamiltonian builders, ground spaces, oracles.

All states use the basis ordering fixed in :mod:`shadowgen.conventions`
(site 0 = most significant bit).  Boundary conditions are periodic.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .conventions import PAULI_CODE, PAULI_LABELS, X, Y, Z, bit_shift

MAX_DENSE_DIM = 4096
MAX_DIM = 2**14
MAX_RENYI_SITES = 6
SIMPLEX_TOL = 1e-12
# relative to the largest |coupling|
DEGENERACY_REL_TOL = 1e-8


class ParameterDomainError(ValueError):
    """Hamiltonian parameters violate the family's domain."""


class EigensolverError(RuntimeError):
    """Iterative eigensolver failed to converge."""


class Family(str, enum.Enum):
    TFIM = "tfim"
    CLUSTER = "cluster"

    @property
    def param_dim(self) -> int:
        return 1 if self is Family.TFIM else 3


def _as_family(family) -> Family:
    try:
        return Family(family.value if isinstance(family, Family) else str(family).lower())
    except ValueError:
        raise ParameterDomainError(f"unknown Hamiltonian family {family!r}") from None


@dataclass(frozen=True)
class HamiltonianSpec:
    family: Family
    params: tuple
    n_qubits: int = 10

    def __post_init__(self):
        fam = _as_family(self.family)
        object.__setattr__(self, "family", fam)
        params = tuple(float(p) for p in np.atleast_1d(self.params))
        object.__setattr__(self, "params", params)
        validate_params(fam, params)
        if int(self.n_qubits) != self.n_qubits or self.n_qubits < 3:
            raise ParameterDomainError(f"n_qubits must be an integer >= 3, got {self.n_qubits}")
        object.__setattr__(self, "n_qubits", int(self.n_qubits))

    @property
    def dim(self) -> int:
        return 2**self.n_qubits


def validate_params(family, params: Sequence[float]) -> None:
    """Raise :class:`ParameterDomainError` naming the violated constraint."""
    fam = _as_family(family)
    params = [float(p) for p in params]
    if len(params) != fam.param_dim:
        raise ParameterDomainError(
            f"{fam.value} expects {fam.param_dim} parameter(s), got {len(params)}"
        )
    if not all(math.isfinite(p) for p in params):
        raise ParameterDomainError(f"parameters must be finite, got {params}")
    if fam is Family.TFIM:
        (g,) = params
        if not 0.0 <= g <= 1.0:
            raise ParameterDomainError(f"TFIM requires 0 <= g <= 1, got g={g}")
    else:
        if min(params) < 0.0:
            raise ParameterDomainError(f"cluster-Ising requires g1,g2,g3 >= 0, got {params}")
        if abs(sum(params) - 1.0) > SIMPLEX_TOL:
            raise ParameterDomainError(
                f"cluster-Ising requires g1+g2+g3 = 1 (within {SIMPLEX_TOL}), got sum={sum(params)!r}"
            )


@dataclass(frozen=True)
class PauliString:
    """Tensor product of single-site Paulis; sites outside ``support`` carry identity.

    ``support`` is a sorted tuple of ``(site, label)`` pairs with labels in
    ``"XYZ"``.
    """

    support: tuple

    def __post_init__(self):
        items = self.support.items() if isinstance(self.support, Mapping) else self.support
        pairs = sorted((int(s), str(l).upper()) for s, l in items)
        sites = [s for s, _ in pairs]
        if len(set(sites)) != len(sites):
            raise ValueError(f"repeated site in Pauli string {pairs}")
        for s, l in pairs:
            if s < 0:
                raise ValueError(f"negative site index {s}")
            if l not in PAULI_CODE:
                raise ValueError(f"unknown Pauli label {l!r}")
        object.__setattr__(self, "support", tuple(pairs))

    @classmethod
    def parse(cls, text: str) -> "PauliString":
        """Parse ``"Z0 X1 Z2"``."""
        return cls(tuple((int(tok[1:]), tok[0]) for tok in text.split()))

    @property
    def sites(self) -> tuple:
        return tuple(s for s, _ in self.support)

    @property
    def codes(self) -> tuple:
        return tuple(PAULI_CODE[l] for _, l in self.support)

    @property
    def weight(self) -> int:
        return len(self.support)

    def check_range(self, n_qubits: int) -> None:
        if not self.support:
            raise ValueError("empty Pauli string")
        for s in self.sites:
            if s >= n_qubits:
                raise IndexError(f"site {s} out of range for {n_qubits} qubits")

    def shifted(self, k: int, n_qubits: int) -> "PauliString":
        return PauliString(tuple(((s + k) % n_qubits, l) for s, l in self.support))

    def __str__(self) -> str:
        return " ".join(f"{l}{s}" for s, l in self.support)


def zz(i: int, j: int) -> PauliString:
    return PauliString(((i, "Z"), (j, "Z")))


def x_string(sites: Iterable[int]) -> PauliString:
    return PauliString(tuple((s, "X") for s in sites))


def hamiltonian_terms(spec: HamiltonianSpec) -> list[tuple[float, PauliString]]:
    """(coefficient, Pauli string) list; the Hamiltonian is their sum."""
    n = spec.n_qubits
    terms = []
    if spec.family is Family.TFIM:
        (g,) = spec.params
        terms += [(-(1.0 - g), zz(i, (i + 1) % n)) for i in range(n)]
        terms += [(-g, PauliString(((i, "X"),))) for i in range(n)]
    else:
        g1, g2, g3 = spec.params
        terms += [(-g1, zz((i - 1) % n, (i + 1) % n)) for i in range(n)]
        terms += [(-g2, PauliString(((i, "X"),))) for i in range(n)]
        terms += [
            (-g3, PauliString((((i - 1) % n, "Z"), (i, "X"), ((i + 1) % n, "Z"))))
            for i in range(n)
        ]
    return terms


def _pauli_action(obs: PauliString, n_qubits: int):
    """Return ``(flip, phase)`` with P|j> = phase[j] |j ^ flip>."""
    idx = np.arange(2**n_qubits, dtype=np.int64)
    flip = 0
    parity = np.zeros(idx.shape, dtype=np.int64)
    n_y = 0
    for site, code in zip(obs.sites, obs.codes):
        shift = bit_shift(site, n_qubits)
        if code in (X, Y):
            flip |= 1 << shift
        if code in (Y, Z):
            parity ^= (idx >> shift) & 1
        n_y += code == Y
    phase = (1j**n_y) * (1 - 2 * parity)
    if n_y % 2 == 0:
        phase = phase.real
    return flip, phase


def pauli_matrix(obs: PauliString, n_qubits: int) -> sp.csr_matrix:
    obs.check_range(n_qubits)
    flip, phase = _pauli_action(obs, n_qubits)
    cols = np.arange(2**n_qubits)
    return sp.csr_matrix((phase, (cols ^ flip, cols)), shape=(2**n_qubits,) * 2)


def build_hamiltonian(spec: HamiltonianSpec) -> sp.csr_matrix:
    """Sparse Hamiltonian of ``spec``, exactly Hermitian."""
    n = spec.n_qubits
    if spec.dim > MAX_DIM:
        raise ParameterDomainError(f"n_qubits={n} exceeds the {MAX_DIM}-dimensional guard")
    dim = spec.dim
    cols = np.arange(dim)
    rows, cs, data = [], [], []
    for coef, obs in hamiltonian_terms(spec):
        if coef == 0.0:
            continue
        flip, phase = _pauli_action(obs, n)
        rows.append(cols ^ flip)
        cs.append(cols)
        data.append(coef * phase)
    if not data:
        return sp.csr_matrix((dim, dim))
    h = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cs))), shape=(dim, dim)
    ).tocsr()
    h.sum_duplicates()
    # floating-point addition commutes, so this is Hermitian bit-for-bit
    h = (h + h.conj().T) * 0.5
    h.eliminate_zeros()
    return h.tocsr()


def default_degeneracy_tol(spec: HamiltonianSpec) -> float:
    scale = max(abs(c) for c, _ in hamiltonian_terms(spec))
    return DEGENERACY_REL_TOL * scale


@dataclass
class GroundSpace:
    """Ground energy and an orthonormal basis of the ground level.

    ``basis`` has shape ``(degeneracy, 2**N)``; the ground state is the uniform
    mixture over its rows.
    """

    energy: float
    basis: np.ndarray
    degeneracy_tol: float
    spec: HamiltonianSpec | None = field(default=None, compare=False)

    @property
    def n_qubits(self) -> int:
        return int(round(math.log2(self.basis.shape[1])))

    @property
    def degeneracy(self) -> int:
        return self.basis.shape[0]

    @classmethod
    def from_state(cls, psi, energy: float = float("nan")) -> "GroundSpace":
        """Wrap a single pure state (used for product-state checks)."""
        psi = np.asarray(psi, dtype=np.complex128).reshape(1, -1)
        norm = np.linalg.norm(psi)
        if abs(norm - 1.0) > 1e-10:
            raise ValueError(f"state not normalized (norm={norm})")
        if psi.shape[1] & (psi.shape[1] - 1):
            raise ValueError("state length must be a power of two")
        return cls(energy=energy, basis=psi, degeneracy_tol=0.0)

    def density_matrix(self) -> np.ndarray:
        return self.basis.T @ self.basis.conj() / self.degeneracy


def product_state(labels: str) -> np.ndarray:
    """Product state from single-qubit labels in ``"01+-"``, site 0 first."""
    single = {
        "0": np.array([1.0, 0.0]),
        "1": np.array([0.0, 1.0]),
        "+": np.array([1.0, 1.0]) / math.sqrt(2),
        "-": np.array([1.0, -1.0]) / math.sqrt(2),
    }
    psi = np.array([1.0 + 0j])
    for ch in labels:
        psi = np.kron(psi, single[ch])
    return psi


def ground_space(
    h, degeneracy_tol: float | None = None, *, maxiter: int | None = None
) -> GroundSpace:
    """Lowest eigenvalue of ``h`` and an orthonormal basis of its eigenspace.

    Eigenvalues within ``degeneracy_tol`` of the minimum are treated as one
    level.  Dense diagonalization up to 4096 dimensions, ARPACK Lanczos above.
    """
    dim = h.shape[0]
    if h.shape != (dim, dim):
        raise ValueError(f"Hamiltonian must be square, got {h.shape}")
    if dim > MAX_DIM:
        raise ValueError(f"dimension {dim} exceeds the {MAX_DIM} guard")
    if degeneracy_tol is None:
        row_sums = np.asarray(abs(h).sum(axis=1)).ravel()
        degeneracy_tol = DEGENERACY_REL_TOL * float(row_sums.max())

    if dim <= MAX_DENSE_DIM:
        dense = h.toarray() if sp.issparse(h) else np.asarray(h)
        if np.iscomplexobj(dense) and not np.any(dense.imag):
            dense = dense.real
        evals, evecs = scipy.linalg.eigh(dense)
        e0 = evals[0]
        vecs = evecs[:, evals - e0 <= degeneracy_tol]
    else:
        e0, vecs = _lanczos_ground(h, degeneracy_tol, maxiter)

    # Re-orthonormalize the (possibly near-degenerate) block.
    q, _ = np.linalg.qr(vecs)
    return GroundSpace(energy=float(e0), basis=np.ascontiguousarray(q.T.astype(np.complex128)),
                       degeneracy_tol=float(degeneracy_tol))


def _lanczos_ground(h, tol, maxiter):
    dim = h.shape[0]
    maxiter = maxiter or 20 * dim
    k = 4
    while True:
        try:
            evals, evecs = spla.eigsh(h, k=k, which="SA", tol=0, maxiter=maxiter)
        except spla.ArpackNoConvergence as exc:
            raise EigensolverError(
                f"Lanczos did not converge within {maxiter} iterations "
                f"({len(exc.eigenvalues)} of {k} eigenpairs converged)"
            ) from exc
        order = np.argsort(evals)
        evals, evecs = evals[order], evecs[:, order]
        mask = evals - evals[0] <= tol
        # every requested pair is degenerate: the level may be larger than k
        if mask.all() and k < dim - 1:
            k = min(2 * k, dim - 2)
            continue
        return evals[0], evecs[:, mask]


def solve(spec: HamiltonianSpec, degeneracy_tol: float | None = None) -> GroundSpace:
    tol = default_degeneracy_tol(spec) if degeneracy_tol is None else degeneracy_tol
    gs = ground_space(build_hamiltonian(spec), tol)
    gs.spec = spec
    return gs


def expect_pauli(gs: GroundSpace, obs: PauliString) -> float:
    """Tr(rho O) for the uniform ground-space mixture rho."""
    n = gs.n_qubits
    obs.check_range(n)
    flip, phase = _pauli_action(obs, n)
    idx = np.arange(gs.basis.shape[1])
    vals = np.einsum("kj,j,kj->k", gs.basis[:, idx ^ flip].conj(), phase, gs.basis)
    value = vals.mean()
    if abs(value.imag) > 1e-10:
        raise ArithmeticError(f"expectation has imaginary part {value.imag:g}")
    return float(value.real)


def expect_hamiltonian(gs: GroundSpace, spec: HamiltonianSpec) -> float:
    return sum(c * expect_pauli(gs, o) for c, o in hamiltonian_terms(spec) if c != 0.0)


def reduced_density_matrix(gs: GroundSpace, region: Sequence[int]) -> np.ndarray:
    n = gs.n_qubits
    region = [int(s) for s in region]
    if not region or len(set(region)) != len(region):
        raise ValueError(f"invalid region {region}")
    if any(not 0 <= s < n for s in region):
        raise IndexError(f"region {region} out of range for {n} qubits")
    rest = [s for s in range(n) if s not in region]
    k = len(region)
    rho = np.zeros((2**k, 2**k), dtype=np.complex128)
    for psi in gs.basis:
        m = psi.reshape((2,) * n).transpose(region + rest).reshape(2**k, -1)
        rho += m @ m.conj().T
    return rho / gs.degeneracy


def renyi2_exact(gs: GroundSpace, region: Sequence[int]) -> float:
    """-log Tr(rho_A^2) (natural log) for the sites in ``region``."""
    if len(region) > MAX_RENYI_SITES:
        raise ValueError(f"region larger than {MAX_RENYI_SITES} sites")
    rho = reduced_density_matrix(gs, region)
    purity = float(np.real(np.vdot(rho, rho)))
    return -math.log(purity)


def pauli_label(codes: Sequence[int]) -> str:
    return "".join(PAULI_LABELS[c] for c in codes)
