"""Randomized Pauli measurements and classical-shadow estimators.

A shadow is a pair (bases, outcomes): per-site Pauli codes (X=0, Y=1, Z=2)
and +1/-1 outcomes.  The single-snapshot reconstruction is
``prod_i (1 + 3 b_i P_i) / 2``, which gives

* Pauli observable O on support S:  3**|S| * prod_{i in S} b_i if every
  measured basis matches O on S, else 0;
* purity of region A from a pair of snapshots:
  ``prod_{i in A} (1 + 9 b_i b'_i [P_i == P'_i]) / 2``.

Ensembles are kept as arrays (``ShadowEnsemble``); ``ShadowRecord`` is the
per-record view used at the edges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .conventions import PAULI_LABELS, X, Y, Z
from .qsim import GroundSpace, HamiltonianSpec, PauliString, hamiltonian_terms

SHADOW_CHUNK = 1024

_H = np.array([[1, 1], [1, -1]], dtype=np.complex128) / math.sqrt(2)
_SDG = np.diag([1, -1j])
# U_P maps the P eigenbasis to the computational basis: U P U^dagger = Z.
BASIS_ROTATIONS = np.stack([_H, _H @ _SDG, np.eye(2, dtype=np.complex128)])


@dataclass(frozen=True)
class ShadowRecord:
    params: tuple
    basis: tuple
    outcome: tuple

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        basis = tuple(int(c) for c in self.basis)
        outcome = tuple(int(b) for b in self.outcome)
        if len(basis) != len(outcome):
            raise ValueError("basis and outcome lengths differ")
        if len(self.params) not in (1, 3):
            raise ValueError(f"params must have length 1 or 3, got {len(self.params)}")
        if any(c not in (X, Y, Z) for c in basis):
            raise ValueError(f"invalid basis codes {basis}")
        if any(b not in (1, -1) for b in outcome):
            raise ValueError(f"invalid outcomes {outcome}")
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "outcome", outcome)

    @property
    def n_qubits(self) -> int:
        return len(self.basis)

    def __str__(self) -> str:
        ps = ",".join(repr(p) for p in self.params)
        body = " ".join(f"{PAULI_LABELS[c]}{'+' if b > 0 else '-'}" for c, b in zip(self.basis, self.outcome))
        return f"{ps} | {body}"


@dataclass
class ShadowEnsemble:
    """Array-backed ensemble: ``params`` (M, p), ``bases`` (M, N) uint8, ``outcomes`` (M, N) int8."""

    params: np.ndarray
    bases: np.ndarray
    outcomes: np.ndarray

    def __post_init__(self):
        self.params = np.atleast_2d(np.asarray(self.params, dtype=np.float64))
        self.bases = np.asarray(self.bases, dtype=np.uint8)
        self.outcomes = np.asarray(self.outcomes, dtype=np.int8)
        if self.bases.shape != self.outcomes.shape or self.bases.ndim != 2:
            raise ValueError(f"shape mismatch: bases {self.bases.shape}, outcomes {self.outcomes.shape}")
        if self.params.shape[0] == 1 and len(self.bases) != 1:
            self.params = np.repeat(self.params, len(self.bases), axis=0)
        if self.params.shape[0] != len(self.bases):
            raise ValueError("params rows must match record count")

    def __len__(self) -> int:
        return self.bases.shape[0]

    def __getitem__(self, idx) -> "ShadowEnsemble":
        if isinstance(idx, (int, np.integer)):
            idx = slice(idx, idx + 1 if idx != -1 else None)
        return ShadowEnsemble(self.params[idx], self.bases[idx], self.outcomes[idx])

    @property
    def n_qubits(self) -> int:
        return self.bases.shape[1]

    def records(self) -> list[ShadowRecord]:
        return [ShadowRecord(p, b, o) for p, b, o in zip(self.params, self.bases, self.outcomes)]

    @classmethod
    def from_records(cls, records: Sequence[ShadowRecord]) -> "ShadowEnsemble":
        if not records:
            raise ValueError("no records")
        return cls(
            np.array([r.params for r in records]),
            np.array([r.basis for r in records]),
            np.array([r.outcome for r in records]),
        )

    @classmethod
    def concat(cls, parts: Iterable["ShadowEnsemble"]) -> "ShadowEnsemble":
        parts = list(parts)
        return cls(
            np.concatenate([p.params for p in parts]),
            np.concatenate([p.bases for p in parts]),
            np.concatenate([p.outcomes for p in parts]),
        )


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_basis(n_qubits: int, rng) -> np.ndarray:
    """One uniformly random Pauli basis string (codes X=0, Y=1, Z=2)."""
    return _rng(rng).integers(0, 3, size=n_qubits).astype(np.uint8)


def sample_bases(count: int, n_qubits: int, rng) -> np.ndarray:
    return _rng(rng).integers(0, 3, size=(count, n_qubits)).astype(np.uint8)


def measure_batch(gs: GroundSpace, bases: np.ndarray, rng) -> np.ndarray:
    """Born-rule outcomes for each row of ``bases``.

    Each record picks a ground-basis vector uniformly, rotates every qubit so
    its measured Pauli becomes Z, and draws one computational bitstring.
    """
    rng = _rng(rng)
    bases = np.atleast_2d(np.asarray(bases, dtype=np.intp))
    m, n = bases.shape
    if n != gs.n_qubits:
        raise ValueError(f"basis length {n} does not match {gs.n_qubits}-qubit state")
    pick = rng.integers(gs.degeneracy, size=m) if gs.degeneracy > 1 else np.zeros(m, dtype=np.intp)
    psi = gs.basis[pick]
    for site in range(n):
        u = BASIS_ROTATIONS[bases[:, site]]
        psi = psi.reshape(m, 2**site, 2, 2 ** (n - site - 1))
        psi = np.einsum("mab,mlbr->mlar", u, psi)
    probs = np.abs(psi.reshape(m, -1)) ** 2
    cum = np.cumsum(probs, axis=1)
    u = rng.random((m, 1)) * cum[:, -1:]
    index = np.minimum((cum < u).sum(axis=1), 2**n - 1)
    bits = (index[:, None] >> (n - 1 - np.arange(n))) & 1
    return (1 - 2 * bits).astype(np.int8)


def measure(gs: GroundSpace, basis, rng) -> np.ndarray:
    return measure_batch(gs, np.asarray(basis)[None, :], rng)[0]


def chunk_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent stream for ``(seed, *key)``; independent of worker layout."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


def sample_shadows(gs: GroundSpace, params, count: int, seed: int, *, stream: int = 0) -> ShadowEnsemble:
    """Exact-state shadows, generated in fixed-size chunks with per-chunk streams."""
    n = gs.n_qubits
    bases, outcomes = [], []
    for chunk, start in enumerate(range(0, count, SHADOW_CHUNK)):
        size = min(SHADOW_CHUNK, count - start)
        rng = chunk_rng(seed, stream, chunk)
        b = sample_bases(size, n, rng)
        bases.append(b)
        outcomes.append(measure_batch(gs, b, rng))
    if not bases:
        raise ValueError("count must be positive")
    return ShadowEnsemble(np.asarray(params, dtype=np.float64)[None, :],
                          np.concatenate(bases), np.concatenate(outcomes))


# ---------------------------------------------------------------- estimators


@dataclass(frozen=True)
class MoMConfig:
    """Median-of-means settings; groups are contiguous blocks in ensemble order."""

    n_groups: int = 10

    def __post_init__(self):
        if self.n_groups < 1:
            raise ValueError("n_groups must be positive")


@dataclass
class EstimateReport:
    observable: str
    value: float
    mean: float
    group_values: tuple
    stderr: float
    count: int
    params: tuple = field(default=())

    def __post_init__(self):
        lo, hi = min(self.group_values), max(self.group_values)
        if not lo - 1e-12 <= self.value <= hi + 1e-12:
            raise ArithmeticError(f"MoM value {self.value} outside group range [{lo}, {hi}]")


def snapshot_pauli_estimate(record: ShadowRecord, obs: PauliString) -> float:
    obs.check_range(record.n_qubits)
    value = 1.0
    for site, code in zip(obs.sites, obs.codes):
        if record.basis[site] != code:
            return 0.0
        value *= 3 * record.outcome[site]
    return value


def snapshot_values(ens: ShadowEnsemble, obs: PauliString) -> np.ndarray:
    """Vectorized :func:`snapshot_pauli_estimate` over the ensemble."""
    obs.check_range(ens.n_qubits)
    sites = list(obs.sites)
    match = np.all(ens.bases[:, sites] == np.asarray(obs.codes, dtype=np.uint8), axis=1)
    signs = np.prod(ens.outcomes[:, sites].astype(np.int64), axis=1)
    return np.where(match, float(3**obs.weight) * signs, 0.0)


def _groups(count: int, n_groups: int) -> list[slice]:
    if count < n_groups:
        raise ValueError(f"ensemble of {count} records is smaller than {n_groups} groups")
    size = count // n_groups
    return [slice(k * size, (k + 1) * size) for k in range(n_groups)]


def median_of_means(values: np.ndarray, n_groups: int) -> tuple[float, np.ndarray]:
    values = np.asarray(values, dtype=np.float64)
    means = np.array([values[s].mean() for s in _groups(len(values), n_groups)])
    return float(np.median(means)), means


def report_from_values(name: str, values: np.ndarray, mom: MoMConfig, params=()) -> EstimateReport:
    if len(values) == 0:
        raise ValueError("empty ensemble")
    med, means = median_of_means(values, mom.n_groups)
    stderr = float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else float("nan")
    return EstimateReport(name, med, float(values.mean()), tuple(float(m) for m in means),
                          stderr, len(values), tuple(params))


def _as_obs_list(obs) -> list[PauliString]:
    return [obs] if isinstance(obs, PauliString) else list(obs)


def estimate_pauli(ens: ShadowEnsemble, obs, mom: MoMConfig = MoMConfig(), name: str | None = None) -> EstimateReport:
    """MoM estimate of a Pauli expectation.

    ``obs`` may be a list of Pauli strings (e.g. all translations of one
    correlator); per-snapshot values are then averaged over the list first.
    """
    obs_list = _as_obs_list(obs)
    values = np.mean([snapshot_values(ens, o) for o in obs_list], axis=0)
    return report_from_values(name or str(obs_list[0]), values, mom, _params_of(ens))


def energy_values(ens: ShadowEnsemble, spec: HamiltonianSpec) -> np.ndarray:
    """Per-snapshot energy estimates (sum of coefficient x snapshot value)."""
    if ens.n_qubits != spec.n_qubits:
        raise ValueError("ensemble and Hamiltonian sizes differ")
    total = np.zeros(len(ens))
    for coef, obs in hamiltonian_terms(spec):
        total += coef * snapshot_values(ens, obs)
    return total


def estimate_energy(ens: ShadowEnsemble, spec: HamiltonianSpec, mom: MoMConfig = MoMConfig()) -> EstimateReport:
    return report_from_values("energy", energy_values(ens, spec), mom, spec.params)


# purity kernel on local configurations c = 2 * basis + (outcome == -1)
_CFG_BASIS = np.repeat(np.arange(3), 2)
_CFG_SIGN = np.tile([1, -1], 3)
PAIR_KERNEL = (1 + 9 * np.outer(_CFG_SIGN, _CFG_SIGN) * (_CFG_BASIS[:, None] == _CFG_BASIS[None, :])) / 2


def pair_kernel(bases_a, outcomes_a, bases_b, outcomes_b) -> float:
    """Tr(snapshot_a snapshot_b) restricted to the given sites."""
    same = np.asarray(bases_a) == np.asarray(bases_b)
    bb = np.asarray(outcomes_a, dtype=np.int64) * np.asarray(outcomes_b, dtype=np.int64)
    return float(np.prod((1 + 9 * bb * same) / 2))


def _config_index(ens: ShadowEnsemble, region: Sequence[int]) -> np.ndarray:
    region = list(region)
    cfg = 2 * ens.bases[:, region].astype(np.int64) + (ens.outcomes[:, region] < 0)
    return np.ravel_multi_index(cfg.T, (6,) * len(region))


def _pair_average(cfg_index: np.ndarray, k: int) -> float:
    """Mean pair kernel over distinct ordered pairs of the snapshots given."""
    m = len(cfg_index)
    if m < 2:
        raise ValueError("purity estimation needs at least 2 records per group")
    counts = np.bincount(cfg_index, minlength=6**k).astype(np.float64).reshape((6,) * k)
    kn = counts
    for axis in range(k):
        kn = np.moveaxis(np.tensordot(PAIR_KERNEL, kn, axes=([1], [axis])), 0, axis)
    total = float(np.sum(counts * kn))
    return (total - m * 5.0**k) / (m * (m - 1))


def clamp_purity(purity: float, k: int) -> float:
    return min(max(purity, 2.0**-k), 1.0)


def purity_values(ens: ShadowEnsemble, regions, mom: MoMConfig) -> tuple[np.ndarray, float]:
    """Per-group purity U-statistics and the whole-ensemble U-statistic.

    With several regions (translations) the purities are averaged.
    """
    regions = [list(regions)] if np.ndim(regions[0]) == 0 else [list(r) for r in regions]
    k = len(regions[0])
    if k > 6 or any(len(r) != k for r in regions):
        raise ValueError("regions must share a size of at most 6 sites")
    for r in regions:
        if any(not 0 <= s < ens.n_qubits for s in r):
            raise IndexError(f"region {r} out of range")
    cfgs = [_config_index(ens, r) for r in regions]
    slices = _groups(len(ens), mom.n_groups)
    groups = np.array([np.mean([_pair_average(c[s], k) for c in cfgs]) for s in slices])
    overall = float(np.mean([_pair_average(c, k) for c in cfgs]))
    return groups, overall


def estimate_renyi2(ens: ShadowEnsemble, region, mom: MoMConfig = MoMConfig(), name: str | None = None) -> EstimateReport:
    """Second Renyi entropy of ``region`` (or the mean purity over several regions).

    The median is taken over group purities, clamped to [2**-k, 1], then
    mapped through -log.  ``stderr`` is the delta-method error from the
    spread of group purities.
    """
    groups, overall = purity_values(ens, region, mom)
    k = len(region[0]) if np.ndim(region[0]) else len(region)
    purity = clamp_purity(float(np.median(groups)), k)
    g_vals = tuple(-math.log(clamp_purity(p, k)) for p in groups)
    spread = float(groups.std(ddof=1) / math.sqrt(len(groups))) if len(groups) > 1 else float("nan")
    return EstimateReport(name or f"renyi2_{k}", -math.log(purity), -math.log(clamp_purity(overall, k)),
                          g_vals, spread / purity, len(ens), _params_of(ens))


def _params_of(ens: ShadowEnsemble) -> tuple:
    return tuple(float(p) for p in ens.params[0]) if len(ens) else ()
