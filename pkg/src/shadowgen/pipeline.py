"""Shadow generation on demand, observable prediction and comparison with exact values.

Observable ids:

``energy``        ground-state energy
``zz_<n>``        <Z_i Z_{i+n}>, averaged over the N cyclic placements
``xstr_<n>``      <X_i X_{i+1} ... X_{i+n-1}>, averaged over placements
``renyi2_<k>``    -log Tr(rho_A^2) for k contiguous sites, purity averaged over placements

A sampler is anything with ``sample(g, count, seed, stream) -> ShadowEnsemble``;
:class:`ModelSampler` wraps a trained transformer and :class:`ExactSampler`
draws from the exact ground state (the oracle stub).
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
import re
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import qsim
from .gpt.model import ModelConfig, sample_outcomes
from .qsim import Family, HamiltonianSpec, PauliString
from .shadow import (
    EstimateReport,
    MoMConfig,
    ShadowEnsemble,
    chunk_rng,
    estimate_energy,
    estimate_pauli,
    estimate_renyi2,
    sample_bases,
    sample_shadows,
)

MODEL_CHUNK = 4096
_OBS_RE = re.compile(r"^(energy|zz_(\d+)|xstr_(\d+)|renyi2_(\d+))$")


# ------------------------------------------------------------------ samplers


class ModelSampler:
    def __init__(self, cfg: ModelConfig, params: dict, chunk: int = MODEL_CHUNK):
        self.cfg = cfg
        self.params = params
        self.chunk = chunk

    def sample(self, g, count: int, seed: int, stream: int = 0) -> ShadowEnsemble:
        return generate_model_shadows(self, g, count, seed, stream=stream)


class ExactSampler:
    """Draws shadows from the exact ground state instead of a model."""

    def __init__(self, family, n_qubits: int):
        self.family = Family(family)
        self.n_qubits = n_qubits

    def ground_space(self, g) -> qsim.GroundSpace:
        return _solve_cached(self.family, tuple(float(x) for x in np.atleast_1d(g)), self.n_qubits)

    def sample(self, g, count: int, seed: int, stream: int = 0) -> ShadowEnsemble:
        g = tuple(float(x) for x in np.atleast_1d(g))
        return sample_shadows(self.ground_space(g), g, count, seed, stream=stream)


@lru_cache(maxsize=256)
def _solve_cached(family: Family, g: tuple, n_qubits: int) -> qsim.GroundSpace:
    return qsim.solve(HamiltonianSpec(family, g, n_qubits))


def generate_model_shadows(model: ModelSampler, g, count: int, seed: int, stream: int = 0) -> ShadowEnsemble:
    """``count`` shadows with uniform random bases and model-sampled outcomes.

    Chunk c uses the stream keyed by ``(seed, stream, c)`` for both bases and
    outcomes, so results are reproducible per seed.
    """
    cfg = model.cfg
    g = np.asarray(np.atleast_1d(g), dtype=np.float64)
    qsim.validate_params(Family.TFIM if cfg.param_dim == 1 else Family.CLUSTER, g)
    bases, outcomes = [], []
    for c, start in enumerate(range(0, count, model.chunk)):
        rng = chunk_rng(seed, stream, c)
        b = sample_bases(min(model.chunk, count - start), cfg.n_qubits, rng)
        bases.append(b)
        outcomes.append(sample_outcomes(model.params, cfg, g, b, rng))
    if not bases:
        raise ValueError("count must be positive")
    return ShadowEnsemble(g[None, :], np.concatenate(bases), np.concatenate(outcomes))


# ------------------------------------------------------------------ observables


def parse_observable(obs_id: str) -> tuple[str, int]:
    m = _OBS_RE.match(obs_id)
    if not m:
        raise ValueError(f"unknown observable {obs_id!r}")
    if obs_id == "energy":
        return "energy", 0
    kind = obs_id.split("_")[0]
    size = int(obs_id.split("_")[1])
    if size < 1:
        raise ValueError(f"observable size must be positive in {obs_id!r}")
    return kind, size


def tier_of(obs_id: str) -> str:
    return "renyi" if obs_id.startswith("renyi2") else "energy"


def placements(obs_id: str, n_qubits: int):
    """Pauli strings (or site regions) for every cyclic placement."""
    kind, size = parse_observable(obs_id)
    if kind == "zz":
        if size >= n_qubits:
            raise ValueError(f"{obs_id} needs separation < {n_qubits}")
        return [qsim.zz(i, (i + size) % n_qubits) for i in range(n_qubits)]
    if kind == "xstr":
        if size > n_qubits:
            raise ValueError(f"{obs_id} longer than the chain")
        return [qsim.x_string((i + k) % n_qubits for k in range(size)) for i in range(n_qubits)]
    if kind == "renyi2":
        if size > min(6, n_qubits):
            raise ValueError(f"{obs_id}: region too large")
        return [[(i + k) % n_qubits for k in range(size)] for i in range(n_qubits)]
    raise ValueError(f"{obs_id} has no placements")


def estimate(ens: ShadowEnsemble, obs_id: str, spec: HamiltonianSpec, mom: MoMConfig) -> EstimateReport:
    kind, _ = parse_observable(obs_id)
    if kind == "energy":
        rep = estimate_energy(ens, spec, mom)
    elif kind == "renyi2":
        rep = estimate_renyi2(ens, placements(obs_id, spec.n_qubits), mom)
    else:
        rep = estimate_pauli(ens, placements(obs_id, spec.n_qubits), mom)
    rep.observable = obs_id
    rep.params = spec.params
    return rep


def exact_value(gs: qsim.GroundSpace, obs_id: str, spec: HamiltonianSpec) -> float:
    kind, _ = parse_observable(obs_id)
    if kind == "energy":
        return gs.energy
    places = placements(obs_id, spec.n_qubits)
    if kind == "renyi2":
        return float(np.mean([qsim.renyi2_exact(gs, r) for r in places]))
    return float(np.mean([qsim.expect_pauli(gs, o) for o in places]))


# ------------------------------------------------------------------ plans


def evaluation_grid(family) -> list[tuple]:
    fam = Family(family)
    if fam is Family.TFIM:
        return [(k / 40,) for k in range(41)]
    return [(i / 10, j / 10, (10 - i - j) / 10) for i in range(11) for j in range(11 - i)]


DEFAULT_OBSERVABLES = {
    Family.TFIM: ("energy",) + tuple(f"zz_{n}" for n in range(1, 6)) + tuple(f"xstr_{n}" for n in range(1, 6)),
    Family.CLUSTER: ("energy", "zz_2", "renyi2_3"),
}


def default_observables(family, n_qubits: int) -> tuple:
    """The default list, trimmed to what fits on a chain of ``n_qubits`` sites."""
    fam = Family(family)
    keep = []
    for o in DEFAULT_OBSERVABLES[fam]:
        kind, size = parse_observable(o)
        if kind == "energy" or (kind == "zz" and size < n_qubits) or (kind != "zz" and size <= min(n_qubits, 6)):
            keep.append(o)
    return tuple(keep)


DEFAULT_COUNTS = {
    Family.TFIM: {"energy": 300_000, "renyi": 300_000},
    Family.CLUSTER: {"energy": 200_000, "renyi": 300_000},
}


@dataclass
class PredictionPlan:
    family: Family
    n_qubits: int
    points: list
    counts: dict
    observables: tuple
    mom: MoMConfig = field(default_factory=MoMConfig)
    seed: int = 0

    def __post_init__(self):
        self.family = Family(self.family)
        self.points = [tuple(float(x) for x in np.atleast_1d(p)) for p in self.points]
        for p in self.points:
            qsim.validate_params(self.family, p)
        self.observables = tuple(self.observables)
        for o in self.observables:
            parse_observable(o)
        if isinstance(self.mom, dict):
            self.mom = MoMConfig(**self.mom)
        tiers = {tier_of(o) for o in self.observables}
        for t in tiers:
            if int(self.counts.get(t, 0)) <= 0:
                raise ValueError(f"shadow count for tier {t!r} must be positive")

    @classmethod
    def default(cls, family, n_qubits: int = 10, points=None, seed: int = 0) -> "PredictionPlan":
        fam = Family(family)
        return cls(fam, n_qubits, points if points is not None else evaluation_grid(fam),
                   dict(DEFAULT_COUNTS[fam]), default_observables(fam, n_qubits), MoMConfig(), seed)

    def to_json(self) -> str:
        d = asdict(self)
        d["family"] = self.family.value
        return json.dumps(d, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def predict_point(sampler, plan: PredictionPlan, k: int) -> list[EstimateReport]:
    """Reports for point ``k``; one ensemble per distinct shadow count."""
    g = plan.points[k]
    spec = HamiltonianSpec(plan.family, g, plan.n_qubits)
    counts = sorted({int(plan.counts[tier_of(o)]) for o in plan.observables})
    ensembles = {c: sampler.sample(g, c, plan.seed, stream=k * len(counts) + j) for j, c in enumerate(counts)}
    return [estimate(ensembles[int(plan.counts[tier_of(o)])], o, spec, plan.mom) for o in plan.observables]


def predict_observables(sampler, plan: PredictionPlan) -> list[EstimateReport]:
    reports = []
    for k in range(len(plan.points)):
        reports.extend(predict_point(sampler, plan, k))
    return reports


# ------------------------------------------------------------------ evaluation

COLUMNS = ("family", "point", "observable", "predicted", "stderr", "naive_mean", "shadows",
           "exact", "abs_err", "rel_err", "kw_dual_predicted", "kw_dual_exact", "kw_gap", "triality_dev")


def point_key(g) -> str:
    return ",".join(repr(float(x)) for x in g)


def _dual_key(g) -> tuple:
    return (round(1.0 - g[0], 12),)


def evaluate(sampler, plan: PredictionPlan, reports: list[EstimateReport] | None = None) -> list[dict]:
    """Rows joining predictions with exact values.

    TFIM zz rows carry the Kramers-Wannier partner (the x-string of the same
    length at 1 - g); cluster energy rows carry the spread of the exact
    ground energy over the six permutations of (g1, g2, g3).
    """
    if reports is None:
        reports = predict_observables(sampler, plan)
    by_key = {(tuple(round(x, 12) for x in r.params), r.observable): r for r in reports}
    oracle = ExactSampler(plan.family, plan.n_qubits)
    rows = []
    for rep in reports:
        g = rep.params
        spec = HamiltonianSpec(plan.family, g, plan.n_qubits)
        exact = exact_value(oracle.ground_space(g), rep.observable, spec)
        abs_err = abs(rep.value - exact)
        row = {
            "family": plan.family.value, "point": point_key(g), "observable": rep.observable,
            "predicted": rep.value, "stderr": rep.stderr, "naive_mean": rep.mean, "shadows": rep.count,
            "exact": exact, "abs_err": abs_err,
            "rel_err": abs_err / abs(exact) if exact != 0 else math.inf,
            "kw_dual_predicted": None, "kw_dual_exact": None, "kw_gap": None, "triality_dev": None,
        }
        kind, n = parse_observable(rep.observable)
        if plan.family is Family.TFIM and kind == "zz":
            dual_g = (1.0 - g[0],)
            dual = by_key.get((_dual_key(g), f"xstr_{n}"))
            dual_spec = HamiltonianSpec(Family.TFIM, dual_g, plan.n_qubits)
            row["kw_dual_exact"] = exact_value(oracle.ground_space(dual_g), f"xstr_{n}", dual_spec)
            if dual is not None:
                row["kw_dual_predicted"] = dual.value
                row["kw_gap"] = abs(rep.value - dual.value)
        if plan.family is Family.CLUSTER and kind == "energy":
            energies = [oracle.ground_space(p).energy for p in set(itertools.permutations(g))]
            row["triality_dev"] = max(energies) - min(energies)
        rows.append(row)
    rows.sort(key=lambda r: (parse_point(r["point"]), r["observable"]))
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(rows: list[dict], path, provenance: dict) -> None:
    """Tab-separated table preceded by ``# key=value`` provenance lines."""
    buf = io.StringIO()
    for k in sorted(provenance):
        buf.write(f"# {k}={provenance[k]}\n")
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in COLUMNS])
    Path(path).write_text(buf.getvalue())


_INT_COLS = {"shadows"}
_STR_COLS = {"family", "point", "observable"}


def read_table(path) -> tuple[list[dict], dict]:
    prov, lines = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            k, _, v = line[2:].partition("=")
            prov[k] = v
        else:
            lines.append(line)
    rows = []
    for r in csv.DictReader(lines, delimiter="\t"):
        out = {}
        for c, v in r.items():
            if c in _STR_COLS:
                out[c] = v
            elif v == "":
                out[c] = None
            elif c in _INT_COLS:
                out[c] = int(v)
            else:
                out[c] = float(v)
        rows.append(out)
    return rows, prov


def parse_point(key: str) -> tuple:
    return tuple(float(x) for x in key.split(","))
