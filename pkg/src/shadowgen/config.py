"""Run configuration: a YAML tree validated in full before any compute starts.

Top-level keys: ``family``, ``n_qubits``, ``seed``, ``out``, ``data``,
``model``, ``train``, ``predict``.  Unknown keys anywhere are rejected.
Omitted keys take the defaults shipped in ``configs/<family>.yaml``.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from . import qsim
from .dataset import SHADOWS_PER_POINT, training_grid
from .gpt import ModelConfig, TrainConfig
from .pipeline import DEFAULT_COUNTS, PredictionPlan, default_observables, evaluation_grid, placements, tier_of
from .qsim import Family
from .shadow import MoMConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    grid: list
    shadows_per_point: int = SHADOWS_PER_POINT
    workers: int = 1


@dataclass
class PredictSection:
    points: list
    counts: dict
    observables: list
    mom_groups: int = 10


@dataclass
class RunConfig:
    family: Family
    n_qubits: int
    seed: int
    out: Path
    data: DataSection
    model: ModelConfig
    train: TrainConfig
    predict: PredictSection = field(repr=False)

    def plan(self, points=None) -> PredictionPlan:
        return PredictionPlan(self.family, self.n_qubits, points if points is not None else self.predict.points,
                              dict(self.predict.counts), tuple(self.predict.observables),
                              MoMConfig(self.predict.mom_groups), self.seed)

    def to_dict(self) -> dict:
        return {
            "family": self.family.value, "n_qubits": self.n_qubits, "seed": self.seed, "out": str(self.out),
            "data": dataclasses.asdict(self.data),
            "model": {k: v for k, v in self.model.to_dict().items() if k not in ("n_qubits", "param_dim")},
            "train": {**dataclasses.asdict(self.train), "betas": list(self.train.betas)},
            "predict": dataclasses.asdict(self.predict),
        }


_TOP = {"family", "n_qubits", "seed", "out", "data", "model", "train", "predict"}
_MODEL_KEYS = {"d_model", "n_layers", "n_heads", "d_ff", "dtype"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_DATA_KEYS = {f.name for f in dataclasses.fields(DataSection)}
_PREDICT_KEYS = {f.name for f in dataclasses.fields(PredictSection)}


def default_config_text(family) -> str:
    fam = Family(family)
    return resources.files("shadowgen").joinpath("configs", f"{fam.value}.yaml").read_text()


def _check_keys(section: str, data, allowed: set) -> dict:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(data).__name__}")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(unknown)}")
    return data


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "counts":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _points(section: str, value, fam: Family, default) -> list:
    if value in (None, "default"):
        return [tuple(p) for p in default(fam)]
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{section}: expected 'default' or a non-empty list of points")
    pts = []
    for p in value:
        p = tuple(float(x) for x in (p if isinstance(p, (list, tuple)) else [p]))
        try:
            qsim.validate_params(fam, p)
        except qsim.ParameterDomainError as exc:
            raise ConfigError(f"{section}: {exc}") from None
        pts.append(p)
    return pts


def _positive_int(section: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(f"{section}: expected a positive integer, got {value!r}")
    return value


def build_config(raw: dict) -> RunConfig:
    """Validate a parsed YAML tree (merged over the family defaults)."""
    raw = _check_keys("config", raw, _TOP)
    try:
        fam = Family(raw.get("family", "tfim"))
    except ValueError:
        raise ConfigError(f"family: unknown family {raw.get('family')!r} (expected tfim or cluster)") from None
    tree = _merge(yaml.safe_load(default_config_text(fam)), raw)
    _check_keys("config", tree, _TOP)

    n = _positive_int("n_qubits", tree["n_qubits"])
    if not 3 <= n <= 14:
        raise ConfigError(f"n_qubits: must lie in [3, 14], got {n}")
    seed = tree["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed: expected a non-negative integer, got {seed!r}")

    d = _check_keys("data", tree["data"], _DATA_KEYS)
    data = DataSection(_points("data.grid", d.get("grid"), fam, training_grid),
                       _positive_int("data.shadows_per_point", d.get("shadows_per_point", SHADOWS_PER_POINT)),
                       _positive_int("data.workers", d.get("workers", 1)))

    m = _check_keys("model", tree["model"], _MODEL_KEYS)
    try:
        model = ModelConfig(n_qubits=n, param_dim=fam.param_dim, **m)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None

    t = _check_keys("train", tree["train"], _TRAIN_KEYS)
    try:
        train = TrainConfig(**t)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None

    p = _check_keys("predict", tree["predict"], _PREDICT_KEYS)
    observables = p.get("observables")
    if observables in (None, "default"):
        observables = list(default_observables(fam, n))
    elif not isinstance(observables, list):
        raise ConfigError("predict.observables: expected 'default' or a list of observable ids")
    counts = p.get("counts") or dict(DEFAULT_COUNTS[fam])
    _check_keys("predict.counts", counts, {"energy", "renyi"})
    for k, v in counts.items():
        _positive_int(f"predict.counts.{k}", v)
    predict = PredictSection(_points("predict.points", p.get("points"), fam, evaluation_grid),
                             dict(counts), list(observables), _positive_int("predict.mom_groups", p.get("mom_groups", 10)))
    cfg = RunConfig(fam, n, seed, Path(tree["out"]), data, model, train, predict)
    try:
        plan = cfg.plan()
        for obs in plan.observables:
            if obs != "energy":
                placements(obs, n)
        for tier in {tier_of(o) for o in plan.observables}:
            if plan.counts[tier] < plan.mom.n_groups:
                raise ValueError(f"shadow count for {tier!r} is smaller than the number of MoM groups")
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"predict: {exc}") from None
    return cfg


def load_config(path=None, family=None) -> RunConfig:
    """Load ``path`` (or the shipped defaults for ``family``) and validate it."""
    if path is None:
        return build_config({"family": Family(family or "tfim").value})
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({str(exc).splitlines()[0]})") from None
    return build_config(raw or {})
