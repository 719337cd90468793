"""Command-line interface.

Stages share one output directory::

    <out>/data/     shadows.bin, manifest.json          (gen-data)
    <out>/model/    best.ckpt, last.ckpt, train_log.jsonl (train)
    <out>/eval/     table.tsv, *.svg                    (evaluate)
    <out>/predict/  <point>.tsv                         (predict)
    <out>/oracle/   table.tsv                           (oracle)

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O
error.  Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

from . import qsim
from .config import ConfigError, RunConfig, load_config
from .dataset import DatasetError, generate_dataset, load_dataset
from .gpt import DivergenceError, NumericalError, train
from .gpt import checkpoint
from .gpt.checkpoint import CheckpointError
from .pipeline import (
    ExactSampler,
    ModelSampler,
    PredictionPlan,
    evaluate,
    exact_value,
    point_key,
    predict_observables,
    write_table,
)
from .plots import write_figures
from .qsim import HamiltonianSpec

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
LOCK_NAME = ".shadowgen.lock"

log = logging.getLogger("shadowgen")


class LockError(OSError):
    pass


@contextlib.contextmanager
def output_lock(out: Path):
    """Exclusive lock file in ``out``; a second run against the same directory fails."""
    out.mkdir(parents=True, exist_ok=True)
    path = out / LOCK_NAME
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"output directory {out} is locked by another run ({path})") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


@contextlib.contextmanager
def thread_limit(threads: int | None):
    if threads is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        yield


def parse_point_arg(text: str, family) -> tuple:
    try:
        point = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"--point: cannot parse {text!r} as comma-separated numbers") from None
    try:
        qsim.validate_params(family, point)
    except qsim.ParameterDomainError as exc:
        raise ConfigError(f"--point: {exc}") from None
    return point


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config, family=args.family)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed: expected a non-negative integer")
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = Path(args.out)
    return cfg


def _sampler(cfg: RunConfig, args):
    if args.sampler == "exact":
        return ExactSampler(cfg.family, cfg.n_qubits), "exact"
    path = Path(args.checkpoint) if args.checkpoint else cfg.out / "model" / "best.ckpt"
    model_cfg, params, _, _ = checkpoint.load(path)
    if model_cfg.n_qubits != cfg.n_qubits or model_cfg.param_dim != cfg.family.param_dim:
        raise ConfigError(f"checkpoint {path} was trained for a different family or chain length")
    return ModelSampler(model_cfg, params), checkpoint.file_sha256(path)


def cmd_gen_data(cfg: RunConfig, args) -> int:
    plan = {"command": "gen-data", "family": cfg.family.value, "n_qubits": cfg.n_qubits,
            "points": [list(p) for p in cfg.data.grid], "shadows_per_point": cfg.data.shadows_per_point,
            "records": len(cfg.data.grid) * cfg.data.shadows_per_point, "seed": cfg.seed,
            "out": str(cfg.out / "data")}
    if args.dry_run:
        _emit(plan)
        return EXIT_OK
    with output_lock(cfg.out):
        ds = generate_dataset(cfg.family, cfg.n_qubits, cfg.data.grid, cfg.data.shadows_per_point, cfg.seed,
                              out_dir=cfg.out / "data", workers=cfg.data.workers)
    _emit({"records": len(ds), "sha256": ds.manifest.sha256, "out": plan["out"]})
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    data_dir = Path(args.data) if args.data else cfg.out / "data"
    out = cfg.out / "model"
    if args.dry_run:
        _emit({"command": "train", "data": str(data_dir), "out": str(out), "seed": cfg.seed,
               "resume": args.resume, "model": cfg.model.to_dict(), "train": cfg.to_dict()["train"]})
        return EXIT_OK
    with output_lock(cfg.out):
        ds = load_dataset(data_dir)
        if ds.family is not cfg.family or ds.n_qubits != cfg.n_qubits:
            raise ConfigError(f"dataset in {data_dir} does not match the configured family/size")
        res = train(ds, cfg.model, cfg.train, seed=cfg.seed, out_dir=out, resume=args.resume)
    _emit({"best_val_loss": res.best_val, "initial_val_loss": res.initial_loss, "out": str(out)})
    return EXIT_OK


def _provenance(cfg: RunConfig, plan: PredictionPlan, source: str) -> dict:
    return {"family": cfg.family.value, "n_qubits": cfg.n_qubits, "plan_sha256": plan.digest(),
            "checkpoint_sha256": source, "seed": cfg.seed}


def cmd_evaluate(cfg: RunConfig, args) -> int:
    plan = cfg.plan()
    out = cfg.out / "eval"
    if args.dry_run:
        _emit({"command": "evaluate", "plan": json.loads(plan.to_json()), "sampler": args.sampler, "out": str(out)})
        return EXIT_OK
    with output_lock(cfg.out):
        sampler, source = _sampler(cfg, args)
        rows = evaluate(sampler, plan)
        out.mkdir(parents=True, exist_ok=True)
        write_table(rows, out / "table.tsv", _provenance(cfg, plan, source))
        figs = write_figures(rows, cfg.family.value, cfg.data.grid, out)
    _emit({"rows": len(rows), "table": str(out / "table.tsv"), "figures": [str(f) for f in figs]})
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args) -> int:
    point = parse_point_arg(args.point, cfg.family)
    plan = cfg.plan(points=[point])
    out = cfg.out / "predict"
    if args.dry_run:
        _emit({"command": "predict", "plan": json.loads(plan.to_json()), "sampler": args.sampler, "out": str(out)})
        return EXIT_OK
    with output_lock(cfg.out):
        sampler, source = _sampler(cfg, args)
        reports = predict_observables(sampler, plan)
        rows = [{"family": cfg.family.value, "point": point_key(point), "observable": r.observable,
                 "predicted": r.value, "stderr": r.stderr, "naive_mean": r.mean, "shadows": r.count}
                for r in reports]
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{point_key(point)}.tsv"
        write_table(rows, path, _provenance(cfg, plan, source))
    for r in rows:
        _emit({k: r[k] for k in ("observable", "predicted", "stderr", "shadows")})
    return EXIT_OK


def cmd_oracle(cfg: RunConfig, args) -> int:
    points = [parse_point_arg(args.point, cfg.family)] if args.point else cfg.predict.points
    plan = cfg.plan(points=points)
    out = cfg.out / "oracle"
    if args.dry_run:
        _emit({"command": "oracle", "points": [list(p) for p in points],
               "observables": list(plan.observables), "out": str(out)})
        return EXIT_OK
    with output_lock(cfg.out):
        oracle = ExactSampler(cfg.family, cfg.n_qubits)
        rows = []
        for p in points:
            spec = HamiltonianSpec(cfg.family, p, cfg.n_qubits)
            gs = oracle.ground_space(p)
            for o in plan.observables:
                rows.append({"family": cfg.family.value, "point": point_key(p), "observable": o,
                             "exact": exact_value(gs, o, spec)})
        out.mkdir(parents=True, exist_ok=True)
        write_table(rows, out / "table.tsv", _provenance(cfg, plan, "exact"))
    if args.point:
        for r in rows:
            _emit({"observable": r["observable"], "exact": r["exact"]})
    else:
        _emit({"rows": len(rows), "table": str(out / "table.tsv")})
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "evaluate": cmd_evaluate,
            "predict": cmd_predict, "oracle": cmd_oracle}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shadowgen", description="Generative model of classical shadows.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults: shipped config for --family)")
    common.add_argument("--family", choices=("tfim", "cluster"), help="family used when no --config is given")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="override the configured output directory")
    common.add_argument("--dry-run", action="store_true", help="print the plan and write nothing")
    common.add_argument("--threads", type=int, help="limit BLAS threads")
    common.add_argument("-v", "--verbose", action="store_true")

    sub.add_parser("gen-data", parents=[common], help="simulate training shadows")
    p = sub.add_parser("train", parents=[common], help="train the transformer")
    p.add_argument("--resume", action="store_true", help="continue from <out>/model/last.ckpt")
    p.add_argument("--data", help="dataset directory (default <out>/data)")
    for name, text in (("evaluate", "predict the plan grid and compare with exact values"),
                       ("predict", "predict observables at one parameter point")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="checkpoint file (default <out>/model/best.ckpt)")
        p.add_argument("--sampler", choices=("model", "exact"), default="model",
                       help="'exact' draws shadows from the exact ground state instead of the model")
        if name == "predict":
            p.add_argument("--point", required=True, help="parameter point, e.g. 0.5 or 0.2,0.3,0.5")
    p = sub.add_parser("oracle", parents=[common], help="exact observable values")
    p.add_argument("--point", help="single parameter point (default: the plan grid)")
    return parser


def _classify(exc: BaseException) -> tuple[int, str] | None:
    if isinstance(exc, (OSError, DatasetError, CheckpointError)):
        return EXIT_IO, "io"
    if isinstance(exc, (ConfigError, qsim.ParameterDomainError)):
        return EXIT_CONFIG, "config"
    if isinstance(exc, (DivergenceError, qsim.EigensolverError, NumericalError, ArithmeticError)):
        return EXIT_NUMERIC, "numeric"
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads: expected a positive integer")
        cfg = _resolve(args)
        with thread_limit(args.threads):
            return COMMANDS[args.command](cfg, args)
    except Exception as exc:
        kind = _classify(exc)
        if kind is None:
            raise
        code, name = kind
        print(json.dumps({"error": name, "exit_code": code, "type": type(exc).__name__,
                          "message": str(exc).replace("\n", " ")}, sort_keys=True), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
