"""Minibatch training with AdamW and cosine warm restarts."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..dataset import ShadowDataset
from . import checkpoint
from .model import ModelConfig, init_params, loss, loss_and_grad
from .optim import AdamW, cosine_warm_restarts

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, report: dict):
        super().__init__(
            f"training diverged: epoch loss {report['epoch_loss']:.4g} exceeded "
            f"{report['factor']}x the initial loss {report['initial_loss']:.4g} "
            f"for {report['patience']} consecutive epochs (epoch {report['epoch']})"
        )
        self.report = report


@dataclass
class TrainConfig:
    epochs: int = 75
    batch_size: int = 512
    lr_max: float = 3e-4
    lr_min: float = 1e-6
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    t0_epochs: int = 5
    t_mult: int = 2
    divergence_factor: float = 10.0
    divergence_patience: int = 3
    eval_batch: int = 2048

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs < 1 or self.batch_size < 1 or self.t0_epochs < 1 or self.t_mult < 1:
            raise ValueError("epochs, batch_size, t0_epochs and t_mult must be positive")
        if not 0 <= self.lr_min <= self.lr_max:
            raise ValueError("need 0 <= lr_min <= lr_max")

    def lr(self, step: int, steps_per_epoch: int) -> float:
        return cosine_warm_restarts(step, steps_per_epoch, self.t0_epochs, self.t_mult,
                                    self.lr_min, self.lr_max)


@dataclass
class TrainResult:
    config: ModelConfig
    params: dict
    best_val: float
    initial_loss: float
    log: list = field(default_factory=list)


def blas_threads() -> int:
    try:
        from threadpoolctl import threadpool_info
    except ImportError:
        return 0
    return sum(i.get("num_threads", 0) for i in threadpool_info() if i.get("user_api") == "blas")


def evaluate_loss(params, cfg: ModelConfig, g, tokens, batch: int = 2048) -> float:
    if len(tokens) == 0:
        return float("nan")
    total = 0.0
    for s in range(0, len(tokens), batch):
        total += loss(params, cfg, g[s:s + batch], tokens[s:s + batch]) * len(tokens[s:s + batch])
    return total / len(tokens)


def _copy(params):
    return {k: v.copy() for k, v in params.items()}


def train(dataset: ShadowDataset, cfg: ModelConfig, hp: TrainConfig = TrainConfig(), seed: int = 0,
          out_dir=None, resume: bool = False, max_epochs: int | None = None) -> TrainResult:
    """Train on ``dataset``; writes ``best.ckpt``, ``last.ckpt`` and ``train_log.jsonl`` to ``out_dir``.

    Epoch ``e`` visits the training records in the permutation drawn from
    ``default_rng([seed, e])``, so a resumed run reproduces an uninterrupted
    one exactly.  ``max_epochs`` stops early (schedule unchanged), which is
    how an interrupted run is simulated.
    """
    if dataset.n_qubits != cfg.n_qubits or dataset.family.param_dim != cfg.param_dim:
        raise ValueError("dataset family/size does not match the model configuration")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    g_all = dataset.params.astype(cfg.dtype)
    tok_all = dataset.tokens.astype(np.intp)
    train_idx, val_idx = dataset.split()
    if len(val_idx) == 0:
        val_idx = train_idx
    steps_per_epoch = math.ceil(len(train_idx) / hp.batch_size)
    opt = AdamW(hp.lr_max, hp.betas, hp.eps, hp.weight_decay)

    def val_loss(p):
        return evaluate_loss(p, cfg, g_all[val_idx], tok_all[val_idx], hp.eval_batch)

    if resume:
        if out is None or not (out / "last.ckpt").exists():
            raise FileNotFoundError("resume requested but no last.ckpt in the output directory")
        cfg_ck, params, optim_arrays, meta = checkpoint.load(out / "last.ckpt")
        if cfg_ck != cfg or meta.get("seed") != seed or meta.get("train") != _jsonable(hp):
            raise ValueError("checkpoint was written with a different configuration or seed")
        opt.load_state_arrays(optim_arrays, meta["opt_step"])
        _, best_params, _, _ = checkpoint.load(out / "best.ckpt")
        start_epoch, step = meta["epoch"], meta["step"]
        best_val, initial, strikes = meta["best_val"], meta["initial_loss"], meta["strikes"]
        records = _read_log(out / "train_log.jsonl", step, start_epoch)
    else:
        params = init_params(cfg, seed)
        best_params = _copy(params)
        start_epoch, step, strikes = 0, 0, 0
        initial = val_loss(params)
        best_val = initial
        records = [{"kind": "start", "seed": seed, "threads": blas_threads(), "dtype": cfg.dtype,
                    "n_train": int(len(train_idx)), "n_val": int(len(val_idx)),
                    "steps_per_epoch": steps_per_epoch, "initial_val_loss": initial}]
    logfile = None
    if out is not None:
        logfile = open(out / "train_log.jsonl", "w")
        for rec in records:
            logfile.write(json.dumps(rec) + "\n")

    def emit(rec):
        records.append(rec)
        if logfile is not None:
            logfile.write(json.dumps(rec) + "\n")

    stop = hp.epochs if max_epochs is None else min(hp.epochs, max_epochs)
    try:
        for epoch in range(start_epoch, stop):
            perm = train_idx[np.random.default_rng([seed, epoch]).permutation(len(train_idx))]
            losses = []
            for s in range(0, len(perm), hp.batch_size):
                idx = perm[s:s + hp.batch_size]
                lr = hp.lr(step, steps_per_epoch)
                batch_loss, grads = loss_and_grad(params, cfg, g_all[idx], tok_all[idx])
                opt.step(params, grads, lr)
                emit({"kind": "step", "step": step, "epoch": epoch, "lr": lr, "train_loss": batch_loss})
                losses.append(batch_loss * len(idx))
                step += 1
            epoch_loss = sum(losses) / len(perm)
            vl = val_loss(params)
            improved = vl < best_val
            if improved:
                best_val = vl
                best_params = _copy(params)
            emit({"kind": "epoch", "epoch": epoch, "step": step, "train_loss": epoch_loss,
                  "val_loss": vl, "best_val_loss": best_val})
            log.info("epoch %d: train %.5f val %.5f", epoch, epoch_loss, vl)
            strikes = strikes + 1 if epoch_loss > hp.divergence_factor * initial else 0
            if out is not None:
                if improved or epoch == start_epoch:
                    checkpoint.save(out / "best.ckpt", cfg, best_params, meta={"val_loss": best_val, "seed": seed})
                checkpoint.save(out / "last.ckpt", cfg, params, opt.state_arrays(), meta={
                    "epoch": epoch + 1, "step": step, "best_val": best_val, "initial_loss": initial,
                    "strikes": strikes, "seed": seed, "opt_step": opt.step_count, "train": _jsonable(hp),
                })
                logfile.flush()
            if strikes >= hp.divergence_patience:
                raise DivergenceError({"epoch": epoch, "epoch_loss": epoch_loss, "initial_loss": initial,
                                       "factor": hp.divergence_factor, "patience": hp.divergence_patience})
    finally:
        if logfile is not None:
            logfile.close()
    return TrainResult(cfg, best_params, best_val, initial, records)


def _jsonable(hp: TrainConfig) -> dict:
    return json.loads(json.dumps(asdict(hp)))


def _read_log(path: Path, step: int, epoch: int) -> list:
    keep = []
    if not path.exists():
        return keep
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        if rec["kind"] == "start" or (rec["kind"] == "step" and rec["step"] < step) or (
            rec["kind"] == "epoch" and rec["epoch"] < epoch
        ):
            keep.append(rec)
    return keep
