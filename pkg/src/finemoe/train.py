"""AdamW training loop with warmup + step-decay learning rate and balance-loss assembly."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Corpus
from .errors import ConfigError, ContractError, NumericError
from .model import MoETransformer, save_checkpoint, substream
from .moe import RouteOptions
from .tensor import Tensor

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "lm_loss", "expbal", "devbal", "load_max_mean", "load_cv", "lr", "wall_ms")


@dataclass(frozen=True)
class TrainConfig:
    max_lr: float = 1e-2
    warmup_steps: int = 20
    total_steps: int = 200
    decay_points: tuple[float, ...] = (0.8, 0.9)
    decay_factor: float = 0.316
    batch_tokens: int = 256
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip_norm: float = 1.0
    seed: int = 0
    alpha1: float | None = None
    alpha2: float | None = None
    D: int | None = None
    log_every: int = 1
    eval_tokens: int = 2048
    record_wall_time: bool = False

    def __post_init__(self):
        object.__setattr__(self, "decay_points", tuple(float(p) for p in self.decay_points))
        if self.max_lr <= 0 or self.total_steps < 0 or self.warmup_steps < 0:
            raise ConfigError("max_lr > 0, total_steps >= 0 and warmup_steps >= 0 required")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive")
        if not all(0.0 <= p <= 1.0 for p in self.decay_points):
            raise ConfigError("decay_points must be fractions in [0, 1]")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then multiply by ``decay_factor`` at each decay point."""
    if step < 0 or step > cfg.total_steps:
        raise ContractError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.max_lr * step / cfg.warmup_steps
    drops = sum(step >= p * cfg.total_steps for p in cfg.decay_points)
    return cfg.max_lr * cfg.decay_factor**drops


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamWState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamWState":
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamWState, lr: float,
               cfg: TrainConfig, decay_mask: Sequence[bool] | None = None) -> AdamWState:
    """One in-place AdamW update with decoupled weight decay and bias-corrected moments."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("adamw_step: params, grads and state lengths differ")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ContractError(f"adamw_step: shape mismatch for {p.name or i}: {p.shape} vs {g.shape}")
        m = state.m[i]
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if decay_mask is None or decay_mask[i]:
            p.data -= lr * cfg.weight_decay * p.data
        p.data -= lr * update
    return state


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the scale."""
    if max_norm <= 0:
        raise ContractError("clip_grad_norm: max_norm must be positive")
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for g in grads:
        g *= scale
    return scale


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    metrics: list[dict]
    summary: dict
    model: MoETransformer


def apply_overrides(model: MoETransformer, cfg: TrainConfig) -> None:
    changes = {k: getattr(cfg, k) for k in ("alpha1", "alpha2", "D") if getattr(cfg, k) is not None}
    if changes:
        model.cfg = model.cfg.replace_moe(**changes)


def evaluate(model: MoETransformer, windows: np.ndarray, options: RouteOptions | None = None) -> dict:
    """Mean LM loss (and routing dispersion) over fixed [n, T+1] token windows."""
    lb = model.loss(windows[:, :-1], windows[:, 1:], options, with_balance=False)
    return {"lm_loss": lb.lm.item(), "load_max_mean": lb.load_max_mean, "load_cv": lb.load_cv}


def train(model: MoETransformer, corpus: Corpus, cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Train in place; deterministic for a fixed seed, config and corpus.

    When ``out_dir`` is given, writes ``metrics.csv``, ``summary.json`` and
    ``checkpoint.zip`` there.
    """
    apply_overrides(model, cfg)
    seq_len = model.cfg.seq_len
    n_seq = max(1, cfg.batch_tokens // seq_len)
    rng = substream(cfg.seed, "data")
    params = model.parameters()
    decay_mask = [p.ndim >= 2 for p in params]
    state = AdamWState.zeros_like(params)
    eval_windows = corpus.eval_windows(seq_len, cfg.eval_tokens)
    metrics: list[dict] = []
    initial_eval = evaluate(model, eval_windows)
    t0 = time.perf_counter()
    last = None
    for step in range(1, cfg.total_steps + 1):
        tick = time.perf_counter()
        batch = corpus.sample_batch(rng, n_seq, seq_len)
        lr = lr_schedule(step, cfg)
        try:
            # non-finite values are caught explicitly below, so numpy's warnings add nothing
            with np.errstate(over="ignore", invalid="ignore"):
                lb = model.loss(batch[:, :-1], batch[:, 1:])
        except NumericError as e:
            raise NumericError(f"non-finite value at step {step}: {e}") from None
        total = lb.total.item()
        if not math.isfinite(total):
            raise NumericError(f"non-finite loss at step {step}: lm={lb.lm.item()} expbal={lb.expbal.item()} "
                               f"devbal={lb.devbal.item()}")
        model.zero_grad()
        lb.total.backward()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        clip_grad_norm(grads, cfg.grad_clip_norm)
        adamw_step(params, grads, state, lr, cfg, decay_mask)
        last = {
            "step": step,
            "lm_loss": lb.lm.item(),
            "expbal": lb.expbal.item(),
            "devbal": lb.devbal.item(),
            "load_max_mean": lb.load_max_mean,
            "load_cv": lb.load_cv,
            "lr": lr,
            "wall_ms": round((time.perf_counter() - tick) * 1e3, 3) if cfg.record_wall_time else 0.0,
            "total": total,
        }
        if step % cfg.log_every == 0 or step == cfg.total_steps:
            metrics.append(last)
    model.zero_grad()
    final_eval = evaluate(model, eval_windows)
    summary = {
        "steps": cfg.total_steps,
        "initial_eval": initial_eval,
        "final_eval": final_eval,
        "final_train": last,
        "wall_seconds": time.perf_counter() - t0,
        "train_config": _config_echo(cfg),
        "model_config": model.cfg.to_dict(),
    }
    if out_dir is not None:
        write_run(Path(out_dir), model, metrics, summary)
    logger.info("trained %d steps: eval loss %.4f -> %.4f", cfg.total_steps,
                initial_eval["lm_loss"], final_eval["lm_loss"])
    return TrainResult(metrics, summary, model)


def _config_echo(cfg: TrainConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["decay_points"] = list(cfg.decay_points)
    return out


def write_metrics_csv(path: Path, metrics: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for rec in metrics:
            w.writerow([rec["step"]] + [repr(float(rec[k])) for k in METRIC_FIELDS[1:]])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_run(out_dir: Path, model: MoETransformer, metrics: Sequence[dict], summary: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out_dir / "metrics.csv", metrics)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    save_checkpoint(out_dir / "checkpoint.zip", model, meta={"train_config": summary["train_config"]})
