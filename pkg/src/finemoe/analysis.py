"""Expert-specialization probes, architecture ablations and compute accounting."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import plotting
from .data import Corpus
from .errors import ConfigError, ContractError, RoutingError
from .model import ModelConfig, MoETransformer, count_model_params
from .moe import RouteOptions, count_params
from .train import TrainConfig, evaluate, train


@dataclass
class ProbeReport:
    probe: str
    parameter: str
    values: list[float]
    losses: list[float]
    baseline_loss: float
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.values) != len(self.losses):
            raise ContractError("ProbeReport needs one loss per swept value")
        order = np.argsort(self.values, kind="stable")
        self.values = [self.values[i] for i in order]
        self.losses = [self.losses[i] for i in order]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write(self, out_dir, stem: str | None = None, figure: bool = True) -> dict[str, Path]:
        """JSON report, two-column tab-separated data file and (optionally) a PNG."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = stem or self.probe
        paths = {"json": out_dir / f"{stem}.json", "data": out_dir / f"{stem}.dat"}
        paths["json"].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        write_plot_data(paths["data"], self.parameter, "eval_loss", self.values, self.losses)
        if figure:
            paths["figure"] = plotting.plot_sweep(
                self.values, self.losses, out_dir / f"{stem}.png",
                xlabel=self.parameter, title=self.probe, baseline=self.baseline_loss)
        return paths


def write_plot_data(path, xname: str, yname: str, xs, ys) -> None:
    lines = [f"# {xname}\t{yname}"] + [f"{x!r}\t{y!r}" for x, y in zip(xs, ys)]
    Path(path).write_text("\n".join(lines) + "\n")


def _windows(model: MoETransformer, data) -> np.ndarray:
    if isinstance(data, Corpus):
        return data.eval_windows(model.cfg.seq_len)
    return np.asarray(data)


def _echo(model: MoETransformer) -> dict:
    return model.cfg.to_dict()


def disable_top_routed(model: MoETransformer, data, ratios: Sequence[float]) -> ProbeReport:
    """Per token, mask the ``floor(ratio * N_r)`` highest-affinity routed experts, then route top-K_r."""
    windows = _windows(model, data)
    cfg = model.cfg.moe
    baseline = evaluate(model, windows)["lm_loss"]
    losses, masked = [], []
    for r in ratios:
        if not 0.0 <= r < 1.0:
            raise ContractError(f"ratio {r} outside [0, 1)")
        n_mask = math.floor(r * cfg.n_routed)
        if cfg.n_routed - n_mask < cfg.k_routed:
            raise RoutingError(f"ratio {r} masks {n_mask} of {cfg.n_routed} experts, fewer than K_r={cfg.k_routed} left")
        losses.append(evaluate(model, windows, RouteOptions(mask_top=n_mask))["lm_loss"])
        masked.append(n_mask)
    return ProbeReport("disable_top_routed", "disabled_ratio", [float(r) for r in ratios], losses, baseline,
                       _echo(model), {"masked_experts": dict(zip(map(str, ratios), masked))})


def disable_shared(model: MoETransformer, data) -> ProbeReport:
    """Drop the shared experts and activate ``K_s`` more routed experts instead."""
    cfg = model.cfg.moe
    if cfg.K_s < 1:
        raise ConfigError("disable_shared needs at least one shared expert")
    windows = _windows(model, data)
    baseline = evaluate(model, windows)["lm_loss"]
    opts = RouteOptions(disable_shared=True)
    res = model.forward(windows[:, :-1], opts)
    gates = sorted({int(c) for dec in res.decisions for c in dec.nonzero_gates_per_token()})
    loss = evaluate(model, windows, opts)["lm_loss"]
    return ProbeReport("disable_shared", "shared_disabled", [1.0], [loss], baseline, _echo(model),
                       {"routed_activated": cfg.k_routed + cfg.K_s, "nonzero_gates_per_token": gates})


def vary_activated(model: MoETransformer, data, k_values: Sequence[int]) -> ProbeReport:
    """Eval loss with ``k`` routed experts activated per token, everything else unchanged."""
    cfg = model.cfg.moe
    windows = _windows(model, data)
    baseline = evaluate(model, windows)["lm_loss"]
    losses = []
    for k in k_values:
        if k < 1:
            raise ValueError(f"activated expert count must be >= 1, got {k}")
        if k > cfg.n_routed:
            raise RoutingError(f"k={k} exceeds routed experts {cfg.n_routed}")
        losses.append(evaluate(model, windows, RouteOptions(k_routed=int(k)))["lm_loss"])
    return ProbeReport("vary_activated", "k_routed", [float(k) for k in k_values], losses, baseline,
                       _echo(model), {"trained_k_routed": cfg.k_routed})


# ---------------------------------------------------------------- ablations

# (m, K_s) per variant; base expert count and top-K come from ablation_family()
VARIANTS = {
    "gshard-top2": (1, 0),
    "shared-isolation": (1, 1),
    "x2-segmentation": (2, 1),
    "x4-segmentation": (4, 1),
    "ratio-1-shared": (4, 1),
    "ratio-2-shared": (4, 2),
    "ratio-4-shared": (4, 4),
}
_ALIASES = {"+shared-isolation": "shared-isolation", "×2-segmentation": "x2-segmentation",
            "×4-segmentation": "x4-segmentation"}


def variant_config(base: ModelConfig, variant: str, n_base: int = 8, k_base: int = 2) -> ModelConfig:
    name = _ALIASES.get(variant, variant)
    if name not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}; choose from {', '.join(VARIANTS)}")
    m, k_s = VARIANTS[name]
    return base.replace_moe(N=n_base, K=k_base, m=m, K_s=k_s, D=1, device_groups=None,
                            expert_inner_override=None)


def check_budgets(configs: dict[str, ModelConfig]) -> dict[str, dict]:
    """Per-variant counts; raises if expert parameters (total or activated) differ."""
    rows = {}
    for name, cfg in configs.items():
        moe = count_params(cfg.moe)
        model = count_model_params(cfg)
        rows[name] = {
            "m": cfg.moe.m, "K_s": cfg.moe.K_s, "n_routed": cfg.moe.n_routed, "k_routed": cfg.moe.k_routed,
            "total_expert": moe["total_expert"], "activated_expert": moe["activated_expert"],
            "total_params": model["total"], "activated_params": model["activated"],
        }
    for key in ("total_expert", "activated_expert"):
        values = {r[key] for r in rows.values()}
        if len(values) > 1:
            detail = ", ".join(f"{n}={r[key]}" for n, r in rows.items())
            raise ConfigError(f"ablation variants have unequal {key}: {detail}")
    return rows


def ablation_matrix(corpus: Corpus, variants: Sequence[str], base: ModelConfig, train_cfg: TrainConfig,
                    *, n_base: int = 8, k_base: int = 2) -> list[dict]:
    """Train every variant from the same seed and report final eval losses with parameter counts."""
    configs = {v: variant_config(base, v, n_base, k_base) for v in variants}
    rows = check_budgets(configs)
    table = []
    for v, cfg in configs.items():
        result = train(MoETransformer(cfg, seed=train_cfg.seed), corpus, train_cfg)
        table.append({"variant": v, **rows[v],
                      "final_train_loss": result.summary["final_train"]["lm_loss"] if result.summary["final_train"] else None,
                      "eval_loss": result.summary["final_eval"]["lm_loss"],
                      "load_cv": result.summary["final_eval"]["load_cv"]})
    return table


def write_ablation(table: Sequence[dict], out_dir, stem: str = "ablation", figure: bool = True) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"json": out_dir / f"{stem}.json", "data": out_dir / f"{stem}.tsv"}
    paths["json"].write_text(json.dumps(list(table), indent=2, sort_keys=True) + "\n")
    cols = ["variant", "m", "K_s", "n_routed", "k_routed", "total_params", "activated_params", "eval_loss"]
    lines = ["# " + "\t".join(cols)] + ["\t".join(str(r[c]) for c in cols) for r in table]
    paths["data"].write_text("\n".join(lines) + "\n")
    if figure and table:
        paths["figure"] = plotting.plot_bars([r["variant"] for r in table], [r["eval_loss"] for r in table],
                                             out_dir / f"{stem}.png", ylabel="eval loss", title="ablation")
    return paths


# ---------------------------------------------------------------- compute

def flops_estimate(cfg: ModelConfig, tokens: int) -> dict:
    """Training FLOPs (forward + backward = 3x forward) for ``tokens`` tokens.

    Every matmul costs ``2*m*n*k``; the embedding lookup is counted as a
    one-hot matmul, attention scores and value mixing as full ``T x T``
    products per sequence, and only activated experts are charged.
    """
    if tokens < 0:
        raise ValueError("tokens must be non-negative")
    d, V, A = cfg.d, cfg.vocab, cfg.attn_dim
    moe = cfg.moe
    n_moe = cfg.n_moe_layers
    n_dense = cfg.L - n_moe
    expert = 3 * d * moe.expert_inner
    per_token = {
        "embedding": 2 * V * d,
        "attention_proj": cfg.L * 2 * 4 * d * A,
        "router": n_moe * 2 * moe.n_routed * d,
        "experts": n_moe * 2 * (moe.K_s + moe.k_routed) * expert + n_dense * 2 * 3 * d * cfg.ffn_inner,
        "head": 2 * d * V,
    }
    full, rest = divmod(tokens, cfg.seq_len)
    seq_lengths = [cfg.seq_len] * full + ([rest] if rest else [])
    attn_scores = sum(cfg.L * 2 * 2 * T * T * A for T in seq_lengths)
    forward = {k: v * tokens for k, v in per_token.items()}
    forward["attention_scores"] = attn_scores
    fwd_total = sum(forward.values())
    return {"tokens": tokens, "forward": forward, "forward_total": fwd_total, "total": 3 * fwd_total}
