"""Command-line entry point: ``finemoe train | analyze | report``.

Exit codes: 0 success, 2 configuration/contract error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import shutil
import sys
from pathlib import Path

from . import plotting
from .analysis import (
    ablation_matrix,
    disable_shared,
    disable_top_routed,
    flops_estimate,
    vary_activated,
    write_ablation,
    write_plot_data,
)
from .config import RunConfig, load_run_config, parse_run_config
from .errors import ConfigError, ContractError, NumericError, RoutingError
from .model import PRESETS, MoETransformer, count_model_params, load_checkpoint, preset
from .moe import combination_count
from .train import train, write_run

logger = logging.getLogger("finemoe")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _names(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    run = load_run_config(args.config)
    if args.seed is not None:
        run = run.with_seed(args.seed)
    out = Path(args.out or run.output_dir or "run")
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise CLIError(f"output directory {out} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    corpus = run.load_corpus(Path(args.config).resolve().parent)
    if corpus.tokens.size and corpus.tokens.max() >= run.model.vocab:
        raise CLIError(f"corpus token id {int(corpus.tokens.max())} >= model vocab {run.model.vocab}")
    model = MoETransformer(run.model, seed=run.train.seed)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = train(model, corpus, run.train)
    except NumericError as e:
        (out / "diagnostic.json").write_text(json.dumps({"error": "non-finite loss", "detail": str(e)}, indent=2) + "\n")
        raise CLIError(str(e), EXIT_NUMERIC) from None
    result.summary["run_config"] = run.to_dict()
    result.summary["config_dir"] = str(Path(args.config).resolve().parent)
    write_run(out, model, result.metrics, result.summary)
    if not args.no_figures:
        plotting.plot_training(result.metrics, out / "training.png")
    ev = result.summary
    print(f"trained {run.train.total_steps} steps -> {out}")
    print(f"eval loss {ev['initial_eval']['lm_loss']:.4f} -> {ev['final_eval']['lm_loss']:.4f}, "
          f"load CV {ev['final_eval']['load_cv']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- analyze

def _run_config_for(args, header: dict | None) -> tuple[RunConfig, Path | None]:
    if getattr(args, "config", None):
        return load_run_config(args.config), Path(args.config).resolve().parent
    if header is not None:
        summary_path = Path(args.checkpoint).parent / "summary.json"
        if summary_path.exists():
            summary = json.loads(summary_path.read_text())
            if "run_config" in summary:
                base = summary.get("config_dir")
                return parse_run_config(json.dumps(summary["run_config"]), str(summary_path)), (
                    Path(base) if base else None)
    raise CLIError("need --config (no run config recorded next to the checkpoint)")


def _load_model(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CLIError(f"checkpoint not found: {ckpt}")
    return load_checkpoint(ckpt)


def cmd_analyze(args) -> int:
    out = Path(args.out)
    if args.probe == "ablate":
        header = None
        if args.checkpoint:
            _, header = _load_model(args)
        run, base_dir = _run_config_for(args, header)
        corpus = run.load_corpus(base_dir)
        variants = _names(args.variants) if args.variants else run.probes.get("variants", ["gshard-top2", "x4-segmentation"])
        table = ablation_matrix(corpus, variants, run.model, run.train,
                                n_base=run.probes.get("ablation_n_base", 8),
                                k_base=run.probes.get("ablation_k_base", 2))
        paths = write_ablation(table, out, figure=not args.no_figures)
        print(f"{'variant':<18}{'m':>3}{'K_s':>5}{'N_r':>5}{'K_r':>5}{'total':>12}{'activated':>12}{'eval_loss':>11}")
        for r in table:
            print(f"{r['variant']:<18}{r['m']:>3}{r['K_s']:>5}{r['n_routed']:>5}{r['k_routed']:>5}"
                  f"{r['total_params']:>12}{r['activated_params']:>12}{r['eval_loss']:>11.4f}")
        print(f"wrote {paths['json']}")
        return EXIT_OK

    if not args.checkpoint:
        raise CLIError("--checkpoint is required")
    model, header = _load_model(args)
    run, base_dir = _run_config_for(args, header)
    corpus = run.load_corpus(base_dir)
    if args.probe == "disable-top":
        ratios = _floats(args.ratios) if args.ratios else run.probes.get("ratios", [0.0, 0.25, 0.5])
        report = disable_top_routed(model, corpus, ratios)
    elif args.probe == "disable-shared":
        report = disable_shared(model, corpus)
    else:
        ks = _ints(args.k) if args.k else run.probes.get("k_values", [1, 2, 3])
        report = vary_activated(model, corpus, ks)
    paths = report.write(out, figure=not args.no_figures)
    print(f"{report.probe}: baseline {report.baseline_loss:.6f}")
    for v, loss in zip(report.values, report.losses):
        print(f"  {report.parameter}={v:g}\t{loss:.6f}")
    print(f"wrote {paths['json']}")
    return EXIT_OK


# ---------------------------------------------------------------- report

def _report_model(args):
    if args.config:
        return load_run_config(args.config).model, args.config
    return preset(args.preset), args.preset


def cmd_report(args) -> int:
    cfg, label = _report_model(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    figures = not args.no_figures
    if args.what == "params":
        counts = count_model_params(cfg)
        moe = counts["moe_layer"]
        rows = [("total", counts["total"]), ("activated", counts["activated"]),
                ("embedding", counts["embedding"]), ("attention/layer", counts["attention_per_layer"]),
                ("moe total_expert/layer", moe["total_expert"]), ("moe activated_expert/layer", moe["activated_expert"]),
                ("moe router/layer", moe["router"]), ("head", counts["head"])]
        if moe["standard_ffn"]:
            rows += [("total_expert / standard FFN", moe["total_expert"] / moe["standard_ffn"]),
                     ("activated_expert / standard FFN", moe["activated_expert"] / moe["standard_ffn"])]
        payload = {"config": label, **counts}
        if figures:
            plotting.plot_bars(["embedding", "attention", "experts(total)", "experts(active)", "head"],
                               [counts["embedding"], cfg.L * counts["attention_per_layer"],
                                counts["moe_layers"] * moe["total_expert"],
                                counts["moe_layers"] * moe["activated_expert"], counts["head"]],
                               out / "report_params.png", ylabel="parameters", title=f"parameters: {label}")
    elif args.what == "flops":
        est = flops_estimate(cfg, args.tokens)
        rows = [(k, v) for k, v in est["forward"].items()] + [("forward_total", est["forward_total"]),
                                                              ("total (fwd+bwd)", est["total"])]
        payload = {"config": label, **est}
        if figures:
            plotting.plot_bars(list(est["forward"]), list(est["forward"].values()), out / "report_flops.png",
                               ylabel="forward FLOPs", title=f"FLOPs per {args.tokens} tokens")
    else:
        moe = cfg.moe
        rows = [
            (f"top-{moe.K} of {moe.N} (m=1)", combination_count(moe.N, moe.K)),
            (f"top-{moe.m * moe.K} of {moe.m * moe.N} (m={moe.m})", combination_count(moe.m * moe.N, moe.m * moe.K)),
            (f"top-{moe.k_routed} of {moe.n_routed} routed (K_s={moe.K_s})",
             combination_count(moe.n_routed, moe.k_routed)),
        ]
        payload = {"config": label, "combinations": [{"case": k, "count": v} for k, v in rows]}
        if figures:
            ms = [1, 2, 4, 8]
            logs = [math.log10(combination_count(m * moe.N, m * moe.K)) for m in ms]
            write_plot_data(out / "report_combinations.dat", "m", "log10_combinations", ms, logs)
            plotting.plot_sweep(ms, logs, out / "report_combinations.png", xlabel="segmentation factor m",
                                ylabel="log10 combinations")
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        shown = f"{v:,}" if isinstance(v, int) else f"{v:.6g}"
        print(f"{k:<{width}}  {shown}")
    path = out / f"report_{args.what}.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="finemoe", description="fine-grained MoE training, probes and accounting at toy scale")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    t.add_argument("--no-figures", action="store_true")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", help="expert-specialization probes and ablations")
    a.add_argument("probe", choices=["disable-top", "disable-shared", "vary-k", "ablate"])
    a.add_argument("--checkpoint")
    a.add_argument("--config")
    a.add_argument("--out", default="analysis")
    a.add_argument("--ratios")
    a.add_argument("--k")
    a.add_argument("--variants")
    a.add_argument("--no-figures", action="store_true")
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("report", help="parameter, FLOPs and combinatorics tables")
    r.add_argument("what", choices=["params", "flops", "combinations"])
    src = r.add_mutually_exclusive_group()
    src.add_argument("--config")
    src.add_argument("--preset", choices=PRESETS, default="validation-2B")
    r.add_argument("--tokens", type=int, default=2048)
    r.add_argument("--out", default=".")
    r.add_argument("--no-figures", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContractError, RoutingError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
