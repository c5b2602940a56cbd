"""The ten acceptance criteria at their stated tolerances and time budgets.

Each test records a one-line verdict that the terminal summary prints.
"""

import contextlib
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from finemoe.analysis import disable_shared, disable_top_routed, flops_estimate, vary_activated
from finemoe.balance import BalanceStats, device_balance_loss, expert_balance_loss
from finemoe.model import MoETransformer, ModelConfig, preset
from finemoe.moe import MoEConfig, combination_count, count_params, init_moe, moe_forward
from finemoe.tensor import Tensor, finite_diff_grad
from finemoe.train import TrainConfig, lr_schedule

import conftest
from conftest import ACCEPTANCE_RESULTS, rel_err
from reference import generic_moe, triples


class Verdict:
    def __init__(self):
        self.detail = ""


@contextlib.contextmanager
def criterion(n, name, budget_s):
    v = Verdict()
    t0 = time.perf_counter()
    try:
        yield v
    except BaseException as e:
        ACCEPTANCE_RESULTS[n] = (name, False, f"{type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}")
        raise
    elapsed = time.perf_counter() - t0 + getattr(v, "extra_time", 0.0)
    ok = elapsed < budget_s
    ACCEPTANCE_RESULTS[n] = (name, ok, f"{v.detail} ({elapsed:.2f}s, budget {budget_s:g}s)")
    assert ok, f"criterion {n} took {elapsed:.2f}s > {budget_s}s"


def random_layer(cfg, rng, std=0.5):
    return init_moe(cfg, lambda name, shape: Tensor(rng.normal(0, std, shape), requires_grad=True))


def test_01_routing_sparsity():
    with criterion(1, "routing sparsity", 1.0) as v:
        rng = np.random.default_rng(0)
        checked = 0
        for m in (1, 2, 4):
            for K_s in (0, 1, 2):
                for _ in range(3):
                    K = int(rng.integers(1, 3))
                    if m * K < K_s:
                        continue
                    N = int(rng.integers(K + 1, 6))
                    d = int(rng.integers(2, 7))
                    cfg = MoEConfig(d=d, N=N, m=m, K=K, K_s=K_s, base_ffn_inner=8 * m)
                    if cfg.n_routed < cfg.k_routed or cfg.k_routed == 0:
                        continue
                    experts, router = random_layer(cfg, rng)
                    _, dec = moe_forward(Tensor(rng.normal(size=(7, d))), cfg, experts, router)
                    assert np.all(dec.nonzero_gates_per_token() == m * K - K_s)
                    checked += 1
        assert checked >= 20
        v.detail = f"{checked} random layers, nonzero gates == mK - K_s for every token"


def test_02_reduction_equivalence():
    with criterion(2, "reduction equivalence", 5.0) as v:
        rng = np.random.default_rng(1)
        worst = 0.0
        for trial in range(100):
            m = 1 if trial < 50 else int(rng.choice([2, 4]))
            cfg = MoEConfig(d=5, N=4, m=m, K=2, K_s=0, base_ffn_inner=16)
            experts, router = random_layer(cfg, rng)
            u = rng.normal(size=(6, 5))
            h, _ = moe_forward(Tensor(u), cfg, experts, router)
            ref = generic_moe(u, router.centroids.data, triples(experts.routed), m * cfg.K)
            worst = max(worst, float(np.max(np.abs(h.data - ref))))
        assert worst <= 1e-12
        v.detail = f"100 inputs (m=1 and m in {{2,4}}, K_s=0), max abs diff {worst:.1e}"


def test_03_gradient_fidelity():
    with criterion(3, "gradient fidelity", 60.0) as v:
        moe = MoEConfig(d=8, N=4, m=2, K=2, K_s=1, base_ffn_inner=16, D=2, alpha1=0.1, alpha2=0.2,
                        device_groups=((0, 1, 2), (3, 4, 5, 6)))
        cfg = ModelConfig(L=1, d=8, heads=2, head_dim=4, vocab=11, seq_len=4, moe=moe, init_std=0.3)
        model = MoETransformer(cfg, seed=3)
        rng = np.random.default_rng(3)
        tokens, targets = rng.integers(0, 11, size=(2, 4)), rng.integers(0, 11, size=(2, 4))

        def loss(_=None):
            lb = model.loss(tokens, targets)
            assert lb.expbal.item() > 0 and lb.devbal.item() > 0
            return lb.total

        model.zero_grad()
        loss().backward()
        worst, worst_name = 0.0, None
        for name, p in model.params.items():
            err = rel_err(p.grad, finite_diff_grad(loss, p, 1e-5))
            if err > worst:
                worst, worst_name = err, name
        assert worst <= 1e-4, f"{worst_name}: rel err {worst:.2e}"
        v.detail = f"{len(model.params)} tensors, worst rel err {worst:.1e} ({worst_name})"


def test_04_balance_closed_forms():
    with criterion(4, "balance-loss closed forms", 1.0) as v:
        uniform = BalanceStats.from_counts([1, 1, 1, 1], Tensor(np.full((4, 4), 0.25)), k_routed=1)
        e = expert_balance_loss(uniform, 0.01).item()
        dv = device_balance_loss(uniform, [[0, 1], [2, 3]], 0.05).item()
        assert abs(e - 0.01) <= 1e-12 and abs(dv - 0.05) <= 1e-12
        collapse = BalanceStats.from_counts([4, 0, 0, 0], Tensor(np.tile([0.7, 0.1, 0.1, 0.1], (4, 1))), k_routed=1)
        c = expert_balance_loss(collapse, 0.01).item()
        assert abs(c - 0.01 * 2.8) <= 1e-12
        v.detail = f"uniform expbal {e:.15g}, devbal {dv:.15g}; collapse {c:.15g}"


def test_05_combinatorics():
    with criterion(5, "combinatorics", 1.0) as v:
        a, b = combination_count(16, 2), combination_count(64, 8)
        assert a == 120 and b == 4_426_165_368
        v.detail = f"C(16,2)={a}, C(64,8)={b:,}"


def test_06_accounting():
    with criterion(6, "accounting", 1.0) as v:
        cfg = preset("validation-2B")
        c = count_params(cfg.moe)
        assert c["activated_expert"] == 2 * c["standard_ffn"]
        assert c["total_expert"] == 16 * c["standard_ffn"]
        total = flops_estimate(cfg, 2048)["total"]
        assert abs(total / 4.3e12 - 1) <= 0.15
        v.detail = f"activated = 2x FFN, total = 16x FFN; FLOPs {total / 1e12:.2f}T vs 4.3T"


def test_07_schedule():
    with criterion(7, "lr schedule", 1.0) as v:
        cfg = TrainConfig(max_lr=1.08e-3, warmup_steps=2000, total_steps=25000)
        got = [lr_schedule(s, cfg) for s in (1000, 21000, 23000)]
        want = [5.4e-4, 3.4128e-4, 1.08e-3 * 0.316**2]
        assert all(abs(g - w) <= 1e-9 for g, w in zip(got, want))
        assert abs(got[2] - 1.0784e-4) <= 1e-8
        v.detail = ", ".join(f"{g:.6g}" for g in got)


@pytest.mark.slow
def test_08_toy_training(desk_runs):
    with criterion(8, "toy training", 300.0) as v:
        v.extra_time = conftest.TIMINGS["desk_runs"]
        run = desk_runs[0.01].summary
        drop = run["initial_eval"]["lm_loss"] - run["final_eval"]["lm_loss"]
        cv_bal = run["final_eval"]["load_cv"]
        cv_free = desk_runs[0.0].summary["final_eval"]["load_cv"]
        assert drop >= 0.5
        assert cv_bal < cv_free
        v.detail = f"loss drop {drop:.2f} nats; load CV {cv_bal:.3f} (a1=0.01) < {cv_free:.3f} (a1=0)"


@pytest.mark.slow
def test_09_specialization_probes(trained_desk, desk_corpus):
    with criterion(9, "specialization probes", 120.0) as v:
        windows = desk_corpus.eval_windows(trained_desk.cfg.seq_len)
        top = disable_top_routed(trained_desk, windows, [0.0, 0.25, 0.5]).losses
        shared = disable_shared(trained_desk, windows)
        ks = vary_activated(trained_desk, windows, [1, 2, 3]).losses
        assert top[0] < top[1] < top[2]
        assert shared.losses[0] > shared.baseline_loss
        assert ks[0] >= ks[1] >= ks[2]
        v.detail = (f"disable-top {[round(x, 4) for x in top]}; shared off {shared.losses[0]:.4f} > "
                    f"{shared.baseline_loss:.4f}; vary-k {[round(x, 4) for x in ks]}")


@pytest.mark.slow
def test_10_determinism(tmp_path):
    with criterion(10, "determinism", 300.0) as v:
        config = tmp_path / "desk.json"
        config.write_text(json.dumps({
            "schema_version": 1, "model": {"preset": "desk"},
            "train": {"total_steps": 200, "seed": 0},
            "corpus": {"synthetic": {"n_tokens": 40000, "seed": 0}},
        }))
        outs = []
        for name in ("a", "b"):
            proc = subprocess.run([sys.executable, "-m", "finemoe", "train", "--config", str(config),
                                   "--out", str(tmp_path / name), "--no-figures"], capture_output=True, text=True)
            assert proc.returncode == 0, proc.stderr
            outs.append((tmp_path / name / "metrics.csv").read_bytes())
        assert outs[0] == outs[1]
        v.detail = f"two CLI runs, {len(outs[0].splitlines()) - 1} metric rows byte-identical"
