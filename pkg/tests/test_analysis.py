import json

import numpy as np
import pytest

from finemoe.analysis import (VARIANTS, ProbeReport, ablation_matrix, check_budgets, disable_shared,
                              disable_top_routed, flops_estimate, vary_activated, variant_config, write_ablation)
from finemoe.errors import ConfigError, ContractError, RoutingError
from finemoe.model import MoETransformer, ModelConfig, preset
from finemoe.moe import MoEConfig, RouteOptions
from finemoe.train import TrainConfig, evaluate, train

from reference import DenseReferenceModel


@pytest.fixture(scope="module")
def windows(desk_corpus):
    return desk_corpus.eval_windows(preset("desk").seq_len)


def test_probes_reproduce_baseline_exactly(trained_desk, windows):
    base = evaluate(trained_desk, windows)["lm_loss"]
    top = disable_top_routed(trained_desk, windows, [0.0])
    assert top.losses == [base] and top.baseline_loss == base
    k = trained_desk.cfg.moe.k_routed
    vk = vary_activated(trained_desk, windows, [k])
    assert vk.losses == [base]


def test_probes_are_read_only(trained_desk, windows):
    before = trained_desk.state_dict()
    disable_top_routed(trained_desk, windows, [0.0, 0.5])
    disable_shared(trained_desk, windows)
    vary_activated(trained_desk, windows, [1, 3])
    for k, v in trained_desk.state_dict().items():
        assert v.tobytes() == before[k].tobytes()


def test_masking_is_per_token(trained_desk, windows):
    res = trained_desk.forward(windows[:2, :-1], RouteOptions(mask_top=1))
    for dec in res.decisions:
        top = np.argmax(dec.s.data, axis=1)
        assert len(set(top.tolist())) > 1
        assert not np.any(dec.selected == top[:, None])


def test_probe_domain_errors(trained_desk, windows):
    with pytest.raises(RoutingError):
        disable_top_routed(trained_desk, windows, [0.9])
    with pytest.raises(ContractError):
        disable_top_routed(trained_desk, windows, [1.0])
    with pytest.raises(ValueError):
        vary_activated(trained_desk, windows, [0])
    no_shared = MoETransformer(preset("desk").replace_moe(K_s=0), 0)
    with pytest.raises(ConfigError):
        disable_shared(no_shared, windows)


def test_disable_shared_conserves_activated_count(trained_desk, windows):
    rep = disable_shared(trained_desk, windows)
    moe = trained_desk.cfg.moe
    assert rep.extra["nonzero_gates_per_token"] == [moe.m * moe.K]


def test_zero_weight_shared_expert_is_vacuous(windows):
    model = MoETransformer(preset("desk"), 0)
    for lp in model.layers:
        for p in lp.experts.shared:
            p.w_out.data[...] = 0.0
    moe = model.cfg.moe
    same_k = evaluate(model, windows, RouteOptions(k_routed=moe.k_routed + moe.K_s))["lm_loss"]
    rep = disable_shared(model, windows)
    assert abs(rep.losses[0] - same_k) < 1e-9
    without = evaluate(model, windows, RouteOptions(disable_shared=True, k_routed=moe.k_routed))["lm_loss"]
    assert abs(without - rep.baseline_loss) < 1e-9


def test_vary_activated_one_entry_per_k(trained_desk, windows):
    rep = vary_activated(trained_desk, windows, [3, 1, 2])
    assert rep.values == [1.0, 2.0, 3.0] and len(rep.losses) == 3


def test_probe_report_write(tmp_path):
    rep = ProbeReport("p", "x", [0.5, 0.0], [2.0, 1.0], 1.0)
    assert rep.values == [0.0, 0.5] and rep.losses == [1.0, 2.0]
    paths = rep.write(tmp_path, figure=True)
    assert json.loads(paths["json"].read_text())["values"] == [0.0, 0.5]
    lines = paths["data"].read_text().splitlines()
    assert lines[0] == "# x\teval_loss" and lines[1] == "0.0\t1.0"
    assert paths["figure"].stat().st_size > 0
    with pytest.raises(ContractError):
        ProbeReport("p", "x", [1.0], [], 0.0)


def test_variant_budgets_are_equal():
    base = preset("desk")
    rows = check_budgets({v: variant_config(base, v) for v in VARIANTS})
    assert len({r["total_expert"] for r in rows.values()}) == 1
    assert len({r["activated_expert"] for r in rows.values()}) == 1
    assert rows["gshard-top2"]["n_routed"] == 8 and rows["ratio-4-shared"]["n_routed"] == 28
    assert variant_config(base, "×4-segmentation") == variant_config(base, "x4-segmentation")


def test_unequal_budgets_rejected():
    base = preset("desk")
    bad = {"a": variant_config(base, "gshard-top2"), "b": variant_config(base, "gshard-top2", k_base=3)}
    with pytest.raises(ConfigError):
        check_budgets(bad)
    with pytest.raises(ConfigError):
        variant_config(base, "top-3")


def test_variants_share_embedding_and_attention_init():
    base = preset("desk")
    a = MoETransformer(variant_config(base, "gshard-top2"), 4)
    b = MoETransformer(variant_config(base, "ratio-4-shared"), 4)
    shared = [k for k in a.params if ".moe." not in k]
    assert "tok_emb" in shared and "layers.1.attn.wq" in shared
    for k in shared:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes(), k


def test_gshard_variant_matches_generic_moe_step_for_step(desk_corpus):
    cfg = variant_config(preset("desk"), "gshard-top2")
    tc = TrainConfig(total_steps=4, warmup_steps=1, batch_tokens=64)
    a = train(MoETransformer(cfg, 2), desk_corpus, tc)
    b = train(DenseReferenceModel(cfg, 2), desk_corpus, tc)
    for ma, mb in zip(a.metrics, b.metrics):
        assert abs(ma["lm_loss"] - mb["lm_loss"]) < 1e-9
        assert abs(ma["expbal"] - mb["expbal"]) < 1e-9
    for k in a.model.params:
        np.testing.assert_allclose(a.model.params[k].data, b.model.params[k].data, rtol=0, atol=1e-9)


def test_ablation_matrix_rows(desk_corpus, tmp_path):
    tc = TrainConfig(total_steps=2, warmup_steps=1, batch_tokens=64, eval_tokens=256)
    table = ablation_matrix(desk_corpus, ["gshard-top2", "x4-segmentation"], preset("desk"), tc)
    assert [r["variant"] for r in table] == ["gshard-top2", "x4-segmentation"]
    assert table[0]["total_params"] > 0 and table[0]["activated_expert"] == table[1]["activated_expert"]
    paths = write_ablation(table, tmp_path)
    assert len(paths["data"].read_text().splitlines()) == 3


def test_flops_zero_layers_by_hand():
    cfg = ModelConfig(L=0, d=4, heads=1, head_dim=4, vocab=10, seq_len=8, moe=MoEConfig(d=4, N=2, K=1, base_ffn_inner=8))
    est = flops_estimate(cfg, 8)
    assert est["forward_total"] == 8 * (2 * 10 * 4 + 2 * 4 * 10)
    assert est["total"] == 3 * est["forward_total"]


def test_flops_scaling():
    cfg = preset("desk")
    one, two = flops_estimate(cfg, 64), flops_estimate(cfg, 128)
    for k, v in one["forward"].items():
        if k != "attention_scores":
            assert two["forward"][k] == 2 * v
    assert two["forward"]["attention_scores"] == 2 * one["forward"]["attention_scores"]
    short, double = flops_estimate(cfg, 8), flops_estimate(cfg, 16)
    assert double["forward"]["attention_scores"] == 4 * short["forward"]["attention_scores"]


def test_flops_validation_preset():
    total = flops_estimate(preset("validation-2B"), 2048)["total"]
    assert abs(total / 4.3e12 - 1) <= 0.15
