import numpy as np
import pytest
import torch

from kelab.analyzer import (
    SweepOptions,
    cosine,
    curve_from_ranks,
    key_similarity_profile,
    layer_sweep,
    overfit_analysis,
    similarity_pairs,
    token_rank,
    topk_persistence,
)
from kelab.corpus import make_counterfact_cases, render_template
from kelab.editor import ValueSolveConfig, covariance_texts, estimate_covariances
from kelab.errors import InputError
from kelab.evaluator import (
    _compare,
    CaseRecord,
    LanguageMetricsReport,
    efficacy_score,
    eval_hop_accuracies,
    hop_prompts,
    language_metrics,
    neighborhood_score,
    next_token_probs,
    paraphrase_score,
)
from kelab.model import ModelConfig, forward, init_model

from conftest import randomized


@pytest.fixture(scope="module")
def world(small_graph):
    vocab = small_graph.vocab()
    cfg = ModelConfig(n_layers=2, d_model=16, d_mlp=32, n_heads=2, vocab_size=len(vocab), max_seq_len=96)
    model = randomized(init_model(cfg), scale=0.4, seed=1)
    cases = make_counterfact_cases(small_graph, 6, seed=0)
    return small_graph, vocab, model, cases


def softmax_oracle(model, vocab, prompt):
    logits = forward(model, vocab.encode(prompt))[0].double().numpy()
    e = np.exp(logits - logits.max())
    return e / e.sum()


def test_probability_scores_match_softmax_oracle(world):
    _, vocab, model, cases = world
    np.testing.assert_allclose(next_token_probs(model, "Q:", vocab).numpy(), softmax_oracle(model, vocab, "Q:"), atol=1e-12)
    es, ps, ns = efficacy_score(model, cases, vocab), paraphrase_score(model, cases, vocab), neighborhood_score(model, cases, vocab)
    expect_es = expect_ps = expect_ns = 0
    for c in cases:
        new, old = vocab.id(c.fact.o_star), vocab.id(c.fact.o)
        p = softmax_oracle(model, vocab, render_template(c.prompts.canonical, c.fact.s))
        expect_es += p[new] > p[old]
        for t in c.prompts.paraphrases:
            p = softmax_oracle(model, vocab, render_template(t, c.fact.s))
            expect_ps += p[new] > p[old]
        for _, text in c.prompts.neighbors:
            p = softmax_oracle(model, vocab, text)
            expect_ns += p[old] > p[new]
    assert (es.successes, ps.successes, ns.successes) == (expect_es, expect_ps, expect_ns)
    assert es.trials == len(cases) and ps.trials == 3 * len(cases)
    assert ns.percent == pytest.approx(100 * expect_ns / ns.trials)


def test_same_object_is_a_case_error(world):
    _, vocab, model, cases = world
    with pytest.raises(InputError):
        _compare(model, vocab, [(0, "Q:", "A:", "A:")], prefer_new=True)


def test_hop_accuracy_recount(world):
    graph, vocab, model, _ = world
    for scenario in ("edit-hop1", "edit-hop2"):
        hop = "hop1" if scenario == "edit-hop1" else "hop2"
        insts = [i for i in graph.two_hop if i.edited_hop == hop]
        rep = eval_hop_accuracies(model, insts, scenario, vocab, graph.context_prefix)
        assert len(rep.records) == 3 * len(insts) and rep.n_instances == len(insts)
        for kind, acc in (("edited_hop", rep.edited_hop_acc), ("unedited_hop", rep.unedited_hop_acc),
                          ("two_hop", rep.two_hop_acc)):
            rows = [r for r in rep.records if r.kind == kind]
            assert acc == sum(r.decoded == r.gold for r in rows) / len(rows)
    with pytest.raises(InputError):
        eval_hop_accuracies(model, graph.two_hop, "edit-hop1", vocab)


def test_hop_prompts_route_through_new_bridge(small_graph):
    inst = next(i for i in small_graph.two_hop if i.edited_hop == "hop1")
    qs = hop_prompts(inst, small_graph.context_prefix)
    assert inst.hop1.o_star in qs["unedited_hop"][0].split()
    assert qs["edited_hop"] == (render_template(inst.hop1_paraphrases[0], inst.hop1.s), inst.hop1.o_star)
    assert qs["two_hop"][0].startswith(small_graph.context_prefix)
    pre = hop_prompts(inst, "", post_edit=False)
    assert pre["two_hop"][1] == inst.two_hop_answer_pre


def test_language_report_pools_trials():
    recs = [CaseRecord(0, 1, 1, 3, 2, 2, 2.0, 4.0, 50.0), CaseRecord(1, 0, 3, 3, 0, 4, 4.0, 4.0, 70.0)]
    rep = LanguageMetricsReport.from_records(recs)
    assert (rep.ES, rep.PS, rep.NS) == (50.0, pytest.approx(400 / 6), pytest.approx(200 / 6))
    assert rep.fluency == 75.0 and rep.RS == 60.0
    assert rep.S == pytest.approx((50 + 400 / 6 + 200 / 6 + 75 + 60) / 5)
    assert "fluency_component" in rep.summary()


def test_language_metrics_on_unedited_model(world):
    _, vocab, model, cases = world
    rep = language_metrics(lambda c: model, model, cases[:2], vocab, n_tokens=8)
    assert rep.GE_edited == pytest.approx(rep.GE_base) and rep.fluency == pytest.approx(100.0)
    assert all(len(r.generations[0].split()) == 8 for r in rep.records)
    assert rep.ES == efficacy_score(model, cases[:2], vocab).percent


@pytest.mark.parametrize("seed", range(4))
def test_ablation_never_reduces_correct(small_graph, seed):
    vocab = small_graph.vocab()
    cfg = ModelConfig(n_layers=1, d_model=8, d_mlp=16, n_heads=2, vocab_size=len(vocab), max_seq_len=96)
    model = randomized(init_model(cfg), scale=1.0, seed=seed)
    hop1 = [i for i in small_graph.two_hop if i.edited_hop == "hop1"]
    rep = overfit_analysis(model, hop1, vocab, small_graph.context_prefix)
    assert rep.c_abl >= rep.c_org and rep.violations == 0
    assert rep.c_org == sum(r.correct_org for r in rep.records if not r.conflict)
    with pytest.raises(InputError):
        overfit_analysis(model, [i for i in small_graph.two_hop if i.edited_hop == "hop2"], vocab)


def test_rank_and_persistence(world):
    _, vocab, model, cases = world
    probs = torch.tensor([0.1, 0.4, 0.4, 0.1])
    assert token_rank(probs, 1) == 1 and token_rank(probs, 2) == 1 and token_rank(probs, 0) == 3
    curve = curve_from_ranks([1, 3, 3, 12], K=5)
    assert curve.values == [0.25, 0.25, 0.75, 0.75, 0.75] and curve.at(99) == 0.75
    edits = [(render_template(c.prompts.canonical, c.fact.s), c.fact.o) for c in cases]
    live = topk_persistence(model, edits, 10, vocab)
    assert all(a <= b for a, b in zip(live.values, live.values[1:]))
    assert topk_persistence(model, edits, len(vocab), vocab).values[-1] == 1.0
    with pytest.raises(InputError):
        curve_from_ranks([1], 0)


def test_key_similarity(world):
    graph, vocab, model, _ = world
    assert cosine(np.zeros(3), np.ones(3)) is None
    assert cosine(np.ones(3), 2 * np.ones(3)) == pytest.approx(1.0)
    same = [(p, p, s) for p, _, s in similarity_pairs(graph, graph.two_hop[:3])]
    prof = key_similarity_profile(model, same, [0, 1], vocab)
    assert prof.similarities == pytest.approx([1.0, 1.0])
    real = key_similarity_profile(model, similarity_pairs(graph, graph.two_hop), [1, 0], vocab)
    assert real.layers == [0, 1] and all(-1 <= s <= 1 for s in real.similarities)
    with pytest.raises(InputError):
        key_similarity_profile(model, same, [2], vocab)


def test_sweep_keeps_going_when_edits_fail(world):
    graph, vocab, model, cases = world
    stats = estimate_covariances(model, [0, 1], covariance_texts(graph, 100), vocab=vocab)
    options = SweepOptions(K=3, solve=ValueSolveConfig(max_steps=2, target_loss=1e-9), n_generation_tokens=6)
    result = layer_sweep(model, graph, [[0]], graph.two_hop[:4], cases[:2], stats, vocab, options)
    [row] = result.rows
    assert row.error is None and row.summary()["edit_failures"] == 6
    assert {r["table"] for r in row.instance_records()} >= {"hop", "language", "persistence", "edit_failure"}
    assert set(result.plot_data()) == {"tradeoff", "key_similarity", "generalization_by_layer",
                                      "normalized_two_hop", "persistence"}
    assert set(result.trends()) == {"generalization_decay", "hop_order_asymmetry", "redundant_beats_single"}
    with pytest.raises(InputError):
        layer_sweep(model, graph, [[2]], graph.two_hop[:1], [], stats, vocab, options)


def test_degenerate_baseline_gives_undefined_score():
    rep = LanguageMetricsReport.from_records([CaseRecord(0, 1, 1, 1, 1, 1, 0.0, 0.0, 10.0)])
    assert np.isnan(rep.S) and np.isnan(rep.fluency) and rep.ES == 100.0
