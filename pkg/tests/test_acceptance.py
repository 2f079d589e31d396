"""Acceptance criteria 1-14.

Criteria 1-8 are math and oracle checks that take seconds. Criteria 9-13 need
the trained desk model; it is built once under KELAB_ACCEPT_CACHE (default
~/.cache/kelab/acceptance/<config hash>) and reused. Set KELAB_ACCEPT_FRESH=1
to rebuild it. Criterion 14 runs the smoke pipeline twice.
"""

import csv
import json
import math
import os
import random
import shutil
from pathlib import Path

import numpy as np
import pytest
import torch

from kelab.cli import Run, run_stages
from kelab.config import RunConfig, smoke_config
from kelab.corpus import FactTriple, render_template
from kelab.editor import (
    KeyStats,
    apply_edit,
    compute_update,
    least_squares_update,
    make_plan,
    redundant_edit,
    solve_layer,
)
from kelab.errors import KelabError
from kelab.evaluator import next_token_probs
from kelab.metrics import composite_score, ngram_entropy, normalized_two_hop, overfit_pct, tfidf_consistency
from kelab.model import down_proj_name, init_model, param_diff
from kelab.trainer import build_examples, gradient_check, greedy_recall

from conftest import micro_config, randomized, record_criterion


def random_case(rng, with_cov=True):
    d_in, d_out = int(rng.integers(4, 65)), int(rng.integers(4, 65))
    W = rng.standard_normal((d_out, d_in))
    k, v = rng.standard_normal(d_in), rng.standard_normal(d_out)
    if not with_cov:
        return W, k, v, None
    a = rng.standard_normal((d_in, d_in + 4))
    C = a @ a.T / (d_in + 4)
    return W, k, v, KeyStats(0, C, d_in + 4, float(rng.uniform(1e-4, 1e-1)))


# math and oracle criteria ---------------------------------------------------

def test_criteria_1_2_rank_one_and_constraint():
    rng = np.random.default_rng(2024)
    worst_ratio = worst_resid = 0.0
    for _ in range(200):
        W, k, v, stats = random_case(rng)
        dw = compute_update(W, k, v, stats).delta_w
        s = np.linalg.svd(dw, compute_uv=False)
        worst_ratio = max(worst_ratio, s[1] / s[0])
        worst_resid = max(worst_resid, np.linalg.norm((W + dw) @ k - v) / np.linalg.norm(v))
    record_criterion(1, worst_ratio < 1e-5, f"rank-one: max sigma2/sigma1 = {worst_ratio:.2e} over 200 solves (< 1e-5)")
    record_criterion(2, worst_resid < 1e-4, f"constraint: max relative residual = {worst_resid:.2e} (< 1e-4)")
    assert worst_ratio < 1e-5
    assert worst_resid < 1e-4


def test_criterion_3_null_space():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        W, k, v, stats = random_case(rng)
        sol = compute_update(W, k, v, stats)
        u = np.linalg.solve(stats.regularized(), k)
        basis = [u / np.linalg.norm(u)]
        probes = []
        while len(probes) < min(10, k.size - 1):
            x = rng.standard_normal(k.size)
            for b in basis:
                x -= (b @ x) * b
            x /= np.linalg.norm(x)
            basis.append(x)
            probes.append(x)
        bound = 1e-9 * np.linalg.norm(sol.lambda_vec)
        for x in probes:
            worst = max(worst, np.linalg.norm(sol.delta_w @ x) / (bound * np.linalg.norm(x)))
    record_criterion(3, worst <= 1.0, f"null space: max |dW x| / (1e-9 |Lambda| |x|) = {worst:.3f} (<= 1)")
    assert worst <= 1.0


def test_criterion_4_identity_covariance_concordance():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        W, k, v, _ = random_case(rng, with_cov=False)
        a = compute_update(W, k, v, KeyStats(0, np.eye(k.size), 1, 0.0)).delta_w
        worst = max(worst, float(np.abs(a - least_squares_update(W, k, v)).max()))
    record_criterion(4, worst < 1e-8, f"C=I concordance: max entrywise gap = {worst:.2e} (< 1e-8)")
    assert worst < 1e-8


def test_criterion_5_overfit_arithmetic():
    expected = {(121, 125): 3.2, (85, 121): 29.8, (23, 52): 55.8}
    got = {pair: overfit_pct(*pair) for pair in expected}
    ok = all(abs(got[p] - expected[p]) <= 0.05 for p in expected)
    record_criterion(5, ok, "overfit: " + ", ".join(f"{p}->{got[p]:.2f}" for p in expected) + " (+-0.05)")
    assert ok


def test_criterion_6_normalization_arithmetic():
    a, b = normalized_two_hop(30.0, 48.2), normalized_two_hop(3.3, 20.9)
    ok = abs(a - 62.2) <= 0.1 and abs(b - 15.8) <= 0.1
    record_criterion(6, ok, f"normalization: (30.0,48.2)->{a:.2f}, (3.3,20.9)->{b:.2f} (+-0.1)")
    assert ok


def test_criterion_7_metric_oracles():
    # hand-enumerated: "a b a b a b" has bigrams ab x3, ba x2 and trigrams aba x2, bab x2
    ge = ngram_entropy("a b a b a b")
    h2 = -(0.6 * math.log2(0.6) + 0.4 * math.log2(0.4))
    entropy_ok = (ge.per_n[3] == 1.0 and abs(ge.per_n[2] - h2) < 1e-12
                  and ngram_entropy("a a a a a").value == 0.0
                  and ngram_entropy("a b a b a", n_values=(2,)).value == 1.0)

    docs = ["a b c", "a b", "a"]
    idf = {t: math.log(4 / (1 + df)) + 1 for t, df in {"a": 3, "b": 2, "c": 1}.items()}
    gen, ref = [idf["a"], 0.0, 2 * idf["c"]], [3 * idf["a"], 2 * idf["b"], idf["c"]]
    oracle = 100 * np.dot(gen, ref) / (np.linalg.norm(gen) * np.linalg.norm(ref))
    rs = tfidf_consistency("a c c", docs).value
    tfidf_ok = abs(rs - oracle) < 1e-6

    # a reported row: ES 100, PS 99.5, NS 76.3, RS 78.8 and S 90.9 give a fluency ratio of 99.9%
    s = composite_score(100.0, 99.5, 76.3, 99.9, 100.0, 78.8)
    score_ok = abs(s - 90.9) < 0.05

    ok = entropy_ok and tfidf_ok and score_ok
    record_criterion(7, ok, f"metrics: H3(abab..)={ge.per_n[3]:.6f} H2={ge.per_n[2]:.6f} (enumerated {h2:.6f}); "
                            f"tfidf {rs:.8f} vs {oracle:.8f}; S={s:.3f}")
    assert ok


@pytest.mark.xfail(strict=True, reason="overlapping windows give bigram counts 3:2, not 1:1; see decisions ledger")
def test_criterion_7_alternating_stream_literal_one_bit():
    assert ngram_entropy("a b a b a b").value == 1.0


def test_criterion_8_gradient_check():
    model = randomized(init_model(micro_config(n_layers=1)), scale=0.3)
    examples = [([1, 2, 3], 4), ([5, 6, 7, 8], 9), ([10, 11], 3), ([2, 2, 6], 1)]
    records = gradient_check(model, examples, n_params=20, seed=3)
    worst = max(r["rel_err"] for r in records)
    record_criterion(8, worst < 1e-3, f"gradient check: max relative error {worst:.2e} over 20 parameters (< 1e-3)")
    assert len(records) == 20 and worst < 1e-3


# desk-scale criteria ----------------------------------------------------------

def _cache_root() -> Path:
    return Path(os.environ.get("KELAB_ACCEPT_CACHE", Path.home() / ".cache" / "kelab" / "acceptance"))


@pytest.fixture(scope="session")
def desk() -> Run:
    cfg = RunConfig()
    cfg = cfg.with_run_dir(_cache_root() / cfg.hash)
    root = Path(cfg.run_dir)
    if os.environ.get("KELAB_ACCEPT_FRESH") == "1" and root.exists():
        shutil.rmtree(root)
    if not (root / "checkpoints" / "base.ckpt").exists():
        run_stages(cfg, ["gen-corpus", "train"])
    return Run(cfg)


@pytest.fixture(scope="session")
def desk_sweep(desk) -> Run:
    if not (desk.root / "report" / "trends.md").exists():
        run_stages(desk.cfg, ["analyze", "sweep", "report"])
    return desk


@pytest.mark.slow
def test_criterion_9_training_recall(desk):
    report = json.loads((desk.root / "checkpoints" / "train_report.json").read_text())
    graph, vocab = desk.graph(), desk.vocab()
    recall = greedy_recall(desk.base(), build_examples(graph, vocab).recall_single)
    ok = recall >= 0.99 and len(graph.triples) == 200 and report["epochs_run"] <= desk.cfg.train.epochs
    record_criterion(9, ok, f"training: single-hop recall {100 * recall:.2f}% on {len(graph.triples)} facts "
                            f"after {report['epochs_run']}/{desk.cfg.train.epochs} epochs (>= 99%)")
    assert ok


@pytest.mark.slow
def test_criterion_10_edit_efficacy(desk):
    graph, vocab, base = desk.graph(), desk.vocab(), desk.base()
    layer = desk.cfg.edit.layers[0]
    stats = desk.key_stats(base, graph, vocab, [layer])
    rng = random.Random(10)
    wins, failures = 0, 0
    for fact in rng.sample(graph.triples, 100):
        rel = graph.relation(fact.r)
        pool = sorted({t.o for t in graph.triples if t.r == fact.r} - {fact.o})
        target = FactTriple(fact.s, fact.r, fact.o, rng.choice(pool))
        try:
            edited, _ = redundant_edit(base, make_plan(target, rel.canonical, rel.paraphrases, [layer]), stats, vocab,
                                       desk.cfg.edit.solve_config())
        except KelabError:
            failures += 1
            continue
        p = next_token_probs(edited, render_template(rel.canonical, fact.s), vocab)
        wins += bool(p[vocab.id(target.o_star)] > p[vocab.id(fact.o)])
    record_criterion(10, wins >= 95, f"edit efficacy at layer {layer}: {wins}/100 edits with P(o*) > P(o^c), "
                                     f"{failures} solve failures (>= 95%)")
    assert wins >= 95


@pytest.mark.slow
def test_criterion_11_redundant_reduction(desk):
    graph, vocab, base = desk.graph(), desk.vocab(), desk.base()
    layers = [1, 3, 5, 7]
    stats = desk.key_stats(base, graph, vocab, layers)
    inst = desk.instances(graph)[0]
    solve = desk.cfg.edit.solve_config()

    def plan(ls):
        return make_plan(inst.edit_fact, inst.edit_template, inst.edit_paraphrases, ls)

    single, _ = redundant_edit(base, plan([1]), stats, vocab, solve)
    direct = apply_edit(base, solve_layer(base, plan([1]), 1, stats[1], vocab, solve))
    reduction = param_diff(single, direct) == {} and all(torch.equal(single[k], direct[k]) for k in single.params)

    multi, _ = redundant_edit(base, plan(layers), stats, vocab, solve)
    independent = set(param_diff(base, multi)) == {down_proj_name(x) for x in layers}
    for layer in layers:
        alone, _ = redundant_edit(base, plan([layer]), stats, vocab, solve)
        independent &= torch.equal(alone.down_proj(layer), multi.down_proj(layer))
    ok = reduction and independent
    record_criterion(11, ok, f"redundant edit: single-layer plan == apply_edit ({reduction}); per-layer dW in "
                            f"{layers} bitwise equal to solo edits ({independent})")
    assert ok


def _read_csv(path: Path) -> list[dict]:
    with path.open(encoding="utf-8") as f:
        return list(csv.DictReader(line for line in f if not line.startswith("#")))


def _read_jsonl(path: Path) -> list[dict]:
    lines = path.read_text(encoding="utf-8").splitlines()
    return [json.loads(x) for x in lines[1:]]


@pytest.mark.slow
def test_criterion_12_ablation_monotonicity(desk_sweep):
    records = [r for r in _read_jsonl(desk_sweep.root / "analysis" / "sweep_records.jsonl") if r["table"] == "overfit"]
    standalone = _read_jsonl(desk_sweep.root / "analysis" / "overfit_records.jsonl")
    by_row: dict[str, list[dict]] = {}
    for r in records:
        by_row.setdefault(r["row"], []).append(r)
    rows = _read_csv(desk_sweep.root / "analysis" / "sweep.csv")
    violations = sum(r["correct_org"] and not r["correct_abl"] for r in records + standalone if not r["conflict"])
    counts_ok = all(int(row["c_abl"]) >= int(row["c_org"]) for row in rows)
    recount_ok = all(
        int(row["c_org"]) == sum(r["correct_org"] for r in by_row[row["layers"]] if not r["conflict"])
        and int(row["c_abl"]) == sum(r["correct_abl"] for r in by_row[row["layers"]] if not r["conflict"])
        for row in rows)
    ok = violations == 0 and counts_ok and recount_ok and len(by_row) == len(rows) and bool(standalone)
    record_criterion(12, ok, f"ablation: {len(records) + len(standalone)} instance records over {len(rows)} layer sets, "
                            f"{violations} violations, c_abl >= c_org in every row ({counts_ok})")
    assert ok


@pytest.mark.slow
def test_criterion_13_directional_series(desk_sweep):
    root = desk_sweep.root
    sets = [",".join(map(str, s)) for s in desk_sweep.cfg.sweep.layer_sets]
    rows = {r["layers"]: r for r in _read_csv(root / "analysis" / "sweep.csv")}
    tradeoff = _read_csv(root / "report" / "plot_tradeoff.csv")
    by_layer = _read_csv(root / "report" / "plot_generalization_by_layer.csv")
    records = _read_jsonl(root / "analysis" / "sweep_records.jsonl")
    trends = json.loads((root / "report" / "trends.json").read_text())["trends"]
    notes = (root / "report" / "trends.md").read_text()

    singles = [s for s in sets if "," not in s]
    checks = {
        "all rows present": set(rows) == set(sets) and all(not rows[s]["error"] for s in sets),
        "trade-off series": {r["layers"] for r in tradeoff} == set(sets),
        "generalization by layer": {(r["layer"], r["scenario"]) for r in by_layer}
        == {(s, sc) for s in singles for sc in ("edit-hop1", "edit-hop2")},
        "single-layer hop1/hop2 2HQ": all(rows[s]["hop1_edit_2hq"] != "" and rows[s]["hop2_edit_2hq"] != "" for s in singles),
        "per-instance records": all({"hop", "overfit", "language", "persistence"} <= {r["table"] for r in records if r["row"] == s}
                                    for s in sets),
        "trend notes": all(t in trends for t in ("generalization_decay", "hop_order_asymmetry", "redundant_beats_single"))
        and all(t in notes for t in ("Generalization decay", "Hop-order asymmetry", "Redundant editing")),
    }
    observed = {k: v.get("observed") for k, v in trends.items()}
    ok = all(checks.values())
    record_criterion(13, ok, f"sweep series emitted ({sum(checks.values())}/{len(checks)} checks); "
                            f"trends observed (reported, not enforced): {observed}")
    assert ok, checks


@pytest.mark.slow
def test_criterion_14_smoke_determinism(tmp_path):
    outputs = []
    for name in ("first", "second"):
        cfg = smoke_config(tmp_path / name)
        run_stages(cfg, ["gen-corpus", "train", "edit", "eval", "analyze", "sweep", "report"])
        root = Path(cfg.run_dir)
        # config.yaml records its own run directory, so it is the one file allowed to differ
        outputs.append({p.relative_to(root).as_posix(): p.read_bytes()
                        for p in sorted(root.rglob("*")) if p.is_file() and p.name != "config.yaml"})
    first, second = outputs
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    reports = [k for k in first if k.startswith("report/")]
    covered = {k.split("/")[0] for k in first}
    ok = not differing and len(reports) >= 5 and {"report", "analysis", "eval"} <= covered
    record_criterion(14, ok, f"determinism: {len(first)} files incl. {len(reports)} reports compared, "
                            f"{len(differing)} differ {differing[:3]}")
    assert ok
