"""Failure-pattern analyses: key drift across layers, overfitting to the
edited hop, persistence of the original object, and layer-set sweeps."""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterable, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .corpus import CounterfactCase, FactGraph, TwoHopInstance, render_template
from .decoding import greedy_decode
from .editor import KeyStats, ValueSolveConfig, make_plan, redundant_edit, subject_keys
from .errors import InputError, KelabError
from .evaluator import (
    CaseRecord,
    HopAccuracyReport,
    HopRecord,
    LanguageMetricsReport,
    base_entropies,
    evaluate_case,
    hop_prompts,
    idf_corpus_of,
    next_token_probs,
    scenario_of,
)
from .metrics import normalized_two_hop, overfit_pct
from .model import ModelState
from .tokenizer import Vocab

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


# key similarity -------------------------------------------------------------

@dataclass
class KeySimilarityProfile:
    layers: list[int]
    similarities: list[float]
    sample_count: int
    skipped: dict[int, int] = field(default_factory=dict)
    pairs: list[tuple[str, str, str]] = field(default_factory=list)
    per_pair: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.layers, self.similarities))


def cosine(a: np.ndarray, b: np.ndarray) -> float | None:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        return None
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def key_similarity_profile(model: ModelState, pairs: Sequence[tuple[str, str, str]], layers: Iterable[int],
                           vocab: Vocab | None = None) -> KeySimilarityProfile:
    """Mean cosine between subject keys of a prompt and its paraphrase, per layer.

    ``pairs`` holds ``(prompt, paraphrase, subject)``. Pairs with a zero-norm
    key at some layer are skipped for that layer only.
    """
    layers = sorted(set(layers))
    if not pairs:
        raise InputError("need at least one prompt pair")
    if not layers or layers[0] < 0 or layers[-1] >= model.config.n_layers:
        raise InputError(f"layers {layers} outside model depth {model.config.n_layers}")
    sims: dict[int, list[float]] = {layer: [] for layer in layers}
    skipped = {layer: 0 for layer in layers}
    per_pair = []
    for i, (prompt, para, subject) in enumerate(pairs):
        ka = subject_keys(model, layers, [prompt], subject, vocab)
        kb = subject_keys(model, layers, [para], subject, vocab)
        row = {"pair": i}
        for layer in layers:
            c = cosine(ka[layer], kb[layer])
            row[layer] = c
            if c is None:
                skipped[layer] += 1
            else:
                sims[layer].append(c)
        per_pair.append(row)
    means = [float(np.mean(sims[layer])) if sims[layer] else float("nan") for layer in layers]
    return KeySimilarityProfile(layers, means, len(pairs), skipped, [tuple(p) for p in pairs], per_pair)


def similarity_pairs(graph: FactGraph, instances: Sequence[TwoHopInstance]) -> list[tuple[str, str, str]]:
    """Edit prompt vs first paraphrase for the edited fact of each instance."""
    out = []
    for inst in instances:
        s = inst.edit_fact.s
        out.append((render_template(inst.edit_template, s), render_template(inst.edit_paraphrases[0], s), s))
    return out


# overfitting ------------------------------------------------------------------

@dataclass
class OverfitRecord:
    case_id: int
    banned: str
    gold: str
    normal: str
    ablated: str
    correct_org: bool
    correct_abl: bool
    conflict: bool = False


@dataclass
class OverfitReport:
    edited_layers: list[int]
    c_org: int
    c_abl: int
    overfit_pct: float
    n_instances: int
    conflicts: int = 0
    violations: int = 0
    records: list[OverfitRecord] = field(default_factory=list)

    @classmethod
    def from_records(cls, edited_layers: Sequence[int], records: Sequence[OverfitRecord]) -> "OverfitReport":
        usable = [r for r in records if not r.conflict]
        c_org = sum(r.correct_org for r in usable)
        c_abl = sum(r.correct_abl for r in usable)
        violations = sum(r.correct_org and not r.correct_abl for r in usable)
        return cls(list(edited_layers), c_org, c_abl, overfit_pct(c_org, c_abl), len(usable),
                   len(records) - len(usable), violations, list(records))

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("records")
        return d


def overfit_record(model: ModelState, inst: TwoHopInstance, vocab: Vocab, context_prefix: str = "") -> OverfitRecord:
    if inst.edited_hop != "hop1":
        raise InputError(f"instance {inst.case_id} does not edit hop 1")
    prompt, gold = hop_prompts(inst, context_prefix)["two_hop"]
    banned = inst.hop1_answer_post
    if banned == gold:
        return OverfitRecord(inst.case_id, banned, gold, "", "", False, False, conflict=True)
    ids = vocab.encode(prompt)
    normal = vocab.tokens[greedy_decode(model, ids, 1).generated_tokens[0]]
    ablated = vocab.tokens[greedy_decode(model, ids, 1, banned=[vocab.id(banned)]).generated_tokens[0]]
    return OverfitRecord(inst.case_id, banned, gold, normal, ablated, normal == gold, ablated == gold)


def overfit_analysis(model: ModelState, instances: Sequence[TwoHopInstance], vocab: Vocab,
                     context_prefix: str = "", edited_layers: Sequence[int] = ()) -> OverfitReport:
    """Two-hop accuracy with and without the edited hop-1 answer available to decoding."""
    if not instances:
        raise InputError("no instances to analyze")
    records = [overfit_record(model, inst, vocab, context_prefix) for inst in instances]
    return OverfitReport.from_records(edited_layers, records)


# persistence ------------------------------------------------------------------

@dataclass
class PersistenceCurve:
    K: int
    values: list[float]
    ranks: list[int] = field(default_factory=list)

    def at(self, k: int) -> float:
        return self.values[min(k, self.K) - 1]


def token_rank(probs: torch.Tensor, token: int) -> int:
    return 1 + int((probs > probs[token]).sum())


def curve_from_ranks(ranks: Sequence[int], K: int) -> PersistenceCurve:
    if K < 1:
        raise InputError("K must be >= 1")
    if not ranks:
        raise InputError("no ranks to summarize")
    r = np.asarray(ranks)
    return PersistenceCurve(K, [float(np.mean(r <= k)) for k in range(1, K + 1)], list(map(int, ranks)))


def topk_persistence(model: ModelState, edits: Sequence[tuple[str, str]], K: int, vocab: Vocab) -> PersistenceCurve:
    """Cumulative share of edit prompts whose original object ranks within the top k."""
    if K < 1:
        raise InputError("K must be >= 1")
    ranks = [token_rank(next_token_probs(model, prompt, vocab), vocab.id(old)) for prompt, old in edits]
    return curve_from_ranks(ranks, K)


# layer sweep ------------------------------------------------------------------

@dataclass
class SweepOptions:
    K: int = 10
    probe_layers: list[int] | None = None
    solve: ValueSolveConfig = field(default_factory=ValueSolveConfig)
    n_generation_tokens: int = 50


@dataclass
class SweepRow:
    layers: list[int]
    hop: dict[str, HopAccuracyReport] = field(default_factory=dict)
    language: LanguageMetricsReport | None = None
    overfit: OverfitReport | None = None
    persistence: PersistenceCurve | None = None
    edit_failures: list[dict] = field(default_factory=list)
    error: str | None = None

    @property
    def key(self) -> str:
        return layer_key(self.layers)

    @property
    def avg_two_hop(self) -> float:
        accs = [r.two_hop_acc for r in self.hop.values()]
        return float(np.mean(accs)) if accs else float("nan")

    def summary(self) -> dict:
        nan = float("nan")
        h1, h2 = self.hop.get("edit-hop1"), self.hop.get("edit-hop2")
        lang, of, pc = self.language, self.overfit, self.persistence
        return {
            "layers": self.key,
            "hop1_edit_hop1_gen": 100 * h1.edited_hop_acc if h1 else nan,
            "hop1_edit_hop2_spec": 100 * h1.unedited_hop_acc if h1 else nan,
            "hop1_edit_2hq": 100 * h1.two_hop_acc if h1 else nan,
            "hop2_edit_hop1_spec": 100 * h2.unedited_hop_acc if h2 else nan,
            "hop2_edit_hop2_gen": 100 * h2.edited_hop_acc if h2 else nan,
            "hop2_edit_2hq": 100 * h2.two_hop_acc if h2 else nan,
            "avg_2hq": 100 * self.avg_two_hop,
            "score": lang.S if lang else nan,
            "efficacy": lang.ES if lang else nan,
            "generalization": lang.PS if lang else nan,
            "specificity": lang.NS if lang else nan,
            "fluency": lang.GE_edited if lang else nan,
            "fluency_base": lang.GE_base if lang else nan,
            "consistency": lang.RS if lang else nan,
            "c_org": of.c_org if of else -1,
            "c_abl": of.c_abl if of else -1,
            "overfit_pct": of.overfit_pct if of else nan,
            "persist_top1": pc.at(1) if pc else nan,
            "persist_topK": pc.values[-1] if pc else nan,
            "edit_failures": len(self.edit_failures),
            "error": self.error or "",
        }

    def instance_records(self) -> list[dict]:
        out = []
        for scenario, rep in self.hop.items():
            out.extend({"row": self.key, "table": "hop", "scenario": scenario, **asdict(r)} for r in rep.records)
        if self.overfit:
            out.extend({"row": self.key, "table": "overfit", **asdict(r)} for r in self.overfit.records)
        if self.language:
            out.extend({"row": self.key, "table": "language", **asdict(r)} for r in self.language.records)
        if self.persistence:
            out.extend({"row": self.key, "table": "persistence", "index": i, "rank": r}
                       for i, r in enumerate(self.persistence.ranks))
        out.extend({"row": self.key, "table": "edit_failure", **f} for f in self.edit_failures)
        return out


def layer_key(layers: Sequence[int]) -> str:
    return ",".join(map(str, layers))


SWEEP_COLUMNS = list(SweepRow([0]).summary())


@dataclass
class SweepResult:
    rows: list[SweepRow]
    key_profile: KeySimilarityProfile | None = None
    ge_base: dict[int, float] = field(default_factory=dict)

    def table(self) -> list[dict]:
        return [r.summary() for r in self.rows]

    def plot_data(self) -> dict[str, list[dict]]:
        return sweep_plot_data(self)

    def trends(self) -> dict[str, dict]:
        return sweep_trends(self)


def _edit_for(base: ModelState, fact, template, paraphrases, layers, stats, vocab, solve_cfg, cache):
    plan = make_plan(fact, template, paraphrases, layers)
    edited, _ = redundant_edit(base, plan, stats, vocab, solve_cfg, cache)
    return edited


def run_sweep_row(base: ModelState, graph: FactGraph, layers: Sequence[int], instances: Sequence[TwoHopInstance],
                  cases: Sequence[CounterfactCase], stats: dict[int, KeyStats], vocab: Vocab,
                  options: SweepOptions, cache: dict, ge_base: dict[int, float]) -> SweepRow:
    """Edit each instance and case separately on ``base`` and evaluate everything."""
    row = SweepRow(list(layers))
    prefix = graph.context_prefix
    hop_records: dict[str, list[HopRecord]] = {}
    overfit_records = []
    for inst in instances:
        try:
            edited = _edit_for(base, inst.edit_fact, inst.edit_template, inst.edit_paraphrases, layers,
                               stats, vocab, options.solve, cache)
        except KelabError as exc:
            # a failed edit leaves the base model in place; the instance is scored as-is and flagged
            row.edit_failures.append({"kind": "instance", "case_id": inst.case_id, "message": str(exc)})
            edited = base
        scenario = scenario_of(inst)
        for kind, (prompt, gold) in hop_prompts(inst, prefix).items():
            tok = greedy_decode(edited, vocab.encode(prompt), 1).generated_tokens[0]
            decoded = vocab.tokens[tok]
            hop_records.setdefault(scenario, []).append(HopRecord(inst.case_id, kind, prompt, decoded, gold, decoded == gold))
        if inst.edited_hop == "hop1":
            overfit_records.append(overfit_record(edited, inst, vocab, prefix))
    row.hop = {s: HopAccuracyReport.from_records(s, recs) for s, recs in sorted(hop_records.items())}
    if overfit_records:
        row.overfit = OverfitReport.from_records(layers, overfit_records)

    if cases:
        idf = idf_corpus_of(cases)
        case_records: list[CaseRecord] = []
        ranks = []
        for case in cases:
            try:
                edited = _edit_for(base, case.fact, case.prompts.canonical, case.prompts.paraphrases, layers,
                                   stats, vocab, options.solve, cache)
            except KelabError as exc:
                row.edit_failures.append({"kind": "case", "case_id": case.case_id, "message": str(exc)})
                edited = base
            case_records.append(evaluate_case(edited, case, vocab, idf, ge_base[case.case_id], options.n_generation_tokens))
            prompt = render_template(case.prompts.canonical, case.fact.s)
            ranks.append(token_rank(next_token_probs(edited, prompt, vocab), vocab.id(case.fact.o)))
        row.language = LanguageMetricsReport.from_records(case_records)
        row.persistence = curve_from_ranks(ranks, options.K)
    return row


def layer_sweep(base: ModelState | Callable[[], ModelState], graph: FactGraph, layer_sets: Sequence[Sequence[int]],
                instances: Sequence[TwoHopInstance], cases: Sequence[CounterfactCase], stats: dict[int, KeyStats],
                vocab: Vocab | None = None, options: SweepOptions | None = None) -> SweepResult:
    """Evaluate each layer set with fresh per-instance edits of the trained base model.

    ``base`` may be a model or a zero-argument factory returning one. A row
    that fails is kept with its error message and the sweep moves on.
    """
    options = options or SweepOptions()
    vocab = vocab or graph.vocab()
    model = base() if callable(base) else base
    depth = model.config.n_layers
    for ls in layer_sets:
        if not ls or min(ls) < 0 or max(ls) >= depth:
            raise InputError(f"layer set {list(ls)} invalid for depth {depth}")
    cache: dict = {}
    ge_base = base_entropies(model, cases, vocab, options.n_generation_tokens) if cases else {}
    rows = []
    for ls in layer_sets:
        ls = sorted(set(ls))
        log.info("sweep row %s", layer_key(ls))
        try:
            rows.append(run_sweep_row(model, graph, ls, instances, cases, stats, vocab, options, cache, ge_base))
        except KelabError as exc:
            log.warning("row %s failed: %s", layer_key(ls), exc)
            rows.append(SweepRow(ls, error=f"{type(exc).__name__}: {exc}"))
    probe = options.probe_layers if options.probe_layers is not None else list(range(depth))
    profile = None
    if instances and probe:
        profile = key_similarity_profile(model, similarity_pairs(graph, instances), probe, vocab)
    return SweepResult(rows, profile, ge_base)


def _singles(result: SweepResult) -> list[SweepRow]:
    return sorted((r for r in result.rows if len(r.layers) == 1 and r.error is None), key=lambda r: r.layers[0])


def sweep_plot_data(result: SweepResult) -> dict[str, list[dict]]:
    """x/y series for the trade-off, key drift, normalization and persistence charts."""
    ok = [r for r in result.rows if r.error is None]
    tradeoff = [{"layers": r.key, "x": r.summary()["score"], "y": 100 * r.avg_two_hop} for r in ok]
    by_layer = []
    for r in _singles(result):
        for scenario, rep in r.hop.items():
            by_layer.append({"layer": r.layers[0], "scenario": scenario, "generalization": 100 * rep.edited_hop_acc,
                             "two_hop": 100 * rep.two_hop_acc})
    keys = []
    if result.key_profile:
        keys = [{"layer": layer, "cosine": s} for layer, s in result.key_profile.as_dict().items()]
    normalized = []
    for p in by_layer:
        gen = p["generalization"]
        normalized.append({**p, "raw": p["two_hop"], "normalized": normalized_two_hop(p["two_hop"], gen) if gen > 0 else None})
    persistence = [{"layers": r.key, "k": k + 1, "fraction": v}
                   for r in ok if r.persistence for k, v in enumerate(r.persistence.values)]
    return {"tradeoff": tradeoff, "key_similarity": keys, "generalization_by_layer": by_layer,
            "normalized_two_hop": normalized, "persistence": persistence}


def _slope(xs: Sequence[float], ys: Sequence[float]) -> float | None:
    pts = [(x, y) for x, y in zip(xs, ys) if y is not None and np.isfinite(y)]
    if len(pts) < 2:
        return None
    x, y = np.asarray(pts, dtype=float).T
    return float(np.polyfit(x, y, 1)[0])


def sweep_trends(result: SweepResult) -> dict[str, dict]:
    """Whether the three qualitative patterns show up. Observed, never enforced."""
    singles = _singles(result)
    layers = [r.layers[0] for r in singles]
    out = {}

    gen = {s: [100 * r.hop[s].edited_hop_acc if s in r.hop else None for r in singles] for s in ("edit-hop1", "edit-hop2")}
    slopes = {s: _slope(layers, v) for s, v in gen.items()}
    key_slope = None
    if result.key_profile:
        key_slope = _slope(result.key_profile.layers, result.key_profile.similarities)
    known = [v for v in slopes.values() if v is not None]
    out["generalization_decay"] = {
        "layers": layers, "generalization": gen, "slope_per_layer": slopes, "key_similarity_slope": key_slope,
        "observed": bool(known) and all(v < 0 for v in known),
    }

    asym = {"observed": False}
    if len(singles) >= 2:
        first, last = singles[0], singles[-1]

        def acc(r, s):
            return 100 * r.hop[s].two_hop_acc if s in r.hop else float("nan")

        asym = {
            "early_layer": first.layers[0], "late_layer": last.layers[0],
            "edit_hop1_2hq": [acc(first, "edit-hop1"), acc(last, "edit-hop1")],
            "edit_hop2_2hq": [acc(first, "edit-hop2"), acc(last, "edit-hop2")],
        }
        asym["observed"] = bool(asym["edit_hop1_2hq"][0] > asym["edit_hop1_2hq"][1]
                                and asym["edit_hop2_2hq"][1] > asym["edit_hop2_2hq"][0])
    out["hop_order_asymmetry"] = asym

    multi = [r for r in result.rows if len(r.layers) > 1 and r.error is None]
    best_single = max(singles, key=lambda r: r.avg_two_hop, default=None)
    best_multi = max(multi, key=lambda r: r.avg_two_hop, default=None)
    red = {"observed": False}
    if best_single and best_multi:
        red = {"best_single": best_single.key, "best_single_avg_2hq": 100 * best_single.avg_two_hop,
               "best_redundant": best_multi.key, "best_redundant_avg_2hq": 100 * best_multi.avg_two_hop,
               "observed": best_multi.avg_two_hop > best_single.avg_two_hop}
    out["redundant_beats_single"] = red
    return out
