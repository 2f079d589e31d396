"""Multi-hop accuracies and counterfactual language metrics for edited models."""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .corpus import CounterfactCase, TwoHopInstance, render_template
from .decoding import greedy_decode
from .errors import InputError
from .metrics import composite_score, fluency_component, ngram_entropy, percent, tfidf_consistency
from .model import ModelState, forward
from .tokenizer import Vocab

SCENARIOS = ("edit-hop1", "edit-hop2")
GENERATION_TOKENS = 50


def scenario_of(inst: TwoHopInstance) -> str:
    return "edit-hop1" if inst.edited_hop == "hop1" else "edit-hop2"


@dataclass
class HopRecord:
    case_id: int
    kind: str  # edited_hop | unedited_hop | two_hop
    prompt: str
    decoded: str
    gold: str
    correct: bool


@dataclass
class HopAccuracyReport:
    scenario: str
    edited_hop_acc: float
    unedited_hop_acc: float
    two_hop_acc: float
    n_instances: int
    records: list[HopRecord] = field(default_factory=list)

    @classmethod
    def from_records(cls, scenario: str, records: Sequence[HopRecord]) -> "HopAccuracyReport":
        def frac(kind: str) -> float:
            rows = [r for r in records if r.kind == kind]
            return sum(r.correct for r in rows) / len(rows) if rows else 0.0

        n = len({r.case_id for r in records})
        return cls(scenario, frac("edited_hop"), frac("unedited_hop"), frac("two_hop"), n, list(records))

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("records")
        return d


def first_token(model: ModelState, prompt: str, vocab: Vocab, banned: Iterable[int] = ()) -> int:
    return greedy_decode(model, vocab.encode(prompt), max_tokens=1, banned=banned).generated_tokens[0]


def hop_prompts(inst: TwoHopInstance, context_prefix: str, post_edit: bool = True,
                paraphrase_index: int = 0) -> dict[str, tuple[str, str]]:
    """``kind -> (prompt, gold)`` for the three questions of one instance."""
    if inst.edited_hop == "hop1":
        edited_subject, edited_paras = inst.hop1.s, inst.hop1_paraphrases
        edited_gold = inst.hop1_answer_post if post_edit else inst.hop1_answer_pre
        other_template = inst.hop2_question
        other_subject = inst.hop2_subject_post if post_edit else inst.hop2.s
        other_gold = inst.hop2_answer_post if post_edit else inst.hop2_answer_pre
    else:
        edited_subject, edited_paras = inst.hop2.s, inst.hop2_paraphrases
        edited_gold = inst.hop2_answer_post if post_edit else inst.hop2_answer_pre
        other_template, other_subject = inst.hop1_question, inst.hop1.s
        other_gold = inst.hop1_answer_post if post_edit else inst.hop1_answer_pre
    paraphrase = edited_paras[paraphrase_index % len(edited_paras)]
    question = render_template(inst.question, inst.hop1.s)
    two_hop_prompt = f"{context_prefix} {question}" if context_prefix else question
    return {
        "edited_hop": (render_template(paraphrase, edited_subject), edited_gold),
        "unedited_hop": (render_template(other_template, other_subject), other_gold),
        "two_hop": (two_hop_prompt, inst.two_hop_answer_post if post_edit else inst.two_hop_answer_pre),
    }


def eval_hop_accuracies(model: ModelState, instances: Sequence[TwoHopInstance], scenario: str, vocab: Vocab,
                        context_prefix: str = "", post_edit: bool = True) -> HopAccuracyReport:
    """Greedy first-token accuracy on the edited hop (via a paraphrase), the
    unedited hop, and the context-prefixed two-hop question."""
    if not instances:
        raise InputError("no instances to evaluate")
    if scenario not in SCENARIOS:
        raise InputError(f"scenario must be one of {SCENARIOS}")
    records = []
    for inst in instances:
        if scenario_of(inst) != scenario:
            raise InputError(f"instance {inst.case_id} edits {inst.edited_hop}, not scenario {scenario}")
        for kind, (prompt, gold) in hop_prompts(inst, context_prefix, post_edit).items():
            tok = first_token(model, prompt, vocab)
            decoded = vocab.tokens[tok]
            records.append(HopRecord(inst.case_id, kind, prompt, decoded, gold, decoded == gold))
    return HopAccuracyReport.from_records(scenario, records)


# probability comparisons ------------------------------------------------------

def next_token_probs(model: ModelState, prompt: str, vocab: Vocab) -> torch.Tensor:
    logits, _ = forward(model, vocab.encode(prompt))
    return torch.softmax(logits.double(), dim=-1)


@dataclass
class ProbTrial:
    case_id: int
    prompt: str
    p_new: float
    p_old: float
    success: bool


@dataclass
class ProbScore:
    percent: float
    successes: int
    trials: int
    records: list[ProbTrial] = field(default_factory=list)


def _compare(model: ModelState, vocab: Vocab, prompts: Iterable[tuple[int, str, str, str]], prefer_new: bool) -> ProbScore:
    records = []
    for case_id, prompt, new, old in prompts:
        if new == old:
            raise InputError(f"case {case_id}: new and old objects are the same token {new!r}")
        probs = next_token_probs(model, prompt, vocab)
        p_new, p_old = float(probs[vocab.id(new)]), float(probs[vocab.id(old)])
        ok = p_new > p_old if prefer_new else p_old > p_new
        records.append(ProbTrial(case_id, prompt, p_new, p_old, ok))
    wins = sum(r.success for r in records)
    return ProbScore(percent(wins, len(records)), wins, len(records), records)


def efficacy_score(model: ModelState, cases: Sequence[CounterfactCase], vocab: Vocab) -> ProbScore:
    """Percent of edit prompts where P(o*) > P(o^c)."""
    return _compare(model, vocab, ((c.case_id, render_template(c.prompts.canonical, c.fact.s), c.fact.o_star, c.fact.o)
                                   for c in cases), prefer_new=True)


def paraphrase_score(model: ModelState, cases: Sequence[CounterfactCase], vocab: Vocab) -> ProbScore:
    """Percent of paraphrase prompts where P(o*) > P(o^c), pooled over cases."""
    return _compare(model, vocab, ((c.case_id, render_template(t, c.fact.s), c.fact.o_star, c.fact.o)
                                   for c in cases for t in c.prompts.paraphrases), prefer_new=True)


def neighborhood_score(model: ModelState, cases: Sequence[CounterfactCase], vocab: Vocab) -> ProbScore:
    """Percent of neighbour prompts where the original object still wins."""
    return _compare(model, vocab, ((c.case_id, text, c.fact.o_star, c.fact.o)
                                   for c in cases for _, text in c.prompts.neighbors), prefer_new=False)


# generation metrics -----------------------------------------------------------

def generate_text(model: ModelState, prompt: str, vocab: Vocab, n_tokens: int = GENERATION_TOKENS) -> str:
    out = greedy_decode(model, vocab.encode(prompt), max_tokens=n_tokens, banned=[vocab.pad_id])
    return vocab.decode(out.generated_tokens)


def case_generations(model: ModelState, case: CounterfactCase, vocab: Vocab, n_tokens: int = GENERATION_TOKENS) -> list[str]:
    return [generate_text(model, p, vocab, n_tokens) for p in case.prompts.generation_prompts]


def mean_entropy(texts: Sequence[str]) -> float:
    return float(np.mean([ngram_entropy(t).value for t in texts])) if texts else 0.0


@dataclass
class CaseRecord:
    case_id: int
    es_success: int
    ps_successes: int
    ps_trials: int
    ns_successes: int
    ns_trials: int
    ge_edited: float
    ge_base: float
    rs: float
    generations: list[str] = field(default_factory=list)


@dataclass
class LanguageMetricsReport:
    ES: float
    PS: float
    NS: float
    GE_edited: float
    GE_base: float
    RS: float
    S: float
    records: list[CaseRecord] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: Sequence[CaseRecord]) -> "LanguageMetricsReport":
        if not records:
            raise InputError("no case records")
        es = percent(sum(r.es_success for r in records), len(records))
        ps = percent(sum(r.ps_successes for r in records), sum(r.ps_trials for r in records))
        ns = percent(sum(r.ns_successes for r in records), sum(r.ns_trials for r in records))
        ge_e = float(np.mean([r.ge_edited for r in records]))
        ge_b = float(np.mean([r.ge_base for r in records]))
        rs = float(np.mean([r.rs for r in records]))
        # a degenerate baseline (zero entropy) leaves fluency, and so S, undefined
        s = composite_score(es, ps, ns, ge_e, ge_b, rs) if ge_b > 0 else float("nan")
        return cls(es, ps, ns, ge_e, ge_b, rs, s, list(records))

    @property
    def fluency(self) -> float:
        return fluency_component(self.GE_edited, self.GE_base) if self.GE_base > 0 else float("nan")

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("records")
        d["fluency_component"] = self.fluency
        return d


def evaluate_case(model: ModelState, case: CounterfactCase, vocab: Vocab, idf_corpus: Sequence[str],
                  ge_base: float, n_tokens: int = GENERATION_TOKENS) -> CaseRecord:
    """All language metrics for one case on a model that carries that case's edit."""
    es = efficacy_score(model, [case], vocab)
    ps = paraphrase_score(model, [case], vocab)
    ns = neighborhood_score(model, [case], vocab)
    gens = case_generations(model, case, vocab, n_tokens)
    rs = tfidf_consistency(" ".join(gens), list(case.prompts.reference_snippets), idf_corpus).value \
        if case.prompts.reference_snippets else 0.0
    return CaseRecord(case.case_id, es.successes, ps.successes, ps.trials, ns.successes, ns.trials,
                      mean_entropy(gens), ge_base, rs, gens)


def base_entropies(base: ModelState, cases: Sequence[CounterfactCase], vocab: Vocab,
                   n_tokens: int = GENERATION_TOKENS) -> dict[int, float]:
    return {c.case_id: mean_entropy(case_generations(base, c, vocab, n_tokens)) for c in cases}


def idf_corpus_of(cases: Sequence[CounterfactCase]) -> list[str]:
    return [s for c in cases for s in c.prompts.reference_snippets]


def language_metrics(edited_for: Callable[[CounterfactCase], ModelState], base: ModelState,
                     cases: Sequence[CounterfactCase], vocab: Vocab, n_tokens: int = GENERATION_TOKENS,
                     ge_base: dict[int, float] | None = None) -> LanguageMetricsReport:
    """Evaluate every case on its own edited model, ``edited_for(case)``."""
    ge_base = ge_base if ge_base is not None else base_entropies(base, cases, vocab, n_tokens)
    idf = idf_corpus_of(cases)
    records = [evaluate_case(edited_for(c), c, vocab, idf, ge_base[c.case_id], n_tokens) for c in cases]
    return LanguageMetricsReport.from_records(records)
