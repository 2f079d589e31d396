"""Synthetic fact graphs with two-hop chains and prompt templates.

Relations are functional: each (subject, relation) pair has one object.
Every entity carries every relation, and each relation draws its objects
from a small range pool, so neighbours sharing an object exist and any
counterfactual target can itself start a second hop.
"""

from __future__ import annotations

import json
import random
from collections.abc import Iterable
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import GenerationError, InputError, TemplateError
from .store import atomic_write_text
from .tokenizer import Vocab

SLOT = "{s}"

RELATION_WORDS = [
    ("capital", "seat"),
    ("leader", "chief"),
    ("language", "tongue"),
    ("currency", "coin"),
    ("founder", "creator"),
    ("rival", "foe"),
    ("mascot", "emblem"),
    ("anthem", "song"),
]

# Canonical form first; the other three vary wording and swap in the synonym.
# Every form ends on the subject, so the answer is predicted at the subject's
# own position. With a trailing marker such as "? A:" a small model copies the
# subject embedding forward in its first attention layer and looks the fact up
# at the marker, which leaves nothing for a subject-position edit to change.
TEMPLATE_FORMS = (
    "Q: what is the {w} of {s}",
    "Q: which {w} belongs to {s}",
    "Q: what is the {y} of {s}",
    "Q: name the {y} of {s}",
)
TWO_HOP_FORM = "Q: what is the {w2} of the {w1} of {s}"
EXEMPLAR_COUNT = 8


@dataclass(frozen=True)
class FactTriple:
    s: str
    r: str
    o: str
    o_star: str | None = None

    def __post_init__(self):
        if self.s == self.o:
            raise InputError(f"fact subject equals object: {self.s}")
        if self.o_star is not None and self.o_star == self.o:
            raise InputError(f"counterfactual target equals current object: {self.o}")

    def edited(self) -> "FactTriple":
        """The fact after applying its rewrite (o replaced by o_star)."""
        if self.o_star is None:
            raise InputError("fact has no counterfactual target")
        return FactTriple(self.s, self.r, self.o_star)


@dataclass(frozen=True)
class Relation:
    id: str
    word: str
    synonym: str
    templates: tuple[str, ...]

    @property
    def canonical(self) -> str:
        return self.templates[0]

    @property
    def paraphrases(self) -> tuple[str, ...]:
        return self.templates[1:]


@dataclass(frozen=True)
class PromptSet:
    canonical: str
    paraphrases: tuple[str, ...]
    # (neighbour subject or None when unknown, rendered prompt)
    neighbors: tuple[tuple[str | None, str], ...] = ()
    context_prefix: str = ""
    generation_prompts: tuple[str, ...] = ()
    reference_snippets: tuple[str, ...] = ()


@dataclass(frozen=True)
class CounterfactCase:
    fact: FactTriple
    prompts: PromptSet
    case_id: int = 0


@dataclass(frozen=True)
class TwoHopInstance:
    hop1: FactTriple
    hop2: FactTriple
    edited_hop: str
    question: str
    hop1_question: str
    hop1_paraphrases: tuple[str, ...]
    hop2_question: str
    hop2_paraphrases: tuple[str, ...]
    hop1_answer_pre: str
    hop1_answer_post: str
    hop2_subject_post: str
    hop2_answer_pre: str
    hop2_answer_post: str
    two_hop_answer_pre: str
    two_hop_answer_post: str
    case_id: int = 0

    def __post_init__(self):
        if self.edited_hop not in ("hop1", "hop2"):
            raise InputError(f"edited_hop must be 'hop1' or 'hop2', got {self.edited_hop!r}")
        if self.hop2.s != self.hop1.o:
            raise InputError("chain broken: hop2 subject differs from hop1 object")
        starred = [h for h in (self.hop1, self.hop2) if h.o_star is not None]
        if len(starred) != 1:
            raise InputError("exactly one hop must carry a counterfactual target")
        if (self.edited_hop == "hop1") != (self.hop1.o_star is not None):
            raise InputError("edited_hop disagrees with which hop carries o_star")

    @property
    def edit_fact(self) -> FactTriple:
        return self.hop1 if self.edited_hop == "hop1" else self.hop2

    @property
    def edit_template(self) -> str:
        return self.hop1_question if self.edited_hop == "hop1" else self.hop2_question

    @property
    def edit_paraphrases(self) -> tuple[str, ...]:
        return self.hop1_paraphrases if self.edited_hop == "hop1" else self.hop2_paraphrases


@dataclass
class FactGraph:
    entities: list[str]
    relations: list[Relation]
    triples: list[FactTriple]
    two_hop: list[TwoHopInstance]
    seed: int
    context_facts: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self._lookup = {}
        for t in self.triples:
            if (t.s, t.r) in self._lookup:
                raise InputError(f"relation {t.r} is not functional for subject {t.s}")
            self._lookup[(t.s, t.r)] = t.o
        self._relations = {r.id: r for r in self.relations}

    def object_of(self, s: str, r: str) -> str | None:
        return self._lookup.get((s, r))

    def relation(self, rid: str) -> Relation:
        return self._relations[rid]

    def subjects_with(self, r: str, o: str) -> list[str]:
        return [t.s for t in self.triples if t.r == r and t.o == o]

    def two_hop_template(self, r1: str, r2: str) -> str:
        return TWO_HOP_FORM.format(w1=self.relation(r1).word, w2=self.relation(r2).word, s=SLOT)

    @property
    def context_prefix(self) -> str:
        parts = []
        for s, r in self.context_facts:
            o = self.object_of(s, r)
            parts.append(f"{render_template(self.relation(r).canonical, s)} {o}")
        return " ".join(parts)

    def apply_edit(self, fact: FactTriple) -> "FactGraph":
        """Graph with ``fact``'s rewrite applied; two-hop instances are dropped."""
        new = [fact.edited() if (t.s, t.r) == (fact.s, fact.r) else t for t in self.triples]
        return FactGraph(list(self.entities), list(self.relations), new, [], self.seed, list(self.context_facts))

    def vocab(self) -> Vocab:
        return build_vocab(self)

    # serialization -------------------------------------------------------
    def to_records(self) -> list[dict]:
        head = {
            "kind": "graph",
            "seed": self.seed,
            "entities": self.entities,
            "relations": [asdict(r) for r in self.relations],
            "context_facts": [list(c) for c in self.context_facts],
        }
        records = [head]
        for t in self.triples:
            rel = self.relation(t.r)
            records.append({
                "kind": "fact",
                "s": t.s,
                "r": t.r,
                "o": t.o,
                "o_star": t.o_star,
                "templates": [rel.canonical],
                "paraphrases": list(rel.paraphrases),
                "neighbors": [n for n in self.subjects_with(t.r, t.o) if n != t.s],
            })
        for inst in self.two_hop:
            records.append({"kind": "two_hop", **instance_to_dict(inst)})
        return records

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in self.to_records())

    def save(self, path: str | Path) -> None:
        atomic_write_text(path, self.dumps())

    @classmethod
    def loads(cls, text: str) -> "FactGraph":
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not records or records[0].get("kind") != "graph":
            raise InputError("graph file must begin with a 'graph' record")
        head = records[0]
        relations = [Relation(r["id"], r["word"], r["synonym"], tuple(r["templates"])) for r in head["relations"]]
        triples = [FactTriple(r["s"], r["r"], r["o"], r.get("o_star")) for r in records if r["kind"] == "fact"]
        two_hop = [instance_from_dict(r) for r in records if r["kind"] == "two_hop"]
        return cls(list(head["entities"]), relations, triples, two_hop, head["seed"],
                   [tuple(c) for c in head.get("context_facts", [])])

    @classmethod
    def load(cls, path: str | Path) -> "FactGraph":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def instance_to_dict(inst: TwoHopInstance) -> dict:
    d = asdict(inst)
    d["hop1_paraphrases"] = list(inst.hop1_paraphrases)
    d["hop2_paraphrases"] = list(inst.hop2_paraphrases)
    return d


def instance_from_dict(d: dict) -> TwoHopInstance:
    kw = {k: v for k, v in d.items() if k != "kind"}
    kw["hop1"] = FactTriple(**kw["hop1"])
    kw["hop2"] = FactTriple(**kw["hop2"])
    kw["hop1_paraphrases"] = tuple(kw["hop1_paraphrases"])
    kw["hop2_paraphrases"] = tuple(kw["hop2_paraphrases"])
    return TwoHopInstance(**kw)


def make_relations(n_relations: int) -> list[Relation]:
    rels = []
    for i in range(n_relations):
        if i < len(RELATION_WORDS):
            word, syn = RELATION_WORDS[i]
        else:
            word, syn = f"rel{i}", f"rel{i}x"
        templates = tuple(form.format(w=word, y=syn, s=SLOT) for form in TEMPLATE_FORMS)
        rels.append(Relation(f"r{i}", word, syn, templates))
    return rels


def render_template(template: str, subject: str) -> str:
    count = template.count(SLOT)
    if count != 1:
        raise TemplateError(f"template must contain exactly one {SLOT} slot, found {count}: {template!r}")
    return template.replace(SLOT, subject)


def render_prompt(template: str, triple: FactTriple, with_context: bool = False, context_prefix: str = "") -> str:
    """Substitute the triple's subject; optionally prepend the Q/A exemplar block."""
    question = render_template(template, triple.s)
    if with_context:
        if not context_prefix:
            raise TemplateError("with_context requested but no context prefix configured")
        return f"{context_prefix} {question}"
    return question


def _build_instance(graph_lookup, relations, s, r1, r2, edited_hop, o_star, case_id) -> TwoHopInstance:
    o1 = graph_lookup[(s, r1)]
    o2 = graph_lookup[(o1, r2)]
    rel1, rel2 = relations[r1], relations[r2]
    if edited_hop == "hop1":
        hop1 = FactTriple(s, r1, o1, o_star)
        hop2 = FactTriple(o1, r2, o2)
        bridge_post = o_star
        hop2_post = graph_lookup[(o_star, r2)]
    else:
        hop1 = FactTriple(s, r1, o1)
        hop2 = FactTriple(o1, r2, o2, o_star)
        bridge_post = o1
        hop2_post = o_star
    return TwoHopInstance(
        hop1=hop1,
        hop2=hop2,
        edited_hop=edited_hop,
        question=TWO_HOP_FORM.format(w1=rel1.word, w2=rel2.word, s=SLOT),
        hop1_question=rel1.canonical,
        hop1_paraphrases=rel1.paraphrases,
        hop2_question=rel2.canonical,
        hop2_paraphrases=rel2.paraphrases,
        hop1_answer_pre=o1,
        hop1_answer_post=bridge_post,
        hop2_subject_post=bridge_post,
        hop2_answer_pre=o2,
        hop2_answer_post=hop2_post,
        two_hop_answer_pre=o2,
        two_hop_answer_post=hop2_post,
        case_id=case_id,
    )


def generate_fact_graph(n_entities: int, n_relations: int, n_two_hop: int, seed: int,
                        range_size: int | None = None, n_context: int = EXEMPLAR_COUNT) -> FactGraph:
    """Dense functional fact graph: every entity has every relation.

    Produces ``n_entities * n_relations`` triples and ``n_two_hop`` edit
    instances, alternating hop-1 and hop-2 edits.
    """
    if n_entities < 3:
        raise GenerationError("need at least 3 entities")
    if n_relations < 2:
        raise GenerationError("need at least 2 relations")
    if n_two_hop < 0:
        raise GenerationError("n_two_hop must be non-negative")
    rng = random.Random(seed)
    width = len(str(n_entities - 1))
    entities = [f"e{i:0{width}d}" for i in range(n_entities)]
    relations = make_relations(n_relations)
    rel_by_id = {r.id: r for r in relations}
    size = range_size or max(4, n_entities // 5)
    size = min(size, n_entities)
    if size < 3:
        raise GenerationError("relation range pool needs at least 3 entities")

    pools = {r.id: sorted(rng.sample(entities, size)) for r in relations}
    triples, lookup = [], {}
    for s in entities:
        for r in relations:
            candidates = [e for e in pools[r.id] if e != s]
            o = rng.choice(candidates)
            triples.append(FactTriple(s, r.id, o))
            lookup[(s, r.id)] = o

    keys = sorted(lookup)
    context_facts = [keys[i] for i in sorted(rng.sample(range(len(keys)), min(n_context, len(keys))))]
    reserved = set(context_facts)

    chains = [(s, r1.id, r2.id) for s in entities for r1 in relations for r2 in relations if r1.id != r2.id]
    rng.shuffle(chains)
    instances: list[TwoHopInstance] = []
    used_edits: set[tuple[str, str]] = set()
    for s, r1, r2 in chains:
        if len(instances) >= n_two_hop:
            break
        edited_hop = "hop1" if len(instances) % 2 == 0 else "hop2"
        o1 = lookup[(s, r1)]
        o2 = lookup[(o1, r2)]
        edit_key = (s, r1) if edited_hop == "hop1" else (o1, r2)
        if edit_key in reserved or edit_key in used_edits:
            continue
        if edited_hop == "hop1":
            options = [e for e in pools[r1] if e not in (o1, s) and lookup[(e, r2)] != o2]
        else:
            options = [e for e in pools[r2] if e not in (o2, o1)]
        if not options:
            continue
        o_star = rng.choice(options)
        used_edits.add(edit_key)
        instances.append(_build_instance(lookup, rel_by_id, s, r1, r2, edited_hop, o_star, len(instances)))
    if len(instances) < n_two_hop:
        raise GenerationError(f"only {len(instances)} of {n_two_hop} two-hop instances are feasible")
    return FactGraph(entities, relations, triples, instances, seed, context_facts)


def make_counterfact_cases(graph: FactGraph, n_cases: int, seed: int, max_neighbors: int = 5,
                           max_snippets: int = 8) -> list[CounterfactCase]:
    """Counterfactual rewrite cases with paraphrase, neighbour and generation prompts."""
    rng = random.Random(seed)
    reserved = set(graph.context_facts)
    candidates = [t for t in graph.triples if (t.s, t.r) not in reserved]
    rng.shuffle(candidates)
    # cases with at least one neighbour first, original shuffled order otherwise
    candidates.sort(key=lambda t: len(graph.subjects_with(t.r, t.o)) <= 1)
    if n_cases > len(candidates):
        raise GenerationError(f"requested {n_cases} counterfactual cases, only {len(candidates)} facts available")
    pool_by_rel = {}
    for t in graph.triples:
        pool_by_rel.setdefault(t.r, set()).add(t.o)
    prefix = graph.context_prefix
    cases = []
    for i, fact in enumerate(candidates[:n_cases]):
        rel = graph.relation(fact.r)
        options = sorted(e for e in pool_by_rel[fact.r] if e not in (fact.o, fact.s))
        if not options:
            raise GenerationError(f"no counterfactual target for {fact}")
        o_star = rng.choice(options)
        neighbors = [n for n in graph.subjects_with(fact.r, fact.o) if n != fact.s][:max_neighbors]
        snippets = [f"{render_template(graph.relation(t.r).canonical, t.s)} {t.o}"
                    for t in graph.triples if t.o == o_star and t.s != fact.s]
        snippets += [f"{render_template(graph.relation(r.id).canonical, o_star)} {graph.object_of(o_star, r.id)}"
                     for r in graph.relations]
        prompts = PromptSet(
            canonical=rel.canonical,
            paraphrases=rel.paraphrases,
            neighbors=tuple((n, render_template(rel.canonical, n)) for n in neighbors),
            context_prefix=prefix,
            generation_prompts=(render_template(rel.canonical, fact.s), render_template(rel.paraphrases[0], fact.s)),
            reference_snippets=tuple(snippets[:max_snippets]),
        )
        cases.append(CounterfactCase(FactTriple(fact.s, fact.r, fact.o, o_star), prompts, i))
    return cases


def build_vocab(graph: FactGraph, extra: Iterable[str] = ()) -> Vocab:
    words: set[str] = set(graph.entities)
    for rel in graph.relations:
        for t in rel.templates:
            words.update(t.replace(SLOT, " ").split())
    for r1 in graph.relations:
        for r2 in graph.relations:
            words.update(TWO_HOP_FORM.format(w1=r1.word, w2=r2.word, s=" ").split())
    for t in extra:
        words.update(t.replace(SLOT, " ").split())
    return Vocab(sorted(words))


def counterfact_to_dict(case: CounterfactCase) -> dict:
    p = case.prompts
    return {
        "case_id": case.case_id,
        "fact": asdict(case.fact),
        "canonical": p.canonical,
        "paraphrases": list(p.paraphrases),
        "neighbors": [list(n) for n in p.neighbors],
        "context_prefix": p.context_prefix,
        "generation_prompts": list(p.generation_prompts),
        "reference_snippets": list(p.reference_snippets),
    }


def counterfact_from_dict(d: dict) -> CounterfactCase:
    prompts = PromptSet(
        canonical=d["canonical"],
        paraphrases=tuple(d["paraphrases"]),
        neighbors=tuple((n[0], n[1]) for n in d["neighbors"]),
        context_prefix=d.get("context_prefix", ""),
        generation_prompts=tuple(d.get("generation_prompts", ())),
        reference_snippets=tuple(d.get("reference_snippets", ())),
    )
    return CounterfactCase(FactTriple(**d["fact"]), prompts, d.get("case_id", 0))


def validate_instance(graph: FactGraph, inst: TwoHopInstance) -> list[str]:
    """Problems with ``inst`` relative to ``graph``; empty when consistent."""
    problems = []
    if graph.object_of(inst.hop1.s, inst.hop1.r) != inst.hop1.o:
        problems.append("hop1 triple not in graph")
    if graph.object_of(inst.hop2.s, inst.hop2.r) != inst.hop2.o:
        problems.append("hop2 triple not in graph")
    edited = graph.apply_edit(inst.edit_fact)
    bridge = edited.object_of(inst.hop1.s, inst.hop1.r)
    final = edited.object_of(bridge, inst.hop2.r) if bridge is not None else None
    if bridge != inst.hop1_answer_post or bridge != inst.hop2_subject_post:
        problems.append("post-edit bridge mismatch")
    if final != inst.two_hop_answer_post or final != inst.hop2_answer_post:
        problems.append("post-edit two-hop answer mismatch")
    return problems


__all__ = [
    "CounterfactCase",
    "FactGraph",
    "FactTriple",
    "PromptSet",
    "Relation",
    "TwoHopInstance",
    "build_vocab",
    "generate_fact_graph",
    "make_counterfact_cases",
    "render_prompt",
    "render_template",
    "validate_instance",
]
