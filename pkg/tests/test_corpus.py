import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kelab.corpus import (
    FactGraph,
    FactTriple,
    TwoHopInstance,
    counterfact_from_dict,
    counterfact_to_dict,
    generate_fact_graph,
    instance_from_dict,
    instance_to_dict,
    make_counterfact_cases,
    render_prompt,
    render_template,
    validate_instance,
)
from kelab.errors import GenerationError, InputError, TemplateError
from kelab.ingest import (
    counterfact_record,
    ingest_counterfact,
    ingest_mquake,
    mquake_record,
    to_template,
    write_records,
)
from kelab.errors import IngestError


def walk_chain(graph, inst):
    """Independent recomputation of post-edit answers from raw triples."""
    table = {(t.s, t.r): t.o for t in graph.triples}
    fact = inst.edit_fact
    table[(fact.s, fact.r)] = fact.o_star
    bridge = table[(inst.hop1.s, inst.hop1.r)]
    return bridge, table[(bridge, inst.hop2.r)]


def test_seeded_generation_is_byte_identical():
    a = generate_fact_graph(20, 3, 10, seed=42)
    b = generate_fact_graph(20, 3, 10, seed=42)
    assert a.dumps() == b.dumps()
    assert generate_fact_graph(20, 3, 10, seed=43).dumps() != a.dumps()


def test_zero_two_hop():
    g = generate_fact_graph(10, 2, 0, seed=1)
    assert g.two_hop == [] and len(g.triples) == 20


def test_invariants(small_graph):
    g = small_graph
    keys = [(t.s, t.r) for t in g.triples]
    assert len(keys) == len(set(keys))
    assert all(t.s != t.o for t in g.triples)
    kinds = [i.edited_hop for i in g.two_hop]
    assert kinds.count("hop1") == kinds.count("hop2") == 4
    triples = set((t.s, t.r, t.o) for t in g.triples)
    for inst in g.two_hop:
        assert (inst.hop1.s, inst.hop1.r, inst.hop1.o) in triples
        assert (inst.hop2.s, inst.hop2.r, inst.hop2.o) in triples
        assert inst.hop2.s == inst.hop1.o
        assert validate_instance(g, inst) == []
        bridge, final = walk_chain(g, inst)
        assert bridge == inst.hop1_answer_post == inst.hop2_subject_post
        assert final == inst.two_hop_answer_post == inst.hop2_answer_post
        assert inst.two_hop_answer_post != inst.two_hop_answer_pre
        assert (inst.edit_fact.s, inst.edit_fact.r) not in set(g.context_facts)


def test_validator_catches_tampering(small_graph):
    inst = small_graph.two_hop[0]
    d = instance_to_dict(inst)
    d["two_hop_answer_post"] = d["two_hop_answer_pre"]
    d["hop2_answer_post"] = d["two_hop_answer_pre"]
    assert validate_instance(small_graph, instance_from_dict(d))


@settings(max_examples=15, deadline=None)
@given(n=st.integers(6, 25), r=st.integers(2, 5), seed=st.integers(0, 10_000))
def test_generated_instances_always_validate(n, r, seed):
    try:
        g = generate_fact_graph(n, r, 4, seed=seed, n_context=4)
    except GenerationError:
        return
    assert all(validate_instance(g, i) == [] for i in g.two_hop)
    assert FactGraph.loads(g.dumps()).dumps() == g.dumps()


def test_generation_errors():
    with pytest.raises(GenerationError):
        generate_fact_graph(2, 2, 0, seed=0)
    with pytest.raises(GenerationError):
        generate_fact_graph(5, 1, 0, seed=0)
    with pytest.raises(GenerationError):
        generate_fact_graph(4, 2, 500, seed=0)


def test_fact_invariants():
    with pytest.raises(InputError):
        FactTriple("a", "r", "a")
    with pytest.raises(InputError):
        FactTriple("a", "r", "b", "b")
    with pytest.raises(InputError):
        FactTriple("a", "r", "b").edited()


def test_two_hop_instance_invariants(small_graph):
    d = instance_to_dict(small_graph.two_hop[0])
    d["edited_hop"] = "hop3"
    with pytest.raises(InputError):
        instance_from_dict(d)
    d = instance_to_dict(small_graph.two_hop[0])
    d["hop2"]["s"] = "nobody"
    with pytest.raises(InputError):
        instance_from_dict(d)


def test_render_prompt():
    t = FactTriple("BurjKhalifa", "loc", "Dubai")
    assert render_prompt("Q: Where is {s} located? A:", t) == "Q: Where is BurjKhalifa located? A:"
    out = render_prompt("Q: Where is {s} located? A:", t, with_context=True, context_prefix="Q: x ? A: y")
    assert out.startswith("Q: x ? A: y") and out.endswith("A:")
    with pytest.raises(TemplateError):
        render_template("no slot here", "x")
    with pytest.raises(TemplateError):
        render_template("{s} and {s}", "x")
    with pytest.raises(TemplateError):
        render_prompt("{s} ?", t, with_context=True)


def test_paraphrases_distinct_and_end_before_answer(small_graph):
    for rel in small_graph.relations:
        rendered = [render_template(t, "e01") for t in rel.templates]
        assert len(set(rendered)) == len(rendered) == 4
        # the answer slot follows the subject directly
        assert all(r.endswith("e01") for r in rendered)


def test_context_prefix_shape(small_graph):
    prefix = small_graph.context_prefix
    assert prefix.count("Q:") == 4
    assert all(tok in small_graph.vocab() for tok in prefix.split())


def test_counterfact_cases(small_graph):
    cases = make_counterfact_cases(small_graph, 6, seed=0)
    assert len(cases) == 6
    for c in cases:
        f = c.fact
        assert f.o_star not in (f.o, f.s) and small_graph.object_of(f.s, f.r) == f.o
        for subj, prompt in c.prompts.neighbors:
            assert subj != f.s and small_graph.object_of(subj, f.r) == f.o
            assert subj in prompt.split()
        assert len(c.prompts.paraphrases) == 3
        assert c.prompts.reference_snippets
        assert counterfact_from_dict(json.loads(json.dumps(counterfact_to_dict(c)))) == c
    with pytest.raises(GenerationError):
        make_counterfact_cases(small_graph, 10_000, seed=0)


def test_graph_file_roundtrip(small_graph, tmp_path):
    path = tmp_path / "g.jsonl"
    small_graph.save(path)
    back = FactGraph.load(path)
    assert back.dumps() == small_graph.dumps()
    first_fact = json.loads(path.read_text().splitlines()[1])
    assert {"s", "r", "o", "o_star", "templates", "paraphrases", "neighbors"} <= set(first_fact)


def test_apply_edit_reroutes(small_graph):
    inst = next(i for i in small_graph.two_hop if i.edited_hop == "hop1")
    edited = small_graph.apply_edit(inst.edit_fact)
    assert edited.object_of(inst.hop1.s, inst.hop1.r) == inst.hop1.o_star
    assert edited.object_of(edited.object_of(inst.hop1.s, inst.hop1.r), inst.hop2.r) == inst.two_hop_answer_post


# ingestion -------------------------------------------------------------------

MQUAKE = {
    "case_id": 7,
    "requested_rewrite": [{"prompt": "The tallest building is located in {}", "subject": "Burj Khalifa",
                           "relation_id": "P131", "target_new": {"str": "Spain"}, "target_true": {"str": "Dubai"}}],
    "questions": ["Which country is the Burj Khalifa located in?"],
    "answer": "UAE",
    "new_answer": "Spain_country",
    "single_hops": [{"question": "Where is Burj Khalifa ?", "answer": "Dubai"},
                    {"question": "Which country is Dubai in ?", "answer": "UAE"}],
    "new_single_hops": [{"question": "Where is Burj Khalifa ?", "answer": "Spain"},
                        {"question": "Which country is Spain in ?", "answer": "Spain_country"}],
    "orig": {"triples_labeled": [["Burj Khalifa", "P131", "Dubai"], ["Dubai", "P17", "UAE"]]},
    "extra_field": "ignored",
}


def test_ingest_mquake_minimal(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps(MQUAKE) + "\n")
    [inst] = ingest_mquake(path)
    assert isinstance(inst, TwoHopInstance)
    assert inst.edited_hop == "hop1" and inst.hop1.s == "Burj_Khalifa"
    assert inst.hop2.s == inst.hop1.o == "Dubai"
    assert inst.two_hop_answer_post == "Spain_country"
    assert "{s}" in inst.question


def test_ingest_missing_target_names_field_and_line(tmp_path):
    bad = json.loads(json.dumps(MQUAKE))
    del bad["requested_rewrite"][0]["target_new"]
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps(MQUAKE) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(IngestError) as err:
        ingest_mquake(path)
    assert err.value.line == 2 and err.value.field == "requested_rewrite.target_new"
    assert "line 2" in str(err.value) and "target_new" in str(err.value)


def test_ingest_malformed_container(tmp_path):
    path = tmp_path / "m.json"
    path.write_text("[{\"a\": 1},")
    with pytest.raises(IngestError):
        ingest_mquake(path)
    path.write_text("[1, 2]")
    with pytest.raises(IngestError):
        ingest_counterfact(path)


def test_mquake_roundtrip_and_array_form(small_graph, tmp_path):
    path = tmp_path / "m.jsonl"
    write_records(path, [mquake_record(i) for i in small_graph.two_hop])
    first = ingest_mquake(path)
    path2 = tmp_path / "m2.json"
    path2.write_text(json.dumps([mquake_record(i) for i in first]))
    assert ingest_mquake(path2) == first
    for orig, back in zip(small_graph.two_hop, first):
        assert (back.hop1, back.hop2, back.edited_hop) == (orig.hop1, orig.hop2, orig.edited_hop)
        assert back.two_hop_answer_post == orig.two_hop_answer_post
        assert back.edit_template == orig.edit_template


def test_counterfact_roundtrip(small_graph, tmp_path):
    cases = make_counterfact_cases(small_graph, 4, seed=1)
    path = tmp_path / "c.jsonl"
    write_records(path, [counterfact_record(c) for c in cases])
    first = ingest_counterfact(path)
    write_records(path, [counterfact_record(c) for c in first])
    assert ingest_counterfact(path) == first
    for orig, back in zip(cases, first):
        assert back.fact == orig.fact
        assert back.prompts.paraphrases == orig.prompts.paraphrases
        assert back.prompts.neighbors == orig.prompts.neighbors


def test_counterfact_missing_paraphrases(tmp_path):
    rec = {"requested_rewrite": {"prompt": "{} speaks", "subject": "Ann", "relation_id": "P1",
                                 "target_new": {"str": "French"}, "target_true": {"str": "English"}},
           "neighborhood_prompts": []}
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(IngestError) as err:
        ingest_counterfact(path)
    assert err.value.field == "paraphrase_prompts" and err.value.line == 1


def test_to_template_multiword_subject():
    assert to_template("Where is Burj Khalifa located?", "Burj_Khalifa", 1, "q") == "Where is {s} located?"
    with pytest.raises(IngestError):
        to_template("Where is it?", "Burj_Khalifa", 3, "q")
