"""Readers and writers for MQuAKE-style and COUNTERFACT-style record files.

Files are either one JSON object per line or a single top-level array.
Multi-word entity names are interned as one token by joining words with
underscores, and subject mentions in question text become ``{s}`` slots.
"""

from __future__ import annotations

import json
import re
from collections.abc import Iterable
from pathlib import Path

from .corpus import SLOT, CounterfactCase, FactTriple, PromptSet, TwoHopInstance
from .errors import IngestError, InputError
from .store import atomic_write_text, dumps_record


def intern(name: str) -> str:
    return "_".join(str(name).split())


def read_records(path: str | Path) -> list[tuple[int, dict]]:
    """``(line_number, record)`` pairs; arrays number records from 1."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    if not stripped:
        return []
    if stripped.startswith("["):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise IngestError(f"malformed JSON array: {exc}") from exc
        if not all(isinstance(r, dict) for r in data):
            raise IngestError("top-level array must contain objects")
        return list(enumerate(data, start=1))
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IngestError(f"malformed record: {exc}", line=lineno) from exc
        if not isinstance(rec, dict):
            raise IngestError("record is not an object", line=lineno)
        out.append((lineno, rec))
    return out


def _require(rec: dict, key: str, line: int, prefix: str = ""):
    if key not in rec or rec[key] is None:
        raise IngestError("missing required field", line=line, field=prefix + key)
    return rec[key]


def _entity(value, line: int, field: str) -> str:
    if isinstance(value, dict):
        if "str" not in value:
            raise IngestError("missing required field", line=line, field=field + ".str")
        value = value["str"]
    if not isinstance(value, str) or not value.strip():
        raise IngestError("expected a non-empty entity string", line=line, field=field)
    return intern(value)


def to_template(text: str, subject: str, line: int, field: str) -> str:
    """Question text with the subject mention replaced by a whitespace-isolated slot."""
    if "{}" in text:
        out = text.replace("{}", f" {SLOT} ", 1)
    else:
        surfaces = sorted({subject, subject.replace("_", " ")}, key=len, reverse=True)
        out = None
        for surface in surfaces:
            idx = text.rfind(surface)
            if idx >= 0:
                out = text[:idx] + f" {SLOT} " + text[idx + len(surface):]
                break
        if out is None:
            raise IngestError(f"subject {subject!r} does not occur in {text!r}", line=line, field=field)
    return " ".join(out.split())


def _rewrite(rec: dict, line: int) -> dict:
    rw = _require(rec, "requested_rewrite", line)
    if isinstance(rw, list):
        if not rw:
            raise IngestError("empty rewrite list", line=line, field="requested_rewrite")
        rw = rw[0]
    if not isinstance(rw, dict):
        raise IngestError("expected an object", line=line, field="requested_rewrite")
    subject = _entity(_require(rw, "subject", line, "requested_rewrite."), line, "requested_rewrite.subject")
    relation = rw.get("relation", rw.get("relation_id"))
    if relation is None:
        raise IngestError("missing required field", line=line, field="requested_rewrite.relation")
    return {
        "subject": subject,
        "relation": intern(relation),
        "target_new": _entity(_require(rw, "target_new", line, "requested_rewrite."), line, "requested_rewrite.target_new"),
        "target_true": _entity(_require(rw, "target_true", line, "requested_rewrite."), line, "requested_rewrite.target_true"),
        "prompt": rw.get("prompt"),
    }


def _hops(rec: dict, key: str, line: int) -> list[dict]:
    hops = _require(rec, key, line)
    if not isinstance(hops, list) or len(hops) != 2:
        raise IngestError("expected exactly two single-hop entries", line=line, field=key)
    for i, h in enumerate(hops):
        for k in ("question", "answer"):
            if k not in h:
                raise IngestError("missing required field", line=line, field=f"{key}[{i}].{k}")
    return hops


def parse_mquake_record(rec: dict, line: int) -> TwoHopInstance:
    rw = _rewrite(rec, line)
    hops = _hops(rec, "single_hops", line)
    question = rec.get("question")
    if question is None:
        qs = rec.get("questions")
        if not qs:
            raise IngestError("missing required field", line=line, field="questions")
        question = qs[0]
    answer = _entity(_require(rec, "answer", line), line, "answer")
    new_answer = _entity(_require(rec, "new_answer", line), line, "new_answer")
    o1 = _entity(hops[0]["answer"], line, "single_hops[0].answer")
    o2 = _entity(hops[1]["answer"], line, "single_hops[1].answer")
    labeled = (rec.get("orig") or {}).get("triples_labeled")

    if rw["subject"] == o1 and rw["target_true"] == o2:
        edited_hop = "hop2"
    elif rw["target_true"] == o1 and (labeled is None or intern(labeled[0][0]) == rw["subject"]):
        edited_hop = "hop1"
    else:
        raise IngestError("requested_rewrite matches neither hop", line=line, field="requested_rewrite")

    if labeled is not None:
        if len(labeled) != 2 or any(len(t) != 3 for t in labeled):
            raise IngestError("expected two (s, r, o) triples", line=line, field="orig.triples_labeled")
        s, r1, r2 = intern(labeled[0][0]), intern(labeled[0][1]), intern(labeled[1][1])
    elif edited_hop == "hop1":
        s, r1, r2 = rw["subject"], rw["relation"], "hop2_relation"
    else:
        raise IngestError("hop-1 subject unknown for a hop-2 edit", line=line, field="orig.triples_labeled")
    if edited_hop == "hop1":
        r1 = rw["relation"]
    else:
        r2 = rw["relation"]

    new_hops = rec.get("new_single_hops")
    try:
        if edited_hop == "hop1":
            hop1 = FactTriple(s, r1, o1, rw["target_new"])
            hop2 = FactTriple(o1, r2, o2)
            bridge_post = rw["target_new"]
            hop2_post = _entity(new_hops[1]["answer"], line, "new_single_hops[1].answer") if new_hops else new_answer
        else:
            hop1 = FactTriple(s, r1, o1)
            hop2 = FactTriple(o1, r2, o2, rw["target_new"])
            bridge_post = o1
            hop2_post = rw["target_new"]
    except InputError as exc:
        raise IngestError(str(exc), line=line, field="requested_rewrite") from exc
    if answer != o2:
        raise IngestError("answer disagrees with the second hop's answer", line=line, field="answer")
    if new_answer != hop2_post:
        raise IngestError("new_answer disagrees with the post-edit chain", line=line, field="new_answer")

    hop1_q = to_template(hops[0].get("cloze") or hops[0]["question"], s, line, "single_hops[0].question")
    hop2_q = to_template(hops[1].get("cloze") or hops[1]["question"], o1, line, "single_hops[1].question")
    hop1_p = [to_template(hops[0]["question"], s, line, "single_hops[0].question")]
    hop2_p = [to_template(hops[1]["question"], o1, line, "single_hops[1].question")]
    if rw["prompt"]:
        # the rewrite's cloze prompt is the edit template for the edited hop
        edit_t = to_template(rw["prompt"], rw["subject"], line, "requested_rewrite.prompt")
        if edited_hop == "hop1":
            hop1_q = edit_t
        else:
            hop2_q = edit_t
    return TwoHopInstance(
        hop1=hop1,
        hop2=hop2,
        edited_hop=edited_hop,
        question=to_template(question, s, line, "questions"),
        hop1_question=hop1_q,
        hop1_paraphrases=tuple(hop1_p),
        hop2_question=hop2_q,
        hop2_paraphrases=tuple(hop2_p),
        hop1_answer_pre=o1,
        hop1_answer_post=bridge_post,
        hop2_subject_post=bridge_post,
        hop2_answer_pre=o2,
        hop2_answer_post=hop2_post,
        two_hop_answer_pre=o2,
        two_hop_answer_post=new_answer,
        case_id=int(rec.get("case_id", line)),
    )


def ingest_mquake(path: str | Path) -> list[TwoHopInstance]:
    return [parse_mquake_record(rec, line) for line, rec in read_records(path)]


def mquake_record(inst: TwoHopInstance) -> dict:
    """Inverse of :func:`parse_mquake_record` up to entity interning."""
    fact = inst.edit_fact
    edit_template = inst.edit_template
    rw = {
        "prompt": edit_template.replace(SLOT, "{}"),
        "subject": fact.s,
        "relation": fact.r,
        "target_new": {"str": fact.o_star},
        "target_true": {"str": fact.o},
    }
    hop1_para = inst.hop1_paraphrases[0] if inst.hop1_paraphrases else inst.hop1_question
    hop2_para = inst.hop2_paraphrases[0] if inst.hop2_paraphrases else inst.hop2_question
    return {
        "case_id": inst.case_id,
        "requested_rewrite": [rw],
        "questions": [inst.question.replace(SLOT, inst.hop1.s)],
        "answer": inst.two_hop_answer_pre,
        "new_answer": inst.two_hop_answer_post,
        "single_hops": [
            {"question": hop1_para.replace(SLOT, inst.hop1.s), "cloze": inst.hop1_question.replace(SLOT, inst.hop1.s),
             "answer": inst.hop1_answer_pre},
            {"question": hop2_para.replace(SLOT, inst.hop2.s), "cloze": inst.hop2_question.replace(SLOT, inst.hop2.s),
             "answer": inst.hop2_answer_pre},
        ],
        "new_single_hops": [
            {"question": hop1_para.replace(SLOT, inst.hop1.s), "answer": inst.hop1_answer_post},
            {"question": hop2_para.replace(SLOT, inst.hop2_subject_post), "answer": inst.hop2_answer_post},
        ],
        "orig": {"triples_labeled": [[inst.hop1.s, inst.hop1.r, inst.hop1.o], [inst.hop2.s, inst.hop2.r, inst.hop2.o]]},
    }


def parse_counterfact_record(rec: dict, line: int) -> CounterfactCase:
    rw = _rewrite(rec, line)
    if not rw["prompt"]:
        raise IngestError("missing required field", line=line, field="requested_rewrite.prompt")
    s = rw["subject"]
    paraphrases = _require(rec, "paraphrase_prompts", line)
    neighborhood = _require(rec, "neighborhood_prompts", line)
    if not paraphrases:
        raise IngestError("at least one paraphrase is required", line=line, field="paraphrase_prompts")
    try:
        fact = FactTriple(s, rw["relation"], rw["target_true"], rw["target_new"])
    except InputError as exc:
        raise IngestError(str(exc), line=line, field="requested_rewrite") from exc
    neighbors = []
    for item in neighborhood:
        if isinstance(item, dict):
            subj = intern(item["subject"]) if item.get("subject") else None
            neighbors.append((subj, " ".join(str(item["prompt"]).split())))
        else:
            neighbors.append((None, " ".join(str(item).split())))
    prompts = PromptSet(
        canonical=to_template(rw["prompt"], s, line, "requested_rewrite.prompt"),
        paraphrases=tuple(to_template(p, s, line, "paraphrase_prompts") for p in paraphrases),
        neighbors=tuple(neighbors),
        context_prefix="",
        generation_prompts=tuple(" ".join(str(p).split()) for p in rec.get("generation_prompts") or ()),
        reference_snippets=tuple(" ".join(str(p).split()) for p in rec.get("attribute_snippets") or ()),
    )
    return CounterfactCase(fact, prompts, int(rec.get("case_id", line)))


def ingest_counterfact(path: str | Path) -> list[CounterfactCase]:
    return [parse_counterfact_record(rec, line) for line, rec in read_records(path)]


def counterfact_record(case: CounterfactCase) -> dict:
    f, p = case.fact, case.prompts
    return {
        "case_id": case.case_id,
        "requested_rewrite": {
            "prompt": p.canonical.replace(SLOT, "{}"),
            "subject": f.s,
            "relation_id": f.r,
            "target_new": {"str": f.o_star},
            "target_true": {"str": f.o},
        },
        "paraphrase_prompts": [t.replace(SLOT, f.s) for t in p.paraphrases],
        "neighborhood_prompts": [{"subject": n, "prompt": t} if n else t for n, t in p.neighbors],
        "generation_prompts": list(p.generation_prompts),
        "attribute_snippets": list(p.reference_snippets),
    }


def write_records(path: str | Path, records: Iterable[dict]) -> None:
    atomic_write_text(path, "".join(dumps_record(r) + "\n" for r in records))


def template_tokens(texts: Iterable[str]) -> set[str]:
    """Whitespace tokens of templates or rendered prompts, slot excluded."""
    out: set[str] = set()
    for t in texts:
        out.update(re.sub(re.escape(SLOT), " ", t).split())
    return out
