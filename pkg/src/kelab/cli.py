"""Command-line pipeline over a run directory.

Layout::

    <run>/config.yaml  manifest.json
    <run>/corpus/      graph.jsonl counterfact.jsonl vocab.json
    <run>/checkpoints/ base.ckpt train_report.json
    <run>/edits/       edited.ckpt solutions.jsonl
    <run>/eval/        hop_accuracy.csv hop_records.jsonl language.csv language_records.jsonl
    <run>/analysis/    overfit.csv persistence.csv key_similarity.csv sweep.csv sweep_records.jsonl sweep.json
    <run>/report/      summary.csv plot_*.csv trends.json trends.md

Every file is written atomically and carries the config hash and seeds.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import torch
import yaml

from . import __version__
from .analyzer import (
    SWEEP_COLUMNS,
    SweepOptions,
    key_similarity_profile,
    layer_sweep,
    run_sweep_row,
    similarity_pairs,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, smoke_config
from .corpus import FactGraph, counterfact_from_dict, counterfact_to_dict, generate_fact_graph, instance_to_dict, make_counterfact_cases
from .editor import covariance_texts, estimate_covariances, make_plan, redundant_edit
from .errors import ConfigError, KelabError, MissingArtifactError
from .evaluator import base_entropies
from .ingest import ingest_counterfact, ingest_mquake
from .model import init_model
from .store import atomic_write_text, dumps_record, read_jsonl, write_csv, write_jsonl
from .tokenizer import Vocab
from .trainer import train

log = logging.getLogger("kelab")

STAGES = ("gen-corpus", "train", "edit", "eval", "analyze", "sweep", "report")


class Run:
    """Paths, provenance and artifact loaders for one run directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.run_dir)

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    @property
    def meta(self) -> dict:
        return {"config_hash": self.cfg.hash, "seeds": self.cfg.seeds, "version": __version__}

    def require(self, *parts: str) -> Path:
        p = self.path(*parts)
        if not p.exists():
            raise MissingArtifactError(f"missing prerequisite artifact {p}")
        return p

    def graph(self) -> FactGraph:
        return FactGraph.load(self.require("corpus", "graph.jsonl"))

    def vocab(self) -> Vocab:
        return Vocab.load(self.require("corpus", "vocab.json"))

    def cases(self):
        return [counterfact_from_dict(r) for r in read_jsonl(self.require("corpus", "counterfact.jsonl"))]

    def base(self):
        return load_checkpoint(self.require("checkpoints", "base.ckpt"))

    def instances(self, graph: FactGraph):
        n = self.cfg.eval.n_instances
        return list(graph.two_hop if n is None else graph.two_hop[:n])

    def eval_cases(self):
        cases = self.cases()
        n = self.cfg.eval.n_cases
        return cases if n is None else cases[:n]

    def key_stats(self, model, graph, vocab, layers):
        e = self.cfg.edit
        texts = covariance_texts(graph, e.covariance_positions, e.covariance_seed)
        return estimate_covariances(model, layers, texts, e.lam, vocab, source=f"{len(texts)} fact statements")

    def write_json(self, rel: str, obj) -> Path:
        p = self.path(rel)
        atomic_write_text(p, json.dumps({"_meta": self.meta, **obj}, sort_keys=True, indent=1, allow_nan=False) + "\n")
        return p

    def record_stage(self, stage: str, outputs: list[Path]) -> None:
        mpath = self.path("manifest.json")
        manifest = json.loads(mpath.read_text(encoding="utf-8")) if mpath.exists() else {}
        manifest.update(self.meta)
        manifest.setdefault("stages", {})[stage] = {
            "config_hash": self.cfg.hash,
            "outputs": sorted(str(p.relative_to(self.root)) for p in outputs),
        }
        atomic_write_text(mpath, json.dumps(manifest, sort_keys=True, indent=1) + "\n")

    def save_config(self) -> None:
        self.cfg.save(self.path("config.yaml"))


# commands -------------------------------------------------------------------

def cmd_gen_corpus(run: Run) -> list[Path]:
    c = run.cfg.corpus
    graph = generate_fact_graph(c.n_entities, c.n_relations, c.n_two_hop, c.seed, c.range_size, c.n_context)
    cases = make_counterfact_cases(graph, c.n_cases, c.seed, c.max_neighbors) if c.n_cases else []
    vocab = graph.vocab()
    outs = [run.path("corpus", "graph.jsonl"), run.path("corpus", "counterfact.jsonl"), run.path("corpus", "vocab.json")]
    graph.save(outs[0])
    write_jsonl(outs[1], (counterfact_to_dict(x) for x in cases), run.meta)
    atomic_write_text(outs[2], vocab.to_json())
    log.info("corpus: %d facts, %d two-hop instances, %d cases, %d tokens",
             len(graph.triples), len(graph.two_hop), len(cases), len(vocab))
    return outs


def cmd_train(run: Run) -> list[Path]:
    graph, vocab = run.graph(), run.vocab()
    model = init_model(run.cfg.model.build(len(vocab)))
    trained, report = train(model, graph, run.cfg.train, vocab)
    ckpt = run.path("checkpoints", "base.ckpt")
    save_checkpoint(trained, ckpt, meta={**run.meta, "single_hop_recall": report.single_hop_recall})
    rep = run.write_json("checkpoints/train_report.json", report.to_dict())
    if report.warning:
        log.warning(report.warning)
    return [ckpt, rep]


def cmd_edit(run: Run) -> list[Path]:
    graph, vocab, base = run.graph(), run.vocab(), run.base()
    e = run.cfg.edit
    if e.instance >= len(graph.two_hop):
        raise ConfigError(f"instance {e.instance} out of range ({len(graph.two_hop)} instances)", "edit.instance")
    inst = graph.two_hop[e.instance]
    plan = make_plan(inst.edit_fact, inst.edit_template, inst.edit_paraphrases, e.layers)
    stats = run.key_stats(base, graph, vocab, e.layers)
    edited, solutions = redundant_edit(base, plan, stats, vocab, e.solve_config())
    ckpt = run.path("edits", "edited.ckpt")
    save_checkpoint(edited, ckpt, meta={**run.meta, "plan": plan.plan_id, "layers": list(plan.layers)})
    recs = run.path("edits", "solutions.jsonl")
    write_jsonl(recs, ({"plan": plan.plan_id, "case_id": inst.case_id, **s.to_record()} for s in solutions), run.meta)
    return [ckpt, recs]


def _evaluate_layer_set(run: Run, with_cases: bool = True):
    graph, vocab, base = run.graph(), run.vocab(), run.base()
    layers = list(run.cfg.edit.layers)
    instances = run.instances(graph)
    cases = run.eval_cases() if with_cases else []
    stats = run.key_stats(base, graph, vocab, layers)
    opts = SweepOptions(K=run.cfg.eval.top_k, solve=run.cfg.edit.solve_config(),
                        n_generation_tokens=run.cfg.eval.generation_tokens)
    ge_base = base_entropies(base, cases, vocab, opts.n_generation_tokens) if cases else {}
    row = run_sweep_row(base, graph, layers, instances, cases, stats, vocab, opts, {}, ge_base)
    return row, (graph, vocab, base, instances)


def cmd_eval(run: Run) -> list[Path]:
    row, _ = _evaluate_layer_set(run)
    hop_csv = run.path("eval", "hop_accuracy.csv")
    write_csv(hop_csv, ["layers", "scenario", "edited_hop_acc", "unedited_hop_acc", "two_hop_acc", "n_instances"],
              [[row.key, s, r.edited_hop_acc, r.unedited_hop_acc, r.two_hop_acc, r.n_instances] for s, r in row.hop.items()],
              run.meta)
    hop_recs = run.path("eval", "hop_records.jsonl")
    write_jsonl(hop_recs, (r for r in row.instance_records() if r["table"] in ("hop", "edit_failure")), run.meta)
    outs = [hop_csv, hop_recs]
    if row.language:
        lang = row.language.summary()
        lang_csv = run.path("eval", "language.csv")
        write_csv(lang_csv, ["layers", *lang], [[row.key, *lang.values()]], run.meta)
        lang_recs = run.path("eval", "language_records.jsonl")
        write_jsonl(lang_recs, (r for r in row.instance_records() if r["table"] == "language"), run.meta)
        outs += [lang_csv, lang_recs]
    return outs


def cmd_analyze(run: Run) -> list[Path]:
    row, (graph, vocab, base, instances) = _evaluate_layer_set(run)
    outs = []
    if row.overfit:
        of = row.overfit.summary()
        p = run.path("analysis", "overfit.csv")
        write_csv(p, ["layers", "c_org", "c_abl", "overfit_pct", "n_instances", "conflicts", "violations"],
                  [[row.key, of["c_org"], of["c_abl"], of["overfit_pct"], of["n_instances"], of["conflicts"], of["violations"]]],
                  run.meta)
        r = run.path("analysis", "overfit_records.jsonl")
        write_jsonl(r, (x for x in row.instance_records() if x["table"] == "overfit"), run.meta)
        outs += [p, r]
    if row.persistence:
        p = run.path("analysis", "persistence.csv")
        write_csv(p, ["layers", "k", "fraction"], [[row.key, k + 1, v] for k, v in enumerate(row.persistence.values)], run.meta)
        outs.append(p)
    if instances:
        probe = run.cfg.sweep.probe_layers or range(base.config.n_layers)
        prof = key_similarity_profile(base, similarity_pairs(graph, instances), probe, vocab)
        p = run.path("analysis", "key_similarity.csv")
        write_csv(p, ["layer", "cosine", "pairs", "skipped"],
                  [[layer, s, prof.sample_count, prof.skipped[layer]] for layer, s in zip(prof.layers, prof.similarities)],
                  run.meta)
        outs.append(p)
    return outs


def cmd_sweep(run: Run) -> list[Path]:
    graph, vocab, base = run.graph(), run.vocab(), run.base()
    sets = [list(s) for s in run.cfg.sweep.layer_sets]
    layers = sorted({x for s in sets for x in s})
    stats = run.key_stats(base, graph, vocab, layers)
    opts = SweepOptions(K=run.cfg.eval.top_k, solve=run.cfg.edit.solve_config(),
                        n_generation_tokens=run.cfg.eval.generation_tokens,
                        probe_layers=list(run.cfg.sweep.probe_layers) if run.cfg.sweep.probe_layers else None)
    result = layer_sweep(base, graph, sets, run.instances(graph), run.eval_cases(), stats, vocab, opts)
    table = result.table()
    csv_path = run.path("analysis", "sweep.csv")
    write_csv(csv_path, SWEEP_COLUMNS, [[r[c] for c in SWEEP_COLUMNS] for r in table], run.meta)
    rec_path = run.path("analysis", "sweep_records.jsonl")
    write_jsonl(rec_path, (x for row in result.rows for x in row.instance_records()), run.meta)
    key_profile = asdict(result.key_profile) if result.key_profile else None
    summary = json.loads(dumps_record({"table": table, "plot_data": result.plot_data(),
                                       "trends": result.trends(), "key_profile": key_profile}))
    json_path = run.write_json("analysis/sweep.json", summary)
    return [csv_path, rec_path, json_path]


REPORT_COLUMNS = [
    "layers", "hop1_edit_hop1_gen", "hop1_edit_hop2_spec", "hop1_edit_2hq", "hop2_edit_hop1_spec",
    "hop2_edit_hop2_gen", "hop2_edit_2hq", "avg_2hq", "score", "efficacy", "generalization", "specificity",
    "fluency", "consistency", "overfit_pct", "persist_topK",
]


def cmd_report(run: Run) -> list[Path]:
    src = json.loads(run.require("analysis", "sweep.json").read_text(encoding="utf-8"))
    outs = []
    summary = run.path("report", "summary.csv")
    write_csv(summary, REPORT_COLUMNS, [[_num(r.get(c)) for c in REPORT_COLUMNS] for r in src["table"]], run.meta)
    outs.append(summary)
    for name, series in src["plot_data"].items():
        if run.cfg.report.plot_format == "jsonl":
            p = run.path("report", f"plot_{name}.jsonl")
            write_jsonl(p, series, run.meta)
        else:
            p = run.path("report", f"plot_{name}.csv")
            cols = list(series[0]) if series else ["x", "y"]
            write_csv(p, cols, [[_num(s.get(c)) for c in cols] for s in series], run.meta)
        outs.append(p)
    outs.append(run.write_json("report/trends.json", {"trends": src["trends"]}))
    md = run.path("report", "trends.md")
    atomic_write_text(md, trends_markdown(src["trends"], run.meta))
    outs.append(md)
    return outs


def _num(v):
    return float("nan") if v is None else v


def trends_markdown(trends: dict, meta: dict) -> str:
    """Readable account of which qualitative patterns the sweep reproduced."""
    def yes(d):
        return "observed" if d.get("observed") else "not observed"

    g, a, r = trends["generalization_decay"], trends["hop_order_asymmetry"], trends["redundant_beats_single"]
    lines = [f"<!-- {json.dumps(meta, sort_keys=True)} -->", "# Sweep trends", ""]
    lines.append(f"- Generalization decay with depth: {yes(g)}. Slopes per layer {g.get('slope_per_layer')}, "
                 f"key-similarity slope {g.get('key_similarity_slope')}.")
    if "early_layer" in a:
        lines.append(f"- Hop-order asymmetry: {yes(a)}. Layer {a['early_layer']} vs {a['late_layer']}: "
                     f"edit-hop1 2HQ {a['edit_hop1_2hq']}, edit-hop2 2HQ {a['edit_hop2_2hq']}.")
    else:
        lines.append("- Hop-order asymmetry: needs at least two single-layer rows.")
    if "best_single" in r:
        lines.append(f"- Redundant editing above best single layer: {yes(r)}. Best single [{r['best_single']}] "
                     f"{r['best_single_avg_2hq']:.1f}, best redundant [{r['best_redundant']}] {r['best_redundant_avg_2hq']:.1f}.")
    else:
        lines.append("- Redundant editing above best single layer: needs single and multi-layer rows.")
    lines.append("")
    lines.append("These are observations on the toy model and do not gate the build.")
    return "\n".join(lines) + "\n"


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "edit": cmd_edit,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def cmd_ingest(args) -> int:
    reader = ingest_mquake if args.format == "mquake" else ingest_counterfact
    items = reader(args.input)
    to_dict = instance_to_dict if args.format == "mquake" else counterfact_to_dict
    write_jsonl(args.output, (to_dict(x) for x in items), {"source": str(args.input), "format": args.format})
    log.info("ingested %d records into %s", len(items), args.output)
    return 0


# argument handling --------------------------------------------------------------

def apply_overrides(data: dict, pairs: list[str]) -> dict:
    """``section.field=value`` overrides; values parse as YAML scalars or lists."""
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError("cannot override inside a scalar", key)
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def resolve_config(args) -> RunConfig:
    if args.smoke:
        data = smoke_config().to_dict()
    elif args.config:
        data = RunConfig.load(args.config).to_dict()
    else:
        run_dir = args.run_dir or os.environ.get("KELAB_RUN_DIR")
        existing = Path(run_dir, "config.yaml") if run_dir else None
        data = RunConfig.load(existing).to_dict() if existing and existing.exists() else RunConfig().to_dict()
    if getattr(args, "layers", None):
        data["edit"]["layers"] = args.layers
    if getattr(args, "epochs", None) is not None:
        data["train"]["epochs"] = args.epochs
    apply_overrides(data, args.set or [])
    run_dir = args.run_dir or os.environ.get("KELAB_RUN_DIR")
    if run_dir:
        data["run_dir"] = run_dir
    return RunConfig.from_dict(data)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--run-dir", help="run directory (overrides config and KELAB_RUN_DIR)")
    common.add_argument("--smoke", action="store_true", help="use the built-in smoke configuration")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. train.epochs=10")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="kelab", description="Toy-scale knowledge editing lab.")
    parser.add_argument("--version", action="version", version=f"kelab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-corpus": "generate the synthetic fact graph and counterfactual cases",
        "train": "train the base model on the corpus",
        "edit": "apply one (redundant) edit and save the edited checkpoint",
        "eval": "hop accuracies and language metrics for the configured layer set",
        "analyze": "overfit, persistence and key-similarity analyses",
        "sweep": "evaluate every configured layer set",
        "report": "summary table, plot data and trend notes from the sweep",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text)
        if name in ("edit", "eval", "analyze"):
            p.add_argument("--layers", help="comma-separated edit layers, e.g. 1,3,5")
        if name == "train":
            p.add_argument("--epochs", type=int)
    p = sub.add_parser("run", parents=[common], help="run every stage in order")
    p.add_argument("--stages", default=",".join(STAGES), help="comma-separated subset of stages")
    p = sub.add_parser("init", parents=[common], help="write the resolved config into the run directory")
    p = sub.add_parser("ingest", help="convert an MQuAKE or COUNTERFACT style file to internal records")
    p.add_argument("format", choices=["mquake", "counterfact"])
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _threads() -> None:
    raw = os.environ.get("KELAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"KELAB_THREADS must be an integer, got {raw!r}") from None
    torch.set_num_threads(max(1, n))


def run_stages(cfg: RunConfig, stages) -> dict[str, list[Path]]:
    run = Run(cfg)
    run.save_config()
    done = {}
    for stage in stages:
        if stage not in COMMANDS:
            raise ConfigError(f"unknown stage {stage!r}", "stages")
        log.info("stage %s", stage)
        outs = COMMANDS[stage](run)
        run.record_stage(stage, outs)
        done[stage] = outs
    return done


def error_record(exc: BaseException) -> dict:
    rec = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("field", "line", "layer", "block"):
        if getattr(exc, attr, None) is not None:
            rec[attr] = getattr(exc, attr)
    return rec


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, MissingArtifactError):
        return 3
    return 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _threads()
        if args.command == "ingest":
            return cmd_ingest(args)
        cfg = resolve_config(args)
        if args.command == "init":
            Run(cfg).save_config()
            return 0
        stages = [s for s in args.stages.split(",") if s] if args.command == "run" else [args.command]
        run_stages(cfg, stages)
        return 0
    except KelabError as exc:
        print(json.dumps(error_record(exc), sort_keys=True), file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
