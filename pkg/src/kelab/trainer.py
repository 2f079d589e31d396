"""Teach the toy model its fact graph.

Each example is a prompt whose next token is a single-token answer; the loss
is cross-entropy on that answer position only. Three pools feed an epoch:
plain single-hop questions (every template of every fact), plain two-hop
questions, and context-prefixed questions of both kinds.
"""

from __future__ import annotations

import logging
import math
import random
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, fields

import torch
import torch.nn.functional as F

from .corpus import FactGraph, render_template
from .errors import ConfigError, InputError
from .model import ModelState, batch_answer_logits
from .tokenizer import Vocab

log = logging.getLogger(__name__)

LR_SCHEDULES = ("constant", "cosine", "warmup_cosine")

Example = tuple[list[int], int]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 32
    learning_rate: float = 0.1
    momentum: float = 0.9
    lr_schedule: str = "warmup_cosine"
    warmup_epochs: int = 2
    grad_clip: float = 1.0
    recall_target: float = 0.99
    two_hop_target: float = 0.0
    seed: int = 0
    mix_single: float = 0.6
    mix_two_hop: float = 0.2
    mix_context: float = 0.2
    eval_every: int = 5
    stop_at_target: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("must be >= 0", "epochs")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "batch_size")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"must be one of {LR_SCHEDULES}", "lr_schedule")
        if not 0 < self.recall_target <= 1:
            raise ConfigError("must lie in (0, 1]", "recall_target")
        mixes = (self.mix_single, self.mix_two_hop, self.mix_context)
        if any(m < 0 for m in mixes) or abs(sum(mixes) - 1.0) > 1e-9:
            raise ConfigError(f"mix fractions must be non-negative and sum to 1, got {mixes}", "mix_single")
        if self.mix_single <= 0:
            raise ConfigError("single-hop fraction must be positive", "mix_single")
        if self.eval_every < 1:
            raise ConfigError("must be >= 1", "eval_every")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown fields {sorted(unknown)}")
        return cls(**dict(data))


@dataclass
class TrainReport:
    epochs_run: int = 0
    epoch_loss: list[float] = field(default_factory=list)
    recall_history: list[dict] = field(default_factory=list)
    single_hop_recall: float = 0.0
    two_hop_recall: float = 0.0
    best_epoch: int = 0
    reached_target: bool = False
    warning: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingSet:
    single: list[Example]
    two_hop: list[Example]
    context: list[Example]
    # recall probes: every template of every fact, and context-prefixed two-hop questions
    recall_single: list[Example]
    recall_two_hop: list[Example]


def build_examples(graph: FactGraph, vocab: Vocab) -> TrainingSet:
    prefix = graph.context_prefix
    single, canonical_ctx = [], []
    for t in graph.triples:
        rel = graph.relation(t.r)
        answer = vocab.id(t.o)
        for template in rel.templates:
            single.append((vocab.encode(render_template(template, t.s)), answer))
        if prefix:
            canonical_ctx.append((vocab.encode(f"{prefix} {render_template(rel.canonical, t.s)}"), answer))
    two_hop, two_hop_ctx = [], []
    for t in graph.triples:
        for r2 in graph.relations:
            if r2.id == t.r:
                continue
            final = graph.object_of(t.o, r2.id)
            question = render_template(graph.two_hop_template(t.r, r2.id), t.s)
            two_hop.append((vocab.encode(question), vocab.id(final)))
            if prefix:
                two_hop_ctx.append((vocab.encode(f"{prefix} {question}"), vocab.id(final)))
    return TrainingSet(single, two_hop, two_hop_ctx + canonical_ctx, list(single), two_hop_ctx or two_hop)


def pad_batch(examples: Sequence[Example], pad_id: int = 0) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    width = max(len(p) for p, _ in examples)
    ids = torch.full((len(examples), width), pad_id, dtype=torch.long)
    for i, (p, _) in enumerate(examples):
        ids[i, : len(p)] = torch.tensor(p, dtype=torch.long)
    last = torch.tensor([len(p) - 1 for p, _ in examples], dtype=torch.long)
    targets = torch.tensor([a for _, a in examples], dtype=torch.long)
    return ids, last, targets


def batch_loss(model: ModelState, ids: torch.Tensor, last: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(batch_answer_logits(model, ids, last), targets)


def greedy_recall(model: ModelState, examples: Sequence[Example], batch_size: int = 128) -> float:
    """Fraction of examples whose greedy first token is the answer.

    The first greedy step is the argmax at the last prompt position, so this
    is evaluated in right-padded batches.
    """
    if not examples:
        return 0.0
    hits = 0
    with torch.no_grad():
        ordered = sorted(examples, key=lambda e: len(e[0]))
        for i in range(0, len(ordered), batch_size):
            ids, last, targets = pad_batch(ordered[i : i + batch_size])
            pred = batch_answer_logits(model, ids, last).argmax(dim=-1)
            hits += int((pred == targets).sum())
    return hits / len(examples)


def _lr_at(cfg: TrainConfig, step: int, total: int, steps_per_epoch: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.learning_rate
    warm = cfg.warmup_epochs * steps_per_epoch if cfg.lr_schedule == "warmup_cosine" else 0
    if step < warm:
        return cfg.learning_rate * (step + 1) / warm
    progress = (step - warm) / max(1, total - warm)
    return cfg.learning_rate * 0.5 * (1 + math.cos(math.pi * min(1.0, progress)))


def _epoch_batches(data: TrainingSet, cfg: TrainConfig, rng: random.Random, cursors: dict) -> list[list[Example]]:
    n_single = len(data.single)
    pools = {"single": data.single, "two_hop": data.two_hop, "context": data.context}
    counts = {
        "single": n_single,
        "two_hop": round(n_single * cfg.mix_two_hop / cfg.mix_single) if data.two_hop else 0,
        "context": round(n_single * cfg.mix_context / cfg.mix_single) if data.context else 0,
    }
    batches = []
    for kind, pool in pools.items():
        chosen = []
        while len(chosen) < counts[kind]:
            order = cursors.get(kind)
            if not order:
                order = list(range(len(pool)))
                rng.shuffle(order)
                cursors[kind] = order
            chosen.append(pool[order.pop()])
        # group similar lengths so padding stays small
        chosen.sort(key=lambda e: len(e[0]))
        batches.extend(chosen[i : i + cfg.batch_size] for i in range(0, len(chosen), cfg.batch_size))
    rng.shuffle(batches)
    return batches


def train(model: ModelState, graph: FactGraph, cfg: TrainConfig, vocab: Vocab | None = None,
          data: TrainingSet | None = None) -> tuple[ModelState, TrainReport]:
    """Train with momentum SGD; return the best-recall state and a report."""
    vocab = vocab or graph.vocab()
    if len(vocab) > model.config.vocab_size:
        raise InputError(f"vocabulary of {len(vocab)} tokens exceeds model vocab_size={model.config.vocab_size}")
    report = TrainReport()
    if cfg.epochs == 0:
        report.warning = "epochs=0; model returned unchanged"
        return model, report
    data = data or build_examples(graph, vocab)
    longest = max(len(p) for p, _ in data.single + data.two_hop + data.context)
    if longest > model.config.max_seq_len:
        raise InputError(f"training prompt of {longest} tokens exceeds max_seq_len={model.config.max_seq_len}")

    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in model.params.items()}
    live = ModelState(model.config, leaves, model.version)
    opt = torch.optim.SGD(list(leaves.values()), lr=cfg.learning_rate, momentum=cfg.momentum)

    cursors: dict = {}
    steps_per_epoch = len(_epoch_batches(data, cfg, random.Random(0), {}))
    total_steps = steps_per_epoch * cfg.epochs
    step = 0
    best_key = (-1.0, -1.0)
    best_params = {k: v.detach().clone() for k, v in leaves.items()}
    for epoch in range(1, cfg.epochs + 1):
        running, n_seen = 0.0, 0
        for batch in _epoch_batches(data, cfg, rng, cursors):
            for group in opt.param_groups:
                group["lr"] = _lr_at(cfg, step, total_steps, steps_per_epoch)
            ids, last, targets = pad_batch(batch)
            loss = batch_loss(live, ids, last, targets)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(list(leaves.values()), cfg.grad_clip)
            opt.step()
            running += loss.item() * len(batch)
            n_seen += len(batch)
            step += 1
        report.epoch_loss.append(running / max(1, n_seen))
        report.epochs_run = epoch
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            single = greedy_recall(live, data.recall_single)
            two = greedy_recall(live, data.recall_two_hop)
            report.recall_history.append({"epoch": epoch, "single_hop": single, "two_hop": two})
            log.info("epoch %d loss %.4f single %.4f two-hop %.4f", epoch, report.epoch_loss[-1], single, two)
            if (single, two) > best_key:
                best_key = (single, two)
                best_params = {k: v.detach().clone() for k, v in leaves.items()}
                report.best_epoch = epoch
            if cfg.stop_at_target and single >= cfg.recall_target and two >= cfg.two_hop_target:
                break

    report.single_hop_recall, report.two_hop_recall = best_key
    report.reached_target = best_key[0] >= cfg.recall_target and best_key[1] >= cfg.two_hop_target
    if not report.reached_target:
        report.warning = (f"recall target not reached: single-hop {best_key[0]:.4f} "
                          f"(target {cfg.recall_target}), two-hop {best_key[1]:.4f} (target {cfg.two_hop_target})")
        log.warning(report.warning)
    return ModelState(model.config, best_params, model.version), report


def gradient_check(model: ModelState, examples: Sequence[Example], n_params: int = 20, eps: float = 1e-6,
                   seed: int = 0) -> list[dict]:
    """Compare autograd gradients of the answer loss with central differences.

    Runs in float64. Returns one record per sampled scalar parameter.
    """
    m64 = model.to(torch.float64)
    ids, last, targets = pad_batch(examples)
    leaves = {k: v.clone().requires_grad_(True) for k, v in m64.params.items()}
    loss = batch_loss(ModelState(m64.config, leaves), ids, last, targets)
    grads = torch.autograd.grad(loss, list(leaves.values()))
    analytic = dict(zip(leaves, grads))

    rng = random.Random(seed)
    names = list(m64.params)
    out = []
    for _ in range(n_params):
        name = rng.choice(names)
        flat = rng.randrange(m64[name].numel())

        def loss_at(delta: float) -> float:
            t = m64[name].clone()
            t.view(-1)[flat] += delta
            with torch.no_grad():
                return float(batch_loss(m64.with_params({name: t}), ids, last, targets))

        numeric = (loss_at(eps) - loss_at(-eps)) / (2 * eps)
        a = float(analytic[name].reshape(-1)[flat])
        denom = max(abs(a), abs(numeric), 1e-6)
        out.append({"param": name, "index": flat, "analytic": a, "numeric": numeric, "rel_err": abs(a - numeric) / denom})
    return out
