"""Rank-one editing of MLP down-projections, single-layer and redundant.

For one layer the edit is::

    u  = (C + lam*I)^-1 k*
    L  = (v* - W k*) / (u . k*)
    dW = L u^T            # so (W + dW) k* = v*

where ``k*`` is the subject key averaged over contexts, ``v*`` an optimized
MLP output that makes the model emit the new object, and ``C`` the uncentered
second moment of keys over sample text. Redundant editing solves this
independently per layer against the unedited model and then installs every
edited down-projection at once.

Linear algebra runs in float64 numpy; the model itself stays float32.
"""

from __future__ import annotations

import random
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import torch
import torch.nn.functional as F

from .corpus import FactGraph, FactTriple, render_template
from .errors import CovarianceError, DegenerateKeyError, EditPlanError, InputError, KelabError, SolveError
from .model import ModelState, check_tokens, down_proj_name, forward, hidden_states, replace_layer_weights, run_blocks, unembed
from .tokenizer import Vocab

DEGENERATE_DENOM = 1e-10


@dataclass(frozen=True)
class KeyStats:
    layer: int
    C: np.ndarray
    sample_count: int
    lam: float
    source: str = ""

    def regularized(self) -> np.ndarray:
        return self.C + self.lam * np.eye(self.C.shape[0])


@dataclass(frozen=True)
class ValueSolveConfig:
    max_steps: int = 200
    target_loss: float = 5e-2
    # Adam step in units of the residual RMS at the edit site
    lr: float = 0.1
    # proximity weight: moving v by the residual norm at the edit site costs this share of the initial loss
    penalty_fraction: float = 0.1


@dataclass
class ValueSolution:
    v_star: np.ndarray
    v_orig: np.ndarray
    nll_curve: list[float]
    loss_curve: list[float]
    penalty_weight: float

    @property
    def final_loss(self) -> float:
        return self.loss_curve[-1]


@dataclass
class EditSolution:
    layer: int
    k_star: np.ndarray
    v_star: np.ndarray
    lambda_vec: np.ndarray
    u: np.ndarray  # (C + lam I)^-1 k*
    diagnostics: dict = field(default_factory=dict)

    @property
    def delta_w(self) -> np.ndarray:
        return np.outer(self.lambda_vec, self.u)

    def to_record(self) -> dict:
        d = self.diagnostics
        return {
            "layer": self.layer,
            "lambda_norm": float(np.linalg.norm(self.lambda_vec)),
            "u_dot_k": float(self.u @ self.k_star),
            "residual": d.get("residual"),
            "solve_losses": d.get("loss_curve", []),
            "solve_nll": d.get("nll_curve", []),
            "k_norm": float(np.linalg.norm(self.k_star)),
            "v_norm": float(np.linalg.norm(self.v_star)),
        }


@dataclass
class EditPlan:
    fact: FactTriple
    layers: list[int]
    edit_prompt: str
    key_contexts: list[str]
    plan_id: str = ""
    solutions: dict[int, EditSolution] = field(default_factory=dict)

    def __post_init__(self):
        if self.fact.o_star is None:
            raise InputError("edit plan needs a fact with a counterfactual target")
        if not self.layers:
            raise InputError("edit plan needs at least one layer")
        if any(b <= a for a, b in zip(self.layers, self.layers[1:])):
            raise InputError(f"plan layers must be strictly increasing, got {self.layers}")
        if not self.key_contexts:
            raise InputError("edit plan needs at least one key context")
        if not self.plan_id:
            self.plan_id = f"{self.fact.s}|{self.fact.r}|{self.fact.o_star}@{','.join(map(str, self.layers))}"

    def validate_depth(self, n_layers: int) -> None:
        if self.layers[0] < 0 or self.layers[-1] >= n_layers:
            raise InputError(f"plan layers {self.layers} outside model depth {n_layers}")


def make_plan(fact: FactTriple, template: str, paraphrases: Sequence[str], layers: Iterable[int]) -> EditPlan:
    """Plan editing ``fact`` via its template; keys average the template and its paraphrases."""
    contexts = [render_template(t, fact.s) for t in (template, *paraphrases)]
    return EditPlan(fact, list(layers), contexts[0], contexts)


def parse_layers(text: str) -> list[int]:
    try:
        layers = [int(x) for x in str(text).replace(" ", "").split(",") if x != ""]
    except ValueError:
        raise InputError(f"layer list must be comma-separated integers, got {text!r}") from None
    if not layers:
        raise InputError("empty layer list")
    return sorted(set(layers))


# keys and covariance -------------------------------------------------------

def _encode(vocab: Vocab | None, text) -> list[int]:
    if isinstance(text, str):
        if vocab is None:
            raise InputError("a vocabulary is required to encode text")
        return vocab.encode(text)
    return list(text)


def covariance_texts(graph: FactGraph, n_positions: int = 1000, seed: int = 0) -> list[str]:
    """Rendered fact statements totalling at least ``n_positions`` tokens."""
    rng = random.Random(seed)
    texts, total = [], 0
    while total < n_positions:
        t = rng.choice(graph.triples)
        rel = graph.relation(t.r)
        text = f"{render_template(rng.choice(rel.templates), t.s)} {t.o}"
        texts.append(text)
        total += len(text.split())
    return texts


def estimate_covariances(model: ModelState, layers: Iterable[int], sample_texts: Sequence, lam: float | None = None,
                         vocab: Vocab | None = None, source: str = "") -> dict[int, KeyStats]:
    """Uncentered key second moment ``(1/N) sum k k^T`` for several layers in one pass."""
    if not sample_texts:
        raise InputError("covariance needs at least one sample text")
    if lam is not None and lam < 0:
        raise InputError("regularization must be >= 0")
    layers = sorted(set(layers))
    m = model.config.d_mlp
    sums = {layer: np.zeros((m, m)) for layer in layers}
    count = 0
    for text in sample_texts:
        _, acts = forward(model, _encode(vocab, text), capture_layers=layers)
        for a in acts:
            k = a.key.double().numpy()
            sums[a.layer] += k.T @ k
        count += acts[0].key.shape[0]
    out = {}
    for layer in layers:
        c = sums[layer] / count
        c = 0.5 * (c + c.T)
        reg = 1e-4 * float(np.mean(np.diag(c))) if lam is None else float(lam)
        out[layer] = KeyStats(layer, c, count, reg, source or f"{len(sample_texts)} texts")
    return out


def estimate_covariance(model: ModelState, layer: int, sample_texts: Sequence, lam: float | None = None,
                        vocab: Vocab | None = None) -> KeyStats:
    return estimate_covariances(model, [layer], sample_texts, lam, vocab)[layer]


def subject_position(tokens: Sequence[int], subject_id: int) -> int:
    positions = [i for i, t in enumerate(tokens) if t == subject_id]
    if not positions:
        raise InputError("subject token not found in prompt")
    return positions[-1]


def subject_keys(model: ModelState, layers: Iterable[int], prompts: Sequence, subject: str | int,
                 vocab: Vocab | None = None) -> dict[int, np.ndarray]:
    """Mean subject key per layer over ``prompts`` (last occurrence of the subject)."""
    if not prompts:
        raise InputError("need at least one prompt")
    layers = sorted(set(layers))
    sid = vocab.id(subject) if isinstance(subject, str) else int(subject)
    sums = {layer: np.zeros(model.config.d_mlp) for layer in layers}
    for i, prompt in enumerate(prompts):
        toks = _encode(vocab, prompt)
        try:
            pos = subject_position(toks, sid)
        except InputError:
            raise InputError(f"prompt {i}: subject {subject!r} not found in {prompt!r}") from None
        _, acts = forward(model, toks, capture_layers=layers)
        for a in acts:
            sums[a.layer] += a.key[pos].double().numpy()
    return {layer: s / len(prompts) for layer, s in sums.items()}


def extract_subject_key(model: ModelState, layer: int, prompts: Sequence, subject: str | int,
                        vocab: Vocab | None = None) -> np.ndarray:
    return subject_keys(model, [layer], prompts, subject, vocab)[layer]


# value optimization ---------------------------------------------------------

def solve_value(model: ModelState, layer: int, prompt, target: str | int, vocab: Vocab | None = None,
                cfg: ValueSolveConfig | None = None, subject: str | int | None = None) -> ValueSolution:
    """Optimize the MLP output at the subject position so the prompt answers ``target``.

    The subject position is the last occurrence of ``subject``; when no
    subject is given the last prompt token is used.
    """
    cfg = cfg or ValueSolveConfig()
    toks = _encode(vocab, prompt)
    ids = check_tokens(model, toks)[None]
    tid = vocab.id(target) if isinstance(target, str) else int(target)
    if not 0 <= tid < model.config.vocab_size:
        raise InputError(f"target id {tid} outside vocabulary")
    if subject is None:
        pos = len(toks) - 1
    else:
        sid = vocab.id(subject) if isinstance(subject, str) else int(subject)
        pos = subject_position(toks, sid)

    if layer == model.config.n_layers - 1 and pos != len(toks) - 1:
        # nothing after the last block can carry the override to the answer position
        raise SolveError(f"layer {layer} is the final block; an edit at position {pos} cannot reach the answer "
                         f"at position {len(toks) - 1}", loss_curve=[], layer=layer)
    capture = {layer: None}
    with torch.no_grad():
        hidden_states(model, ids, capture=capture)  # type: ignore[arg-type]
    acts = capture[layer]
    resid = acts.resid_in[None]
    v_orig = acts.mlp_out[pos].detach().clone()
    # the block output sets the scale downstream layer norms see; v_orig alone can be tiny
    scale = float((acts.resid_in[pos] + acts.attn_out[pos] + v_orig).norm())
    target_t = torch.tensor([tid])

    def nll_of(v: torch.Tensor) -> torch.Tensor:
        h = run_blocks(model, resid, start=layer, mlp_override={layer: (pos, v)})
        return F.cross_entropy(unembed(model, h[:, -1]), target_t)

    with torch.no_grad():
        nll0 = float(nll_of(v_orig))
    weight = cfg.penalty_fraction * max(nll0, cfg.target_loss) / max(scale ** 2, 1e-12)
    nll_curve, loss_curve = [nll0], [nll0]
    if nll0 < cfg.target_loss:
        v_np = v_orig.double().numpy()
        return ValueSolution(v_np, v_np.copy(), nll_curve, loss_curve, weight)

    v = v_orig.clone().requires_grad_(True)
    opt = torch.optim.Adam([v], lr=cfg.lr * max(scale, 1e-6) / v.numel() ** 0.5)
    for _ in range(cfg.max_steps):
        opt.zero_grad()
        nll = nll_of(v)
        loss = nll + weight * (v - v_orig).pow(2).sum()
        loss.backward()
        opt.step()
        with torch.no_grad():
            cur = nll_of(v)
            nll_curve.append(float(cur))
            loss_curve.append(float(cur + weight * (v - v_orig).pow(2).sum()))
        if nll_curve[-1] < cfg.target_loss:
            break
    if nll_curve[-1] >= cfg.target_loss:
        raise SolveError(f"layer {layer}: target loss {nll_curve[-1]:.4f} above {cfg.target_loss} after "
                         f"{cfg.max_steps} steps", loss_curve=loss_curve, layer=layer)
    return ValueSolution(v.detach().double().numpy(), v_orig.double().numpy(), nll_curve, loss_curve, weight)


# closed-form update ---------------------------------------------------------

def compute_update(W, k_star, v_star, stats: KeyStats | None = None, layer: int | None = None) -> EditSolution:
    """Rank-one update mapping ``k_star`` to ``v_star``; ``stats=None`` means C = I, lam = 0."""
    W = np.asarray(W, dtype=np.float64)
    k = np.asarray(k_star, dtype=np.float64).reshape(-1)
    v = np.asarray(v_star, dtype=np.float64).reshape(-1)
    if W.shape != (v.size, k.size):
        raise InputError(f"W shape {W.shape} incompatible with k* ({k.size}) and v* ({v.size})")
    if stats is None:
        u = k.copy()
    else:
        if stats.C.shape != (k.size, k.size):
            raise InputError(f"covariance shape {stats.C.shape} incompatible with k* ({k.size})")
        try:
            factor = la.cho_factor(stats.regularized(), lower=True, check_finite=True)
        except (la.LinAlgError, ValueError) as exc:
            raise CovarianceError(f"C + lam*I is not positive definite (lam={stats.lam:g}); "
                                  f"increase the regularization: {exc}") from exc
        u = la.cho_solve(factor, k)
    denom = float(u @ k)
    if not np.isfinite(denom) or denom < DEGENERATE_DENOM:
        raise DegenerateKeyError(f"degenerate key: (C^-1 k*)^T k* = {denom:.3e}")
    lam_vec = (v - W @ k) / denom
    sol = EditSolution(layer if layer is not None else (stats.layer if stats else -1), k, v, lam_vec, u)
    new_out = W @ k + lam_vec * denom
    sol.diagnostics["residual"] = float(np.linalg.norm(new_out - v) / max(np.linalg.norm(v), 1e-300))
    return sol


def least_squares_update(W, k_star, v_star) -> np.ndarray:
    """Minimum-norm update ``(v* - W k*) k*^T / (k*^T k*)``."""
    W = np.asarray(W, dtype=np.float64)
    k = np.asarray(k_star, dtype=np.float64).reshape(-1)
    v = np.asarray(v_star, dtype=np.float64).reshape(-1)
    return np.outer(v - W @ k, k) / float(k @ k)


def _edited_weight(model: ModelState, solution: EditSolution) -> torch.Tensor:
    w = model.down_proj(solution.layer).double().numpy()
    delta = solution.delta_w
    if delta.shape != w.shape:
        raise InputError(f"update shape {delta.shape} != down-projection shape {w.shape}")
    return torch.from_numpy(w + delta).to(model.dtype)


def apply_edit(model: ModelState, solution: EditSolution) -> ModelState:
    if not 0 <= solution.layer < model.config.n_layers:
        raise InputError(f"solution layer {solution.layer} outside model depth {model.config.n_layers}")
    return replace_layer_weights(model, solution.layer, _edited_weight(model, solution))


# single and redundant edits ---------------------------------------------------

def solve_layer(model: ModelState, plan: EditPlan, layer: int, stats: KeyStats, vocab: Vocab,
                solve_cfg: ValueSolveConfig | None = None, k_star: np.ndarray | None = None) -> EditSolution:
    """Solve one layer of ``plan`` against ``model`` (never against an edited copy)."""
    if k_star is None:
        k_star = extract_subject_key(model, layer, plan.key_contexts, plan.fact.s, vocab)
    value = solve_value(model, layer, plan.edit_prompt, plan.fact.o_star, vocab, solve_cfg, subject=plan.fact.s)
    W = model.down_proj(layer).double().numpy()
    sol = compute_update(W, k_star, value.v_star, stats, layer)
    sol.diagnostics.update(loss_curve=value.loss_curve, nll_curve=value.nll_curve, penalty_weight=value.penalty_weight)
    return sol


def redundant_edit(model: ModelState, plan: EditPlan, stats_per_layer: Mapping[int, KeyStats] | Sequence[KeyStats],
                   vocab: Vocab, solve_cfg: ValueSolveConfig | None = None,
                   cache: dict | None = None) -> tuple[ModelState, list[EditSolution]]:
    """Insert ``plan.fact`` into every planned layer.

    Each layer is solved independently against the unedited ``model``; the
    edited down-projections are then installed together. Any failed layer
    aborts the whole plan. ``cache`` (keyed by fact and layer) lets sweeps
    reuse solutions, which is sound because every solve sees the same base.
    """
    plan.validate_depth(model.config.n_layers)
    if not isinstance(stats_per_layer, Mapping):
        stats_per_layer = {s.layer: s for s in stats_per_layer}
    missing = [layer for layer in plan.layers if layer not in stats_per_layer]
    if missing:
        raise InputError(f"no key statistics for layers {missing}")

    todo = [layer for layer in plan.layers if cache is None or _cache_key(plan, layer) not in cache]
    keys = subject_keys(model, todo, plan.key_contexts, plan.fact.s, vocab) if todo else {}
    solutions, failures = [], {}
    for layer in plan.layers:
        ck = _cache_key(plan, layer)
        if cache is not None and ck in cache:
            cached = cache[ck]
            if isinstance(cached, KelabError):
                failures[layer] = str(cached)
                continue
            solutions.append(cached)
            continue
        try:
            sol = solve_layer(model, plan, layer, stats_per_layer[layer], vocab, solve_cfg, k_star=keys[layer])
        except KelabError as exc:
            failures[layer] = str(exc)
            if cache is not None:
                cache[ck] = exc
            continue
        if cache is not None:
            cache[ck] = sol
        solutions.append(sol)
    if failures:
        raise EditPlanError(f"plan {plan.plan_id} failed at layers {sorted(failures)}", diagnostics=failures)

    updates = {down_proj_name(s.layer): _edited_weight(model, s) for s in solutions}
    plan.solutions = {s.layer: s for s in solutions}
    return model.with_params(updates), solutions


def _cache_key(plan: EditPlan, layer: int) -> tuple:
    return (plan.fact, plan.edit_prompt, tuple(plan.key_contexts), layer)
