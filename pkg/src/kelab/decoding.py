"""Deterministic greedy decoding with a banned-token set."""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import torch

from .errors import ConfigError, InputError
from .model import ModelState, check_tokens, hidden_states, unembed


@dataclass
class DecodeResult:
    generated_tokens: list[int]
    step_logits: list[torch.Tensor] = field(repr=False)
    # (token, probability) pairs of the unmasked distribution, best first
    step_topk: list[list[tuple[int, float]]] = field(repr=False)
    # argmax of the unmasked distribution at each step
    step_argmax: list[int] = field(default_factory=list)


def greedy_decode(
    model: ModelState,
    prompt: Sequence[int],
    max_tokens: int,
    banned: Iterable[int] = (),
    stop: Iterable[int] = (),
    top_k: int = 10,
) -> DecodeResult:
    """Emit the most probable non-banned token at each step.

    A stop token is emitted and then ends generation. When the running
    sequence outgrows ``max_seq_len`` only the most recent window is fed.
    """
    vocab_size = model.config.vocab_size
    check_tokens(model, prompt)
    if max_tokens < 1:
        raise InputError("max_tokens must be >= 1")
    banned_set = {int(t) for t in banned}
    stop_set = {int(t) for t in stop}
    if len({t for t in banned_set if 0 <= t < vocab_size}) >= vocab_size:
        raise ConfigError("banned set covers the entire vocabulary", "banned")
    mask = torch.zeros(vocab_size, dtype=torch.bool)
    for t in banned_set:
        if 0 <= t < vocab_size:
            mask[t] = True

    seq = list(prompt)
    window = model.config.max_seq_len
    result = DecodeResult([], [], [], [])
    k = min(top_k, vocab_size)
    with torch.no_grad():
        for _ in range(max_tokens):
            ids = torch.tensor(seq[-window:], dtype=torch.long)[None]
            logits = unembed(model, hidden_states(model, ids)[0, -1])
            probs = torch.softmax(logits.double(), dim=-1)
            top_p, top_i = torch.topk(probs, k)
            result.step_logits.append(logits)
            result.step_topk.append([(int(i), float(p)) for i, p in zip(top_i, top_p)])
            result.step_argmax.append(int(torch.argmax(logits)))
            tok = int(torch.argmax(logits.masked_fill(mask, float("-inf"))))
            result.generated_tokens.append(tok)
            seq.append(tok)
            if tok in stop_set:
                break
    return result
