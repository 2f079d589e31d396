"""Whitespace tokenizer over a closed vocabulary.

Every entity and relation word is one token, so an answer is a single id
that can be banned, ranked, or compared by probability directly.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from pathlib import Path

from .errors import InputError

PAD = "<pad>"


class Vocab:
    def __init__(self, tokens: Iterable[str]):
        ordered: list[str] = [PAD]
        seen = {PAD}
        for tok in tokens:
            if not tok or any(ch.isspace() for ch in tok):
                raise InputError(f"invalid vocabulary token {tok!r}")
            if tok not in seen:
                seen.add(tok)
                ordered.append(tok)
        self.tokens: tuple[str, ...] = tuple(ordered)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @property
    def pad_id(self) -> int:
        return 0

    def id(self, tok: str) -> int:
        try:
            return self.index[tok]
        except KeyError:
            raise InputError(f"token {tok!r} is not in the vocabulary") from None

    def encode(self, text: str) -> list[int]:
        return [self.id(t) for t in text.split()]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def to_json(self) -> str:
        return json.dumps({"tokens": list(self.tokens)}, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        toks = json.loads(text)["tokens"]
        if not toks or toks[0] != PAD:
            raise InputError("vocabulary file must start with the pad token")
        return cls(toks[1:])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))
