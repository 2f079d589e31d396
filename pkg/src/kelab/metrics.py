"""Model-free metric formulas: n-gram entropy, TF-IDF consistency, composite
score, overfit percentage and generalization-normalized accuracy."""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from sklearn.feature_extraction.text import TfidfVectorizer

from .errors import InputError, NormalizationError

DEFAULT_NGRAM_WEIGHTS = {2: 1 / 3, 3: 2 / 3}


@dataclass(frozen=True)
class GenEntropy:
    value: float
    per_n: dict = field(default_factory=dict)
    short_text: bool = False

    def __float__(self) -> float:
        return self.value


def ngram_entropy(text: str | Sequence[str], n_values: Sequence[int] = (2, 3),
                  weights: Sequence[float] | None = None) -> GenEntropy:
    """Weighted Shannon entropy (bits) of the n-gram frequency distributions."""
    tokens = text.split() if isinstance(text, str) else list(text)
    if weights is None:
        weights = [DEFAULT_NGRAM_WEIGHTS.get(n, 1.0) for n in n_values]
    weights = np.asarray(weights, dtype=float)
    if len(weights) != len(n_values) or np.any(weights < 0) or weights.sum() <= 0:
        raise InputError("need one non-negative weight per n")
    weights = weights / weights.sum()
    if len(tokens) < max(n_values):
        return GenEntropy(0.0, {n: 0.0 for n in n_values}, short_text=True)
    per_n = {}
    for n in n_values:
        counts = Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))
        total = sum(counts.values())
        per_n[n] = -sum((c / total) * math.log2(c / total) for c in counts.values())
    value = float(sum(w * per_n[n] for w, n in zip(weights, n_values)))
    return GenEntropy(max(value, 0.0), per_n)


@dataclass(frozen=True)
class Consistency:
    value: float  # percent
    empty_generation: bool = False


def tfidf_consistency(generated: str, reference: Sequence[str], idf_corpus: Sequence[str] | None = None) -> Consistency:
    """Cosine similarity (percent) between unigram TF-IDF vectors of the
    generated text and the concatenated reference documents.

    IDF is fitted on ``idf_corpus`` (default: the reference documents) with
    smoothing ``ln((1 + D) / (1 + df)) + 1``; term frequency is the raw count.
    """
    if not reference:
        raise InputError("reference corpus is empty")
    if not generated.split():
        return Consistency(0.0, empty_generation=True)
    vec = TfidfVectorizer(tokenizer=str.split, lowercase=False, token_pattern=None, smooth_idf=True, norm=None)
    vec.fit(list(idf_corpus or reference))
    gen, ref = vec.transform([generated, " ".join(reference)]).toarray()
    denom = float(np.linalg.norm(gen) * np.linalg.norm(ref))
    if denom == 0.0:
        return Consistency(0.0)
    return Consistency(float(np.clip(100.0 * gen @ ref / denom, 0.0, 100.0)))


def fluency_component(ge_edited: float, ge_base: float) -> float:
    if not ge_base > 0:
        raise NormalizationError("baseline generation entropy must be positive to normalize fluency")
    return min(100.0, 100.0 * ge_edited / ge_base)


def composite_score(es: float, ps: float, ns: float, ge_edited: float, ge_base: float, rs: float) -> float:
    """Mean of ES, PS, NS, baseline-normalized fluency (percent, capped at 100) and RS."""
    return (es + ps + ns + fluency_component(ge_edited, ge_base) + rs) / 5.0


def overfit_pct(c_org: int, c_abl: int) -> float:
    """Share of ablation-recovered two-hop answers that the hop-1 answer blocked."""
    if c_abl < 0 or c_org < 0:
        raise InputError("counts must be non-negative")
    if c_abl == 0:
        return 0.0
    return 100.0 * (c_abl - c_org) / c_abl


def normalized_two_hop(raw_acc: float, gen_acc: float) -> float:
    """Two-hop accuracy divided by generalization accuracy (both percent)."""
    if not gen_acc > 0:
        raise NormalizationError("generalization accuracy must be positive to normalize")
    return raw_acc / (gen_acc / 100.0)


def percent(successes: int, trials: int) -> float:
    return 100.0 * successes / trials if trials else 0.0
