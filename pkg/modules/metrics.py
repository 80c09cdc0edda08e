"""Caption metrics: corpus BLEU, ROUGE-L, METEOR (exact match), CIDEr.

Everything here operates on tokenized captions (sequences of lowercase words)
and returns raw scores: BLEU/ROUGE/METEOR in [0, 1], CIDEr in [0, 10].
`score_corpus` converts to the reported scale.
"""

from __future__ import annotations

import logging
import math
import re
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field, fields
from typing import Final

from modules.enums import CiderVariant, MetricName
from modules.exceptions import DataError, ShapeError

log = logging.getLogger(__name__)

type Words = Sequence[str]
type NGram = tuple[str, ...]
type NGramCounts = Counter[NGram]

MAX_N: Final = 4
ROUGE_BETA_SQUARED: Final = 1.2
METEOR_ALPHA: Final = 0.9  # F_mean = PR / (alpha P + (1 - alpha) R) = 10PR / (R + 9P)
METEOR_GAMMA: Final = 0.5
METEOR_THETA: Final = 3.0
CIDER_SCALE: Final = 10.0
CIDER_D_SIGMA: Final = 6.0

_PUNCT = re.compile(r"[^\w\s]|_")


def tokenize(text: str) -> tuple[str, ...]:
    """Lowercase, turn punctuation into spaces and split on whitespace."""
    return tuple(_PUNCT.sub(" ", text.lower()).split())


def ngrams(words: Words, n: int) -> NGramCounts:
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def _check_corpus(candidates: Sequence[Words], references: Sequence[Sequence[Words]]) -> None:
    if len(candidates) != len(references):
        msg = f"{len(candidates)} candidates but {len(references)} reference sets"
        raise ShapeError(msg)
    for refs in references:
        if not refs:
            msg = "every candidate needs at least one reference"
            raise DataError(msg)


# ---------------------------------------------------------------- BLEU


def _closest_ref_length(cand_len: int, refs: Sequence[Words]) -> int:
    # ties go to the shorter reference
    return min((len(r) for r in refs), key=lambda length: (abs(length - cand_len), length))


def bleu(candidates: Sequence[Words], references: Sequence[Sequence[Words]], max_n: int = MAX_N) -> tuple[float, ...]:
    """Corpus BLEU-1..max_n with clipped counts summed before the ratio; no smoothing."""
    _check_corpus(candidates, references)
    if not candidates:
        log.warning("BLEU requested on an empty candidate corpus; returning zeros.")
        return (0.0,) * max_n
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references, strict=True):
        cand_len += len(cand)
        ref_len += _closest_ref_length(len(cand), refs)
        for k in range(1, max_n + 1):
            counts = ngrams(cand, k)
            ceiling: NGramCounts = Counter()
            for ref in refs:
                ceiling |= ngrams(ref, k)
            matches[k - 1] += sum(min(c, ceiling[g]) for g, c in counts.items())
            totals[k - 1] += sum(counts.values())
    if cand_len == 0:
        return (0.0,) * max_n
    brevity = min(1.0, math.exp(1.0 - ref_len / cand_len))
    scores: list[float] = []
    log_sum = 0.0
    for k in range(max_n):
        if matches[k] == 0 or totals[k] == 0:
            # a zero precision zeroes this and every higher order
            scores.extend([0.0] * (max_n - k))
            break
        log_sum += math.log(matches[k] / totals[k])
        scores.append(brevity * math.exp(log_sum / (k + 1)))
    return tuple(scores)


# ---------------------------------------------------------------- ROUGE


def lcs_length(a: Words, b: Words) -> int:
    previous = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b):
            current.append(previous[j] + 1 if x == y else max(previous[j + 1], current[j]))
        previous = current
    return previous[-1]


def rouge_l(candidate: Words, references: Sequence[Words], beta_squared: float = ROUGE_BETA_SQUARED) -> float:
    """Best LCS F-measure over the references; `beta_squared` weights recall."""
    if not references:
        msg = "rouge_l needs at least one reference"
        raise DataError(msg)
    if not candidate:
        return 0.0
    best = 0.0
    for ref in references:
        if not ref:
            continue
        lcs = lcs_length(candidate, ref)
        if lcs == 0:
            continue
        precision = lcs / len(candidate)
        recall = lcs / len(ref)
        best = max(best, (1 + beta_squared) * precision * recall / (recall + beta_squared * precision))
    return best


def rouge_n(candidate: Words, references: Sequence[Words], n: int = 2) -> float:
    """N-gram recall pooled over all references."""
    cand = ngrams(candidate, n)
    overlap = total = 0
    for ref in references:
        ref_counts = ngrams(ref, n)
        overlap += sum(min(c, cand[g]) for g, c in ref_counts.items())
        total += sum(ref_counts.values())
    return overlap / total if total else 0.0


# ---------------------------------------------------------------- METEOR


def _align(candidate: Words, reference: Words) -> list[tuple[int, int]]:
    """Greedy left-to-right exact-match alignment as (cand_pos, ref_pos) pairs."""
    used: set[int] = set()
    pairs: list[tuple[int, int]] = []
    for i, word in enumerate(candidate):
        for j, ref_word in enumerate(reference):
            if j not in used and ref_word == word:
                used.add(j)
                pairs.append((i, j))
                break
    return pairs


def _meteor_single(candidate: Words, reference: Words) -> float:
    pairs = _align(candidate, reference)
    matches = len(pairs)
    if matches == 0:
        return 0.0
    precision = matches / len(candidate)
    recall = matches / len(reference)
    f_mean = precision * recall / (METEOR_ALPHA * precision + (1 - METEOR_ALPHA) * recall)
    chunks = 1 + sum(1 for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]) if not (i1 == i0 + 1 and j1 == j0 + 1))
    penalty = METEOR_GAMMA * (chunks / matches) ** METEOR_THETA
    return f_mean * (1.0 - penalty)


def meteor_lite(candidate: Words, references: Sequence[Words]) -> float:
    if not references:
        msg = "meteor_lite needs at least one reference"
        raise DataError(msg)
    return max(_meteor_single(candidate, ref) for ref in references)


# ---------------------------------------------------------------- CIDEr


@dataclass(frozen=True, slots=True)
class CorpusStats:
    """Reference document frequencies: df[n-1][g] counts images whose references contain g."""

    df: tuple[Mapping[NGram, int], ...]
    n_images: int

    def idf(self, n: int, gram: NGram) -> float:
        return math.log(self.n_images / max(self.df[n - 1].get(gram, 0), 1))


def build_corpus_stats(reference_sets: Sequence[Sequence[Words]], max_n: int = MAX_N) -> CorpusStats:
    if not reference_sets:
        msg = "cannot build CIDEr statistics from an empty reference corpus"
        raise DataError(msg)
    df: list[Counter[NGram]] = [Counter() for _ in range(max_n)]
    for refs in reference_sets:
        for n in range(1, max_n + 1):
            present: set[NGram] = set()
            for ref in refs:
                present.update(ngrams(ref, n))
            df[n - 1].update(present)
    return CorpusStats(tuple(dict(d) for d in df), len(reference_sets))


type _Vector = dict[NGram, float]


def _tfidf(words: Words, n: int, stats: CorpusStats) -> tuple[_Vector, float]:
    counts = ngrams(words, n)
    total = sum(counts.values())
    if total == 0:
        return {}, 0.0
    vec = {g: (c / total) * stats.idf(n, g) for g, c in counts.items()}
    return vec, math.sqrt(sum(v * v for v in vec.values()))


def _similarity(
    cand: tuple[_Vector, float],
    ref: tuple[_Vector, float],
    length_gap: int,
    variant: CiderVariant,
) -> float:
    (g_vec, g_norm), (r_vec, r_norm) = cand, ref
    if g_norm == 0.0 or r_norm == 0.0:
        return 0.0
    match variant:
        case CiderVariant.PLAIN:
            dot = sum(v * r_vec.get(g, 0.0) for g, v in g_vec.items())
            return dot / (g_norm * r_norm)
        case CiderVariant.CIDER_D:
            dot = sum(min(v, r_vec.get(g, 0.0)) * r_vec.get(g, 0.0) for g, v in g_vec.items())
            return dot / (g_norm * r_norm) * math.exp(-(length_gap**2) / (2 * CIDER_D_SIGMA**2))


def cider(
    candidate: Words,
    references: Sequence[Words],
    stats: CorpusStats,
    variant: CiderVariant = CiderVariant.PLAIN,
) -> float:
    """Per-image CIDEr in [0, 10]: 10 x mean over n of the mean cosine to each reference."""
    if not references:
        msg = "cider needs at least one reference"
        raise DataError(msg)
    max_n = len(stats.df)
    total = 0.0
    for n in range(1, max_n + 1):
        cand_vec = _tfidf(candidate, n, stats)
        total += sum(
            _similarity(cand_vec, _tfidf(ref, n, stats), len(candidate) - len(ref), variant) for ref in references
        ) / len(references)
    return CIDER_SCALE * total / max_n


@dataclass(slots=True)
class CiderScorer:
    """CIDEr against a fixed reference corpus; reference vectors are computed once per image."""

    stats: CorpusStats
    variant: CiderVariant = CiderVariant.PLAIN
    _cache: dict[tuple[tuple[str, ...], ...], list[list[tuple[_Vector, float]]]] = field(
        default_factory=dict, repr=False
    )

    @classmethod
    def from_references(
        cls, reference_sets: Sequence[Sequence[Words]], variant: CiderVariant = CiderVariant.PLAIN
    ) -> CiderScorer:
        return cls(build_corpus_stats(reference_sets), variant)

    def __call__(self, candidate: Words, references: Sequence[Words]) -> float:
        if not references:
            msg = "cider needs at least one reference"
            raise DataError(msg)
        key = tuple(tuple(r) for r in references)
        ref_vectors = self._cache.get(key)
        if ref_vectors is None:
            ref_vectors = [[_tfidf(ref, n, self.stats) for ref in key] for n in range(1, len(self.stats.df) + 1)]
            self._cache[key] = ref_vectors
        total = 0.0
        for n, per_ref in enumerate(ref_vectors, start=1):
            cand_vec = _tfidf(candidate, n, self.stats)
            total += sum(
                _similarity(cand_vec, vec, len(candidate) - len(ref), self.variant)
                for vec, ref in zip(per_ref, key, strict=True)
            ) / len(key)
        return CIDER_SCALE * total / len(ref_vectors)


# ---------------------------------------------------------------- diversity


def distinct_n(captions: Sequence[Words], n: int) -> float:
    """Distinct n-grams over all n-grams produced across the corpus."""
    pooled: NGramCounts = Counter()
    for caption in captions:
        pooled.update(ngrams(caption, n))
    total = sum(pooled.values())
    return len(pooled) / total if total else 0.0


def vocabulary_usage(captions: Sequence[Words]) -> int:
    return len({word for caption in captions for word in caption})


# ---------------------------------------------------------------- reports


@dataclass(frozen=True, slots=True)
class MetricReport:
    """Reported scale: BLEU/METEOR/ROUGE-L in [0, 100], CIDEr in [0, 1000]."""

    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor: float
    rouge_l: float
    cider: float

    def as_row(self) -> dict[MetricName, float]:
        return dict(zip(MetricName, (getattr(self, f.name) for f in fields(self)), strict=True))


@dataclass(frozen=True, slots=True)
class DiversityReport:
    distinct_1: float
    distinct_2: float
    vocabulary: int
    mean_length: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def score_corpus(
    candidates: Sequence[Words],
    references: Sequence[Sequence[Words]],
    variant: CiderVariant = CiderVariant.PLAIN,
) -> MetricReport:
    """Every accuracy metric over a corpus; CIDEr statistics come from `references`."""
    _check_corpus(candidates, references)
    if not candidates:
        log.warning("Scoring an empty corpus; every metric is 0.")
        return MetricReport(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    b1, b2, b3, b4 = bleu(candidates, references)
    scorer = CiderScorer.from_references(references, variant)
    count = len(candidates)
    pairs = list(zip(candidates, references, strict=True))
    meteor = sum(meteor_lite(c, r) for c, r in pairs) / count
    rouge = sum(rouge_l(c, r) for c, r in pairs) / count
    cider_mean = sum(scorer(c, r) for c, r in pairs) / count
    return MetricReport(
        bleu1=100 * b1,
        bleu2=100 * b2,
        bleu3=100 * b3,
        bleu4=100 * b4,
        meteor=100 * meteor,
        rouge_l=100 * rouge,
        cider=100 * cider_mean,
    )


def score_diversity(captions: Sequence[Words]) -> DiversityReport:
    return DiversityReport(
        distinct_1=distinct_n(captions, 1),
        distinct_2=distinct_n(captions, 2),
        vocabulary=vocabulary_usage(captions),
        mean_length=sum(len(c) for c in captions) / len(captions) if captions else 0.0,
    )
