"""Dataset-distortion and stealth metrics: corpus BLEU and perplexity
filtering rate over fixed-size word blocks.

BLEU here is corpus-level, n-grams up to 4 with uniform weights and brevity
penalty, whitespace word tokenization. Smoothing rule, documented so scores
reproduce elsewhere: when a higher-order precision (n >= 2) has zero matches,
add one to both its numerator and denominator; a zero unigram precision is
left at zero, so disjoint corpora score 0.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from .errors import ValidationError
from .generation import NGramModel
from .tokenization import Vocabulary

log = logging.getLogger(__name__)

MIN_PARTIAL_BLOCK_WORDS = 10


class PerplexityScorer(Protocol):
    def __call__(self, block: str) -> float: ...


def _ngram_counts(words: Sequence[str], n: int) -> dict[tuple[str, ...], int]:
    counts: dict[tuple[str, ...], int] = {}
    for i in range(len(words) - n + 1):
        gram = tuple(words[i : i + n])
        counts[gram] = counts.get(gram, 0) + 1
    return counts


def bleu(reference: Sequence[str], candidate: Sequence[str], max_n: int = 4) -> float:
    """Corpus BLEU of candidate texts against index-paired references."""
    if len(reference) != len(candidate):
        raise ValidationError(
            f"reference and candidate lists differ in length ({len(reference)} vs {len(candidate)})"
        )
    if not reference:
        raise ValidationError("BLEU needs at least one pair")

    matches = [0] * max_n
    totals = [0] * max_n
    ref_len = 0
    cand_len = 0
    for ref_text, cand_text in zip(reference, candidate):
        ref_words = ref_text.split()
        cand_words = cand_text.split()
        ref_len += len(ref_words)
        cand_len += len(cand_words)
        for n in range(1, max_n + 1):
            cand_counts = _ngram_counts(cand_words, n)
            if not cand_counts:
                continue
            ref_counts = _ngram_counts(ref_words, n)
            totals[n - 1] += sum(cand_counts.values())
            matches[n - 1] += sum(
                min(c, ref_counts.get(gram, 0)) for gram, c in cand_counts.items()
            )

    if cand_len == 0 or totals[0] == 0 or matches[0] == 0:
        return 0.0

    log_precision = 0.0
    for n in range(1, max_n + 1):
        m, t = matches[n - 1], totals[n - 1]
        if t == 0:
            continue  # no n-grams of this order exist; drop it from the mean
        if m == 0 and n >= 2:
            m, t = m + 1, t + 1
        if m == 0:
            return 0.0
        log_precision += math.log(m / t) / max_n

    brevity = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return brevity * math.exp(log_precision)


def split_blocks(doc: str, words_per_block: int) -> list[str]:
    """Chunk a document into consecutive word blocks.

    A final partial block is kept when it has at least MIN_PARTIAL_BLOCK_WORDS
    words, otherwise it is merged into the previous block.
    """
    if words_per_block < 1:
        raise ValidationError(f"words_per_block must be >= 1, got {words_per_block}")
    words = doc.split()
    if not words:
        return []
    blocks = [words[i : i + words_per_block] for i in range(0, len(words), words_per_block)]
    if len(blocks) > 1 and len(blocks[-1]) < MIN_PARTIAL_BLOCK_WORDS:
        tail = blocks.pop()
        blocks[-1] = blocks[-1] + tail
    return [" ".join(b) for b in blocks]


@dataclass
class BlockReport:
    perplexities: list[float]
    threshold: float
    filtered_fraction: float
    failures: list[tuple[int, str]] = field(default_factory=list)


def filtering_rate(blocks: Sequence[str], scorer: PerplexityScorer, threshold: float) -> BlockReport:
    """Fraction of blocks whose perplexity lies strictly above the threshold."""
    blocks = list(blocks)
    if not blocks:
        raise ValidationError("filtering rate needs at least one block")
    perplexities: list[float] = []
    failures: list[tuple[int, str]] = []
    filtered = 0
    for i, block in enumerate(blocks):
        try:
            ppl = float(scorer(block))
        except Exception as exc:  # noqa: BLE001 - per-block isolation is the contract
            log.warning("perplexity scorer failed on block %d: %s", i, exc)
            failures.append((i, str(exc)))
            continue
        perplexities.append(ppl)
        if ppl > threshold:
            filtered += 1
    if not perplexities:
        raise ValidationError("perplexity scoring failed on every block")
    return BlockReport(
        perplexities=perplexities,
        threshold=threshold,
        filtered_fraction=filtered / len(perplexities),
        failures=failures,
    )


def curation_threshold(original_blocks: Sequence[str], scorer: PerplexityScorer) -> float:
    """The curation rule: maximum block perplexity observed on the original data."""
    report = filtering_rate(original_blocks, scorer, math.inf)
    return max(report.perplexities)


class NGramPerplexityScorer:
    """Deterministic perplexity from an n-gram model + the detector vocabulary."""

    def __init__(self, model: NGramModel, vocabulary: Vocabulary):
        if model.alpha <= 0.0:
            raise ValidationError("perplexity scoring needs alpha > 0 (no zero-probability tokens)")
        self.model = model
        self.vocabulary = vocabulary

    def __call__(self, block: str) -> float:
        ids = self.vocabulary.encode(block).ids
        if not ids:
            raise ValidationError("cannot score an empty block")
        k = self.model.order - 1
        log_prob = 0.0
        for t, tok in enumerate(ids):
            context = ids[max(t - k, 0) : t]
            log_prob += math.log(self.model.probabilities(context)[tok])
        return math.exp(-log_prob / len(ids))


class GatewayPerplexityScorer:
    """Perplexity from an endpoint that returns per-token log-probabilities.

    Expects the gateway's post_json to reach a completions-style endpoint
    answering {"logprobs": [...]} for {"model": ..., "input": ...}.
    """

    def __init__(self, gateway, url: str, model: str):
        self.gateway = gateway
        self.url = url
        self.model = model

    def __call__(self, block: str) -> float:
        data = self.gateway.post_json(self.url, {"model": self.model, "input": block})
        logprobs = data.get("logprobs")
        if not isinstance(logprobs, list) or not logprobs:
            raise ValidationError("scoring endpoint returned no logprobs")
        return math.exp(-sum(float(x) for x in logprobs) / len(logprobs))


def metric_lines(rows: Sequence[dict]) -> str:
    """Line-delimited metric records: metric, scope, value, config fingerprint."""
    import json

    return "".join(json.dumps(row, sort_keys=True) + "\n" for row in rows)
