"""Watermarked token generation over a pluggable logit source.

Production deployments can plug any logit-exposing model behind the
LogitSource contract; everything in this repo runs against the n-gram
surrogate, which is cheap, deterministic, and exposes exactly the green-bias
mechanism the detection statistics depend on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import ValidationError
from .tokenization import TokenSequence, token_ids
from .watermark import GreenList, WatermarkKey, bias_logits


class LogitSource(Protocol):
    """Anything that maps a token-id context to a logit vector over the vocabulary."""

    vocab_size: int

    def __call__(self, context: Sequence[int]) -> np.ndarray: ...


class UniformLogitSource:
    """All-zero logits: every token equally likely. Used by closed-form oracles."""

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size
        self._logits = np.zeros(vocab_size, dtype=np.float64)

    def __call__(self, context: Sequence[int]) -> np.ndarray:
        return self._logits


@dataclass(frozen=True)
class SamplerConfig:
    max_tokens: int
    rng_seed: int
    temperature: float = 1.0
    end_token_id: int | None = None

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValidationError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.temperature <= 0.0:
            raise ValidationError(f"temperature must be positive, got {self.temperature}")


class NGramModel:
    """Order-n language model with additive smoothing over the full vocabulary.

    Counts are kept sparse; the conditional distribution for a context is
    (count + alpha) / (total + alpha * |V|), which is uniform for contexts
    never seen in training.
    """

    def __init__(self, order: int, alpha: float, vocab_size: int):
        if order < 1:
            raise ValidationError(f"order must be >= 1, got {order}")
        if alpha < 0.0:
            raise ValidationError(f"alpha must be nonnegative, got {alpha}")
        self.order = order
        self.alpha = alpha
        self.vocab_size = vocab_size
        self._counts: dict[tuple[int, ...], dict[int, int]] = {}
        self._totals: dict[tuple[int, ...], int] = {}
        self._cdf_cache: dict[tuple[int, ...], np.ndarray] = {}

    def observe(self, context: tuple[int, ...], token: int, count: int = 1) -> None:
        slot = self._counts.setdefault(context, {})
        slot[token] = slot.get(token, 0) + count
        self._totals[context] = self._totals.get(context, 0) + count
        self._cdf_cache.pop(context, None)

    def _context_key(self, context: Sequence[int]) -> tuple[int, ...]:
        k = self.order - 1
        if k == 0:
            return ()
        return tuple(int(t) for t in context[-k:])

    def probabilities(self, context: Sequence[int]) -> np.ndarray:
        key = self._context_key(context)
        counts = self._counts.get(key)
        v = self.vocab_size
        if counts is None and self.alpha == 0.0:
            # Unseen context with no smoothing mass: fall back to uniform.
            return np.full(v, 1.0 / v)
        probs = np.full(v, self.alpha, dtype=np.float64)
        if counts is not None:
            for tok, c in counts.items():
                probs[tok] += c
        total = self._totals.get(key, 0) + self.alpha * v
        return probs / total

    def __call__(self, context: Sequence[int]) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.probabilities(context))

    def cdf(self, context: Sequence[int]) -> np.ndarray:
        """Cumulative distribution for fast repeated sampling from one context."""
        key = self._context_key(context)
        cached = self._cdf_cache.get(key)
        if cached is None:
            cached = np.cumsum(self.probabilities(context))
            self._cdf_cache[key] = cached
        return cached

    def sample(self, context: Sequence[int], rng: np.random.Generator) -> int:
        return int(np.searchsorted(self.cdf(context), rng.random(), side="right"))

    def sample_iid(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Draw tokens independently from the empty-context distribution (order 1)."""
        if self.order != 1:
            raise ValidationError("sample_iid is only defined for order-1 models")
        cdf = self.cdf(())
        return np.searchsorted(cdf, rng.random(count), side="right").astype(np.int64)

    # -- persistence: one record per line, "ctx... token count" -------------

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"ngram {self.order} {self.alpha!r} {self.vocab_size}\n")
            for ctx in sorted(self._counts):
                slot = self._counts[ctx]
                prefix = " ".join(str(t) for t in ctx)
                for tok in sorted(slot):
                    if prefix:
                        fh.write(f"{prefix} {tok} {slot[tok]}\n")
                    else:
                        fh.write(f"{tok} {slot[tok]}\n")

    @staticmethod
    def load(path) -> "NGramModel":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 4 or header[0] != "ngram":
                raise ValidationError(f"{path} is not an n-gram counts file")
            model = NGramModel(int(header[1]), float(header[2]), int(header[3]))
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != model.order + 1:
                    raise ValidationError(f"bad record in {path}: {line.rstrip()!r}")
                ctx = tuple(int(t) for t in parts[: model.order - 1])
                model.observe(ctx, int(parts[-2]), int(parts[-1]))
        return model


def train_ngram(corpus: Iterable, order: int, alpha: float, vocab_size: int) -> NGramModel:
    """Maximum-likelihood counts with additive-alpha smoothing."""
    model = NGramModel(order, alpha, vocab_size)
    empty = True
    for seq in corpus:
        ids = token_ids(seq)
        if ids:
            empty = False
        k = order - 1
        for t in range(k, len(ids)):
            model.observe(ids[t - k : t], ids[t])
    if empty:
        raise ValidationError("cannot train an n-gram model on an empty corpus")
    return model


class PinnedSpanSource:
    """Wrap a logit source so fixed token spans appear at fixed output offsets.

    Used for constrained decoding: at a pinned position the wrapped logits are
    replaced by a one-hot spike, so the sampler emits the pinned token with
    probability ~1 while the whole stream still flows through the watermarked
    sampling path. Positions are offsets into the *generated* stream, measured
    from prompt_length.
    """

    _SPIKE = 1e9

    def __init__(self, base: LogitSource, pins: dict[int, int], prompt_length: int):
        self.base = base
        self.vocab_size = base.vocab_size
        self.prompt_length = prompt_length
        self._pins = dict(pins)

    @staticmethod
    def spread_spans(
        spans: Sequence[Sequence[int]], total_tokens: int, prompt_length: int
    ) -> dict[int, int]:
        """Lay out token spans at evenly spread offsets within the budget."""
        pins: dict[int, int] = {}
        if not spans:
            return pins
        slots = len(spans) + 1
        cursor = 0
        for i, span in enumerate(spans):
            start = max((total_tokens * (i + 1)) // slots - len(span) // 2, cursor)
            if start + len(span) > total_tokens:
                start = max(total_tokens - len(span), cursor)
            for j, tok in enumerate(span):
                pins[start + j] = int(tok)
            cursor = start + len(span)
        return pins

    def __call__(self, context: Sequence[int]) -> np.ndarray:
        pos = len(context) - self.prompt_length
        pinned = self._pins.get(pos)
        if pinned is None:
            return self.base(context)
        logits = np.full(self.vocab_size, -self._SPIKE, dtype=np.float64)
        logits[pinned] = self._SPIKE
        return logits


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    exps = np.exp(shifted)
    return exps / exps.sum()


def generate_watermarked(
    source: LogitSource,
    key: WatermarkKey,
    green: GreenList,
    cfg: SamplerConfig,
    prompt=(),
) -> TokenSequence:
    """Sample up to max_tokens through green-biased, temperature-scaled softmax.

    Returns only the newly generated tokens (the prompt is context, not output).
    """
    if source.vocab_size != green.vocab_size:
        raise ValidationError(
            f"logit source |V|={source.vocab_size} does not match green list |V|={green.vocab_size}"
        )
    rng = np.random.default_rng(cfg.rng_seed)
    context = list(token_ids(prompt))
    out: list[int] = []
    for _ in range(cfg.max_tokens):
        logits = np.asarray(source(context), dtype=np.float64)
        if logits.shape != (green.vocab_size,):
            raise ValidationError("logit source returned a vector of the wrong length")
        probs = _softmax(bias_logits(logits, green, key.delta) / cfg.temperature)
        tok = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
        tok = min(tok, green.vocab_size - 1)
        out.append(tok)
        context.append(tok)
        if cfg.end_token_id is not None and tok == cfg.end_token_id:
            break
    return TokenSequence(tuple(out))


def green_fraction(seq, green: GreenList) -> float:
    """Fraction of tokens on the green list; shares its counting with z_statistic."""
    ids = np.asarray(token_ids(seq), dtype=np.int64)
    if ids.size == 0:
        raise ValidationError("green fraction is undefined on an empty sequence")
    if ids.min() < 0 or ids.max() >= green.vocab_size:
        raise ValidationError("sequence contains token ids outside the vocabulary")
    return float(green.membership[ids].sum()) / ids.size


def expected_green_fraction_uniform(gamma: float, delta: float) -> float:
    """Closed-form per-token green probability for a uniform logit source."""
    boosted = gamma * math.exp(delta)
    return boosted / (boosted + (1.0 - gamma))
