"""Controllable stand-in for a suspicious retrieval-augmented LLM.

The response channel is a token-preservation mixture: each emitted token is,
independently with probability p, the next unconsumed token of the top-1
retrieved document (cycling if the document runs out), and otherwise a sample
from a background language model. This is the minimal channel that lets
watermark signal survive from a retrieved document into a response while
staying analytically tractable: the expected response green fraction is
exactly p * g_doc + (1-p) * g_background.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .generation import NGramModel
from .retrieval import Embedder, VectorIndex, retrieve
from .tokenization import Vocabulary

PRESET_EASY = "easy_prompt"
PRESET_HARD = "hard_prompt"

# Calibration choices for this simulator, not measured constants: the easy
# preset leaves about half the response verbatim, the hard preset paraphrases
# more aggressively.
_PRESET_P = {PRESET_EASY: 0.50, PRESET_HARD: 0.35}
_PRESET_LENGTH = 100


@dataclass(frozen=True)
class ChannelConfig:
    preservation_prob: float
    response_length: int
    background: NGramModel
    rng_seed: int

    def __post_init__(self):
        if not 0.0 <= self.preservation_prob <= 1.0:
            raise ValidationError(
                f"preservation probability must lie in [0,1], got {self.preservation_prob}"
            )
        if self.response_length < 1:
            raise ValidationError(f"response length must be >= 1, got {self.response_length}")


def preset(name: str, background: NGramModel, rng_seed: int) -> ChannelConfig:
    """Named channel presets mirroring easy vs hard system prompts."""
    if name not in _PRESET_P:
        raise ValidationError(f"unknown preset {name!r}; expected one of {sorted(_PRESET_P)}")
    return ChannelConfig(
        preservation_prob=_PRESET_P[name],
        response_length=_PRESET_LENGTH,
        background=background,
        rng_seed=rng_seed,
    )


def derive_seed(base_seed: int, *parts) -> int:
    """Stable 64-bit sub-seed from a base seed and arbitrary string/int parts."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(base_seed).encode("utf-8"))
    for part in parts:
        h.update(b"\x1f")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


class RagSimulator:
    """Retrieve top-K, then emit a response through the preservation channel."""

    def __init__(
        self,
        index: VectorIndex,
        doc_tokens: dict[str, tuple[int, ...]],
        channel: ChannelConfig,
        k: int,
        vocabulary: Vocabulary,
    ):
        if k < 1:
            raise ValidationError(f"K must be >= 1, got {k}")
        missing = [d for d in index.doc_ids if d not in doc_tokens]
        if missing:
            raise ValidationError(f"no token stream for indexed docs {missing[:3]!r}...")
        self.index = index
        self.doc_tokens = doc_tokens
        self.channel = channel
        self.k = k
        self.vocabulary = vocabulary
        # Retrieval is deterministic for a fixed index, so repeated audits of
        # the same question skip the exhaustive scan.
        self._top1_cache: dict[str, str] = {}

    @classmethod
    def build(
        cls,
        corpus,
        embedder: Embedder,
        channel: ChannelConfig,
        k: int,
        vocabulary: Vocabulary,
    ) -> "RagSimulator":
        """Index a corpus of Documents and pre-encode their token streams."""
        from .retrieval import build_index

        index = build_index(((d.doc_id, d.text) for d in corpus), embedder)
        doc_tokens = {d.doc_id: vocabulary.encode(d.text).ids for d in corpus}
        return cls(index, doc_tokens, channel, k, vocabulary)

    def respond_tokens(self, query: str, embedder: Embedder, seed: int | None = None) -> np.ndarray:
        """The channel in token space; respond() decodes this to text."""
        if len(self.index) == 0:
            raise ValidationError("simulator index is empty")
        if seed is None:
            seed = derive_seed(self.channel.rng_seed, query)
        rng = np.random.default_rng(seed)
        top1 = self._top1_cache.get(query)
        if top1 is None:
            top1 = retrieve(self.index, query, self.k, embedder).hits[0][0]
            self._top1_cache[query] = top1
        source = np.asarray(self.doc_tokens[top1], dtype=np.int64)

        length = self.channel.response_length
        flags = rng.random(length) < self.channel.preservation_prob
        if source.size == 0:
            flags[:] = False
        out = np.empty(length, dtype=np.int64)
        n_doc = int(flags.sum())
        if n_doc:
            out[flags] = np.resize(source, n_doc)
        n_bg = length - n_doc
        if n_bg:
            background = self.channel.background
            if background.order == 1:
                out[~flags] = background.sample_iid(n_bg, rng)
            else:
                positions = np.flatnonzero(~flags)
                for pos in positions:
                    out[pos] = background.sample(out[:pos], rng)
        return out

    def respond(self, query: str, embedder: Embedder, seed: int | None = None) -> str:
        return self.vocabulary.decode(self.respond_tokens(query, embedder, seed))
