"""Vocabulary and token-sequence layer.

Detection math downstream only ever sees integer token ids, so the tokenizer
here is deliberately simple: greedy longest-match over an explicit vocabulary,
with a designated ``<unk>`` token absorbing anything unmatchable. Whitespace is
part of the tokens themselves (a token may begin with a space), which keeps
word boundaries stable under decode/encode round trips.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import ValidationError

UNKNOWN_TOKEN = "<unk>"

# One "piece" = optional leading whitespace + a run of non-whitespace.
_PIECE_RE = re.compile(r"\s*\S+")


@dataclass(frozen=True)
class TokenSequence:
    """An immutable sequence of token ids."""

    ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    @staticmethod
    def of(ids: Iterable[int]) -> "TokenSequence":
        return TokenSequence(tuple(int(i) for i in ids))

    def concat(self, other: "TokenSequence") -> "TokenSequence":
        return TokenSequence(self.ids + other.ids)


def token_ids(seq) -> tuple[int, ...]:
    """Accept a TokenSequence or any iterable of ints and return plain ids."""
    if isinstance(seq, TokenSequence):
        return seq.ids
    return tuple(int(i) for i in seq)


def word_pieces(text: str) -> list[str]:
    """Split text into whitespace-preserving word pieces.

    Every piece except possibly the first carries its leading whitespace, so
    ``"".join(word_pieces(x))`` reproduces x up to trailing whitespace.
    """
    return _PIECE_RE.findall(text)


class Vocabulary:
    """Bijective token-string <-> dense-id table with greedy longest-match encoding."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if len(tokens) < 2:
            raise ValidationError("vocabulary needs at least 2 tokens")
        index: dict[str, int] = {}
        for i, tok in enumerate(tokens):
            if tok == "":
                raise ValidationError(f"empty token at line {i + 1}")
            if "\n" in tok:
                raise ValidationError(f"token at line {i + 1} contains a newline")
            if tok in index:
                raise ValidationError(
                    f"duplicate token {tok!r} at line {i + 1} (first seen at line {index[tok] + 1})"
                )
            index[tok] = i
        self._tokens = tokens
        self._index = index
        self._trie = _build_trie(tokens)

    @property
    def size(self) -> int:
        return len(self._tokens)

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    @property
    def unk_id(self) -> int | None:
        return self._index.get(UNKNOWN_TOKEN)

    def id_of(self, token: str) -> int:
        return self._index[token]

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._tokens):
            raise ValidationError(f"token id {token_id} out of range for |V|={len(self._tokens)}")
        return self._tokens[token_id]

    def __contains__(self, token: str) -> bool:
        return token in self._index

    @classmethod
    def from_corpus(
        cls,
        texts: Iterable[str],
        max_size: int | None = None,
        extra_tokens: Iterable[str] = (),
    ) -> "Vocabulary":
        """Build a vocabulary of word pieces seen in texts, ``<unk>`` at id 0.

        With max_size set, the most frequent pieces are kept (ties broken
        lexicographically) so the result is deterministic.
        """
        freq: dict[str, int] = {}
        for text in texts:
            for piece in word_pieces(text):
                freq[piece] = freq.get(piece, 0) + 1
        freq.pop(UNKNOWN_TOKEN, None)
        extras = {tok for tok in extra_tokens if tok and tok != UNKNOWN_TOKEN}
        ordered = sorted(freq, key=lambda t: (-freq[t], t))
        if max_size is not None:
            # Extras are forced in even when trimming to the budget.
            ordered = ordered[: max(max_size - 1 - len(extras - set(freq)), 1)]
        # Stable final order: frequency rank is discarded so that saving and
        # rebuilding from the same corpus agree byte-for-byte.
        return cls([UNKNOWN_TOKEN] + sorted(set(ordered) | extras))

    # -- encode / decode ---------------------------------------------------

    def encode(self, text: str) -> TokenSequence:
        """Greedy longest-match segmentation; unmatched spans become one <unk>."""
        trie = self._trie
        unk = self._index.get(UNKNOWN_TOKEN)
        out: list[int] = []
        i = 0
        n = len(text)
        in_unknown = False
        while i < n:
            node = trie
            j = i
            last_end = -1
            last_id = -1
            while j < n:
                node = node.get(text[j])
                if node is None:
                    break
                j += 1
                tid = node.get(_LEAF)
                if tid is not None:
                    last_end = j
                    last_id = tid
            if last_id >= 0:
                out.append(last_id)
                i = last_end
                in_unknown = False
            else:
                if unk is None:
                    raise ValidationError(
                        f"no vocabulary match at position {i} and no {UNKNOWN_TOKEN!r} token"
                    )
                if not in_unknown:
                    out.append(unk)
                    in_unknown = True
                i += 1
        return TokenSequence(tuple(out))

    def decode(self, seq) -> str:
        ids = token_ids(seq)
        size = len(self._tokens)
        for tid in ids:
            if not 0 <= tid < size:
                raise ValidationError(f"token id {tid} out of range for |V|={size}")
        return "".join(self._tokens[tid] for tid in ids)

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        """One token per line; line index = token id."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok in self._tokens:
                fh.write(tok)
                fh.write("\n")


# Trie nodes are plain dicts: char -> child dict, _LEAF -> token id.
_LEAF = None


def _build_trie(tokens: Sequence[str]) -> dict:
    root: dict = {}
    for tid, tok in enumerate(tokens):
        node = root
        for ch in tok:
            nxt = node.get(ch)
            if nxt is None:
                nxt = {}
                node[ch] = nxt
            node = nxt
        node[_LEAF] = tid
    return root


def load_vocabulary(path) -> Vocabulary:
    """Load a one-token-per-line UTF-8 vocabulary file."""
    with open(path, "r", encoding="utf-8", newline="\n") as fh:
        raw = fh.read()
    if raw == "":
        raise ValidationError(f"vocabulary file {path} is empty")
    lines = raw.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return Vocabulary(lines)
