"""Green/red vocabulary partition, logit biasing, and z-statistic detection.

The partition is global and fixed: a keyed shuffle of the token ids, with the
first floor(gamma * |V|) ids in shuffled order forming the green list. The
detector needs only (seed, gamma, |V|) to rebuild it, so detection works on
raw token-id sequences with no model access.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .errors import DetectionError, ValidationError
from .tokenization import token_ids

_STD_NORMAL = NormalDist()


@dataclass(frozen=True)
class WatermarkKey:
    """The watermarking secret: shuffle seed, green fraction, logit bias."""

    seed: int
    gamma: float = 0.5
    delta: float = 2.0

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValidationError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if not 0.0 < self.gamma < 1.0:
            raise ValidationError(f"gamma must lie in (0,1), got {self.gamma}")
        if self.delta < 0.0:
            raise ValidationError(f"delta must be nonnegative, got {self.delta}")

    def to_record(self) -> dict:
        """Serialized form used inside the canary registry (seed as decimal string)."""
        return {"seed": str(self.seed), "gamma": self.gamma, "delta": self.delta}

    @staticmethod
    def from_record(record: dict) -> "WatermarkKey":
        return WatermarkKey(
            seed=int(record["seed"]),
            gamma=float(record["gamma"]),
            delta=float(record["delta"]),
        )

    def fingerprint(self) -> str:
        payload = json.dumps(self.to_record(), sort_keys=True).encode("utf-8")
        return "sha256:" + hashlib.sha256(payload).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class GreenList:
    """Boolean membership vector over token ids plus its exact green count."""

    membership: np.ndarray
    green_count: int
    vocab_size: int

    def is_green(self, token_id: int) -> bool:
        return bool(self.membership[token_id])


@dataclass(frozen=True)
class DetectionReport:
    token_count: int
    green_count: int
    z: float
    eta: float
    watermarked: bool
    p_value: float


def derive_green_list(key: WatermarkKey, vocab_size: int) -> GreenList:
    """Keyed shuffle of 0..|V|-1; first floor(gamma*|V|) ids are green."""
    if vocab_size < 2:
        raise ValidationError(f"vocab_size must be >= 2, got {vocab_size}")
    green_count = math.floor(key.gamma * vocab_size)
    if green_count == 0 or green_count == vocab_size:
        raise ValidationError(
            f"degenerate partition: floor(gamma*|V|)={green_count} with |V|={vocab_size}"
        )
    perm = np.random.default_rng(key.seed).permutation(vocab_size)
    membership = np.zeros(vocab_size, dtype=bool)
    membership[perm[:green_count]] = True
    return GreenList(membership=membership, green_count=green_count, vocab_size=vocab_size)


def bias_logits(logits, green: GreenList, delta: float) -> np.ndarray:
    """Add delta to green entries; red entries pass through bit-identically."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (green.vocab_size,):
        raise ValidationError(
            f"logit vector length {logits.shape} does not match |V|={green.vocab_size}"
        )
    out = logits.copy()
    out[green.membership] += delta
    return out


def _count_green(ids: np.ndarray, green: GreenList, dedupe: bool) -> tuple[int, int]:
    if ids.size and (ids.min() < 0 or ids.max() >= green.vocab_size):
        raise ValidationError("sequence contains token ids outside the vocabulary")
    if dedupe:
        ids = np.unique(ids)
    return int(green.membership[ids].sum()), int(ids.size)


def z_statistic(seq, green: GreenList, gamma: float, dedupe: bool = False) -> tuple[float, int]:
    """z = (|y|_G - gamma*T) / sqrt(gamma*(1-gamma)*T); every occurrence counts.

    With dedupe=True only unique token ids are counted (off by default; the
    detection statistic here is defined on raw counts).
    """
    ids = np.asarray(token_ids(seq), dtype=np.int64)
    if ids.size == 0:
        raise DetectionError("z-statistic is undefined on an empty sequence")
    green_count, t = _count_green(ids, green, dedupe)
    z = (green_count - gamma * t) / math.sqrt(gamma * (1.0 - gamma) * t)
    return z, green_count


def threshold_for_fpr(fpr: float) -> float:
    """Detection threshold eta with a target false-positive rate under the null."""
    if not 0.0 < fpr < 1.0:
        raise ValidationError(f"fpr must lie in (0,1), got {fpr}")
    return _STD_NORMAL.inv_cdf(1.0 - fpr)


def report_from_counts(
    token_count: int, green_count: int, gamma: float, eta: float
) -> DetectionReport:
    """Build a detection report from already-summed token/green counts."""
    if token_count < 1:
        raise DetectionError("detection needs at least one token")
    if not 0 <= green_count <= token_count:
        raise ValidationError(
            f"green count {green_count} outside [0, {token_count}]"
        )
    z = (green_count - gamma * token_count) / math.sqrt(gamma * (1.0 - gamma) * token_count)
    return DetectionReport(
        token_count=token_count,
        green_count=green_count,
        z=z,
        eta=eta,
        watermarked=z > eta,
        p_value=_STD_NORMAL.cdf(-z),
    )


def detect(
    seq,
    key: WatermarkKey,
    vocab_size: int,
    eta: float,
    dedupe: bool = False,
) -> DetectionReport:
    """Full detection pass: rebuild the green list from the key and score seq."""
    ids = np.asarray(token_ids(seq), dtype=np.int64)
    if ids.size == 0:
        raise DetectionError("cannot detect a watermark in an empty sequence")
    green = derive_green_list(key, vocab_size)
    green_count, t = _count_green(ids, green, dedupe)
    return report_from_counts(t, green_count, key.gamma, eta)
