"""Black-box dataset membership inference.

An audit issues N canary queries against a responder, tokenizes each response
independently with the data owner's vocabulary, sums token and green counts,
and applies the z-test to the concatenated totals. Summing counts is exactly
equivalent to physically concatenating the token sequences (no re-tokenization
happens across response boundaries); the equivalence is asserted on every run.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import DetectionError, ValidationError
from .simulator import RagSimulator, derive_seed
from .synthesis import Registry
from .tokenization import Vocabulary
from .watermark import DetectionReport, derive_green_list, report_from_counts

log = logging.getLogger(__name__)


class Responder(Protocol):
    """query string -> response string; failures must raise, not return ''. """

    def __call__(self, query: str) -> str: ...


class SimulatorResponder:
    """Adapter binding a RagSimulator + embedder (+ optional per-audit seed)."""

    def __init__(self, simulator: RagSimulator, embedder, seed: int | None = None):
        self.simulator = simulator
        self.embedder = embedder
        self.seed = seed

    def __call__(self, query: str) -> str:
        seed = None if self.seed is None else derive_seed(self.seed, query)
        return self.simulator.respond(query, self.embedder, seed=seed)


class RemoteResponder:
    """POST the query to a RAG endpoint and pull the answer out by field path.

    The request template is a JSON-able dict whose string leaves may contain
    "{query}"; the answer path is dotted, with integer segments indexing lists
    (e.g. "choices.0.message.content").
    """

    def __init__(self, gateway, url: str, request_template: dict, answer_path: str):
        self.gateway = gateway
        self.url = url
        self.request_template = request_template
        self.answer_path = answer_path

    def _fill(self, node, query: str):
        if isinstance(node, str):
            return node.replace("{query}", query)
        if isinstance(node, dict):
            return {k: self._fill(v, query) for k, v in node.items()}
        if isinstance(node, list):
            return [self._fill(v, query) for v in node]
        return node

    def __call__(self, query: str) -> str:
        payload = self._fill(self.request_template, query)
        data = self.gateway.post_json(self.url, payload)
        node = data
        for part in self.answer_path.split("."):
            try:
                node = node[int(part)] if part.lstrip("-").isdigit() else node[part]
            except (KeyError, IndexError, TypeError) as exc:
                raise ValidationError(
                    f"answer path {self.answer_path!r} failed at {part!r}: {exc}"
                ) from exc
        if not isinstance(node, str) or not node:
            raise ValidationError(f"answer at {self.answer_path!r} is not a nonempty string")
        return node


@dataclass(frozen=True)
class AuditPlan:
    registry: Registry
    vocabulary: Vocabulary
    quota: int
    eta: float
    queries_per_canary: int = 1
    selection_seed: int = 0
    mask_question_tokens: bool = False

    def __post_init__(self):
        if self.quota < 1:
            raise ValidationError(f"query quota must be >= 1, got {self.quota}")
        available = sum(
            min(len(c.query_questions), self.queries_per_canary) for c in self.registry.canaries
        )
        if available < self.quota:
            raise ValidationError(
                f"quota {self.quota} exceeds the {available} available queries "
                f"({len(self.registry.canaries)} canaries x {self.queries_per_canary})"
            )


@dataclass(frozen=True)
class QueryRecord:
    canary_id: str
    question: str
    response: str
    token_count: int
    green_count: int


@dataclass
class AuditOutcome:
    queries: list[QueryRecord]
    report: DetectionReport
    verdict: bool
    failures: list[dict] = field(default_factory=list)
    # Concatenated response token ids; kept for recounts under other keys,
    # not serialized.
    token_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def to_record(self) -> dict:
        return {
            "verdict": self.verdict,
            "z": self.report.z,
            "eta": self.report.eta,
            "p_value": self.report.p_value,
            "token_count": self.report.token_count,
            "green_count": self.report.green_count,
            "queries": [
                {
                    "canary_id": q.canary_id,
                    "question": q.question,
                    "response": q.response,
                    "token_count": q.token_count,
                    "green_count": q.green_count,
                }
                for q in self.queries
            ],
            "failures": self.failures,
        }


def select_queries(plan: AuditPlan) -> list[tuple[str, str]]:
    """Draw the audit's (canary_id, question) list.

    Canaries are shuffled with the selection seed. With queries_per_canary=1
    the first N distinct canaries contribute their first question; otherwise
    questions are taken round-robin across the selected canaries.
    """
    rng = np.random.default_rng(plan.selection_seed)
    canaries = list(plan.registry.canaries)
    shuffled = [canaries[i] for i in rng.permutation(len(canaries))]
    pool: list[tuple[str, str]] = []
    for round_idx in range(plan.queries_per_canary):
        for canary in shuffled:
            if round_idx < min(len(canary.query_questions), plan.queries_per_canary):
                pool.append((canary.canary_id, canary.query_questions[round_idx]))
    return pool[: plan.quota]


def _mask_question(response: str, question: str) -> str:
    # Crude question-echo masking: drop the question string wherever it
    # appears verbatim in the response.
    return response.replace(question, " ")


def run_audit(responder: Responder, plan: AuditPlan) -> AuditOutcome:
    """Issue the planned queries, sum counts, and test the concatenated z."""
    green = derive_green_list(plan.registry.key, plan.vocabulary.size)
    gamma = plan.registry.key.gamma
    queries = select_queries(plan)

    records: list[QueryRecord] = []
    failures: list[dict] = []
    all_ids: list[int] = []
    total_tokens = 0
    total_green = 0
    for canary_id, question in queries:
        try:
            response = responder(question)
        except Exception as exc:  # noqa: BLE001 - partial outcomes are the contract
            log.warning("responder failed on %r: %s", question[:60], exc)
            failures.append({"canary_id": canary_id, "question": question, "error": str(exc)})
            continue
        if not response:
            failures.append({"canary_id": canary_id, "question": question, "error": "empty response"})
            continue
        scored_text = _mask_question(response, question) if plan.mask_question_tokens else response
        ids = plan.vocabulary.encode(scored_text).ids
        greens = int(green.membership[np.asarray(ids, dtype=np.int64)].sum()) if ids else 0
        records.append(
            QueryRecord(
                canary_id=canary_id,
                question=question,
                response=response,
                token_count=len(ids),
                green_count=greens,
            )
        )
        all_ids.extend(ids)
        total_tokens += len(ids)
        total_green += greens

    if total_tokens < 1:
        raise DetectionError(
            f"no scorable tokens: {len(failures)} of {len(queries)} queries failed"
        )

    report = report_from_counts(total_tokens, total_green, gamma, plan.eta)
    # Concatenation equivalence: summed counts == counts over the physically
    # concatenated sequence, by construction. Keep the assertion as a tripwire.
    concat_ids = np.asarray(all_ids, dtype=np.int64)
    concat_green = int(green.membership[concat_ids].sum())
    assert (len(all_ids), concat_green) == (total_tokens, total_green)

    return AuditOutcome(records, report, report.watermarked, failures, token_ids=concat_ids)


# -- ROC over audit trials ----------------------------------------------------


@dataclass(frozen=True)
class RocCurve:
    points: tuple[tuple[float, float], ...]
    auc: float
    tpr_at: dict[float, float]


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1 with ties sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def evaluate_roc(
    positive_scores: Sequence[float],
    negative_scores: Sequence[float],
    fpr_levels: Iterable[float] = (0.01, 0.10),
) -> RocCurve:
    """AUC via the rank statistic (ties count 1/2) plus TPR at exact FPR levels."""
    pos = np.asarray(list(positive_scores), dtype=np.float64)
    neg = np.asarray(list(negative_scores), dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValidationError("ROC evaluation needs nonempty positive and negative scores")

    combined = np.concatenate([pos, neg])
    ranks = _average_ranks(combined)
    rank_sum_pos = float(ranks[: pos.size].sum())
    auc = (rank_sum_pos - pos.size * (pos.size + 1) / 2.0) / (pos.size * neg.size)

    # Curve points: sweep thresholds downward through the unique scores. Tie
    # groups move TP and FP together, so trapezoidal integration of these
    # points reproduces the rank-statistic AUC exactly.
    labels = np.concatenate([np.ones(pos.size, dtype=bool), np.zeros(neg.size, dtype=bool)])
    order = np.argsort(-combined, kind="mergesort")
    sorted_scores = combined[order]
    sorted_labels = labels[order]
    points: list[tuple[float, float]] = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    n = combined.size
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        tp += int(sorted_labels[i : j + 1].sum())
        fp += (j - i + 1) - int(sorted_labels[i : j + 1].sum())
        points.append((fp / neg.size, tp / pos.size))
        i = j + 1

    # TPR at an exact FPR level: threshold interpolated between adjacent
    # negative order statistics, then strict > counting for positives.
    tpr_at: dict[float, float] = {}
    for level in fpr_levels:
        threshold = float(np.quantile(neg, 1.0 - level, method="linear"))
        tpr_at[level] = float((pos > threshold).mean())

    return RocCurve(tuple(points), float(auc), tpr_at)


def roc_auc_trapezoid(curve: RocCurve) -> float:
    """Trapezoidal integral of the curve; equals the rank AUC by construction."""
    xs = np.array([p[0] for p in curve.points])
    ys = np.array([p[1] for p in curve.points])
    return float(np.trapezoid(ys, xs))


def bootstrap_auc_interval(
    positive_scores: Sequence[float],
    negative_scores: Sequence[float],
    replicates: int = 200,
    alpha: float = 0.05,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile bootstrap CI for the ROC-AUC."""
    pos = np.asarray(list(positive_scores), dtype=np.float64)
    neg = np.asarray(list(negative_scores), dtype=np.float64)
    rng = np.random.default_rng(seed)
    aucs = np.empty(replicates)
    for b in range(replicates):
        p = pos[rng.integers(0, pos.size, pos.size)]
        n = neg[rng.integers(0, neg.size, neg.size)]
        aucs[b] = evaluate_roc(p, n).auc
    lo, hi = np.quantile(aucs, [alpha / 2.0, 1.0 - alpha / 2.0])
    return float(lo), float(hi)


def write_outcome(outcome: AuditOutcome, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(outcome.to_record(), fh, ensure_ascii=False, sort_keys=True, indent=2)
        fh.write("\n")
