"""Detection-curve experiments over the simulated RAG channel.

A synthetic "world" stands in for the whole protect/steal/audit loop at desk
scale: plain documents walk a seeded Markov chain over a word vocabulary,
canaries are watermarked walks from the same chain carrying a unique marker
word, and questions repeat the marker so retrieval lands on the right canary.
Positive trials audit a simulator whose corpus contains the canaries; negative
trials audit one whose corpus does not. One trial = one full N-query audit,
and its score is the audit z-statistic.

The branching factor of the chain controls how much entropy the watermark can
bite on: branching 2 puts canary green fractions near 0.7, which under the
easy channel preset lands single-response green fractions near 0.6.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .audit import (
    AuditPlan,
    SimulatorResponder,
    bootstrap_auc_interval,
    evaluate_roc,
)
from .audit import run_audit
from .corpus import Document
from .errors import ValidationError
from .generation import (
    PinnedSpanSource,
    SamplerConfig,
    generate_watermarked,
    green_fraction,
    train_ngram,
)
from .retrieval import HashingEmbedder
from .simulator import ChannelConfig, RagSimulator, derive_seed, preset
from .synthesis import (
    CanaryRecord,
    DocumentAttributes,
    EntitySet,
    Registry,
)
from .tokenization import Vocabulary
from .watermark import WatermarkKey, derive_green_list, threshold_for_fpr

log = logging.getLogger(__name__)

AXIS_QUOTA = "quota"
AXIS_DELTA = "delta"
AXIS_CANARIES = "canaries"
VALID_AXES = (AXIS_QUOTA, AXIS_DELTA, AXIS_CANARIES)


@dataclass(frozen=True)
class WorldConfig:
    vocab_words: int = 1000
    branching: int = 2
    n_docs: int = 200
    doc_tokens: int = 160
    n_canaries: int = 20
    canary_tokens: int = 180
    query_filler_words: int = 60
    fillers_per_question: int = 2
    markers_per_canary: int = 3
    marker_repeats_doc: int = 3
    marker_repeats_query: int = 2
    embed_dim: int = 1024
    background_alpha: float = 1.0
    source_order: int = 2
    source_alpha: float = 0.0003


@dataclass(frozen=True)
class ExperimentConfig:
    axis: str
    values: tuple
    quota: int = 2
    queries_per_canary: int = 1
    trials_positive: int = 500
    trials_negative: int = 500
    delta: float = 2.0
    gamma: float = 0.5
    preset_name: str = "easy_prompt"
    preservation_prob: float | None = None
    response_length: int | None = None
    k: int = 3
    fpr_levels: tuple[float, ...] = (0.01, 0.10)
    bootstrap_replicates: int = 200
    wrong_key_count: int = 5
    seed: int = 1
    world: WorldConfig = field(default_factory=WorldConfig)

    def __post_init__(self):
        if self.axis not in VALID_AXES:
            raise ValidationError(f"unknown sweep axis {self.axis!r}; expected one of {VALID_AXES}")
        if not self.values:
            raise ValidationError("sweep needs at least one value")


def _distinct_bucket_markers(embedder: HashingEmbedder, count: int) -> list[str]:
    """Marker words landing in pairwise-distinct hash buckets.

    A shared bucket would let one canary's question score against another
    canary's marker mass, so candidates are screened until every marker owns
    its bucket.
    """
    markers: list[str] = []
    used: set[int] = set()
    candidate = 0
    while len(markers) < count:
        name = f"zq{candidate}marker"
        bucket, _ = embedder.slot(name)
        if bucket not in used:
            used.add(bucket)
            markers.append(name)
        candidate += 1
    return markers


class SyntheticWorld:
    """Corpus + canaries + registry + simulators for one experiment setting."""

    def __init__(self, cfg: ExperimentConfig, n_canaries: int, delta: float,
                 questions_per_canary: int):
        w = cfg.world
        if n_canaries > w.n_canaries:
            raise ValidationError(
                f"asked for {n_canaries} canaries but the world caps at {w.n_canaries}"
            )
        if w.fillers_per_question * questions_per_canary > w.query_filler_words:
            raise ValidationError(
                f"{questions_per_canary} questions per canary need "
                f">= {w.fillers_per_question * questions_per_canary} filler words, "
                f"world has {w.query_filler_words}"
            )
        # The world seed excludes delta so a delta sweep re-watermarks the
        # same corpus: plain docs, markers, and questions stay fixed and only
        # the canary token streams respond to the bias strength.
        rng = np.random.default_rng(derive_seed(cfg.seed, "world", n_canaries))

        words = [f"w{i}" for i in range(w.vocab_words)]
        fillers = [f"qf{i}" for i in range(w.query_filler_words)]
        self.embedder = HashingEmbedder(w.embed_dim, derive_seed(cfg.seed, "embed"))
        markers = _distinct_bucket_markers(self.embedder, w.n_canaries * w.markers_per_canary)
        self.vocabulary = Vocabulary(
            ["<unk>"] + [" " + t for t in words + markers + fillers]
        )
        word_ids = np.arange(1, 1 + len(words))
        marker_ids = np.arange(1 + len(words), 1 + len(words) + len(markers))
        filler_ids = np.arange(1 + len(words) + len(markers), self.vocabulary.size)

        # Plain documents: self-avoiding walks on a fixed low-branching
        # successor graph (successors drawn from independent permutations, so
        # in-degree stays small too). No word repeats within a doc, which
        # keeps hashing-embedder bucket values light-tailed; the branching
        # factor bounds the entropy the watermark can bite on.
        perms = [rng.permutation(word_ids) for _ in range(w.branching)]
        successors = {
            int(wid): [int(perm[i]) for perm in perms]
            for i, wid in enumerate(word_ids)
        }
        self.documents: list[Document] = []
        doc_sequences: list[list[int]] = []
        for d in range(w.n_docs):
            cur = int(rng.choice(word_ids))
            ids = [cur]
            used = {cur}
            for _ in range(w.doc_tokens - 1):
                options = [s for s in successors[cur] if s not in used]
                if not options:
                    remaining = [int(x) for x in word_ids if int(x) not in used]
                    if not remaining:
                        break
                    cur = remaining[int(rng.integers(len(remaining)))]
                else:
                    cur = options[int(rng.integers(len(options)))]
                ids.append(cur)
                used.add(cur)
            doc_sequences.append(ids)
            self.documents.append(Document(f"doc-{d:05d}", self.vocabulary.decode(ids)))

        self.background = train_ngram(doc_sequences, 1, w.background_alpha, self.vocabulary.size)
        source = train_ngram(doc_sequences, w.source_order, w.source_alpha, self.vocabulary.size)

        self.key = WatermarkKey(
            seed=derive_seed(cfg.seed, "key"), gamma=cfg.gamma, delta=delta
        )
        green = derive_green_list(self.key, self.vocabulary.size)

        # Canaries: watermarked walks with their marker pinned at spread offsets.
        self.canaries: list[CanaryRecord] = []
        self.canary_documents: list[Document] = []
        self.canary_green_fractions: list[float] = []
        attrs = DocumentAttributes(
            topic="synthetic", subtopics=("synthetic",), writing_style="synthetic",
            word_count_range=(w.canary_tokens, w.canary_tokens),
        )
        per_canary_markers = w.markers_per_canary
        for c in range(n_canaries):
            own_markers = [
                int(marker_ids[c * per_canary_markers + m]) for m in range(per_canary_markers)
            ]
            spans = [(m,) for m in own_markers for _ in range(w.marker_repeats_doc)]
            pins = PinnedSpanSource.spread_spans(spans, w.canary_tokens, 1)
            prompt = (int(rng.choice(word_ids)),)
            sampler = SamplerConfig(
                max_tokens=w.canary_tokens,
                rng_seed=derive_seed(cfg.seed, "canary", delta, c),
            )
            ids = generate_watermarked(
                PinnedSpanSource(source, pins, len(prompt)), self.key, green, sampler, prompt
            )
            text = self.vocabulary.decode(ids)
            self.canary_green_fractions.append(green_fraction(ids, green))
            questions = []
            filler_pool = rng.permutation(filler_ids)
            per_q = w.fillers_per_question
            marker_part = [m for m in own_markers for _ in range(w.marker_repeats_query)]
            for j in range(questions_per_canary):
                picks = filler_pool[per_q * j : per_q * (j + 1)]
                questions.append(self.vocabulary.decode(marker_part + [int(x) for x in picks]))
            canary_id = f"canary-{c:04d}"
            marker_names = tuple(
                markers[c * per_canary_markers + m] for m in range(per_canary_markers)
            )
            self.canaries.append(
                CanaryRecord(
                    canary_id=canary_id,
                    text=text,
                    source_doc_id="synthetic",
                    attributes=attrs,
                    subtopic="synthetic",
                    entities=EntitySet((), marker_names),
                    query_questions=tuple(questions),
                    key_fingerprint=self.key.fingerprint(),
                    created_at="synthetic",
                )
            )
            self.canary_documents.append(Document(canary_id, text))

        self.registry = Registry(
            key=self.key, canaries=self.canaries, vocabulary_file="",
            vocabulary_sha256="", config={}, created_at="synthetic",
        )

        if cfg.preservation_prob is None and cfg.response_length is None:
            channel = preset(cfg.preset_name, self.background, derive_seed(cfg.seed, "channel"))
        else:
            base = preset(cfg.preset_name, self.background, derive_seed(cfg.seed, "channel"))
            channel = ChannelConfig(
                preservation_prob=(
                    base.preservation_prob if cfg.preservation_prob is None
                    else cfg.preservation_prob
                ),
                response_length=(
                    base.response_length if cfg.response_length is None
                    else cfg.response_length
                ),
                background=self.background,
                rng_seed=base.rng_seed,
            )
        self.channel = channel
        self.positive_sim = RagSimulator.build(
            self.documents + self.canary_documents, self.embedder, channel, cfg.k,
            self.vocabulary,
        )
        self.negative_sim = RagSimulator.build(
            self.documents, self.embedder, channel, cfg.k, self.vocabulary
        )

    def background_green_fraction(self, green, samples: int = 20000, seed: int = 0) -> float:
        ids = self.background.sample_iid(samples, np.random.default_rng(seed))
        return float(green.membership[ids].mean())


def _axis_settings(cfg: ExperimentConfig, value) -> tuple[int, float, int, int]:
    """(n_canaries, delta, quota, queries_per_canary) for one sweep value."""
    if cfg.axis == AXIS_QUOTA:
        return cfg.world.n_canaries, cfg.delta, int(value), cfg.queries_per_canary
    if cfg.axis == AXIS_DELTA:
        return cfg.world.n_canaries, float(value), cfg.quota, cfg.queries_per_canary
    n = int(value)
    return n, cfg.delta, n * cfg.queries_per_canary, cfg.queries_per_canary


def run_sweep_value(cfg: ExperimentConfig, value) -> dict:
    """All trials for one sweep value; returns the results row."""
    n_canaries, delta, quota, per_canary = _axis_settings(cfg, value)
    world = SyntheticWorld(cfg, n_canaries, delta, per_canary)
    eta = threshold_for_fpr(0.01)
    wrong_greens = [
        derive_green_list(
            WatermarkKey(derive_seed(cfg.seed, "wrong-key", i), cfg.gamma, delta),
            world.vocabulary.size,
        )
        for i in range(cfg.wrong_key_count)
    ]

    def trial_scores(sim, n_trials: int, tag: str) -> tuple[np.ndarray, np.ndarray]:
        scores = np.empty(n_trials)
        wrong = np.empty((len(wrong_greens), n_trials))
        for t in range(n_trials):
            plan = AuditPlan(
                registry=world.registry,
                vocabulary=world.vocabulary,
                quota=quota,
                eta=eta,
                queries_per_canary=per_canary,
                selection_seed=derive_seed(cfg.seed, "select", tag, value, t),
            )
            responder = SimulatorResponder(
                sim, world.embedder, seed=derive_seed(cfg.seed, "respond", tag, value, t)
            )
            outcome = run_audit(responder, plan)
            scores[t] = outcome.report.z
            tcount = outcome.token_ids.size
            norm = np.sqrt(cfg.gamma * (1 - cfg.gamma) * tcount)
            for i, wg in enumerate(wrong_greens):
                g = int(wg.membership[outcome.token_ids].sum())
                wrong[i, t] = (g - cfg.gamma * tcount) / norm
        return scores, wrong

    pos, pos_wrong = trial_scores(world.positive_sim, cfg.trials_positive, "pos")
    neg, neg_wrong = trial_scores(world.negative_sim, cfg.trials_negative, "neg")

    curve = evaluate_roc(pos, neg, cfg.fpr_levels)
    # Secondary null: both trial populations rescored under wrong keys
    # (apples to apples, so shared finite-vocabulary offsets cancel), then
    # averaged over several wrong keys to wash out single-key luck.
    wrong_aucs = [
        evaluate_roc(pos_wrong[i], neg_wrong[i], cfg.fpr_levels).auc
        for i in range(len(wrong_greens))
    ]
    row = {
        "axis": cfg.axis,
        "value": value,
        "auc": curve.auc,
        "auc_wrong_key": float(np.mean(wrong_aucs)),
        "mean_z_positive": float(pos.mean()),
        "mean_z_negative": float(neg.mean()),
        "doc_green_fraction": float(np.mean(world.canary_green_fractions)),
        "trials_positive": cfg.trials_positive,
        "trials_negative": cfg.trials_negative,
        "seed": cfg.seed,
    }
    for level in cfg.fpr_levels:
        row[f"tpr_at_{level:g}"] = curve.tpr_at[level]
    if cfg.bootstrap_replicates > 0:
        lo, hi = bootstrap_auc_interval(
            pos, neg, replicates=cfg.bootstrap_replicates,
            seed=derive_seed(cfg.seed, "bootstrap", value),
        )
        row["auc_ci_low"] = lo
        row["auc_ci_high"] = hi
    return row


def run_experiment(cfg: ExperimentConfig) -> list[dict]:
    rows = []
    for value in cfg.values:
        log.info("sweep %s=%s ...", cfg.axis, value)
        rows.append(run_sweep_value(cfg, value))
    return rows


def results_table(rows: list[dict]) -> str:
    """Aligned plain-text table of the headline columns."""
    if not rows:
        return ""
    tpr_cols = sorted(k for k in rows[0] if k.startswith("tpr_at_"))
    header = ["value", "auc"] + tpr_cols + ["mean_z_pos", "auc_wrong_key", "trials"]
    lines = []
    widths = [max(len(h), 12) for h in header]
    lines.append("  ".join(h.rjust(w) for h, w in zip(header, widths)))
    for row in rows:
        cells = [
            f"{row['value']}",
            f"{row['auc']:.4f}",
            *[f"{row[c]:.4f}" for c in tpr_cols],
            f"{row['mean_z_positive']:.3f}",
            f"{row['auc_wrong_key']:.4f}",
            f"{row['trials_positive']}+{row['trials_negative']}",
        ]
        lines.append("  ".join(c.rjust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines) + "\n"


def write_results(rows: list[dict], jsonl_path, table_path) -> None:
    with open(jsonl_path, "a", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True))
            fh.write("\n")
    with open(table_path, "a", encoding="utf-8", newline="\n") as fh:
        fh.write(results_table(rows))
