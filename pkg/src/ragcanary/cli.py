"""Operator CLI: protect, audit, simulate, sweep, metrics, registry.

Exit codes partition failures so scripts can tell them apart:
  0 success, 2 validation, 3 transport, 4 synthesis, 5 detection precondition.
`audit --verdict-exit` additionally exits 10 when the run succeeds but no
watermark is detected.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as exp
from .audit import AuditPlan, RemoteResponder, SimulatorResponder, run_audit, write_outcome
from .config import RunConfig
from .corpus import load_corpus, save_corpus
from .errors import (
    DetectionError,
    SynthesisError,
    TransportError,
    ValidationError,
)
from .gateway import ChatEndpoint, EmbeddingEndpoint, FixtureStore, Gateway, RetryPolicy
from .generation import train_ngram
from .metrics import (
    NGramPerplexityScorer,
    bleu,
    curation_threshold,
    filtering_rate,
    split_blocks,
)
from .plotting import plot_audit_trace, plot_sweep
from .retrieval import HashingEmbedder, TfidfHashingEmbedder
from .simulator import ChannelConfig, RagSimulator, preset
from .synthesis import (
    SynthesisConfig,
    load_registry,
    mean_green_fraction,
    protect_dataset,
    registry_vocabulary,
)
from .watermark import WatermarkKey, derive_green_list, threshold_for_fpr

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_TRANSPORT = 3
EXIT_SYNTHESIS = 4
EXIT_DETECTION = 5
EXIT_NOT_WATERMARKED = 10


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ragcanary",
        description="Protect datasets with watermarked canaries and audit RAG systems.",
    )
    parser.add_argument("--config", required=True, help="path to the JSON run config")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--fixtures", help="override fixture directory (enables replay mode)")
    parser.add_argument("--quota", type=int, help="override audit query quota")
    parser.add_argument("--delta", type=float, help="override watermark delta")
    parser.add_argument("--canaries", type=int, help="override canary count")
    parser.add_argument("--queries-per-canary", type=int, help="override questions per canary")
    parser.add_argument("--fpr", type=float, help="override target false-positive rate")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                        help="override any config leaf, e.g. --set audit.quota=12")
    parser.add_argument("-v", "--verbose", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("protect", help="synthesize canaries and write the protected corpus")

    p_audit = sub.add_parser("audit", help="query a responder and test for the watermark")
    p_audit.add_argument("--target", choices=["sim", "remote"], default="sim")
    p_audit.add_argument("--verdict-exit", action="store_true",
                         help="exit 10 when no watermark is detected")

    p_sim = sub.add_parser("simulate", help="answer queries through the simulated RAG channel")
    p_sim.add_argument("--query", action="append", default=[], help="query text (repeatable)")

    sub.add_parser("sweep", help="run the configured detection-curve experiment")
    sub.add_parser("metrics", help="distortion and stealth metrics for a protected corpus")

    p_reg = sub.add_parser("registry", help="inspect or verify a canary registry")
    p_reg.add_argument("action", choices=["inspect", "verify"])
    return parser


def apply_overrides(cfg: RunConfig, args) -> None:
    if args.seed is not None:
        cfg.set("seed", args.seed)
    if args.fixtures is not None:
        cfg.set("gateway.fixtures", args.fixtures)
    if args.quota is not None:
        cfg.set("audit.quota", args.quota)
    if args.delta is not None:
        cfg.set("watermark.delta", args.delta)
    if args.canaries is not None:
        cfg.set("synthesis.count", args.canaries)
    if args.queries_per_canary is not None:
        cfg.set("synthesis.queries_per_canary", args.queries_per_canary)
        cfg.set("audit.queries_per_canary", args.queries_per_canary)
    if args.fpr is not None:
        cfg.set("audit.fpr", args.fpr)
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects KEY=JSON, got {item!r}")
        try:
            cfg.set(key, json.loads(raw))
        except json.JSONDecodeError:
            cfg.set(key, raw)


def _gateway(cfg: RunConfig) -> Gateway:
    fixtures_dir = cfg.get("gateway.fixtures")
    fixtures = None
    if fixtures_dir:
        path = Path(fixtures_dir)
        if not path.is_absolute():
            path = cfg.base_dir / path
        fixtures = FixtureStore(path)
    chat_ep = None
    if cfg.get("gateway.chat_url"):
        chat_ep = ChatEndpoint(
            url=cfg.require("gateway.chat_url"),
            model=cfg.get("gateway.chat_model", "default"),
            api_key_env=cfg.get("gateway.api_key_env", "RAGCANARY_API_KEY"),
        )
    embed_ep = None
    if cfg.get("gateway.embed_url"):
        embed_ep = EmbeddingEndpoint(
            url=cfg.require("gateway.embed_url"),
            model=cfg.get("gateway.embed_model", "default"),
            api_key_env=cfg.get("gateway.api_key_env", "RAGCANARY_API_KEY"),
        )
    retry = RetryPolicy(
        max_attempts=cfg.get("gateway.max_attempts", 3),
        backoff_base=cfg.get("gateway.backoff_base", 0.5),
    )
    return Gateway(
        chat_endpoint=chat_ep,
        embedding_endpoint=embed_ep,
        fixtures=fixtures,
        record=bool(cfg.get("gateway.record", False)),
        retry=retry,
        max_concurrency=int(cfg.get("gateway.max_concurrency", 4)),
    )


def _watermark_key(cfg: RunConfig) -> WatermarkKey:
    return WatermarkKey(
        seed=int(cfg.require("watermark.seed")),
        gamma=float(cfg.get("watermark.gamma", 0.5)),
        delta=float(cfg.get("watermark.delta", 2.0)),
    )


def _synthesis_config(cfg: RunConfig) -> SynthesisConfig:
    return SynthesisConfig(
        seed=cfg.seed(),
        real_entities=int(cfg.get("synthesis.real_entities", 2)),
        fictional_entities=int(cfg.get("synthesis.fictional_entities", 2)),
        interaction_descriptions=int(cfg.get("synthesis.interaction_descriptions", 1)),
        subtopics_requested=int(cfg.get("synthesis.subtopics_requested", 2)),
        retries=int(cfg.get("synthesis.retries", 3)),
        ngram_order=int(cfg.get("synthesis.ngram_order", 2)),
        ngram_alpha=float(cfg.get("synthesis.ngram_alpha", 0.1)),
        vocab_max_size=cfg.get("synthesis.vocab_max_size"),
        created_at=str(cfg.get("synthesis.created_at", "1970-01-01T00:00:00+00:00")),
    )


def _results_dir(cfg: RunConfig) -> Path:
    results = cfg.get("paths.results_dir", "results")
    path = Path(results)
    if not path.is_absolute():
        path = cfg.base_dir / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _build_simulator(cfg: RunConfig, registry, vocabulary):
    corpus_path = cfg.resolve_path("simulator.corpus")
    docs = load_corpus(corpus_path)
    order = int(cfg.get("simulator.background_order", 1))
    alpha = float(cfg.get("simulator.background_alpha", 1.0))
    background = train_ngram(
        [vocabulary.encode(d.text) for d in docs], order, alpha, vocabulary.size
    )
    preset_name = cfg.get("simulator.preset", "easy_prompt")
    channel = preset(preset_name, background, cfg.seed())
    p_override = cfg.get("simulator.preservation_prob")
    length_override = cfg.get("simulator.response_length")
    if p_override is not None or length_override is not None:
        channel = ChannelConfig(
            preservation_prob=(
                channel.preservation_prob if p_override is None else float(p_override)
            ),
            response_length=(
                channel.response_length if length_override is None else int(length_override)
            ),
            background=background,
            rng_seed=channel.rng_seed,
        )
    dim = int(cfg.get("simulator.embed_dim", 2048))
    kind = cfg.get("simulator.embedder", "tfidf_hashing")
    if kind == "tfidf_hashing":
        embedder = TfidfHashingEmbedder(dim, cfg.seed(), [d.text for d in docs])
    elif kind == "hashing":
        embedder = HashingEmbedder(dim, cfg.seed())
    else:
        raise ValidationError(f"unknown simulator.embedder {kind!r}")
    sim = RagSimulator.build(docs, embedder, channel, int(cfg.get("simulator.k", 3)), vocabulary)
    return sim, embedder


# -- commands -----------------------------------------------------------------


def cmd_protect(cfg: RunConfig, args) -> int:
    corpus_path = cfg.resolve_path("paths.corpus")
    out_dir = cfg.resolve_path("paths.registry_dir", must_exist=False)
    docs = load_corpus(corpus_path)
    gateway = _gateway(cfg)
    key = _watermark_key(cfg)
    synth_cfg = _synthesis_config(cfg)
    count = int(cfg.get("synthesis.count", 1))
    queries_per_canary = int(cfg.get("synthesis.queries_per_canary", 1))

    protected, registry_path = protect_dataset(
        docs, count, queries_per_canary, synth_cfg, gateway, key, out_dir
    )
    protected_path = out_dir / "protected_corpus.jsonl"
    save_corpus(protected.documents(), protected_path)

    registry = load_registry(registry_path)
    vocabulary = registry_vocabulary(registry, registry_path)
    green_mean = mean_green_fraction(registry, vocabulary)
    print(f"canaries: {len(registry.canaries)} of {count} requested")
    print(f"mean green fraction: {green_mean:.4f} (gamma = {key.gamma})")
    print(f"registry: {registry_path}")
    print(f"protected corpus: {protected_path}")
    if protected.failures:
        print(f"failures: {len(protected.failures)} (see log)")
    return EXIT_OK


def cmd_audit(cfg: RunConfig, args) -> int:
    registry_path = cfg.resolve_path("paths.registry")
    registry = load_registry(registry_path)
    vocabulary = registry_vocabulary(registry, registry_path)
    fpr = float(cfg.get("audit.fpr", 0.01))
    eta = threshold_for_fpr(fpr)
    plan = AuditPlan(
        registry=registry,
        vocabulary=vocabulary,
        quota=int(cfg.require("audit.quota")),
        eta=eta,
        queries_per_canary=int(cfg.get("audit.queries_per_canary", 1)),
        selection_seed=cfg.seed(),
        mask_question_tokens=bool(cfg.get("audit.mask_question_tokens", False)),
    )
    if args.target == "remote":
        gateway = _gateway(cfg)
        responder = RemoteResponder(
            gateway,
            url=cfg.require("remote.url"),
            request_template=cfg.require("remote.request_template"),
            answer_path=cfg.require("remote.answer_path"),
        )
    else:
        sim, embedder = _build_simulator(cfg, registry, vocabulary)
        responder = SimulatorResponder(sim, embedder, seed=cfg.seed())

    outcome = run_audit(responder, plan)
    results = _results_dir(cfg)
    stem = f"audit-{cfg.fingerprint()}"
    write_outcome(outcome, results / f"{stem}.json")
    plot_audit_trace(outcome, registry.key.gamma, results / f"{stem}.png")
    print(f"z = {outcome.report.z:.4f}  eta = {eta:.4f}  (fpr target {fpr:g})")
    print(f"tokens = {outcome.report.token_count}  green = {outcome.report.green_count}")
    print(f"p-value = {outcome.report.p_value:.3e}")
    print(f"verdict: {'WATERMARKED' if outcome.verdict else 'not watermarked'}")
    print(f"outcome: {results / (stem + '.json')}")
    if args.verdict_exit and not outcome.verdict:
        return EXIT_NOT_WATERMARKED
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, args) -> int:
    registry_path = cfg.resolve_path("paths.registry")
    registry = load_registry(registry_path)
    vocabulary = registry_vocabulary(registry, registry_path)
    sim, embedder = _build_simulator(cfg, registry, vocabulary)
    queries = args.query or [c.query_questions[0] for c in registry.canaries[:3]]
    for query in queries:
        response = sim.respond(query, embedder)
        print(f"Q: {query}")
        print(f"A: {response}")
        print()
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    section = cfg.get("experiment")
    if not isinstance(section, dict):
        raise ValidationError("config needs an 'experiment' section for sweep")
    world_raw = dict(section.get("world", {}))
    known_world = {f for f in exp.WorldConfig.__dataclass_fields__}
    unknown = set(world_raw) - known_world
    if unknown:
        raise ValidationError(f"unknown experiment.world keys: {sorted(unknown)}")
    world = exp.WorldConfig(**world_raw)
    exp_cfg = exp.ExperimentConfig(
        axis=section.get("axis", "quota"),
        values=tuple(section.get("values", ())),
        quota=int(section.get("quota", 2)),
        queries_per_canary=int(section.get("queries_per_canary", 1)),
        trials_positive=int(section.get("trials_positive", 500)),
        trials_negative=int(section.get("trials_negative", 500)),
        delta=float(cfg.get("watermark.delta", 2.0)),
        gamma=float(cfg.get("watermark.gamma", 0.5)),
        preset_name=section.get("preset", "easy_prompt"),
        preservation_prob=section.get("preservation_prob"),
        response_length=section.get("response_length"),
        k=int(section.get("k", 3)),
        bootstrap_replicates=int(section.get("bootstrap_replicates", 200)),
        seed=cfg.seed(),
        world=world,
    )
    rows = exp.run_experiment(exp_cfg)
    results = _results_dir(cfg)
    stem = f"sweep-{exp_cfg.axis}-{cfg.fingerprint()}"
    exp.write_results(rows, results / f"{stem}.jsonl", results / f"{stem}.txt")
    plot_sweep(rows, results / f"{stem}.png", title=f"sweep over {exp_cfg.axis}")
    print(exp.results_table(rows))
    print(f"results: {results / (stem + '.jsonl')}")
    print(f"figure:  {results / (stem + '.png')}")
    return EXIT_OK


def cmd_metrics(cfg: RunConfig, args) -> int:
    original = load_corpus(cfg.resolve_path("paths.corpus"))
    protected = load_corpus(cfg.resolve_path("paths.protected_corpus"))
    registry_path = cfg.resolve_path("paths.registry")
    registry = load_registry(registry_path)
    vocabulary = registry_vocabulary(registry, registry_path)

    protected_by_id = {d.doc_id: d for d in protected}
    paired_refs, paired_cands = [], []
    for doc in original:
        if doc.doc_id in protected_by_id:
            paired_refs.append(doc.text)
            paired_cands.append(protected_by_id[doc.doc_id].text)
    bleu_score = bleu(paired_refs, paired_cands)

    words_per_block = int(cfg.get("metrics.words_per_block", 50))
    order = int(cfg.get("metrics.ngram_order", 2))
    alpha = float(cfg.get("metrics.ngram_alpha", 0.1))
    model = train_ngram(
        [vocabulary.encode(d.text) for d in original], order, alpha, vocabulary.size
    )
    scorer = NGramPerplexityScorer(model, vocabulary)
    original_blocks = [b for d in original for b in split_blocks(d.text, words_per_block)]
    threshold = curation_threshold(original_blocks, scorer)
    canary_blocks = [
        b for c in registry.canaries for b in split_blocks(c.text, words_per_block)
    ]
    report = filtering_rate(canary_blocks, scorer, threshold)

    fingerprint = cfg.fingerprint()
    rows = [
        {"metric": "bleu", "scope": "paired-originals", "value": bleu_score, "config": fingerprint},
        {
            "metric": "filtering_rate",
            "scope": "canaries",
            "value": report.filtered_fraction,
            "threshold": threshold,
            "config": fingerprint,
        },
        {
            "metric": "mean_block_perplexity",
            "scope": "canaries",
            "value": float(np.mean(report.perplexities)),
            "config": fingerprint,
        },
    ]
    results = _results_dir(cfg)
    out_path = results / f"metrics-{fingerprint}.jsonl"
    with open(out_path, "a", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True))
            fh.write("\n")
    print(f"BLEU (paired originals): {bleu_score:.6f}")
    print(f"filtering rate (canaries, threshold {threshold:.3f}): {report.filtered_fraction:.4f}")
    print(f"metric records: {out_path}")
    return EXIT_OK


def cmd_registry(cfg: RunConfig, args) -> int:
    registry_path = cfg.resolve_path("paths.registry")
    registry = load_registry(registry_path)
    if args.action == "inspect":
        print(f"registry: {registry_path}")
        print(f"created:  {registry.created_at}")
        print(f"key fingerprint: {registry.key.fingerprint()}")
        print(f"gamma = {registry.key.gamma}, delta = {registry.key.delta}")
        print(f"canaries: {len(registry.canaries)}")
        for c in registry.canaries[:5]:
            print(f"  {c.canary_id}: source={c.source_doc_id} questions={len(c.query_questions)}")
        if len(registry.canaries) > 5:
            print(f"  ... and {len(registry.canaries) - 5} more")
        return EXIT_OK

    vocabulary = registry_vocabulary(registry, registry_path)
    green = derive_green_list(registry.key, vocabulary.size)
    eta = threshold_for_fpr(float(cfg.get("audit.fpr", 0.01)))
    worst = None
    from .generation import green_fraction as gf

    for c in registry.canaries:
        ids = vocabulary.encode(c.text)
        fraction = gf(ids, green)
        if worst is None or fraction < worst[1]:
            worst = (c.canary_id, fraction)
    protected_path = cfg.get("paths.protected_corpus")
    if protected_path:
        docs = {d.doc_id for d in load_corpus(cfg.resolve_path("paths.protected_corpus"))}
        missing = [c.canary_id for c in registry.canaries if c.canary_id not in docs]
        if missing:
            print(f"MISSING from protected corpus: {missing}")
            return EXIT_VALIDATION
        print("registry/corpus cross-check: complete")
    print(f"canaries verified: {len(registry.canaries)}")
    print(f"lowest green fraction: {worst[1]:.4f} ({worst[0]}), gamma = {registry.key.gamma}")
    print(f"eta at configured fpr: {eta:.4f}")
    return EXIT_OK


_COMMANDS = {
    "protect": cmd_protect,
    "audit": cmd_audit,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "metrics": cmd_metrics,
    "registry": cmd_registry,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = RunConfig.load(args.config)
        apply_overrides(cfg, args)
        cfg.seed()  # seeds are mandatory, fail fast
        print(f"# effective config ({cfg.fingerprint()})")
        print(cfg.effective_dump())
        return _COMMANDS[args.command](cfg, args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except SynthesisError as exc:
        print(f"synthesis error: {exc}", file=sys.stderr)
        return EXIT_SYNTHESIS
    except DetectionError as exc:
        print(f"detection error: {exc}", file=sys.stderr)
        return EXIT_DETECTION


if __name__ == "__main__":
    sys.exit(main())
