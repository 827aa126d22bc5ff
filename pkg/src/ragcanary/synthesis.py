"""Five-stage canary synthesis: attributes -> entities -> descriptions ->
watermarked article -> query questions.

The chat stages (attributes, entities, descriptions, queries) go through the
gateway; the article itself is rendered locally through the watermarked
sampler so its token stream carries the green bias. Fictional-entity mentions
are guaranteed by pinning their token spans at fixed offsets inside the
generated stream rather than by resampling until they appear.

Stage ordering inside protect_dataset: all chat-side material is produced
first, then one shared vocabulary is built over the IP corpus plus the
synthesized descriptions and entities, and only then are articles and queries
generated. Detection later re-tokenizes responses with that same vocabulary,
so it is written next to the registry and referenced by relative path + hash.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Document
from .errors import SynthesisError, ValidationError
from .gateway import ChatRequest, Gateway
from .generation import (
    PinnedSpanSource,
    SamplerConfig,
    generate_watermarked,
    green_fraction,
    train_ngram,
)
from .simulator import derive_seed
from .tokenization import Vocabulary, word_pieces
from .watermark import GreenList, WatermarkKey, derive_green_list

log = logging.getLogger(__name__)

REGISTRY_VERSION = 1
VOCABULARY_FILENAME = "vocab.txt"
REGISTRY_FILENAME = "registry.json"

_LENGTH_RANGE_RE = re.compile(r"(\d+)\s*-\s*(\d+)")
_JSON_FENCE_RE = re.compile(r"^```(?:json)?\s*|\s*```$")

ATTRIBUTE_PROMPT = """### Task Description:

A reference text is given. Carefully analyze the reference text and identify the following four key attributes.

1. Topic: provide a high-level theme or general category of the reference text.

2. Subtopics: based on the general topic, identify {n_subtopics} distinct general sub-categories.

3. Writing Style: describe the overall writing style of the reference text.

4. Length Range: provide an estimate of the length range of the reference text in terms of word count.

### Output Format Requirements:

Output the results in JSON format (with four keys: topic, subtopics, writing_styles and length_range) and nothing else, such as
{{"topic": "", "subtopics": ["", ""], "writing_styles": "", "length_range": "m - n words"}}.

### Reference Text:

{sampled_text}"""

ENTITY_PROMPT = """### Task Description:

1. Identify and list {n_real} important entities mentioned within the reference text.

2. Invent {n_fictional} fictional entities that align with the {subtopic} topic.

### Synthesized Entities Requirements:

1. The invented entities should be creative and distinct.

2. Ensure the invented entities are fictional and do not overlap with real-world entities or any entity named in the reference text.

### Output Format Requirements:

Output the results in JSON format (with two keys: real_entity and fictional_entity) and nothing else, such as {{"real_entity": ["", ""], "fictional_entity": ["", ""]}}.

### Reference Text:

{sampled_text}"""

DESCRIPTION_PROMPT = """### Task Description:

1. Write {n_descriptions} descriptions in a {writing_style} style, one about each of the following entities: {entities}.

2. Create {n_interactions} additional descriptions of how those entities interact within the context of the {subtopic} topic.

### Synthesized Description Requirements:

1. Create unique and imaginative content that is not derived from existing material.

2. Use creativity to simulate realistic scenarios that fit the thematic boundaries.

3. Ensure factual accuracy where applicable, even in invented scenarios.

4. Incorporate diverse and inclusive content.

5. Do not mention "fictional" or give any other indication that an entity or interaction is not real.

### Output Format Requirements:

Output the results in JSON format and nothing else, such as {{"description_1": "", "description_2": ""}}."""

QUERY_PROMPT = """### Task Description:

Given an article, generate a question that can only be answered by reading the document. The answer should be a longer detailed response, so avoid factual and simple yes/no questions and steer more towards questions that ask for opinions or explanations of events or topics described in the document. Do not provide the answer, provide just the question.

### Article:

{article}"""

_SYSTEM_PROMPT = "You are a careful analyst and content creator. Follow the output format exactly."


@dataclass(frozen=True)
class DocumentAttributes:
    topic: str
    subtopics: tuple[str, ...]
    writing_style: str
    word_count_range: tuple[int, int]

    def __post_init__(self):
        lo, hi = self.word_count_range
        if lo > hi:
            raise ValidationError(f"word count range {lo}-{hi} has min > max")
        if not self.topic or not self.writing_style or not self.subtopics:
            raise ValidationError("attributes need a topic, a writing style, and >=1 subtopic")

    def to_record(self) -> dict:
        return {
            "topic": self.topic,
            "subtopics": list(self.subtopics),
            "writing_style": self.writing_style,
            "word_count_range": list(self.word_count_range),
        }

    @staticmethod
    def from_record(record: dict) -> "DocumentAttributes":
        return DocumentAttributes(
            topic=record["topic"],
            subtopics=tuple(record["subtopics"]),
            writing_style=record["writing_style"],
            word_count_range=(record["word_count_range"][0], record["word_count_range"][1]),
        )


@dataclass(frozen=True)
class EntitySet:
    real_entities: tuple[str, ...]
    fictional_entities: tuple[str, ...]

    def __post_init__(self):
        real = {e.lower() for e in self.real_entities}
        for ent in self.fictional_entities:
            if ent.lower() in real:
                raise ValidationError(f"fictional entity {ent!r} collides with a real entity")

    def to_record(self) -> dict:
        return {"real": list(self.real_entities), "fictional": list(self.fictional_entities)}

    @staticmethod
    def from_record(record: dict) -> "EntitySet":
        return EntitySet(tuple(record["real"]), tuple(record["fictional"]))


@dataclass(frozen=True)
class DescriptionSet:
    descriptions: tuple[str, ...]


@dataclass(frozen=True)
class CanaryRecord:
    canary_id: str
    text: str
    source_doc_id: str
    attributes: DocumentAttributes
    subtopic: str
    entities: EntitySet
    query_questions: tuple[str, ...]
    key_fingerprint: str
    created_at: str

    def __post_init__(self):
        if not self.query_questions:
            raise ValidationError(f"canary {self.canary_id} has no query questions")

    def to_record(self) -> dict:
        return {
            "canary_id": self.canary_id,
            "text": self.text,
            "source_doc_id": self.source_doc_id,
            "attributes": self.attributes.to_record(),
            "subtopic": self.subtopic,
            "entities": self.entities.to_record(),
            "query_questions": list(self.query_questions),
            "key_fingerprint": self.key_fingerprint,
            "created_at": self.created_at,
        }

    @staticmethod
    def from_record(record: dict) -> "CanaryRecord":
        return CanaryRecord(
            canary_id=record["canary_id"],
            text=record["text"],
            source_doc_id=record["source_doc_id"],
            attributes=DocumentAttributes.from_record(record["attributes"]),
            subtopic=record["subtopic"],
            entities=EntitySet.from_record(record["entities"]),
            query_questions=tuple(record["query_questions"]),
            key_fingerprint=record["key_fingerprint"],
            created_at=record["created_at"],
        )


@dataclass
class ProtectedDataset:
    original_docs: list[Document]
    canaries: list[CanaryRecord]
    failures: list[dict] = field(default_factory=list)

    def documents(self) -> list[Document]:
        """The publishable corpus: originals unchanged, canaries appended."""
        out = list(self.original_docs)
        out.extend(Document(c.canary_id, c.text, {}) for c in self.canaries)
        return out


@dataclass
class Registry:
    key: WatermarkKey
    canaries: list[CanaryRecord]
    vocabulary_file: str
    vocabulary_sha256: str
    config: dict
    created_at: str
    version: int = REGISTRY_VERSION


@dataclass(frozen=True)
class SynthesisConfig:
    seed: int
    real_entities: int = 2
    fictional_entities: int = 2
    interaction_descriptions: int = 1
    subtopics_requested: int = 2
    retries: int = 3
    creative_temperature: float = 0.7
    extraction_temperature: float = 0.0
    entity_mentions: int = 5
    tokens_per_word: float = 1.3
    max_chat_tokens: int = 800
    ngram_order: int = 2
    ngram_alpha: float = 0.1
    article_temperature: float = 1.0
    vocab_max_size: int | None = None
    created_at: str = "1970-01-01T00:00:00+00:00"

    def to_record(self) -> dict:
        return {
            "seed": self.seed,
            "real_entities": self.real_entities,
            "fictional_entities": self.fictional_entities,
            "interaction_descriptions": self.interaction_descriptions,
            "subtopics_requested": self.subtopics_requested,
            "retries": self.retries,
            "creative_temperature": self.creative_temperature,
            "extraction_temperature": self.extraction_temperature,
            "entity_mentions": self.entity_mentions,
            "tokens_per_word": self.tokens_per_word,
            "max_chat_tokens": self.max_chat_tokens,
            "ngram_order": self.ngram_order,
            "ngram_alpha": self.ngram_alpha,
            "article_temperature": self.article_temperature,
            "vocab_max_size": self.vocab_max_size,
        }


def flatten_whitespace(text: str) -> str:
    """Collapse whitespace runs to single spaces; keeps vocabulary tokens newline-free."""
    return " ".join(text.split())


def _parse_json_payload(raw: str) -> dict:
    cleaned = _JSON_FENCE_RE.sub("", raw.strip())
    try:
        payload = json.loads(cleaned)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"output is not valid JSON ({exc})") from exc
    if not isinstance(payload, dict):
        raise ValidationError("output JSON is not an object")
    return payload


def _require_keys(payload: dict, keys: set[str]) -> None:
    if set(payload) != keys:
        raise ValidationError(f"output keys {sorted(payload)} != expected {sorted(keys)}")


def _chat_with_retries(gateway, base_prompt, temperature, max_tokens, parse, cfg, stage):
    """Run a chat stage: base call, one repair re-prompt per round, cfg.retries rounds."""
    last_raw = ""
    reason = ""
    for attempt in range(1, cfg.retries + 1):
        prompt = base_prompt if attempt == 1 else f"{base_prompt}\n\n### Note: attempt {attempt}."
        for is_repair in (False, True):
            if is_repair:
                prompt_used = (
                    f"{prompt}\n\n### Correction:\nYour previous output could not be used "
                    f"({reason}). Follow the output format exactly and output nothing else."
                )
            else:
                prompt_used = prompt
            resp = gateway.chat(
                ChatRequest(
                    system_prompt=_SYSTEM_PROMPT,
                    user_prompt=prompt_used,
                    temperature=temperature,
                    max_output_tokens=max_tokens,
                )
            )
            last_raw = resp.text
            try:
                return parse(resp.text)
            except ValidationError as exc:
                reason = str(exc)
                log.debug("%s attempt %d%s rejected: %s", stage, attempt, " (repair)" if is_repair else "", reason)
    raise SynthesisError(
        f"{stage} failed after {cfg.retries} attempts: {reason}",
        attempts=cfg.retries,
        raw_output=last_raw,
    )


# -- stage 1: attribute extraction -------------------------------------------


def parse_attributes(raw: str) -> DocumentAttributes:
    payload = _parse_json_payload(raw)
    _require_keys(payload, {"topic", "subtopics", "writing_styles", "length_range"})
    subtopics = payload["subtopics"]
    if not isinstance(subtopics, list) or not subtopics:
        raise ValidationError("subtopics must be a nonempty list")
    match = _LENGTH_RANGE_RE.search(str(payload["length_range"]))
    if not match:
        raise ValidationError(f"length_range {payload['length_range']!r} is not 'm - n words'")
    lo, hi = int(match.group(1)), int(match.group(2))
    if lo > hi:
        raise ValidationError(f"length_range {lo}-{hi} has min > max")
    topic = str(payload["topic"]).strip()
    style = str(payload["writing_styles"]).strip()
    if not topic or not style:
        raise ValidationError("topic and writing_styles must be nonempty")
    return DocumentAttributes(
        topic=topic,
        subtopics=tuple(str(s).strip() for s in subtopics),
        writing_style=style,
        word_count_range=(lo, hi),
    )


def extract_attributes(doc: str, gateway: Gateway, cfg: SynthesisConfig) -> DocumentAttributes:
    if not doc.strip():
        raise ValidationError("cannot extract attributes from an empty document")
    prompt = ATTRIBUTE_PROMPT.format(n_subtopics=cfg.subtopics_requested, sampled_text=doc)
    return _chat_with_retries(
        gateway, prompt, cfg.extraction_temperature, cfg.max_chat_tokens,
        parse_attributes, cfg, "attribute extraction",
    )


# -- stage 2: entity creation --------------------------------------------------


def _parse_entities(raw: str, doc: str, n_real: int, n_fictional: int) -> EntitySet:
    payload = _parse_json_payload(raw)
    _require_keys(payload, {"real_entity", "fictional_entity"})
    real = [str(e).strip() for e in payload["real_entity"]]
    fictional = [str(e).strip() for e in payload["fictional_entity"]]
    if len(real) != n_real or len(fictional) != n_fictional:
        raise ValidationError(
            f"expected {n_real} real + {n_fictional} fictional entities, "
            f"got {len(real)} + {len(fictional)}"
        )
    if any(not e for e in real + fictional):
        raise ValidationError("entities must be nonempty strings")
    doc_lower = doc.lower()
    for ent in fictional:
        if ent.lower() in doc_lower:
            raise ValidationError(f"fictional entity {ent!r} appears verbatim in the source document")
    return EntitySet(tuple(real), tuple(fictional))


def create_entities(
    doc: str, attrs: DocumentAttributes, subtopic: str, gateway: Gateway, cfg: SynthesisConfig
) -> EntitySet:
    prompt = ENTITY_PROMPT.format(
        n_real=cfg.real_entities,
        n_fictional=cfg.fictional_entities,
        subtopic=subtopic,
        sampled_text=doc,
    )
    return _chat_with_retries(
        gateway, prompt, cfg.creative_temperature, cfg.max_chat_tokens,
        lambda raw: _parse_entities(raw, doc, cfg.real_entities, cfg.fictional_entities),
        cfg, "entity creation",
    )


# -- stage 3: description synthesis --------------------------------------------


def _parse_descriptions(raw: str, fictional: tuple[str, ...], expected: int) -> DescriptionSet:
    payload = _parse_json_payload(raw)
    keys = sorted(payload)
    if not keys or any(not k.startswith("description_") for k in keys):
        raise ValidationError("descriptions must use keys description_1, description_2, ...")
    if len(keys) != expected:
        raise ValidationError(f"expected {expected} descriptions, got {len(keys)}")
    ordered = sorted(keys, key=lambda k: int(k.split("_")[-1]))
    descriptions = tuple(str(payload[k]).strip() for k in ordered)
    if any(not d for d in descriptions):
        raise ValidationError("descriptions must be nonempty")
    joined = " ".join(descriptions).lower()
    if "fictional" in joined:
        raise ValidationError('descriptions must not contain the word "fictional"')
    for ent in fictional:
        if ent.lower() not in joined:
            raise ValidationError(f"entity {ent!r} is not mentioned in any description")
    return DescriptionSet(descriptions)


def synthesize_descriptions(
    entities: EntitySet,
    attrs: DocumentAttributes,
    subtopic: str,
    gateway: Gateway,
    cfg: SynthesisConfig,
) -> DescriptionSet:
    if not entities.fictional_entities:
        raise ValidationError("description synthesis needs at least one fictional entity")
    n_descriptions = len(entities.fictional_entities)
    expected = n_descriptions + cfg.interaction_descriptions
    prompt = DESCRIPTION_PROMPT.format(
        n_descriptions=n_descriptions,
        writing_style=attrs.writing_style,
        entities=", ".join(entities.fictional_entities),
        n_interactions=cfg.interaction_descriptions,
        subtopic=subtopic,
    )
    return _chat_with_retries(
        gateway, prompt, cfg.creative_temperature, cfg.max_chat_tokens,
        lambda raw: _parse_descriptions(raw, entities.fictional_entities, expected),
        cfg, "description synthesis",
    )


# -- stage 4: watermarked article ------------------------------------------------


class WatermarkedWriter:
    """Renders articles through the watermarked sampler over an n-gram source."""

    def __init__(
        self,
        vocabulary: Vocabulary,
        key: WatermarkKey,
        green: GreenList | None = None,
        order: int = 2,
        alpha: float = 0.1,
        temperature: float = 1.0,
        base_seed: int = 0,
        tokens_per_word: float = 1.3,
        entity_mentions: int = 5,
    ):
        self.vocabulary = vocabulary
        self.key = key
        self.green = green if green is not None else derive_green_list(key, vocabulary.size)
        self.order = order
        self.alpha = alpha
        self.temperature = temperature
        self.base_seed = base_seed
        self.tokens_per_word = tokens_per_word
        self.entity_mentions = entity_mentions

    def token_budget(self, word_count_range: tuple[int, int]) -> int:
        midpoint = (word_count_range[0] + word_count_range[1]) / 2.0
        return max(int(round(midpoint * self.tokens_per_word)), 8)

    def write(
        self,
        descriptions: DescriptionSet,
        entities: EntitySet,
        word_count_range: tuple[int, int],
        canary_index: int,
    ) -> str:
        vocab = self.vocabulary
        flat = [flatten_whitespace(d) for d in descriptions.descriptions]
        source_model = train_ngram(
            [vocab.encode(d) for d in flat], self.order, self.alpha, vocab.size
        )
        budget = self.token_budget(word_count_range)
        prompt = vocab.encode(flatten_whitespace(" ".join(flat)))
        # Fictional entities recur through the article (mirroring how real
        # canaries keep naming their entities), which both satisfies the
        # mention requirement and anchors retrieval on the entity words.
        spans = [
            vocab.encode(" " + ent).ids
            for _ in range(max(self.entity_mentions, 1))
            for ent in entities.fictional_entities
        ]
        pins = PinnedSpanSource.spread_spans(spans, budget, len(prompt))
        source = PinnedSpanSource(source_model, pins, len(prompt))
        cfg = SamplerConfig(
            max_tokens=budget,
            rng_seed=derive_seed(self.base_seed, "article", canary_index),
            temperature=self.temperature,
        )
        ids = generate_watermarked(source, self.key, self.green, cfg, prompt)
        return vocab.decode(ids)


def synthesize_article(
    descriptions: DescriptionSet,
    entities: EntitySet,
    word_count_range: tuple[int, int],
    writer: WatermarkedWriter,
    canary_index: int = 0,
) -> str:
    text = writer.write(descriptions, entities, word_count_range, canary_index)
    _check_token_length(text, word_count_range, writer)
    return text


def _check_token_length(text: str, word_count_range: tuple[int, int], writer: WatermarkedWriter):
    # Soft budget; hard rejection only outside [0.5*min, 2*max] in token terms.
    t = len(writer.vocabulary.encode(text))
    lo = 0.5 * word_count_range[0] * writer.tokens_per_word
    hi = 2.0 * word_count_range[1] * writer.tokens_per_word
    if not lo <= t <= hi:
        raise SynthesisError(
            f"article token length {t} outside tolerance [{lo:.0f}, {hi:.0f}]"
        )


# -- stage 5: query questions ---------------------------------------------------


def generate_query(
    canary_text: str,
    gateway: Gateway,
    fictional_entities: tuple[str, ...],
    previous_questions: tuple[str, ...] = (),
    cfg: SynthesisConfig | None = None,
) -> str:
    if not canary_text.strip():
        raise ValidationError("cannot generate a query for an empty canary")
    cfg = cfg or SynthesisConfig(seed=0)
    prompt = QUERY_PROMPT.format(article=canary_text)
    if previous_questions:
        listing = "\n".join(f"- {q}" for q in previous_questions)
        prompt += f"\n\n### The question must differ from all of these:\n{listing}"

    def parse(raw: str) -> str:
        question = raw.strip()
        if not question:
            raise ValidationError("question is empty")
        lower = question.lower()
        if not any(ent.lower() in lower for ent in fictional_entities):
            raise ValidationError("question does not mention any fictional entity")
        if question in previous_questions:
            raise ValidationError("question duplicates an earlier one")
        return question

    return _chat_with_retries(
        gateway, prompt, cfg.extraction_temperature, cfg.max_chat_tokens,
        parse, cfg, "query generation",
    )


# -- full pipeline ----------------------------------------------------------------


def protect_dataset(
    ip_docs: list[Document],
    count: int,
    queries_per_canary: int,
    cfg: SynthesisConfig,
    gateway: Gateway,
    key: WatermarkKey,
    out_dir,
) -> tuple[ProtectedDataset, Path]:
    """Run the full pipeline and write registry + vocabulary under out_dir.

    Original documents are never touched; canaries are appended. A canary
    whose stages keep failing is skipped and reported in the result's
    failures list (partial success is allowed); the run fails only if no
    canary survives.
    """
    if count < 1:
        raise ValidationError(f"canary count must be >= 1, got {count}")
    if queries_per_canary < 1:
        raise ValidationError(f"queries_per_canary must be >= 1, got {queries_per_canary}")
    if not ip_docs:
        raise ValidationError("IP corpus is empty")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    doc_indices = rng.integers(0, len(ip_docs), size=count)

    # Chat-side stages first, so one shared vocabulary can cover everything.
    staged = []
    failures: list[dict] = []
    for i in range(count):
        source = ip_docs[int(doc_indices[i])]
        try:
            attrs = extract_attributes(source.text, gateway, cfg)
            subtopic = attrs.subtopics[int(rng.integers(0, len(attrs.subtopics)))]
            entities = create_entities(source.text, attrs, subtopic, gateway, cfg)
            descriptions = synthesize_descriptions(entities, attrs, subtopic, gateway, cfg)
        except (SynthesisError, ValidationError) as exc:
            log.warning("canary %d aborted during chat stages: %s", i, exc)
            failures.append({"canary_index": i, "stage": "chat", "error": str(exc)})
            continue
        staged.append((i, source, attrs, subtopic, entities, descriptions))

    if not staged:
        raise SynthesisError("every canary failed during the chat stages")

    entity_pieces: list[str] = []
    description_texts: list[str] = []
    for _, _, _, _, entities, descriptions in staged:
        for ent in entities.fictional_entities + entities.real_entities:
            entity_pieces.extend(word_pieces(" " + ent))
            entity_pieces.extend(word_pieces(ent))
        description_texts.extend(flatten_whitespace(d) for d in descriptions.descriptions)

    vocabulary = Vocabulary.from_corpus(
        [flatten_whitespace(d.text) for d in ip_docs] + description_texts,
        max_size=cfg.vocab_max_size,
        extra_tokens=entity_pieces,
    )
    green = derive_green_list(key, vocabulary.size)
    writer = WatermarkedWriter(
        vocabulary,
        key,
        green,
        order=cfg.ngram_order,
        alpha=cfg.ngram_alpha,
        temperature=cfg.article_temperature,
        base_seed=cfg.seed,
        tokens_per_word=cfg.tokens_per_word,
        entity_mentions=cfg.entity_mentions,
    )

    canaries: list[CanaryRecord] = []
    fingerprint = key.fingerprint()
    for i, source, attrs, subtopic, entities, descriptions in staged:
        try:
            text = synthesize_article(
                descriptions, entities, attrs.word_count_range, writer, canary_index=i
            )
            questions: list[str] = []
            for _ in range(queries_per_canary):
                questions.append(
                    generate_query(
                        text, gateway, entities.fictional_entities, tuple(questions), cfg
                    )
                )
            canaries.append(
                CanaryRecord(
                    canary_id=f"canary-{i:04d}",
                    text=text,
                    source_doc_id=source.doc_id,
                    attributes=attrs,
                    subtopic=subtopic,
                    entities=entities,
                    query_questions=tuple(questions),
                    key_fingerprint=fingerprint,
                    created_at=cfg.created_at,
                )
            )
        except (SynthesisError, ValidationError) as exc:
            log.warning("canary %d aborted during article/query stages: %s", i, exc)
            failures.append({"canary_index": i, "stage": "article", "error": str(exc)})

    if not canaries:
        raise SynthesisError("every canary failed before reaching the registry")
    if failures:
        log.warning("%d of %d canaries failed; registry holds %d",
                    len(failures), count, len(canaries))

    vocab_path = out_dir / VOCABULARY_FILENAME
    vocabulary.save(vocab_path)
    registry = Registry(
        key=key,
        canaries=canaries,
        vocabulary_file=VOCABULARY_FILENAME,
        vocabulary_sha256=_sha256_file(vocab_path),
        config=cfg.to_record(),
        created_at=cfg.created_at,
    )
    registry_path = out_dir / REGISTRY_FILENAME
    save_registry(registry, registry_path)

    protected = ProtectedDataset(list(ip_docs), canaries, failures)
    return protected, registry_path


def mean_green_fraction(registry: Registry, vocabulary: Vocabulary) -> float:
    green = derive_green_list(registry.key, vocabulary.size)
    fractions = [green_fraction(vocabulary.encode(c.text), green) for c in registry.canaries]
    return float(np.mean(fractions))


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def save_registry(registry: Registry, path) -> None:
    record = {
        "format_version": registry.version,
        "created_at": registry.created_at,
        "watermark_key": registry.key.to_record(),
        "key_fingerprint": registry.key.fingerprint(),
        "config": registry.config,
        "vocabulary": {"path": registry.vocabulary_file, "sha256": registry.vocabulary_sha256},
        "canaries": [c.to_record() for c in registry.canaries],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(record, fh, ensure_ascii=False, sort_keys=True, indent=2)
        fh.write("\n")


def load_registry(path) -> Registry:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        record = json.load(fh)
    if record.get("format_version") != REGISTRY_VERSION:
        raise ValidationError(f"unsupported registry version {record.get('format_version')}")
    registry = Registry(
        key=WatermarkKey.from_record(record["watermark_key"]),
        canaries=[CanaryRecord.from_record(c) for c in record["canaries"]],
        vocabulary_file=record["vocabulary"]["path"],
        vocabulary_sha256=record["vocabulary"]["sha256"],
        config=record["config"],
        created_at=record["created_at"],
        version=record["format_version"],
    )
    vocab_path = path.parent / registry.vocabulary_file
    if vocab_path.exists() and _sha256_file(vocab_path) != registry.vocabulary_sha256:
        raise ValidationError(f"vocabulary file {vocab_path} does not match the registry hash")
    return registry


def registry_vocabulary(registry: Registry, registry_path) -> Vocabulary:
    from .tokenization import load_vocabulary

    vocab_path = Path(registry_path).parent / registry.vocabulary_file
    if not vocab_path.exists():
        raise ValidationError(f"vocabulary file {vocab_path} is missing")
    if _sha256_file(vocab_path) != registry.vocabulary_sha256:
        raise ValidationError(f"vocabulary file {vocab_path} does not match the registry hash")
    return load_vocabulary(vocab_path)
