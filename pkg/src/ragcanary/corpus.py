"""Line-delimited corpus files: one JSON document per line with id, text, meta."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ValidationError


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    meta: dict = field(default_factory=dict)


def load_corpus(path) -> list[Document]:
    docs: list[Document] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if "id" not in record or "text" not in record:
                raise ValidationError(f"{path}:{lineno}: document needs 'id' and 'text'")
            doc_id = str(record["id"])
            if doc_id in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate doc id {doc_id!r}")
            seen.add(doc_id)
            docs.append(Document(doc_id, record["text"], record.get("meta", {})))
    if not docs:
        raise ValidationError(f"corpus file {path} contains no documents")
    return docs


def save_corpus(docs, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for doc in docs:
            record = {"id": doc.doc_id, "text": doc.text, "meta": doc.meta}
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True))
            fh.write("\n")
