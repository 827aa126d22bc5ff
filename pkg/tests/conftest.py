import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dnp_content import DNP_DOC, FILLER_DOCS, mock_chat_transport  # noqa: E402

from ragcanary.corpus import Document, save_corpus  # noqa: E402
from ragcanary.gateway import FixtureStore, Gateway  # noqa: E402
from ragcanary.synthesis import SynthesisConfig, protect_dataset  # noqa: E402
from ragcanary.watermark import WatermarkKey  # noqa: E402


@pytest.fixture(scope="session")
def dnp_corpus() -> list[Document]:
    docs = [Document("nf-dnp-0001", DNP_DOC)]
    docs += [Document(f"nf-fill-{i:04d}", text) for i, text in enumerate(FILLER_DOCS)]
    return docs


@pytest.fixture(scope="session")
def dnp_fixture_dir(tmp_path_factory, dnp_corpus) -> Path:
    """Record the scripted chat responses through the real gateway once."""
    fixtures = tmp_path_factory.mktemp("dnp-fixtures")
    store = FixtureStore(fixtures)
    gateway = Gateway(
        chat_endpoint=_mock_endpoint(),
        fixtures=store,
        record=True,
        transport=mock_chat_transport(),
        sleeper=lambda _x: None,
    )
    out_dir = tmp_path_factory.mktemp("dnp-record-out")
    protect_dataset(
        dnp_corpus, 1, 1, SynthesisConfig(seed=20240819), gateway,
        WatermarkKey(seed=9001), out_dir,
    )
    gateway.close()
    return fixtures


def _mock_endpoint():
    from ragcanary.gateway import ChatEndpoint

    return ChatEndpoint(url="https://mock.invalid/v1/chat/completions", model="scripted")


@pytest.fixture(scope="session")
def dnp_corpus_file(tmp_path_factory, dnp_corpus) -> Path:
    path = tmp_path_factory.mktemp("dnp-data") / "corpus.jsonl"
    save_corpus(dnp_corpus, path)
    return path


def write_config(path: Path, data: dict) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2)
    return path
