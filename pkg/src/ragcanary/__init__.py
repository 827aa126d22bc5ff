"""ragcanary: dataset protection with watermarked canary documents and
black-box audits of retrieval-augmented generation systems."""

from .audit import AuditOutcome, AuditPlan, RocCurve, evaluate_roc, run_audit
from .corpus import Document, load_corpus, save_corpus
from .errors import (
    DetectionError,
    RagCanaryError,
    SynthesisError,
    TransportError,
    ValidationError,
)
from .generation import (
    NGramModel,
    SamplerConfig,
    UniformLogitSource,
    generate_watermarked,
    green_fraction,
    train_ngram,
)
from .retrieval import (
    HashingEmbedder,
    RetrievalResult,
    VectorIndex,
    build_index,
    retrieve,
    target_retrieval_accuracy,
)
from .simulator import ChannelConfig, RagSimulator, preset
from .synthesis import (
    CanaryRecord,
    ProtectedDataset,
    Registry,
    SynthesisConfig,
    load_registry,
    protect_dataset,
    save_registry,
)
from .tokenization import TokenSequence, Vocabulary, load_vocabulary
from .watermark import (
    DetectionReport,
    GreenList,
    WatermarkKey,
    bias_logits,
    derive_green_list,
    detect,
    threshold_for_fpr,
    z_statistic,
)

__version__ = "0.1.0"
