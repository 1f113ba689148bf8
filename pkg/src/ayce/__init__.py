"""Cross-modal vehicle retrieval: tracking sequences and natural-language
descriptions embedded into one space, trained with a composite triplet
objective, evaluated by mean reciprocal rank."""

from .data import Corpus, Dataset, TrackRecord, compute_stats, load_corpus, load_dataset
from .errors import AyceError
from .metrics import cosine_metric, distance_matrix, euclidean, mrr
from .retrieval import EmbeddingStore, embed_all, evaluate, rank
from .synthetic import SyntheticSpec, generate_synthetic
from .text import TextBranchEncoder, ToySentenceEncoder, finetune_text
from .training import (
    LossConfig,
    ModelVariant,
    TrainConfig,
    VisualBranchEncoder,
    composite_loss,
    train_visual,
)
from .visual import VisualBranch

__version__ = "0.1.0"

__all__ = [
    "AyceError",
    "Corpus",
    "Dataset",
    "EmbeddingStore",
    "LossConfig",
    "ModelVariant",
    "SyntheticSpec",
    "TextBranchEncoder",
    "ToySentenceEncoder",
    "TrackRecord",
    "TrainConfig",
    "VisualBranch",
    "VisualBranchEncoder",
    "__version__",
    "composite_loss",
    "compute_stats",
    "cosine_metric",
    "distance_matrix",
    "embed_all",
    "euclidean",
    "evaluate",
    "finetune_text",
    "generate_synthetic",
    "load_corpus",
    "load_dataset",
    "mrr",
    "rank",
    "train_visual",
]
