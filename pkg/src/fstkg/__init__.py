"""Few-shot reasoning over temporal knowledge graphs with drift-aware meta-learning."""
from .kgstore import TemporalKG, build_task, chronological_split, ingest_tsv
from .meta import TrainConfig, meta_train, temporal_regularizer
from .numkernel import Tape, Tensor, grad_check
from .sampler import sample_temporal_neighbors

__all__ = ["TemporalKG", "build_task", "chronological_split", "ingest_tsv", "TrainConfig", "meta_train",
           "temporal_regularizer", "Tape", "Tensor", "grad_check", "sample_temporal_neighbors"]
__version__ = "0.1.0"
