from .alignment import AlignConfig, alignment_loss, total_loss
from .comparison import ComparisonAnalysis, compare_runs
from .concept_graph import ConceptGraph, extract_graph, oracle_graph
from .config import RunConfig, load_config
from .dataset import PerturbMode, ReasoningSample, generate_dataset
from .model import ModelConfig, decode, forward
from .supervision import SupervisionMask, Vocab, build_mask
from .training import evaluate, train

__all__ = [
    "AlignConfig",
    "alignment_loss",
    "total_loss",
    "ComparisonAnalysis",
    "compare_runs",
    "ConceptGraph",
    "extract_graph",
    "oracle_graph",
    "RunConfig",
    "load_config",
    "PerturbMode",
    "ReasoningSample",
    "generate_dataset",
    "ModelConfig",
    "decode",
    "forward",
    "SupervisionMask",
    "Vocab",
    "build_mask",
    "evaluate",
    "train",
]
