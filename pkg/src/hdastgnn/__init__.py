"""Network-wide hourly traffic volume estimation from speed profiles and road descriptors."""

from .graph import DualGraph, PrimalGraph, build_dual, khop_subgraph, unify_segments
from .model import HDASTGNN, ModelConfig, build_variant
from .synth import SynthConfig, synthesize
from .training import TrainConfig, evaluate, infer_network, train, train_seed

__version__ = "0.1.0"

__all__ = [
    "DualGraph", "PrimalGraph", "build_dual", "khop_subgraph", "unify_segments",
    "HDASTGNN", "ModelConfig", "build_variant", "SynthConfig", "synthesize",
    "TrainConfig", "evaluate", "infer_network", "train", "train_seed",
]
