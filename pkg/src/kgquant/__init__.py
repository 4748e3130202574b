"""Compositional knowledge-graph representation with pluggable entity quantization."""
from .analysis import code_entropy, jaccard_distance, knn_jaccard, uniqueness_probability
from .kg import KnowledgeGraph, build_adjacency, filter_unseen, load_tsv, synth_kg
from .quantize import EntityCode, QuantConfig, quantize_all, variant_config

__all__ = [
    "KnowledgeGraph",
    "EntityCode",
    "QuantConfig",
    "build_adjacency",
    "code_entropy",
    "filter_unseen",
    "jaccard_distance",
    "knn_jaccard",
    "load_tsv",
    "quantize_all",
    "synth_kg",
    "uniqueness_probability",
    "variant_config",
]

__version__ = "0.1.0"
