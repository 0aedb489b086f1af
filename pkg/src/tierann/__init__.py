"""Hierarchical approximate nearest neighbour search with bounded fetch rounds."""

from .core import (Candidate, FormatError, IndexCorruptionError, Metric, SearchParams, UsageError,
                   distance, level_of, make_id, mean_recall, recall_at_k, top_candidates)
from .dataset import Dataset, GroundTruth, brute_force_topk, generate_sift_like, generate_synthetic
from .hierarchy import HierarchicalIndex, build_levels, evaluate, load_index, save_index, search

__version__ = "0.1.0"

__all__ = [
    "Candidate", "Dataset", "FormatError", "GroundTruth", "HierarchicalIndex", "IndexCorruptionError",
    "Metric", "SearchParams", "UsageError", "brute_force_topk", "build_levels", "distance",
    "evaluate", "generate_sift_like", "generate_synthetic", "level_of", "load_index", "make_id",
    "mean_recall", "recall_at_k", "save_index", "search", "top_candidates",
]
