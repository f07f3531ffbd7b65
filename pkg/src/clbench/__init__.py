"""Desk-scale continual-learning harness.

Compiles episodic timelines from a batch catalog, trains a small numpy
sequence model under several continual-learning strategies on synthetic
stand-in tasks, and scores everything with a MER-based metric suite.
"""

from .manifest import BatchMeta, Catalog, language_hours, load_bundled_catalog, load_catalog, save_catalog
from .metrics import MerMatrix, MerScore, ReferenceDiagonals, amer, bwt, fwt, im, mer, metric_series
from .timeline import Episode, Timeline, build_dil, build_lidil, build_lil, load_timeline, save_timeline, validate_timeline

__version__ = "0.1.0"

__all__ = [
    "BatchMeta",
    "Catalog",
    "Episode",
    "MerMatrix",
    "MerScore",
    "ReferenceDiagonals",
    "Timeline",
    "amer",
    "build_dil",
    "build_lidil",
    "build_lil",
    "bwt",
    "fwt",
    "im",
    "language_hours",
    "load_bundled_catalog",
    "load_catalog",
    "load_timeline",
    "mer",
    "metric_series",
    "save_catalog",
    "save_timeline",
    "validate_timeline",
    "__version__",
]
