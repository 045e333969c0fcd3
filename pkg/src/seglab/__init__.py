"""Desk-scale semi-supervised segmentation lab.

Two small per-pixel classifiers are co-trained on a synthetic shapes
dataset: where their predictions on unlabeled images agree they teach
each other cautiously, where they disagree a class-confusion score
decides which branch's guess becomes the target, and every pseudo-label
term is re-weighted by prediction confidence.
"""

__version__ = "0.1.0"

from .grid import IGNORE

__all__ = ["IGNORE", "__version__"]
