"""evidex: evidence-based image retrieval classification.

A small convolutional embedding trained with a hierarchical triplet
hinge, exact kNN classification by neighbor vote, and per-decision
evidence: the retrieved neighbors plus query/result activation map pairs
showing where the distance came from.
"""

__version__ = "0.1.0"

from .core import ParamSet, Tape  # noqa: F401
from .model import EmbeddingOutput, ModelConfig  # noqa: F401
from .triplets import HierLabel, TrainConfig, Triplet  # noqa: F401
