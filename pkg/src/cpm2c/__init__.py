"""Few-shot action recognition over precomputed frame embeddings.

The package builds class prototypes from prompt-conditioned support
features, compensates them with frame-difference motion cues, scores
query videos by soft temporal alignment, and trains the whole stack
episodically with a small reverse-mode autodiff core.
"""

from .tensor import Tensor, Tape, backward, precision

__all__ = ["Tensor", "Tape", "backward", "precision"]

__version__ = "0.1.0"
