"""Training objectives: prompt-adaptation, episode classification, total.

The adaptation loss matches mean-pooled video features against the
prompt embeddings of every training class through a temperature softmax
over cosine similarity. The task loss is cross-entropy over the
alignment-based episode probabilities. The total is their weighted sum
together with the consistency term.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    """Weights of the three loss terms plus the adaptation temperature."""

    lam_adapt: float = 1.0
    lam_task: float = 1.0
    lam_consistency: float = 1.0
    temperature: float = 0.1

    def __post_init__(self):
        for name in ("lam_adapt", "lam_task", "lam_consistency"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {val}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, "
                              f"got {self.temperature}")


def dam_probabilities(video_frames, prompt_bank, temperature) -> Tensor:
    """Per-video class probabilities against the whole prompt bank.

    Each video is mean-pooled over its frames, scored by cosine against
    every bank prompt, and the cosines pass through a temperature softmax.
    Returns a (V, C) tensor whose rows sum to 1.
    """
    videos = list(video_frames)
    if not videos:
        raise ShapeError("dam_probabilities: no videos")
    bank = np.asarray(prompt_bank.data if isinstance(prompt_bank, Tensor)
                      else prompt_bank)
    if bank.ndim != 2 or bank.shape[0] < 1:
        raise ShapeError(f"prompt bank must be C x D, got {bank.shape}")
    norms = np.sqrt((bank.astype(np.float64) ** 2).sum(axis=1))
    if (norms == 0).any():
        raise DomainError(f"zero-norm prompt at row "
                          f"{int(np.flatnonzero(norms == 0)[0])}")

    reps = T.concat([T.reshape(T.reduce_mean(f, axis=0), (1, bank.shape[1]))
                     for f in videos], axis=0)              # (V, D)
    rep_sq = (np.asarray(reps.data) ** 2).sum(axis=1)
    if (rep_sq == 0).any():
        raise DomainError(f"zero-norm pooled representation for video "
                          f"{int(np.flatnonzero(rep_sq == 0)[0])}")
    dots = T.matmul(reps, Tensor(bank.T))                   # (V, C)
    rep_norm = T.exp(T.scale(T.log(T.reduce_sum(T.mul(reps, reps), axis=1,
                                                keepdims=True)), 0.5))
    denom = T.matmul(rep_norm, Tensor(norms.reshape(1, -1)))
    cos = T.div(dots, denom)
    temp = temperature if isinstance(temperature, Tensor) else Tensor(float(temperature))
    return T.softmax(T.div(cos, temp), axis=-1)


def dam_loss(video_frames, prompt_bank, true_indices, temperature) -> Tensor:
    """Cross-entropy of pooled videos against all training-class prompts.

    ``video_frames``: list of T x D frame tensors (one per episode video);
    ``prompt_bank``: C x D array of class prompt embeddings, row order
    defining the index space of ``true_indices``; ``temperature`` divides
    the cosine logits and may be a learnable scalar tensor.
    """
    videos = list(video_frames)
    if len(videos) != len(true_indices):
        raise ShapeError(f"{len(videos)} videos vs {len(true_indices)} labels")
    probs = dam_probabilities(videos, prompt_bank, temperature)
    num_classes = probs.shape[1]
    for idx in true_indices:
        if not 0 <= idx < num_classes:
            raise ShapeError(f"label {idx} outside prompt bank of "
                             f"{num_classes} classes")
    onehot = np.zeros((len(videos), num_classes))
    onehot[np.arange(len(videos)), np.asarray(true_indices)] = 1.0
    picked = T.reduce_sum(T.mul(probs, Tensor(onehot)), axis=-1)
    return T.neg(T.reduce_mean(T.log(picked)))


_clamp_lock = threading.Lock()
_clamp_count = 0


def clamp_count() -> int:
    """How many query probabilities have been clamped at the floor so far."""
    return _clamp_count


def reset_clamp_count() -> None:
    global _clamp_count
    with _clamp_lock:
        _clamp_count = 0


def task_loss(probabilities, true_indices, floor: float = 1e-12) -> Tensor:
    """Mean negative log probability of the true class over the queries.

    ``probabilities``: list of per-query class probability vectors from
    classification. Probabilities below ``floor`` are clamped there (and
    counted) so the log stays finite.
    """
    global _clamp_count
    probs = list(probabilities)
    if len(probs) != len(true_indices):
        raise ShapeError(f"{len(probs)} probability vectors vs "
                         f"{len(true_indices)} labels")
    if not probs:
        raise ShapeError("task_loss: no queries")
    total = None
    clamped = 0
    for vec, idx in zip(probs, true_indices):
        if not 0 <= idx < vec.shape[0]:
            raise ShapeError(f"label {idx} outside {vec.shape[0]} classes")
        p = T.slice_axis(vec, 0, idx, idx + 1)
        if float(p.data[0]) < floor:
            clamped += 1
        # clamp_min(p, floor) = relu(p - floor) + floor inside the op set
        p = T.add(T.relu(T.sub(p, Tensor(floor))), Tensor(floor))
        term = T.log(p)
        total = term if total is None else T.add(total, term)
    if clamped:
        with _clamp_lock:
            _clamp_count += clamped
    return T.neg(T.scale(T.reshape(total, ()), 1.0 / len(probs)))


def total_loss(adapt: Tensor, task: Tensor, consistency: Tensor,
               weights: LossWeights) -> Tensor:
    """Weighted sum of the three terms; gradient flows into each."""
    return T.add(T.add(T.scale(adapt, weights.lam_adapt),
                       T.scale(task, weights.lam_task)),
                 T.scale(consistency, weights.lam_consistency))
