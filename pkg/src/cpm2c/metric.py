"""Temporal alignment scoring between enhanced frame sequences.

Per-frame-pair costs (1 - cosine) feed a soft-minimum dynamic program
over monotone alignment paths (moves: right, down, diagonal; fixed
corners, optional free start/end along the query axis). The soft minimum
is a log-sum-exp at temperature gamma, so the score is differentiable
and converges to the exact minimal path cost as gamma shrinks.

Sign convention: alignment yields a cost; the combined score is its
negation (a similarity) so that the classification softmax favors the
nearest class.

The DP is vectorized two ways at once: over a batch of equally sized
cost matrices, and over anti-diagonals within each matrix (rows are
skewed so an anti-diagonal becomes a column). Invalid cells are padded
with a large finite sentinel instead of infinity to keep every
subtraction well defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError, ShapeError
from .tensor import Tensor

BIG = 1e30


@dataclass(frozen=True)
class AlignmentConfig:
    """Soft-alignment settings.

    gamma: soft-min temperature (smaller is closer to the hard minimum).
    bidirectional: average the score over the cost matrix and its
        transpose.
    relaxed_ends: pad zero-cost columns on the query axis so paths may
        start and end anywhere along it.
    """

    gamma: float = 0.1
    bidirectional: bool = True
    relaxed_ends: bool = False

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")


def cost_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cost 1 - cos(a_i, b_j) between row sets.

    Accepts (m, D) x (n, D) or batched (..., m, D) x (..., n, D) with
    equal leading shapes; costs land in [0, 2].
    """
    if a.shape[-1] != b.shape[-1] or a.ndim != b.ndim:
        raise ShapeError(f"cost_matrix: shapes {a.shape} and {b.shape} "
                         f"do not pair")
    for name, x in (("a", a), ("b", b)):
        sq = (np.asarray(x.data) ** 2).sum(axis=-1)
        if (sq == 0).any():
            idx = tuple(np.argwhere(sq == 0)[0])
            raise DomainError(f"cost_matrix: zero-norm row {idx} in {name}")
    dots = T.matmul(a, T.transpose(b, -1, -2))
    na = _row_norms(a)                      # (..., m, 1)
    nb = T.transpose(_row_norms(b), -1, -2)  # (..., 1, n)
    return T.sub(Tensor(1.0), T.div(dots, T.matmul(na, nb)))


def _row_norms(x: Tensor) -> Tensor:
    sq = T.reduce_sum(T.mul(x, x), axis=-1, keepdims=True)
    return T.exp(T.scale(T.log(sq), 0.5))


def _softmin3(a: Tensor, b: Tensor, c: Tensor, gamma: float) -> Tensor:
    """Stabilized -gamma*log(sum exp(-x/gamma)) over three candidates.

    The subtracted minimum is a constant: the result is mathematically
    independent of the shift, so taking it off-tape is exact, keeps
    sentinel-padded candidates underflowing cleanly to zero weight, and
    saves tape nodes.
    """
    z = Tensor(np.minimum(np.minimum(a.data, b.data), c.data))
    inv = 1.0 / gamma
    total = T.add(T.add(T.exp(T.scale(T.sub(z, a), inv)),
                        T.exp(T.scale(T.sub(z, b), inv))),
                  T.exp(T.scale(T.sub(z, c), inv)))
    return T.sub(z, T.scale(T.log(total), gamma))


def _skew(C: Tensor) -> Tensor:
    """Shift row i of each matrix right by i so anti-diagonals become
    columns; new cells are BIG sentinels. (B, m, n) -> (B, m, m+n-1)."""
    batch, m, n = C.shape
    rows = []
    for i in range(m):
        parts = []
        if i > 0:
            parts.append(Tensor(np.full((batch, 1, i), BIG)))
        parts.append(T.slice_axis(C, 1, i, i + 1))
        if m - 1 - i > 0:
            parts.append(Tensor(np.full((batch, 1, m - 1 - i), BIG)))
        rows.append(parts[0] if len(parts) == 1 else T.concat(parts, axis=2))
    return rows[0] if len(rows) == 1 else T.concat(rows, axis=1)


def _soft_dp(C: Tensor, gamma: float) -> Tensor:
    """Fixed-corner soft-min path cost for a (B, m, n) batch -> (B,)."""
    batch, m, n = C.shape
    skewed = _skew(C)
    big_col = Tensor(np.full((batch, 1), BIG))
    big_all = Tensor(np.full((batch, m), BIG))

    def column(k):
        return T.reshape(T.slice_axis(skewed, 2, k, k + 1), (batch, m))

    def shifted(x):
        # row i reads its predecessor at row i-1; row 0 has none
        if m == 1:
            return big_col
        return T.concat([big_col, T.slice_axis(x, 1, 0, m - 1)], axis=1)

    prev2 = None
    prev1 = column(0)  # only cell (0, 0) is real here; the rest are sentinels
    for k in range(1, m + n - 1):
        best = _softmin3(prev1, shifted(prev1),
                         shifted(prev2) if prev2 is not None else big_all,
                         gamma)
        prev2, prev1 = prev1, T.add(column(k), best)
    return T.reshape(T.slice_axis(prev1, 1, m - 1, m), (batch,))


def otam_distance(C: Tensor, cfg: AlignmentConfig = AlignmentConfig()) -> Tensor:
    """Soft alignment cost of one (m, n) matrix or a (B, m, n) batch.

    Returns a scalar for a single matrix, a (B,) vector for a batch.
    """
    if C.size == 0:
        raise ShapeError("otam_distance: empty cost matrix")
    single = C.ndim == 2
    if single:
        C = T.reshape(C, (1,) + C.shape)
    if C.ndim != 3:
        raise ShapeError(f"otam_distance: rank {C.ndim} input")

    def one_direction(X):
        if cfg.relaxed_ends:
            pad = Tensor(np.zeros((X.shape[0], X.shape[1], 1)))
            X = T.concat([pad, X, pad], axis=2)
        return _soft_dp(X, cfg.gamma)

    dist = one_direction(C)
    if cfg.bidirectional:
        dist = T.scale(T.add(dist, one_direction(T.transpose(C, 1, 2))), 0.5)
    return T.reshape(dist, ()) if single else dist


def _frame_rows(enhanced: Tensor) -> Tensor:
    """Drop the token row: alignment sees frames only."""
    return T.slice_axis(enhanced, 0, 1, enhanced.shape[0])


def combined_distance(normal_s, normal_q, motion_s, motion_q, alpha: float,
                      cfg: AlignmentConfig = AlignmentConfig()) -> Tensor:
    """Similarity between one support prototype and one query.

    Either branch may be absent (pass None for both its arguments); the
    present branches' alignment costs are combined as
    cost_normal + alpha * cost_motion and negated into a similarity.
    """
    if alpha < 0:
        raise ConfigError(f"motion weight alpha must be >= 0, got {alpha}")
    total = None
    if normal_s is not None and normal_q is not None:
        total = otam_distance(cost_matrix(_frame_rows(normal_s),
                                          _frame_rows(normal_q)), cfg)
    if motion_s is not None and motion_q is not None:
        dm = T.scale(otam_distance(cost_matrix(_frame_rows(motion_s),
                                               _frame_rows(motion_q)), cfg),
                     alpha)
        total = dm if total is None else T.add(total, dm)
    if total is None:
        raise ConfigError("combined_distance: both branches absent")
    return T.neg(total)


def classify(query, prototypes, alpha: float,
             cfg: AlignmentConfig = AlignmentConfig()) -> Tensor:
    """Per-class probabilities for one query via softmax over similarities.

    ``query`` is an (enhanced normal, enhanced motion) pair (either entry
    may be None), ``prototypes`` a list of same-structure pairs. Argmax
    of the result breaks ties toward the lowest class index.
    """
    if not prototypes:
        raise ShapeError("classify: no prototypes")
    normal_q, motion_q = query
    sims = [combined_distance(proto_n, normal_q, proto_m, motion_q, alpha, cfg)
            for proto_n, proto_m in prototypes]
    stacked = T.concat([T.reshape(s, (1,)) for s in sims], axis=0)
    return T.softmax(stacked, axis=-1)
