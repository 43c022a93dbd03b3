"""Alignment tests: cost matrices, path-enumeration oracles, classification."""

import math

import numpy as np
import pytest

from cpm2c import metric, tensor as T
from cpm2c.errors import ConfigError, DomainError, ShapeError
from cpm2c.metric import AlignmentConfig
from cpm2c.tensor import Tensor
from fdcheck import check_grads


@pytest.fixture(autouse=True)
def float64_mode():
    with T.precision("float64"):
        yield


ONEWAY = AlignmentConfig(gamma=1e-3, bidirectional=False)


def enumerate_paths(m, n):
    """All monotone paths (right/down/diagonal) from (0,0) to (m-1,n-1)."""
    paths = []

    def walk(i, j, prefix):
        prefix = prefix + [(i, j)]
        if i == m - 1 and j == n - 1:
            paths.append(prefix)
            return
        if j + 1 < n:
            walk(i, j + 1, prefix)
        if i + 1 < m:
            walk(i + 1, j, prefix)
        if i + 1 < m and j + 1 < n:
            walk(i + 1, j + 1, prefix)

    walk(0, 0, [])
    return paths


def path_costs(C):
    return [sum(C[i, j] for i, j in p)
            for p in enumerate_paths(C.shape[0], C.shape[1])]


def hard_min(C):
    return min(path_costs(C))


def soft_min_reference(C, gamma):
    """Exact log-sum-exp over enumerated path costs (pure python floats)."""
    costs = path_costs(C)
    lo = min(costs)
    total = sum(math.exp(-(c - lo) / gamma) for c in costs)
    return lo - gamma * math.log(total)


# ---------------------------------------------------------------------------
# cost matrix


def test_cost_matrix_cosine_extremes():
    a = Tensor([[1.0, 0.0], [0.0, 2.0], [-3.0, 0.0]])
    b = Tensor([[2.0, 0.0]])
    C = metric.cost_matrix(a, b).data
    assert abs(C[0, 0] - 0.0) < 1e-9   # parallel
    assert abs(C[1, 0] - 1.0) < 1e-9   # orthogonal
    assert abs(C[2, 0] - 2.0) < 1e-9   # antiparallel


def test_cost_matrix_range_and_scale_invariance():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(5, 6))
    C = metric.cost_matrix(Tensor(a), Tensor(b)).data
    assert C.min() >= -1e-9 and C.max() <= 2.0 + 1e-9
    C2 = metric.cost_matrix(Tensor(3.0 * a), Tensor(0.5 * b)).data
    assert np.allclose(C, C2, atol=1e-9)


def test_cost_matrix_rejects_zero_norm_row():
    a = Tensor([[1.0, 0.0], [0.0, 0.0]])
    b = Tensor([[1.0, 1.0]])
    with pytest.raises(DomainError, match="zero-norm"):
        metric.cost_matrix(a, b)


def test_cost_matrix_batched_matches_loop():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 4, 5))
    b = rng.normal(size=(3, 2, 5))
    got = metric.cost_matrix(Tensor(a), Tensor(b)).data
    for k in range(3):
        single = metric.cost_matrix(Tensor(a[k]), Tensor(b[k])).data
        assert np.allclose(got[k], single, atol=1e-12)


def test_cost_matrix_gradcheck():
    rng = np.random.default_rng(2)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    w = rng.normal(size=(3, 2))

    def f():
        return T.reduce_sum(T.mul(metric.cost_matrix(a, b), Tensor(w)))

    check_grads(f, a, tol=1e-6)
    check_grads(f, b, tol=1e-6)


# ---------------------------------------------------------------------------
# soft alignment


def test_single_cell_matrix_is_exact():
    d = metric.otam_distance(Tensor([[1.75]]), ONEWAY)
    assert d.item() == 1.75


def test_all_zero_matrix_within_soft_bias():
    # every path costs zero; the soft minimum sits below zero by at most
    # gamma * ln(number of paths)
    for gamma in (1e-3, 0.1):
        cfg = AlignmentConfig(gamma=gamma, bidirectional=False)
        d = metric.otam_distance(Tensor(np.zeros((3, 3))), cfg).item()
        assert -gamma * math.log(13) - 1e-12 <= d <= 0.0  # 13 = path count


def test_path_count_is_delannoy():
    assert len(enumerate_paths(3, 3)) == 13
    assert len(enumerate_paths(4, 4)) == 63


def test_dp_equals_path_enumeration_lse_exactly():
    # the DP computes the same log-sum-exp as explicit path enumeration
    rng = np.random.default_rng(3)
    for trial in range(30):
        m, n = rng.integers(1, 5, size=2)
        C = rng.uniform(0.0, 2.0, size=(m, n))
        for gamma in (1e-2, 0.3):
            cfg = AlignmentConfig(gamma=gamma, bidirectional=False)
            got = metric.otam_distance(Tensor(C), cfg).item()
            want = soft_min_reference(C, gamma)
            assert abs(got - want) < 1e-9, (m, n, gamma)


def test_soft_vs_hard_min_bound_200_instances():
    rng = np.random.default_rng(4)
    for trial in range(200):
        m, n = rng.integers(1, 5, size=2)
        C = rng.uniform(0.0, 2.0, size=(m, n))
        got = metric.otam_distance(Tensor(C), ONEWAY).item()
        bound = 1e-3 * math.log(len(enumerate_paths(m, n)))
        assert abs(got - hard_min(C)) <= bound + 1e-12


def test_monotone_in_every_entry():
    rng = np.random.default_rng(5)
    C = rng.uniform(0.0, 2.0, size=(3, 4))
    cfg = AlignmentConfig(gamma=0.1, bidirectional=False)
    base = metric.otam_distance(Tensor(C), cfg).item()
    for i in range(3):
        for j in range(4):
            bumped = C.copy()
            bumped[i, j] += 0.5
            assert metric.otam_distance(Tensor(bumped), cfg).item() >= base - 1e-12


def test_gamma_shrinks_toward_hard_min():
    rng = np.random.default_rng(6)
    C = rng.uniform(0.0, 2.0, size=(4, 4))
    errs = [abs(metric.otam_distance(
        Tensor(C), AlignmentConfig(gamma=g, bidirectional=False)).item()
        - hard_min(C)) for g in (0.3, 0.03, 0.003)]
    assert errs[0] >= errs[1] >= errs[2]
    assert errs[2] < 1e-2


def test_batched_dp_matches_per_matrix():
    rng = np.random.default_rng(7)
    batch = rng.uniform(0.0, 2.0, size=(6, 3, 4))
    cfg = AlignmentConfig(gamma=0.05, bidirectional=False)
    got = metric.otam_distance(Tensor(batch), cfg).data
    for k in range(6):
        single = metric.otam_distance(Tensor(batch[k]), cfg).item()
        assert abs(got[k] - single) < 1e-12


def test_bidirectional_averages_both_orientations():
    rng = np.random.default_rng(8)
    C = rng.uniform(0.0, 2.0, size=(3, 5))
    one = AlignmentConfig(gamma=0.07, bidirectional=False)
    both = AlignmentConfig(gamma=0.07, bidirectional=True)
    fwd = metric.otam_distance(Tensor(C), one).item()
    rev = metric.otam_distance(Tensor(C.T), one).item()
    avg = metric.otam_distance(Tensor(C), both).item()
    assert abs(avg - 0.5 * (fwd + rev)) < 1e-12


def test_relaxed_ends_match_padded_enumeration():
    rng = np.random.default_rng(9)
    C = rng.uniform(0.0, 2.0, size=(3, 3))
    cfg = AlignmentConfig(gamma=1e-3, bidirectional=False, relaxed_ends=True)
    got = metric.otam_distance(Tensor(C), cfg).item()
    padded = np.concatenate([np.zeros((3, 1)), C, np.zeros((3, 1))], axis=1)
    bound = 1e-3 * math.log(len(enumerate_paths(3, 5)))
    assert abs(got - hard_min(padded)) <= bound + 1e-12
    # relaxation can only help: compare against the fixed-corner cost
    fixed = metric.otam_distance(Tensor(C), ONEWAY).item()
    assert got <= fixed + 1e-9


def test_empty_matrix_rejected():
    with pytest.raises(ShapeError):
        metric.otam_distance(Tensor(np.zeros((0, 3))), ONEWAY)


def test_alignment_config_validation():
    with pytest.raises(ConfigError):
        AlignmentConfig(gamma=0.0)


def test_otam_gradcheck():
    rng = np.random.default_rng(10)
    C = Tensor(rng.uniform(0.1, 1.9, size=(4, 3)), requires_grad=True)
    cfg = AlignmentConfig(gamma=0.1, bidirectional=True)

    def f():
        return metric.otam_distance(C, cfg)

    check_grads(f, C, tol=1e-6)


def test_otam_gradient_is_soft_argmin_weights():
    # at tiny gamma the gradient concentrates on the single cheapest path
    C = np.full((3, 3), 1.0)
    C[0, 0] = C[1, 1] = C[2, 2] = 0.01  # cheap diagonal
    t = Tensor(C, requires_grad=True)
    cfg = AlignmentConfig(gamma=1e-3, bidirectional=False)
    with T.Tape():
        loss = metric.otam_distance(t, cfg)
    T.backward(loss)
    diag = np.diag(t.grad)
    assert np.all(diag > 0.99)
    off = t.grad - np.diag(diag)
    assert np.all(np.abs(off) < 0.01)


# ---------------------------------------------------------------------------
# combined distance and classification


def fabricate(rows, dim, seed, row_override=None):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(rows, dim))
    if row_override is not None:
        x[1:] = row_override
    return Tensor(x)


def test_combined_alpha_zero_is_normal_only():
    rng = np.random.default_rng(11)
    ns, nq = Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=(4, 6)))
    ms, mq = Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=(3, 6)))
    cfg = AlignmentConfig(gamma=0.1)
    full = metric.combined_distance(ns, nq, ms, mq, 0.0, cfg).item()
    normal_only = metric.combined_distance(ns, nq, None, None, 0.0, cfg).item()
    assert abs(full - normal_only) < 1e-12


def test_combined_recomposition_oracle():
    rng = np.random.default_rng(12)
    ns, nq = Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=(4, 6)))
    ms, mq = Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=(3, 6)))
    cfg = AlignmentConfig(gamma=0.1)
    alpha = 0.7
    got = metric.combined_distance(ns, nq, ms, mq, alpha, cfg).item()
    dn = metric.otam_distance(metric.cost_matrix(
        T.slice_axis(ns, 0, 1, 4), T.slice_axis(nq, 0, 1, 4)), cfg).item()
    dm = metric.otam_distance(metric.cost_matrix(
        T.slice_axis(ms, 0, 1, 3), T.slice_axis(mq, 0, 1, 3)), cfg).item()
    assert abs(got - (-(dn + alpha * dm))) < 1e-6
    doubled = metric.combined_distance(ns, nq, ns, nq, 1.0, cfg).item()
    assert abs(doubled - 2.0 * (-dn)) < 1e-6


def test_combined_rejects_negative_alpha_and_empty():
    x = Tensor(np.random.default_rng(13).normal(size=(3, 4)))
    with pytest.raises(ConfigError):
        metric.combined_distance(x, x, None, None, -1.0)
    with pytest.raises(ConfigError):
        metric.combined_distance(None, None, None, None, 1.0)


def test_token_row_excluded_from_alignment():
    rng = np.random.default_rng(14)
    frames = rng.normal(size=(3, 5))
    a = np.vstack([rng.normal(size=5), frames])
    b = np.vstack([rng.normal(size=5), frames])  # same frames, wild tokens
    cfg = AlignmentConfig(gamma=0.1)
    sim = metric.combined_distance(Tensor(a), Tensor(b), None, None, 0.0,
                                   cfg).item()
    self_sim = metric.combined_distance(Tensor(a), Tensor(a), None, None, 0.0,
                                        cfg).item()
    assert abs(sim - self_sim) < 1e-9


def test_classify_identical_prototypes_uniform():
    rng = np.random.default_rng(15)
    q = (Tensor(rng.normal(size=(4, 6))), None)
    proto = Tensor(rng.normal(size=(4, 6)))
    probs = metric.classify(q, [(proto, None)] * 5, 0.0).data
    assert np.allclose(probs, 0.2, atol=1e-9)
    assert abs(probs.sum() - 1.0) < 1e-6


def test_classify_single_class_certain():
    rng = np.random.default_rng(16)
    q = (Tensor(rng.normal(size=(4, 6))), None)
    probs = metric.classify(q, [(Tensor(rng.normal(size=(4, 6))), None)],
                            0.0).data
    assert abs(probs[0] - 1.0) < 1e-12


def test_classify_picks_matching_class():
    # class 2's prototype shares the query's frame directions; the rest
    # are orthogonal to it
    dim = 8
    eye = np.eye(dim)
    frames_for = lambda k: eye[2 * k:2 * k + 2] + 0.0
    protos = []
    for c in range(4):
        stack = np.vstack([np.ones(dim), frames_for(c)])
        protos.append((Tensor(stack), None))
    q = (Tensor(np.vstack([np.ones(dim), frames_for(2)])), None)
    probs = metric.classify(q, protos, 0.0, AlignmentConfig(gamma=0.05)).data
    assert int(np.argmax(probs)) == 2
    assert abs(probs.sum() - 1.0) < 1e-6


def test_classify_shift_invariance_of_probabilities():
    rng = np.random.default_rng(17)
    cfg = AlignmentConfig(gamma=0.1)
    q = (Tensor(rng.normal(size=(4, 6))), None)
    protos = [(Tensor(rng.normal(size=(4, 6))), None) for _ in range(4)]
    probs = metric.classify(q, protos, 0.0, cfg).data
    sims = np.array([metric.combined_distance(p, q[0], None, None, 0.0,
                                              cfg).item() for p, _ in protos])
    shifted = np.exp(sims + 5.0) / np.exp(sims + 5.0).sum()
    assert np.allclose(probs, shifted, atol=1e-6)


def test_classify_argmax_tie_breaks_low_index():
    probs = np.array([0.3, 0.3, 0.4 - 1e-18, 0.3])
    # identical leading values: argmax must pick the first
    tied = np.array([0.35, 0.35, 0.3])
    assert int(np.argmax(tied)) == 0
    del probs
