import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from objvid.errors import ConfigError
from objvid.losses import (
    BatchContext, classification_loss, correspondence, correspondence_matrix, distillation_from_scores,
    negative_pool, object_distillation_loss, temporal_reasoning_loss, total_loss,
)
from objvid.tensor import NumericGuardError, Tensor, grad_check, parameter


@pytest.fixture
def rng():
    return np.random.default_rng(4)


def ctx_for(tokens, cls, s=None, logits=None, labels=None, **kw):
    b = tokens.shape[0]
    s = np.zeros((b, 1, tokens.shape[2], tokens.shape[3])) if s is None else s
    logits = np.zeros((b, 3)) if logits is None else logits
    labels = np.arange(b) % 3 if labels is None else labels
    return BatchContext(Tensor(tokens), Tensor(cls), Tensor(s), Tensor(logits), np.asarray(labels), **kw)


def cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def corr_oracle(o, p, tau):
    c = np.array([cos(row, p) for row in o])
    w = np.exp(c / tau) / np.exp(c / tau).sum()
    return float((w * c).sum())


# ----------------------------------------------------------------------
# correspondence


def test_single_object_is_cosine(rng):
    o, p = rng.normal(size=(1, 6)), rng.normal(size=6)
    assert correspondence(Tensor(o), Tensor(p), 0.07).item() == pytest.approx(cos(o[0], p), abs=1e-15)


def test_identical_objects_score_one(rng):
    p = rng.normal(size=6)
    assert correspondence(Tensor(np.stack([p, 2 * p, 0.5 * p])), Tensor(p), 0.07).item() == pytest.approx(1.0, abs=1e-15)


def test_two_objects_analytic():
    p = np.array([1.0, 0.0, 0.0])
    o = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    e = math.e
    assert correspondence(Tensor(o), Tensor(p), 1.0).item() == pytest.approx(e / (e + 1), abs=1e-15)
    assert e / (e + 1) == pytest.approx(0.7311, abs=1e-4)


def test_matrix_matches_oracle(rng):
    tokens, cls = rng.normal(size=(3, 2, 4, 5)), rng.normal(size=(3, 2, 5))
    m = correspondence_matrix(Tensor(tokens), Tensor(cls), 0.3).data
    for t in range(2):
        for b in range(3):
            for b2 in range(3):
                assert m[t, b, b2] == pytest.approx(corr_oracle(tokens[b, t], cls[b2, t], 0.3), abs=1e-13)


def test_correspondence_in_unit_interval(rng):
    for _ in range(20):
        c = correspondence(Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=6)), 0.07).item()
        assert -1.0 <= c <= 1.0


def test_scale_invariance(rng):
    o, p = rng.normal(size=(4, 6)), rng.normal(size=6)
    base = correspondence(Tensor(o), Tensor(p), 0.07).item()
    for a, b in [(3.0, 0.01), (1e-3, 250.0), (7.5, 7.5)]:
        scaled = o * rng.uniform(0.1, 10, size=(4, 1)) * a
        assert abs(correspondence(Tensor(scaled), Tensor(p * b), 0.07).item() - base) < 1e-12


def test_zero_norm_guard(rng):
    with pytest.raises(NumericGuardError):
        correspondence(Tensor(np.zeros((2, 4))), Tensor(np.ones(4)), 0.07)


# ----------------------------------------------------------------------
# object distillation


def obj_oracle(tokens, cls, tau):
    b_n, t_n = tokens.shape[:2]
    total = 0.0
    for b in range(b_n):
        for t in range(t_n):
            logits = np.array([corr_oracle(tokens[b, t], cls[b2, t], tau) / tau for b2 in range(b_n)])
            total -= logits[b] - np.log(np.exp(logits).sum())
    return total / b_n


def test_equal_logits_give_t_ln2(rng):
    t_n = 5
    shared = rng.normal(size=(t_n, 6))
    cls = np.stack([shared, shared])
    tokens = rng.normal(size=(2, t_n, 3, 6))
    loss = object_distillation_loss(ctx_for(tokens, cls)).item()
    assert loss == pytest.approx(t_n * math.log(2), rel=1e-14)


def test_separated_pair_analytic(rng):
    p = rng.normal(size=6)
    cls = np.stack([p, -p])[:, None]  # [B=2, T=1, D]
    tokens = np.stack([p, -p])[:, None, None]  # each clip's single token equals its own cls
    loss = object_distillation_loss(ctx_for(tokens, cls, tau=0.07)).item()
    expected = math.log1p(math.exp(-2 / 0.07))
    assert expected == pytest.approx(3.9e-13, rel=0.02)
    assert abs(loss - expected) < 1e-15


def test_obj_matches_oracle(rng):
    tokens, cls = rng.normal(size=(4, 3, 2, 5)), rng.normal(size=(4, 3, 5))
    assert object_distillation_loss(ctx_for(tokens, cls, tau=0.2)).item() == pytest.approx(
        obj_oracle(tokens, cls, 0.2), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_obj_nonnegative(seed):
    rng = np.random.default_rng(seed)
    tokens, cls = rng.normal(size=(3, 2, 2, 4)), rng.normal(size=(3, 2, 4))
    assert object_distillation_loss(ctx_for(tokens, cls)).item() >= 0


def test_empty_negative_pool():
    with pytest.raises(ConfigError):
        object_distillation_loss(ctx_for(np.ones((1, 2, 2, 4)), np.ones((1, 2, 4))))


def test_obj_monotone_in_positive_score(rng):
    scores = rng.uniform(-1, 1, size=(2, 3, 3))
    neg = negative_pool(3)
    prev = distillation_from_scores(Tensor(scores), neg, 0.07).item()
    for _ in range(10):
        scores[:, 0, 0] += 0.05
        cur = distillation_from_scores(Tensor(scores), neg, 0.07).item()
        assert cur < prev
        prev = cur


def test_negative_pool_cap(rng):
    pool = negative_pool(6, max_negatives=2, rng=rng)
    assert np.all(pool.sum(axis=1) == 2)
    assert not np.any(np.diag(pool))
    assert np.array_equal(negative_pool(4), ~np.eye(4, dtype=bool))


def test_separate_outer_temperature(rng):
    tokens, cls = rng.normal(size=(3, 2, 2, 4)), rng.normal(size=(3, 2, 4))
    a = object_distillation_loss(ctx_for(tokens, cls, tau=0.1, tau_outer=0.5)).item()
    scores = correspondence_matrix(Tensor(tokens), Tensor(cls), 0.1)
    b = distillation_from_scores(scores, negative_pool(3), 0.5).item()
    assert a == b


# ----------------------------------------------------------------------
# temporal reasoning


def temp_oracle(s, labels, margin, normalize):
    b_n, tp, n_n, _ = s.shape
    sums = [0.0, 0.0, 0.0]
    counts = [0, 0, 0]
    for b in range(b_n):
        for t in range(tp):
            for n in range(n_n):
                for b2 in range(b_n):
                    d = np.linalg.norm(s[b, t, n] - s[b2, t, n])
                    if b2 != b and labels[b2] == labels[b]:
                        sums[0] += d
                        counts[0] += 1
                    elif labels[b2] != labels[b]:
                        sums[1] += max(margin - d, 0.0)
                        counts[1] += 1
                for m in range(n_n):
                    if m != n:
                        sums[2] += max(margin - np.linalg.norm(s[b, t, n] - s[b, t, m]), 0.0)
                        counts[2] += 1
    if normalize:
        return sum(x / c for x, c in zip(sums, counts) if c)
    return sum(sums) / b_n


def temp_ctx(s, labels, **kw):
    b, _, n, d = s.shape
    return ctx_for(np.ones((b, 1, n, d)), np.ones((b, 1, d)), s=s, labels=labels, **kw)


def test_temp_example_zero_vectors():
    s = np.zeros((3, 1, 1, 4))
    assert temporal_reasoning_loss(temp_ctx(s, [0, 0, 1], margin=1.0)).item() == 1.0


def test_temp_zero_margin_identical():
    s = np.broadcast_to(np.arange(4.0), (4, 2, 3, 4)).copy()
    assert temporal_reasoning_loss(temp_ctx(s, [0, 0, 1, 1], margin=0.0)).item() == 0.0


def test_temp_satisfied_intra_margin():
    s = np.zeros((1, 1, 2, 4))
    s[0, 0, 1, 0] = 1.5
    assert temporal_reasoning_loss(temp_ctx(s, [0], margin=1.0)).item() == 0.0


@pytest.mark.parametrize("normalize", [True, False])
def test_temp_matches_oracle(rng, normalize):
    s = rng.normal(scale=0.4, size=(5, 3, 3, 4))
    labels = np.array([0, 1, 0, 2, 1])
    got = temporal_reasoning_loss(temp_ctx(s, labels, margin=0.8, normalize_temp=normalize)).item()
    assert got == pytest.approx(temp_oracle(s, labels, 0.8, normalize), rel=1e-12)


def test_temp_symmetric_under_clip_swap(rng):
    s = rng.normal(size=(3, 2, 2, 4))
    labels = np.array([0, 0, 1])
    a = temporal_reasoning_loss(temp_ctx(s, labels)).item()
    b = temporal_reasoning_loss(temp_ctx(s[[1, 0, 2]], labels[[1, 0, 2]])).item()
    assert a == pytest.approx(b, rel=1e-14)


def test_temp_nonnegative_and_empty_pools(rng):
    s = rng.normal(size=(2, 2, 1, 4))
    assert temporal_reasoning_loss(temp_ctx(s, [0, 1])).item() >= 0  # no positives
    assert temporal_reasoning_loss(temp_ctx(s, [1, 1])).item() >= 0  # no negatives


def test_temp_gradcheck(rng):
    s = parameter(rng.normal(scale=0.3, size=(4, 2, 2, 4)))
    labels = np.array([0, 0, 1, 1])
    rep = grad_check(lambda x: temporal_reasoning_loss(BatchContext(
        Tensor(np.ones((4, 1, 2, 4))), Tensor(np.ones((4, 1, 4))), x, Tensor(np.zeros((4, 2))), labels)), [s],
        tol=1e-4)
    assert rep.passed, rep.lines()


# ----------------------------------------------------------------------
# classification and total


def test_uniform_logits_give_log_k():
    ctx = ctx_for(np.ones((2, 1, 1, 4)), np.ones((2, 1, 4)), logits=np.zeros((2, 6)), labels=[0, 5])
    assert classification_loss(ctx).item() == pytest.approx(math.log(6), rel=1e-15)


def test_total_is_exact_sum(rng):
    ctx = ctx_for(rng.normal(size=(4, 3, 2, 5)), rng.normal(size=(4, 3, 5)), s=rng.normal(size=(4, 2, 2, 5)),
                  logits=rng.normal(size=(4, 3)), labels=[0, 0, 1, 2])
    total, parts = total_loss(ctx)
    assert parts["total"] == parts["L_obj"] + parts["L_temp"] + parts["L_cls"]
    assert total.item() == parts["total"]
    assert parts["L_obj"] == object_distillation_loss(ctx).item()
    assert parts["L_temp"] == temporal_reasoning_loss(ctx).item()
    assert parts["L_cls"] == classification_loss(ctx).item()


def test_toggles_zero_terms(rng):
    ctx = ctx_for(rng.normal(size=(2, 2, 2, 4)), rng.normal(size=(2, 2, 4)), s=rng.normal(size=(2, 1, 2, 4)),
                  labels=[0, 0], use_obj=False, use_temp=False)
    total, parts = total_loss(ctx)
    assert parts["L_obj"] == 0.0 and parts["L_temp"] == 0.0
    assert total.item() == parts["L_cls"]


def test_total_gradcheck_two_clips(rng):
    tokens = parameter(rng.normal(size=(2, 2, 2, 6)))
    s = parameter(rng.normal(scale=0.3, size=(2, 1, 2, 6)))
    logits = parameter(rng.normal(size=(2, 3)))
    cls = Tensor(rng.normal(size=(2, 2, 6)))

    def f(o, s_, lg):
        return total_loss(BatchContext(o, cls, s_, lg, np.array([1, 1])))[0]

    rep = grad_check(f, [tokens, s, logits], tol=1e-4)
    assert rep.passed, rep.lines()


def test_context_contracts():
    with pytest.raises(ConfigError):
        ctx_for(np.ones((2, 1, 1, 2)), np.ones((2, 1, 2)), tau=0.0)
    with pytest.raises(ConfigError):
        ctx_for(np.ones((2, 1, 1, 2)), np.ones((2, 1, 2)), margin=-1.0)


def test_pools_are_disjoint():
    ctx = ctx_for(np.ones((4, 1, 1, 2)), np.ones((4, 1, 2)), labels=[0, 0, 1, 0])
    assert not np.any(ctx.positive_mask & ctx.negative_mask)
    assert not np.any(np.diag(ctx.positive_mask))
