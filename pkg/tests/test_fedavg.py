import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flsim.fedavg import (
    AggregateState,
    DimensionMismatch,
    EmptyDataset,
    Hyperparams,
    LossModel,
    ModelParams,
    ModelUpdate,
    ZeroWeight,
    absorb_update,
    centralized_sgd,
    client_update,
    evaluate,
    fedavg_round,
    finalize_round,
    merge_aggregates,
    minibatch_count,
    weighted_mean_loss,
)


def test_round_matches_hand_computed_average():
    # client A: one full batch step from 0 on x=[1,2], y=[1,2], eta 0.1
    #   grad = ((0-1)*1 + (0-2)*2)/2 = -2.5 -> w = 0.25, n = 1
    # client B: x=[1], y=[3], two epochs of batch 1
    #   w = 0.3, then 0.3 + 0.1*2.7 = 0.57, n = 2, delta = 1.14
    # average = (0.25 + 1.14) / 3
    a = (np.array([[1.0], [2.0]]), np.array([1.0, 2.0]))
    b = (np.array([[1.0]]), np.array([3.0]))
    w0 = ModelParams.zeros(1)
    ua = client_update(w0, a, Hyperparams(epochs=1, batch_size=2, eta=0.1))
    ub = client_update(w0, b, Hyperparams(epochs=2, batch_size=1, eta=0.1))
    assert ua.weight == 1 and ua.delta == pytest.approx([0.25])
    assert ub.weight == 2 and ub.delta == pytest.approx([1.14])
    state = absorb_update(absorb_update(AggregateState.empty(1), ua), ub)
    w1 = finalize_round(state, w0)
    assert w1.weights == pytest.approx([1.39 / 3])


def test_fedavg_round_uses_same_hyper_per_client():
    data = [(np.array([[1.0], [2.0]]), np.array([1.0, 2.0]))] * 3
    w = fedavg_round(ModelParams.zeros(1), data, Hyperparams(batch_size=2, eta=0.1))
    assert w.weights == pytest.approx([0.25])


def test_logistic_gradient_matches_finite_difference():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20, 3))
    y = (rng.random(20) < 0.5).astype(float)
    w = rng.normal(size=3)
    lm = LossModel("logistic_regression")
    g = lm.gradient(w, X, y)
    eps = 1e-6
    num = [(lm.evaluate(w + eps * e, X, y) - lm.evaluate(w - eps * e, X, y)) / (2 * eps) for e in np.eye(3)]
    assert g == pytest.approx(num, rel=1e-5, abs=1e-8)


def test_minibatch_count_keeps_short_batch():
    assert minibatch_count(21, 10, 2) == 6
    assert minibatch_count(10, 10) == 1


def test_client_update_is_deterministic_in_seed():
    rng = np.random.default_rng(1)
    data = (rng.normal(size=(30, 4)), rng.normal(size=30))
    h = Hyperparams(epochs=2, batch_size=7, eta=0.05, seed=3)
    u1 = client_update(ModelParams.zeros(4), data, h)
    u2 = client_update(ModelParams.zeros(4), data, h)
    assert np.array_equal(u1.delta, u2.delta)


def test_errors():
    w = ModelParams.zeros(2)
    with pytest.raises(EmptyDataset):
        client_update(w, (np.zeros((0, 2)), np.zeros(0)), Hyperparams())
    with pytest.raises(DimensionMismatch):
        client_update(w, (np.zeros((3, 3)), np.zeros(3)), Hyperparams())
    with pytest.raises(ZeroWeight):
        finalize_round(AggregateState.empty(2), w)
    with pytest.raises(DimensionMismatch):
        absorb_update(AggregateState.empty(2), ModelUpdate(np.zeros(3), 1))
    with pytest.raises(ValueError):
        Hyperparams(epochs=0)


def test_weighted_mean_loss():
    w = ModelParams(np.array([1.0]))
    r1 = evaluate(w, (np.array([[1.0]]), np.array([0.0])))  # 0.5
    r2 = evaluate(w, (np.array([[1.0], [1.0], [1.0]]), np.array([1.0, 1.0, 1.0])))  # 0
    assert weighted_mean_loss([r1, r2]).loss == pytest.approx(0.125)


def test_centralized_sgd_counts_steps():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(25, 2))
    y = X @ np.array([1.0, -1.0])
    trace = centralized_sgd(ModelParams.zeros(2), (X, y), 17, Hyperparams(batch_size=10, eta=0.1))
    assert trace.steps == 17


updates = st.lists(
    st.tuples(arrays(np.float64, 3, elements=st.floats(-10, 10)), st.integers(1, 50)),
    min_size=1,
    max_size=8,
)


@settings(max_examples=60, deadline=None)
@given(updates, st.randoms())
def test_aggregation_is_order_invariant(us, rnd):
    ups = [ModelUpdate(d, n) for d, n in us]
    a = AggregateState.empty(3)
    for u in ups:
        a = absorb_update(a, u)
    shuffled = ups[:]
    rnd.shuffle(shuffled)
    b = AggregateState.empty(3)
    for u in shuffled:
        b = absorb_update(b, u)
    assert a.weight_sum == b.weight_sum
    assert np.allclose(a.weighted_sum, b.weighted_sum, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(updates, st.integers(0, 8))
def test_merging_partials_equals_flat(us, cut):
    ups = [ModelUpdate(d, n) for d, n in us]
    cut = min(cut, len(ups))
    flat = AggregateState.empty(3)
    for u in ups:
        flat = absorb_update(flat, u)
    left, right = AggregateState.empty(3), AggregateState.empty(3)
    for u in ups[:cut]:
        left = absorb_update(left, u)
    for u in ups[cut:]:
        right = absorb_update(right, u)
    merged = merge_aggregates(left, right)
    assert merged.weight_sum == flat.weight_sum and merged.contributions == len(ups)
    assert np.allclose(merged.weighted_sum, flat.weighted_sum, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 2, elements=st.floats(-5, 5)), st.integers(1, 20))
def test_single_update_moves_by_delta_over_weight(delta, n):
    w0 = ModelParams(np.array([0.5, -0.5]))
    w1 = finalize_round(absorb_update(AggregateState.empty(2), ModelUpdate(delta, n)), w0)
    assert np.allclose(w1.weights, w0.weights + delta / n)
