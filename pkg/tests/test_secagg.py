import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flsim.fedavg import ModelUpdate
from flsim.secagg import (
    PRIME,
    BelowThreshold,
    FixedVector,
    GroupSum,
    GroupTooSmall,
    OverflowRisk,
    PrepareDropout,
    SecAggGroup,
    compose_hierarchical,
    decode_update,
    decode_vector,
    default_threshold,
    encode_fixed,
    encode_vector,
    flat_fixed_sum,
    prepare,
    run_group,
    shamir_reconstruct,
    shamir_split,
)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, PRIME - 1), st.integers(1, 8), st.integers(0, 10**6))
def test_shamir_any_threshold_subset_reconstructs(secret, t, seed):
    rng = np.random.default_rng(seed)
    xs = list(range(1, t + 4))
    shares = shamir_split(secret, t, xs, rng)
    pick = rng.choice(xs, size=t, replace=False)
    assert shamir_reconstruct({int(x): shares[int(x)] for x in pick}) == secret


def test_shamir_below_threshold_reveals_nothing_useful():
    rng = np.random.default_rng(0)
    shares = shamir_split(12345, 3, [1, 2, 3, 4], rng)
    assert shamir_reconstruct({1: shares[1], 2: shares[2]}) != 12345


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1000, 1000), min_size=1, max_size=6))
def test_fixed_point_roundtrip(values):
    fv = encode_vector(values)
    assert np.allclose(decode_vector(fv), values, atol=1 / fv.scale)


def test_update_encoding_carries_weight():
    u = ModelUpdate(np.array([0.5, -2.25]), 7)
    back = decode_update(encode_fixed(u))
    assert back.weight == 7 and np.allclose(back.delta, u.delta)


def test_overflow_guard_depends_on_group_size():
    big = PRIME / (2 * 1 << 20) / 10
    encode_vector([big], group_size=1)
    with pytest.raises(OverflowRisk):
        encode_vector([big], group_size=100)


def test_fixed_vector_validation():
    with pytest.raises(ValueError):
        FixedVector(np.array([PRIME], dtype=object).astype(np.int64))
    with pytest.raises(ValueError):
        FixedVector.zeros(2) + FixedVector.zeros(3)


def test_default_threshold_is_two_thirds_ceiling():
    for n in range(1, 40):
        assert default_threshold(n) == math.ceil(2 * n / 3)


def test_group_validation():
    with pytest.raises(GroupTooSmall):
        SecAggGroup.create([1, 2, 3], b"n", k=5)
    with pytest.raises(ValueError):
        SecAggGroup.create([1, 1, 2], b"n")
    with pytest.raises(ValueError):
        SecAggGroup((1, 2), threshold=3, nonce=b"n")


def _inputs(members, rng, dim=3):
    return {m: encode_vector(rng.uniform(-5, 5, dim), group_size=len(members)) for m in members}


def test_exact_sum_without_dropouts():
    rng = np.random.default_rng(1)
    members = list(range(10, 20))
    inputs = _inputs(members, rng)
    out = run_group(SecAggGroup.create(members, b"x"), inputs, 0)
    assert out.centered() == flat_fixed_sum(inputs.values())


def test_dropped_members_are_unmasked_away():
    rng = np.random.default_rng(2)
    members = list(range(12))
    inputs = _inputs(members, rng)
    out = run_group(SecAggGroup.create(members, b"x"), inputs, 0, commit_dropouts={3, 7}, finalize_dropouts={1})
    kept = [inputs[m] for m in members if m not in (3, 7)]
    assert out.centered() == flat_fixed_sum(kept)


def test_too_few_survivors_fails_without_output():
    rng = np.random.default_rng(3)
    members = list(range(9))  # threshold 6
    inputs = _inputs(members, rng)
    with pytest.raises(BelowThreshold):
        run_group(SecAggGroup.create(members, b"x"), inputs, 0, commit_dropouts={0, 1}, finalize_dropouts={2, 3})
    with pytest.raises(PrepareDropout):
        prepare(SecAggGroup.create(members, b"x"), 0, dropped={0, 1, 2, 3})


def test_hierarchical_rejects_small_groups():
    g = GroupSum(FixedVector.zeros(2), 3)
    with pytest.raises(GroupTooSmall):
        compose_hierarchical([g], k=5)


def test_hierarchical_composition_matches_plain_fedavg():
    rng = np.random.default_rng(4)
    updates = [ModelUpdate(rng.uniform(-1, 1, 2), int(rng.integers(1, 5))) for _ in range(9)]
    groups = [updates[:4], updates[4:]]
    sums = []
    for gi, grp in enumerate(groups):
        ids = list(range(len(grp)))
        enc = {i: encode_fixed(u, group_size=len(grp)) for i, u in zip(ids, grp)}
        sums.append(GroupSum(run_group(SecAggGroup.create(ids, bytes([gi])), enc, gi), len(grp)))
    agg = compose_hierarchical(sums)
    assert agg.weight_sum == sum(u.weight for u in updates)
    assert agg.contributions == 9
    assert np.allclose(agg.weighted_sum, sum(u.delta for u in updates), atol=1e-5)
