import math

import numpy as np
import pytest

from mcnet.config import NumericError, ProtocolError
from mcnet.proto import (ProtoEntry, PrototypeStore, classify, compute_prototypes, sample_smoothed,
                         update_store_after_session)


def store_of(protos: dict) -> PrototypeStore:
    return PrototypeStore({c: ProtoEntry(np.asarray(p, float), np.zeros(len(p)), 0, 1) for c, p in protos.items()})


def brute_classify(z, protos: dict):
    """Loop over classes in increasing id, keep the first strictly larger cosine."""
    best, best_c = -math.inf, None
    for c in sorted(protos):
        p = protos[c]
        cos = float(np.dot(z, p)) / (math.sqrt(float(np.dot(z, z))) * math.sqrt(float(np.dot(p, p))))
        if cos > best:
            best, best_c = cos, c
    return best_c


def random_case(rng):
    """Small integer prototypes with deliberate ties (duplicates and power-of-two rescalings)."""
    d = int(rng.integers(1, 6))
    n = int(rng.integers(1, 8))
    ids = rng.choice(50, size=n, replace=False)
    protos = {}
    for c in ids:
        if protos and rng.random() < 0.3:
            src = protos[list(protos)[int(rng.integers(len(protos)))]]
            protos[int(c)] = src * float(2 ** int(rng.integers(0, 3)))
        else:
            p = rng.integers(-3, 4, d).astype(float)
            while not p.any():
                p = rng.integers(-3, 4, d).astype(float)
            protos[int(c)] = p
    z = rng.integers(-3, 4, d).astype(float)
    while not z.any():
        z = rng.integers(-3, 4, d).astype(float)
    return z, protos


class TestComputePrototypes:
    def test_hand_values(self):
        out = compute_prototypes(np.array([[0.0, 0.0], [2.0, 2.0]]), np.array([4, 4]))
        mean, var, n = out[4]
        assert mean.tolist() == [1.0, 1.0] and var.tolist() == [1.0, 1.0] and n == 2

    def test_single_sample(self):
        mean, var, n = compute_prototypes(np.array([[3.0, -1.0]]), np.array([0]))[0]
        assert mean.tolist() == [3.0, -1.0] and not var.any() and n == 1

    def test_empty(self):
        with pytest.raises(Exception):
            compute_prototypes(np.zeros((0, 2)), np.zeros(0))


class TestSampler:
    def test_statistics(self):
        rng = np.random.default_rng(0)
        mean = rng.normal(size=6)
        var = rng.uniform(0.5, 4.0, size=6)
        x = sample_smoothed(mean, var, 10000, seed=1)
        assert np.all(np.abs(x.mean(0) - mean) < 0.05)
        assert np.all(np.abs(x.var(0) - var) < 0.05 * var)

    def test_zero_variance(self):
        mean = np.array([1.5, -2.0, 0.25])
        x = sample_smoothed(mean, np.zeros(3), 20, seed=3)
        assert all(np.array_equal(row, mean) for row in x)

    def test_seeded(self):
        a = sample_smoothed(np.zeros(4), np.ones(4), 5, seed=[1, 2])
        b = sample_smoothed(np.zeros(4), np.ones(4), 5, seed=[1, 2])
        assert np.array_equal(a, b)

    def test_negative_variance(self):
        with pytest.raises(ProtocolError):
            sample_smoothed(np.zeros(2), np.array([1.0, -0.1]), 3, seed=0)


class TestClassify:
    def test_singleton(self):
        assert classify(np.array([-1.0, 4.0]), store_of({7: [1.0, 0.0]}), [7]) == 7

    def test_self_similarity(self):
        protos = {0: [1.0, 0.0, 0.0], 1: [0.0, 1.0, 0.0], 2: [1.0, 1.0, 1.0]}
        for c, p in protos.items():
            assert classify(np.array(p), store_of(protos), protos) == c

    def test_tie_goes_to_lowest_id(self):
        s = store_of({5: [1.0, 0.0], 3: [2.0, 0.0]})
        assert classify(np.array([1.0, 1.0]), s, [5, 3]) == 3

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            z, protos = random_case(rng)
            assert classify(z, store_of(protos), list(protos)) == brute_classify(z, protos)

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        protos = {c: rng.normal(size=4) for c in range(6)}
        z = rng.normal(size=(20, 4))
        s = store_of(protos)
        assert np.array_equal(classify(z, s, range(6)), classify(8.0 * z, s, range(6)))

    def test_restricted_to_seen(self):
        s = store_of({0: [1.0, 0.0], 1: [0.0, 1.0]})
        assert classify(np.array([0.0, 1.0]), s, [0]) == 0

    def test_zero_norm(self):
        with pytest.raises(NumericError, match="class 2"):
            classify(np.array([1.0, 0.0]), store_of({1: [1.0, 0.0], 2: [0.0, 0.0]}), [1, 2])
        with pytest.raises(NumericError, match="query"):
            classify(np.zeros(2), store_of({1: [1.0, 0.0]}), [1])

    def test_unknown_class(self):
        with pytest.raises(ProtocolError, match="class 9"):
            classify(np.ones(2), store_of({1: [1.0, 0.0]}), [1, 9])


class TestUpdateStore:
    def test_empty_session(self):
        s = store_of({0: [1.0, 2.0]})
        new = update_store_after_session(s, np.zeros((0, 2)), np.zeros(0, int), 1)
        assert new.classes == [0] and np.array_equal(new.entries[0].mean, s.entries[0].mean)

    def test_five_way_five_shot(self):
        rng = np.random.default_rng(0)
        s = store_of({c: rng.normal(size=3) for c in range(10)})
        labels = np.repeat(np.arange(10, 15), 5)
        new = update_store_after_session(s, rng.normal(size=(25, 3)), labels, session=1)
        added = [c for c in new.classes if c not in s]
        assert added == list(range(10, 15))
        assert all(new.entries[c].count == 5 and new.entries[c].session == 1 for c in added)
        assert len(s) == 10  # input store untouched

    def test_old_entries_frozen(self):
        s = store_of({0: [1.0, 2.0]})
        new = update_store_after_session(s, np.ones((2, 2)), np.array([1, 1]), 1)
        new.entries[0].mean[0] = 99.0
        assert s.entries[0].mean[0] == 1.0

    def test_collision(self):
        with pytest.raises(ProtocolError, match="class 0"):
            update_store_after_session(store_of({0: [1.0]}), np.ones((1, 1)), np.array([0]), 1)

    def test_shrinkage(self):
        s = PrototypeStore({0: ProtoEntry(np.zeros(2), np.array([2.0, 4.0]), 0, 10)})
        new = update_store_after_session(s, np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([1, 1]), 1,
                                         shrink_variance=True)
        assert new.entries[1].var.tolist() == [2.0, 4.0]

    def test_roundtrip_arrays(self):
        rng = np.random.default_rng(2)
        s = PrototypeStore({c: ProtoEntry(rng.normal(size=3), rng.random(3), c % 2, 5) for c in (4, 1, 9)})
        back = PrototypeStore.from_arrays(s.to_arrays())
        assert back.classes == s.classes
        for c in s.classes:
            assert np.array_equal(back.entries[c].mean, s.entries[c].mean)
            assert back.entries[c].session == s.entries[c].session
