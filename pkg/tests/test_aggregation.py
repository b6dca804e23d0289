import itertools

import numpy as np
import pytest

from brfl.aggregation import (
    ClusterValidator,
    ModelUpdate,
    clipped_clustering,
    cluster_means,
    krum,
    mean,
    median,
    psa_aggregate,
)
from brfl.nn import LayerShape, ParamVector
from brfl.spectral import ClusterAssignment


def _update(node_id, values, round_index=1):
    values = np.asarray(values, dtype=np.float64)
    shapes = (LayerShape(1, len(values), has_bias=False),)
    return ModelUpdate(node_id, round_index, ParamVector(values, shapes))


def _values(pv):
    return pv.values


# --- brute-force oracles ----------------------------------------------------


def krum_oracle(updates, f):
    n = len(updates)
    flats = [u.params.values for u in updates]
    best_id, best_score, best = None, None, None
    for i in range(n):
        dists = sorted(
            float(np.sum((flats[i] - flats[j]) ** 2)) for j in range(n) if j != i
        )
        score = sum(dists[: n - f - 2])
        key = (score, updates[i].node_id)
        if best is None or key < best:
            best = key
            best_id, best_score = i, score
    return updates[best_id].params


def median_oracle(updates):
    stacked = np.stack([u.params.values for u in updates])
    out = np.empty(stacked.shape[1])
    for d in range(stacked.shape[1]):
        col = np.sort(stacked[:, d])
        m = len(col)
        out[d] = col[m // 2] if m % 2 == 1 else (col[m // 2 - 1] + col[m // 2]) / 2
    return out


def mean_oracle(updates):
    stacked = np.stack([u.params.values for u in updates])
    return np.array([float(np.sum(stacked[:, d])) / len(updates) for d in range(stacked.shape[1])])


class TestClusterMeans:
    def test_pairwise_mean(self):
        updates = [_update(0, [1.0, 1.0]), _update(1, [3.0, 3.0])]
        assignment = ClusterAssignment(1, np.zeros(2, dtype=np.int64))
        (cm,) = cluster_means(updates, assignment)
        assert _values(cm.params).tolist() == [2.0, 2.0]
        assert cm.member_ids == (0, 1)

    def test_singleton_cluster(self):
        updates = [_update(0, [1.0, 2.0]), _update(1, [5.0, 6.0])]
        assignment = ClusterAssignment(2, np.array([0, 1]))
        means = cluster_means(updates, assignment)
        assert _values(means[1].params).tolist() == [5.0, 6.0]

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(0)
        updates = [_update(i, rng.normal(size=20)) for i in range(5)]
        assignment = ClusterAssignment(1, np.zeros(5, dtype=np.int64))
        (cm,) = cluster_means(updates, assignment)
        assert np.abs(_values(cm.params) - mean_oracle(updates)).max() < 1e-12

    def test_empty_cluster_omitted(self):
        updates = [_update(0, [1.0]), _update(1, [2.0])]
        assignment = ClusterAssignment(3, np.array([0, 2]))
        means = cluster_means(updates, assignment)
        assert [cm.cluster_index for cm in means] == [0, 2]


class TestPsaAggregate:
    def test_sign_flip_scenario_selects_benign(self):
        # two benign copies of b and two sign-flipped; validation prefers b
        b = np.array([1.0, 2.0, -1.0, 0.5, 3.0])
        updates = [
            _update(0, b + 0.01),
            _update(1, b - 0.01),
            _update(2, -b * 3 + 0.01),
            _update(3, -b * 3 - 0.01),
        ]

        def lenient(node_id):
            def evaluate(params):
                benign_dist = np.abs(params.values - b).max()
                flipped_dist = np.abs(params.values + 3 * b).max()
                return 0.9 if benign_dist < flipped_dist else 0.1

            return ClusterValidator(node_id, evaluate)

        result = psa_aggregate(updates, [lenient(10), lenient(11)], num_clusters=2, seed=5)
        assert result.winning_member_ids == (0, 1)
        assert np.allclose(_values(result.global_model.params), b, atol=0.01)
        assert result.global_model.aggregator_ids == (10, 11)
        accs = sorted(r.mean_accuracy for r in result.records)
        assert accs == [0.1, 0.9]

    def test_identical_updates_single_cluster(self):
        v = np.array([2.0, -1.0, 0.5])
        updates = [_update(i, v) for i in range(3)]
        validators = [ClusterValidator(7, lambda params: 0.5)]
        result = psa_aggregate(updates, validators, num_clusters=1, seed=0)
        assert np.allclose(_values(result.global_model.params), v)
        assert result.winning_member_ids == (0, 1, 2)

    def test_tied_clusters_average(self):
        b = np.array([1.0, 2.0, 3.0, -1.0])
        updates = [
            _update(0, b),
            _update(1, b * 1.001),
            _update(2, -b),
            _update(3, -b * 1.001),
        ]
        validators = [ClusterValidator(5, lambda params: 0.25)]  # everyone ties
        result = psa_aggregate(updates, validators, num_clusters=2, seed=1)
        assert len(result.winning_clusters) == 2
        assert np.allclose(_values(result.global_model.params), np.zeros(4), atol=0.01)
        assert result.winning_member_ids == (0, 1, 2, 3)

    def test_winners_attain_max(self):
        rng = np.random.default_rng(9)
        base = rng.normal(size=30)
        updates = [_update(i, base + rng.normal(scale=0.01, size=30)) for i in range(4)]
        updates += [_update(i + 4, -3 * base + rng.normal(scale=0.01, size=30)) for i in range(3)]
        validators = [
            ClusterValidator(20, lambda p: 0.8 if p.values @ base > 0 else 0.2),
            ClusterValidator(21, lambda p: 0.6 if p.values @ base > 0 else 0.1),
        ]
        result = psa_aggregate(updates, validators, num_clusters=2, seed=3)
        best = max(r.mean_accuracy for r in result.records)
        for cluster in result.winning_clusters:
            rec = next(r for r in result.records if r.cluster_index == cluster)
            assert rec.mean_accuracy == best

    def test_validator_range_checked(self):
        updates = [_update(0, [1.0, 2.0]), _update(1, [1.0, 2.1])]
        validators = [ClusterValidator(0, lambda p: 1.5)]
        with pytest.raises(ValueError):
            psa_aggregate(updates, validators, num_clusters=1, seed=0)

    def test_preconditions(self):
        with pytest.raises(ValueError):
            psa_aggregate([_update(0, [1.0, 2.0])], [ClusterValidator(0, lambda p: 0.5)], 1, 0)
        with pytest.raises(ValueError):
            psa_aggregate([_update(0, [1.0, 2.0]), _update(1, [2.0, 1.0])], [], 1, 0)


class TestKrum:
    def test_spec_example(self):
        updates = [
            _update(0, [0.0]),
            _update(1, [0.1]),
            _update(2, [-0.1]),
            _update(3, [10.0]),
        ]
        assert _values(krum(updates, 1)).tolist() == [0.0]

    def test_identical_updates(self):
        updates = [_update(i, [3.0, 4.0]) for i in range(4)]
        assert _values(krum(updates, 1)).tolist() == [3.0, 4.0]

    def test_never_the_outlier(self):
        rng = np.random.default_rng(11)
        for trial in range(10):
            cluster = [_update(i, rng.normal(scale=0.1, size=4)) for i in range(4)]
            outlier = _update(4, rng.normal(loc=50.0, size=4))
            chosen = krum(cluster + [outlier], 1)
            assert not np.array_equal(_values(chosen), _values(outlier.params))

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(12)
        for trial in range(50):
            n = int(rng.integers(3, 8))
            f = int(rng.integers(0, n - 2))
            d = int(rng.integers(1, 6))
            updates = [_update(i, rng.normal(size=d)) for i in range(n)]
            assert np.array_equal(
                _values(krum(updates, f)), _values(krum_oracle(updates, f))
            )

    def test_benign_majority_exact_recovery(self):
        rng = np.random.default_rng(13)
        b = rng.normal(size=5)
        updates = [_update(i, b) for i in range(4)]
        updates.append(_update(4, rng.normal(loc=9.0, size=5)))
        assert np.array_equal(_values(krum(updates, 1)), b)

    def test_too_small(self):
        updates = [_update(0, [1.0]), _update(1, [2.0])]
        with pytest.raises(ValueError):
            krum(updates, 1)

    def test_default_byzantine_count(self):
        updates = [_update(i, [float(i)]) for i in range(10)]
        krum(updates)  # floor((10-3)/2) = 3 accepted silently


class TestMedianMean:
    def test_median_example(self):
        updates = [_update(0, [1.0, 5.0]), _update(1, [2.0, 4.0]), _update(2, [9.0, 0.0])]
        assert _values(median(updates)).tolist() == [2.0, 4.0]

    def test_median_even_count(self):
        updates = [_update(0, [1.0]), _update(1, [3.0])]
        assert _values(median(updates)).tolist() == [2.0]

    def test_single_update(self):
        u = _update(0, [4.0, 2.0])
        assert _values(median([u])).tolist() == [4.0, 2.0]
        assert _values(mean([u])).tolist() == [4.0, 2.0]

    def test_mean_example(self):
        updates = [_update(0, [1.0, 2.0]), _update(1, [3.0, 4.0])]
        assert _values(mean(updates)).tolist() == [2.0, 3.0]

    def test_mean_of_opposites_is_zero(self):
        v = np.array([1.0, -2.0, 3.0])
        assert np.all(_values(mean([_update(0, v), _update(1, -v)])) == 0.0)

    def test_oracle_equivalence_random(self):
        rng = np.random.default_rng(14)
        for trial in range(50):
            n = int(rng.integers(1, 8))
            d = int(rng.integers(1, 6))
            updates = [_update(i, rng.normal(size=d)) for i in range(n)]
            assert np.abs(_values(median(updates)) - median_oracle(updates)).max() < 1e-12
            assert np.abs(_values(mean(updates)) - mean_oracle(updates)).max() < 1e-12

    def test_permutation_invariance(self):
        rng = np.random.default_rng(15)
        updates = [_update(i, rng.normal(size=6)) for i in range(5)]
        for perm in itertools.permutations(range(5)):
            shuffled = [updates[i] for i in perm]
            assert np.array_equal(_values(median(shuffled)), _values(median(updates)))
            assert np.abs(_values(mean(shuffled)) - _values(mean(updates))).max() < 1e-12
            assert np.array_equal(_values(krum(shuffled, 1)), _values(krum(updates, 1)))


class TestClippedClustering:
    def test_antipodal_groups_majority_wins(self):
        v = np.array([1.0, 0.0, 1.0])
        v = v / np.linalg.norm(v) * 5
        updates = [_update(i, v) for i in range(3)] + [_update(i + 3, -v) for i in range(2)]
        out = clipped_clustering(updates)
        assert np.allclose(_values(out), v)

    def test_identical_updates(self):
        updates = [_update(i, [2.0, -1.0]) for i in range(4)]
        assert np.allclose(_values(clipped_clustering(updates)), [2.0, -1.0])

    def test_outlier_clipped_into_hull(self):
        rng = np.random.default_rng(16)
        base = rng.normal(size=4)
        updates = [_update(i, base + rng.normal(scale=0.01, size=4)) for i in range(4)]
        updates.append(_update(4, base * 1000.0))
        out = _values(clipped_clustering(updates))
        lo = np.min([u.params.values for u in updates[:4]], axis=0)
        hi = np.max([u.params.values for u in updates[:4]], axis=0)
        # the huge-norm copy is clipped back to the median norm, so the result
        # stays within the benign cluster's componentwise hull (small slack for
        # the clipping rescale)
        assert np.all(out >= lo - 0.05) and np.all(out <= hi + 0.05)

    def test_size_tie_prefers_lowest_node_id(self):
        v = np.array([0.0, 2.0])
        updates = [
            _update(3, v),
            _update(1, -v),
            _update(2, v),
            _update(4, -v),
        ]
        out = _values(clipped_clustering(updates))
        # clusters tie 2 vs 2; node 1 sits in the -v cluster
        assert np.allclose(out, -v)

    def test_needs_two(self):
        with pytest.raises(ValueError):
            clipped_clustering([_update(0, [1.0])])
