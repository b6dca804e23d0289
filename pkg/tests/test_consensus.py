import itertools

import numpy as np
import pytest

from brfl.aggregation import GlobalModel, ModelUpdate
from brfl.consensus import PccRecord, ppcc_select
from brfl.nn import LayerShape, ParamVector


def _pv(values):
    values = np.asarray(values, dtype=np.float64)
    return ParamVector(values, (LayerShape(1, len(values), has_bias=False),))


def _update(node_id, values, round_index=4):
    return ModelUpdate(node_id, round_index, _pv(values))


def _gm(values, round_index=4):
    return GlobalModel(round_index, (0, 1), _pv(values))


class TestColdStart:
    def test_no_global_model_seeded_choice(self):
        pool = list(range(10))
        a, records_a = ppcc_select([], None, 2, pool, seed=7)
        b, records_b = ppcc_select([], None, 2, pool, seed=7)
        assert a == b
        assert len(a) == 2 and set(a) <= set(pool)
        assert records_a == [] and records_b == []

    def test_no_updates_also_randomizes(self):
        gm = _gm([1.0, 2.0, 3.0])
        chosen, records = ppcc_select([], gm, 2, range(10), seed=3)
        assert len(chosen) == 2
        assert records == []

    def test_different_seeds_can_differ(self):
        draws = {ppcc_select([], None, 2, range(10), seed=s)[0] for s in range(20)}
        assert len(draws) > 1

    def test_pool_too_small(self):
        with pytest.raises(ValueError):
            ppcc_select([], None, 3, [1, 2], seed=0)


class TestRankedSelection:
    def test_sorted_by_rho_descending(self):
        gm = _gm([1.0, 2.0, 3.0, 4.0])
        updates = [
            _update(1, [1.0, 2.0, 3.0, 4.1]),      # rho ~ 0.999
            _update(2, [1.0, 2.0, 4.0, 3.0]),      # mediocre
            _update(3, [1.0, 2.0, 3.0, 4.0]),      # rho = 1
            _update(4, [4.0, 3.0, 2.0, 1.0]),      # rho = -1
        ]
        chosen, records = ppcc_select(updates, gm, 2, range(10), seed=0)
        assert chosen == (1, 3)
        by_node = {r.node_id: r.rho for r in records}
        assert by_node[3] == 1.0
        assert by_node[4] == -1.0
        assert len(records) == 4

    def test_perfect_match_always_selected(self):
        gm = _gm([2.0, -1.0, 0.5])
        updates = [_update(i, np.random.default_rng(i).normal(size=3)) for i in range(5)]
        updates.append(_update(9, [2.0, -1.0, 0.5]))
        chosen, _ = ppcc_select(updates, gm, 1, range(10), seed=0)
        assert chosen == (9,)

    def test_tie_breaks_to_lowest_node_id(self):
        gm = _gm([1.0, 2.0, 3.0])
        updates = [
            _update(8, [2.0, 4.0, 6.0]),  # rho = 1
            _update(2, [1.0, 2.0, 3.0]),  # rho = 1
            _update(5, [3.0, 2.0, 1.0]),
        ]
        chosen, _ = ppcc_select(updates, gm, 2, range(10), seed=0)
        assert chosen == (2, 8)

    def test_order_invariant(self):
        gm = _gm([1.0, 0.0, 2.0, -1.0])
        rng = np.random.default_rng(5)
        updates = [_update(i, rng.normal(size=4)) for i in range(5)]
        base, base_records = ppcc_select(updates, gm, 2, range(10), seed=0)
        for perm in itertools.permutations(range(5)):
            shuffled = [updates[i] for i in perm]
            chosen, records = ppcc_select(shuffled, gm, 2, range(10), seed=0)
            assert chosen == base
            assert records == base_records

    def test_selected_subset_of_submitters(self):
        gm = _gm([1.0, 2.0, 0.5])
        updates = [_update(i, np.random.default_rng(i).normal(size=3)) for i in (3, 4, 7)]
        chosen, _ = ppcc_select(updates, gm, 2, range(10), seed=0)
        assert set(chosen) <= {3, 4, 7}

    def test_constant_update_gets_zero_score(self):
        gm = _gm([1.0, 2.0, 3.0])
        updates = [_update(1, [5.0, 5.0, 5.0]), _update(2, [1.0, 2.0, 3.1])]
        chosen, records = ppcc_select(updates, gm, 1, range(10), seed=0)
        assert chosen == (2,)
        assert {r.node_id: r.rho for r in records}[1] == 0.0

    def test_beta_exceeds_candidates(self):
        gm = _gm([1.0, 2.0, 3.0])
        with pytest.raises(ValueError):
            ppcc_select([_update(1, [1.0, 2.0, 3.0])], gm, 2, range(10), seed=0)


class TestPccRecord:
    def test_bounds_validated(self):
        with pytest.raises(ValueError):
            PccRecord(1, 0, 1.5)
        PccRecord(1, 0, -1.0)
