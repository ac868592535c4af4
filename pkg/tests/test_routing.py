import itertools

import numpy as np
import pytest

from core.errors import DomainError
from core.routing import (
    MAX_DP_RANKS,
    balance_metrics,
    best_block_order,
    build_scatter_map,
    expert_rank,
    simulate_routing,
    sort_tokens_for_tiles,
    tile_layout_from_ranks,
)


def _dependent_count(ranks, tile_rows):
    return sum(len(set(ranks[i:i + tile_rows])) for i in range(0, len(ranks), tile_rows))


class TestSimulateRouting:
    def test_uniform_round_robin(self):
        a = simulate_routing(8, 4, 2, mode="uniform", capacity_factor=None)
        assert a.assignments.tolist()[:2] == [[0, 1], [2, 3]]
        assert a.retained_slots == 16

    def test_random_distinct_experts(self):
        a = simulate_routing(256, 8, 3, mode="random", seed=3, capacity_factor=None)
        for row in a.assignments:
            assert len(set(row.tolist())) == 3

    def test_seed_deterministic(self):
        a = simulate_routing(128, 16, 2, mode="skewed", seed=5)
        b = simulate_routing(128, 16, 2, mode="skewed", seed=5)
        assert np.array_equal(a.assignments, b.assignments)
        assert np.array_equal(a.dropped, b.dropped)

    def test_skewed_prefers_low_ids(self):
        a = simulate_routing(4096, 16, 1, mode="skewed", seed=0, capacity_factor=None)
        counts = np.bincount(a.assignments.reshape(-1), minlength=16)
        assert counts[0] > counts[15]

    def test_capacity_drops_late_tokens(self):
        a = simulate_routing(512, 8, 2, mode="skewed", seed=1, capacity_factor=1.0, n=4)
        groups = expert_rank(a.assignments.reshape(-1), 8, 4)
        kept = groups[~a.dropped.reshape(-1)]
        assert np.bincount(kept, minlength=4).max() <= a.capacity
        assert a.dropped.any()
        assert a.token_dropped.sum() >= 1

    def test_no_capacity_no_drops(self):
        a = simulate_routing(512, 8, 2, mode="skewed", seed=1, capacity_factor=None, n=4)
        assert not a.dropped.any()

    @pytest.mark.parametrize("kwargs", [
        {"mode": "bogus"},
        {"top_k": 9},
        {"capacity_factor": 0.0},
        {"n": 0},
    ])
    def test_invalid(self, kwargs):
        args = {"tokens": 16, "num_experts": 8, "top_k": 2}
        args.update(kwargs)
        with pytest.raises(DomainError):
            simulate_routing(**args)

    def test_to_dict(self):
        data = simulate_routing(4, 4, 1).to_dict()
        assert data["capacity"] == 4
        assert len(data["assignments"]) == 4


class TestScatterMap:
    def test_rows_partition_retained_slots(self):
        a = simulate_routing(256, 8, 2, mode="random", seed=2, capacity_factor=1.25, n=4)
        total = sum(build_scatter_map(a, 4, r).rows for r in range(4))
        assert total == a.retained_slots

    def test_layout_is_expert_then_rank_contiguous(self):
        a = simulate_routing(128, 8, 2, mode="random", seed=4, capacity_factor=None, n=4)
        smap = build_scatter_map(a, 4, 1)
        keys = list(zip(smap.row_expert.tolist(), smap.row_source_rank.tolist(), smap.inverse_map.tolist()))
        assert keys == sorted(keys)
        assert set(smap.local_experts.tolist()) == {2, 3}
        assert smap.per_expert_counts.sum() == smap.rows

    def test_gather_inverts_scatter(self):
        a = simulate_routing(64, 4, 2, mode="random", seed=9, capacity_factor=None, n=2)
        smap = build_scatter_map(a, 2, 0)
        x = np.arange(64 * 2 * 3, dtype=np.float64).reshape(128, 3)
        restored = smap.gather(smap.scatter(x), 128)
        assert np.array_equal(restored[smap.inverse_map], x[smap.inverse_map])
        missing = np.setdiff1d(np.arange(128), smap.inverse_map)
        assert not restored[missing].any()
        for row, out in smap.row_map.items():
            assert smap.inverse_map[out] == row

    def test_rank_out_of_range(self):
        a = simulate_routing(16, 4, 1)
        with pytest.raises(DomainError):
            build_scatter_map(a, 2, 2)


class TestTileLayout:
    def test_block_order_prefers_aligned(self):
        assert best_block_order([0, 1], [2, 4], 4) == (1, 0)

    def test_block_order_ascending_when_tied(self):
        assert best_block_order([0, 1, 2], [4, 4, 4], 4) == (0, 1, 2)

    def test_block_order_large_falls_back(self):
        ranks = list(range(MAX_DP_RANKS + 1))
        assert best_block_order(ranks, [3] * len(ranks), 4) == tuple(ranks)

    def test_unsorted_keeps_arrival_order(self):
        layout = tile_layout_from_ranks([1, 0, 1, 0], 2, sort=False)
        assert layout.row_ranks.tolist() == [1, 0, 1, 0]
        assert layout.total_dependent_ranks == 4

    def test_sorted_groups_ranks(self):
        layout = tile_layout_from_ranks([1, 0, 1, 0], 2)
        assert layout.row_ranks.tolist() == [0, 0, 1, 1]
        assert layout.total_dependent_ranks == 2
        assert layout.num_tiles == 2

    def test_exhaustive_minimal(self):
        for rows in range(1, 9):
            for counts in itertools.product(range(rows + 1), repeat=3):
                if sum(counts) != rows:
                    continue
                ranks = [r for r, c in enumerate(counts) for _ in range(c)]
                perms = set(itertools.permutations(ranks))
                for tile_rows in range(1, 5):
                    best = min(_dependent_count(p, tile_rows) for p in perms)
                    layout = tile_layout_from_ranks(ranks[::-1], tile_rows)
                    assert layout.total_dependent_ranks == best
                    assert sorted(layout.row_ranks.tolist()) == ranks

    def test_sort_tokens_covers_all_rows(self):
        a = simulate_routing(512, 8, 2, mode="random", seed=11, capacity_factor=None, n=4)
        smap = build_scatter_map(a, 4, 0)
        natural = sort_tokens_for_tiles(smap, a, 32, sort=False)
        sorted_layout = sort_tokens_for_tiles(smap, a, 32)
        assert sorted(sorted_layout.row_order.tolist()) == list(range(smap.rows))
        assert sorted_layout.total_dependent_ranks <= natural.total_dependent_ranks
        for tile in sorted_layout.tiles:
            assert tile.end - tile.start <= 32

    def test_invalid_tile_rows(self):
        with pytest.raises(DomainError):
            tile_layout_from_ranks([0, 1], 0)


class TestBalance:
    def test_uniform_loss_is_one(self):
        a = simulate_routing(64, 8, 2, mode="uniform", capacity_factor=None, n=4)
        stats = balance_metrics(a)
        assert stats.balance_loss_value == pytest.approx(1.0)
        assert stats.per_group_load.tolist() == [32, 32, 32, 32]
        assert stats.drop_rate == 0.0

    def test_skew_raises_loss(self):
        a = simulate_routing(2048, 8, 1, mode="skewed", seed=0, capacity_factor=None, n=4)
        assert balance_metrics(a).balance_loss_value > 1.0

    def test_per_expert_counts_sum(self):
        a = simulate_routing(512, 8, 2, mode="skewed", seed=3, capacity_factor=1.0, n=4)
        stats = balance_metrics(a)
        assert stats.per_expert_counts.sum() == a.retained_slots
