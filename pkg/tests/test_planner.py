import math
from fractions import Fraction

import pytest

from core.errors import DomainError
from core.job_types import AttnStrategy, EpPattern, FfnStrategy, JobConfig, ParallelismPlan
from core.planner import (
    DP_ATTENTION_REASON,
    enumerate_plans,
    evaluate_plans,
    rank_plans,
    scale_up_ratio,
    score_plan,
    select_ep_pattern,
)

from .conftest import MODEL_NAMES, load_preset


class TestEnumeratePlans:
    def test_dp_attention_always_rejected(self, mixtral):
        enumeration = enumerate_plans(mixtral.model, mixtral.cluster)
        assert all(p.attn_strategy != AttnStrategy.DP for p in enumeration.plans)
        dp = [r for r in enumeration.rejected if r.name.startswith("DP+")]
        assert dp and all(r.reason == DP_ATTENTION_REASON for r in dp)

    def test_sizes_must_divide_total(self, mixtral):
        enumeration = enumerate_plans(mixtral.model, mixtral.cluster)
        assert {p.n for p in enumeration.plans} == {1, 2, 4, 8}
        assert {r.n for r in enumeration.rejected if r.name == "*"} == {3, 5, 6, 7}

    def test_dp_fills_cluster(self, mixtral):
        for plan in enumerate_plans(mixtral.model, mixtral.cluster).plans:
            assert plan.total_gpus == mixtral.cluster.total_gpus

    def test_expert_divisibility(self):
        loaded = load_preset(overrides=["model.num_experts=6", "model.num_heads=48",
                                        "model.global_batch=48", "cluster.num_nodes=3"])
        plans = enumerate_plans(loaded.model, loaded.cluster).plans
        assert {p.n for p in plans if p.ffn_strategy == FfnStrategy.EP} == {1, 2, 3, 6}

    def test_out_of_range_size(self, mixtral):
        enumeration = enumerate_plans(mixtral.model, mixtral.cluster, n=16)
        assert enumeration.plans == []
        assert enumeration.rejected[0].n == 16

    def test_interleaving_needs_divisible_microbatches(self):
        loaded = load_preset(overrides=["model.global_batch=6"])
        enumeration = enumerate_plans(loaded.model, loaded.cluster, JobConfig(pp=4, vpp=2), n=8)
        assert enumeration.plans == []
        assert "pp" in enumeration.rejected[0].reason

    def test_enumeration_order_stable(self, mixtral):
        a = enumerate_plans(mixtral.model, mixtral.cluster)
        b = enumerate_plans(mixtral.model, mixtral.cluster)
        assert a == b


SP_EP = (AttnStrategy.SP, FfnStrategy.EP)
RIVAL_PAIRS = {(AttnStrategy.TP, FfnStrategy.TP), (AttnStrategy.TP, FfnStrategy.EP),
               (AttnStrategy.SP, FfnStrategy.TP)}


def _pair(score):
    return score.plan.attn_strategy, score.plan.ffn_strategy


class TestScoring:
    @pytest.mark.parametrize("name", MODEL_NAMES)
    def test_sp_ep_ranks_first_at_full_node(self, name):
        loaded = load_preset(name)
        ranked, _ = evaluate_plans(loaded.model, loaded.cluster, loaded.precision, loaded.job,
                                   efficiency=loaded.efficiency, n=8)
        best = ranked[0]
        assert _pair(best) == SP_EP
        rivals = [s for s in ranked if _pair(s) in RIVAL_PAIRS]
        assert {_pair(s) for s in rivals} == RIVAL_PAIRS
        assert all(best.mfu > s.mfu for s in rivals)

    def test_sp_ep_a2a_beats_ag_rs_on_mixtral(self):
        loaded = load_preset(overrides=["model.num_layers=4", "model.global_batch=128"])
        ranked, _ = evaluate_plans(loaded.model, loaded.cluster, loaded.precision, loaded.job,
                                   efficiency=loaded.efficiency, n=8)
        best = ranked[0]
        assert best.feasible
        assert best.plan.ep_pattern == EpPattern.A2A
        assert best.est_iter_time < ranked[1].est_iter_time

    def test_ranking_is_sorted(self, mixtral):
        ranked, _ = evaluate_plans(mixtral.model, mixtral.cluster, mixtral.precision, mixtral.job,
                                   efficiency=mixtral.efficiency)
        keys = [s.sort_key() for s in ranked]
        assert keys == sorted(keys)
        assert [s.sort_key() for s in rank_plans(list(reversed(ranked)))] == keys

    def test_infeasible_memory(self, mixtral):
        plan = ParallelismPlan(AttnStrategy.TP, FfnStrategy.TP, EpPattern.AG_RS, 1, dp=32)
        score = score_plan(plan, mixtral.model, mixtral.cluster, mixtral.precision, mixtral.job)
        assert not score.feasible
        assert "GiB" in score.reason
        assert score.to_dict()["feasible"] is False

    def test_domain_error_is_not_raised(self, mixtral):
        plan = ParallelismPlan(AttnStrategy.DP, FfnStrategy.EP, EpPattern.A2A, 8, dp=4)
        score = score_plan(plan, mixtral.model, mixtral.cluster)
        assert not score.feasible
        assert math.isinf(score.est_iter_time)
        assert score.to_dict()["est_iter_time"] is None

    def test_sp_lowers_critical_comm(self, mixtral):
        sp = ParallelismPlan(AttnStrategy.SP, FfnStrategy.EP, EpPattern.A2A, 8, dp=4)
        tp = ParallelismPlan(AttnStrategy.TP, FfnStrategy.EP, EpPattern.A2A, 8, dp=4)
        a = score_plan(sp, mixtral.model, mixtral.cluster)
        b = score_plan(tp, mixtral.model, mixtral.cluster)
        assert a.critical_path_comm < b.critical_path_comm
        assert a.mem_per_gpu > b.mem_per_gpu


class TestEpPattern:
    def test_mixtral_prefers_a2a(self, mixtral, link):
        assert select_ep_pattern(mixtral.model, mixtral.cluster, link) == EpPattern.A2A

    def test_large_top_k_prefers_ag_rs(self, link):
        loaded = load_preset(overrides=["model.top_k=8"])
        assert select_ep_pattern(loaded.model, loaded.cluster, link) == EpPattern.AG_RS


class TestScaleUp:
    @pytest.mark.parametrize("n", [2, 4, 8, 16])
    def test_approximation_error_is_one_over_n(self, mixtral, n):
        report = scale_up_ratio(mixtral.model, mixtral.cluster, n)
        assert (report.R - report.R_approx) / report.R == Fraction(1, n)

    def test_ratio_is_comp_over_comm(self, mixtral):
        report = scale_up_ratio(mixtral.model, mixtral.cluster, 8)
        assert float(report.R) == pytest.approx(report.comp_time / report.comm_time)
        assert report.sustains == (report.R > 1)

    def test_grows_with_h_ffn(self, mixtral):
        small = scale_up_ratio(mixtral.model, mixtral.cluster, 8)
        wide = load_preset(overrides=["model.h_ffn=28672"])
        assert scale_up_ratio(wide.model, wide.cluster, 8).R == 2 * small.R

    def test_inter_node_is_slower(self, mixtral):
        assert scale_up_ratio(mixtral.model, mixtral.cluster, 16).R_approx < \
            scale_up_ratio(mixtral.model, mixtral.cluster, 8).R_approx

    def test_n_below_two(self, mixtral):
        with pytest.raises(DomainError):
            scale_up_ratio(mixtral.model, mixtral.cluster, 1)
