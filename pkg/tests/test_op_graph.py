from fractions import Fraction

import pytest

from core.commcost import Collective
from core.errors import DomainError, SchedulingError
from core.job_types import AttnStrategy, EfficiencyTable, EpPattern, FfnStrategy, ParallelismPlan, PrecisionConfig
from core.memmodel import RematPolicy
from core.op_graph import (
    OpKind,
    StreamClass,
    build_backward_graph,
    build_layer_graph,
    cost_graph,
    gemm_peak,
    op_time,
)


def _plan(attn=AttnStrategy.SP, ffn=FfnStrategy.EP, pattern=EpPattern.A2A, n=8):
    return ParallelismPlan(attn, ffn, pattern, n, dp=4)


def _names(g):
    return [node.name for node in g.nodes.values()]


def _gemms(g):
    return g.count(OpKind.GEMM) + g.count(OpKind.GROUPED_GEMM)


class TestForwardGraph:
    def test_sp_ep_a2a_structure(self, mixtral):
        g = build_layer_graph(_plan(), mixtral.model)
        assert _names(g) == [
            "attn_norm", "qkv_proj", "qkv_a2a", "attention_core", "attn_out_a2a", "out_proj",
            "ffn_norm", "router", "scatter", "dispatch_a2a", "fc1", "swiglu", "weighted_sum",
            "fc2", "combine_a2a", "gather",
        ]
        assert [c.comm.collective for c in g.collectives()] == [Collective.ALL_TO_ALL] * 4

    def test_tp_attention_uses_ag_rs(self, mixtral):
        g = build_layer_graph(_plan(attn=AttnStrategy.TP), mixtral.model)
        assert g.by_name("attn_ag").comm.collective == Collective.ALL_GATHER
        assert g.by_name("attn_rs").comm.collective == Collective.REDUCE_SCATTER
        assert not g.has("qkv_a2a")

    def test_ag_rs_pattern(self, mixtral):
        g = build_layer_graph(_plan(pattern=EpPattern.AG_RS), mixtral.model)
        assert g.has("ffn_ag") and g.has("ffn_rs")
        assert not g.has("dispatch_a2a")

    def test_cp_kv_gather_is_estimate(self, mixtral):
        g = build_layer_graph(_plan(attn=AttnStrategy.CP), mixtral.model)
        assert g.by_name("kv_ag").comm.estimate

    def test_n_one_has_no_collectives(self, mixtral):
        g = build_layer_graph(_plan(n=1), mixtral.model)
        assert g.collectives() == []
        assert g.by_name("fc1").deps == (g.by_name("scatter").id,)
        assert len(g.nodes) == 12

    def test_dp_attention_rejected(self, mixtral):
        with pytest.raises(DomainError):
            build_layer_graph(_plan(attn=AttnStrategy.DP), mixtral.model)

    def test_ep_needs_divisible_experts(self, mixtral):
        with pytest.raises(DomainError):
            build_layer_graph(_plan(n=3), mixtral.model)

    def test_inter_node_group_uses_inter_stream(self, mixtral):
        g = build_layer_graph(_plan(n=8), mixtral.model, gpus_per_node=4)
        assert {c.stream_class for c in g.collectives()} == {StreamClass.COMM_INTER}

    def test_topological_order_respects_deps(self, mixtral):
        g = build_layer_graph(_plan(), mixtral.model)
        position = {node_id: i for i, node_id in enumerate(g.topological_order())}
        for src, dst in g.edges:
            assert position[src] < position[dst]

    def test_gemm_flops_sp(self, mixtral):
        model = mixtral.model
        g = build_layer_graph(_plan(), model)
        local = Fraction(model.micro_batch * model.seq_len, 8)
        assert g.by_name("out_proj").flops == 2 * local * model.h * model.h
        assert g.by_name("fc1").flops == 2 * model.top_k * local * model.h * 2 * model.h_ffn


class TestBackwardGraph:
    @pytest.mark.parametrize("attn", [AttnStrategy.SP, AttnStrategy.TP, AttnStrategy.CP])
    @pytest.mark.parametrize("pattern", [EpPattern.A2A, EpPattern.AG_RS])
    @pytest.mark.parametrize("n", [1, 8])
    def test_node_count(self, mixtral, attn, pattern, n):
        plan = _plan(attn=attn, pattern=pattern, n=n)
        fwd = build_layer_graph(plan, mixtral.model)
        with_remat = build_backward_graph(plan, mixtral.model, RematPolicy(), fwd)
        without = build_backward_graph(plan, mixtral.model, RematPolicy.disabled(), fwd)
        assert len(with_remat.nodes) == len(fwd.nodes) + _gemms(fwd) + 3
        assert len(without.nodes) == len(fwd.nodes) + _gemms(fwd)

    def test_remat_nodes(self, mixtral):
        bwd = build_backward_graph(_plan(), mixtral.model)
        remats = [n for n in bwd.nodes.values() if n.kind == OpKind.REMAT]
        assert {n.name for n in remats} == {"remat_norm", "remat_ffn_in", "remat_fc2_in"}
        ffn_in = bwd.by_name("remat_ffn_in")
        assert ffn_in.is_collective
        assert ffn_in.comm.collective == Collective.ALL_TO_ALL

    def test_remat_independent_of_gradient_comm(self, mixtral):
        bwd = build_backward_graph(_plan(), mixtral.model)
        combine = bwd.by_name("combine_a2a_bwd")
        ffn_in = bwd.by_name("remat_ffn_in")
        assert combine.id not in ffn_in.deps
        assert ffn_in.id not in combine.deps

    def test_wgrad_waits_for_remat(self, mixtral):
        bwd = build_backward_graph(_plan(), mixtral.model)
        assert bwd.by_name("remat_ffn_in").id in bwd.by_name("fc1_wgrad").deps
        assert bwd.by_name("remat_fc2_in").id in bwd.by_name("fc2_wgrad").deps

    def test_collectives_are_mirrored(self, mixtral):
        bwd = build_backward_graph(_plan(attn=AttnStrategy.TP, pattern=EpPattern.AG_RS), mixtral.model)
        assert bwd.by_name("attn_ag_bwd").comm.collective == Collective.REDUCE_SCATTER
        assert bwd.by_name("ffn_rs_bwd").comm.collective == Collective.ALL_GATHER

    def test_requires_forward_graph(self, mixtral):
        bwd = build_backward_graph(_plan(), mixtral.model)
        with pytest.raises(SchedulingError):
            build_backward_graph(_plan(), mixtral.model, forward=bwd)


class TestCosting:
    def test_every_node_costed(self, mixtral, link):
        g = build_layer_graph(_plan(), mixtral.model)
        costed = cost_graph(g, mixtral.cluster, mixtral.precision, mixtral.efficiency, link)
        assert all(node.duration is not None and node.duration >= 0 for node in costed.nodes.values())
        assert all(node.duration is None for node in g.nodes.values())

    def test_gemm_time(self, mixtral):
        g = build_layer_graph(_plan(), mixtral.model)
        node = g.by_name("out_proj")
        table = EfficiencyTable()
        expected = float(node.flops) / (mixtral.cluster.peak_flops * 0.75)
        assert op_time(node, mixtral.cluster, PrecisionConfig(), table) == pytest.approx(expected)

    def test_memory_bound_time(self, mixtral):
        node = build_layer_graph(_plan(), mixtral.model).by_name("swiglu")
        expected = float(node.bytes_moved) / (mixtral.cluster.mem_bw * 0.8)
        assert op_time(node, mixtral.cluster, None, EfficiencyTable()) == pytest.approx(expected)

    def test_fp8_doubles_gemm_peak(self, mixtral):
        fp8 = PrecisionConfig(compute_format="FP8-E4M3", quant_scheme="per_token")
        assert gemm_peak(mixtral.cluster, fp8) == 2 * gemm_peak(mixtral.cluster, PrecisionConfig())

    def test_backward_costs_twice_forward(self, mixtral):
        fwd = build_layer_graph(_plan(), mixtral.model)
        bwd = build_backward_graph(_plan(), mixtral.model, RematPolicy.disabled(), fwd)
        assert bwd.by_name("swiglu_bwd").bytes_moved == 2 * fwd.by_name("swiglu").bytes_moved
        assert bwd.by_name("fc1_dgrad").flops == fwd.by_name("fc1").flops
