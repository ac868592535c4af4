import random

import pytest

from core.errors import SchedulingError
from core.job_types import AttnStrategy, EpPattern, FfnStrategy, ParallelismPlan
from core.memmodel import RematPolicy
from core.op_graph import OpGraph, OpKind, StreamClass, build_backward_graph, build_layer_graph, cost_graph
from core.scheduler import (
    critical_path_length,
    dependency_violations,
    resource_violations,
    schedule,
    serial_sum,
)

PLAN = ParallelismPlan(AttnStrategy.SP, FfnStrategy.EP, EpPattern.A2A, 8, dp=4)
STREAMS = (StreamClass.COMPUTE, StreamClass.COMM_INTRA, StreamClass.COMM_INTER)


def _random_graph(seed: int) -> OpGraph:
    rng = random.Random(seed)
    g = OpGraph("forward", PLAN)
    for i in range(rng.randint(1, 14)):
        deps = [d for d in range(i) if rng.random() < 0.3]
        stream = rng.choice(STREAMS)
        kind = OpKind.GEMM if stream == StreamClass.COMPUTE else OpKind.COLLECTIVE
        duration = rng.choice([0.0, rng.uniform(1e-6, 1e-3)])
        g.add(f"op{i}", kind, deps, stream_class=stream, duration=duration)
    return g


def _costed(mixtral, link, backward=False):
    fwd = build_layer_graph(PLAN, mixtral.model, mixtral.precision)
    g = build_backward_graph(PLAN, mixtral.model, RematPolicy(), fwd) if backward else fwd
    return cost_graph(g, mixtral.cluster, mixtral.precision, mixtral.efficiency, link)


class TestRandomGraphs:
    def test_makespan_bounds(self):
        for seed in range(1000):
            g = _random_graph(seed)
            inter = schedule(g, "inter_op")
            serial = schedule(g, "serial")
            lower = critical_path_length(g)
            total = serial_sum(g)
            assert lower <= inter.makespan * (1 + 1e-9) + 1e-15
            assert inter.makespan <= total * (1 + 1e-9) + 1e-15
            assert serial.makespan == pytest.approx(total, rel=1e-9, abs=1e-15)
            assert inter.makespan <= serial.makespan * (1 + 1e-9) + 1e-15

    def test_no_violations(self):
        for seed in range(1000):
            g = _random_graph(seed)
            timeline = schedule(g, "inter_op")
            assert resource_violations(timeline) == []
            assert dependency_violations(g, timeline) == []
            assert len(timeline.events) == len(g.nodes)

    def test_deterministic(self):
        g = _random_graph(42)
        assert schedule(g) == schedule(g)


class TestBuiltGraphs:
    @pytest.mark.parametrize("backward", [False, True])
    def test_inter_op_not_slower(self, mixtral, link, backward):
        g = _costed(mixtral, link, backward)
        inter = schedule(g, "inter_op")
        serial = schedule(g, "serial")
        assert critical_path_length(g) <= inter.makespan * (1 + 1e-9)
        assert inter.makespan <= serial.makespan * (1 + 1e-9)
        assert resource_violations(inter) == []
        assert dependency_violations(g, inter) == []

    def test_backward_overlaps_remat(self, mixtral, link):
        g = _costed(mixtral, link, backward=True)
        assert schedule(g, "inter_op").makespan < schedule(g, "serial").makespan

    def test_breakdown_sums_to_makespan(self, mixtral, link):
        timeline = schedule(_costed(mixtral, link))
        assert sum(timeline.breakdown().values()) == pytest.approx(timeline.makespan)
        assert timeline.exposed_comm >= 0

    def test_serial_exposes_all_comm(self, mixtral, link):
        g = _costed(mixtral, link)
        comm = sum(node.duration for node in g.nodes.values() if node.stream_class != StreamClass.COMPUTE)
        assert schedule(g, "serial").exposed_comm == pytest.approx(comm)

    def test_custom_resources_share_lane(self, mixtral, link):
        g = _costed(mixtral, link)
        shared = {stream: "one" for stream in STREAMS}
        assert schedule(g, "inter_op", shared).makespan == pytest.approx(serial_sum(g))


class TestErrors:
    def test_uncosted_graph(self, mixtral):
        with pytest.raises(SchedulingError):
            schedule(build_layer_graph(PLAN, mixtral.model))

    def test_unknown_mode(self):
        with pytest.raises(SchedulingError):
            schedule(_random_graph(0), "greedy")

    def test_cycle(self):
        g = OpGraph("forward", PLAN)
        g.add("a", OpKind.GEMM, (1,), duration=1.0)
        g.add("b", OpKind.GEMM, (0,), duration=1.0)
        with pytest.raises(SchedulingError):
            schedule(g)
