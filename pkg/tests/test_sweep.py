import psutil
import pytest

from core.errors import ConfigValidationError, UnknownAxisError
from core.sweep_runner import SWEEP_COLUMNS, SweepRunner, default_workers, parse_axis, run_sweep

from .conftest import load_preset


def _runner(loaded, workers=None):
    return SweepRunner(loaded.model, loaded.cluster, loaded.precision, loaded.job, loaded.link,
                       loaded.efficiency, workers)


class TestParseAxis:
    def test_inclusive_range(self):
        axis = parse_axis("top_k=1:8")
        assert axis.name == "top_k"
        assert axis.values == tuple(range(1, 9))
        assert axis.columns == SWEEP_COLUMNS["top_k"]

    def test_range_with_step(self):
        assert parse_axis("n=1:8:2").values == (1, 3, 5, 7)

    def test_list(self):
        assert parse_axis("h_ffn=1024, 2048,4096").values == (1024, 2048, 4096)

    def test_reversed_range_is_empty(self):
        assert parse_axis("n=8:2").values == ()

    def test_unknown_axis(self):
        with pytest.raises(UnknownAxisError):
            parse_axis("seq_len=1:4")

    @pytest.mark.parametrize("spec", ["n", "n=", "n=a:b", "n=1:2:0", "n=1:2:3:4", "n=2,x"])
    def test_malformed(self, spec):
        with pytest.raises(ConfigValidationError) as info:
            parse_axis(spec)
        assert info.value.field_path == "sweep"


class TestWorkers:
    def test_bounded_by_points(self):
        assert default_workers(1) == 1

    def test_bounded_by_cores(self):
        cores = psutil.cpu_count(logical=False) or 1
        assert default_workers(10_000) == cores


class TestSweepRunner:
    def test_top_k_crossover(self, mixtral):
        rows = _runner(mixtral, 4).run(parse_axis("top_k=1:8"))
        assert [r["top_k"] for r in rows] == list(range(1, 9))
        assert [r["selected"] for r in rows] == ["a2a"] * 5 + ["ag_rs"] * 3
        assert len({r["ep_ag_rs_time"] for r in rows}) == 1

    def test_n_axis_ratio(self, mixtral):
        rows = _runner(mixtral).run(parse_axis("n=2:8"))
        for row in rows:
            assert (row["R"] - row["R_approx"]) / row["R"] == pytest.approx(1 / row["n"])
            assert set(row) == set(SWEEP_COLUMNS["n"])

    def test_h_ffn_axis(self, mixtral):
        rows = _runner(mixtral).run(parse_axis("h_ffn=7168,14336"))
        assert rows[1]["R"] == pytest.approx(2 * rows[0]["R"])
        assert rows[0]["n"] == mixtral.cluster.gpus_per_node

    def test_num_nodes_axis(self):
        loaded = load_preset(overrides=["model.num_layers=2"])
        rows = _runner(loaded).run(parse_axis("num_nodes=1,2,4"))
        assert [r["total_gpus"] for r in rows] == [8, 16, 32]
        assert [r["dp"] for r in rows] == [1, 2, 4]
        assert all(r["plan"] == "SP+EP(a2a)" for r in rows)
        assert all(r["iteration_time"] > 0 and 0 < r["mfu"] < 1 for r in rows)

    def test_attn_param_axis(self, mixtral):
        rows = _runner(mixtral).run(parse_axis("attn_param_mb=384:1536:384"))
        assert [r["attn_param_mb"] for r in rows] == [384, 768, 1152, 1536]
        for row in rows:
            assert set(row) == set(SWEEP_COLUMNS["attn_param_mb"])
            assert row["n"] == 8 and row["dp"] == 4
            assert row["sp_sync_time"] > row["tp_sync_time"] > 0
            assert row["sp_extra_time"] == pytest.approx(row["sp_sync_time"] - row["tp_sync_time"])
            # 节点间体积相同，SP 只多出节点内 RS / AG
            assert row["inter_bytes"] == pytest.approx(2 * row["attn_param_mb"] * 2 ** 20 / 8 * 3 / 4)
            assert row["sp_intra_bytes"] == pytest.approx(2 * row["attn_param_mb"] * 2 ** 20 * 7 / 8)
        assert rows[3]["tp_sync_time"] > rows[0]["tp_sync_time"]

    def test_attn_param_axis_rejects_zero(self, mixtral):
        with pytest.raises(ConfigValidationError):
            _runner(mixtral).run(parse_axis("attn_param_mb=0"))

    def test_empty_axis(self, mixtral):
        runner = _runner(mixtral)
        assert runner.run(parse_axis("n=8:2")) == []
        assert runner.jobs == []

    def test_first_failure_by_index(self, mixtral):
        runner = _runner(mixtral, 3)
        with pytest.raises(ConfigValidationError) as info:
            runner.run(parse_axis("top_k=2,9,10"))
        assert info.value.field_path == "model.top_k"
        assert [job.status for job in runner.jobs] == ["completed", "failed", "failed"]

    def test_rows_independent_of_workers(self, mixtral):
        axis = parse_axis("top_k=1:8")
        assert _runner(mixtral, 1).run(axis) == _runner(mixtral, 8).run(axis)

    def test_run_sweep(self, mixtral):
        axis, rows = run_sweep("n=2,4", mixtral.model, mixtral.cluster, mixtral.precision)
        assert axis.values == (2, 4)
        assert len(rows) == 2
