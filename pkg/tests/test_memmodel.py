from fractions import Fraction

import pytest

from core.errors import DomainError
from core.job_types import (
    AttnStrategy,
    EpPattern,
    FfnStrategy,
    ParallelismPlan,
    attention_params,
    expert_params,
)
from core.memmodel import (
    LAYER_ACTIVATIONS,
    RETAINED_ACTIVATIONS,
    RematPolicy,
    activation_coefficient,
    activation_full,
    activation_remat,
    activations_in_flight,
    param_state_memory,
    peak_memory,
    remat_reduction,
)

from .conftest import MODEL_NAMES, load_preset


def _plan(attn=AttnStrategy.SP, n=8, dp=4, pp=1, zero_stage=1):
    return ParallelismPlan(attn, FfnStrategy.EP, EpPattern.A2A, n, pp, 1, dp, zero_stage)


class TestActivationFormulas:
    def test_mixtral_8x7b_coefficients(self):
        bsh = 8192 * 4096
        assert activation_full(1, 8192, 4096, 8, 2, Fraction(7, 2), 4) == Fraction(217, 4) * bsh / 8
        assert activation_remat(1, 8192, 4096, 8, 2, Fraction(7, 2), 4) == Fraction(37, 2) * bsh / 8

    def test_mixtral_8x22b_full(self):
        coef = activation_full(1, 1, 8, 8, 2, Fraction(8, 3), 6)
        assert coef == Fraction(293, 6)

    def test_k_zero_drops_terms(self):
        assert activation_full(1, 1, 1, 8, 0, 5, 4) == (16 + 12 + Fraction(5, 4)) / 8
        assert activation_remat(1, 1, 1, 8, 0, 5, 4) == (4 + Fraction(2, 4)) / 8

    def test_coefficient_table_matches_closed_form(self):
        for n, k, f, m in [(8, 2, Fraction(7, 2), 4), (4, 6, Fraction(11, 16), 1), (3, 1, 2, 10)]:
            assert activation_coefficient(n, k, f, m) == activation_full(1, 1, n, n, k, f, m)
            assert activation_coefficient(n, k, f, m, RETAINED_ACTIVATIONS) == \
                activation_remat(1, 1, 1, n, k, f, m) * n

    def test_remat_strictly_smaller(self):
        for n in range(2, 17):
            for k in range(0, 9):
                for m in (1, 2, 4, 8):
                    for f in (Fraction(1, 2), Fraction(7, 2), 4):
                        assert activation_remat(1, 1, 1, n, k, f, m) < activation_full(1, 1, 1, n, k, f, m)

    def test_m_zero_rejected(self):
        with pytest.raises(DomainError):
            activation_full(1, 1, 1, 8, 2, 1, 0)

    @pytest.mark.parametrize("name", [name for name in MODEL_NAMES if name != "deepseekmoe"])
    def test_reduction_band(self, name):
        reduction = remat_reduction(load_preset(name).model, 8)
        assert Fraction(40, 100) <= reduction <= Fraction(3, 4)

    def test_deepseekmoe_reduction_exact(self):
        # 1 − 14.25/57.375，略高于 0.75
        reduction = remat_reduction(load_preset("deepseekmoe").model, 8)
        assert reduction == 1 - Fraction(57, 4) / Fraction(459, 8)
        assert reduction == Fraction(115, 153)

    def test_mixtral_reduction(self, mixtral):
        assert float(remat_reduction(mixtral.model, 8)) == pytest.approx(0.659, abs=1e-3)


class TestRematPolicy:
    def test_default_covers_all(self):
        policy = RematPolicy()
        assert policy.retained_set | policy.recompute_set == frozenset(LAYER_ACTIVATIONS)
        assert not policy.retained_set & policy.recompute_set

    def test_overlap_rejected(self):
        with pytest.raises(DomainError):
            RematPolicy(retained_set=frozenset({"fc1_out"}),
                        recompute_set=frozenset(LAYER_ACTIVATIONS))

    def test_missing_rejected(self):
        with pytest.raises(DomainError):
            RematPolicy(retained_set=frozenset({"fc1_out"}), recompute_set=frozenset({"fc2_in"}))


class TestParamState:
    def test_sp_replicates_attention(self, mixtral):
        model = mixtral.model
        sp = param_state_memory(_plan(AttnStrategy.SP), model)
        tp = param_state_memory(_plan(AttnStrategy.TP), model)
        delta = model.num_layers * attention_params(model) * Fraction(7, 8)
        assert sp.params - tp.params == delta * 2
        assert sp.grads - tp.grads == delta * 4

    def test_n_one_sp_equals_tp(self, mixtral):
        sp = param_state_memory(_plan(AttnStrategy.SP, n=1, dp=32), mixtral.model)
        tp = param_state_memory(_plan(AttnStrategy.TP, n=1, dp=32), mixtral.model)
        assert sp == tp

    def test_zero_stage_divides_optimizer(self, mixtral):
        zero = param_state_memory(_plan(zero_stage=0), mixtral.model)
        sharded = param_state_memory(_plan(zero_stage=1), mixtral.model)
        assert zero.optimizer == sharded.optimizer * 4
        assert zero.params == sharded.params

    def test_experts_sharded(self, mixtral):
        model = mixtral.model
        small = param_state_memory(_plan(n=4, dp=8), model)
        large = param_state_memory(_plan(n=8, dp=4), model)
        assert small.params > large.params
        assert expert_params(model) % 8 == 0

    @pytest.mark.parametrize("name", MODEL_NAMES)
    def test_sp_overhead_is_modest(self, name):
        model = load_preset(name).model
        sp = param_state_memory(_plan(AttnStrategy.SP), model)
        tp = param_state_memory(_plan(AttnStrategy.TP), model)
        overhead = (sum(sp) - sum(tp)) / sum(tp)
        assert 0 < overhead < Fraction(1, 2)


class TestPeakMemory:
    def test_dp_compress_transient(self, mixtral):
        plan = _plan()
        naive = peak_memory(plan, mixtral.model, dp_compress="naive")
        inplace = peak_memory(plan, mixtral.model, dp_compress="inplace")
        off = peak_memory(plan, mixtral.model, dp_compress="off")
        assert naive.transient_peak - inplace.transient_peak == naive.grads / 2
        assert inplace.transient_peak == off.transient_peak == 0

    def test_unknown_dp_compress(self, mixtral):
        with pytest.raises(DomainError):
            peak_memory(_plan(), mixtral.model, dp_compress="zip")

    def test_remat_ratio(self, mixtral):
        plan = _plan()
        on = peak_memory(plan, mixtral.model, remat=RematPolicy())
        off = peak_memory(plan, mixtral.model, remat=RematPolicy.disabled())
        assert on.activations / off.activations == Fraction(37, 2) / Fraction(217, 4)
        assert on.params == off.params
        assert on.optimizer == off.optimizer
        assert off.total - on.total == off.activations - on.activations

    def test_closed_form_sum(self, mixtral):
        model = mixtral.model
        plan = _plan()
        result = peak_memory(plan, model, remat=RematPolicy.disabled(), dp_compress="off", microbatches=1)
        state = param_state_memory(plan, model)
        activations = Fraction(217, 4) * model.seq_len * model.h / 8 * 2 * model.num_layers
        assert result.activations == activations
        assert result.total == state.params + state.grads + state.optimizer + activations

    def test_in_flight(self):
        assert activations_in_flight(1, 8) == 1
        assert activations_in_flight(4, 8) == 4
        assert activations_in_flight(4, 2) == 2

    def test_to_dict(self, mixtral):
        data = peak_memory(_plan(), mixtral.model).to_dict()
        assert set(data) == {"params", "grads", "optimizer", "activations", "transient_peak", "total"}
