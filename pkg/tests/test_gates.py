import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structprune import GateMask, QaBatch, TransformerConfig, build_model
from structprune import gates as G
from structprune.autodiff import Tensor
from structprune.errors import ConfigError, ContractError

from .conftest import TINY, random_batch

BETA, LOW, HIGH = 2.0 / 3.0, -0.1, 1.1
# scipy.integrate.quad of the clamped stretched-concrete value over u in (0, 1)
HC_MEAN = {-2.0: 0.1426761030, 0.0: 0.5, 2.0: 0.8573238970}
# same quadrature over the indicator of a clamped-at-1 sample
HC_P_ONE = {-2.0: 0.0266333446, 0.0: 0.1681778159, 2.0: 0.5990247353}


def hc(values, **kw):
    return G.HardConcreteGates([np.asarray(values, dtype=np.float64)], **kw)


class TestRandomGates:
    def test_p_one_keeps_all(self, tiny_model):
        mask = G.random_gates(tiny_model, 1.0, seed=0)
        assert mask.popcounts("attn") == [4, 4] and mask.popcounts("ff") == [24, 24]

    def test_p_zero_hits_guard(self, tiny_model):
        mask = G.random_gates(tiny_model, 0.0, seed=0)
        assert mask.popcounts("attn") == [1, 1] and mask.popcounts("ff") == [1, 1]
        assert len(mask.guard_events) == 4

    def test_half_over_ten_thousand(self):
        mask = G.random_gates(([100] * 10, [900] * 10), 0.5, seed=3)
        kept = sum(mask.popcounts("attn")) + sum(mask.popcounts("ff"))
        assert abs(kept / 10_000 - 0.5) <= 0.02

    def test_deterministic(self, tiny_model):
        a = G.random_gates(tiny_model, 0.4, seed=5)
        b = G.random_gates(tiny_model, 0.4, seed=5)
        assert all(np.array_equal(x, y) for x, y in zip(a.ff, b.ff))

    @pytest.mark.parametrize("p", [-0.1, 1.5])
    def test_bad_p(self, tiny_model, p):
        with pytest.raises(ConfigError):
            G.random_gates(tiny_model, p)


class TestGain:
    def test_dead_head_scores_zero(self, tiny_model):
        dh = TINY.head_dim
        tiny_model.params["layers.0.attn.wo"].data[dh : 2 * dh] = 0.0
        tiny_model.params["layers.0.attn.wv"].data[:, dh : 2 * dh] = 0.0
        tiny_model.params["layers.0.attn.bv"].data[dh : 2 * dh] = 0.0
        scores = G.gain_scores(tiny_model, random_batch(TINY, 12))
        assert scores.attn[0][1] == 0.0
        assert np.all(scores.attn[0][[0, 2, 3]] > 0)

    def test_single_gate_toy_graph(self):
        # L = gamma * w * x with gamma = 1 -> dL/dgamma = w * x
        w, x = -1.5, 2.0
        gate = Tensor(np.ones(1, np.float32), requires_grad=True)
        (gate * (w * x)).sum().backward()
        assert abs(gate.grad[0]) == pytest.approx(abs(w * x))

    def test_duplicate_and_shuffle_invariance(self, tiny_model):
        data = random_batch(TINY, 24, seed=1)
        base = G.gain_scores(tiny_model, data, batch_size=24)
        doubled = G.gain_scores(tiny_model, data.concat(data), batch_size=24)
        shuffled = G.gain_scores(tiny_model, data.subset(np.random.default_rng(0).permutation(24)), batch_size=24)
        for fam in G.FAMILIES:
            for a, b, c in zip(base.get(fam), doubled.get(fam), shuffled.get(fam)):
                np.testing.assert_allclose(a, b, rtol=1e-6)
                np.testing.assert_allclose(a, c, rtol=1e-5, atol=1e-9)

    def test_weights_untouched(self, tiny_model):
        before = {n: p.data.copy() for n, p in tiny_model.named_parameters()}
        G.gain_scores(tiny_model, random_batch(TINY, 6))
        for n, p in tiny_model.named_parameters():
            assert np.array_equal(before[n], p.data)
            assert p.requires_grad

    def test_empty_data(self, tiny_model):
        with pytest.raises(ContractError):
            G.gain_scores(tiny_model, random_batch(TINY, 3).subset([]))

    def test_scores_non_negative(self, tiny_model):
        scores = G.gain_scores(tiny_model, random_batch(TINY, 6))
        assert all(np.all(s >= 0) for fam in G.FAMILIES for s in scores.get(fam))


class TestThreshold:
    def test_keep_all(self):
        scores = G.ImportanceScores(attn=[np.array([0.1, 0.3])], ff=[np.array([0.5, 0.2, 0.9])])
        mask = G.threshold_scores(scores, 1.0)
        assert mask.popcounts("attn") == [2] and mask.popcounts("ff") == [3]

    def test_top_quarter(self):
        scores = G.ImportanceScores(ff=[np.arange(8.0)])
        mask = G.threshold_scores(scores, 0.25, families=("ff",))
        np.testing.assert_array_equal(mask.ff[0], [0, 0, 0, 0, 0, 0, 1, 1])

    def test_global_across_layers(self):
        scores = G.ImportanceScores(ff=[np.array([0.0, 5.0, 1.0, 2.0]), np.array([6.0, 7.0, 3.0, 4.0])])
        mask = G.threshold_scores(scores, 0.5, families=("ff",))
        np.testing.assert_array_equal(mask.ff[0], [0, 1, 0, 0])
        np.testing.assert_array_equal(mask.ff[1], [1, 1, 0, 1])

    def test_ties_by_position(self):
        scores = G.ImportanceScores(ff=[np.ones(6)])
        mask = G.threshold_scores(scores, 0.5, families=("ff",))
        np.testing.assert_array_equal(mask.ff[0], [1, 1, 1, 0, 0, 0])

    def test_guard_uses_best_local_score(self):
        scores = G.ImportanceScores(ff=[np.array([0.1, 0.3, 0.2]), np.array([5.0, 6.0, 7.0])])
        mask = G.threshold_scores(scores, 0.5, families=("ff",))
        np.testing.assert_array_equal(mask.ff[0], [0, 1, 0])
        assert mask.guard_events == [("ff", 0)]

    @pytest.mark.parametrize("k", [0.0, 1.2])
    def test_bad_fraction(self, k):
        with pytest.raises(ConfigError):
            G.threshold_scores(G.ImportanceScores(ff=[np.ones(2)]), k)


class TestHardConcrete:
    def test_constant_validation(self):
        with pytest.raises(ConfigError):
            hc([0.0], gamma_low=0.1)
        with pytest.raises(ConfigError):
            hc([0.0], zeta=0.9)
        with pytest.raises(ConfigError):
            hc([0.0], beta=0.0)

    def test_saturation(self):
        rng = np.random.default_rng(0)
        hi = G.sample_hard_concrete(hc(np.full(1000, 50.0)), rng)[0].data
        lo = G.sample_hard_concrete(hc(np.full(1000, -50.0)), rng)[0].data
        assert np.all(hi == 1.0) and np.all(lo == 0.0)

    @pytest.mark.parametrize("la", [-2.0, 0.0, 2.0])
    def test_monte_carlo_matches_quadrature(self, la):
        rng = np.random.default_rng(11)
        draws = G.sample_hard_concrete(hc(np.full(100_000, la)), rng)[0].data
        assert abs(draws.mean() - HC_MEAN[la]) <= 0.01
        assert abs((draws == 1.0).mean() - HC_P_ONE[la]) <= 0.01
        assert float(G.prob_gate_one(hc([la]))[0].data[0]) == pytest.approx(HC_P_ONE[la], abs=1e-6)

    def test_half_probability_point(self):
        la = BETA * math.log(11)
        assert float(G.prob_gate_one(hc([la]))[0].data[0]) == pytest.approx(0.5, abs=1e-7)

    def test_samples_differentiable(self):
        gates = hc(np.zeros(5))
        draws = G.sample_hard_concrete(gates, np.random.default_rng(0))
        draws[0].sum().backward()
        assert gates.log_alpha[0].grad is not None and np.any(gates.log_alpha[0].grad != 0)

    def test_probability_monotone(self):
        la = np.linspace(-8, 8, 41)
        p = G.prob_gate_one(hc(la))[0].data
        assert np.all(np.diff(p) > 0)
        assert float(G.prob_gate_one(hc([-60.0]))[0].data[0]) < 1e-20

    def test_nonzero_penalty_mode(self):
        gates = hc([0.0, 2.0], penalty="nonzero")
        # P(gate != 0) from the same quadrature: 0.8318 and 0.9734
        np.testing.assert_allclose(G.expected_active(gates)[0].data, [0.8318221841, 0.9733666554], atol=1e-6)


class TestPenalty:
    def test_zero_weights(self):
        task = Tensor(np.float64(1.25), requires_grad=True)
        out = G.penalized_objective(task, hc([0.0]), hc([0.0]), G.PenaltyWeights(0, 0))
        assert out is task

    def test_closed_form_example(self):
        la = BETA * math.log(11)
        gates = hc(np.full(4, la))
        task = Tensor(np.float64(0.0), requires_grad=True)
        out = G.penalized_objective(task, gates, None, G.PenaltyWeights(lambda_attn=2.0))
        assert out.item() == pytest.approx(4.0, abs=1e-6)

    def test_vanishes_for_closed_gates(self):
        task = Tensor(np.float64(0.0), requires_grad=True)
        out = G.penalized_objective(task, hc(np.full(3, -80.0)), None, G.PenaltyWeights(1.0))
        assert out.item() < 1e-20

    def test_gradient_positive_everywhere(self):
        la = np.linspace(-6, 6, 13)
        gates = hc(la)
        task = Tensor(np.float64(0.0), requires_grad=True)
        G.penalized_objective(task, gates, None, G.PenaltyWeights(1.0)).backward()
        assert np.all(gates.log_alpha[0].grad > 0)
        # central differences of the closed form, evaluated in float64 numpy
        offset = BETA * math.log(11)
        closed = lambda x: 1.0 / (1.0 + np.exp(-(x - offset)))  # noqa: E731
        h = 1e-5
        num = (closed(la + h) - closed(la - h)) / (2 * h)
        np.testing.assert_allclose(gates.log_alpha[0].grad, num, rtol=1e-4)

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            G.PenaltyWeights(lambda_ff=-1.0)


class TestFinalize:
    def test_open(self):
        assert G.finalize_gates(hc(np.full(4, 10.0))).popcounts("attn") == [4]

    def test_closed_hits_guard(self):
        mask = G.finalize_gates(hc(np.full(4, -10.0)), family="ff")
        assert mask.popcounts("ff") == [1] and mask.guard_events == [("ff", 0)]

    def test_mixed(self):
        mask = G.finalize_gates(hc([-10.0, 10.0, -10.0, 10.0]))
        np.testing.assert_array_equal(mask.attn[0], [0, 1, 0, 1])

    @settings(max_examples=50, deadline=None)
    @given(
        la=st.lists(st.floats(-6, 6).filter(lambda v: abs(v) > 1e-3), min_size=1, max_size=12),
        scale=st.floats(0.05, 20.0),
    )
    def test_positive_scaling_keeps_retained_set(self, la, scale):
        a = G.finalize_gates(hc(la))
        b = G.finalize_gates(hc(np.asarray(la) * scale))
        np.testing.assert_array_equal(a.attn[0], b.attn[0])


def toy_task(n=48, seq=8, seed=0):
    rng = np.random.default_rng(seed)
    ids = rng.integers(3, TINY.vocab_size, size=(n, seq))
    return QaBatch(ids, rng.integers(0, seq, size=n), rng.integers(0, seq, size=n))


class TestTrainGatesL0:
    def cfg(self, **kw):
        return G.GateTrainConfig(**{"batch_size": 8, **kw})

    def test_requires_frozen_model(self, tiny_model):
        with pytest.raises(ContractError):
            G.train_gates_l0(tiny_model, toy_task(), G.PenaltyWeights(1.0, 1.0), self.cfg())

    def test_distillation_needs_teacher(self, tiny_model):
        with pytest.raises(ContractError):
            G.train_gates_l0(tiny_model.freeze(), toy_task(), G.PenaltyWeights(), self.cfg(objective="distillation"))

    def test_more_than_one_epoch_rejected(self):
        with pytest.raises(ConfigError):
            G.GateTrainConfig(epochs=1.5)

    def test_reproducible(self, tiny_model):
        frozen = tiny_model.freeze()
        args = (frozen, toy_task(), G.PenaltyWeights(0.05, 0.01), self.cfg(seed=4))
        a = G.finalize_mask(*G.train_gates_l0(*args))
        b = G.finalize_mask(*G.train_gates_l0(*args))
        for fam in G.FAMILIES:
            for x, y in zip(getattr(a, fam), getattr(b, fam)):
                assert x.tobytes() == y.tobytes()

    def test_zero_penalty_keeps_nearly_all(self, tiny_model):
        ga, gf = G.train_gates_l0(tiny_model.freeze(), toy_task(), G.PenaltyWeights(0, 0), self.cfg())
        mask = G.finalize_mask(ga, gf)
        kept = sum(mask.popcounts("attn")) + sum(mask.popcounts("ff"))
        assert kept / (8 + 48) >= 0.95

    def test_huge_penalty_collapses_to_guard(self, tiny_model):
        # Adam moves log_alpha about lr per step, so the run needs enough steps to cross 0
        ga, gf = G.train_gates_l0(tiny_model.freeze(), toy_task(n=320), G.PenaltyWeights(1e6, 1e6), self.cfg())
        mask = G.finalize_mask(ga, gf)
        assert mask.popcounts("attn") == [1, 1] and mask.popcounts("ff") == [1, 1]

    def test_model_weights_untouched(self, tiny_model):
        before = {n: p.data.copy() for n, p in tiny_model.named_parameters()}
        G.train_gates_l0(tiny_model.freeze(), toy_task(), G.PenaltyWeights(0.1, 0.1), self.cfg())
        assert all(np.array_equal(before[n], p.data) for n, p in tiny_model.named_parameters())

    def test_single_family(self, tiny_model):
        ga, gf = G.train_gates_l0(tiny_model.freeze(), toy_task(), G.PenaltyWeights(0.1), self.cfg(), families=("attn",))
        assert gf is None and len(ga.log_alpha) == 2
        assert G.finalize_mask(ga, gf).ff is None

    def test_data_fraction_shortens_run(self, tiny_model):
        ga, _ = G.train_gates_l0(
            tiny_model.freeze(), toy_task(), G.PenaltyWeights(0.1), self.cfg(data_fraction=0.25), families=("attn",)
        )
        assert len(ga.history) == 2  # 12 of 48 examples at batch 8

    def test_distillation_objective_runs(self, tiny_model):
        teacher = build_model(TINY, 1)
        ga, gf = G.train_gates_l0(
            tiny_model.freeze(), toy_task(), G.PenaltyWeights(0.1, 0.1), self.cfg(objective="distillation"), teacher=teacher
        )
        assert G.finalize_mask(ga, gf).is_binary()
