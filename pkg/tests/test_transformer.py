import math

import numpy as np
import pytest

from structprune import GateMask, QaBatch, TransformerConfig, build_model, count_flops, count_params, evaluate, forward, qa_loss
from structprune.autodiff import Tensor
from structprune.errors import ConfigError, ContractError, DimensionError
from structprune.transformer import feed_forward, flop_breakdown

from .conftest import TINY, random_batch

# 64*32 + 32*32 + 2*32 embeddings, 2 * (4*(32*32+32) + 2*32 + 32*64+64 + 64*32+32 + 2*32) layers,
# 32*2 + 2 span head; summed by hand and by a separate script
TOY_PARAMS = 20290


def zeroed(model, names_and_slices):
    out = model.copy()
    for name, index in names_and_slices:
        out.params[name].data[index] = 0.0
    return out


class TestConfig:
    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError) as exc:
            TransformerConfig(d_model=30, n_heads=4)
        assert exc.value.field == "d_model"

    @pytest.mark.parametrize("field", ["n_layers", "d_ff", "vocab_size", "max_seq_len"])
    def test_dims_positive(self, field):
        with pytest.raises(ConfigError):
            TransformerConfig(**{field: 0})

    def test_dict_round_trip(self):
        assert TransformerConfig.from_dict(TINY.to_dict()) == TINY


class TestBuildModel:
    @pytest.mark.parametrize("heads,width,inner", [(12, 768, 3072), (16, 1024, 4096)])
    def test_bert_shaped_layers(self, heads, width, inner):
        cfg = TransformerConfig(n_layers=1, n_heads=heads, d_model=width, d_ff=inner, vocab_size=8, max_seq_len=4)
        m = build_model(cfg, seed=0)
        assert m.heads_layer == [heads]
        assert m.ff_layer == [inner]
        assert m["layers.0.attn.wq"].shape == (width, width)
        assert m["layers.0.ff.w1"].shape == (width, inner)

    def test_same_seed_bit_identical(self):
        a, b = build_model(TINY, 3), build_model(TINY, 3)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and pa.data.tobytes() == pb.data.tobytes()

    def test_different_seed_differs(self):
        assert not np.array_equal(build_model(TINY, 0)["qa.weight"].data, build_model(TINY, 1)["qa.weight"].data)

    def test_inconsistent_shapes_rejected(self, tiny_model):
        tiny_model.params["layers.1.ff.b1"] = Tensor(np.zeros(5, dtype=np.float32))
        with pytest.raises(ContractError):
            tiny_model.check_consistency()


class TestForward:
    def test_output_shape(self, tiny_model, tiny_batch):
        assert forward(tiny_model, tiny_batch).shape == (3, TINY.max_seq_len, 2)

    def test_all_ones_mask_is_identity(self, tiny_model, tiny_batch):
        a = forward(tiny_model, tiny_batch).data
        b = forward(tiny_model, tiny_batch, GateMask.ones(tiny_model)).data
        assert a.tobytes() == b.tobytes()

    def test_zero_ff_mask_leaves_bias_path(self, tiny_model, tiny_batch):
        mask = GateMask(ff=[np.ones(24, np.float32), np.zeros(24, np.float32)])
        oracle = zeroed(tiny_model, [("layers.1.ff.w2", slice(None))])
        np.testing.assert_allclose(
            forward(tiny_model, tiny_batch, mask).data, forward(oracle, tiny_batch).data, atol=1e-6
        )

    def test_zero_head_matches_zero_weights(self, tiny_model, tiny_batch):
        dh = TINY.head_dim
        h = 2
        gate = np.ones(4, np.float32)
        gate[h] = 0.0
        mask = GateMask(attn=[gate, np.ones(4, np.float32)])
        cols = slice(h * dh, (h + 1) * dh)
        oracle = zeroed(tiny_model, [("layers.0.attn.wo", cols)])
        diff = np.abs(forward(tiny_model, tiny_batch, mask).data - forward(oracle, tiny_batch).data).max()
        assert diff <= 1e-6

    def test_ff_gate_linear_at_sublayer(self, tiny_model):
        layer = tiny_model.layer(0)
        x = Tensor(np.random.default_rng(0).normal(size=(2, 5, TINY.d_model)).astype(np.float32))
        gate = np.zeros(TINY.d_ff, np.float32)
        idx = 7
        outs = {}
        for g in (0.0, 0.5, 1.0):
            gate[idx] = g
            outs[g] = feed_forward(layer, x, Tensor(gate.copy()), "gelu").data
        np.testing.assert_allclose(outs[0.5], 0.5 * (outs[0.0] + outs[1.0]), atol=1e-6)

    def test_head_permutation_invariance(self, tiny_model, tiny_batch):
        dh = TINY.head_dim
        perm = np.arange(TINY.d_model)
        a, b = slice(0, dh), slice(3 * dh, 4 * dh)
        perm[a], perm[b] = np.arange(3 * dh, 4 * dh), np.arange(0, dh)
        swapped = tiny_model.copy()
        for name in ("wq", "wk", "wv"):
            p = swapped.params[f"layers.1.attn.{name}"]
            p.data = p.data[:, perm]
        for name in ("bq", "bk", "bv"):
            p = swapped.params[f"layers.1.attn.{name}"]
            p.data = p.data[perm]
        p = swapped.params["layers.1.attn.wo"]
        p.data = p.data[perm, :]
        diff = np.abs(forward(tiny_model, tiny_batch).data - forward(swapped, tiny_batch).data).max()
        assert diff <= 1e-6

    def test_sequence_too_long(self, tiny_model):
        with pytest.raises(DimensionError):
            forward(tiny_model, np.zeros((1, TINY.max_seq_len + 1), dtype=np.int64))

    def test_mask_layer_mismatch_names_layer(self, tiny_model, tiny_batch):
        mask = GateMask(ff=[np.ones(24, np.float32), np.ones(23, np.float32)])
        with pytest.raises(DimensionError, match="layer 1"):
            forward(tiny_model, tiny_batch, mask)


class TestQaLoss:
    def batch(self, n, seq, starts=None, ends=None):
        starts = np.zeros(n, int) if starts is None else np.asarray(starts)
        ends = np.zeros(n, int) if ends is None else np.asarray(ends)
        return QaBatch(np.zeros((n, seq), dtype=np.int64), starts, ends)

    def test_uniform(self):
        loss = qa_loss(Tensor(np.zeros((2, 8, 2), np.float32)), self.batch(2, 8, [1, 5], [2, 7]))
        assert loss.item() == pytest.approx(math.log(8), abs=1e-6)

    def test_saturated(self):
        logits = np.zeros((1, 8, 2), np.float32)
        logits[0, 3, 0] = logits[0, 4, 1] = 1000.0
        assert qa_loss(Tensor(logits), self.batch(1, 8, [3], [4])).item() == pytest.approx(0.0, abs=1e-6)

    def test_batch_mean(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(2, 6, 2)).astype(np.float32)
        full = self.batch(2, 6, [1, 2], [3, 4])
        a = qa_loss(Tensor(logits[:1]), full.subset([0])).item()
        b = qa_loss(Tensor(logits[1:]), full.subset([1])).item()
        assert qa_loss(Tensor(logits), full).item() == pytest.approx((a + b) / 2, abs=1e-6)


class TestAccounting:
    def test_toy_param_count(self):
        assert count_params(build_model(TransformerConfig(), 0)) == TOY_PARAMS

    def test_halved_ff_halves_ff_flops(self):
        full = build_model(TINY, 0)
        half = build_model(TransformerConfig(**{**TINY.to_dict(), "d_ff": 12}), 0)
        for a, b in zip(flop_breakdown(full, 8), flop_breakdown(half, 8)):
            assert b["feed_forward"] * 2 == a["feed_forward"]
            assert b["attention"] == a["attention"]

    def test_flops_scale_with_batch(self, tiny_model):
        assert count_flops(tiny_model, 8, batch=4) == 4 * count_flops(tiny_model, 8)


class TestEvaluate:
    def test_constant_logits_predict_position_zero(self, tiny_model):
        tiny_model.params["qa.weight"].data[:] = 0.0
        data = QaBatch(np.ones((10, 8), dtype=np.int64), np.zeros(10, int), np.zeros(10, int))
        assert evaluate(tiny_model, data)["span_exact_match"] == 1.0

    def test_untrained_start_accuracy_is_chance(self):
        cfg = TransformerConfig(max_seq_len=32)
        data = random_batch(cfg, 2000, seed=1, seq_len=32)
        acc = evaluate(build_model(cfg, 0), data)["start_acc"]
        p = 1 / 32
        assert abs(acc - p) <= 3 * math.sqrt(p * (1 - p) / 2000)

    def test_duplication_and_order_invariance(self, tiny_model):
        data = random_batch(TINY, 40, seed=2)
        base = evaluate(tiny_model, data)
        assert evaluate(tiny_model, data.concat(data)) == base
        perm = np.random.default_rng(0).permutation(40)
        assert evaluate(tiny_model, data.subset(perm)) == base

    def test_empty_rejected(self, tiny_model):
        with pytest.raises(ContractError):
            evaluate(tiny_model, random_batch(TINY, 5).subset([]))
