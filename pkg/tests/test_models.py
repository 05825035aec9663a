"""Model specs, tap semantics, parameter counting, and checkpoints."""

import numpy as np
import pytest

from mlfd.errors import ConfigError, PreconditionError, ShapeError
from mlfd.models import (
    Model,
    ModelSpec,
    TapSet,
    build_model,
    count_params,
    forward_with_taps,
    load_model,
    make_model_spec,
    save_model,
)
from mlfd.numerics import Tensor, bias_add, gelu, matmul


def mlp_spec(classes=4):
    return make_model_spec("mlp-small", (32,), classes)


def cnn_spec(classes=4):
    return make_model_spec("cnn-small", (1, 16, 16), classes)


class TestSpec:
    def test_builds_deterministically(self):
        a = build_model(mlp_spec(), seed=5)
        b = build_model(mlp_spec(), seed=5)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert np.array_equal(pa.value.data, pb.value.data)

    def test_dense_weight_variance_target(self):
        # 8 -> 4 dense: Xavier variance 2/12, pooled over many seeds
        spec = ModelSpec.create((8,), [{"kind": "dense", "units": 4}], 2, [("top", 0)])
        samples = []
        for seed in range(400):
            m = build_model(spec, seed=seed)
            samples.append(m.layer_params[0]["weight"].value.data.ravel())
        var = np.concatenate(samples).var()
        target = 2.0 / 12.0
        assert abs(var - target) / target < 0.05

    def test_bad_tap_binding_rejected(self):
        with pytest.raises(ConfigError, match="nonexistent"):
            ModelSpec.create((8,), [{"kind": "dense", "units": 4}], 2, [("top", 3)])

    def test_incompatible_layers_named(self):
        layers = [{"kind": "dense", "units": 4}, {"kind": "conv", "channels": 2}]
        with pytest.raises(ConfigError, match="layer 1"):
            ModelSpec.create((8,), layers, 2, [("top", 0)])

    def test_tap_order_must_increase(self):
        with pytest.raises(ConfigError, match="increase"):
            TapSet((("a", 3), ("b", 1)))

    def test_spec_hash_stable_and_sensitive(self):
        a, b = cnn_spec(), cnn_spec()
        assert a.hash() == b.hash()
        c = make_model_spec("cnn-small", (1, 16, 16), 5)
        assert a.hash() != c.hash()

    def test_roundtrip_through_dict(self):
        spec = cnn_spec()
        again = ModelSpec.from_dict(spec.to_dict())
        assert again.hash() == spec.hash()


class TestForward:
    def test_empty_level_set_matches_plain_forward(self):
        model = build_model(mlp_spec(), seed=0)
        x = Tensor(np.random.default_rng(0).normal(size=(3, 32)))
        logits_a, embs = forward_with_taps(model, x)
        assert embs == {}
        logits_b, _ = forward_with_taps(model, x, levels=())
        assert np.array_equal(logits_a.data, logits_b.data)

    def test_top_tap_matches_layerwise_recomputation(self):
        model = build_model(mlp_spec(), seed=1)
        x = Tensor(np.random.default_rng(1).normal(size=(2, 32)))
        _, embs = forward_with_taps(model, x, levels=("top",))
        # independent recomputation: apply each dense+gelu pair by hand
        h = Tensor(x.data.reshape(2, -1))
        for i in (1, 3, 5, 7):
            params = model.layer_params[i]
            h = gelu(bias_add(matmul(h, params["weight"].value), params["bias"].value))
        assert np.allclose(embs["top"].data, h.data, atol=1e-12)

    def test_batch_leading_extent(self):
        model = build_model(cnn_spec(), seed=2)
        x = Tensor(np.random.default_rng(2).normal(size=(5, 1, 16, 16)))
        logits, embs = forward_with_taps(model, x, levels=("map16", "map8", "map4", "top"))
        assert logits.shape == (5, 4)
        for emb in embs.values():
            assert emb.shape[0] == 5
        assert embs["map4"].shape == (5, 32, 4, 4)
        assert embs["top"].shape == (5, 48)

    def test_unknown_level_rejected(self):
        model = build_model(cnn_spec(), seed=0)
        x = Tensor(np.zeros((1, 1, 16, 16)))
        with pytest.raises(ConfigError, match="nope"):
            forward_with_taps(model, x, levels=("nope",))

    def test_taps_are_pure_observations(self):
        model = build_model(cnn_spec(), seed=3)
        x = Tensor(np.random.default_rng(3).normal(size=(2, 1, 16, 16)))
        full_logits, full_embs = forward_with_taps(model, x, levels=("map16", "map8", "map4", "top"))
        sub_logits, sub_embs = forward_with_taps(model, x, levels=("map4",))
        assert np.array_equal(full_logits.data, sub_logits.data)
        assert np.array_equal(full_embs["map4"].data, sub_embs["map4"].data)

    def test_eval_forward_deterministic(self):
        spec = ModelSpec.create(
            (16,),
            [{"kind": "dense", "units": 8}, {"kind": "dropout", "p": 0.5}, {"kind": "gelu"}],
            3,
            [("top", 2)],
        )
        model = build_model(spec, seed=4)
        x = Tensor(np.random.default_rng(4).normal(size=(4, 16)))
        a, _ = forward_with_taps(model, x, mode="eval")
        b, _ = forward_with_taps(model, x, mode="eval")
        assert np.array_equal(a.data, b.data)

    def test_input_shape_checked(self):
        model = build_model(cnn_spec(), seed=0)
        with pytest.raises(ShapeError, match="forward"):
            forward_with_taps(model, Tensor(np.zeros((2, 1, 8, 8))))


class TestCountParams:
    def test_dense_with_bias(self):
        spec = ModelSpec.create((8,), [{"kind": "dense", "units": 4}], 2, [("top", 0)])
        model = build_model(spec, seed=0)
        # dense 8->4 (36) + head 4->2 (10)
        assert count_params(model) == 36 + 10

    def test_conv_with_bias(self):
        spec = ModelSpec.create(
            (1, 8, 8),
            [{"kind": "conv", "channels": 4, "kernel": 3, "padding": 1}, {"kind": "global_avg_pool"}],
            2,
            [("top", 1)],
        )
        model = build_model(spec, seed=0)
        # conv 1->4 3x3 (40) + head 4->2 (10)
        assert count_params(model) == 40 + 10

    def test_frozen_excluded(self):
        model = build_model(mlp_spec(), seed=0)
        model.freeze()
        assert count_params(model, exclude_frozen=True) == 0
        assert count_params(model) > 0


class TestCheckpoint:
    def test_save_load_bitwise(self, tmp_path):
        model = build_model(cnn_spec(), seed=9)
        # perturb running stats so the state round trip is non-trivial
        x = Tensor(np.random.default_rng(9).normal(size=(8, 1, 16, 16)))
        forward_with_taps(model, x, mode="train")
        save_model(model, tmp_path / "ckpt")
        back = load_model(tmp_path / "ckpt")
        assert back.spec.hash() == model.spec.hash()
        for (na, pa), (nb, pb) in zip(model.named_parameters(), back.named_parameters()):
            assert na == nb
            assert pa.value.data.tobytes() == pb.value.data.tobytes()
        for (na, sa), (nb, sb) in zip(model.named_state(), back.named_state()):
            assert sa.tobytes() == sb.tobytes()

    def test_spec_hash_mismatch_rejected(self, tmp_path):
        model = build_model(cnn_spec(classes=4), seed=0)
        save_model(model, tmp_path / "ckpt")
        with pytest.raises(PreconditionError, match="hash"):
            load_model(tmp_path / "ckpt", expected_spec=cnn_spec(classes=5))

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(PreconditionError, match="checkpoint"):
            load_model(tmp_path / "absent")


class TestArchLibrary:
    @pytest.mark.parametrize("arch", ["mlp-small", "cnn-small", "cnn-se"])
    def test_four_taps_ending_at_top(self, arch):
        shape = (32,) if arch == "mlp-small" else (1, 16, 16)
        spec = make_model_spec(arch, shape, 6)
        assert len(spec.taps.levels) == 4
        assert spec.taps.names[-1] == "top"
        model = build_model(spec, seed=0)
        batch = np.random.default_rng(0).normal(size=(2,) + shape)
        logits, embs = forward_with_taps(model, Tensor(batch), levels=spec.taps.names)
        assert logits.shape == (2, 6)
        assert len(embs) == 4

    def test_deepest_selection(self):
        spec = make_model_spec("cnn-small", (1, 16, 16), 4)
        two = spec.taps.deepest(2)
        assert two.names == ["map4", "top"]
