import numpy as np
import pytest

from msamseg import model as M
from msamseg.model import (
    CheckpointError,
    ConfigError,
    ModelConfig,
    build_model,
    forward_graph,
    gate_skip,
    inject_attention_override,
    load_checkpoint,
    model_forward,
    msam_forward,
    predict_mask,
    save_checkpoint,
)
from msamseg.tensor import ShapeError, Tensor

SMALL = ModelConfig(backbone_input="ct", msam_input="pet", depth=2,
                    base_width=4, input_size=(16, 16))


def inputs(rng, n=1, size=(16, 16)):
    h, w = size
    pet = rng.random((n, 1, h, w)).astype(np.float32)
    ct = rng.random((n, 1, h, w)).astype(np.float32)
    return pet, ct


# ---------------------------------------------------------------------------
# configuration

class TestModelConfig:
    def test_invalid_backbone_input(self):
        with pytest.raises(ConfigError):
            ModelConfig(backbone_input="mri")

    def test_invalid_msam_input(self):
        with pytest.raises(ConfigError):
            ModelConfig(msam_input="ct")

    def test_input_size_divisibility(self):
        with pytest.raises(ConfigError):
            ModelConfig(depth=3, input_size=(20, 64))

    def test_channel_counts(self):
        assert ModelConfig(backbone_input="petct").backbone_channels() == 2
        assert ModelConfig(backbone_input="ct").backbone_channels() == 1
        assert ModelConfig(msam_input="petct").msam_channels() == 2

    def test_msam_enabled_flag(self):
        assert not ModelConfig(msam_input="off").msam_enabled
        assert ModelConfig(msam_input="pet").msam_enabled


# ---------------------------------------------------------------------------
# initialization

class TestBuildModel:
    def test_deterministic_for_seed(self):
        a = build_model(SMALL, seed=5)
        b = build_model(SMALL, seed=5)
        assert a.names() == b.names()
        for n in a.names():
            assert np.array_equal(a[n].data, b[n].data)

    def test_different_seeds_differ(self):
        a = build_model(SMALL, seed=5)
        b = build_model(SMALL, seed=6)
        assert not np.array_equal(a["backbone/enc0/conv0/w"].data,
                                  b["backbone/enc0/conv0/w"].data)

    def test_backbone_values_independent_of_attention_branch(self):
        with_attn = build_model(SMALL, seed=9)
        without = build_model(ModelConfig(backbone_input="ct", msam_input="off",
                                          depth=2, base_width=4, input_size=(16, 16)),
                              seed=9)
        for n in without.names():
            assert np.array_equal(with_attn[n].data, without[n].data), n

    def test_biases_start_at_zero(self):
        params = build_model(SMALL, seed=0)
        for n, t in params.items():
            if n.endswith("/b"):
                assert np.all(t.data == 0), n

    def test_weight_scale_tracks_fan_in(self):
        # He-normal: sample std of a large weight tensor approximates sqrt(2/fan_in)
        cfg = ModelConfig(backbone_input="ct", msam_input="off", depth=1,
                          base_width=64, input_size=(8, 8))
        params = build_model(cfg, seed=3)
        w = params["backbone/enc0/conv1/w"].data  # fan_in = 64*9
        expect = np.sqrt(2.0 / (64 * 9))
        assert abs(w.std() - expect) / expect < 0.05

    def test_no_attention_params_when_disabled(self):
        cfg = ModelConfig(msam_input="off", depth=2, base_width=4, input_size=(16, 16))
        assert all(n.startswith("backbone/") for n in build_model(cfg, 0).names())

    def test_parameter_count_matches_shape_sum(self):
        params = build_model(SMALL, seed=0)
        assert params.count() == sum(t.data.size for _, t in params.items())


# ---------------------------------------------------------------------------
# forward pass

class TestForward:
    def test_output_shapes(self):
        rng = np.random.default_rng(0)
        params = build_model(SMALL, seed=1)
        pet, ct = inputs(rng, n=2)
        probs, attn = model_forward(params, pet, ct)
        assert probs.shape == (2, 2, 16, 16)
        assert attn.shape == (2, 1, 16, 16)

    def test_probabilities_normalized(self):
        rng = np.random.default_rng(1)
        params = build_model(SMALL, seed=1)
        probs, _ = model_forward(params, *inputs(rng))
        assert np.abs(probs.sum(axis=1) - 1).max() < 1e-6

    def test_attention_nonnegative(self):
        rng = np.random.default_rng(2)
        params = build_model(SMALL, seed=2)
        _, attn = model_forward(params, *inputs(rng))
        assert attn.min() >= 0

    def test_no_attention_when_disabled(self):
        cfg = ModelConfig(msam_input="off", depth=2, base_width=4, input_size=(16, 16))
        rng = np.random.default_rng(3)
        _, attn = model_forward(build_model(cfg, 0), *inputs(rng))
        assert attn is None

    def test_ct_backbone_ignores_pet_outside_attention(self):
        """With the attention map pinned, a CT-input backbone must not react
        to PET changes."""
        rng = np.random.default_rng(4)
        params = build_model(SMALL, seed=4)
        pet, ct = inputs(rng)
        pet2 = pet + 1.0
        override = np.full((1, 1, 16, 16), 0.7, np.float32)
        with inject_attention_override(override):
            a, _ = model_forward(params, pet, ct)
            b, _ = model_forward(params, pet2, ct)
        assert np.array_equal(a, b)

    def test_pet_changes_output_through_attention(self):
        rng = np.random.default_rng(5)
        params = build_model(SMALL, seed=5)
        pet, ct = inputs(rng)
        a, _ = model_forward(params, pet, ct)
        b, _ = model_forward(params, pet + 1.0, ct)
        assert not np.array_equal(a, b)

    def test_shape_mismatch_rejected(self):
        params = build_model(SMALL, seed=0)
        with pytest.raises(Exception):
            model_forward(params, np.zeros((1, 1, 16, 16), np.float32),
                          np.zeros((1, 1, 8, 8), np.float32))

    def test_msam_forward_requires_enabled(self):
        cfg = ModelConfig(msam_input="off", depth=2, base_width=4, input_size=(16, 16))
        with pytest.raises(ConfigError):
            msam_forward(build_model(cfg, 0), np.zeros((1, 1, 16, 16), np.float32))

    def test_override_with_disabled_attention_rejected(self):
        cfg = ModelConfig(msam_input="off", depth=2, base_width=4, input_size=(16, 16))
        params = build_model(cfg, 0)
        rng = np.random.default_rng(6)
        with inject_attention_override(np.ones((1, 1, 16, 16), np.float32)):
            with pytest.raises(ConfigError):
                model_forward(params, *inputs(rng))


# ---------------------------------------------------------------------------
# gating algebra

class TestGating:
    def test_unit_map_is_bitwise_identity(self):
        rng = np.random.default_rng(7)
        params = build_model(SMALL, seed=7)
        pet, ct = inputs(rng)
        plain_cfg = ModelConfig(backbone_input="ct", msam_input="off", depth=2,
                                base_width=4, input_size=(16, 16))
        plain = M.NetworkParams(plain_cfg, [(n, t) for n, t in params.items()
                                            if n.startswith("backbone/")])
        ungated, _ = model_forward(plain, pet, ct)
        with inject_attention_override(np.ones((1, 1, 16, 16), np.float32)):
            gated, _ = model_forward(params, pet, ct)
        assert np.array_equal(ungated, gated)

    def test_zero_map_zeroes_skip_features(self):
        rng = np.random.default_rng(8)
        skip = Tensor(rng.standard_normal((1, 4, 8, 8)).astype(np.float32))
        zero = Tensor(np.zeros((1, 1, 16, 16), np.float32))
        assert np.all(gate_skip(skip, zero).data == 0)

    def test_homogeneity_in_the_map(self):
        rng = np.random.default_rng(9)
        skip = Tensor(rng.standard_normal((1, 4, 8, 8)).astype(np.float64))
        m = Tensor(rng.random((1, 1, 16, 16)))
        alpha = 1.625  # exactly representable
        a = gate_skip(skip, Tensor(alpha * m.data)).data
        b = alpha * gate_skip(skip, m).data
        assert np.abs(a - b).max() < 1e-12

    def test_map_resized_to_skip_resolution(self):
        rng = np.random.default_rng(10)
        skip = Tensor(rng.standard_normal((1, 4, 4, 4)).astype(np.float32))
        m = Tensor(np.full((1, 1, 16, 16), 0.5, np.float32))
        out = gate_skip(skip, m)
        assert out.shape == (1, 4, 4, 4)
        np.testing.assert_allclose(out.data, 0.5 * skip.data, rtol=1e-6)


# ---------------------------------------------------------------------------
# prediction

class TestPredictMask:
    def test_threshold(self):
        probs = np.zeros((1, 2, 1, 3))
        probs[0, 1] = [0.49, 0.5, 0.51]
        probs[0, 0] = 1 - probs[0, 1]
        np.testing.assert_array_equal(predict_mask(probs)[0, 0], [[0, 0, 1]])

    def test_output_dtype_and_shape(self):
        out = predict_mask(np.full((2, 2, 4, 4), 0.5))
        assert out.dtype == np.uint8 and out.shape == (2, 1, 4, 4)

    def test_bad_shape_rejected(self):
        with pytest.raises(ShapeError):
            predict_mask(np.zeros((1, 3, 4, 4)))


# ---------------------------------------------------------------------------
# checkpoints

class TestCheckpoints:
    def test_round_trip_bitwise(self, tmp_path):
        params = build_model(SMALL, seed=11)
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, params, meta={"note": "x"})
        loaded, meta, opt = load_checkpoint(p)
        assert meta == {"note": "x"} and opt is None
        assert loaded.config == SMALL
        assert loaded.names() == params.names()
        for n in params.names():
            assert np.array_equal(loaded[n].data, params[n].data)

    def test_optimizer_state_round_trip(self, tmp_path):
        from msamseg.train import init_adam_state
        params = build_model(SMALL, seed=12)
        state = init_adam_state(params)
        state["t"] = 17
        rng = np.random.default_rng(12)
        for n in params.names():
            state["m"][n] = rng.random(params[n].shape).astype(np.float32)
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, params, optimizer_state=state)
        _, _, opt = load_checkpoint(p)
        assert opt["t"] == 17
        for n in params.names():
            assert np.array_equal(opt["m"][n], state["m"][n])
            assert np.array_equal(opt["v"][n], state["v"][n])

    def test_corruption_detected(self, tmp_path):
        params = build_model(SMALL, seed=13)
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, params)
        raw = bytearray(p.read_bytes())
        raw[100] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_truncation_detected(self, tmp_path):
        params = build_model(SMALL, seed=14)
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, params)
        p.write_bytes(p.read_bytes()[:-9])
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_not_a_checkpoint(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"PNG-ish nonsense")
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_identical_saves_are_byte_identical(self, tmp_path):
        params = build_model(SMALL, seed=15)
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(a, params, meta={"k": 1})
        save_checkpoint(b, params, meta={"k": 1})
        assert a.read_bytes() == b.read_bytes()

    def test_restored_model_reproduces_outputs(self, tmp_path):
        rng = np.random.default_rng(16)
        params = build_model(SMALL, seed=16)
        pet, ct = inputs(rng)
        before, _ = model_forward(params, pet, ct)
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, params)
        loaded, _, _ = load_checkpoint(p)
        after, _ = model_forward(loaded, pet, ct)
        assert np.array_equal(before, after)
