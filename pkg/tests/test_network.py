import numpy as np
import pytest

from vnetseg.config import parse_kv_text
from vnetseg.losses import dice_loss_op
from vnetseg.network import (
    NetworkConfig,
    StageSpec,
    build,
    receptive_fields,
)
from vnetseg.tensor import ShapeError, Tape, Tensor5, backward, softmax_voxelwise

TABLE_EXTENTS = [5, 22, 72, 172, 372, 476, 528, 546, 551, 551]
TABLE_SIZES = [128, 64, 32, 16, 8, 16, 32, 64, 128, 128]


def toy_config(dims=(16, 16, 16), stages=3, base=4):
    return NetworkConfig(input_dims=dims, num_stages=stages, base_channels=base)


class TestReceptiveFields:
    def test_default_config_reproduces_all_rows(self):
        rep = receptive_fields(NetworkConfig.default())
        assert rep.extents() == TABLE_EXTENTS
        assert [size for _, size, _ in rep.rows] == TABLE_SIZES
        assert [name for name, _, _ in rep.rows] == [
            "L-Stage 1", "L-Stage 2", "L-Stage 3", "L-Stage 4", "L-Stage 5",
            "R-Stage 4", "R-Stage 3", "R-Stage 2", "R-Stage 1", "Output",
        ]

    def test_single_conv_base_case(self):
        cfg = NetworkConfig(input_dims=(8, 8, 8), num_stages=1, convs_down=(1,))
        rep = receptive_fields(cfg)
        assert rep.rows[0] == ("L-Stage 1", 8, 5)

    def test_non_decreasing_along_path(self):
        rep = receptive_fields(NetworkConfig.default())
        ext = rep.extents()
        assert all(b >= a for a, b in zip(ext, ext[1:]))

    def test_innermost_sees_whole_volume(self):
        cfg = NetworkConfig.default()
        rep = receptive_fields(cfg)
        bottom = dict((name, rf) for name, _, rf in rep.rows)["L-Stage 5"]
        assert bottom > max(cfg.input_dims)

    def test_kernel_three_gives_different_extents(self):
        # the calculator accepts any kernel; 3-wide kernels cannot reproduce
        # the 5-wide table
        cfg = NetworkConfig(input_dims=(64, 128, 128), kernel=3)
        assert receptive_fields(cfg).extents() != TABLE_EXTENTS

    def test_table_rendering_is_aligned(self):
        table = receptive_fields(NetworkConfig.default()).as_table()
        lines = table.splitlines()
        assert len(lines) == 11
        assert "L-Stage 1" in lines[1] and lines[1].split()[-1] == "5"


class TestConfig:
    def test_default_stage_counts(self):
        cfg = NetworkConfig.default()
        assert cfg.convs_down == (1, 2, 3, 3, 3)
        assert cfg.convs_up == (3, 3, 2, 1)
        assert cfg.base_channels == 16
        assert cfg.input_dims == (64, 128, 128)

    def test_channel_doubling_law(self):
        cfg = NetworkConfig.default()
        widths = [cfg.encoder_channels(i) for i in range(1, 6)]
        assert widths == [16, 32, 64, 128, 256]

    def test_indivisible_dims_rejected(self):
        with pytest.raises(ValueError):
            NetworkConfig(input_dims=(18, 18, 18), num_stages=3)

    def test_mismatched_conv_lists_rejected(self):
        with pytest.raises(ValueError):
            NetworkConfig(input_dims=(16, 16, 16), num_stages=3, convs_down=(1, 2))
        with pytest.raises(ValueError):
            NetworkConfig(input_dims=(16, 16, 16), num_stages=3, convs_up=(3, 3, 2))

    def test_conv_count_bounds(self):
        with pytest.raises(ValueError):
            StageSpec(conv_count=4, channels=8)

    def test_text_round_trip(self):
        cfg = NetworkConfig.default()
        kv = parse_kv_text(cfg.to_text())
        back = NetworkConfig.from_mapping(
            {k: ",".join(str(x) for x in v) if isinstance(v, tuple) else v
             for k, v in kv.items()}
        )
        assert back == cfg

    def test_input_serialized_x_y_z(self):
        # (D, H, W) = (64, 128, 128) renders as the familiar 128,128,64
        assert "input=128,128,64" in NetworkConfig.default().to_text()


class TestBuild:
    def test_same_seed_identical_parameters(self):
        m1 = build(toy_config(), seed=7)
        m2 = build(toy_config(), seed=7)
        for (n1, p1), (n2, p2) in zip(m1.parameters().items(), m2.parameters().items()):
            assert n1 == n2
            np.testing.assert_array_equal(p1.values, p2.values)

    def test_different_seed_differs(self):
        m1 = build(toy_config(), seed=7)
        m2 = build(toy_config(), seed=8)
        assert any(
            not np.array_equal(p1.values, p2.values)
            for p1, p2 in zip(m1.parameters().values(), m2.parameters().values())
        )

    def test_toy_smoke_forward_backward(self, rng):
        cfg = toy_config()
        model = build(cfg, seed=0)
        x = Tensor5(rng.standard_normal((1, 1, 16, 16, 16)))
        labels = (rng.random((1, 16, 16, 16)) < 0.3).astype(np.uint8)
        tape = Tape()
        logits = model.forward(x, tape)
        assert logits.shape == (1, 2, 16, 16, 16)
        probs = softmax_voxelwise(logits, tape)
        loss = dice_loss_op(probs, labels, tape)
        model.zero_grad()
        backward(tape, loss)

    def test_every_parameter_block_receives_gradient(self, rng):
        cfg = toy_config()
        model = build(cfg, seed=0)
        x = Tensor5(rng.standard_normal((1, 1, 16, 16, 16)))
        labels = (rng.random((1, 16, 16, 16)) < 0.3).astype(np.uint8)
        tape = Tape()
        probs = softmax_voxelwise(model.forward(x, tape), tape)
        loss = dice_loss_op(probs, labels, tape)
        model.zero_grad()
        backward(tape, loss)
        for name, p in model.parameters().items():
            assert p.grad is not None, name
            assert np.any(p.grad != 0), name

    def test_parameter_count_reported(self):
        model = build(toy_config(), seed=0)
        assert model.parameter_count == sum(
            p.values.size for p in model.parameters().values()
        )
        assert model.parameter_count > 0


class TestForward:
    def test_output_has_two_channels(self, rng):
        model = build(toy_config(), seed=0)
        out = model.forward(Tensor5(rng.standard_normal((2, 1, 16, 16, 16))))
        assert out.shape[1] == 2

    def test_wrong_input_shape_rejected(self, rng):
        model = build(toy_config(), seed=0)
        with pytest.raises(ShapeError):
            model.forward(Tensor5(rng.standard_normal((1, 1, 8, 8, 8))))

    def test_batch_independence(self, rng):
        model = build(toy_config(), seed=0)
        single = rng.standard_normal((1, 1, 16, 16, 16))
        pair = np.concatenate([single, single], axis=0)
        out = model.forward(Tensor5(pair)).values
        np.testing.assert_allclose(out[0], out[1], atol=1e-12)
        out_single = model.forward(Tensor5(single)).values
        np.testing.assert_allclose(out[0], out_single[0], atol=1e-10)

    def test_residual_identity_when_convs_zeroed(self, rng):
        model = build(toy_config(), seed=0)
        # zero every in-stage conv: each stage becomes the identity on its
        # (channel-tiled) input
        for wiring in model.enc_stages + model.dec_stages:
            for cp, _ in wiring.convs:
                cp.kernel.values[:] = 0.0
                cp.bias.values[:] = 0.0
        x = rng.standard_normal((1, 1, 16, 16, 16))
        stage_out = model._stage_forward(model.enc_stages[0], Tensor5(x), None)
        width = model.config.base_channels
        np.testing.assert_array_equal(
            stage_out.values, np.repeat(x, width, axis=1)
        )
        # decoder stage input already has matching width: identity exactly
        dec_in = Tensor5(rng.standard_normal((1, 16, 4, 4, 4)))
        dec_out = model._stage_forward(model.dec_stages[0], dec_in, None)
        np.testing.assert_array_equal(dec_out.values, dec_in.values)

    def test_full_scale_output_shape_matches_input(self, rng):
        # 5-stage default architecture; one feed-forward pass
        model = build(NetworkConfig.default(), seed=0)
        x = Tensor5(rng.standard_normal((1, 1, 64, 128, 128)).astype(np.float64))
        out = model.forward(x)
        assert out.shape == (1, 2, 64, 128, 128)

    def test_checkpoint_state_round_trip(self, rng):
        model = build(toy_config(), seed=3)
        state = model.state()
        model2 = build(toy_config(), seed=4)
        model2.load_state(state)
        x = Tensor5(rng.standard_normal((1, 1, 16, 16, 16)))
        np.testing.assert_array_equal(
            model.forward(x).values, model2.forward(x).values
        )
