import numpy as np
import pytest

from dpn import tensor
from dpn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from dpn.model import DpnConfig, DpnModel, count_parameters, dp_block_forward, \
    dpn_forward, init_xavier
from dpn.tensor import ShapeError

from oracles import naive_conv3x3, naive_maxpool, naive_upsample2x


def make_model(**kw):
    return DpnModel(DpnConfig(**kw))


def randomize(model, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    for _, p in model.named_params():
        p.value[...] = rng.uniform(-scale, scale,
                                   p.value.shape).astype(np.float32)
    return model


def straight_line_block(x, blk, branches):
    """Alg-style reference: the six lines evaluated with naive kernels."""
    def conv_relu(v, cp):
        out = naive_conv3x3(v, cp.weight.value.astype(np.float64),
                            cp.bias.value.astype(np.float64))
        return np.maximum(out, 0.0)

    x = x.astype(np.float64)
    x1 = conv_relu(x, blk.k1)
    if "os2" in branches:
        x2 = conv_relu(naive_maxpool(x, 2), blk.k2)
        if "os4" in branches:
            x3 = conv_relu(naive_maxpool(x, 4), blk.k3)
            x4 = conv_relu(np.concatenate([x2, naive_upsample2x(x3)], axis=1),
                           blk.k4)
        else:
            x4 = conv_relu(x2, blk.k4)
        x5 = conv_relu(np.concatenate([x1, naive_upsample2x(x4)], axis=1),
                       blk.k5)
    else:
        x5 = x1
    return conv_relu(np.concatenate([x5, x], axis=1), blk.k6)


class TestParameterCounts:
    def test_reference_configuration(self):
        rows, groups, total = count_parameters(make_model())
        assert groups["stem"] == 896
        assert groups["stem"] + groups["block1"] == 21704
        for i in range(2, 9):
            assert groups[f"block{i}"] == 13896
        assert groups["heads"] == 4 * (16 + 1)
        assert total == 119044
        assert total < 120000

    def test_block1_decomposition(self):
        # block at Cin=16: the six convolutions of the reference widths
        expect = (9 * 16 * 16 + 16) + 2 * (9 * 16 * 8 + 8) \
            + (9 * 16 * 8 + 8) + (9 * 24 * 16 + 16) + (9 * 32 * 16 + 16)
        assert expect == 13896

    def test_counts_follow_ablation(self):
        _, groups, total = count_parameters(
            make_model(branches=("os1",), aux_losses=False))
        full_total = count_parameters(make_model())[2]
        assert total < full_total
        # only k1 and k6 remain per block
        assert groups["block2"] == (9 * 16 * 16 + 16) + (9 * 32 * 16 + 16)


class TestDpBlock:
    def test_shape_contract(self):
        model = randomize(make_model())
        x = np.zeros((1, 32, 64, 64), np.float32)
        out = dp_block_forward(x, model.blocks[0])
        assert out.shape == (1, 16, 64, 64)

    def test_zero_weight_bias_collapse(self):
        model = make_model()
        blk = model.blocks[0]
        for cp in blk.convs:
            cp.bias.value[...] = np.arange(1, cp.bias.size + 1,
                                           dtype=np.float32) * 0.1
        x = np.random.default_rng(0).uniform(
            0, 1, (1, 32, 8, 8)).astype(np.float32)
        out = dp_block_forward(x, blk)
        for c in range(16):
            np.testing.assert_allclose(out[0, c], blk.k6.bias.value[c],
                                       rtol=1e-6)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_straight_line_oracle(self, seed):
        cfg = DpnConfig()
        model = randomize(make_model(), seed=seed)
        rng = np.random.default_rng(seed + 500)
        x = rng.uniform(-1, 1, (1, 32, 8, 8)).astype(np.float32)
        blk = model.blocks[0]
        out = dp_block_forward(x, blk)
        ref = straight_line_block(x, blk, cfg.branches)
        assert np.abs(out - ref).max() <= 1e-5

    @pytest.mark.parametrize("branches", [("os1",), ("os1", "os2")])
    def test_ablated_wiring_matches_oracle(self, branches):
        model = randomize(make_model(branches=branches), seed=3)
        rng = np.random.default_rng(11)
        x = rng.uniform(-1, 1, (1, 32, 8, 8)).astype(np.float32)
        blk = model.blocks[0]
        out = dp_block_forward(x, blk, branches)
        ref = straight_line_block(x, blk, branches)
        assert np.abs(out - ref).max() <= 1e-5
        if branches == ("os1",):
            assert blk.k2 is None and blk.k4 is None and blk.k5 is None

    def test_rejects_indivisible_dims(self):
        model = make_model()
        with pytest.raises(ShapeError, match="divisible"):
            dp_block_forward(np.zeros((1, 32, 6, 8), np.float32),
                             model.blocks[0])

    def test_resolution_preserved_every_block(self):
        model = randomize(make_model())
        rng = np.random.default_rng(1)
        h = tensor.relu(tensor.conv2d_3x3(
            rng.uniform(0, 1, (1, 3, 24, 16)).astype(np.float32),
            model.stem.weight.value, model.stem.bias.value))
        for blk in model.blocks:
            h = dp_block_forward(h, blk)
            assert h.shape[2:] == (24, 16)


class TestDpnForward:
    def test_head_count_default_four(self):
        model = randomize(make_model())
        outs = dpn_forward(np.zeros((1, 3, 16, 16), np.float32), model)
        assert len(outs) == 4
        assert sorted(model.heads) == [2, 4, 6, 8]

    def test_head_count_without_aux(self):
        model = randomize(make_model(aux_losses=False))
        outs = dpn_forward(np.zeros((1, 3, 16, 16), np.float32), model)
        assert len(outs) == 1

    def test_head_maps_match_padded_input_dims(self):
        model = randomize(make_model())
        x = np.zeros((1, 3, 24, 36), np.float32)
        for out in dpn_forward(x, model):
            assert out.shape == (1, 1, 24, 36)

    def test_rejects_wrong_channels(self):
        model = make_model()
        with pytest.raises(ShapeError, match="channels"):
            dpn_forward(np.zeros((1, 4, 16, 16), np.float32), model)

    def test_rejects_indivisible(self):
        model = make_model()
        with pytest.raises(ShapeError, match="divisible"):
            dpn_forward(np.zeros((1, 3, 18, 16), np.float32), model)


class TestConfig:
    def test_requires_os1(self):
        with pytest.raises(ValueError, match="os1"):
            DpnConfig(branches=("os2",)).validate()

    def test_os4_requires_os2(self):
        with pytest.raises(ValueError, match="os4"):
            DpnConfig(branches=("os1", "os4")).validate()

    def test_aux_positions_bounded(self):
        with pytest.raises(ValueError, match="position"):
            DpnConfig(aux_positions=(8,)).validate()


class TestInit:
    def test_xavier_bound(self):
        model = make_model()
        init_xavier(model, seed=0)
        k1 = model.blocks[1].k1  # 16 -> 16
        k2 = model.blocks[1].k2  # 16 -> 8
        bound = np.sqrt(6.0 / (9 * 16 + 9 * 8))
        assert bound == pytest.approx(0.16666, abs=1e-4)
        assert np.abs(k2.weight.value).max() <= bound
        assert np.abs(k1.weight.value).max() <= np.sqrt(6.0 / (9 * 32))
        # heads are 1x1: fan = channels
        head = model.heads[8]
        assert np.abs(head.weight.value).max() <= np.sqrt(6.0 / (16 + 1))

    def test_biases_zero(self):
        model = init_xavier(make_model(), seed=1)
        for name, p in model.named_params():
            if name.endswith(".bias"):
                assert np.all(p.value == 0)

    def test_deterministic(self):
        a = init_xavier(make_model(), seed=42)
        b = init_xavier(make_model(), seed=42)
        for (_, pa), (_, pb) in zip(a.named_params(), b.named_params()):
            assert np.array_equal(pa.value, pb.value)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = init_xavier(make_model(), seed=7)
        path = tmp_path / "model.dpnw"
        save_checkpoint(model, path)
        loaded, step = load_checkpoint(path)
        assert step is None
        assert count_parameters(loaded) == count_parameters(model)
        for (na, pa), (nb, pb) in zip(model.named_params(),
                                      loaded.named_params()):
            assert na == nb
            assert np.array_equal(pa.value, pb.value)

    def test_round_trip_with_adam_state(self, tmp_path):
        model = init_xavier(make_model(), seed=8)
        rng = np.random.default_rng(0)
        for p in model.params():
            p.m[...] = rng.normal(size=p.m.shape).astype(np.float32)
            p.v[...] = rng.uniform(size=p.v.shape).astype(np.float32)
        path = tmp_path / "model.dpnw"
        save_checkpoint(model, path, step=12345)
        loaded, step = load_checkpoint(path)
        assert step == 12345
        for (_, pa), (_, pb) in zip(model.named_params(),
                                    loaded.named_params()):
            assert np.array_equal(pa.m, pb.m)
            assert np.array_equal(pa.v, pb.v)

    def test_architecture_reconstructed(self, tmp_path):
        cfg = DpnConfig(c0=8, c1=4, c2=4, num_blocks=3, aux_positions=(1,),
                        branches=("os1", "os2"))
        model = init_xavier(DpnModel(cfg), seed=9)
        path = tmp_path / "small.dpnw"
        save_checkpoint(model, path)
        loaded, _ = load_checkpoint(path)
        assert loaded.config.c0 == 8
        assert loaded.config.num_blocks == 3
        assert tuple(loaded.config.branches) == ("os1", "os2")
        assert loaded.config.aux_positions == (1,)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.dpnw"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="bad magic"):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        import struct
        path = tmp_path / "v9.dpnw"
        path.write_bytes(b"DPNW" + struct.pack("<II", 9, 0))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        model = init_xavier(make_model(), seed=10)
        path = tmp_path / "model.dpnw"
        save_checkpoint(model, path)
        clipped = tmp_path / "clipped.dpnw"
        clipped.write_bytes(path.read_bytes()[:2000])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(clipped)

    def test_dimension_overflow(self, tmp_path):
        import struct
        path = tmp_path / "huge.dpnw"
        name = b"stem.weight"
        payload = b"DPNW" + struct.pack("<II", 1, 1)
        payload += struct.pack("<H", len(name)) + name
        payload += struct.pack("<B", 4) + struct.pack("<4I", 70000, 70000,
                                                      3, 3)
        path.write_bytes(payload)
        with pytest.raises(CheckpointError, match="dimension overflow"):
            load_checkpoint(path)

    def test_file_size_matches_parameter_total(self, tmp_path):
        model = make_model()
        path = tmp_path / "model.dpnw"
        save_checkpoint(model, path)
        size = path.stat().st_size
        payload = 119044 * 4
        assert payload < size < payload + 8192  # header + names + dims
        save_checkpoint(model, path, step=1)
        with_adam = path.stat().st_size
        assert with_adam > 3 * payload
