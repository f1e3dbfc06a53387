"""Network-level contracts: build determinism, the ablation parameter ladder,
an independent shape-walk parameter counter, forward/loss semantics, FLOP
conventions, checkpoint round-trips, and end-to-end gradient flow."""

import numpy as np
import pytest

from esknet import network as N
from esknet import tensor as T
from esknet.network import (Checkpoint, NetworkSpec, build, count_params_flops,
                            forward, load_checkpoint, named_parameters,
                            named_state, save_checkpoint, total_loss)
from esknet.tensor import ShapeError, Tensor

DESK = dict(input_size=(64, 64), base_channels=8)


def shape_walk_count(spec: NetworkSpec) -> int:
    """Independent parameter counter: walks the declared layer shapes."""
    w = list(spec.widths())
    kind = spec.block_kind

    def block(cin, cout):
        n = cout * cin * 25 + cout          # wide branch
        n += cout * cin * 9 + cout          # dilated branch
        if kind in ("sk", "esk"):
            red = min(spec.reduction_dim, cout)
            n += red * cout + red           # squeeze FC
            n += 2 * red                    # norm affine
            n += cout * red + cout          # expand FC
        if kind == "esk":
            n += cout + 1                   # spatial 1x1
            if cin != cout:
                n += cout * cin + cout      # residual 1x1
        return n

    total = block(1, w[0]) + block(w[0], w[1]) + block(w[1], w[2]) + block(w[2], w[3])
    total += block(w[3], w[4])
    for j in range(4):
        cin, cout = w[4 - j], w[3 - j]
        total += cout * cin * 9 + cout      # up-conv 3x3
        total += block(2 * cout, cout)
    stage_width = {1: w[4], 2: w[3], 3: w[2], 4: w[1], 5: w[0]}
    stages = range(1, 6) if spec.deep_supervision else (5,)
    total += sum(stage_width[s] + 1 for s in stages)
    return total


class TestBuild:
    def test_identical_seeds_bitwise_identical(self):
        spec = NetworkSpec(**DESK)
        a = dict(named_parameters(build(spec, 42)))
        b = dict(named_parameters(build(spec, 42)))
        assert a.keys() == b.keys()
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)

    def test_different_seeds_differ(self):
        spec = NetworkSpec(**DESK)
        a = dict(named_parameters(build(spec, 1)))
        b = dict(named_parameters(build(spec, 2)))
        assert any(not np.array_equal(a[k].data, b[k].data) for k in a)

    def test_input_size_must_divide_by_16(self):
        with pytest.raises(ValueError):
            NetworkSpec(input_size=(60, 64))

    @pytest.mark.parametrize("kind", ["plain", "sk", "esk"])
    @pytest.mark.parametrize("deep", [False, True])
    def test_count_matches_shape_walk_and_allocation(self, kind, deep):
        spec = NetworkSpec(input_size=(64, 64), base_channels=4,
                           block_kind=kind, deep_supervision=deep)
        counted, _ = count_params_flops(spec)
        allocated = sum(t.data.size for _, t in named_parameters(build(spec, 0)))
        assert counted == allocated == shape_walk_count(spec)

    def test_ablation_ladder_strictly_increases(self):
        counts = [count_params_flops(NetworkSpec(input_size=(64, 64), base_channels=8,
                                                 block_kind=k, deep_supervision=False))[0]
                  for k in ("plain", "sk", "esk")]
        assert counts[0] < counts[1] < counts[2]

    def test_deep_supervision_adds_exactly_four_head_sets(self):
        without = count_params_flops(NetworkSpec(**DESK, deep_supervision=False))[0]
        with_ds = count_params_flops(NetworkSpec(**DESK, deep_supervision=True))[0]
        w = NetworkSpec(**DESK).widths()
        extra_heads = sum(width + 1 for width in (w[4], w[3], w[2], w[1]))
        assert with_ds - without == extra_heads

    def test_doubling_base_roughly_quadruples_parameters(self):
        small = count_params_flops(NetworkSpec(input_size=(64, 64), base_channels=8))[0]
        large = count_params_flops(NetworkSpec(input_size=(64, 64), base_channels=16))[0]
        assert 3.5 < large / small < 4.5

    def test_lone_1x1_conv_parameter_count(self):
        # 1x1 conv, 4 in, 1 out, with bias: 4 + 1 = 5 learnable values.
        params = T.init_conv(np.random.default_rng(0), 1, 4, 1)
        assert params.kernel.data.size + params.bias.data.size == 5

    def test_conv_flop_closed_form(self):
        # One 3x3 same conv on C,H,W costs 2*9*Cin*Cout*H*W under the
        # 2-FLOPs-per-MAC convention.
        assert N._conv_flops(3, 8, 3, 16, 16) == 2 * 9 * 3 * 8 * 16 * 16


class TestForward:
    def test_five_full_resolution_masks_inside_unit_interval(self, rng):
        spec = NetworkSpec(**DESK, deep_supervision=True)
        params = build(spec, 0)
        img = Tensor(rng.uniform(0, 1, (1, 64, 64)).astype(np.float32))
        outs = forward(spec, params, img)
        assert len(outs) == 5
        for out in outs:
            assert out.shape == (1, 64, 64)
            assert np.all((out.data > 0) & (out.data < 1))

    def test_without_deep_supervision_only_final_mask(self, rng):
        spec = NetworkSpec(**DESK, deep_supervision=False)
        params = build(spec, 0)
        img = Tensor(rng.uniform(0, 1, (1, 64, 64)).astype(np.float32))
        outs = forward(spec, params, img)
        assert len(outs) == 1 and outs[0].shape == (1, 64, 64)

    def test_encoder_extents_halve_four_times(self, rng):
        spec = NetworkSpec(input_size=(64, 64), base_channels=4)
        params = build(spec, 0)
        img = Tensor(rng.uniform(0, 1, (1, 64, 64)).astype(np.float32))
        _, feats = forward(spec, params, img, want_features=True)
        extents = [f.shape[-1] for f in feats["encoder"]]
        assert extents == [64, 32, 16, 8]
        assert feats["stages"][0].shape[-1] == 4     # bottleneck
        widths = [f.shape[-3] for f in feats["encoder"]]
        assert widths == [4, 8, 16, 32]

    def test_wrong_extent_raises(self, rng):
        spec = NetworkSpec(**DESK)
        params = build(spec, 0)
        with pytest.raises(ShapeError):
            forward(spec, params, Tensor(np.zeros((1, 32, 32), dtype=np.float32)))

    def test_out_of_range_values_raise(self):
        spec = NetworkSpec(**DESK)
        params = build(spec, 0)
        bad = np.zeros((1, 64, 64), dtype=np.float32)
        bad[0, 0, 0] = 1.5
        with pytest.raises(ValueError):
            forward(spec, params, Tensor(bad))

    def test_batched_forward_matches_singles(self, rng):
        spec = NetworkSpec(input_size=(32, 32), base_channels=4,
                           deep_supervision=False)
        params = build(spec, 0)
        N.set_mode(params, "eval")
        imgs = rng.uniform(0, 1, (3, 1, 32, 32)).astype(np.float32)
        batched = forward(spec, params, Tensor(imgs))[0].data
        for i in range(3):
            single = forward(spec, params, Tensor(imgs[i]))[0].data
            np.testing.assert_allclose(batched[i], single, atol=1e-6)


class TestLoss:
    def test_equal_stage_losses_sum(self):
        # Constant predictions solving -log(1-p) = 0.1 give per-stage loss
        # 0.1 against an all-background target; five stages total 0.5.
        p = 1.0 - np.exp(-0.1)
        outputs = [Tensor(np.full((1, 8, 8), p, dtype=np.float64)) for _ in range(5)]
        target = np.zeros((1, 8, 8), dtype=np.float64)
        loss = total_loss(outputs, target)
        np.testing.assert_allclose(loss.item(), 0.5, atol=1e-9)

    def test_uninformative_predictions_give_five_log_two(self):
        outputs = [Tensor(np.full((1, 4, 4), 0.5, dtype=np.float64)) for _ in range(5)]
        target = (np.arange(16).reshape(1, 4, 4) % 2).astype(np.float64)
        loss = total_loss(outputs, target)
        np.testing.assert_allclose(loss.item(), 5 * np.log(2.0), rtol=1e-9)

    def test_total_equals_sum_of_stage_losses(self, rng):
        from esknet.verification import cast_network_to
        spec = NetworkSpec(input_size=(32, 32), base_channels=4)
        params = build(spec, 0)
        cast_network_to(params, np.float64)   # identity checked at 64-bit
        img = Tensor(rng.uniform(0, 1, (1, 32, 32)), dtype=np.float64)
        target = (rng.random((1, 32, 32)) > 0.5).astype(np.float64)
        outs = forward(spec, params, img)
        total = total_loss(outs, target).item()
        parts = sum(T.bce_loss(o, target).item() for o in outs)
        np.testing.assert_allclose(total, parts, atol=1e-9)

    def test_every_parameter_receives_gradient(self, rng):
        spec = NetworkSpec(input_size=(32, 32), base_channels=4,
                           deep_supervision=True)
        params = build(spec, 7)
        img = Tensor(rng.uniform(0, 1, (2, 1, 32, 32)).astype(np.float32))
        target = (rng.random((2, 1, 32, 32)) > 0.5).astype(np.float32)
        loss = total_loss(forward(spec, params, img), target)
        loss.backward()
        for name, tensor in named_parameters(params):
            assert tensor.grad is not None, f"{name} got no gradient"
            assert np.linalg.norm(tensor.grad) > 0, f"{name} got a zero gradient"


class TestCheckpoint:
    def test_round_trip_preserves_forward_bitwise(self, tmp_path, rng):
        spec = NetworkSpec(input_size=(32, 32), base_channels=4)
        params = build(spec, 5)
        img = Tensor(rng.uniform(0, 1, (1, 32, 32)).astype(np.float32))
        N.set_mode(params, "eval")
        with T.no_grad():
            before = [o.data for o in forward(spec, params, img)]

        path = tmp_path / "net.eskn"
        save_checkpoint(path, Checkpoint(spec=spec, params=params, epoch=3, seed=5))
        loaded = load_checkpoint(path)
        assert loaded.epoch == 3 and loaded.seed == 5
        assert loaded.spec == spec
        N.set_mode(loaded.params, "eval")
        with T.no_grad():
            after = [o.data for o in forward(loaded.spec, loaded.params, img)]
        for b, a in zip(before, after):
            assert np.array_equal(b, a)

    def test_magic_bytes_and_version(self, tmp_path):
        spec = NetworkSpec(input_size=(32, 32), base_channels=4)
        path = tmp_path / "net.eskn"
        save_checkpoint(path, Checkpoint(spec=spec, params=build(spec, 0)))
        raw = path.read_bytes()
        assert raw[:4] == b"ESKN"
        assert int.from_bytes(raw[4:8], "little") == 1

    def test_refuses_foreign_files(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"PNG!junk")
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_optimizer_state_round_trip(self, tmp_path):
        spec = NetworkSpec(input_size=(32, 32), base_channels=4)
        params = build(spec, 0)
        names = dict(named_parameters(params))
        state = {"step": 12,
                 "m": {k: np.full_like(t.data, 0.25) for k, t in names.items()},
                 "v": {k: np.full_like(t.data, 0.5) for k, t in names.items()}}
        path = tmp_path / "net.eskn"
        save_checkpoint(path, Checkpoint(spec=spec, params=params,
                                         optimizer_state=state))
        loaded = load_checkpoint(path)
        assert loaded.optimizer_state["step"] == 12
        some = next(iter(loaded.optimizer_state["m"].values()))
        assert np.all(some == 0.25)

    def test_tensors_stored_as_little_endian_float32(self, tmp_path):
        spec = NetworkSpec(input_size=(32, 32), base_channels=4)
        params = build(spec, 9)
        path = tmp_path / "net.eskn"
        save_checkpoint(path, Checkpoint(spec=spec, params=params))
        loaded = load_checkpoint(path)
        for (_, a), (_, b) in zip(sorted(named_state(params).items()),
                                  sorted(named_state(loaded.params).items())):
            assert b.data.dtype == np.float32
            assert np.array_equal(a.data, b.data)
