"""Optimizer behavior, loop determinism, checkpoints."""

import numpy as np
import pytest

from ls3dconv.errors import CheckpointError, NumericError, ShapeError
from ls3dconv.net import NetworkSpec, build_net
from ls3dconv.train import (AdamState, TrainConfig, adam_step, clip_grad_norm,
                            load_checkpoint, save_checkpoint, train_loop,
                            write_loss_csv)


def small_interp_config(**kw):
    base = dict(epochs=2, batch_size=1, learning_rate=1e-3, seed=0,
                task="interpolate", clips=2, eval_clips=1, size=16,
                motion=2.0, eval_every=0)
    base.update(kw)
    return TrainConfig(**base)


def small_net(task="interpolate", seed=0, **kw):
    td = frozenset() if task == "denoise" else frozenset({1, 2})
    spec = NetworkSpec(channels=4, num_resblocks=2, ls3d_block_indices=frozenset({2}),
                       temporal_deconv_after=td, task=task, branch_kernel=1, **kw)
    return build_net(spec, seed=seed)


class TestAdam:
    def _params(self, rng):
        return {"w": rng.standard_normal((3, 4)).astype(np.float32),
                "b": rng.standard_normal(4).astype(np.float32)}

    def test_zero_gradient_leaves_params_unchanged(self):
        rng = np.random.default_rng(0)
        params = self._params(rng)
        before = {k: v.copy() for k, v in params.items()}
        state = AdamState.init(params)
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        adam_step(params, grads, state, small_interp_config())
        for k in params:
            np.testing.assert_array_equal(params[k], before[k])

    def test_constant_gradient_step_bounded_by_lr(self):
        """|update| stays within lr * (1 + slack) under a constant gradient."""
        rng = np.random.default_rng(1)
        params = {"w": rng.standard_normal(16).astype(np.float64)}
        grads = {"w": np.full(16, 0.37)}
        cfg = small_interp_config(learning_rate=1e-2)
        state = AdamState.init(params)
        for _ in range(50):
            before = params["w"].copy()
            adam_step(params, grads, state, cfg)
            step = np.abs(params["w"] - before)
            assert step.max() <= cfg.learning_rate * 1.2

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(2)
            params = self._params(rng)
            state = AdamState.init(params)
            cfg = small_interp_config()
            for i in range(5):
                grads = {k: np.full_like(v, 0.1 * (i + 1)) for k, v in params.items()}
                adam_step(params, grads, state, cfg)
            return params

        a, b = run(), run()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_nonfinite_gradient_aborts_with_report(self):
        rng = np.random.default_rng(3)
        params = self._params(rng)
        state = AdamState.init(params)
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        grads["w"].flat[5] = np.inf
        with pytest.raises(NumericError, match="w"):
            adam_step(params, grads, state, small_interp_config())

    def test_shape_mismatch_rejected(self):
        params = {"w": np.zeros((2, 2))}
        state = AdamState.init(params)
        with pytest.raises(ShapeError, match="w"):
            adam_step(params, {"w": np.zeros(3)}, state, small_interp_config())

    def test_grad_clipping_rescales_global_norm(self):
        grads = {"a": np.full(4, 3.0), "b": np.full(9, 4.0)}
        total = clip_grad_norm(grads, max_norm=1.0)
        assert total == pytest.approx(np.sqrt(4 * 9 + 9 * 16))
        new_norm = np.sqrt(sum(float(np.sum(g ** 2)) for g in grads.values()))
        assert new_norm == pytest.approx(1.0)


class TestTrainLoop:
    def test_smoke_loss_decreases(self):
        net = small_net()
        cfg = small_interp_config(epochs=12, learning_rate=2e-3)
        result = train_loop(net, cfg)
        assert result.epoch_losses[-1] < result.epoch_losses[0]

    def test_lr_zero_freezes_everything(self):
        net = small_net()
        before = {k: v.copy() for k, v in net.parameters().items()}
        cfg = small_interp_config(learning_rate=0.0, epochs=2)
        result = train_loop(net, cfg)
        for k, v in net.parameters().items():
            np.testing.assert_array_equal(v, before[k])
        assert result.epoch_losses[0] == pytest.approx(result.epoch_losses[-1])

    def test_same_seed_identical_history(self):
        r1 = train_loop(small_net(seed=1), small_interp_config(epochs=3))
        r2 = train_loop(small_net(seed=1), small_interp_config(epochs=3))
        assert r1.loss_rows == r2.loss_rows

    def test_task_mismatch_rejected(self):
        net = small_net(task="denoise")
        with pytest.raises(ShapeError, match="task"):
            train_loop(net, small_interp_config(task="interpolate"))

    def test_denoise_smoke(self):
        net = small_net(task="denoise")
        cfg = small_interp_config(task="denoise", epochs=6, num_frames=3,
                                  noise_sigma=25.0, learning_rate=2e-3)
        result = train_loop(net, cfg)
        assert result.epoch_losses[-1] < result.epoch_losses[0]

    def test_loss_csv_byte_identical_across_runs(self, tmp_path):
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_loss_csv(p1, train_loop(small_net(seed=2),
                                      small_interp_config(epochs=2)).loss_rows)
        write_loss_csv(p2, train_loop(small_net(seed=2),
                                      small_interp_config(epochs=2)).loss_rows)
        assert p1.read_bytes() == p2.read_bytes()


class TestCheckpoint:
    def test_roundtrip_bit_identical(self, tmp_path):
        net = small_net(seed=3)
        cfg = small_interp_config()
        result = train_loop(net, cfg)
        path = tmp_path / "ck.ls3d"
        save_checkpoint(path, net, result.adam_state, config_echo="k = v")
        net2 = small_net(seed=99)
        state, echo = load_checkpoint(path, net2)
        for k, v in net.parameters().items():
            np.testing.assert_array_equal(v, net2.parameters()[k])
        assert echo == "k = v"
        assert state.step == result.adam_state.step
        x = np.random.default_rng(0).standard_normal((1, 3, 2, 16, 16)).astype(np.float32)
        np.testing.assert_array_equal(net.forward(x), net2.forward(x))

    def test_truncated_file_rejected_cleanly(self, tmp_path):
        net = small_net(seed=4)
        path = tmp_path / "ck.ls3d"
        save_checkpoint(path, net)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        fresh = small_net(seed=5)
        before = {k: v.copy() for k, v in fresh.parameters().items()}
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path, fresh)
        # no partial restore
        for k, v in fresh.parameters().items():
            np.testing.assert_array_equal(v, before[k])

    def test_version_mismatch_rejected(self, tmp_path):
        net = small_net(seed=6)
        path = tmp_path / "ck.ls3d"
        save_checkpoint(path, net)
        raw = bytearray(path.read_bytes())
        raw[4] = 9  # bump the little-endian version field
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path, small_net(seed=6))

    def test_shape_mismatch_between_net_and_file(self, tmp_path):
        net = small_net(seed=7)
        path = tmp_path / "ck.ls3d"
        save_checkpoint(path, net)
        other_spec = NetworkSpec(channels=8, num_resblocks=2,
                                 temporal_deconv_after=frozenset({1, 2}),
                                 branch_kernel=1)
        other = build_net(other_spec, seed=0)
        with pytest.raises(CheckpointError, match="shape"):
            load_checkpoint(path, other)
