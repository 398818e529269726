import struct

import numpy as np
import pytest

import dualgate.train as train_mod
from conftest import tiny_config
from dualgate.data import SyntheticSpec, WindowSet, chrono_split, make_synthetic, make_windows, stack_windows
from dualgate.model import init_params, model_forward
from dualgate.train import (Checkpoint, CheckpointFormatError, History, OptimizerState, TrainConfig,
                            adam_step, aggregate_horizons, clip_by_global_norm, evaluate, load_checkpoint,
                            loss_and_grads, mae, mse, predict, save_checkpoint, train_loop)


def tiny_splits(n_steps=140, seed=0):
    data = make_synthetic(SyntheticSpec(n_steps=n_steps, text_dim=8, seed=seed))
    ws = stack_windows(make_windows(data.series, 8, 4))
    idx = np.searchsorted(data.series.timestamps, ws.end_ts)
    return chrono_split(ws), data.embeddings[idx]


class TestMetrics:
    def test_perfect(self):
        assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0 and mae([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_hand_case(self):
        assert mse([0.0, 0.0], [1.0, 2.0]) == 2.5
        assert mae([0.0, 0.0], [1.0, 2.0]) == 1.5

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mse([0.0], [1.0, 2.0])

    def test_aggregate(self):
        agg = aggregate_horizons([{"horizon": 4, "mse": 1.0, "mae": 2.0}, {"horizon": 8, "mse": 3.0, "mae": 4.0}])
        assert agg == {"horizons": [4, 8], "mse": 2.0, "mae": 3.0}


class TestAdam:
    def test_first_step(self):
        params = {"w": np.zeros(1)}
        adam_step(params, {"w": np.array([2.0])}, OptimizerState.zeros_like(params), TrainConfig(lr=1e-4))
        assert abs(params["w"][0] - (-1e-4 * 2.0 / (2.0 + 1e-8))) < 1e-18

    def test_zero_gradient(self):
        params = {"w": np.array([1.5, -2.0])}
        state = OptimizerState.zeros_like(params)
        adam_step(params, {"w": np.zeros(2)}, state, TrainConfig())
        assert np.array_equal(params["w"], [1.5, -2.0]) and state.t == 1

    def test_nan_aborts_untouched(self):
        params = {"a": np.ones(2), "b": np.ones(2)}
        state = OptimizerState.zeros_like(params)
        with pytest.raises(FloatingPointError, match="'b'"):
            adam_step(params, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, state, TrainConfig())
        assert np.array_equal(params["a"], np.ones(2)) and state.t == 0

    def test_matches_reference_over_steps(self, rng):
        cfg = TrainConfig(lr=0.01)
        params = {"w": rng.normal(size=3)}
        ref, m, v = params["w"].copy(), np.zeros(3), np.zeros(3)
        state = OptimizerState.zeros_like(params)
        for t in range(1, 6):
            g = rng.normal(size=3)
            adam_step(params, {"w": g}, state, cfg)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(params["w"], ref, rtol=1e-13)

    def test_clip(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_by_global_norm(g, 1.0) == 5.0
        np.testing.assert_allclose([g["a"][0], g["b"][0]], [0.6, 0.8])
        g = {"a": np.array([0.3])}
        clip_by_global_norm(g, 1.0)
        assert g["a"][0] == 0.3


def test_loss_gradient_matches_finite_difference(rng):
    cfg = tiny_config()
    params = init_params(cfg)
    x, y, h = rng.normal(size=(3, 8, 1)), rng.normal(size=(3, 4, 1)), rng.normal(size=(3, 8))
    _, grads = loss_and_grads(params, x, y, h, cfg)
    for name in ("head.W", "patch.W", "layers.0.attn.Wq", "layers.0.ln2.gamma"):
        for idx in list(np.ndindex(params[name].shape))[:4]:
            old = params[name][idx]
            params[name][idx] = old + 1e-6
            up = loss_and_grads(params, x, y, h, cfg)[0]
            params[name][idx] = old - 1e-6
            down = loss_and_grads(params, x, y, h, cfg)[0]
            params[name][idx] = old
            num = (up - down) / 2e-6
            assert abs(grads[name][idx] - num) <= 1e-5 * max(1.0, abs(num)), (name, idx)


class TestTrainLoop:
    def test_zero_epochs(self):
        (tr, va, _), emb = tiny_splits()
        cfg = tiny_config()
        ckpt, hist = train_loop(cfg, TrainConfig(max_epochs=0), tr, va)
        assert hist.train_loss == [] and hist.best_epoch is None
        ref = init_params(cfg)
        assert all(np.array_equal(ckpt.params[k], ref[k]) for k in ref)

    def test_deterministic(self):
        (tr, va, _), emb = tiny_splits()
        n = len(tr)
        cfg, tc = tiny_config(), TrainConfig(max_epochs=2, lr=1e-3)
        a = train_loop(cfg, tc, tr, va, emb[:n], emb[n:n + len(va)])
        b = train_loop(cfg, tc, tr, va, emb[:n], emb[n:n + len(va)])
        assert a[1] == b[1]
        assert all(np.array_equal(a[0].params[k], b[0].params[k]) for k in a[0].params)

    def test_patience_stops_and_keeps_best(self, monkeypatch):
        (tr, va, _), _ = tiny_splits()
        values = iter([1.0, 2.0, 3.0, 4.0, 5.0])
        monkeypatch.setattr(train_mod, "mse", lambda p, t: next(values))
        ckpt, hist = train_loop(tiny_config(), TrainConfig(max_epochs=10, patience=2), tr, va)
        assert hist.val_mse == [1.0, 2.0, 3.0]
        assert hist.best_epoch == 0

    def test_best_epoch_is_minimum(self):
        (tr, va, _), emb = tiny_splits()
        n = len(tr)
        ckpt, hist = train_loop(tiny_config(), TrainConfig(max_epochs=4, lr=3e-3, patience=4), tr, va,
                                emb[:n], emb[n:n + len(va)])
        assert hist.best_epoch == int(np.argmin(hist.val_mse))
        res = evaluate(ckpt, va, emb[n:n + len(va)])
        assert res["mse"] == hist.val_mse[hist.best_epoch]

    def test_empty_split(self):
        (tr, va, _), _ = tiny_splits()
        with pytest.raises(ValueError):
            train_loop(tiny_config(), TrainConfig(), tr.subset(slice(0, 0)), va)

    def test_history_csv(self):
        h = History([0.5, 0.25], [1.0, 0.5], [0.9, 0.4], 1)
        assert h.to_csv().splitlines() == ["epoch,train_loss,val_mse,val_mae,best",
                                           "1,0.5,1.0,0.9,0", "2,0.25,0.5,0.4,1"]


class TestEvaluate:
    def test_perfect_predictor(self):
        cfg = tiny_config(revin=False)
        params = init_params(cfg)
        params["head.W"][:] = 0
        params["head.b"][:] = 2.5
        split = WindowSet(np.full((6, 8, 1), 2.5), np.full((6, 4, 1), 2.5), np.arange(6))
        res = evaluate(Checkpoint(cfg, params), split)
        assert res["mse"] == 0.0 and res["mae"] == 0.0 and res["n_windows"] == 6

    def test_zero_predictor_gives_target_variance(self, rng):
        cfg = tiny_config(revin=False)
        params = init_params(cfg)
        params["head.W"][:] = 0
        params["head.b"][:] = 0
        y = rng.normal(size=(500, 4, 1))
        y = (y - y.mean()) / y.std()
        res = evaluate(Checkpoint(cfg, params), WindowSet(rng.normal(size=(500, 8, 1)), y, np.arange(500)))
        assert abs(res["mse"] - y.var()) < 1e-12

    def test_shape_mismatch(self, rng):
        cfg = tiny_config()
        with pytest.raises(ValueError):
            evaluate(Checkpoint(cfg, init_params(cfg)), WindowSet(np.zeros((2, 9, 1)), np.zeros((2, 4, 1)), np.arange(2)))


class TestCheckpoint:
    def save(self, tmp_path, cfg=None):
        cfg = cfg or tiny_config(ablation="no_smoe")
        p = tmp_path / "a.ckpt"
        params = init_params(cfg)
        save_checkpoint(p, params, cfg)
        return p, params, cfg

    def test_idempotent(self, tmp_path):
        p, _, _ = self.save(tmp_path)
        params, cfg = load_checkpoint(p)
        save_checkpoint(tmp_path / "b.ckpt", params, cfg)
        assert (tmp_path / "b.ckpt").read_bytes() == p.read_bytes()

    def test_loaded_predictions_match_rounded(self, tmp_path, rng):
        p, params, cfg = self.save(tmp_path)
        loaded, cfg2 = load_checkpoint(p)
        assert cfg2 == cfg
        rounded = Checkpoint(cfg, params).rounded().params
        x, h = rng.normal(size=(5, 8, 1)), rng.normal(size=(5, 8))
        assert np.array_equal(predict(loaded, cfg2, x, h), predict(rounded, cfg, x, h))

    def test_bad_magic(self, tmp_path):
        p, _, _ = self.save(tmp_path)
        raw = bytearray(p.read_bytes())
        raw[0] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(p)

    @pytest.mark.parametrize("delta", [1, -1, 10**6])
    def test_tampered_header_length(self, tmp_path, delta):
        p, _, _ = self.save(tmp_path)
        raw = bytearray(p.read_bytes())
        (hlen,) = struct.unpack_from("<I", raw, 8)
        struct.pack_into("<I", raw, 8, hlen + delta)
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(p)

    def test_truncated_payload(self, tmp_path):
        p, _, _ = self.save(tmp_path)
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(CheckpointFormatError, match="payload"):
            load_checkpoint(p)

    def test_mismatched_shapes(self, tmp_path):
        cfg = tiny_config()
        params = init_params(cfg)
        params["head.W"] = np.zeros((3, 3))
        save_checkpoint(tmp_path / "x.ckpt", params, cfg)
        with pytest.raises(CheckpointFormatError, match="shapes"):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_model_forward_after_load(self, tmp_path, rng):
        p, params, cfg = self.save(tmp_path)
        loaded, _ = load_checkpoint(p)
        x, h = rng.normal(size=(8, 1)), rng.normal(size=8)
        np.testing.assert_allclose(model_forward(x, h, loaded, cfg), model_forward(x, h, params, cfg), rtol=1e-4)
