import math

import numpy as np
import pytest

from flamerec.backbone import NetworkParams
from flamerec.data import build_sequences
from flamerec.errors import ConfigError, ContractError, FormatError
from flamerec.numerics import Tensor
from flamerec.synthetic import markov_log
from flamerec.training import (
    METRIC_COLUMNS,
    OptimizerState,
    TrainConfig,
    adam_step,
    checkpoint_from_params,
    load_checkpoint,
    pretrain_frozen,
    read_metrics_csv,
    save_checkpoint,
    train,
    train_baseline,
    train_flame,
    write_metrics_csv,
)

from helpers import tiny_params


@pytest.fixture(scope="module")
def ds():
    return build_sequences(markov_log(n_users=48, n_items=20, min_len=6, max_len=10, seed=7), max_len=8)


def cfg(**kw):
    base = dict(d=8, max_len=8, dropout=0.2, batch_size=16, epochs=3, seed=0, tau=1.0, lambda0=0.1)
    kw = {**base, **kw}
    kw.setdefault("patience", kw["epochs"])
    return TrainConfig(**kw)


@pytest.fixture(scope="module")
def frozen(ds):
    return pretrain_frozen(cfg(seed=99), ds).checkpoint


class TestAdam:
    def test_zero_gradient_no_move(self):
        t = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        t.grad = np.zeros(2)
        adam_step({"w": t}, OptimizerState(), 1e-3)
        np.testing.assert_array_equal(t.data, [1.0, -2.0])

    def test_hand_formula(self):
        g1, g2 = np.array([0.5, -1.0]), np.array([0.1, 0.3])
        t = Tensor(np.array([0.2, 0.4]), requires_grad=True)
        st = OptimizerState()
        x, m, v = t.data.copy(), np.zeros(2), np.zeros(2)
        for step, g in enumerate((g1, g2), start=1):
            t.grad = g.copy()
            adam_step({"w": t}, st, 1e-3)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 1e-3 * (m / (1 - 0.9 ** step)) / (np.sqrt(v / (1 - 0.999 ** step)) + 1e-8)
        np.testing.assert_allclose(t.data, x, atol=1e-7)

    def test_first_step_size_is_lr(self):
        t = Tensor(np.array([0.0, 0.0]), requires_grad=True)
        t.grad = np.array([3.0, -0.01])
        adam_step({"w": t}, OptimizerState(), 1e-3)
        np.testing.assert_allclose(t.data, [-1e-3, 1e-3], rtol=1e-4)

    def test_identical_gradients_identical_updates(self):
        a = Tensor(np.ones(3), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        sa, sb = OptimizerState(), OptimizerState()
        for g in (np.array([1.0, 2.0, -3.0]), np.array([0.5, 0.0, 1.0])):
            a.grad, b.grad = g.copy(), g.copy()
            adam_step({"w": a}, sa, 1e-2)
            adam_step({"w": b}, sb, 1e-2)
        assert a.data.tobytes() == b.data.tobytes()

    def test_missing_gradient(self):
        t = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ContractError, match="w"):
            adam_step({"w": t}, OptimizerState(), 1e-3)

    def test_padding_row_fixed(self):
        t = Tensor(np.zeros((3, 2)), requires_grad=True)
        t.grad = np.ones((3, 2))
        adam_step({"item_table": t}, OptimizerState(), 1e-3)
        np.testing.assert_array_equal(t.data[0], 0.0)
        assert np.all(t.data[1:] < 0)

    def test_frozen_tensor_skipped(self):
        t = Tensor(np.ones(2), requires_grad=False)
        adam_step({"w": t}, OptimizerState(), 1e-3)
        np.testing.assert_array_equal(t.data, 1.0)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        p = tiny_params(seed=3)
        ck = checkpoint_from_params(p, cfg(), epoch=4)
        path = tmp_path / "a.ckpt"
        save_checkpoint(ck, path)
        back = load_checkpoint(path)
        assert back.meta == {"epoch": 4}
        assert back.hyper == ck.hyper
        for name, arr in p.state_dict().items():
            assert back.tensors[name].dtype == arr.dtype
            assert back.tensors[name].tobytes() == arr.tobytes()
        q = back.to_params()
        assert q.config == p.config

    def test_float64_round_trip(self, tmp_path):
        p = tiny_params(seed=3, dtype=np.float64)
        path = tmp_path / "b.ckpt"
        save_checkpoint(checkpoint_from_params(p), path)
        assert load_checkpoint(path).tensors["item_table"].dtype == np.float64

    def test_truncated(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(checkpoint_from_params(tiny_params()), path)
        raw = path.read_bytes()
        for cut in (5, len(raw) // 2, len(raw) - 1):
            path.write_bytes(raw[:cut])
            with pytest.raises(FormatError):
                load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(checkpoint_from_params(tiny_params()), path)
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_shape_mismatch_names_tensor(self, tmp_path, ds):
        small = NetworkParams.init(cfg(d=4, n_heads=2).network_config(ds.n_items), np.random.default_rng(0))
        path = tmp_path / "s.ckpt"
        save_checkpoint(checkpoint_from_params(small), path)
        with pytest.raises(ConfigError, match="item_table|position_table|layers"):
            load_checkpoint(path).to_params(cfg(d=8).network_config(ds.n_items))
        with pytest.raises(ConfigError, match="d=4"):
            train_flame(cfg(d=8), ds, load_checkpoint(path))


class TestConfig:
    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            TrainConfig(mode="boost")

    def test_patience_bounds(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=5, patience=6)
        with pytest.raises(ConfigError):
            TrainConfig(patience=0)

    def test_lambda_endpoints(self):
        c = TrainConfig(epochs=200, lambda0=0.1, lambda_R=1e-5)
        assert c.lambda_at(1) == 0.1 and c.lambda_at(200) == 1e-5

    def test_single_epoch(self):
        c = TrainConfig(epochs=1, patience=1)
        assert c.lambda_at(1) == c.lambda0


class TestTraining:
    def test_pretrain_smoke(self, ds, tmp_path):
        r = pretrain_frozen(cfg(epochs=1, patience=1), ds)
        assert r.epochs_run == 1 and r.best_epoch == 1
        save_checkpoint(r.checkpoint, tmp_path / "f.ckpt")
        assert load_checkpoint(tmp_path / "f.ckpt").meta["mode"] == "single"

    def test_loss_decreases(self, ds):
        r = train(cfg(mode="single", epochs=6, patience=6, dropout=0.0), ds)
        losses = [h["train_loss"] for h in r.trace]
        assert losses[-1] < losses[0]

    def test_flame_leaves_frozen_untouched(self, ds, frozen):
        before = {k: v.copy() for k, v in frozen.tensors.items()}
        r = train_flame(cfg(), ds, frozen)
        for k, v in before.items():
            assert frozen.tensors[k].tobytes() == v.tobytes()
        assert r.checkpoint.meta["mode"] == "flame"
        lams = [h["lambda"] for h in r.trace]
        assert lams[0] == 0.1 and lams[-1] == 1e-5
        assert all(h["mkt_loss"] > 0 for h in r.trace)

    @pytest.mark.parametrize("mode", ["single", "flame", "ensemble_guide", "ensemble_scratch"])
    def test_deterministic(self, ds, frozen, mode, tmp_path):
        a = train(cfg(mode=mode, epochs=2), ds, frozen)
        b = train(cfg(mode=mode, epochs=2), ds, frozen)
        write_metrics_csv(a.trace, tmp_path / "a.csv", include_timing=False)
        write_metrics_csv(b.trace, tmp_path / "b.csv", include_timing=False)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        for k in a.checkpoint.tensors:
            assert a.checkpoint.tensors[k].tobytes() == b.checkpoint.tensors[k].tobytes()

    def test_seed_matters(self, ds):
        a = train(cfg(mode="single", epochs=1, patience=1, seed=1), ds)
        b = train(cfg(mode="single", epochs=1, patience=1, seed=2), ds)
        assert a.trace[0]["train_loss"] != b.trace[0]["train_loss"]

    def test_scratch_two_series(self, ds):
        r = train_baseline(cfg(mode="ensemble_scratch", epochs=2), ds)
        assert set(r.history) == {"a", "b"} and set(r.checkpoints) == {"a", "b"}
        assert len(r.history["a"]) == len(r.history["b"]) == 2

    def test_guide_frozen_series_constant(self, ds, frozen):
        r = train_baseline(cfg(mode="ensemble_guide", epochs=3), ds, frozen)
        vals = {h["val_NDCG@20"] for h in r.history["frozen"]}
        assert len(vals) == 1

    def test_guide_needs_frozen(self, ds):
        with pytest.raises(ConfigError):
            train_baseline(cfg(mode="ensemble_guide"), ds)

    def test_baseline_rejects_flame(self, ds, frozen):
        with pytest.raises(ConfigError):
            train_baseline(cfg(mode="flame"), ds, frozen)

    def test_early_stopping_returns_best(self, ds):
        r = train(cfg(mode="single", epochs=8, patience=2, lr=0.05), ds)
        scores = [h["val_NDCG@20"] for h in r.trace]
        assert r.best_epoch == int(np.argmax(scores)) + 1
        assert r.checkpoint.meta["best_val_ndcg20"] == max(scores)
        assert r.epochs_run == len(scores)
        assert r.epochs_run == 8 or r.epochs_run - r.best_epoch == 2

    def test_zero_lambda_reduces_to_single(self, ds, frozen):
        a = train_flame(cfg(lambda0=0.0, lambda_R=0.0), ds, frozen)
        b = train(cfg(mode="single", lambda0=0.0, lambda_R=0.0), ds)
        assert [h["train_loss"] for h in a.trace] == [h["train_loss"] for h in b.trace]

    def test_per_position_runs(self, ds, frozen):
        r = train_flame(cfg(per_position=True, epochs=1, patience=1), ds, frozen)
        assert math.isfinite(r.trace[0]["train_loss"])


class TestMetricsCsv:
    def test_round_trip(self, tmp_path):
        rec = {c: 0.25 for c in METRIC_COLUMNS}
        rec["epoch"] = 1
        write_metrics_csv([rec], tmp_path / "m.csv")
        (row,) = read_metrics_csv(tmp_path / "m.csv")
        assert list(row) == METRIC_COLUMNS and row["val_NDCG@20"] == 0.25

    def test_na_timing(self, tmp_path):
        rec = {c: 1.5 for c in METRIC_COLUMNS}
        write_metrics_csv([rec], tmp_path / "m.csv", include_timing=False)
        assert read_metrics_csv(tmp_path / "m.csv")[0]["wall_seconds"] == "NA"
