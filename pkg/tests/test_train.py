import math

import numpy as np
import pytest

from bert4xmr.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from bert4xmr.data import Dataset, SyntheticSpec, synthesize_markets
from bert4xmr.evaluation import evaluate_market
from bert4xmr.model import ModelConfig, ParameterSet
from bert4xmr.numerics import ProtocolError
from bert4xmr.train import AdamState, TrainPlan, adam_step, bce_loss, fit, loss_and_grads, train_epoch


def hand_adam(theta, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam written out term by term."""
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        out.append(theta)
    return out


class TestBCE:
    def test_half(self):
        loss, grad = bce_loss([0.5], [1.0])
        assert loss == pytest.approx(math.log(2), abs=1e-12)
        assert grad[0] == pytest.approx(-2.0)

    def test_negative_near_zero(self):
        loss, _ = bce_loss([1e-12], [0.0])
        assert 0.0 <= loss < 1e-6

    def test_two_examples(self):
        loss, grad = bce_loss([0.9, 0.2], [1.0, 0.0])
        assert loss == pytest.approx(-math.log(0.9) - math.log(0.8), abs=1e-12)
        assert loss == pytest.approx(0.328504, abs=1e-6)
        np.testing.assert_allclose(grad, [-1 / 0.9, 1 / 0.8])

    @pytest.mark.parametrize("p", [0.0, 1.0])
    def test_clamped_extremes_finite(self, p):
        loss, grad = bce_loss([p, p], [0.0, 1.0])
        assert math.isfinite(loss) and np.all(np.isfinite(grad))


class TestAdam:
    def test_zero_grad_no_move(self):
        values = {"w": np.array([1.0, -2.0])}
        adam_step(values, {"w": np.zeros(2)}, AdamState(l2=0.0))
        np.testing.assert_array_equal(values["w"], [1.0, -2.0])

    @pytest.mark.parametrize("g", [3.0, -0.02])
    def test_first_step_magnitude(self, g):
        values = {"w": np.array([0.0])}
        adam_step(values, {"w": np.array([g])}, AdamState(lr=1e-3, l2=0.0))
        assert values["w"][0] == pytest.approx(-1e-3 * math.copysign(1.0, g), rel=1e-6)

    def test_quadratic_trajectory(self):
        expected = hand_adam(1.0, lambda th: 2 * th, 3, 0.1)
        values = {"theta": np.array([1.0])}
        state = AdamState(lr=0.1, l2=0.0)
        got = []
        for _ in range(3):
            adam_step(values, {"theta": 2 * values["theta"]}, state)
            got.append(values["theta"][0])
        assert state.t == 3
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)
        # frozen values from the scalar recurrence above
        np.testing.assert_allclose(got, [0.9000000005, 0.8004122287, 0.7015862729], atol=1e-9)

    def test_coupled_l2(self):
        values = {"w": np.array([2.0])}
        adam_step(values, {"w": np.array([0.0])}, AdamState(lr=0.1, l2=0.5))
        # gradient becomes 0.5 * 2 = 1 > 0, so the first step is -lr
        assert values["w"][0] == pytest.approx(1.9, abs=1e-8)

    def test_frozen_skipped(self):
        values = {"a": np.array([1.0]), "b": np.array([1.0])}
        adam_step(values, {"a": np.array([1.0]), "b": np.array([1.0])}, AdamState(), frozen={"b"})
        assert values["b"][0] == 1.0 and values["a"][0] < 1.0

    def test_step_bound(self):
        rng = np.random.default_rng(0)
        values = {"w": rng.normal(size=50)}
        state = AdamState(lr=0.01, l2=0.0)
        for _ in range(30):
            before = values["w"].copy()
            adam_step(values, {"w": rng.normal(scale=rng.uniform(1e-3, 1e3), size=50)}, state)
            assert np.all(np.abs(values["w"] - before) <= 2 * state.lr)


def small_dataset(seed=0):
    recs = synthesize_markets(SyntheticSpec([12, 10], 20, 7, 1.0), np.random.default_rng(seed))
    return Dataset.from_records(recs, seed=seed, eval_negatives=5)


def small_config(ds):
    return ModelConfig(n_items=ds.catalog.n_items, n_markets=ds.catalog.n_markets, d=8, n_layers=1, n_heads=2, max_len=7, dropout_rate=0.1)


class TestTrainLoop:
    def test_empty_dataset_epoch(self):
        ds = small_dataset()
        empty = Dataset(ds.catalog, [], [], [], seed=0)
        params = ParameterSet.initialize(small_config(ds), np.random.default_rng(0))
        state = AdamState()
        assert train_epoch(params, empty, TrainPlan(), np.random.default_rng(0), state) == 0.0
        assert state.t == 0

    def test_seeded_loss_trajectory(self):
        ds = small_dataset()
        runs = []
        for _ in range(2):
            result = fit(TrainPlan(max_epochs=3, patience=5, batch_size=32, seed=4), ds, config=small_config(ds))
            runs.append([h.train_loss for h in result.history])
        assert runs[0] == runs[1]

    def test_single_user_loss_decreases(self):
        ds = small_dataset()
        ds = Dataset(ds.catalog, ds.splits[:1], ds.val_negatives[:1], ds.test_negatives[:1], seed=0)
        params = ParameterSet.initialize(small_config(ds), np.random.default_rng(0))
        plan = TrainPlan(batch_size=64, lr=1e-2)
        state = plan.optimizer()
        losses = [train_epoch(params, ds, plan, np.random.default_rng(e), state) for e in range(10)]
        smooth = np.convolve(losses, np.ones(3) / 3, mode="valid")
        assert np.all(np.diff(smooth) < 0)

    def test_max_epochs_one(self):
        ds = small_dataset()
        result = fit(TrainPlan(max_epochs=1, batch_size=64), ds, config=small_config(ds))
        assert len(result.history) == 1 and result.best_epoch == 1

    def test_patience_zero_stops_at_first_stale_epoch(self):
        ds = small_dataset()
        result = fit(TrainPlan(max_epochs=30, patience=0, batch_size=64, seed=1), ds, config=small_config(ds))
        scores = [h.val_ndcg10 for h in result.history]
        best = -1.0
        for i, s in enumerate(scores):
            if s <= best:
                assert i == len(scores) - 1
            best = max(best, s)

    def test_returns_best_epoch_params(self):
        ds = small_dataset()
        result = fit(TrainPlan(max_epochs=6, patience=10, batch_size=64, seed=2), ds, config=small_config(ds))
        val = evaluate_market(result.params, ds, None, "val").ndcg10
        assert val == result.best_val_ndcg10 == max(h.val_ndcg10 for h in result.history)

    def test_finetune_requires_checkpoint(self):
        ds = small_dataset()
        with pytest.raises(ProtocolError):
            fit(TrainPlan(phase="finetune", market=0), ds)

    def test_finetune_touches_only_target_market(self):
        ds = small_dataset()
        pre = fit(TrainPlan(max_epochs=2, batch_size=64), ds, config=small_config(ds))
        plan = TrainPlan(phase="finetune", market=1, max_epochs=2, batch_size=64, l2=0.0)
        ft = fit(plan, ds, initial=pre.params)
        assert ft.history[0].market_scope == "m1"
        # without weight decay, market 0's row sees an exactly zero gradient
        np.testing.assert_array_equal(ft.params["market_emb"][0], pre.params["market_emb"][0])
        assert not np.allclose(ft.params["market_emb"][1], pre.params["market_emb"][1])

    def test_gradients_cover_all_parameters(self):
        ds = small_dataset()
        params = ParameterSet.initialize(small_config(ds), np.random.default_rng(0))
        ex = ds.training_examples(np.random.default_rng(0), params.config.max_len)
        batch, labels = ex.batch(np.arange(40))
        _, grads = loss_and_grads(params, batch, labels)
        assert set(grads) == set(params.values)


class TestCheckpoint:
    def _ckpt(self):
        cfg = ModelConfig(n_items=6, n_markets=2, d=4, n_layers=1, n_heads=2, max_len=4)
        params = ParameterSet.initialize(cfg, np.random.default_rng(0))
        params.disable_market_embedding()
        return Checkpoint(params, {"a": 1, "b": 2, "c": 3, "d": 4, "e": 5}, {"x": 0, "y": 1}, {"seed": 3, "epoch": 7, "phase": "pretrain"})

    def test_roundtrip_bit_exact(self, tmp_path):
        ckpt = self._ckpt()
        save_checkpoint(ckpt, tmp_path / "a.ckpt")
        back = load_checkpoint(tmp_path / "a.ckpt")
        assert back.params.config == ckpt.params.config
        assert back.items == ckpt.items and back.markets == ckpt.markets and back.provenance == ckpt.provenance
        assert back.params.frozen == {"market_emb"}
        for name, arr in ckpt.params.values.items():
            assert back.params[name].tobytes() == arr.tobytes()
        save_checkpoint(back, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_header_layout(self, tmp_path):
        save_checkpoint(self._ckpt(), tmp_path / "a.ckpt")
        raw = (tmp_path / "a.ckpt").read_bytes()
        assert raw[:4] == b"BXMR" and int.from_bytes(raw[4:8], "little") == 1

    def test_version_mismatch(self, tmp_path):
        save_checkpoint(self._ckpt(), tmp_path / "a.ckpt")
        raw = bytearray((tmp_path / "a.ckpt").read_bytes())
        raw[4:8] = (2).to_bytes(4, "little")
        (tmp_path / "b.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version 2"):
            load_checkpoint(tmp_path / "b.ckpt")

    def test_bad_magic_and_truncation(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOPE\x01\x00\x00\x00")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.ckpt")
        save_checkpoint(self._ckpt(), tmp_path / "a.ckpt")
        (tmp_path / "t.ckpt").write_bytes((tmp_path / "a.ckpt").read_bytes()[:-5])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")
