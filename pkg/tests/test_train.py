import math

import numpy as np
import pytest

from socnn import datagen as dg
from socnn.models import LossBundle, SOCNNConfig, SOCNNModel
from socnn.ndcore import NonFiniteError
from socnn import train as tr


class TestGlorot:
    def test_support_and_variance(self):
        shape = (100, 1000)
        w = tr.glorot_init(shape, np.random.default_rng(0))
        L = tr.glorot_limit(shape)
        assert np.abs(w).max() <= L
        assert w.var() == pytest.approx(L ** 2 / 3, rel=0.03)

    def test_conv_fans_include_kernel(self):
        assert tr.glorot_limit((8, 4, 3)) == pytest.approx(math.sqrt(6 / (4 * 3 + 8 * 3)))

    def test_seeded(self):
        a = tr.glorot_init((5, 4), np.random.default_rng(7))
        b = tr.glorot_init((5, 4), np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)


class TestAdam:
    def test_zero_gradients_leave_params(self):
        p = {"w": np.array([1.0, -2.0])}
        opt = tr.Adam()
        for _ in range(5):
            opt.step(p, {"w": np.zeros(2)}, 0.1)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    @pytest.mark.parametrize("g", [1e-3, 1.0, 1e3])
    def test_first_step_magnitude_is_lr(self, g):
        p = {"w": np.array([0.0])}
        tr.Adam().step(p, {"w": np.array([g])}, 0.01)
        assert abs(p["w"][0]) == pytest.approx(0.01, rel=1e-4)

    def test_quadratic_bowl(self):
        p = {"w": np.array([1.0])}
        opt = tr.Adam()
        for _ in range(500):
            opt.step(p, {"w": 2 * p["w"]}, 0.05)
        assert abs(p["w"][0]) < 1e-3

    def test_non_finite_gradient(self):
        with pytest.raises(NonFiniteError):
            tr.Adam().step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, 0.1)


class TestClip:
    def test_below_threshold_untouched(self):
        g = {"a": np.array([0.1, 0.2])}
        before = g["a"].copy()
        tr.clip_gradients(g, 1.0)
        np.testing.assert_array_equal(g["a"], before)

    def test_three_four_five(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        tr.clip_gradients(g, 1.0)
        assert g["a"][0] == pytest.approx(0.6) and g["b"][0] == pytest.approx(0.8)
        assert tr.global_norm(g) == pytest.approx(1.0, abs=1e-15)

    def test_direction_preserved(self, rng):
        g = {"a": rng.standard_normal(10) * 10}
        before = g["a"].copy()
        tr.clip_gradients(g, 0.001)
        cos = before @ g["a"] / (np.linalg.norm(before) * np.linalg.norm(g["a"]))
        assert cos == pytest.approx(1.0, abs=1e-12)
        assert tr.global_norm(g) <= 0.001 + 1e-12


class TestSchedule:
    def test_reduction_at_epoch_12(self):
        s = tr.PlateauSchedule(1e-3)
        actions = [s.update(v) for v in [5, 4] + [4] * 10]
        assert actions[-1] == "reduce" and actions.count("reduce") == 1
        assert s.lr == pytest.approx(1e-4)

    def test_stops_ten_after_second_reduction(self):
        s = tr.PlateauSchedule(1e-3)
        actions = [s.update(v) for v in [1.0] + [2.0] * 40]
        reduce_at = [i + 1 for i, a in enumerate(actions) if a == "reduce"]
        assert reduce_at == [11, 21]
        assert actions.index("stop") + 1 == 31

    def test_ties_do_not_improve(self):
        s = tr.PlateauSchedule(1e-3)
        assert s.update(1.0) == "improved"
        assert s.update(1.0) == "wait"


class _StubModel:
    """Minimal model: one parameter vector, a fixed per-batch gradient."""

    kind = "stub"

    def __init__(self):
        self.params = {"w": np.zeros(3)}
        self.grads = {"w": np.zeros(3)}
        self.buffers = {}

    def zero_grad(self):
        self.grads["w"].fill(0.0)

    def train_batch(self, X, Y, rng):
        self.grads["w"][...] = np.array([0.3, -0.2, 0.1]) * 50
        return LossBundle(1.0, 0.0, 1.0)

    def evaluate(self, X, Y):
        return LossBundle(float(self.params["w"] @ self.params["w"]), 0.0, 0.0)


def _toy_windows(n=40):
    X = np.zeros((n, 1, 2))
    Y = np.zeros((n, 1))
    tags = np.array(["train"] * (n // 2) + ["val"] * (n // 4) + ["test"] * (n - n // 2 - n // 4))
    return dg.WindowSet(X, Y, np.arange(n), tags, [0], [0])


class TestRunTraining:
    def test_stubbed_losses_follow_schedule(self):
        seq = iter([5.0, 4.0] + [4.0] * 100)
        snapshots = {}

        def on_epoch(entry, model):
            snapshots[entry["epoch"]] = model.params["w"].copy()

        model = _StubModel()
        rep = tr.run_training(model, _toy_windows(), tr.TrainConfig(batch_size=8, max_epochs=100),
                              loss_fn=lambda m, X, Y: next(seq), on_epoch=on_epoch)
        actions = [e["action"] for e in rep.epochs]
        assert [i + 1 for i, a in enumerate(actions) if a == "reduce"] == [12, 22]
        assert len(rep.epochs) == 32 and rep.stop_reason == "early_stopping"
        assert rep.best_epoch == 2 and rep.lr_reductions == 2
        np.testing.assert_array_equal(model.params["w"], snapshots[2])
        lrs = [e["lr"] for e in rep.epochs]
        assert lrs[11] == 1e-3 and lrs[12] == pytest.approx(1e-4) and lrs[22] == pytest.approx(1e-5)

    def test_best_val_is_min_and_monotone(self):
        vals = iter([3.0, 2.0, 2.5, 1.0, 1.5] + [9.0] * 100)
        rep = tr.run_training(_StubModel(), _toy_windows(), tr.TrainConfig(batch_size=8),
                              loss_fn=lambda m, X, Y: next(vals))
        assert rep.best_val_loss == min(e["val_loss"] for e in rep.epochs) == 1.0

    def test_clipped_norm_bound(self):
        rep = tr.run_training(_StubModel(), _toy_windows(), tr.TrainConfig(batch_size=8, max_epochs=3,
                                                                           clip_threshold=0.5))
        assert max(e["max_grad_norm"] for e in rep.epochs) <= 0.5 + 1e-12

    def test_empty_split(self):
        ws = _toy_windows()
        ws.tags[:] = "train"
        with pytest.raises(tr.TrainingError):
            tr.run_training(_StubModel(), ws, tr.TrainConfig())

    def test_nan_recovery_then_abort(self):
        class Exploding(_StubModel):
            def train_batch(self, X, Y, rng):
                return LossBundle(float("nan"), 0.0, float("nan"))

        with pytest.raises(tr.TrainingError):
            tr.run_training(Exploding(), _toy_windows(), tr.TrainConfig(batch_size=8))

    def test_single_nan_epoch_recovers(self):
        class Flaky(_StubModel):
            calls = 0

            def train_batch(self, X, Y, rng):
                Flaky.calls += 1
                if Flaky.calls == 4:
                    return LossBundle(float("nan"), 0.0, float("nan"))
                return super().train_batch(X, Y, rng)

        rep = tr.run_training(Flaky(), _toy_windows(), tr.TrainConfig(batch_size=8, max_epochs=4))
        assert rep.epochs[1].get("diverged") and rep.epochs[2]["lr"] == pytest.approx(5e-4)


class TestSOCNNTraining:
    def _setup(self):
        frame = dg.gen_asynchronous(dg.GeneratorSpec(K=4, N=400, seed=0))
        ws = dg.make_windows(frame, M=8, seed=0)
        cfg = SOCNNConfig(d=6, target_index=[4], M=8, significance_depth=2, significance_filters=4)
        return ws, cfg

    def test_deterministic_epoch_logs(self):
        ws, cfg = self._setup()
        logs = []
        for _ in range(2):
            model = SOCNNModel(cfg, np.random.default_rng(1))
            rep = tr.run_training(model, ws, tr.TrainConfig(batch_size=32, max_epochs=2, seed=5))
            logs.append(rep.to_dict(include_timing=False))
        assert logs[0] == logs[1]

    def test_shuffle_differs_between_epochs(self):
        ws, cfg = self._setup()
        rep = tr.run_training(SOCNNModel(cfg, np.random.default_rng(1)), ws,
                              tr.TrainConfig(batch_size=32, max_epochs=2))
        assert rep.epochs[0]["order_crc"] != rep.epochs[1]["order_crc"]

    def test_loss_decreases(self):
        ws, cfg = self._setup()
        rep = tr.run_training(SOCNNModel(cfg, np.random.default_rng(1)), ws,
                              tr.TrainConfig(batch_size=32, max_epochs=15, initial_lr=3e-3))
        assert rep.epochs[-1]["train_loss"] < rep.epochs[0]["train_loss"]
        assert rep.test_mse is not None and math.isfinite(rep.test_mse)
