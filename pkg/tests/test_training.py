import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from heatgrid import models
from heatgrid import training as TR
from heatgrid.errors import CheckpointError, ConfigError, DatasetError, NonFiniteError, ShapeError
from heatgrid.pipeline import NormalizationSpec, SampleTensor
from heatgrid.tensor import Tensor, precision

from oracles import adam_scalar, hybrid_loss_loop, streaming_metrics


def tiny_samples(n, T=2, C=2, H=6, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        dates = tuple(dt.date(2021, 1, 1) + dt.timedelta(days=k + i) for i in range(T))
        x = rng.standard_normal((T, C, H, H)).astype(np.float32)
        y = (0.5 * x[-1, :1] + 0.1 * rng.standard_normal((1, H, H))).astype(np.float32)
        out.append(SampleTensor(x, y, dates, dates[-1] + dt.timedelta(days=1)))
    return out


def tiny_cfg(**kw):
    base = dict(architecture="convlstm", hidden_dim=4, epochs=2, batch_size=3, seed=11)
    base.update(kw)
    return TR.TrainConfig(**base)


class TestHybridLoss:
    def test_zero_residual(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert TR.hybrid_loss(x, x).item() == 0

    @pytest.mark.parametrize("r,expected", [(1.0, 1.0), (2.0, 2.6), (-2.0, 2.6)])
    def test_constant_residual(self, r, expected):
        y = np.zeros((4, 4))
        with precision("float64"):
            assert TR.hybrid_loss(Tensor(y + r), Tensor(y), 0.7).item() == pytest.approx(expected, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            TR.hybrid_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, 12, elements=st.floats(-5, 5)), arrays(np.float64, 12, elements=st.floats(-5, 5)))
    def test_endpoints(self, a, b):
        with precision("float64"):
            pa, pb = Tensor(a), Tensor(b)
            assert TR.hybrid_loss(pa, pb, 1.0).item() == pytest.approx(np.mean(np.abs(a - b)), abs=1e-6)
            assert TR.hybrid_loss(pa, pb, 0.0).item() == pytest.approx(np.mean((a - b) ** 2), abs=1e-6)

    @pytest.mark.parametrize("seed", range(10))
    def test_against_loop(self, seed):
        rng = np.random.default_rng(seed)
        a, b, alpha = rng.standard_normal(30), rng.standard_normal(30), rng.random()
        with precision("float64"):
            got = TR.hybrid_loss(Tensor(a), Tensor(b), alpha).item()
        assert got == pytest.approx(hybrid_loss_loop(a.tolist(), b.tolist(), alpha), abs=1e-12)

    def test_gradient_direction(self):
        with precision("float64"):
            p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
            TR.hybrid_loss(p, Tensor(np.zeros(2)), 0.5).backward()
        # d/dp of 0.5*mean|p| + 0.5*mean p^2 = 0.25*sign(p) + 0.5*p
        np.testing.assert_allclose(p.grad, [0.75, -0.75])


class TestAdam:
    def scalar(self, value=0.0):
        return {"w": Tensor(np.array([value]), dtype=np.float64)}

    def test_zero_gradient(self):
        params = self.scalar(2.5)
        state = TR.adam_step(params, {"w": np.zeros(1)}, TR.AdamState())
        assert params["w"].data[0] == 2.5 and state.step == 1

    def test_first_step(self):
        params = self.scalar(0.0)
        TR.adam_step(params, {"w": np.ones(1)}, TR.AdamState(), lr=0.001)
        assert params["w"].data[0] == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-15)

    def test_second_step_not_larger(self):
        params = self.scalar(0.0)
        state = TR.AdamState()
        traj = [0.0]
        for _ in range(2):
            TR.adam_step(params, {"w": np.ones(1)}, state)
            traj.append(params["w"].data[0])
        d1, d2 = abs(traj[1] - traj[0]), abs(traj[2] - traj[1])
        assert d2 <= d1 + 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_scalar_recurrence(self, seed):
        rng = np.random.default_rng(seed)
        grads = rng.standard_normal(25).tolist()
        params = self.scalar(0.3)
        state = TR.AdamState()
        got = [0.3]
        for g in grads:
            TR.adam_step(params, {"w": np.array([g])}, state, lr=0.01)
            got.append(float(params["w"].data[0]))
        np.testing.assert_allclose(got, adam_scalar(0.3, grads, lr=0.01), rtol=0, atol=1e-12)
        assert state.step == 25 and state.m["w"].shape == (1,)

    def test_non_finite_names_parameter(self):
        params = {"gate_w": Tensor(np.zeros(3))}
        with pytest.raises(NonFiniteError, match="gate_w"):
            TR.adam_step(params, {"gate_w": np.array([0.0, np.nan, 1.0])}, TR.AdamState())

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            TR.adam_step({"w": Tensor(np.zeros(3))}, {"w": np.zeros(2)}, TR.AdamState())

    def test_descends_on_quadratic(self):
        rng = np.random.default_rng(3)
        target = rng.standard_normal(5)
        with precision("float64"):
            p = Tensor(rng.standard_normal(5), requires_grad=True)

            def loss():
                return TR.hybrid_loss(p, Tensor(target), 0.0)

            before = loss()
            before.backward()
            TR.adam_step({"p": p}, {"p": p.grad}, TR.AdamState(), lr=1e-4)
            assert loss().item() < before.item()


class TestMetrics:
    def test_worked_example(self):
        mae, rmse, r2 = TR.regression_metrics([1.5, 2, 2.5], [1, 2, 3])
        assert mae == pytest.approx(1 / 3, abs=1e-15)
        assert rmse == pytest.approx(math.sqrt(1 / 6), abs=1e-15)
        assert r2 == 0.75

    def test_perfect(self):
        y = np.random.default_rng(0).standard_normal(50)
        assert TR.regression_metrics(y, y) == (0.0, 0.0, 1.0)

    def test_mean_predictor(self):
        y = np.random.default_rng(1).standard_normal(50)
        assert TR.regression_metrics(np.full_like(y, y.mean()), y)[2] == pytest.approx(0.0, abs=1e-12)

    def test_zero_variance(self):
        with pytest.raises(TR.MetricError):
            TR.regression_metrics([1.0, 2.0], [3.0, 3.0])

    @pytest.mark.parametrize("seed", range(20))
    def test_streaming_oracle(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.standard_normal(200)
        p = y + 0.3 * rng.standard_normal(200)
        got = TR.regression_metrics(p, y)
        want = streaming_metrics(p.tolist(), y.tolist())
        np.testing.assert_allclose(got, want, atol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-100, 100))
    def test_shift_invariance(self, seed, c):
        rng = np.random.default_rng(seed)
        y = rng.standard_normal(40)
        p = y + 0.5 * rng.standard_normal(40)
        a = TR.regression_metrics(p, y)
        b = TR.regression_metrics(p + c, y + c)
        np.testing.assert_allclose(a, b, atol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31))
    def test_report_invariants(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.standard_normal(30)
        mae, rmse, r2 = TR.regression_metrics(y + rng.standard_normal(30), y)
        assert rmse >= mae >= 0 and r2 <= 1


class TestEvaluate:
    def test_report_fields(self):
        samples = tiny_samples(5)
        params = models.init_params("cnn", 2, 2, seed=0, cnn_widths=(4, 4, 4))
        spec = NormalizationSpec("standard", [290.0, 0.0], [2.0, 1.0])
        rep = TR.evaluate(params, samples, spec)
        assert len(rep.per_sample_mae) == 5 and rep.units == "normalized"
        assert rep.kelvin.units == "kelvin"
        assert rep.kelvin.mae == pytest.approx(2 * rep.mae, rel=1e-5)
        assert rep.kelvin.r2 == pytest.approx(rep.r2, abs=1e-5)
        assert rep.rmse >= rep.mae
        x = np.stack([s.input for s in samples])
        y = np.stack([s.target for s in samples])
        pred = models.predict(params, x)
        per = np.mean(np.abs(pred.astype(np.float64) - y).reshape(5, -1), axis=1)
        np.testing.assert_allclose(rep.per_sample_mae, per)
        assert np.mean(rep.per_sample_mae) == pytest.approx(rep.mae)

    def test_per_sample_csv(self):
        samples = tiny_samples(3)
        params = models.init_params("cnn", 2, 2, seed=0, cnn_widths=(4, 4, 4))
        lines = TR.per_sample_csv(TR.evaluate(params, samples)).splitlines()
        assert lines[0] == "sample_index,target_date,mae,rmse"
        assert lines[1].startswith("0,2021-01-03,")
        assert len(lines) == 4

    def test_empty(self):
        params = models.init_params("cnn", 2, 2, seed=0)
        with pytest.raises(DatasetError):
            TR.evaluate(params, [])


class TestTrain:
    def test_zero_epochs(self):
        samples = tiny_samples(4)
        res = TR.train(samples, samples, tiny_cfg(epochs=0))
        init = models.init_params("convlstm", 2, 2, 4, TR.derive_seed(11, "init"))
        assert res.history == []
        for k, t in init.named_tensors().items():
            assert np.array_equal(res.params.named_tensors()[k].data, t.data)

    @pytest.mark.parametrize("arch", models.ARCHITECTURES)
    def test_deterministic(self, arch, tmp_path):
        samples = tiny_samples(7)
        cfg = tiny_cfg(architecture=arch)
        a = TR.train(samples[:5], samples[5:], cfg, out_dir=tmp_path / "a")
        b = TR.train(samples[:5], samples[5:], cfg, out_dir=tmp_path / "b")
        assert a.history == b.history
        for name in ("history.csv", "final.hgck", "best.hgck"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        head = (tmp_path / "a" / "history.csv").read_text().splitlines()
        assert head[0] == "epoch,train_loss,val_mae,val_rmse,val_r2" and len(head) == 3

    def test_seed_changes_run(self):
        samples = tiny_samples(5)
        a = TR.train(samples, None, tiny_cfg(seed=1))
        b = TR.train(samples, None, tiny_cfg(seed=2))
        assert a.history != b.history

    def test_loss_decreases(self):
        samples = tiny_samples(8)
        res = TR.train(samples, samples, tiny_cfg(epochs=15, learning_rate=0.01))
        losses = [r["train_loss"] for r in res.history]
        assert losses[-1] < 0.6 * losses[0]
        assert res.best_epoch is not None

    def test_partial_batch_kept(self):
        samples = tiny_samples(5)
        seen = []
        TR.train(samples, None, tiny_cfg(epochs=1, batch_size=2), log=seen.append)
        assert seen[0]["epoch"] == 1
        # all five samples contribute to the epoch mean
        res = TR.train(samples, None, tiny_cfg(epochs=1, batch_size=5, learning_rate=1e-12))
        res2 = TR.train(samples, None, tiny_cfg(epochs=1, batch_size=2, learning_rate=1e-12))
        assert res.history[0]["train_loss"] == pytest.approx(res2.history[0]["train_loss"], rel=1e-5)

    def test_non_finite_loss(self):
        samples = tiny_samples(3)
        samples[1].target[0, 0, 0] = np.inf
        with pytest.raises(NonFiniteError, match="epoch 1"):
            TR.train(samples, None, tiny_cfg(epochs=1, batch_size=1))

    def test_empty(self):
        with pytest.raises(DatasetError):
            TR.train([], None, tiny_cfg())

    @pytest.mark.parametrize(
        "kw", [{"alpha": 1.5}, {"learning_rate": 0.0}, {"batch_size": 0}, {"epochs": -1}, {"architecture": "rnn"}]
    )
    def test_config_validation(self, kw):
        with pytest.raises(ConfigError):
            tiny_cfg(**kw)

    def test_table_defaults(self):
        cfg = TR.TrainConfig()
        assert (cfg.hidden_dim, cfg.learning_rate, cfg.batch_size, cfg.epochs, cfg.alpha) == (32, 0.001, 16, 20, 0.7)
        assert (cfg.beta1, cfg.beta2, cfg.epsilon) == (0.9, 0.999, 1e-8)

    def test_named_seeds_independent(self):
        assert TR.derive_seed(0, "init") != TR.derive_seed(0, "shuffle")
        assert TR.derive_seed(0, "init") == TR.derive_seed(0, "init")


class TestCheckpoint:
    @pytest.mark.parametrize("arch", models.ARCHITECTURES)
    def test_roundtrip(self, arch, tmp_path):
        params = models.init_params(arch, 3, 5, hidden_dim=6, seed=4)
        spec = NormalizationSpec("minmax", np.arange(5.0), np.arange(1.0, 6.0))
        cfg = TR.TrainConfig(architecture=arch, hidden_dim=6, seed=4)
        path = TR.save_checkpoint(tmp_path / "m.hgck", params, cfg, spec, {"T": 3, "C": 5})
        data = path.read_bytes()
        assert data[:4] == b"HGCK"
        got, gcfg, gspec, meta = TR.load_checkpoint(path)
        assert got.arch == arch and gcfg == cfg and (meta["T"], meta["C"]) == (3, 5)
        assert np.array_equal(gspec.center, spec.center) and gspec.mode == "minmax"
        for k, t in params.named_tensors().items():
            assert got.named_tensors()[k].data.tobytes() == t.data.tobytes()

    def test_truncated(self, tmp_path):
        params = models.init_params("convlstm", 1, 2, hidden_dim=3, seed=0)
        path = TR.save_checkpoint(tmp_path / "m.hgck", params, tiny_cfg(hidden_dim=3), None, {"T": 1, "C": 2})
        data = path.read_bytes()
        for cut in (2, 10, len(data) // 2, len(data) - 1):
            path.write_bytes(data[:cut])
            with pytest.raises(CheckpointError):
                TR.load_checkpoint(path)

    def test_architecture_mismatch(self, tmp_path):
        params = models.init_params("cnn", 2, 2, seed=0)
        path = TR.save_checkpoint(tmp_path / "m.hgck", params, tiny_cfg(architecture="cnn"), None, {"T": 2, "C": 2})
        with pytest.raises(CheckpointError, match="architecture mismatch"):
            TR.load_checkpoint(path, arch="convlstm")

    def test_bad_magic_and_version(self, tmp_path):
        params = models.init_params("cnn", 2, 2, seed=0)
        path = TR.save_checkpoint(tmp_path / "m.hgck", params, tiny_cfg(architecture="cnn"), None, {"T": 2, "C": 2})
        data = bytearray(path.read_bytes())
        path.write_bytes(b"XXXX" + bytes(data[4:]))
        with pytest.raises(CheckpointError, match="magic"):
            TR.load_checkpoint(path)
        data[4] = 9
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="version"):
            TR.load_checkpoint(path)

    def test_shape_inconsistency(self, tmp_path):
        params = models.init_params("cnn", 2, 2, seed=0)
        path = TR.save_checkpoint(tmp_path / "m.hgck", params, tiny_cfg(architecture="cnn"), None, {"T": 3, "C": 2})
        with pytest.raises(CheckpointError, match="shape"):
            TR.load_checkpoint(path)

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            TR.load_checkpoint(tmp_path / "nope.hgck")
