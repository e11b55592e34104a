"""Optimizer, schedule, training loop, evaluation, prediction."""
import json

import numpy as np
import pytest

import _oracles as oracle
from rmsda import data
from rmsda.engine import GradTape, Tensor
from rmsda.errors import ContractError, NonFiniteGradientError
from rmsda.network import Model, NetworkConfig, load_checkpoint
from rmsda.train import (Adam, TrainConfig, evaluate, lr_at, predict,
                         run_model_gradcheck, train)


def tiny_net():
    return NetworkConfig(base_channels=2)


def tiny_cfg(**kw):
    base = dict(epochs=2, batch_size=2, image_size=16, seed=0, augment=False)
    base.update(kw)
    return TrainConfig(**base)


def make_records(tmp_path, n=2, size=16, seed=0):
    return data.synthesize(n, size, seed=seed, out_dir=tmp_path / "raw")


class TestSchedule:
    def test_decay_boundaries(self):
        cfg = TrainConfig()
        assert lr_at(0, cfg) == pytest.approx(3e-4, rel=1e-12)
        assert lr_at(19, cfg) == pytest.approx(3e-4, rel=1e-12)
        assert lr_at(20, cfg) == pytest.approx(3e-5, rel=1e-12)
        assert lr_at(39, cfg) == pytest.approx(3e-5, rel=1e-12)
        assert lr_at(40, cfg) == pytest.approx(3e-6, rel=1e-12)

    def test_custom_factor_and_period(self):
        cfg = TrainConfig(lr=1.0, lr_decay_factor=0.5, lr_decay_every=3)
        got = [lr_at(e, cfg) for e in range(7)]
        assert got == [1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.25]


class TestAdam:
    def test_matches_reference_trajectory(self):
        model = Model(tiny_net(), seed=3)
        name, tensor, _ = next(iter(model.store.items()))
        opt = Adam(model)
        lr = 1e-2
        rng = np.random.default_rng(7)
        gs = []
        for _ in range(5):
            grads = {}
            for n, t, trainable in model.store.items():
                if trainable:
                    grads[t.uid] = rng.standard_normal(t.data.shape) \
                        .astype(np.float32)
                    if n == name:
                        gs.append(grads[t.uid].astype(np.float64).copy())
            opt.step(model, grads, lr)
        start = Model(tiny_net(), seed=3).store.state_arrays()[name]
        traj = oracle.adam_reference([g.ravel() for g in gs],
                                     start.ravel().astype(np.float64), lr)
        want = traj[-1].reshape(start.shape)
        np.testing.assert_allclose(tensor.data, want, atol=2e-6)

    def test_first_step_magnitude_near_lr(self):
        # bias correction makes |update| ~= lr for any gradient scale at t=1
        model = Model(tiny_net(), seed=1)
        before = {n: t.data.copy() for n, t, tb in model.store.items() if tb}
        grads = {t.uid: np.full(t.data.shape, 1e-7, np.float32)
                 for _, t, tb in model.store.items() if tb}
        Adam(model).step(model, grads, lr=1e-3)
        after = model.store.state_arrays()
        for n, b in before.items():
            delta = np.abs(after[n] - b)
            assert np.all(delta > 0.9e-3) and np.all(delta < 1.1e-3)

    def test_nan_gradient_names_parameter(self):
        model = Model(tiny_net(), seed=2)
        grads = {t.uid: np.zeros(t.data.shape, np.float32)
                 for _, t, tb in model.store.items() if tb}
        bad_name, bad_t, _ = next(iter(model.store.items()))
        grads[bad_t.uid][...] = np.nan
        with pytest.raises(NonFiniteGradientError, match=bad_name):
            Adam(model).step(model, grads, lr=1e-3)

    def test_missing_gradient_is_wiring_error(self):
        model = Model(tiny_net(), seed=2)
        with pytest.raises(ContractError, match="no gradient"):
            Adam(model).step(model, {}, lr=1e-3)


class TestTrainLoop:
    def test_smoke_produces_checkpoint_and_history(self, tmp_path):
        recs = make_records(tmp_path)
        logs = []
        result = train(recs, tiny_net(), tiny_cfg(), tmp_path / "run",
                          on_epoch=logs.append)
        assert result.checkpoint_path.is_file()
        assert len(result.history) == 2 and len(logs) == 2
        assert all(np.isfinite(h.loss) for h in result.history)
        hist = json.loads((tmp_path / "run" / "history.json").read_text())
        assert [h["epoch"] for h in hist] == [0, 1]
        model, meta = load_checkpoint(result.checkpoint_path)
        assert meta["epochs_run"] == 2
        assert meta["train_config"]["image_size"] == 16
        assert meta["n_samples"] == 2

    def test_two_runs_bit_identical(self, tmp_path):
        recs = make_records(tmp_path)
        a = train(recs, tiny_net(), tiny_cfg(), tmp_path / "a")
        b = train(recs, tiny_net(), tiny_cfg(), tmp_path / "b")
        assert a.checkpoint_path.read_bytes() == b.checkpoint_path.read_bytes()

    def test_seed_changes_outcome(self, tmp_path):
        recs = make_records(tmp_path)
        a = train(recs, tiny_net(), tiny_cfg(seed=0), tmp_path / "a")
        b = train(recs, tiny_net(), tiny_cfg(seed=1), tmp_path / "b")
        assert a.checkpoint_path.read_bytes() != b.checkpoint_path.read_bytes()

    def test_augment_expands_four_fold(self, tmp_path):
        recs = make_records(tmp_path)
        result = train(recs, tiny_net(), tiny_cfg(augment=True),
                          tmp_path / "run")
        assert result.n_samples == 8
        aug = data.read_manifest(tmp_path / "run" / "augmented" /
                                 "manifest.csv")
        assert len(aug) == 8

    def test_loss_decreases_over_short_run(self, tmp_path):
        recs = make_records(tmp_path, n=2)
        result = train(recs, tiny_net(), tiny_cfg(epochs=8),
                          tmp_path / "run")
        first, last = result.history[0].loss, result.history[-1].loss
        assert last < first


class TestEvaluatePredict:
    def test_evaluate_report_structure(self, tmp_path):
        recs = make_records(tmp_path, n=3)
        model = Model(tiny_net(), seed=0)
        report = evaluate(model, recs, image_size=16)
        assert report["n_images"] == 3 and report["threshold"] == 0.5
        assert len(report["per_image"]) == 3
        agg = report["aggregate"]
        total = agg["tp"] + agg["fp"] + agg["tn"] + agg["fn"]
        assert total == 3 * 16 * 16
        assert 0.0 <= agg["dice"] <= 1.0
        assert {"id", "recall", "jaccard"} <= set(report["per_image"][0])

    def test_aggregate_pools_counts_not_averages(self, tmp_path):
        recs = make_records(tmp_path, n=2)
        model = Model(tiny_net(), seed=0)
        report = evaluate(model, recs, image_size=16)
        for key in ("tp", "fp", "tn", "fn"):
            assert report["aggregate"][key] == \
                sum(p[key] for p in report["per_image"])

    def test_predict_writes_native_resolution_mask(self, tmp_path):
        recs = make_records(tmp_path, n=2, size=24)
        model = Model(tiny_net(), seed=0)
        out = tmp_path / "pred.png"
        probs = predict(model, recs[0].image_path, out, image_size=16)
        assert probs.shape == (16, 16)
        saved = data.load_mask(out)
        assert saved.shape == (1, 24, 24)
        assert set(np.unique(saved)).issubset({0.0, 1.0})

    def test_predict_bytes_deterministic(self, tmp_path):
        recs = make_records(tmp_path, n=2)
        model = Model(tiny_net(), seed=0)
        pa = tmp_path / "a.png"
        pb = tmp_path / "b.png"
        predict(model, recs[0].image_path, pa, image_size=16)
        predict(model, recs[0].image_path, pb, image_size=16)
        assert pa.read_bytes() == pb.read_bytes()

    def test_inference_does_not_touch_running_stats(self, tmp_path):
        recs = make_records(tmp_path, n=2)
        model = Model(tiny_net(), seed=0)
        before = {n: a.copy() for n, a in model.store.state_arrays().items()}
        evaluate(model, recs, image_size=16)
        after = model.store.state_arrays()
        for n, b in before.items():
            np.testing.assert_array_equal(after[n], b)


class TestModelGradcheckHarness:
    def test_toy_scale_passes(self):
        report = run_model_gradcheck("toy")
        assert report.passed, str(report)

    def test_unknown_scale_rejected(self):
        with pytest.raises(ValueError):
            run_model_gradcheck("huge")
