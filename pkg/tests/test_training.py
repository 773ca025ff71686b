import dataclasses
import hashlib

import numpy as np
import pytest

from kbal import data, training
from kbal.errors import ConfigError, NumericError
from kbal.training import Strategy, TrainConfig


def quick_config(**overrides):
    defaults = dict(strategy="akb", estimator="kbdr", max_epochs=3, seed=5,
                    embedding_dim=4, batch_size_weight=256,
                    batch_size_prediction=256, batch_size_imputation=128)
    defaults.update(overrides)
    return TrainConfig(**defaults)


@pytest.fixture(scope="module")
def dataset():
    return data.generate_synthetic(40, 40, 4, (0.1, 0.9), seed=2)


def bundle_digest(bundle):
    out = {}
    for role in ("prediction", "imputation", "weight", "propensity"):
        model = getattr(bundle, role)
        if model is None:
            out[role] = None
            continue
        digest = hashlib.sha256()
        for key in ("user_emb", "item_emb", "user_bias", "item_bias",
                    "global_bias"):
            digest.update(np.ascontiguousarray(getattr(model, key)).tobytes())
        out[role] = digest.hexdigest()
    return out


class TestConfig:
    def test_incompatible_combinations(self):
        with pytest.raises(ConfigError):
            training.validate_config(TrainConfig(strategy="none", estimator="kbdr"))
        with pytest.raises(ConfigError):
            training.validate_config(TrainConfig(strategy="akb", estimator="ips"))
        with pytest.raises(ConfigError):
            training.validate_config(TrainConfig(strategy="rkb", estimator="naive"))
        with pytest.raises(ConfigError):
            training.validate_config(TrainConfig(strategy="none", estimator="ideal"))

    def test_off_grid_values_rejected_unless_overridden(self):
        with pytest.raises(ConfigError):
            training.validate_config(quick_config(gamma=3.0))
        training.validate_config(quick_config(gamma=3.0, allow_off_grid=True))
        with pytest.raises(ConfigError):
            training.validate_config(quick_config(lr_prediction=0.2))
        with pytest.raises(ConfigError):
            training.validate_config(quick_config(sigma_sq=2.0))
        with pytest.raises(ConfigError):
            training.validate_config(quick_config(threshold=0.33))

    def test_config_file_round_trip(self, tmp_path):
        config = quick_config(gamma=10.0, j=4)
        path = tmp_path / "c.cfg"
        path.write_text(training.config_text(config))
        parsed = training.parse_config(path)
        assert parsed == config
        assert training.config_hash(parsed) == training.config_hash(config)

    def test_config_file_errors(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("nonsense_key = 1\n")
        with pytest.raises(ConfigError):
            training.parse_config(path)
        path.write_text("gamma ten\n")
        with pytest.raises(ConfigError):
            training.parse_config(path)
        path.write_text("gamma = ten\n")
        with pytest.raises(ConfigError):
            training.parse_config(path)

    def test_overrides_win(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("gamma = 10\nseed = 3\n")
        parsed = training.parse_config(path, {"seed": 9})
        assert parsed.gamma == 10.0
        assert parsed.seed == 9


class TestTrainLoop:
    def test_plain_mf_has_no_weight_records(self, dataset):
        config = quick_config(strategy="none", estimator="naive")
        _, trace = training.train(dataset, config)
        assert all(r.weight_loss is None for r in trace.records)
        assert all(r.imputation_loss is None for r in trace.records)
        assert all(r.selected_centers == () for r in trace.records)
        assert all(r.prediction_loss is not None for r in trace.records)

    def test_same_seed_bit_identical(self, dataset):
        config = quick_config()
        bundle_a, trace_a = training.train(dataset, config)
        bundle_b, trace_b = training.train(dataset, config)
        assert bundle_digest(bundle_a) == bundle_digest(bundle_b)
        assert len(trace_a.records) == len(trace_b.records)
        for ra, rb in zip(trace_a.records, trace_b.records):
            assert ra.epoch == rb.epoch
            assert ra.imputation_loss == rb.imputation_loss
            assert ra.weight_loss == rb.weight_loss
            assert ra.prediction_loss == rb.prediction_loss
            assert ra.val_auc == rb.val_auc
            assert ra.max_abs_tau == rb.max_abs_tau
            assert ra.selected_centers == rb.selected_centers

    def test_phase_isolation(self, dataset):
        snapshots = []
        config = quick_config(max_epochs=2)
        training.train(dataset, config,
                       phase_callback=lambda phase, bundle:
                       snapshots.append((phase, bundle_digest(bundle))))
        expected_cycle = ["imputation", "weight", "prediction"]
        phases = [p for p, _ in snapshots]
        assert phases == expected_cycle * 2
        changed_by = {"imputation": "imputation", "weight": "weight",
                      "prediction": "prediction"}
        for (prev_phase, prev_digest), (phase, digest) in zip(snapshots,
                                                              snapshots[1:]):
            for role, value in digest.items():
                if role == changed_by[phase]:
                    assert value != prev_digest[role], (phase, role)
                else:
                    assert value == prev_digest[role], (phase, role)

    def test_weight_renormalization_invariant(self, dataset):
        config = quick_config(max_epochs=2)
        bundle, _ = training.train(dataset, config)
        users, items = dataset.observed_pairs()
        weights = bundle.weight.predict(users, items)
        assert abs(weights.sum() / dataset.n_pairs - 1.0) <= 1e-9

    def test_ips_joint_training_touches_expected_models(self, dataset):
        snapshots = []
        config = quick_config(strategy="ce_propensity", estimator="ips",
                              max_epochs=2)
        training.train(dataset, config,
                       phase_callback=lambda phase, bundle:
                       snapshots.append((phase, bundle_digest(bundle))))
        phases = [p for p, _ in snapshots]
        assert phases == ["propensity", "prediction"] * 2
        first, last = snapshots[0][1], snapshots[-1][1]
        assert first["imputation"] == last["imputation"]
        assert first["weight"] == last["weight"]
        assert first["propensity"] != bundle_digest(
            training.train(dataset, quick_config(strategy="none",
                                                 estimator="naive",
                                                 max_epochs=1))[0])["propensity"]

    @pytest.mark.parametrize("strategy,estimator", [
        ("rkb", "kbips"), ("wkb", "kbdr"), ("mb", "kbdr"),
        ("ce_propensity", "snips"), ("ce_propensity", "dr")])
    def test_all_strategy_paths_run(self, dataset, strategy, estimator):
        config = quick_config(strategy=strategy, estimator=estimator,
                              max_epochs=2)
        bundle, trace = training.train(dataset, config)
        assert len(trace.records) == 2
        assert np.isfinite(trace.records[-1].prediction_loss)

    def test_trace_epochs_strictly_increasing(self, dataset):
        _, trace = training.train(dataset, quick_config(max_epochs=3))
        epochs = [r.epoch for r in trace.records]
        assert epochs == sorted(set(epochs))

    def test_trace_csv_excludes_wall_clock(self, tmp_path, dataset):
        _, trace = training.train(dataset, quick_config(max_epochs=2))
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        header = path.read_text().splitlines()[0]
        assert "wall_clock" not in header
        assert header.startswith("epoch,imputation_loss,weight_loss")

    def test_abort_on_nan_mentions_phase_and_epoch(self):
        with pytest.raises(NumericError, match="weight.*epoch 3"):
            training._abort_on_nan(float("nan"), "weight", 3)


class TestValidateAndSweep:
    def test_validate_reports_metrics(self, dataset):
        bundle, _ = training.train(dataset, quick_config(max_epochs=2))
        report = training.validate(bundle, dataset, k=5)
        assert 0.0 <= report.auc <= 1.0
        assert 0.0 <= report.ndcg_at_k <= 1.0
        assert 0.0 <= report.f1_at_k <= 1.0
        assert report.k == 5
        assert report.n_eval_users > 0

    def test_single_value_sweep_equals_train(self, dataset):
        config = quick_config(max_epochs=2)
        results = training.sweep(dataset, config, "gamma", [config.gamma])
        bundle, _ = training.train(dataset, dataclasses.replace(
            config, allow_off_grid=True))
        direct = training.validate(bundle, dataset, config.metric_k)
        assert results[0][1] == direct

    def test_gamma_zero_sweep_runs(self, dataset):
        results = training.sweep(dataset, quick_config(max_epochs=1),
                                 "gamma", [0.0])
        assert len(results) == 1

    def test_unknown_axis_rejected(self, dataset):
        with pytest.raises(ConfigError):
            training.sweep(dataset, quick_config(), "bogus", [1])

    def test_sweep_csv_format(self, tmp_path, dataset):
        results = training.sweep(dataset, quick_config(max_epochs=1), "J", [2, 4])
        path = tmp_path / "sweep.csv"
        training.write_sweep_csv(path, "J", results, seed=5)
        lines = path.read_text().splitlines()
        assert lines[0] == "J,auc,ndcg,f1,seed"
        assert len(lines) == 3
