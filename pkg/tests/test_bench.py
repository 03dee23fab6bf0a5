"""Benchmark harness tests: component mapping, baselines, sweeps, audits."""

import numpy as np
import pytest

from adacontrast.adapt import AdaptConfig
from adacontrast.bench import (
    LADDER,
    config_digest,
    config_for_components,
    default_arch,
    evaluate_params,
    run_ablation_ladder,
    run_baseline,
    run_full_method,
    run_sweep,
    suite_arch,
    suite_config,
    sweep_values,
    train_source_for_task,
)
from adacontrast.tasks import make_task


def tiny_config(**overrides):
    settings = dict(epochs=2, batch_size=64, lr=1e-3, ema_momentum=0.9,
                    contrast_queue_size=32, num_neighbors=5,
                    source_epochs=6, source_lr=0.02, seed=0)
    settings.update(overrides)
    return AdaptConfig(**settings)


@pytest.fixture(scope="module")
def small_run():
    task = make_task("two_moons_rotate(30)", 0, n_source=200, n_target=200)
    config = tiny_config()
    arch = default_arch(task, hidden=(8,), bottleneck_dim=8)
    source = train_source_for_task(task, config, arch)
    return task, config, arch, source


class TestComponentMapping:
    def test_ladder_rows_have_expected_flags(self):
        base = tiny_config()
        row1 = config_for_components(base, frozenset({"epoch_pl"}))
        assert row1.pseudo_mode == "epoch"
        assert not row1.use_contrastive
        row4 = config_for_components(base, LADDER[-1][1])
        assert row4.pseudo_mode == "refined"
        assert row4.use_contrastive and row4.use_exclusion
        assert row4.use_weak_strong and row4.use_diversity

    def test_row2_differs_from_row1_only_in_pseudo_source(self):
        base = tiny_config()
        row1 = config_for_components(base, LADDER[0][1]).to_dict()
        row2 = config_for_components(base, LADDER[1][1]).to_dict()
        diff = {key for key in row1 if row1[key] != row2[key]}
        assert diff == {"pseudo_mode"}

    def test_exclusive_components_rejected(self):
        with pytest.raises(ValueError):
            config_for_components(tiny_config(),
                                  frozenset({"epoch_pl", "online_refine"}))

    def test_digests_distinguish_rows(self):
        base = tiny_config()
        digests = {config_digest(config_for_components(base, comps))
                   for _, comps in LADDER}
        assert len(digests) == len(LADDER)

    def test_digest_stable(self):
        assert config_digest(tiny_config()) == config_digest(tiny_config())


class TestEvaluate:
    def test_summary_keys_and_manual_accuracy(self, small_run):
        task, _, _, source = small_run
        summary = evaluate_params(source.params, task.target_x, task.target_y)
        assert {"accuracy", "per_class_accuracy", "ece", "mce"} <= set(summary)
        from adacontrast.network import predict
        _, _, probs = predict(source.params, task.target_x, mode="eval")
        assert summary["accuracy"] == pytest.approx(
            float(np.mean(probs.argmax(axis=1) == task.target_y)))


class TestBaselines:
    def test_unknown_baseline(self, small_run):
        task, config, _, _ = small_run
        with pytest.raises(ValueError, match="unknown baseline"):
            run_baseline("mystery", task, config)

    def test_source_only_is_direct_evaluation(self, small_run):
        task, config, _, source = small_run
        summary = run_baseline("source_only", task, config, source=source)
        direct = evaluate_params(source.params, task.target_x, task.target_y)
        assert summary["accuracy"] == direct["accuracy"]
        assert summary["method"] == "source_only"

    def test_epoch_pseudo_label_runs(self, small_run):
        task, config, _, source = small_run
        summary = run_baseline("epoch_pseudo_label", task, config, source=source)
        assert 0.0 <= summary["accuracy"] <= 1.0

    def test_entropy_min_runs(self, small_run):
        task, config, _, source = small_run
        summary = run_baseline("entropy_min", task, config, source=source)
        assert 0.0 <= summary["accuracy"] <= 1.0


class TestLadder:
    def test_ladder_shares_source_and_orders_rows(self, small_run):
        task, config, _, source = small_run
        rows = run_ablation_ladder(task, config, source=source)
        assert [r.row_id for r in rows] == ["1", "2", "3a", "3", "4"]
        for row in rows:
            assert 0.0 <= row.accuracy <= 1.0
            assert row.config["seed"] == config.seed


class TestSweeps:
    def test_grids_match_published_ranges(self):
        base = tiny_config()
        assert sweep_values("num_neighbors", 2000, base) == [1, 2, 3, 6, 11, 21, 41]
        lrs = sweep_values("lr", 2000, base)
        assert lrs == [base.lr, 3 * base.lr, 10 * base.lr]
        ms = sweep_values("memory_size", 2000, base)
        assert ms[0] == 128 and ms[-1] == 2000
        assert all(a < b for a, b in zip(ms, ms[1:]))

    def test_unknown_axis(self):
        with pytest.raises(ValueError):
            sweep_values("temperature", 100, tiny_config())

    def test_run_sweep_rows(self, small_run):
        task, config, _, source = small_run
        rows = run_sweep(task, config, "num_neighbors", values=[1, 5], source=source)
        assert [row["value"] for row in rows] == [1, 5]
        assert all(not row["diverged"] for row in rows)
        assert all(0.0 <= row["accuracy"] <= 1.0 for row in rows)


class TestNullShift:
    def test_null_rotation_keeps_source_accuracy(self):
        # theta = 0: target is a fresh draw from the source distribution, so
        # source-only accuracy tracks the validation accuracy closely.
        # Adaptation may still trade a few clean-margin points for robustness
        # to the strong views it trains on (measured ~8 on this task).
        task = make_task("two_moons_rotate(0)", 0, n_source=2000, n_target=2000)
        config = suite_config(0)
        arch = suite_arch(task)
        source = train_source_for_task(task, config, arch)
        so = evaluate_params(source.params, task.target_x, task.target_y)
        assert abs(so["accuracy"] - source.val_accuracy) < 0.02
        full, _ = run_full_method(task, config, source=source)
        assert abs(full["accuracy"] - so["accuracy"]) < 0.10
        assert full["accuracy"] > 0.85


class TestSuiteHelpers:
    def test_suite_config_overrides(self):
        config = suite_config(3, epochs=2)
        assert config.seed == 3
        assert config.epochs == 2

    def test_suite_arch_dims(self):
        task = make_task("digits_corrupt(1.0)", 0, n_source=40, n_target=40)
        arch = suite_arch(task)
        assert arch.input_dim == 64
        assert arch.num_classes == 10
