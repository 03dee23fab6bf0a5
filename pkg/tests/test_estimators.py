"""Estimator API tests: sklearn contract, fit/predict, checkpoint interop."""

import numpy as np
import pytest
from sklearn.base import clone

from adacontrast.estimators import SourceNetClassifier, TestTimeAdapter
from adacontrast.tasks import make_task


@pytest.fixture(scope="module")
def task():
    return make_task("gauss_blobs_shift(3.0, 3, 6)", 0, n_source=300, n_target=300)


@pytest.fixture(scope="module")
def fitted_source(task):
    clf = SourceNetClassifier(hidden=(16,), bottleneck_dim=8, epochs=12,
                              lr=0.02, batch_size=64, seed=0)
    return clf.fit(task.source_x, task.source_y)


class TestSourceClassifier:
    def test_fit_predict_shapes_and_accuracy(self, task, fitted_source):
        preds = fitted_source.predict(task.source_x)
        assert preds.shape == (300,)
        assert np.mean(preds == task.source_y) > 0.8
        probs = fitted_source.predict_proba(task.source_x)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_class_relabeling(self, task):
        relabeled = np.array([10, 20, 30])[task.source_y]
        clf = SourceNetClassifier(hidden=(16,), bottleneck_dim=8, epochs=5,
                                  lr=0.02, batch_size=64, seed=0)
        clf.fit(task.source_x, relabeled)
        np.testing.assert_array_equal(clf.classes_, [10, 20, 30])
        assert set(clf.predict(task.source_x[:20])) <= {10, 20, 30}

    def test_get_params_round_trip(self):
        clf = SourceNetClassifier(epochs=3, lr=0.5)
        params = clf.get_params()
        assert params["epochs"] == 3
        rebuilt = SourceNetClassifier(**params)
        assert rebuilt.get_params() == params

    def test_clone_preserves_params(self, fitted_source):
        twin = clone(fitted_source)
        assert twin.get_params() == fitted_source.get_params()
        assert not hasattr(twin, "params_")

    def test_unfitted_predict_raises(self, task):
        with pytest.raises(Exception):
            SourceNetClassifier().predict(task.source_x)

    def test_single_class_rejected(self, task):
        clf = SourceNetClassifier(epochs=1)
        with pytest.raises(ValueError):
            clf.fit(task.source_x, np.zeros(300, dtype=int))

    def test_save_load_predicts_identically(self, task, fitted_source, tmp_path):
        path = tmp_path / "source.json"
        fitted_source.save(path)
        loaded = SourceNetClassifier.load(path)
        np.testing.assert_array_equal(loaded.predict(task.target_x),
                                      fitted_source.predict(task.target_x))
        assert loaded.val_accuracy_ == fitted_source.val_accuracy_


class TestAdapter:
    def adapter(self, source, **overrides):
        settings = dict(source=source, epochs=2, batch_size=64, lr=1e-3,
                        ema_momentum=0.9, contrast_queue_size=32,
                        num_neighbors=5, seed=0)
        settings.update(overrides)
        return TestTimeAdapter(**settings)

    def test_fit_predict(self, task, fitted_source):
        adapter = self.adapter(fitted_source).fit(task.target_x)
        preds = adapter.predict(task.target_x)
        assert preds.shape == (300,)
        assert set(np.unique(preds)) <= set(fitted_source.classes_)
        probs = adapter.predict_proba(task.target_x[:5])
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_labels_only_for_logging(self, task, fitted_source):
        with_labels = self.adapter(fitted_source).fit(task.target_x, task.target_y)
        without = self.adapter(fitted_source).fit(task.target_x)
        np.testing.assert_array_equal(with_labels.predict(task.target_x),
                                      without.predict(task.target_x))
        assert not np.isnan(with_labels.result_.per_epoch[0]["pseudo_label_acc"])

    def test_online_single_pass(self, task, fitted_source):
        adapter = self.adapter(fitted_source, online=True).fit(task.target_x)
        assert adapter.result_.mode == "online"
        assert adapter.result_.stream_preds.shape == (300,)

    def test_source_from_checkpoint_path(self, task, fitted_source, tmp_path):
        path = tmp_path / "source.json"
        fitted_source.save(path)
        adapter = self.adapter(str(path)).fit(task.target_x)
        reference = self.adapter(fitted_source).fit(task.target_x)
        np.testing.assert_array_equal(adapter.predict(task.target_x),
                                      reference.predict(task.target_x))

    def test_missing_source_rejected(self, task):
        with pytest.raises(ValueError, match="source"):
            TestTimeAdapter().fit(task.target_x)

    def test_feature_dim_mismatch(self, task, fitted_source):
        with pytest.raises(ValueError, match="features"):
            self.adapter(fitted_source).fit(np.ones((40, 2)))

    def test_clone_compatible(self, fitted_source):
        adapter = self.adapter(fitted_source)
        twin = clone(adapter)
        assert twin.get_params()["num_neighbors"] == 5

    def test_component_switches_flow_through(self, task, fitted_source):
        adapter = self.adapter(fitted_source, use_contrastive=False,
                               use_diversity=False).fit(task.target_x)
        assert all(row["l_ctr"] == 0.0 for row in adapter.result_.steps)
        assert all(row["l_div"] == 0.0 for row in adapter.result_.steps)
