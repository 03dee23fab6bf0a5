"""Scikit-learn style estimators wrapping the functional core.

``SourceNetClassifier`` is a plain fit/predict classifier trained with
label-smoothed cross-entropy. ``TestTimeAdapter`` takes a fitted source
classifier (or a checkpoint path) and adapts it to an unlabeled target set on
``fit``; labels passed to ``fit`` are used only for metric logging. Both
follow the estimator contract (get_params/set_params, ``classes_``,
``n_features_in_``), so they compose with pipelines and model selection.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .adapt import AdaptConfig, adapt_offline, adapt_online, train_source
from .augment import AugmentConfig
from .network import ModelParams, NetArch, load_checkpoint, predict, save_checkpoint


def _as_config(**kwargs) -> AdaptConfig:
    augment = AugmentConfig(
        weak_jitter_sigma=kwargs.pop("weak_jitter_sigma"),
        strong_jitter_sigma=kwargs.pop("strong_jitter_sigma"),
        strong_drop_prob=kwargs.pop("strong_drop_prob"),
        strong_scale_range=kwargs.pop("strong_scale_range"),
    )
    return AdaptConfig(augment=augment, **kwargs)


class SourceNetClassifier(BaseEstimator, ClassifierMixin):
    """MLP + bottleneck + weight-normalized head, trained on labeled data.

    Parameters mirror the run-config fields; `fit` keeps the parameters of
    the best epoch on a seeded 9:1 train/validation split.
    """

    def __init__(self, hidden=(64, 64), bottleneck_dim=256, epochs=40,
                 lr=0.01, batch_size=128, sgd_momentum=0.9, weight_decay=1e-4,
                 head_lr_mult=10.0, label_smoothing=0.1, full_cosine=False,
                 seed=0):
        self.hidden = hidden
        self.bottleneck_dim = bottleneck_dim
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.sgd_momentum = sgd_momentum
        self.weight_decay = weight_decay
        self.head_lr_mult = head_lr_mult
        self.label_smoothing = label_smoothing
        self.full_cosine = full_cosine
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        arch = NetArch(input_dim=X.shape[1], num_classes=len(self.classes_),
                       hidden=tuple(self.hidden), bottleneck_dim=self.bottleneck_dim)
        config = AdaptConfig(
            source_epochs=self.epochs, source_lr=self.lr,
            batch_size=self.batch_size, sgd_momentum=self.sgd_momentum,
            weight_decay=self.weight_decay, head_lr_mult=self.head_lr_mult,
            label_smoothing=self.label_smoothing, full_cosine=self.full_cosine,
            seed=self.seed)
        result = train_source(config, arch, X, encoded)
        self.params_ = result.params
        self.val_accuracy_ = result.val_accuracy
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        _, _, probs = predict(self.params_, X, mode="eval")
        return probs

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def save(self, path) -> None:
        """Write a checkpoint that `TestTimeAdapter` (or `load`) can consume."""
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_, seed=self.seed,
                        extra={"classes": self.classes_.tolist(),
                               "val_accuracy": self.val_accuracy_})

    @classmethod
    def load(cls, path) -> "SourceNetClassifier":
        params, meta = load_checkpoint(path)
        est = cls(hidden=params.arch.hidden, bottleneck_dim=params.arch.bottleneck_dim,
                  seed=meta["seed"])
        est.params_ = params
        est.classes_ = np.array(meta["extra"].get(
            "classes", list(range(params.arch.num_classes))))
        est.val_accuracy_ = meta["extra"].get("val_accuracy", float("nan"))
        est.n_features_in_ = params.arch.input_dim
        return est


class TestTimeAdapter(BaseEstimator, ClassifierMixin):
    """Adapt a source classifier to an unlabeled target set.

    ``source`` is a fitted SourceNetClassifier, a ModelParams, or a checkpoint
    path. ``fit(X)`` runs offline multi-epoch adaptation (or a single online
    pass with ``online=True``); ``y`` is optional and only feeds the
    pseudo-label accuracy log. After fitting, ``predict`` uses the adapted
    model in inference mode.
    """

    __test__ = False  # the name says "test-time", not "test case"

    def __init__(self, source=None, epochs=15, batch_size=128, lr=2e-4,
                 sgd_momentum=0.9, weight_decay=1e-4, head_lr_mult=10.0,
                 full_cosine=False, ema_momentum=0.999, temperature=0.07,
                 memory_size=None, contrast_queue_size=4096, num_neighbors=11,
                 weight_ce=1.0, weight_ctr=1.0, weight_div=1.0,
                 pseudo_mode="refined", use_contrastive=True, use_exclusion=True,
                 use_weak_strong=True, use_diversity=True, online=False,
                 warmup_samples=None, weak_jitter_sigma=0.05,
                 strong_jitter_sigma=0.2, strong_drop_prob=0.2,
                 strong_scale_range=(0.7, 1.3), seed=0):
        self.source = source
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.sgd_momentum = sgd_momentum
        self.weight_decay = weight_decay
        self.head_lr_mult = head_lr_mult
        self.full_cosine = full_cosine
        self.ema_momentum = ema_momentum
        self.temperature = temperature
        self.memory_size = memory_size
        self.contrast_queue_size = contrast_queue_size
        self.num_neighbors = num_neighbors
        self.weight_ce = weight_ce
        self.weight_ctr = weight_ctr
        self.weight_div = weight_div
        self.pseudo_mode = pseudo_mode
        self.use_contrastive = use_contrastive
        self.use_exclusion = use_exclusion
        self.use_weak_strong = use_weak_strong
        self.use_diversity = use_diversity
        self.online = online
        self.warmup_samples = warmup_samples
        self.weak_jitter_sigma = weak_jitter_sigma
        self.strong_jitter_sigma = strong_jitter_sigma
        self.strong_drop_prob = strong_drop_prob
        self.strong_scale_range = strong_scale_range
        self.seed = seed

    def _source_params(self) -> tuple[ModelParams, np.ndarray]:
        source = self.source
        if source is None:
            raise ValueError("TestTimeAdapter needs a fitted source model")
        if isinstance(source, SourceNetClassifier):
            check_is_fitted(source, "params_")
            return source.params_, source.classes_
        if isinstance(source, ModelParams):
            return source, np.arange(source.arch.num_classes)
        params, meta = load_checkpoint(source)
        classes = meta["extra"].get("classes", list(range(params.arch.num_classes)))
        return params, np.array(classes)

    def _config(self) -> AdaptConfig:
        return _as_config(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            sgd_momentum=self.sgd_momentum, weight_decay=self.weight_decay,
            head_lr_mult=self.head_lr_mult, full_cosine=self.full_cosine,
            ema_momentum=self.ema_momentum, temperature=self.temperature,
            memory_size=self.memory_size,
            contrast_queue_size=self.contrast_queue_size,
            num_neighbors=self.num_neighbors, weight_ce=self.weight_ce,
            weight_ctr=self.weight_ctr, weight_div=self.weight_div,
            pseudo_mode=self.pseudo_mode, use_contrastive=self.use_contrastive,
            use_exclusion=self.use_exclusion, use_weak_strong=self.use_weak_strong,
            use_diversity=self.use_diversity, warmup_samples=self.warmup_samples,
            seed=self.seed, weak_jitter_sigma=self.weak_jitter_sigma,
            strong_jitter_sigma=self.strong_jitter_sigma,
            strong_drop_prob=self.strong_drop_prob,
            strong_scale_range=tuple(self.strong_scale_range))

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        source_params, classes = self._source_params()
        if X.shape[1] != source_params.arch.input_dim:
            raise ValueError(
                f"X has {X.shape[1]} features, source model expects "
                f"{source_params.arch.input_dim}")
        encoded = None
        if y is not None:
            y = np.asarray(y)
            lookup = {cls: i for i, cls in enumerate(classes)}
            encoded = np.array([lookup[val] for val in y])
        config = self._config()
        runner = adapt_online if self.online else adapt_offline
        result = runner(config, source_params, X, encoded)
        self.params_ = result.params
        self.result_ = result
        self.classes_ = np.asarray(classes)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        _, _, probs = predict(self.params_, X, mode="eval")
        return probs

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
