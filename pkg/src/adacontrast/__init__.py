"""Contrastive test-time adaptation on vector data.

Source training, per-batch pseudo-label refinement by nearest-neighbor soft
voting, class-excluded contrastive learning, weak-strong consistency and
diversity regularization, plus a synthetic domain-shift benchmark harness.
"""

from .autodiff import Tensor, SgdState, cosine_lr, finite_diff_grad, forward_backward, sgd_step
from .network import (
    ModelParams,
    MomentumState,
    NetArch,
    ema_update,
    encode,
    init_from_source,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
    weight_norm_logits,
)
from .augment import AugmentConfig, strong_augment, weak_augment
from .queues import ContrastQueue, VotingQueue, knn_query
from .voting import PseudoLabelRecord, batch_refine, refine
from .losses import (
    ContrastiveBatch,
    LossBreakdown,
    diversity_loss,
    info_nce_excluded,
    label_smoothed_ce,
    total_loss,
    weak_strong_ce,
)
from .metrics import CalibrationReport, accuracy, calibration
from .adapt import (
    AdaptConfig,
    AdaptResult,
    DivergenceError,
    adapt_offline,
    adapt_online,
    train_source,
)
from .tasks import ShiftTask, make_task
from .estimators import SourceNetClassifier, TestTimeAdapter

__version__ = "0.1.0"
