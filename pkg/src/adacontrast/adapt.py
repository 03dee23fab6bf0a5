"""Source training and the target-adaptation loops (offline and online).

One adaptation step, in order: refine pseudo labels from the pre-update
queue snapshot, compute the enabled loss terms, update the live model,
EMA-update the momentum model, then refresh the voting queue (features and
probabilities from the just-updated momentum model on the same weak views)
and the contrast queue (this step's keys with their pseudo labels). Queues
are only ever touched after both model updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .augment import (
    BRANCH_QUEUE_INIT,
    BRANCH_STRONG_KEY,
    BRANCH_STRONG_QUERY,
    BRANCH_WEAK,
    AugmentConfig,
    augment_batch,
    derive_rng,
)
from .autodiff import NumericError, SgdState, Tape, sgd_step
from .losses import cross_entropy_graph, diversity_graph, info_nce_graph
from .network import (
    ModelParams,
    MomentumState,
    NetArch,
    ema_update,
    forward_graph,
    init_from_source,
    init_params,
    predict,
    updated_bn_buffers,
)
from .queues import ContrastQueue, VotingQueue
from .voting import PseudoLabelRecord, batch_refine

# RNG stream tags (kept distinct from augmentation branch ids by namespace).
STREAM_PARAM_INIT = 100
STREAM_SOURCE_SPLIT = 101
STREAM_SOURCE_ORDER = 102
STREAM_TARGET_ORDER = 103
STREAM_QW_SELECT = 104
STREAM_QS_INIT = 105

TRACE_EVENTS = ("refine", "loss", "update_params", "ema_update",
                "queue_w_update", "queue_s_update")


class DivergenceError(RuntimeError):
    """Non-finite loss or gradient during adaptation; carries a state dump."""

    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class AdaptConfig:
    """Every knob of source training and adaptation; defaults are the
    reference recipe (unit loss weights, 11 neighbors, EMA 0.999, tau 0.07)."""

    # optimization
    epochs: int = 15
    batch_size: int = 128
    lr: float = 2e-4
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    head_lr_mult: float = 10.0
    full_cosine: bool = False
    # momentum model and queues
    ema_momentum: float = 0.999
    temperature: float = 0.07
    memory_size: int | None = None        # voting queue; None -> min(n_t, 16384)
    contrast_queue_size: int = 4096
    num_neighbors: int = 11
    # loss weights
    weight_ce: float = 1.0
    weight_ctr: float = 1.0
    weight_div: float = 1.0
    # component switches (the ablation ladder flips these)
    pseudo_mode: str = "refined"          # "refined" | "epoch"
    use_contrastive: bool = True
    use_exclusion: bool = True
    use_weak_strong: bool = True
    use_diversity: bool = True
    # online mode
    warmup_samples: int | None = None     # None -> desk-scale default rule
    # source training
    source_epochs: int = 40
    source_lr: float = 0.01
    label_smoothing: float = 0.1
    # misc
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.source_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm)")
        if self.pseudo_mode not in ("refined", "epoch"):
            raise ValueError("pseudo_mode must be 'refined' or 'epoch'")
        if self.num_neighbors < 1:
            raise ValueError("num_neighbors must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if min(self.weight_ce, self.weight_ctr, self.weight_div) < 0:
            raise ValueError("loss weights must be >= 0")

    def to_dict(self) -> dict:
        out = {}
        for key, value in self.__dict__.items():
            if key == "augment":
                out.update(value.to_dict())
            else:
                out[key] = value
        return out


def default_warmup(n_target: int) -> int:
    """Online warm-up length: ~4% of the stream, capped for desk scale."""
    if n_target > 25600:
        return 2048
    return min(1024, max(1, n_target // 25))


@dataclass
class AdaptResult:
    """Final parameters plus the full per-step metrics log."""

    params: ModelParams
    steps: list[dict]
    per_epoch: list[dict]
    mode: str
    total_steps: int
    progress: float
    dropped_batches: int = 0
    refined_steps: int = 0
    stream_preds: np.ndarray | None = None
    stream_probs: np.ndarray | None = None
    consumed_indices: np.ndarray | None = None


METRIC_COLUMNS = ("step", "epoch", "l_ce", "l_ctr", "l_div", "total", "lr",
                  "pseudo_label_acc")


def _epoch_batches(n: int, batch_size: int, order: np.ndarray) -> tuple[list[np.ndarray], int]:
    """Chunk an ordering into batches, dropping a trailing singleton."""
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    dropped = 0
    if batches and len(batches[-1]) < 2:
        batches.pop()
        dropped = 1
    return batches, dropped


def init_voting_queue(target_x: np.ndarray, momentum: MomentumState,
                      memory_size: int, config: AdaptConfig) -> VotingQueue:
    """Fill the voting queue from randomly selected weakly-augmented samples
    pushed through the momentum model."""
    n = target_x.shape[0]
    if n == 0:
        raise ValueError("empty target dataset")
    arch = momentum.params.arch
    size = min(memory_size, n)
    queue = VotingQueue(size, arch.bottleneck_dim, arch.num_classes)
    if size == 0:
        return queue
    chosen = derive_rng(config.seed, STREAM_QW_SELECT).choice(n, size=size, replace=False)
    for start in range(0, size, config.batch_size):
        idx = chosen[start:start + config.batch_size]
        x_weak = augment_batch(target_x[idx], idx, config.augment,
                               config.seed, 0, BRANCH_QUEUE_INIT)
        feats, _, probs = predict(momentum.params, x_weak, mode="eval")
        queue.enqueue(features=feats, probs=probs)
    return queue


class _AdaptEngine:
    """Shared per-step machinery for the offline and online loops."""

    def __init__(self, config: AdaptConfig, source_params: ModelParams,
                 n_target: int, trace: Callable[[str], None] | None):
        self.config = config
        self.trace = trace or (lambda event: None)
        self.live, self.momentum = init_from_source(source_params, config.ema_momentum)
        arch = source_params.arch
        self.memory_size = config.memory_size if config.memory_size is not None \
            else min(n_target, 16384)
        self.qw: VotingQueue | None = None
        self.qs = ContrastQueue.random_init(
            config.contrast_queue_size, arch.bottleneck_dim, arch.num_classes,
            derive_rng(config.seed, STREAM_QS_INIT)) if config.use_contrastive else None
        self.sgd = SgdState(
            base_lr=config.lr, momentum=config.sgd_momentum,
            weight_decay=config.weight_decay,
            lr_multipliers=self.live.lr_multipliers(config.head_lr_mult),
            full_cosine=config.full_cosine)
        self.ce_on = config.weight_ce > 0
        self.ctr_on = config.use_contrastive and config.weight_ctr > 0
        self.div_on = config.use_diversity and config.weight_div > 0

    def _commit_bn(self, result, batch_size: int) -> None:
        self.live.buffers.update(updated_bn_buffers(
            self.live, result.bn_batch_mean, result.bn_batch_var, batch_size))

    def step(self, target_x: np.ndarray, idx: np.ndarray, epoch: int,
             progress: float, refine_enabled: bool,
             epoch_labels: np.ndarray | None = None) -> dict:
        """One mini-batch adaptation step; returns the loss log entries."""
        config = self.config
        batch = target_x[idx]
        n_batch = len(idx)
        needs_strong = self.ctr_on or self.div_on or (self.ce_on and config.use_weak_strong)
        ce_on_weak = self.ce_on and not config.use_weak_strong

        tape = Tape()
        nodes = {key: tape.leaf(value, name=key)
                 for key, value in self.live.learnable.items()}

        # weak view: pseudo-label source, and the CE view for ladder rows
        # without weak-strong consistency
        x_weak = augment_batch(batch, idx, config.augment, config.seed, epoch, BRANCH_WEAK)
        if ce_on_weak:
            weak = forward_graph(tape, nodes, self.live, x_weak, "train")
            self._commit_bn(weak, n_batch)
            weak_feats = weak.features.value
            weak_probs_value = weak.probs.value
            weak_probs_node = weak.probs
        else:
            weak_feats, _, weak_probs_value = predict(
                self.live, x_weak, mode="train", update_stats=True)
            weak_probs_node = None

        if config.pseudo_mode == "epoch":
            records = [PseudoLabelRecord(weak_probs_value[i], int(epoch_labels[j]))
                       for i, j in enumerate(idx)]
        else:
            records = batch_refine(self.qw, weak_feats, weak_probs_value,
                                   config.num_neighbors, enabled=refine_enabled)
        labels = np.array([record.label for record in records], dtype=np.int64)
        self.trace("refine")

        strong = None
        keys = None
        if needs_strong:
            x_query = augment_batch(batch, idx, config.augment, config.seed,
                                    epoch, BRANCH_STRONG_QUERY)
            strong = forward_graph(tape, nodes, self.live, x_query, "train")
            self._commit_bn(strong, n_batch)
        if self.ctr_on:
            x_key = augment_batch(batch, idx, config.augment, config.seed,
                                  epoch, BRANCH_STRONG_KEY)
            keys, _, _ = predict(self.momentum.params, x_key, mode="eval")

        terms = []
        values = {"l_ce": 0.0, "l_ctr": 0.0, "l_div": 0.0}
        if self.ce_on:
            ce_probs = strong.probs if config.use_weak_strong else weak_probs_node
            ce_node = cross_entropy_graph(ce_probs, labels)
            values["l_ce"] = float(ce_node.value)
            terms.append(ad.scale(ce_node, config.weight_ce))
        if self.ctr_on:
            queue_labels = self.qs.labels if config.use_exclusion \
                else np.full(len(self.qs), -1, dtype=np.int64)
            ctr_node = info_nce_graph(strong.features, keys, labels,
                                      self.qs.keys, queue_labels, config.temperature)
            values["l_ctr"] = float(ctr_node.value)
            terms.append(ad.scale(ctr_node, config.weight_ctr))
        if self.div_on:
            div_node = diversity_graph(strong.probs)
            values["l_div"] = float(div_node.value)
            terms.append(ad.scale(div_node, config.weight_div))
        self.trace("loss")

        lr = ad.cosine_lr(config.lr, progress, config.full_cosine)
        if terms:
            total = terms[0]
            for term in terms[1:]:
                total = ad.add(total, term)
            tape.backward(total)
            grads = {key: (node.grad if node.grad is not None
                           else np.zeros(node.value.shape))
                     for key, node in nodes.items()}
            self.live.learnable = sgd_step(self.sgd, self.live.learnable, grads, progress)
            self.trace("update_params")

        self.momentum = ema_update(self.momentum, self.live)
        self.trace("ema_update")

        if self.qw is not None:
            feats, _, probs = predict(self.momentum.params, x_weak, mode="eval")
            self.qw.enqueue(features=feats, probs=probs)
            self.trace("queue_w_update")
        if self.ctr_on:
            key_norms = np.linalg.norm(keys, axis=1, keepdims=True)
            if np.any(key_norms == 0.0):
                raise NumericError("zero-norm key feature")
            self.qs.enqueue(keys=keys / key_norms, labels=labels.astype(np.float64))
            self.trace("queue_s_update")

        total_value = (config.weight_ce * values["l_ce"]
                       + config.weight_ctr * values["l_ctr"]
                       + config.weight_div * values["l_div"])
        refined = bool(records and records[0].refined)
        return {**values, "total": total_value, "lr": lr, "labels": labels,
                "refined": refined}

    def state_dump(self, step: int, epoch: int) -> dict:
        return {
            "step": step,
            "epoch": epoch,
            "config": self.config.to_dict(),
            "learnable_norms": {k: float(np.linalg.norm(v.data))
                                for k, v in self.live.learnable.items()},
        }


def _pl_accuracy(labels: np.ndarray, truth: np.ndarray | None) -> float:
    if truth is None:
        return float("nan")
    return float(np.mean(labels == truth))


def adapt_offline(config: AdaptConfig, source_params: ModelParams,
                  target_x: np.ndarray, target_y: np.ndarray | None = None,
                  trace: Callable[[str], None] | None = None,
                  on_step: Callable[[dict], None] | None = None) -> AdaptResult:
    """Multi-epoch adaptation with a pre-filled voting queue.

    ``target_y`` is used only to log pseudo-label accuracy; ``on_step``
    receives each metrics row as soon as it exists (streaming log writers).
    """
    target_x = np.asarray(target_x, dtype=np.float64)
    n = target_x.shape[0]
    if n == 0:
        raise ValueError("empty target dataset")
    engine = _AdaptEngine(config, source_params, n, trace)
    if config.pseudo_mode == "refined":
        engine.qw = init_voting_queue(target_x, engine.momentum, engine.memory_size, config)

    orders = [derive_rng(config.seed, STREAM_TARGET_ORDER, epoch).permutation(n)
              for epoch in range(config.epochs)]
    plans = [_epoch_batches(n, config.batch_size, order) for order in orders]
    total_steps = sum(len(batches) for batches, _ in plans)
    dropped = sum(d for _, d in plans)

    rows: list[dict] = []
    per_epoch: list[dict] = []
    step = 0
    refined_steps = 0
    for epoch in range(config.epochs):
        epoch_labels = None
        if config.pseudo_mode == "epoch":
            _, _, probs = predict(engine.live, target_x, mode="eval")
            epoch_labels = probs.argmax(axis=1)
        batches, _ = plans[epoch]
        epoch_hits: list[float] = []
        for idx in batches:
            progress = step / total_steps
            try:
                out = engine.step(target_x, idx, epoch, progress, refine_enabled=True,
                                  epoch_labels=epoch_labels)
            except NumericError as err:
                raise DivergenceError(
                    f"non-finite value at step {step} (epoch {epoch}): {err}",
                    engine.state_dump(step, epoch)) from err
            acc = _pl_accuracy(out["labels"], None if target_y is None else target_y[idx])
            row = {"step": step, "epoch": epoch, "l_ce": out["l_ce"],
                   "l_ctr": out["l_ctr"], "l_div": out["l_div"],
                   "total": out["total"], "lr": out["lr"],
                   "pseudo_label_acc": acc}
            rows.append(row)
            if on_step is not None:
                on_step(row)
            if out["refined"]:
                refined_steps += 1
            if not math.isnan(acc):
                epoch_hits.append(acc)
            step += 1
        per_epoch.append({
            "epoch": epoch,
            "pseudo_label_acc": float(np.mean(epoch_hits)) if epoch_hits else float("nan"),
        })
    progress = step / total_steps if total_steps else 0.0
    return AdaptResult(engine.live, rows, per_epoch, "offline", total_steps,
                       progress, dropped_batches=dropped, refined_steps=refined_steps)


def adapt_online(config: AdaptConfig, source_params: ModelParams,
                 target_x: np.ndarray, target_y: np.ndarray | None = None,
                 trace: Callable[[str], None] | None = None,
                 on_step: Callable[[dict], None] | None = None) -> AdaptResult:
    """Single-pass streaming adaptation.

    Predictions for each batch are recorded with the pre-update model
    (evaluate-then-adapt), the learning rate never decays, the voting queue
    starts empty and fills on the fly, and refinement switches on once the
    queue has accumulated the warm-up number of entries.
    """
    target_x = np.asarray(target_x, dtype=np.float64)
    n = target_x.shape[0]
    if n == 0:
        raise ValueError("empty target stream")
    if config.pseudo_mode != "refined":
        raise ValueError("online adaptation requires pseudo_mode='refined'")
    warmup = config.warmup_samples if config.warmup_samples is not None \
        else default_warmup(n)
    engine = _AdaptEngine(config, source_params, n, trace)
    arch = source_params.arch
    engine.qw = VotingQueue(min(engine.memory_size, n), arch.bottleneck_dim,
                            arch.num_classes)

    order = np.arange(n)
    batches, dropped = _epoch_batches(n, config.batch_size, order)
    total_steps = len(batches)

    stream_preds = np.full(n, -1, dtype=np.int64)
    stream_probs = np.zeros((n, arch.num_classes))
    consumed: list[int] = []
    rows: list[dict] = []
    hits: list[float] = []
    step = 0
    refined_steps = 0

    def handle_batch(idx: np.ndarray, adaptable: bool) -> None:
        nonlocal step, refined_steps
        _, _, probs = predict(engine.live, target_x[idx], mode="eval")
        stream_probs[idx] = probs
        stream_preds[idx] = probs.argmax(axis=1)
        consumed.extend(int(i) for i in idx)
        if not adaptable:
            return
        refine_enabled = len(engine.qw) >= warmup
        try:
            out = engine.step(target_x, idx, 0, 0.0, refine_enabled)
        except NumericError as err:
            raise DivergenceError(
                f"non-finite value at stream step {step}: {err}",
                engine.state_dump(step, 0)) from err
        acc = _pl_accuracy(out["labels"], None if target_y is None else target_y[idx])
        row = {"step": step, "epoch": 0, "l_ce": out["l_ce"],
               "l_ctr": out["l_ctr"], "l_div": out["l_div"],
               "total": out["total"], "lr": out["lr"],
               "pseudo_label_acc": acc}
        rows.append(row)
        if on_step is not None:
            on_step(row)
        if out["refined"]:
            refined_steps += 1
        if not math.isnan(acc):
            hits.append(acc)
        step += 1

    for idx in batches:
        handle_batch(idx, adaptable=True)
    remainder = order[len(batches) * config.batch_size:]
    if remainder.size:
        handle_batch(remainder, adaptable=False)  # predicted, too small to adapt

    per_epoch = [{"epoch": 0,
                  "pseudo_label_acc": float(np.mean(hits)) if hits else float("nan")}]
    progress = step / total_steps if total_steps else 0.0
    return AdaptResult(engine.live, rows, per_epoch, "online", total_steps, progress,
                       dropped_batches=dropped, refined_steps=refined_steps,
                       stream_preds=stream_preds, stream_probs=stream_probs,
                       consumed_indices=np.array(consumed, dtype=np.int64))


# ---------------------------------------------------------------------------
# source training
# ---------------------------------------------------------------------------

@dataclass
class SourceResult:
    params: ModelParams
    val_accuracy: float
    train_rows: list[dict]
    val_history: list[float]
    split_seed: int


def train_source(config: AdaptConfig, arch: NetArch, x: np.ndarray,
                 y: np.ndarray) -> SourceResult:
    """Label-smoothed cross-entropy training with a seeded 9:1 split.

    The returned parameters are the snapshot with the best validation
    accuracy (earliest epoch wins ties); zero epochs returns the
    initialization unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty source dataset")
    perm = derive_rng(config.seed, STREAM_SOURCE_SPLIT).permutation(n)
    n_val = max(1, int(round(0.1 * n))) if n > 1 else 0
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if train_idx.size == 0:
        raise ValueError("source dataset too small to split 9:1")

    params = init_params(arch, derive_rng(config.seed, STREAM_PARAM_INIT))
    sgd = SgdState(base_lr=config.source_lr, momentum=config.sgd_momentum,
                   weight_decay=config.weight_decay,
                   lr_multipliers=params.lr_multipliers(config.head_lr_mult),
                   full_cosine=config.full_cosine)

    def val_accuracy(p: ModelParams) -> float:
        if val_idx.size == 0:
            return float("nan")
        _, _, probs = predict(p, x[val_idx], mode="eval")
        return float(np.mean(probs.argmax(axis=1) == y[val_idx]))

    best_params = params.copy()
    best_acc = val_accuracy(params)
    val_history = [best_acc]
    rows: list[dict] = []

    plans = [_epoch_batches(train_idx.size, config.batch_size,
                            derive_rng(config.seed, STREAM_SOURCE_ORDER, e)
                            .permutation(train_idx.size))
             for e in range(config.source_epochs)]
    total_steps = sum(len(b) for b, _ in plans)
    step = 0
    for epoch in range(config.source_epochs):
        batches, _ = plans[epoch]
        for local in batches:
            idx = train_idx[local]
            tape = Tape()
            nodes = {key: tape.leaf(value, name=key)
                     for key, value in params.learnable.items()}
            result = forward_graph(tape, nodes, params, x[idx], "train")
            params.buffers.update(updated_bn_buffers(
                params, result.bn_batch_mean, result.bn_batch_var, len(idx)))
            loss = cross_entropy_graph(result.probs, y[idx],
                                       smoothing=config.label_smoothing)
            tape.backward(loss)
            grads = {key: (node.grad if node.grad is not None
                           else np.zeros(node.value.shape))
                     for key, node in nodes.items()}
            progress = step / total_steps if total_steps else 0.0
            params.learnable = sgd_step(sgd, params.learnable, grads, progress)
            rows.append({"step": step, "epoch": epoch, "loss": float(loss.value),
                         "lr": ad.cosine_lr(config.source_lr, progress,
                                            config.full_cosine)})
            step += 1
        acc = val_accuracy(params)
        val_history.append(acc)
        if not math.isnan(acc) and acc > best_acc:
            best_acc = acc
            best_params = params.copy()
    return SourceResult(best_params, best_acc, rows, val_history, config.seed)
