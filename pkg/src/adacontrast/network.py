"""The classifier network and its momentum (EMA) twin.

Architecture: MLP encoder with ReLU, a bottleneck (fully-connected layer
followed by batch norm) producing the feature space, and a weight-normalized
linear classifier on top. The live model is trained by gradient descent; the
momentum model tracks it by exponential moving average (parameters and batch
norm buffers alike) and is never back-propagated through.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Node, NumericError, ShapeError, Tape, Tensor

CHECKPOINT_FORMAT = "adacontrast.checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetArch:
    """Shape of the network: encoder widths, bottleneck, classifier."""

    input_dim: int
    num_classes: int
    hidden: tuple[int, ...] = (64, 64)
    bottleneck_dim: int = 256
    bn_momentum: float = 0.1

    def __post_init__(self) -> None:
        dims = (self.input_dim, self.num_classes, self.bottleneck_dim, *self.hidden)
        if any(d < 1 for d in dims):
            raise ValueError("all architecture dimensions must be >= 1")
        if not 0.0 < self.bn_momentum <= 1.0:
            raise ValueError("bn_momentum must be in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "hidden": list(self.hidden),
            "bottleneck_dim": self.bottleneck_dim,
            "bn_momentum": self.bn_momentum,
        }

    @staticmethod
    def from_dict(data: dict) -> "NetArch":
        return NetArch(
            input_dim=int(data["input_dim"]),
            num_classes=int(data["num_classes"]),
            hidden=tuple(int(h) for h in data["hidden"]),
            bottleneck_dim=int(data["bottleneck_dim"]),
            bn_momentum=float(data["bn_momentum"]),
        )


# Learnable parameter keys, in a fixed order:
#   encoder.{i}.weight / encoder.{i}.bias       for each hidden layer
#   bottleneck.weight / bottleneck.bias
#   bottleneck.bn.gamma / bottleneck.bn.beta
#   head.direction (C x D) / head.scale (C)
# Buffers: bottleneck.bn.running_mean / bottleneck.bn.running_var


@dataclass
class ModelParams:
    """All weights plus batch-norm running statistics for one model."""

    arch: NetArch
    learnable: dict[str, Tensor]
    buffers: dict[str, Tensor]

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, dict(self.learnable), dict(self.buffers))

    def all_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.learnable.items()
        yield from self.buffers.items()

    def lr_multipliers(self, head_multiplier: float) -> dict[str, float]:
        """Bottleneck and classifier train faster than the encoder."""
        return {
            key: (1.0 if key.startswith("encoder.") else head_multiplier)
            for key in self.learnable
        }

    def allclose(self, other: "ModelParams", rtol: float = 0.0, atol: float = 0.0) -> bool:
        keys = set(self.learnable) | set(self.buffers)
        if keys != set(other.learnable) | set(other.buffers):
            return False
        for key, tensor in self.all_tensors():
            theirs = other.learnable.get(key, other.buffers.get(key))
            if not np.allclose(tensor.data, theirs.data, rtol=rtol, atol=atol):
                return False
        return True


def init_params(arch: NetArch, rng: np.random.Generator) -> ModelParams:
    """He-initialized encoder/bottleneck, unit-scale weight-norm classifier."""
    learnable: dict[str, Tensor] = {}
    fan_in = arch.input_dim
    for i, width in enumerate(arch.hidden):
        std = np.sqrt(2.0 / fan_in)
        learnable[f"encoder.{i}.weight"] = Tensor(rng.normal(0.0, std, size=(fan_in, width)))
        learnable[f"encoder.{i}.bias"] = Tensor(np.zeros(width))
        fan_in = width
    std = np.sqrt(2.0 / fan_in)
    learnable["bottleneck.weight"] = Tensor(rng.normal(0.0, std, size=(fan_in, arch.bottleneck_dim)))
    learnable["bottleneck.bias"] = Tensor(np.zeros(arch.bottleneck_dim))
    learnable["bottleneck.bn.gamma"] = Tensor(np.ones(arch.bottleneck_dim))
    learnable["bottleneck.bn.beta"] = Tensor(np.zeros(arch.bottleneck_dim))
    directions = rng.normal(0.0, 1.0, size=(arch.num_classes, arch.bottleneck_dim))
    learnable["head.direction"] = Tensor(directions)
    learnable["head.scale"] = Tensor(np.ones(arch.num_classes))
    buffers = {
        "bottleneck.bn.running_mean": Tensor(np.zeros(arch.bottleneck_dim)),
        "bottleneck.bn.running_var": Tensor(np.ones(arch.bottleneck_dim)),
    }
    return ModelParams(arch, learnable, buffers)


@dataclass
class ForwardResult:
    """Graph nodes for one forward pass plus pending batch-norm statistics."""

    features: Node
    logits: Node
    probs: Node
    bn_batch_mean: np.ndarray | None = None
    bn_batch_var: np.ndarray | None = None


def forward_graph(tape: Tape, nodes: dict[str, Node], params: ModelParams,
                  x: np.ndarray, mode: str) -> ForwardResult:
    """Assemble encoder -> bottleneck(+BN) -> weight-norm head on a tape.

    ``nodes`` maps learnable parameter keys to tape nodes (leaves for a
    training pass, constants for a pure evaluation). ``mode`` selects batch
    ("train") vs running ("eval") statistics in the bottleneck batch norm.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.arch.input_dim:
        raise ShapeError(
            f"batch shape {x.shape} incompatible with input_dim {params.arch.input_dim}")
    h = tape.constant(x, name="input")
    for i in range(len(params.arch.hidden)):
        h = ad.matmul(h, nodes[f"encoder.{i}.weight"])
        h = ad.add(h, nodes[f"encoder.{i}.bias"])
        h = ad.relu(h)
    h = ad.matmul(h, nodes["bottleneck.weight"])
    h = ad.add(h, nodes["bottleneck.bias"])
    gamma = nodes["bottleneck.bn.gamma"]
    beta = nodes["bottleneck.bn.beta"]
    batch_mean = batch_var = None
    if mode == "train":
        features, batch_mean, batch_var = ad.batch_norm_train(h, gamma, beta, name="features")
    else:
        features = ad.batch_norm_eval(
            h, gamma, beta,
            params.buffers["bottleneck.bn.running_mean"].data,
            params.buffers["bottleneck.bn.running_var"].data,
            name="features")
    logits = weight_norm_logits_graph(features, nodes["head.direction"], nodes["head.scale"])
    probs = ad.softmax(logits, name="probs")
    return ForwardResult(features, logits, probs, batch_mean, batch_var)


def weight_norm_logits_graph(features: Node, direction: Node, scale: Node) -> Node:
    """logit_c = scale_c * (direction_c / ||direction_c||) . feature"""
    if np.any(np.sqrt((direction.value ** 2).sum(axis=1)) == 0.0):
        raise NumericError("classifier direction row with zero norm")
    unit = ad.l2_normalize_rows(direction)
    raw = ad.matmul(features, ad.transpose(unit))
    return ad.mul(raw, scale, name="logits")


def updated_bn_buffers(params: ModelParams, batch_mean: np.ndarray,
                       batch_var: np.ndarray, batch_size: int) -> dict[str, Tensor]:
    """Fold batch statistics into the running buffers (momentum update).

    Running variance stores the unbiased estimate, normalization inside the
    forward uses the biased batch variance.
    """
    momentum = params.arch.bn_momentum
    if batch_size > 1:
        unbiased = batch_var * batch_size / (batch_size - 1)
    else:
        unbiased = batch_var
    mean = params.buffers["bottleneck.bn.running_mean"].data
    var = params.buffers["bottleneck.bn.running_var"].data
    return {
        "bottleneck.bn.running_mean": Tensor((1.0 - momentum) * mean + momentum * batch_mean),
        "bottleneck.bn.running_var": Tensor((1.0 - momentum) * var + momentum * unbiased),
    }


def _value_forward(params: ModelParams, x: np.ndarray, mode: str,
                   update_stats: bool) -> ForwardResult:
    tape = Tape()
    nodes = {key: tape.constant(value, name=key) for key, value in params.learnable.items()}
    result = forward_graph(tape, nodes, params, x, mode)
    if mode == "train" and update_stats:
        params.buffers.update(updated_bn_buffers(
            params, result.bn_batch_mean, result.bn_batch_var, np.asarray(x).shape[0]))
    return result


def encode(params: ModelParams, x: np.ndarray, mode: str = "eval",
           update_stats: bool = False) -> np.ndarray:
    """Features (batch x bottleneck_dim). ``mode`` selects the BN statistics;
    train mode folds batch statistics into the running buffers only when
    ``update_stats`` is set (the adaptation loop does, library callers do not).
    """
    return _value_forward(params, x, mode, update_stats).features.value


def weight_norm_logits(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Classifier logits for precomputed features."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.arch.bottleneck_dim:
        raise ShapeError(f"features shape {features.shape} incompatible with "
                         f"bottleneck_dim {params.arch.bottleneck_dim}")
    tape = Tape()
    node = weight_norm_logits_graph(
        tape.constant(features, name="features"),
        tape.constant(params.learnable["head.direction"], name="head.direction"),
        tape.constant(params.learnable["head.scale"], name="head.scale"))
    return node.value


def predict(params: ModelParams, x: np.ndarray, mode: str = "eval",
            update_stats: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(features, logits, probs) for a batch; eval mode is pure per-sample."""
    result = _value_forward(params, x, mode, update_stats)
    return result.features.value, result.logits.value, result.probs.value


# ---------------------------------------------------------------------------
# momentum model
# ---------------------------------------------------------------------------

@dataclass
class MomentumState:
    """EMA twin of the live model; updated by ema_update, never by gradients."""

    params: ModelParams
    momentum: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("EMA momentum must be in [0, 1]")


def init_from_source(source: ModelParams, ema_momentum: float = 0.999,
                     ) -> tuple[ModelParams, MomentumState]:
    """Value-equal live and momentum copies of the source model."""
    return source.copy(), MomentumState(source.copy(), ema_momentum)


def ema_update(state: MomentumState, live: ModelParams) -> MomentumState:
    """theta' <- m*theta' + (1-m)*theta, element-wise over every tensor
    (batch-norm running statistics included)."""
    m = state.momentum
    old = state.params

    def blend(store_old: dict[str, Tensor], store_new: dict[str, Tensor]) -> dict[str, Tensor]:
        out = {}
        for key, tensor in store_old.items():
            fresh = store_new[key]
            if tensor.shape != fresh.shape:
                raise ShapeError(f"EMA shape mismatch for '{key}'")
            out[key] = Tensor(m * tensor.data + (1.0 - m) * fresh.data)
        return out

    merged = ModelParams(old.arch, blend(old.learnable, live.learnable),
                         blend(old.buffers, live.buffers))
    return MomentumState(merged, m)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _tensor_to_json(tensor: Tensor) -> dict:
    return {"shape": list(tensor.shape), "data": tensor.data.reshape(-1).tolist()}


def _tensor_from_json(blob: dict) -> Tensor:
    return Tensor(np.array(blob["data"], dtype=np.float64).reshape(blob["shape"]))


def save_checkpoint(path, params: ModelParams, seed: int, extra: dict | None = None) -> None:
    """Self-describing JSON container; float64 values round-trip exactly."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": params.arch.to_dict(),
        "learnable": {k: _tensor_to_json(v) for k, v in params.learnable.items()},
        "buffers": {k: _tensor_to_json(v) for k, v in params.buffers.items()},
        "seed": int(seed),
        "extra": extra or {},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Inverse of save_checkpoint; returns (params, metadata)."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an adacontrast checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    arch = NetArch.from_dict(payload["arch"])
    params = ModelParams(
        arch,
        {k: _tensor_from_json(v) for k, v in payload["learnable"].items()},
        {k: _tensor_from_json(v) for k, v in payload["buffers"].items()},
    )
    meta = {"seed": payload["seed"], "extra": payload["extra"]}
    return params, meta
