"""Flat, typed run-configuration files.

Format: one ``key = value`` per line, ``#`` comments, blank lines ignored.
The schema is explicit and versioned; unknown keys are errors (a mistyped
hyperparameter must fail loudly, not fall back to a default silently).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .adapt import AdaptConfig
from .augment import AugmentConfig
from .network import NetArch
from .tasks import ShiftTask, make_task

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split(","))


def _parse_float_pair(text: str) -> tuple[float, float]:
    parts = [float(part) for part in text.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated floats: {text!r}")
    return parts[0], parts[1]


def _parse_optional_int(text: str) -> int | None:
    lowered = text.strip().lower()
    if lowered in ("none", "auto", "full"):
        return None
    return int(text)


_REQUIRED = object()

# key -> (parser, default); _REQUIRED means the key must be present
SCHEMA: dict[str, tuple[Any, Any]] = {
    "schema_version": (int, _REQUIRED),
    "name": (str, _REQUIRED),
    "task": (str, _REQUIRED),
    "seed": (int, 0),
    "n_source": (int, 2000),
    "n_target": (int, 2000),
    # architecture
    "hidden": (_parse_int_list, (64, 64)),
    "bottleneck_dim": (int, 256),
    # optimization
    "epochs": (int, 15),
    "batch_size": (int, 128),
    "lr": (float, 2e-4),
    "sgd_momentum": (float, 0.9),
    "weight_decay": (float, 1e-4),
    "head_lr_mult": (float, 10.0),
    "full_cosine": (_parse_bool, False),
    # momentum model and queues
    "ema_momentum": (float, 0.999),
    "temperature": (float, 0.07),
    "memory_size": (_parse_optional_int, None),
    "contrast_queue_size": (int, 4096),
    "num_neighbors": (int, 11),
    # loss weights
    "weight_ce": (float, 1.0),
    "weight_ctr": (float, 1.0),
    "weight_div": (float, 1.0),
    # components
    "pseudo_mode": (str, "refined"),
    "use_contrastive": (_parse_bool, True),
    "use_exclusion": (_parse_bool, True),
    "use_weak_strong": (_parse_bool, True),
    "use_diversity": (_parse_bool, True),
    # online mode
    "warmup_samples": (_parse_optional_int, None),
    # source training
    "source_epochs": (int, 40),
    "source_lr": (float, 0.01),
    "label_smoothing": (float, 0.1),
    # augmentation
    "weak_jitter_sigma": (float, 0.05),
    "strong_jitter_sigma": (float, 0.2),
    "strong_drop_prob": (float, 0.2),
    "strong_scale_lo": (float, 0.7),
    "strong_scale_hi": (float, 1.3),
}


@dataclass(frozen=True)
class RunConfig:
    """Parsed, validated run configuration."""

    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def name(self) -> str:
        return self.values["name"]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def with_overrides(self, **overrides) -> "RunConfig":
        unknown = set(overrides) - set(SCHEMA)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return RunConfig({**self.values, **overrides})

    def adapt_config(self) -> AdaptConfig:
        v = self.values
        augment = AugmentConfig(
            weak_jitter_sigma=v["weak_jitter_sigma"],
            strong_jitter_sigma=v["strong_jitter_sigma"],
            strong_drop_prob=v["strong_drop_prob"],
            strong_scale_range=(v["strong_scale_lo"], v["strong_scale_hi"]),
        )
        return AdaptConfig(
            epochs=v["epochs"], batch_size=v["batch_size"], lr=v["lr"],
            sgd_momentum=v["sgd_momentum"], weight_decay=v["weight_decay"],
            head_lr_mult=v["head_lr_mult"], full_cosine=v["full_cosine"],
            ema_momentum=v["ema_momentum"], temperature=v["temperature"],
            memory_size=v["memory_size"],
            contrast_queue_size=v["contrast_queue_size"],
            num_neighbors=v["num_neighbors"], weight_ce=v["weight_ce"],
            weight_ctr=v["weight_ctr"], weight_div=v["weight_div"],
            pseudo_mode=v["pseudo_mode"],
            use_contrastive=v["use_contrastive"],
            use_exclusion=v["use_exclusion"],
            use_weak_strong=v["use_weak_strong"],
            use_diversity=v["use_diversity"],
            warmup_samples=v["warmup_samples"],
            source_epochs=v["source_epochs"], source_lr=v["source_lr"],
            label_smoothing=v["label_smoothing"], seed=v["seed"],
            augment=augment,
        )

    def build_task(self) -> ShiftTask:
        return make_task(self.values["task"], self.values["seed"],
                         n_source=self.values["n_source"],
                         n_target=self.values["n_target"])

    def build_arch(self, task: ShiftTask) -> NetArch:
        return NetArch(input_dim=task.input_dim, num_classes=task.num_classes,
                       hidden=self.values["hidden"],
                       bottleneck_dim=self.values["bottleneck_dim"])

    def dump(self) -> str:
        lines = [f"# adacontrast run config (schema_version {SCHEMA_VERSION})"]
        for key in SCHEMA:
            value = self.values[key]
            if value is None:
                text = "none"
            elif isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, tuple):
                text = ",".join(str(part) for part in value)
            else:
                text = str(value)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str, origin: str = "<config>") -> RunConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value_text = line.partition("=")
        key = key.strip()
        value_text = value_text.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(value_text)
        except ValueError as err:
            raise ConfigError(f"{origin}:{lineno}: bad value for {key!r}: {err}") from err
    for key, (_, default) in SCHEMA.items():
        if key in values:
            continue
        if default is _REQUIRED:
            raise ConfigError(f"{origin}: missing required key {key!r}")
        values[key] = default
    if values["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(
            f"{origin}: unsupported schema_version {values['schema_version']} "
            f"(expected {SCHEMA_VERSION})")
    return RunConfig(values)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return parse_config_text(text, origin=str(path))
