"""Sectioned ``key = value`` run configuration with dotted overrides."""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .perception.model import ModelConfig


@dataclass
class DataConfig:
    seed: int = 0
    canvas: int = 64
    n_categories: int = 6
    n_train: int = 2000
    n_test: int = 300
    objects_min: int = 1
    objects_max: int = 3
    size_min: int = 14
    size_max: int = 28
    occlusion_prob: float = 0.0
    distractor_rate: float = 0.3
    outlier_rate: float = 0.1
    test_outlier_rate: float = -1.0  # < 0: same as outlier_rate


@dataclass
class LibraryConfig:
    guard: bool = True
    seed: int = 0


@dataclass
class TrainConfig:
    n_prompts: int = 8
    prompt_update_every: int = 1
    batch_size: int = 8
    iterations: int = 5000
    lr: float = 1e-4
    lr_drop_at: int = 0  # iteration after which lr is multiplied by lr_drop_factor; 0 = constant lr
    lr_drop_factor: float = 0.1
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    seed: int = 0
    selector: str = "pfsm"
    loss_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    cost_weights: tuple[float, ...] = (2.0, 5.0, 2.0)
    shuffle_categories: bool = True
    aux_loss: bool = True
    log_every: int = 1

    def __post_init__(self):
        if self.n_prompts < 1:
            raise ConfigError("train.n_prompts must be >= 1")
        if self.prompt_update_every < 1:
            raise ConfigError("train.prompt_update_every must be >= 1")
        if len(self.loss_weights) != 4 or len(self.cost_weights) != 3:
            raise ConfigError("train.loss_weights needs 4 values and train.cost_weights 3")


@dataclass
class EvalConfig:
    seed: int = 1234
    batch_size: int = 25
    max_dets: int = 100
    n_prompts: int = -1  # < 0: same as train.n_prompts


@dataclass
class AblationConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    selector_grid: tuple[str, ...] = ("mean-pool", "fc", "cnn", "pfsm")
    quantity_grid: tuple[int, ...] = (1, 3, 8, 12)
    frequency_grid: tuple[int, ...] = (1, 100, 200)
    workers: int = 1


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    library: LibraryConfig = field(default_factory=LibraryConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def sections(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def resolved_model(self) -> ModelConfig:
        """Model config with the fields that mirror training settings filled in."""
        return dataclasses.replace(self.model, selector=self.train.selector, n_prompts=self.train.n_prompts,
                                   seed=self.train.seed)


# model fields filled in from the train section (see RunConfig.resolved_model)
MIRRORED = {"model.selector": "train.selector", "model.n_prompts": "train.n_prompts", "model.seed": "train.seed"}


def _parse(value: str, default, key: str):
    value = value.strip()
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = [v.strip() for v in value.strip("()[]").split(",") if v.strip()]
            proto = default[0] if default else ""
            return tuple(_parse(v, proto, key) for v in items)
        return value
    except ValueError as exc:
        raise ConfigError(f"bad value {value!r} for {key}") from exc


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def apply_overrides(cfg: RunConfig, items: dict[str, str]) -> RunConfig:
    """Set ``section.key`` entries; unknown sections or keys raise :class:`ConfigError`."""
    secs = cfg.sections()
    updates: dict[str, dict] = {}
    for dotted, raw in items.items():
        if "." not in dotted:
            raise ConfigError(f"override key {dotted!r} must look like section.key")
        if dotted in MIRRORED:
            raise ConfigError(f"{dotted} follows {MIRRORED[dotted]}; set that key instead")
        sec, key = dotted.split(".", 1)
        if sec not in secs:
            raise ConfigError(f"unknown config section {sec!r}")
        known = {f.name: f for f in fields(secs[sec])}
        if key not in known:
            raise ConfigError(f"unknown config key {dotted!r}")
        updates.setdefault(sec, {})[key] = _parse(str(raw), getattr(secs[sec], key), dotted)
    out = {}
    for sec, obj in secs.items():
        try:
            out[sec] = dataclasses.replace(obj, **updates.get(sec, {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
    return RunConfig(**out)


def load_config(path: str | os.PathLike | None = None, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    items: dict[str, str] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for sec in parser.sections():
            for key, value in parser.items(sec):
                items[f"{sec}.{key}"] = value
    cfg = apply_overrides(cfg, items)
    extra = {}
    for ov in overrides or []:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} must be KEY=VALUE")
        k, v = ov.split("=", 1)
        extra[k.strip()] = v
    return apply_overrides(cfg, extra)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for sec, obj in cfg.sections().items():
        lines.append(f"[{sec}]")
        for f in fields(obj):
            if f"{sec}.{f.name}" in MIRRORED:
                continue
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def save_config(cfg: RunConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(dump_config(cfg))
