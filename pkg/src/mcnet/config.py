"""Run configuration: typed dataclasses, INI round-tripping and presets.

A run config is a flat INI file with the sections ``[data]``, ``[model]``,
``[loss]``, ``[train]``, ``[protocol]`` and ``[ablation]``.  Unknown keys
are rejected; missing keys take the dataclass defaults below.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class ProtocolError(RuntimeError):
    """A session-protocol contract was violated at run time."""


class NumericError(FloatingPointError):
    """A numerical precondition failed (zero norm, non-finite loss, ...)."""


TRIPLET_VARIANTS = ("TL", "HTL", "PHT", "PSHT")
REGULARIZERS = ("none", "Cos", "CE", "AR")
CLASSIFIERS = ("CC", "SC")


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | manifest
    n_classes: int = 20
    image_size: int = 16
    channels: int = 3
    samples_per_class: int = 70
    noise_std: float = 0.5
    semantic_dim: int = 64
    root: str = ""
    manifest: str = ""
    semantic_file: str = ""
    strict_semantic: bool = False
    normalize: bool = False
    augment: bool = True


@dataclass
class ModelConfig:
    stem_width: int = 16
    backbone_widths: tuple[int, ...] = (16, 32)
    backbone_strides: tuple[int, ...] = (1, 2)
    head_width: int = 64
    cnn_head_blocks: int = 1
    attn_head_blocks: int = 2
    heads: int = 4
    position_encoding: str = "relative"  # relative | absolute
    semantic_hidden: int = 0  # 0 -> same as head_width
    init_seed: int = 0


@dataclass
class LossConfig:
    alpha: float = 0.4
    lam: float = 0.5
    tau: float = 16.0
    margin: float = 0.0
    ar_on_heads: bool = False


@dataclass
class TrainConfig:
    base_lr: float = 0.05
    incr_lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    incr_weight_decay: float = 0.0
    batch_size: int = 64
    base_epochs: int = 30
    incr_epochs: int = 30
    trainable_blocks: tuple[str, ...] = ("last",)
    pseudo_per_class: int = 0  # 0 -> k_shot
    variance_shrinkage: bool = False


@dataclass
class ProtocolConfig:
    base_classes: int = 10
    n_way: int = 2
    k_shot: int = 5
    n_sessions: int = 5
    test_per_class: int = 20
    seed: int = 0


@dataclass
class AblationConfig:
    use_model2: bool = True
    use_attention_head: bool = True
    use_AR: bool = True
    use_finetune: bool = True
    triplet_variant: str = "PSHT"
    regularizer: str = "AR"
    model1_classifier: str = "CC"


SECTIONS: dict[str, type] = {
    "data": DataConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "protocol": ProtocolConfig,
    "ablation": AblationConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self) -> "RunConfig":
        d, m, lc, t, p, a = (self.data, self.model, self.loss, self.train,
                             self.protocol, self.ablation)
        if d.source not in ("synthetic", "manifest"):
            raise ConfigError(f"data.source must be synthetic|manifest, got {d.source!r}")
        for name in ("n_classes", "image_size", "channels", "samples_per_class", "semantic_dim"):
            if getattr(d, name) <= 0:
                raise ConfigError(f"data.{name} must be positive")
        if d.noise_std < 0:
            raise ConfigError("data.noise_std must be >= 0")
        if len(m.backbone_widths) != len(m.backbone_strides) or not m.backbone_widths:
            raise ConfigError("model.backbone_widths and backbone_strides must be non-empty and equal length")
        if m.heads <= 0 or m.head_width % m.heads:
            raise ConfigError("model.head_width must be a positive multiple of model.heads")
        if m.cnn_head_blocks < 1 or m.attn_head_blocks < 1:
            raise ConfigError("heads need at least one block each")
        if m.position_encoding not in ("relative", "absolute"):
            raise ConfigError(f"unknown position_encoding {m.position_encoding!r}")
        for name in ("alpha", "lam", "margin"):
            v = getattr(lc, name)
            if not (v >= 0 and v != float("inf")):
                raise ConfigError(f"loss.{name} must be finite and >= 0")
        if not (0 < lc.tau < float("inf")):
            raise ConfigError("loss.tau must be finite and > 0")
        if t.base_lr <= 0 or t.incr_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        if t.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if t.base_epochs < 0 or t.incr_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if p.base_classes < 1 or p.n_way < 1 or p.k_shot < 1 or p.n_sessions < 0 or p.test_per_class < 1:
            raise ConfigError("protocol sizes must be positive")
        if a.triplet_variant not in TRIPLET_VARIANTS:
            raise ConfigError(f"ablation.triplet_variant must be one of {TRIPLET_VARIANTS}")
        if a.regularizer not in REGULARIZERS:
            raise ConfigError(f"ablation.regularizer must be one of {REGULARIZERS}")
        if a.model1_classifier not in CLASSIFIERS:
            raise ConfigError(f"ablation.model1_classifier must be one of {CLASSIFIERS}")
        return self

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for key, value in dataclasses.asdict(getattr(self, name)).items():
                lines.append(f"{key} = {_format_value(value)}")
            lines.append("")
        return "\n".join(lines)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]

    def replace(self, **overrides: Any) -> "RunConfig":
        """Return a copy with dotted overrides applied, e.g. ``{"loss.lam": 2.0}``."""
        new = RunConfig.from_dict(self.to_dict())
        for dotted, value in overrides.items():
            new.set(dotted, value)
        return new.validate()

    def set(self, dotted: str, value: Any) -> None:
        try:
            section, key = dotted.split(".")
        except ValueError:
            raise ConfigError(f"override key must be 'section.key', got {dotted!r}") from None
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        obj = getattr(self, section)
        ftypes = {f.name: f.type for f in fields(obj)}
        if key not in ftypes:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        if isinstance(value, str):
            value = _parse_value(value, ftypes[key], f"{section}.{key}")
        elif isinstance(value, list):
            value = tuple(value)
        setattr(obj, key, value)

    @classmethod
    def from_dict(cls, data: dict[str, dict[str, Any]]) -> "RunConfig":
        cfg = cls()
        for section, values in data.items():
            for key, value in values.items():
                cfg.set(f"{section}.{key}", value)
        return cfg

    @classmethod
    def from_ini(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep key case (use_AR)
        parser.read_string(text)
        cfg = RunConfig.from_dict(base.to_dict()) if base is not None else cls()
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                cfg.set(f"{section}.{key}", raw)
        return cfg.validate()

    @classmethod
    def load(cls, path: str | Path, base: "RunConfig | None" = None) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_ini(path.read_text(), base=base)


def _format_value(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


def _parse_value(raw: str, ftype: Any, where: str) -> Any:
    raw = raw.strip()
    ftype = str(ftype)
    try:
        if ftype == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype.startswith("tuple[int"):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if ftype.startswith("tuple[str"):
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {where} = {raw!r} as {ftype}") from None


# Incremental-session distillation weights and base learning rates per
# benchmark family; alpha is shared.
PRESETS = ("toy", "cifar-like", "mini-like", "cub-like")


def preset(name: str) -> RunConfig:
    """Return the named preset.

    The non-toy presets keep the benchmark session layouts, learning rates
    and loss weights but run on synthetic images unless ``data.source`` is
    switched to ``manifest``.
    """
    cfg = RunConfig()
    if name == "toy":
        pass
    elif name == "cifar-like":
        cfg.data = DataConfig(n_classes=100, image_size=32, samples_per_class=600)
        cfg.protocol = ProtocolConfig(base_classes=60, n_way=5, k_shot=5, n_sessions=8, test_per_class=100)
        cfg.loss.lam = 16.0
        cfg.train.base_lr, cfg.train.incr_lr = 0.05, 0.001
    elif name == "mini-like":
        cfg.data = DataConfig(n_classes=100, image_size=84, samples_per_class=600)
        cfg.protocol = ProtocolConfig(base_classes=60, n_way=5, k_shot=5, n_sessions=8, test_per_class=100)
        cfg.loss.lam = 8.0
        cfg.train.base_lr, cfg.train.incr_lr = 0.05, 0.001
    elif name == "cub-like":
        cfg.data = DataConfig(n_classes=200, image_size=32, samples_per_class=80)
        cfg.protocol = ProtocolConfig(base_classes=100, n_way=10, k_shot=5, n_sessions=10, test_per_class=30)
        cfg.loss.lam = 0.5
        cfg.train.base_lr, cfg.train.incr_lr = 0.01, 0.0001
    else:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    return cfg.validate()
