"""Model and run configuration.

Configs are plain dataclasses. On disk a config is a flat
``key = value`` text file whose keys match the dataclass field names
(model fields and run fields share one namespace). ``VTS_DETERMINISTIC=1``
in the environment forces deterministic mode regardless of the file.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError

FUSION_KINDS = ("none", "merge", "co", "merge_moe", "co_moe")
MOE_KINDS = ("merge_moe", "co_moe")
CMA_FORMS = ("literal", "lognce")
CSSL_NEGATIVE_MODES = ("hardest", "easiest")


@dataclass
class ModelConfig:
    """Architecture and loss hyperparameters.

    Parameter count is a pure function of this config (input feature dims
    included), which is what makes checkpoint compatibility checkable.
    """

    fusion_kind: str = "co"
    num_layers: int = 1
    hidden_dim: int = 768
    heads: int = 8
    expert_count: int = 4
    active_experts: int = 2
    expert_intermediate: int = 3072
    ffn_intermediate: int = 3072
    rel_window: int = 64
    visual_dim: int = 24
    text_dim: int = 24
    dropout_p: float = 0.1
    temperature: float = 0.07  # not a published value; see README
    epsilon: float = 1e-8      # not a published value; see README
    alpha: float = 0.5
    beta: float = 1.0
    gamma: float = 0.5
    sigma: float = 1.0
    theta: float = 0.5
    k1: int = 1
    k2: int = 3
    max_seq_len: int = 2048
    threshold: float = 0.5
    cma_form: str = "literal"
    cssl_negatives: str = "hardest"
    duplicate_visual_concat: bool = False

    def validate(self) -> "ModelConfig":
        if self.fusion_kind not in FUSION_KINDS:
            raise ConfigError(
                f"fusion_kind must be one of {FUSION_KINDS}, got {self.fusion_kind!r}")
        if self.active_experts > self.expert_count:
            raise ConfigError(
                f"active_experts {self.active_experts} exceeds expert_count {self.expert_count}")
        if self.hidden_dim % self.heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.cma_form not in CMA_FORMS:
            raise ConfigError(f"cma_form must be one of {CMA_FORMS}, got {self.cma_form!r}")
        if self.cssl_negatives not in CSSL_NEGATIVE_MODES:
            raise ConfigError(
                f"cssl_negatives must be one of {CSSL_NEGATIVE_MODES}, got {self.cssl_negatives!r}")
        for name in ("num_layers", "hidden_dim", "heads", "expert_count", "active_experts",
                     "expert_intermediate", "ffn_intermediate", "visual_dim", "text_dim",
                     "k1", "k2", "max_seq_len"):
            if getattr(self, name) < 1 and not (name == "num_layers" and self.num_layers == 0):
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_seq_len < 2:
            raise ConfigError(f"max_seq_len must be >= 2, got {self.max_seq_len}")
        return self

    @property
    def is_moe(self) -> bool:
        return self.fusion_kind in MOE_KINDS

    @property
    def effective_beta(self) -> float:
        """Balance-loss weight in the pre-training objective; 0 without MoE."""
        return self.beta if self.is_moe else 0.0

    @property
    def effective_sigma(self) -> float:
        """Balance-loss weight in the fine-tuning objective; 0 without MoE."""
        return self.sigma if self.is_moe else 0.0


def desk_model_config(**overrides) -> ModelConfig:
    """Small profile for CPU-scale experiments and tests."""
    base = dict(hidden_dim=32, heads=4, ffn_intermediate=64, expert_intermediate=64,
                rel_window=16, visual_dim=24, text_dim=24)
    base.update(overrides)
    return ModelConfig(**base).validate()


def full_model_config(**overrides) -> ModelConfig:
    """Full-scale profile (defaults of ModelConfig)."""
    return ModelConfig(**overrides).validate()


@dataclass
class SynthSpec:
    """Knobs of the planted-topic synthetic corpus generator."""

    synth_train_videos: int = 200
    synth_valid_videos: int = 50
    synth_test_videos: int = 50
    synth_unlabeled_videos: int = 200
    synth_clips_min: int = 64
    synth_clips_max: int = 64
    synth_topics_min: int = 4
    synth_topics_max: int = 8
    synth_min_topic_clips: int = 4
    synth_latent_dim: int = 8
    synth_visual_dim: int = 24
    synth_text_dim: int = 24
    synth_noise: float = 0.3
    synth_boundary_strength: float = 1.0
    synth_clip_duration: float = 10.0

    def validate(self) -> "SynthSpec":
        for f in fields(self):
            v = getattr(self, f.name)
            if "videos" in f.name or f.name == "synth_noise":
                if v < 0:
                    raise ConfigError(f"{f.name} must be non-negative, got {v}")
            elif isinstance(v, (int, float)) and v <= 0:
                raise ConfigError(f"{f.name} must be positive, got {v}")
        if self.synth_clips_min > self.synth_clips_max:
            raise ConfigError("synth_clips_min exceeds synth_clips_max")
        if self.synth_topics_min > self.synth_topics_max:
            raise ConfigError("synth_topics_min exceeds synth_topics_max")
        return self


@dataclass
class RunConfig:
    """Everything a training / inference run needs."""

    model: ModelConfig = field(default_factory=ModelConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)

    train_dir: str = ""
    valid_dir: str = ""
    test_dir: str = ""
    unlabeled_dir: str = ""
    pretrain_dir: str = ""
    checkpoint_in: str = ""
    checkpoint_out: str = ""
    predictions_out: str = ""
    report_out: str = ""
    log_path: str = ""
    out_dir: str = ""

    lr: float = 5e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    pretrain_epochs: int = 1
    finetune_epochs: int = 5
    batch_size: int = 8
    seed: int = 0
    seeds: str = ""  # optional comma-separated list for multi-run reporting
    deterministic: bool = False
    metric_k: float = 30.0
    bs_matching: str = "one_to_one"  # or "loose"
    miou_symmetric: bool = True

    def __post_init__(self):
        if os.environ.get("VTS_DETERMINISTIC") == "1":
            self.deterministic = True

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.synth.validate()
        if self.bs_matching not in ("one_to_one", "loose"):
            raise ConfigError(f"bs_matching must be one_to_one or loose, got {self.bs_matching!r}")
        if self.batch_size < 1 or self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epoch counts >= 0")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        return self

    def seed_list(self) -> list[int]:
        if not self.seeds.strip():
            return [self.seed]
        return [int(s) for s in self.seeds.split(",") if s.strip()]


def _own_field_names(cls) -> dict[str, type]:
    return {f.name: f.type for f in fields(cls)}

_MODEL_FIELDS = {f.name: f for f in fields(ModelConfig)}
_SYNTH_FIELDS = {f.name: f for f in fields(SynthSpec)}
_RUN_FIELDS = {f.name: f for f in fields(RunConfig) if f.name not in ("model", "synth")}

VALID_KEYS = sorted(set(_MODEL_FIELDS) | set(_SYNTH_FIELDS) | set(_RUN_FIELDS))


def _parse_value(raw: str, target):
    t = target.type if hasattr(target, "type") else target
    if t in (bool, "bool"):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    if t in (int, "int"):
        return int(raw)
    if t in (float, "float"):
        return float(raw)
    return raw.strip()


def apply_setting(cfg: RunConfig, key: str, raw: str) -> None:
    """Set one flat key on a RunConfig, routing to the right sub-config."""
    if key in _MODEL_FIELDS:
        setattr(cfg.model, key, _parse_value(raw, _MODEL_FIELDS[key]))
    elif key in _SYNTH_FIELDS:
        setattr(cfg.synth, key, _parse_value(raw, _SYNTH_FIELDS[key]))
    elif key in _RUN_FIELDS:
        setattr(cfg, key, _parse_value(raw, _RUN_FIELDS[key]))
    else:
        raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(VALID_KEYS)}")


def load_config(path: str | None = None, overrides: list[str] | None = None,
                profile: str | None = None) -> RunConfig:
    """Build a RunConfig from an optional file, profile and --set overrides."""
    cfg = RunConfig()
    if profile:
        if profile == "desk":
            cfg.model = desk_model_config()
        elif profile == "full":
            cfg.model = full_model_config()
        else:
            raise ConfigError(f"unknown profile {profile!r}; valid: desk, full")
    if path:
        try:
            text = open(path, "r", encoding="utf-8").read()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        for lineno, line in enumerate(text.splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
            key, _, raw = stripped.partition("=")
            apply_setting(cfg, key.strip(), raw.strip())
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        apply_setting(cfg, key.strip(), raw.strip())
    if os.environ.get("VTS_DETERMINISTIC") == "1":
        cfg.deterministic = True
    return cfg.validate()


def config_to_text(cfg: RunConfig) -> str:
    """Flat key = value rendering of a full run config (sorted keys)."""
    items: dict[str, object] = {}
    for name in _MODEL_FIELDS:
        items[name] = getattr(cfg.model, name)
    for name in _SYNTH_FIELDS:
        items[name] = getattr(cfg.synth, name)
    for name in _RUN_FIELDS:
        items[name] = getattr(cfg, name)
    lines = [f"{k} = {items[k]}" for k in sorted(items)]
    return "\n".join(lines) + "\n"


def model_config_canonical(model: ModelConfig) -> str:
    """Canonical text encoding of a ModelConfig (checkpoint header payload)."""
    parts = []
    for name in sorted(_MODEL_FIELDS):
        v = getattr(model, name)
        parts.append(f"{name}={v!r}")
    return "\n".join(parts) + "\n"


def model_config_from_canonical(text: str) -> ModelConfig:
    kwargs = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _MODEL_FIELDS:
            raise ConfigError(f"unknown model config key in checkpoint: {key!r}")
        t = _MODEL_FIELDS[key].type
        if t in (bool, "bool"):
            kwargs[key] = raw.strip() == "True"
        elif t in (int, "int"):
            kwargs[key] = int(raw)
        elif t in (float, "float"):
            kwargs[key] = float(raw)
        else:
            kwargs[key] = raw.strip().strip("'\"")
    return ModelConfig(**kwargs).validate()
