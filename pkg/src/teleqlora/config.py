"""Pipeline configuration: one JSON file drives every command.

Defaults bake in the published fine-tuning recipe (rank 16, alpha 32, dropout
0.05, peak lr 2e-5, 10% warmup, micro-batch 8, accumulation 4, clip 1.0,
generation at temperature 0.7 / top-p 0.9), so the zero-flag path is that
recipe at desk scale. Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .model import ModelConfig


@dataclass
class DataConfig:
    base_url: str = "https://www.rfc-editor.org/rfc"
    mirror_dir: str | None = None
    cache_dir: str | None = ".rfc_cache"
    request_delay_s: float = 0.5
    user_agent: str = "teleqlora-rfc-ingest/0.1"
    rules_path: str | None = None
    test_frac: float = 0.1
    split_seed: int | None = None


@dataclass
class TrainSectionConfig:
    peak_lr: float = 2e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_frac: float = 0.10
    micro_batch: int = 8
    grad_accum: int = 4
    max_grad_norm: float = 1.0
    epochs: int = 3
    seed: int | None = None
    lora_rank: int = 16
    lora_alpha: float = 32.0
    lora_dropout: float = 0.05
    quantize_base: bool = True
    quant_block_size: int = 64


@dataclass
class GenerationConfig:
    temperature: float = 0.7
    top_p: float = 0.9
    max_new: int = 64
    seed: int | None = None


@dataclass
class JudgeSectionConfig:
    judge_endpoint: str | None = None
    judge_model: str = "judge"
    judge_temperature: float = 0.0
    rubric_path: str | None = None
    concurrency: int = 4
    max_retries: int = 3
    backoff_s: float = 1.0
    mock_verdicts: str | None = None
    max_new: int = 64


@dataclass
class PipelineConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSectionConfig = field(default_factory=TrainSectionConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    judge: JudgeSectionConfig = field(default_factory=JudgeSectionConfig)

    def resolve_seeds(self):
        """Sections without an explicit seed inherit the global one."""
        if self.data.split_seed is None:
            self.data.split_seed = self.seed
        if self.train.seed is None:
            self.train.seed = self.seed
        if self.generation.seed is None:
            self.generation.seed = self.seed
        return self

    def to_dict(self) -> dict:
        return asdict(self)


class ConfigError(ValueError):
    pass


def _build(cls, obj: dict, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"section '{where}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{where}': {sorted(unknown)}")
    return cls(**obj)


def config_from_dict(raw: dict) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    sections = {"data": DataConfig, "model": ModelConfig, "train": TrainSectionConfig,
                "generation": GenerationConfig, "judge": JudgeSectionConfig}
    unknown = set(raw) - set(sections) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {"seed": raw.get("seed", 0)}
    for name, cls in sections.items():
        kwargs[name] = _build(cls, raw.get(name, {}), name)
    cfg = PipelineConfig(**kwargs)
    try:
        cfg.model.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.resolve_seeds()


def load_config(path) -> PipelineConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid config JSON: {exc}") from exc
    return config_from_dict(raw)


def default_config() -> PipelineConfig:
    return PipelineConfig().resolve_seeds()
