import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.errors import ConfigurationError
from app.toyworld import DomainSpec, default_benchmark_domains

VARIANTS = ("R0", "R1", "R2", "R3", "R4")


class ToyWorldConfig(BaseModel):
    """Procedural scene generation"""
    image_size: int = 64
    damage_rate: float = Field(0.2, ge=0.0, le=1.0)
    split_fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)

    @field_validator("image_size")
    @classmethod
    def validate_image_size(cls, v):
        """Image size must be divisible by 16 for the edit mask"""
        if v <= 0 or v % 16:
            raise ValueError(f"image_size {v} must be a positive multiple of 16")
        return v


class BenchmarkConfig(BaseModel):
    """Domains taking part in transfer experiments and the pretraining corpus"""
    domains: List[DomainSpec] = Field(default_factory=default_benchmark_domains)
    pairs_per_domain: int = Field(2000, ge=1)
    pretrain_domains: int = Field(8, ge=1)
    pretrain_pairs_per_domain: int = Field(500, ge=1)


class CodecConfig(BaseModel):
    codebook_size: int = Field(128, ge=2)
    embed_dim: int = Field(16, ge=1)
    factor: int = 8
    hidden: int = 64
    steps: int = Field(1500, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(2e-3, gt=0)
    commitment: float = Field(0.25, ge=0)
    restart_every: int = Field(100, ge=0)
    holdout_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    seed: int = 0

    @field_validator("factor")
    @classmethod
    def validate_factor(cls, v):
        """The encoder is a stack of stride-2 convolutions"""
        if v < 2 or v & (v - 1):
            raise ValueError(f"factor {v} must be a power of two")
        return v


class PromptConfig(BaseModel):
    max_length: int = Field(16, ge=1)
    pool_files: List[str] = []


class GeneratorConfig(BaseModel):
    """Masked-token transformer and its decode schedule"""
    layers: int = Field(4, ge=1)
    heads: int = Field(4, ge=1)
    width: int = Field(128, ge=8)
    steps: int = Field(2000, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(5e-4, gt=0)
    mask_min: float = Field(0.3, gt=0, le=1)
    mask_max: float = Field(1.0, gt=0, le=1)
    seed: int = 0


class AdapterConfig(BaseModel):
    rank: int = Field(8, ge=1)
    steps: int = Field(300, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-3, gt=0)
    seed: int = 0


class ScorerConfig(BaseModel):
    embed_dim: int = Field(64, ge=1)
    steps: int = Field(800, ge=1)
    batch_size: int = Field(64, ge=2)
    lr: float = Field(1e-3, gt=0)
    seed: int = 0


class SynthesisConfig(BaseModel):
    """Generation of the synthetic target dataset"""
    num_candidates: int = Field(4, ge=1)
    decode_steps: int = Field(8, ge=1)
    temperature: float = Field(1.0, ge=0)
    patch_fraction_h: float = Field(0.5, gt=0, le=0.5)
    patch_fraction_w: float = Field(0.5, gt=0, le=0.5)
    damaged_fraction: float = Field(0.5, ge=0, le=1)
    volume_fraction: float = Field(1.0, gt=0, le=1)
    damaged_pool: Optional[str] = None  # None: toy pool of the target's disaster kind
    undamaged_pool: str = "toy_undamaged"
    max_workers: int = Field(1, ge=1)
    seed: int = 0


class TrainConfig(BaseModel):
    """Siamese classifier training"""
    lr_backbone: float = Field(2e-6, gt=0)
    lr_head: float = Field(2e-5, gt=0)
    batch_size: int = Field(64, ge=1)
    max_iterations: int = Field(2000, ge=1)
    eval_every: int = Field(100, ge=1)
    patience: int = Field(10, ge=1)
    validation: Literal["target", "source"] = "target"
    width: int = Field(64, ge=8)
    depth: int = Field(4, ge=1)
    heads: int = Field(4, ge=1)
    patch: int = Field(8, ge=1)
    seed: int = 0


class EvaluationConfig(BaseModel):
    protocol: Literal["single_source", "multi_source"] = "multi_source"
    variants: List[str] = list(VARIANTS)
    seeds: int = Field(3, ge=1)
    include_finetuned: bool = False
    volume_fractions: List[float] = [0.25, 0.5, 0.75, 1.0]

    @field_validator("variants")
    @classmethod
    def validate_variants(cls, v):
        """Only the five training variants are known"""
        unknown = [name for name in v if name not in VARIANTS]
        if unknown:
            raise ValueError(f"unknown variants {unknown}; expected a subset of {list(VARIANTS)}")
        return v

    @field_validator("volume_fractions")
    @classmethod
    def validate_fractions(cls, v):
        """Sweep fractions lie in (0, 1] and are sorted"""
        if any(f <= 0 or f > 1 for f in v) or list(v) != sorted(v):
            raise ValueError(f"volume_fractions {v} must be sorted values in (0, 1]")
        return v


class LoggingConfig(BaseSettings):
    """Configuration for logging"""
    level: str = "INFO"
    file: Optional[str] = None

    model_config = SettingsConfigDict(env_prefix="LOG_", extra="ignore")


class Settings(BaseSettings):
    """Main application settings"""
    output_root: str = "runs"
    seed: int = 0
    toyworld: ToyWorldConfig = ToyWorldConfig()
    benchmark: BenchmarkConfig = BenchmarkConfig()
    codec: CodecConfig = CodecConfig()
    prompts: PromptConfig = PromptConfig()
    generator: GeneratorConfig = GeneratorConfig()
    adapter: AdapterConfig = AdapterConfig()
    scorer: ScorerConfig = ScorerConfig()
    synthesis: SynthesisConfig = SynthesisConfig()
    classifier: TrainConfig = TrainConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    logging: LoggingConfig = LoggingConfig()

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="",
        extra="ignore"
    )

    @field_validator("output_root", mode="before")
    @classmethod
    def validate_output_root(cls, v):
        """Fall back to OUTPUT_ROOT from the environment"""
        if not v:
            return os.environ.get("OUTPUT_ROOT", "runs")
        return v

    @classmethod
    def load(cls, config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> "Settings":
        """Resolve settings: overrides > JSON file > environment > defaults"""
        data: Dict[str, Any] = {}
        if config_path:
            path = Path(config_path)
            if not path.is_file():
                raise ConfigurationError(f"Config file not found: {path}")
            try:
                data = json.loads(path.read_text(encoding="utf-8"))
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"Config file {path} is not valid JSON: {e}")
        for key, value in (overrides or {}).items():
            _check_known(cls, key)
            _assign(data, key, value)
        try:
            return cls(**data)
        except ValidationError as e:
            raise ConfigurationError(f"Invalid configuration: {_describe(e)}")

    def section_hash(self, *names: str) -> str:
        """Stable hash over the named sections (or the whole config)"""
        if not names:
            return config_hash(self)
        return config_hash({name: getattr(self, name) for name in names})


def config_hash(value: Any) -> str:
    """SHA-256 of the canonical JSON form, truncated to 16 hex digits"""
    payload = json.dumps(_plain(value), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def parse_overrides(sources: List[Tuple[str, str]]) -> Dict[str, Any]:
    """Turn (source, "section.key=value") pairs into an override map.

    A key set twice to different values is a conflict naming both sources.
    """
    resolved: Dict[str, Any] = {}
    origin: Dict[str, str] = {}
    for source, assignment in sources:
        if "=" not in assignment:
            raise ConfigurationError(f"Override '{assignment}' from {source} is not of the form key=value")
        key, raw = assignment.split("=", 1)
        key = key.strip()
        value = _parse_value(raw.strip())
        if key in resolved and resolved[key] != value:
            raise ConfigurationError(
                f"Conflicting values for '{key}': {resolved[key]!r} from {origin[key]} "
                f"and {value!r} from {source}"
            )
        resolved[key] = value
        origin[key] = source
    return resolved


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _check_known(model: type, dotted: str) -> None:
    parts = dotted.split(".")
    for depth, part in enumerate(parts):
        fields = getattr(model, "model_fields", None)
        if fields is None:
            return
        if part not in fields:
            raise ConfigurationError(f"Unknown configuration key '{'.'.join(parts[:depth + 1])}'")
        model = fields[part].annotation


def _assign(data: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = data
    for part in parts[:-1]:
        child = node.get(part)
        if not isinstance(child, dict):
            child = {}
            node[part] = child
        node = child
    node[parts[-1]] = value


def _describe(error: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(p) for p in item['loc'])}: {item['msg']}" for item in error.errors()
    )


def _plain(value: Any) -> Any:
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value
