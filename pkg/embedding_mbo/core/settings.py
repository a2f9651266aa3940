import logging
import os
from pathlib import Path
from typing import Any
from typing import Literal

from pydantic import BaseModel
from pydantic import ConfigDict
from pydantic import Field
from pydantic import ValidationError
from pydantic import field_validator
from pydantic import model_validator

from embedding_mbo.core.errors import ConfigError
from embedding_mbo.core.models import InferenceConfig
from embedding_mbo.core.models import InferenceRule


class ResampleConfig(BaseModel):
    """Bounds the skip-and-resample loop used when a sampled sub-task is empty.

    Attributes:
        attempts (int | None): Draws before giving up. None means one draw per
            sub-task in the partition.
    """

    attempts: int | None = Field(
        None,
        ge=1,
        description="Maximum number of sub-task draws before giving up",
    )


DEFAULT_RESAMPLE_CONFIG = ResampleConfig()


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(Section):
    path: str | None = Field(None, description="JSON-lines dataset file")
    generator: Literal["twin_peaks", "chain"] | None = Field(
        "twin_peaks", description="Scripted dataset to generate when no file is given"
    )
    env: str = Field("twin_peaks", description="Environment used for evaluation")
    policies: list[str] = Field(
        default_factory=lambda: ["skill_a", "skill_b"],
        description="Scripted policies used by the generator",
    )
    episodes_per_policy: int = Field(20, ge=1)
    noise_std: float = Field(0.1, ge=0)
    chain_states: int = Field(3, ge=2)

    @field_validator("path", "generator", mode="before")
    def blank_to_none(cls, value):
        if isinstance(value, str) and value.strip().lower() in {"", "none"}:
            return None
        return value

    @field_validator("policies", mode="before")
    def split_policies(cls, value):
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        return value


class DecompositionConfig(Section):
    rule: Literal["rank", "quantization", "random", "cvae"] = "rank"
    n_subtasks: int = Field(2, ge=1, description="N")
    trajectories_per_subtask: int = Field(20, ge=1, description="M")


class NetworkConfig(Section):
    hidden_dim: int = Field(64, ge=1, le=512)
    feature_dim: int = Field(64, ge=1)
    embedding_dim: int = Field(5, ge=1, description="dim(z)")


class BehaviorConfig(Section):
    lr: float = Field(1e-3, ge=0)


class ScoreConfig(Section):
    gamma: float = Field(0.99, ge=0, lt=1)
    tau: float = Field(5e-3, ge=0, le=1, description="Target blend rate")
    eta: float = Field(2.0, description="Conservatism gap threshold")
    lambda_init: float = Field(1.0, ge=0)
    lambda_lr: float = Field(1e-3, ge=0)
    n_ood: int = Field(10, ge=1)
    lr: float = Field(1e-3, ge=0)
    conservative: bool = True
    sample_actions: bool = False


class TrainConfig(Section):
    steps: int = Field(10_000, ge=0)
    batch_size: int = Field(1024, ge=1)
    seed: int = 0
    checkpoints: int = Field(10, ge=1)
    log_every: int = Field(100, ge=1)


class EvalConfig(Section):
    last_checkpoints: int = Field(6, ge=1, description="T")
    episodes: int = Field(10, ge=1)
    rules: list[InferenceRule] = Field(
        default_factory=lambda: ["best", "grad", "best_ada", "grad_ada"]
    )
    max_steps: int | None = Field(None, ge=1)
    workers: int = Field(1, ge=1)

    @field_validator("rules", mode="before")
    def split_rules(cls, value):
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        return value


class FinetuneConfig(Section):
    k_max: int = Field(50, ge=1)
    rule: Literal["grad", "grad_ada"] = "grad_ada"


class FbcConfig(Section):
    fraction: float = Field(0.1, gt=0, le=1)
    steps: int = Field(2000, ge=0)


class DistillConfig(Section):
    steps: int = Field(2000, ge=0)
    lr: float = Field(1e-3, ge=0)
    batch_size: int = Field(256, ge=1)


class RunConfig(Section):
    """Everything one command needs, validated before any work starts."""

    data: DataConfig = Field(default_factory=DataConfig)
    decomposition: DecompositionConfig = Field(default_factory=DecompositionConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    behavior: BehaviorConfig = Field(default_factory=BehaviorConfig)
    score: ScoreConfig = Field(default_factory=ScoreConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    inference: InferenceConfig = Field(default_factory=InferenceConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    fbc: FbcConfig = Field(default_factory=FbcConfig)
    distill: DistillConfig = Field(default_factory=DistillConfig)
    output_dir: str = "runs"

    @model_validator(mode="after")
    def check_data_source(self):
        if self.data.path is None and self.data.generator is None:
            raise ValueError("either data.path or data.generator must be set")
        return self


def parse_config_text(text: str) -> dict[str, Any]:
    """Turn `section.key=value` lines into a nested dictionary of strings."""
    tree: dict[str, Any] = {}
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_number}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {line_number}: empty key")
        node = tree
        *sections, leaf = key.split(".")
        for section in sections:
            child = node.setdefault(section, {})
            if not isinstance(child, dict):
                raise ConfigError(f"line {line_number}: {section!r} is not a section")
            node = child
        if leaf in node:
            raise ConfigError(f"line {line_number}: duplicate key {key!r}")
        node[leaf] = value
    return tree


def _merge(tree: dict[str, Any], dotted: str, value: Any) -> None:
    *sections, leaf = dotted.split(".")
    for section in sections:
        tree = tree.setdefault(section, {})
    tree[leaf] = value


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read and validate a run configuration.

    Args:
        path: Config file in `section.key=value` format. None uses defaults.
        overrides: Dotted keys applied on top of the file (e.g. CLI flags).

    Returns:
        RunConfig: The validated configuration.

    Raises:
        ConfigError: On malformed lines, unknown keys, invalid values or a
            missing dataset file.
    """
    tree: dict[str, Any] = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigError(f"Config file not found: {config_path}")
        tree = parse_config_text(config_path.read_text(encoding="utf-8"))

    for key, value in (overrides or {}).items():
        if value is not None:
            _merge(tree, key, value)

    try:
        config = RunConfig.model_validate(tree)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e

    if config.data.path and config.data.generator is None and not Path(config.data.path).is_file():
        raise ConfigError(f"Dataset file not found: {config.data.path}")

    return config


def initialize_logger() -> logging.Logger:
    """Initialize a custom formatted logger."""

    logging.basicConfig(
        level=os.getenv("DROP_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s.%(msecs)02d - %(levelname)s: %(message)s",
        datefmt="%H:%M:%S",
    )

    logger = logging.getLogger("embedding_mbo")
    logger.addHandler(logging.NullHandler())

    return logger


logger = initialize_logger()
