"""Experiment configuration: one flat YAML mapping, unknown keys rejected."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from kaprompt.errors import ConfigError, ValidationError
from kaprompt.training import TrainConfig

METHODS = ("ka_prompt", "baseline_independent")


@dataclass
class ExperimentConfig:
    # stream
    n_domains: int = 4
    n_classes: int = 5
    input_dim: int = 64
    train_counts: list = field(default_factory=lambda: [200, 190, 180, 170])
    test_count: int = 100
    noise_stds: list = field(default_factory=lambda: [0.3, 0.4, 0.5, 0.6])
    domain_scales: list = field(default_factory=lambda: [1.0, 1.15, 0.9, 1.3])
    class_mean_scale: float = 1.0
    rotation_angle: float = 0.6
    # backbone
    n_tokens: int = 8
    dim: int = 32
    n_blocks: int = 2
    n_heads: int = 4
    ffn_dim: int = 64
    # prompt pool
    n_prompts: int = 10
    prompt_length: int = 4
    # training
    top_k: int = 3
    tau: float = 0.01
    lam: float = 0.1
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.005
    key_loss_weight: float = 1.0
    # reproducibility and output
    seed: int = 0
    backbone_seed: int | None = None
    data_seed: int | None = None
    method: str = "ka_prompt"
    output_dir: str = "runs/default"

    def __post_init__(self):
        problems = []
        if self.n_domains < 1:
            problems.append("n_domains must be >= 1")
        if self.n_classes < 2:
            problems.append("n_classes must be >= 2")
        if self.input_dim % self.n_tokens:
            problems.append(f"input_dim {self.input_dim} must be a multiple of n_tokens {self.n_tokens}")
        for name in ("train_counts", "noise_stds", "domain_scales"):
            if len(getattr(self, name)) != self.n_domains:
                problems.append(f"{name} needs one value per domain ({self.n_domains})")
        if any(c < 1 for c in self.train_counts) or self.test_count < 1:
            problems.append("sample counts must be positive")
        if self.method not in METHODS:
            problems.append(f"method must be one of {METHODS}, got {self.method!r}")
        if self.top_k > self.n_prompts:
            problems.append(f"top_k {self.top_k} exceeds n_prompts {self.n_prompts}")
        if problems:
            raise ConfigError("; ".join(problems))
        try:
            self.train_config()
        except ValidationError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def patch_dim(self) -> int:
        return self.input_dim // self.n_tokens

    @property
    def effective_backbone_seed(self) -> int:
        return self.seed if self.backbone_seed is None else self.backbone_seed

    @property
    def effective_data_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def train_config(self) -> TrainConfig:
        lam = self.lam if self.method == "ka_prompt" else 0.0
        return TrainConfig(tau=self.tau, lam=lam, top_k=self.top_k, epochs=self.epochs,
                           batch_size=self.batch_size, learning_rate=self.learning_rate,
                           key_loss_weight=self.key_loss_weight, seed=self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping of field names to values")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"malformed config: {exc}") from None


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return ExperimentConfig.from_dict(data or {})


def dump_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
