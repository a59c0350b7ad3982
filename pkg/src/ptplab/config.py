"""Experiment configuration schema and its YAML file format.

Every config file carries ``schema_version``; unknown keys are rejected.
The JSON schema of :class:`ExperimentConfig` is committed under
``docs/config_schema.json`` (regenerate with ``ptplab schema``).
"""

from __future__ import annotations

from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BackboneConfig(_Strict):
    layers: int = Field(2, ge=1)
    dim: int = Field(32, ge=1)
    heads: int = Field(2, ge=1)
    ffn_mult: int = Field(4, ge=1)
    max_len: int = Field(40, ge=2)
    init_std: float = Field(0.02, gt=0)
    # fraction of each token row's variance shared with its lexical cluster
    cluster_share: float = Field(0.9, ge=0, lt=1)
    # scale of the frozen projection weights, in units of 1/sqrt(fan_in)
    weight_gain: float = Field(1.0, gt=0)
    seed: int = Field(1234, ge=0)
    use_positions: bool = True

    @model_validator(mode="after")
    def _heads_divide(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        return self


class PromptConfig(_Strict):
    mode: Literal["input_prepend", "per_layer_prefix"] = "input_prepend"
    length: int = Field(4, ge=1)
    reparam: Literal["identity", "mlp"] = "identity"
    hidden: int = Field(32, ge=1)
    init_std: float = Field(0.5, gt=0)


class RGSpec(_Strict):
    kind: Literal["rg"] = "rg"
    sigma: float = Field(1e-3, ge=0)
    count: int = Field(5, ge=0)


class RMSpec(_Strict):
    kind: Literal["rm"] = "rm"
    count: int = Field(3, ge=0)


class PGDSpec(_Strict):
    kind: Literal["pgd"] = "pgd"
    alpha: float = Field(1e-3, gt=0)
    eps: float = Field(4e-3, ge=0)
    iters: int = Field(4, ge=1)
    use_sign: bool = True


class A2TSpec(_Strict):
    kind: Literal["a2t"] = "a2t"
    min_cos: float = Field(0.8, ge=0, le=1)
    max_swap_frac: float = Field(0.2, ge=0, le=1)
    knn: int = Field(8, ge=0)


PerturbationSpec = Annotated[Union[RGSpec, RMSpec, PGDSpec, A2TSpec], Field(discriminator="kind")]


class OptimizerConfig(_Strict):
    name: Literal["sgd", "adam"] = "adam"
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class TrainConfig(_Strict):
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(8, ge=1)
    lr: float = Field(5e-3, gt=0)
    optimizer: OptimizerConfig = OptimizerConfig()
    perturbation: Optional[PerturbationSpec] = None
    frozen: bool = True
    train_head: bool = True
    seed: int = Field(0, ge=0)
    patience: int = Field(10, ge=1)


class TaskConfig(_Strict):
    name: Literal["keyword", "xor"] = "xor"
    seed: int = Field(0, ge=0)
    train: int = Field(32, ge=1)
    dev: int = Field(32, ge=1)
    test: int = Field(200, ge=1)


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    name: str = "experiment"
    task: TaskConfig = TaskConfig()
    backbone: BackboneConfig = BackboneConfig()
    prompt: PromptConfig = PromptConfig()
    train: TrainConfig = TrainConfig()
    seeds: list[int] = Field(default_factory=lambda: [1, 2, 3, 4, 5])
    out: str = "runs"
    workers: int = Field(1, ge=1)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.model_copy(update={"train": self.train.model_copy(update={"seed": seed})})

    def with_perturbation(self, spec) -> "ExperimentConfig":
        return self.model_copy(
            update={"train": self.train.model_copy(update={"perturbation": spec})}
        )


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


def parse_config(text: str) -> ExperimentConfig:
    raw = yaml.safe_load(text)
    if not isinstance(raw, dict):
        raise ValueError("config must be a mapping")
    return ExperimentConfig.model_validate(raw)


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg))
