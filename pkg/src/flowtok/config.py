"""Run configuration: one human-editable YAML file with a published JSON
schema, mapped onto the dataclasses the library modules consume, plus
builders for the model/backend objects a run needs."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import jsonschema
import yaml

from .argen import ARConfig, ARTrainConfig
from .flowmath import AdaptiveLossConfig, TimeDistribution
from .nets import DecoderConfig, EncoderConfig, Tokenizer
from .repa import FolderVfm, RepaProjection, StubVfm
from .traintok import TrainSchedule


@dataclass
class DatasetConfig:
    kind: str = "synthetic"          # synthetic | folder
    n_train: int = 512
    n_val: int = 64
    image_side: int = 32
    n_classes: int = 4
    path: str = ""
    labels_file: str = "labels.csv"

    def __post_init__(self):
        if self.kind not in ("synthetic", "folder"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "folder" and not self.path:
            raise ValueError("folder dataset needs a path")


@dataclass
class VfmConfig:
    kind: str = "stub"               # stub | folder
    seed: int = 0
    d_vfm: int = 64
    feature_dir: str = ""

    def __post_init__(self):
        if self.kind not in ("stub", "folder"):
            raise ValueError(f"unknown vfm kind {self.kind!r}")
        if self.kind == "folder" and not self.feature_dir:
            raise ValueError("folder vfm needs feature_dir")


@dataclass
class LossWeights:
    repa: float = 1.0
    repa_a: float = 0.8


@dataclass
class LoggingConfig:
    log_every: int = 10
    ckpt_every_epochs: int = 4
    sample_every_epochs: int = 4


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    vfm: VfmConfig = field(default_factory=VfmConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    adaptive: AdaptiveLossConfig = field(default_factory=AdaptiveLossConfig)
    time_dist: TimeDistribution = field(default_factory=TimeDistribution)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    train: TrainSchedule = field(default_factory=TrainSchedule)
    ar: ARConfig = field(default_factory=ARConfig)
    ar_train: ARTrainConfig = field(default_factory=ARTrainConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    def validate(self):
        if self.encoder.image_side != self.dataset.image_side:
            raise ValueError("encoder image_side must match dataset image_side")
        if self.decoder.latent_side != self.encoder.image_side:
            raise ValueError("identity codec requires decoder latent_side == image_side")
        if self.decoder.token_dim != self.encoder.d_token:
            raise ValueError("decoder token_dim must equal encoder d_token")
        if self.decoder.n_tokens != self.encoder.K:
            raise ValueError("decoder n_tokens must equal encoder K")
        enc_grid = self.encoder.image_side // self.encoder.patch_size
        dec_grid = self.decoder.latent_side // self.decoder.patch_size
        if enc_grid != dec_grid:
            raise ValueError("encoder and decoder patch grids must match for alignment")
        if self.vfm.kind == "stub" and self.vfm.d_vfm != self.encoder.d_e:
            raise ValueError("the no-projection alignment path needs d_vfm == d_e")
        if self.ar.K != self.encoder.K:
            raise ValueError("ar K must equal encoder K")
        if self.ar.token_dim != self.encoder.d_token:
            raise ValueError("ar token_dim must equal encoder d_token")
        if self.dataset.kind == "synthetic" and self.ar.n_classes != self.dataset.n_classes:
            raise ValueError("ar n_classes must match dataset n_classes")
        return self

    # -- builders ---------------------------------------------------------

    def build_tokenizer(self) -> Tokenizer:
        return Tokenizer(self.encoder, self.decoder)

    def build_vfm(self):
        if self.vfm.kind == "stub":
            return StubVfm(self.encoder.image_side, self.encoder.patch_size,
                           self.vfm.d_vfm, channels=self.encoder.channels,
                           seed=self.vfm.seed)
        return FolderVfm(self.vfm.feature_dir)

    def build_proj(self) -> RepaProjection:
        return RepaProjection(self.decoder.d_model, self.vfm.d_vfm)

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        jsonschema.validate(raw, CONFIG_SCHEMA)
        kwargs: dict[str, Any] = {}
        sections = {
            "dataset": DatasetConfig, "vfm": VfmConfig, "encoder": EncoderConfig,
            "decoder": DecoderConfig, "adaptive": AdaptiveLossConfig,
            "time_dist": TimeDistribution, "loss_weights": LossWeights,
            "train": TrainSchedule, "ar": ARConfig, "ar_train": ARTrainConfig,
            "logging": LoggingConfig,
        }
        for key, value in raw.items():
            if key in sections:
                kwargs[key] = sections[key](**value)
            else:
                kwargs[key] = value
        return cls(**kwargs).validate()


def _section_schema(cls, overrides: Optional[dict] = None) -> dict:
    type_map = {int: "integer", float: "number", str: "string", bool: "boolean"}
    props = {}
    for f in fields(cls):
        if f.type in ("int", int):
            props[f.name] = {"type": "integer"}
        elif f.type in ("float", float):
            props[f.name] = {"type": "number"}
        elif f.type in ("str", str):
            props[f.name] = {"type": "string"}
        elif f.type in ("bool", bool):
            props[f.name] = {"type": "boolean"}
        else:
            props[f.name] = {}
    if overrides:
        props.update(overrides)
    return {"type": "object", "properties": props, "additionalProperties": False}


CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "flowtok run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer"},
        "output_dir": {"type": "string"},
        "dataset": _section_schema(DatasetConfig),
        "vfm": _section_schema(VfmConfig),
        "encoder": _section_schema(EncoderConfig),
        "decoder": _section_schema(DecoderConfig),
        "adaptive": _section_schema(AdaptiveLossConfig),
        "time_dist": _section_schema(TimeDistribution),
        "loss_weights": _section_schema(LossWeights),
        "train": _section_schema(TrainSchedule),
        "ar": _section_schema(ARConfig),
        "ar_train": _section_schema(ARTrainConfig),
        "logging": _section_schema(LoggingConfig),
    },
}


def load_config(path: str | Path) -> RunConfig:
    raw = yaml.safe_load(Path(path).read_text()) or {}
    return RunConfig.from_dict(raw)


def save_config(cfg: RunConfig, path: str | Path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def config_to_yaml(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
