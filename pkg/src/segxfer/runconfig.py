"""Run configuration: one flat, strictly-validated document shared by the
CLI and the experiment harness.

Unknown keys are fatal on parse; a silently misspelled hyperparameter is the
easiest way to corrupt an experiment.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, asdict

from .errors import ConfigError
from .synthdata import SynthConfig


@dataclass
class RunConfig:
    # synthetic data
    height: int = 32
    width: int = 32
    channels: int = 16
    num_classes: int = 4
    shift_classes: tuple[int, ...] = (2, 3)
    delta: float = 1.0
    sigma: float = 0.2
    noise_scales: tuple[float, ...] | None = None
    camouflage_classes: tuple[int, ...] = ()
    rectangular_layout: bool = True
    source_count: int = 200
    target_count: int = 200
    eval_count: int = 50

    # region clustering
    r: int = 4
    tau: float = 0.07
    cluster_iters: int = 6

    # domain discriminator
    disc_hidden: tuple[int, ...] = (64, 64)
    disc_epochs: int = 5
    disc_lr: float = 1e-3
    disc_batch: int = 16

    # segmentation model
    num_queries: int = 8
    model_channels: int = 16
    decoder_layers: int = 3
    ffn_hidden: int = 32
    lambda_m: float = 0.5
    p_t: float = 30.0

    # training
    source_steps: int = 500
    finetune_steps: int = 300
    batch_size: int = 8
    model_lr: float = 1e-2

    # experiment runs
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out_dir: str = "runs"

    def __post_init__(self) -> None:
        self.shift_classes = tuple(int(c) for c in self.shift_classes)
        self.disc_hidden = tuple(int(h) for h in self.disc_hidden)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.noise_scales is not None:
            self.noise_scales = tuple(float(s) for s in self.noise_scales)
        self.camouflage_classes = tuple(int(c) for c in self.camouflage_classes)
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if not 0.0 <= self.p_t <= 100.0:
            raise ConfigError(f"p_t must be a percentile in [0, 100], got {self.p_t}")
        if not 0.0 <= self.lambda_m <= 1.0:
            raise ConfigError(f"lambda_m must lie in [0, 1], got {self.lambda_m}")
        for name in ("source_count", "target_count", "eval_count", "source_steps",
                     "finetune_steps", "batch_size", "disc_epochs", "disc_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        # delegate data-geometry validation (divisibility, shift set, ...)
        self.synth_config(self.seeds[0])
        if self.height % self.r or self.width % self.r:
            raise ConfigError(f"r={self.r} must divide {self.height}x{self.width}")

    def synth_config(self, seed: int) -> SynthConfig:
        return SynthConfig(
            height=self.height,
            width=self.width,
            channels=self.channels,
            num_classes=self.num_classes,
            shift_classes=self.shift_classes,
            delta=self.delta,
            sigma=self.sigma,
            noise_scales=self.noise_scales,
            camouflage_classes=self.camouflage_classes,
            rectangular=self.rectangular_layout,
            seed=seed,
        )

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["shift_classes"] = list(self.shift_classes)
        doc["camouflage_classes"] = list(self.camouflage_classes)
        doc["disc_hidden"] = list(self.disc_hidden)
        doc["seeds"] = list(self.seeds)
        if self.noise_scales is not None:
            doc["noise_scales"] = list(self.noise_scales)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        typed: dict = {}
        for f in fields(cls):
            if f.name not in doc:
                continue
            value = doc[f.name]
            if f.name == "noise_scales":
                if value is not None and not isinstance(value, (list, tuple)):
                    raise ConfigError("noise_scales must be a list or null")
                typed[f.name] = tuple(value) if value is not None else None
            elif f.name in ("shift_classes", "camouflage_classes", "disc_hidden", "seeds"):
                if not isinstance(value, (list, tuple)):
                    raise ConfigError(f"{f.name} must be a list")
                typed[f.name] = tuple(value)
            elif f.name == "out_dir":
                if not isinstance(value, str):
                    raise ConfigError("out_dir must be a string")
                typed[f.name] = value
            elif f.name == "rectangular_layout":
                if not isinstance(value, bool):
                    raise ConfigError("rectangular_layout must be a boolean")
                typed[f.name] = value
            elif isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{f.name} must be a number, got {value!r}")
            elif f.type == "int":
                if int(value) != value:
                    raise ConfigError(f"{f.name} must be an integer, got {value!r}")
                typed[f.name] = int(value)
            else:
                typed[f.name] = float(value)
        return cls(**typed)
