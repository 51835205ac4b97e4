"""
The training configuration file: one YAML document with a section per
component. Unknown keys are rejected.

.. code-block:: yaml

    phantom:   {shape: [48, 48, 48], num_foreground_classes: 4, noise_sigma: 0.05}
    data:      {num_cases: 1, seed_base: 0}        # or {manifest: path/to/manifest.txt}
    sampler:   {subvolume_sizes: [16, 32, 48], volumes_per_batch: 2,
                augmentation: {enabled: true}}
    loss:      {epsilon: 1.0, weighting_mode: normalized_inverse_count, roi_mode: unit}
    net1:      {base_width: 4}
    net2:      {base_width: 4, K: 5}
    schedule:  {learning_rate: 1.0e-4, seed: 0,
                steps: [{step_id: 1, epochs: 50, iterations_per_epoch: 4}, ...]}
    inference: {coarse_spacing: [3, 3, 3], roi_margin: 8}

``num_classes`` of both networks is taken from the phantom section
(``num_foreground_classes + 1``) unless given explicitly.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace

import yaml

from .losses import LossConfig
from .networks import Net1Config, Net2Config
from .phantom import PhantomConfig
from .sampler import AugmentConfig, SamplerConfig
from .trainer import StepSpec, TrainSchedule


@dataclass(frozen=True)
class DataConfig:
    manifest: str | None = None
    num_cases: int = 1
    seed_base: int = 0


@dataclass(frozen=True)
class InferenceConfig:
    coarse_spacing: tuple = (3.0, 3.0, 3.0)
    roi_margin: int = 8
    refine_net1_on_roi: bool = False

    def __post_init__(self):
        object.__setattr__(self, "coarse_spacing", tuple(float(s) for s in self.coarse_spacing))
        if len(self.coarse_spacing) != 3 or min(self.coarse_spacing) <= 0:
            raise ValueError(f"invalid coarse_spacing {self.coarse_spacing}")
        if self.roi_margin < 0:
            raise ValueError("roi_margin must be non-negative")


def _build(cls, values):
    values = dict(values or {})
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


@dataclass
class TrainConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    net1: Net1Config = field(default_factory=Net1Config)
    net2: Net2Config = field(default_factory=Net2Config)
    schedule: TrainSchedule = field(default_factory=TrainSchedule.desk)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    @property
    def num_classes(self) -> int:
        return self.phantom.num_foreground_classes + 1

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        phantom = _build(PhantomConfig, d.get("phantom"))
        n = phantom.num_foreground_classes + 1
        sampler = dict(d.get("sampler") or {})
        sampler["augmentation"] = _build(AugmentConfig, sampler.get("augmentation"))
        net1 = dict(d.get("net1") or {})
        net2 = dict(d.get("net2") or {})
        net1.setdefault("num_classes", n)
        net2.setdefault("num_classes", n)
        schedule = dict(d.get("schedule") or {})
        if "steps" in schedule:
            schedule["steps"] = [_build(StepSpec, s) for s in schedule["steps"]]
        else:
            schedule["steps"] = TrainSchedule.desk().steps
        cfg = cls(
            phantom=phantom,
            data=_build(DataConfig, d.get("data")),
            sampler=_build(SamplerConfig, sampler),
            loss=_build(LossConfig, d.get("loss")),
            net1=_build(Net1Config, net1),
            net2=_build(Net2Config, net2),
            schedule=_build(TrainSchedule, schedule),
            inference=_build(InferenceConfig, d.get("inference")),
        )
        if cfg.net1.num_classes != n or cfg.net2.num_classes != n:
            raise ValueError(f"network num_classes must equal num_foreground_classes + 1 = {n}")
        return cfg

    def to_dict(self) -> dict:
        return _plain({f.name: asdict(getattr(self, f.name)) for f in fields(self)})

    def with_seed(self, seed: int) -> "TrainConfig":
        """Propagate one seed to every random stream: data, sampler and schedule."""
        return replace(self, data=replace(self.data, seed_base=seed),
                       sampler=replace(self.sampler, rng_seed=seed),
                       schedule=replace(self.schedule, seed=seed))


def load_config(path: os.PathLike) -> TrainConfig:
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ValueError(f"malformed config {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ValueError(f"malformed config {path}: expected a mapping at the top level")
    return TrainConfig.from_dict(raw or {})


def dump_config(cfg: TrainConfig, path: os.PathLike) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
