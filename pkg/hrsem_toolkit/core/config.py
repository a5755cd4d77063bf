"""Pipeline configuration: one JSON file, one dataclass per stage"""
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

from core.da_trainer import DATrainConfig
from core.errors import ConfigError, HRSemError
from core.networks import DOWNSAMPLE
from core.raster_io import DOMAINS
from core.seg_eval import SegConfig
from core.synth_data import SOURCE_PROPORTIONS, SceneSpec, StyleSpec
from utils.serialization import config_hash, dataclass_from_dict, load_json, save_json, to_json_dict


def default_target_style() -> StyleSpec:
    return StyleSpec(gains=(1.3, 1.3, 1.3, 1.3), biases=(60.0, 60.0, 60.0, 60.0), noise_std=6.0)


@dataclass
class SynthConfig:
    n_scenes: int = 200
    size: Tuple[int, int] = (64, 64)
    class_proportions: Tuple[float, ...] = SOURCE_PROPORTIONS
    source_style: StyleSpec = field(default_factory=StyleSpec)
    target_style: StyleSpec = field(default_factory=default_target_style)
    # shared by both domains so their label layouts pair up; unset falls back to the pipeline seed
    layout_seed: Optional[int] = None
    val_fraction: float = 0.0

    def validate(self) -> None:
        if self.n_scenes < 1:
            raise ConfigError("n_scenes must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        for spec in (self.scene_spec('source', 0), self.scene_spec('target', 0)):
            try:
                spec.validate()
            except HRSemError as e:
                raise ConfigError(f"synth: {e}") from e

    def scene_spec(self, domain: str, pipeline_seed: int) -> SceneSpec:
        seed = self.layout_seed
        style = self.source_style if domain == 'source' else self.target_style
        return SceneSpec(seed=pipeline_seed if seed is None else seed, size=tuple(self.size),
                         class_proportions=tuple(self.class_proportions), style=style)


@dataclass
class PrepareConfig:
    smooth_sigma: Optional[float] = 1.0
    smooth_domains: Tuple[str, ...] = ('target',)

    def validate(self) -> None:
        if self.smooth_sigma is not None and not self.smooth_sigma > 0:
            raise ConfigError("smooth_sigma must be positive or null")
        unknown = set(self.smooth_domains) - set(DOMAINS)
        if unknown:
            raise ConfigError(f"Unknown smoothing domains: {sorted(unknown)}")


@dataclass
class PipelineConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    prepare: PrepareConfig = field(default_factory=PrepareConfig)
    da: DATrainConfig = field(default_factory=DATrainConfig)
    seg: SegConfig = field(default_factory=SegConfig)

    def validate(self) -> 'PipelineConfig':
        self.synth.validate()
        self.prepare.validate()
        self.da.validate()
        self.seg.validate()
        if self.da.generator.in_channels != self.seg.in_channels:
            raise ConfigError("Segmentation input channels must match the generator's")
        factor = max(DOWNSAMPLE, 2 ** (len(self.seg.widths) - 1))
        if any(side % factor for side in self.synth.size):
            raise ConfigError(f"Tile sides {tuple(self.synth.size)} must be divisible by {factor}")
        return self

    def with_seed(self, seed: int) -> 'PipelineConfig':
        """Pipeline seed propagated to the training stages"""
        return replace(self, seed=seed, da=replace(self.da, seed=seed), seg=replace(self.seg, seed=seed))

    def hash(self) -> str:
        return config_hash(self)

    def save(self, path) -> None:
        save_json(to_json_dict(self), path)


def load_config(path=None, seed: Optional[int] = None) -> PipelineConfig:
    """Parse and fully validate a pipeline config; no path means the built-in defaults"""
    cfg = PipelineConfig() if path is None else dataclass_from_dict(PipelineConfig, load_json(Path(path)))
    cfg = cfg.with_seed(cfg.seed if seed is None else seed)
    return cfg.validate()
