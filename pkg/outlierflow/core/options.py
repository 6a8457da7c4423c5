"""Run configuration."""

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Union

import yaml

from outlierflow.core.errors import ConfigurationError

LOSS_KINDS = ("jsd", "kl", "rkl")
SCORE_KINDS = ("jsd", "msp", "maxlogit", "kl", "rkl")
GENERATORS = ("flow", "gan")

# Values used for the full-scale road-driving and aerial setups.
FULL_SCALE_PRESETS: Dict[str, Dict[str, Any]] = {
    "road": {
        "image_size": 512,
        "patch_min": 16,
        "patch_max": 216,
        "crop_size": 64,
        "batch_size": 12,
        "cls_lr": 1e-4,
        "joint_cls_lr": 1e-5,
        "joint_flow_lr": 1e-6,
    },
    "aerial": {
        "image_size": 256,
        "patch_min": 16,
        "patch_max": 64,
        "crop_size": 32,
        "batch_size": 16,
        "cls_lr": 1e-4,
        "joint_cls_lr": 1e-5,
        "joint_flow_lr": 1e-6,
    },
}


def _check_fields(cls, data: dict) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"Unknown {cls.__name__} key(s): {', '.join(unknown)}")


@dataclass
class Toy2DConfig:
    """Two-class planar toy problem."""

    n_points: int = 1000
    class_offset: float = 1.0
    class_std: float = 0.35
    far_radius: float = 4.0
    n_far: int = 500
    hidden: int = 64
    flow_steps: int = 6
    flow_hidden: int = 64
    pretrain_steps: int = 400
    joint_steps: int = 600
    batch_size: int = 256
    n_negatives: int = 256
    lr: float = 1e-3
    lam: float = 0.5
    grid_extent: float = 5.0
    grid_resolution: int = 150
    # Negatives are drawn at the smallest ladder temperature whose samples
    # reach past negative_radius in every angular sector.
    negative_radius: float = 5.0
    negative_sectors: int = 8
    negative_coverage: float = 0.01
    negative_recalibrate_every: int = 100
    negative_temperatures: List[float] = field(
        default_factory=lambda: [1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0, 24.0]
    )

    def __post_init__(self):
        if self.n_points < 2 or self.n_far < 1:
            raise ConfigurationError("Toy2D needs at least 2 inlier points and 1 far-field point")
        if self.lam <= 0:
            raise ConfigurationError("Toy2D lam must be positive")
        if self.far_radius <= 0 or self.class_std <= 0 or self.negative_radius <= 0:
            raise ConfigurationError("Toy2D radii must be positive")
        if not self.negative_temperatures or min(self.negative_temperatures) <= 0:
            raise ConfigurationError("negative_temperatures must be a non-empty list of positive values")
        if self.negative_sectors < 1 or not 0 < self.negative_coverage < 1:
            raise ConfigurationError("negative_sectors must be positive and negative_coverage in (0, 1)")

    @classmethod
    def from_dict(cls, data: dict) -> "Toy2DConfig":
        _check_fields(cls, data)
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CoverageConfig:
    """Mixture-of-Gaussians mode coverage diagnostic."""

    modes: int = 8
    radius: float = 4.0
    sigma: float = 0.2
    n_points: int = 2000
    steps: int = 1500
    batch_size: int = 256
    n_samples: int = 1000
    band_sigmas: float = 3.0
    hidden: int = 64
    flow_steps: int = 6
    gan_latent: int = 8
    lr: float = 1e-3
    lam: float = 0.5

    def __post_init__(self):
        if self.modes < 1:
            raise ConfigurationError("Coverage diagnostic needs at least one mode")
        if self.sigma <= 0 or self.radius < 0:
            raise ConfigurationError("Mixture sigma must be positive and radius non-negative")
        if self.lam <= 0:
            raise ConfigurationError("Coverage lam must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "CoverageConfig":
        _check_fields(cls, data)
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunConfig:
    """Options for a run. Defaults are the desk-scale toy setup."""

    seed: int = 7
    deterministic: bool = True

    # Dataset
    num_classes: int = 3
    image_size: int = 64
    n_train: int = 200
    n_test: int = 40
    focal_px: float = 100.0
    baseline_m: float = 0.2

    # Models
    flow_levels: int = 2
    flow_steps: int = 4
    flow_hidden: int = 32
    coupling_scale_bound: float = 2.0
    classifier_width: int = 32

    # Schedule
    batch_size: int = 16
    cls_epochs: int = 5
    flow_epochs: int = 3
    joint_epochs: int = 10
    cls_lr: float = 1e-3
    flow_lr: float = 1e-3
    joint_cls_lr: float = 1e-3
    joint_flow_lr: float = 1e-4
    min_lr: float = 1e-7
    crop_size: int = 32

    # Synthetic negatives
    patch_min: int = 8
    patch_max: int = 32
    generator: str = "flow"
    loss_kind: str = "jsd"
    loss_weights: Dict[str, float] = field(
        default_factory=lambda: {"jsd": 3e-2, "kl": 1e-2, "rkl": 3e-2}
    )

    # Scoring
    score_kind: str = "jsd"
    temperatures: Dict[str, float] = field(
        default_factory=lambda: {"jsd": 2.0, "msp": 10.0, "kl": 2.0, "rkl": 2.0, "maxlogit": 1.0}
    )
    tpr: float = 0.95

    toy2d: Toy2DConfig = field(default_factory=Toy2DConfig)
    coverage: CoverageConfig = field(default_factory=CoverageConfig)

    def __post_init__(self):
        """Validate options after initialization."""
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be at least 2")
        if self.flow_levels < 0:
            raise ConfigurationError("flow_levels must be non-negative")
        if self.image_size % self.grid_unit:
            raise ConfigurationError(
                f"image_size {self.image_size} is not divisible by 2^{self.flow_levels}"
            )
        if self.crop_size % self.grid_unit:
            raise ConfigurationError(
                f"crop_size {self.crop_size} is not divisible by 2^{self.flow_levels}"
            )
        if not 1 <= self.patch_min <= self.patch_max:
            raise ConfigurationError("Patch range must satisfy 1 <= patch_min <= patch_max")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigurationError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.score_kind not in SCORE_KINDS:
            raise ConfigurationError(f"score_kind must be one of {SCORE_KINDS}")
        if self.generator not in GENERATORS:
            raise ConfigurationError(f"generator must be one of {GENERATORS}")
        for kind, weight in self.loss_weights.items():
            if kind not in LOSS_KINDS:
                raise ConfigurationError(f"Unknown loss weight kind: {kind}")
            if weight <= 0:
                raise ConfigurationError(f"lambda for {kind} must be positive")
        if self.loss_kind not in self.loss_weights:
            raise ConfigurationError(f"No loss weight given for loss_kind {self.loss_kind}")
        for kind, temperature in self.temperatures.items():
            if kind not in SCORE_KINDS:
                raise ConfigurationError(f"Unknown temperature kind: {kind}")
            if temperature <= 0:
                raise ConfigurationError(f"Temperature for {kind} must be positive")
        if not 0 < self.tpr <= 1:
            raise ConfigurationError("tpr must lie in (0, 1]")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")

    @property
    def grid_unit(self) -> int:
        """Spatial divisibility required by the flow's squeeze levels."""
        return 2 ** self.flow_levels

    @property
    def lam(self) -> float:
        """Negative-loss weight for the configured loss kind."""
        return self.loss_weights[self.loss_kind]

    @property
    def temperature(self) -> float:
        return self.temperature_for(self.score_kind)

    def temperature_for(self, kind: str) -> float:
        return self.temperatures.get(kind, 1.0)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        """Create options from a dictionary."""
        data = dict(data)
        _check_fields(cls, data)
        if "toy2d" in data:
            data["toy2d"] = Toy2DConfig.from_dict(data["toy2d"] or {})
        if "coverage" in data:
            data["coverage"] = CoverageConfig.from_dict(data["coverage"] or {})
        # Partial dicts extend the defaults instead of replacing them.
        defaults = cls()
        if "loss_weights" in data:
            data["loss_weights"] = {**defaults.loss_weights, **data["loss_weights"]}
        if "temperatures" in data:
            data["temperatures"] = {**defaults.temperatures, **data["temperatures"]}
        return cls(**data)

    @classmethod
    def preset(cls, name: str, **overrides) -> "RunConfig":
        """Options for one of the full-scale setups in FULL_SCALE_PRESETS."""
        if name not in FULL_SCALE_PRESETS:
            raise ConfigurationError(f"Unknown preset {name!r}; choose from {sorted(FULL_SCALE_PRESETS)}")
        return cls.from_dict({**FULL_SCALE_PRESETS[name], **overrides})

    def to_dict(self) -> dict:
        """Convert options to a dictionary."""
        return asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **changes})


def load_config(path: Union[str, Path]) -> RunConfig:
    """Read a YAML key table into a RunConfig."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"{path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a key table")
    return RunConfig.from_dict(data)


def save_config(config: RunConfig, path: Union[str, Path]) -> Path:
    """Write the resolved config as YAML."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=True), encoding="utf-8")
    return path
