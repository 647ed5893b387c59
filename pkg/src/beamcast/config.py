"""Experiment configuration, JSON IO, presets and config hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

from .model.encoder import ModelConfig
from .scene import SceneConfig, TrajectoryConfig


@dataclass
class PipelineConfig:
    missing_block_fraction: float = 0.1
    stall_probability: float = 0.0
    stall_tolerance: float = 0.0
    validity_threshold: float = 0.60
    # MMSE regulariser in normalised-dataset units; None uses the scene noise
    # variance rescaled by the normalisation scalar
    mmse_sigma2: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.missing_block_fraction <= 1.0:
            raise ValueError("missing_block_fraction must lie in [0, 1]")
        if self.stall_tolerance < 0:
            raise ValueError("stall_tolerance must be nonnegative")
        if self.mmse_sigma2 is not None and self.mmse_sigma2 < 0:
            raise ValueError("mmse_sigma2 must be nonnegative")


@dataclass
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    horizons_ms: list[float] = field(default_factory=lambda: [0, 20, 40, 1000, 2000, 10000, 15000])
    subset_sizes: list[int] = field(default_factory=lambda: [4, 8, 16, 32])
    test_laps: int = 1
    validation_fraction: float = 0.1
    output_dir: str = "runs"
    seed: int = 0

    def __post_init__(self):
        if any(h < 0 for h in self.horizons_ms):
            raise ValueError("horizons must be nonnegative")
        if any(not 1 <= n <= 64 for n in self.subset_sizes):
            raise ValueError("subset sizes must lie in [1, 64]")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        self.apply_seed(self.seed)

    def apply_seed(self, seed: int) -> None:
        self.seed = int(seed)
        self.scene.rng_seed = self.seed
        self.model.seed = self.seed

    def to_dict(self) -> dict:
        return {
            "scene": self.scene.to_dict(),
            "trajectory": self.trajectory.to_dict(),
            "pipeline": asdict(self.pipeline),
            "model": self.model.to_dict(),
            "horizons_ms": list(self.horizons_ms),
            "subset_sizes": list(self.subset_sizes),
            "test_laps": self.test_laps,
            "validation_fraction": self.validation_fraction,
            "output_dir": self.output_dir,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            scene=SceneConfig.from_dict(d.get("scene", {})),
            trajectory=TrajectoryConfig.from_dict(d.get("trajectory", {})),
            pipeline=PipelineConfig(**d.get("pipeline", {})),
            model=ModelConfig.from_dict(d.get("model", {})),
            horizons_ms=list(d.get("horizons_ms", [0, 20, 40, 1000, 2000, 10000, 15000])),
            subset_sizes=list(d.get("subset_sizes", [4, 8, 16, 32])),
            test_laps=int(d.get("test_laps", 1)),
            validation_fraction=float(d.get("validation_fraction", 0.1)),
            output_dir=d.get("output_dir", "runs"),
            seed=int(d.get("seed", 0)),
        )

    def data_dict(self) -> dict:
        """The part of the config that determines a dataset."""
        return {"scene": self.scene.to_dict(), "trajectory": self.trajectory.to_dict(),
                "pipeline": asdict(self.pipeline)}

    def data_hash(self) -> bytes:
        return config_hash(self.data_dict())


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> bytes:
    return hashlib.sha256(canonical_json(obj).encode()).digest()


PRESETS = ("los", "nlos")


def load_config(path_or_preset: str | Path) -> ExperimentConfig:
    """Load a JSON config file, or one of the bundled presets by name."""
    name = str(path_or_preset)
    if name in PRESETS:
        text = resources.files("beamcast.presets").joinpath(f"{name}.json").read_text()
    else:
        p = Path(name)
        if not p.exists():
            raise FileNotFoundError(f"config file {p} not found (presets: {', '.join(PRESETS)})")
        text = p.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"config {name} is not valid JSON: {exc}") from None
    return ExperimentConfig.from_dict(data)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
