"""Experiment configuration, content digest, and dataset recipes."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import (
    TASKS,
    Dataset,
    ImagePair,
    _rng,
    balance_duplicate,
    degrade,
    gen_clean,
    sample_spec,
    split_validation,
)
from .model import ModelConfig
from .pruning import PruneConfig
from .train import DataBundle, TrainConfig

KIND_OF_TASK = {"derain": "rain", "dehaze": "haze", "denoise": "noise"}


@dataclass
class DataConfig:
    tasks: list[str] = field(default_factory=lambda: list(TASKS))
    size: int = 32
    n_train: int = 200
    n_test: int = 32
    noise_sigmas: list[float] = field(default_factory=lambda: [15.0, 25.0, 50.0])
    val_fraction: float = 0.1
    seed: int = 0
    rain: dict = field(default_factory=dict)
    haze: dict = field(default_factory=dict)
    root: str = "data"

    def __post_init__(self):
        bad = [t for t in self.tasks if t not in TASKS]
        if bad or not self.tasks:
            raise ValueError(f"tasks must be a non-empty subset of {TASKS}, got {self.tasks}")
        if self.size % 8:
            raise ValueError(f"image size {self.size} must be divisible by 8")

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ReportConfig:
    run_dir: str = "runs/default"


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "prune": self.prune.to_dict(),
            "train": self.train.to_dict(),
            "data": self.data.to_dict(),
            "report": asdict(self.report),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            model=ModelConfig.from_dict(d.get("model", {})),
            prune=PruneConfig.from_dict(d.get("prune", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            data=DataConfig.from_dict(d.get("data", {})),
            report=ReportConfig(**d.get("report", {})),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def digest(self) -> str:
        """sha256 over everything that affects numbers (output paths excluded)."""
        d = self.to_dict()
        d.pop("report")
        d["data"].pop("root")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def desk_config(seed: int = 42) -> ExperimentConfig:
    """The small denoising experiment used for the winning-ticket check."""
    return ExperimentConfig(
        model=ModelConfig(base_dim=8),
        prune=PruneConfig(rate=0.2, target_sparsity=0.9, scope="global", max_rounds=8),
        train=TrainConfig(epochs=30, warmup=4, batch_size=8, eta_base=2e-3, eta_start=1e-5,
                          eta_min=1e-5, seed=seed, patch=32),
        data=DataConfig(tasks=["denoise"], size=32, n_train=200, n_test=32, noise_sigmas=[25.0],
                        seed=seed),
    )


# recipes ---------------------------------------------------------------------

def _task_pairs(cfg: DataConfig, task: str, split: str, n: int) -> list[ImagePair]:
    t_idx = TASKS.index(task)
    split_id = {"train": 0, "test": 1}[split]
    base_seed = int(_rng(cfg.seed, t_idx, split_id, 23).integers(1 << 62))
    cleans = gen_clean(n, cfg.size, base_seed)
    pairs = []
    for i, clean in enumerate(cleans):
        spec_seed = int(_rng(cfg.seed, t_idx, split_id, i, 29).integers(1 << 62))
        spec = sample_spec(KIND_OF_TASK[task], spec_seed, index=i, noise_sigmas=cfg.noise_sigmas,
                           rain=cfg.rain, haze=cfg.haze)
        aug = int(_rng(cfg.seed, t_idx, split_id, i, 31).integers(1 << 62))
        pairs.append(degrade(clean, spec, source=f"{task}-{split}-{i:04d}", aug_seed=aug))
    return pairs


def build_task_datasets(cfg: DataConfig) -> dict[str, dict[str, list[ImagePair]]]:
    """``task -> {'train', 'val', 'test'} -> pairs``; val is carved out of the train pool."""
    out = {}
    for task in cfg.tasks:
        pool = _task_pairs(cfg, task, "train", cfg.n_train)
        train, val = split_validation(pool, cfg.val_fraction, cfg.seed + TASKS.index(task))
        out[task] = {"train": train, "val": val, "test": _task_pairs(cfg, task, "test", cfg.n_test)}
    return out


def bundle(task_sets: dict[str, dict[str, list[ImagePair]]], seed: int = 0) -> DataBundle:
    """Combine per-task splits; with several tasks the training pools are balanced."""
    tasks = sorted(task_sets)
    if len(tasks) == 1:
        train = list(task_sets[tasks[0]]["train"])
    else:
        train = balance_duplicate([Dataset(task_sets[t]["train"], "train", t) for t in tasks], seed).pairs
    val = [p for t in tasks for p in task_sets[t]["val"]]
    return DataBundle(train, val, {t: list(task_sets[t]["test"]) for t in tasks})
