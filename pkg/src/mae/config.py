"""Run configuration: model, task and schedule settings plus run-level knobs.

Stored as JSON with ``model``, ``task`` and ``schedule`` sections. Loading a
saved ``config.json`` and re-running reproduces the run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from mae.models import ModelConfig
from mae.tasks import Dataset, TaskSpec, generate_task, load_dataset
from mae.trainer import TrainSchedule


def _build(cls, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**values)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    epochs: int = 20
    seed: int = 0
    out: Optional[str] = None
    data_dir: Optional[str] = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        schedule = dict(d.pop("schedule", {}))
        if "betas" in schedule:
            schedule["betas"] = tuple(schedule["betas"])
        return _build(cls, {
            **d,
            "model": _build(ModelConfig, d.pop("model", {})),
            "task": _build(TaskSpec, d.pop("task", {})),
            "schedule": _build(TrainSchedule, schedule),
        })

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"]["betas"] = list(d["schedule"]["betas"])
        return d

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    def with_seed(self, seed: int) -> "RunConfig":
        """One seed drives data generation, initialization and training."""
        self.seed = self.model.seed = self.task.seed = self.schedule.seed = seed
        return self

    def dataset(self) -> Dataset:
        if self.data_dir:
            return load_dataset(self.data_dir, self.task.kind, self.task.vocab, self.model.arch)
        return generate_task(self.task)

    def fit_model_to(self, dataset: Dataset) -> "RunConfig":
        """Match vocabulary and length limits to the data (recorded in the config)."""
        self.model.vocab = max(self.model.vocab, dataset.vocab)
        self.model.arch = dataset.arch
        self.model.max_len = max(self.model.max_len, dataset.max_len + 2)
        self.model.validate()
        self.schedule.validate()
        return self
