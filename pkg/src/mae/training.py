"""Epoch loop with line-delimited metric logging."""

from __future__ import annotations

import json
import time
from collections import Counter
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from mae.evaluation import evaluate
from mae.tasks import Dataset, make_batches
from mae.trainer import StepReport, Trainer


def step_record(report: StepReport) -> dict:
    """JSON-ready summary of one step, with a per-layer expert histogram."""
    hist = {}
    for layer, picks in report.experts.items():
        if report.kind in ("F", "uniform"):
            hist[str(layer)] = {str(k): int(v) for k, v in sorted(Counter(np.ravel(picks).tolist()).items())}
    return {
        "type": "step",
        "step": report.step,
        "epoch": report.epoch,
        "kind": report.kind,
        "loss": report.loss,
        "experts": hist,
    }


class MetricLog:
    """Append-only JSONL writer; a partial run stays parseable."""

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict):
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def fit(
    trainer: Trainer,
    dataset: Dataset,
    epochs: int,
    log: Optional[MetricLog] = None,
    dev_split: str = "dev",
    log_steps: bool = True,
    on_epoch: Optional[Callable[[dict], bool]] = None,
) -> list[dict]:
    """Train for ``epochs`` more epochs, starting after ``trainer.epoch``.

    Each epoch appends one ``epoch`` record with mean train loss (over the
    steps that update experts) and teacher-forced dev loss under the mixture.
    ``on_epoch`` may return True to stop early.
    """
    log = log or MetricLog(None)
    history = []
    model = trainer.model
    start = trainer.epoch + 1 if trainer.step_count else 0
    for epoch in range(start, start + epochs):
        t0 = time.perf_counter()
        batches = make_batches(dataset["train"], trainer.schedule.batch_size, dataset.arch, trainer.data_rng)
        reports = trainer.train_epoch(batches, epoch)
        if log_steps:
            for r in reports:
                log.write(step_record(r))
        main = [r.loss for r in reports if r.kind != "G"] or [r.loss for r in reports]
        record = {
            "type": "epoch",
            "epoch": epoch,
            "train_loss": float(np.mean(main)),
            "g_steps": sum(r.kind == "G" for r in reports),
            "steps": trainer.step_count,
            "seconds": time.perf_counter() - t0,
        }
        if dataset.splits.get(dev_split):
            record["dev_loss"] = evaluate(model, dataset[dev_split], "mixture", decode=False)["loss"]
        log.write(record)
        history.append(record)
        if on_epoch is not None and on_epoch(record):
            break
    return history
