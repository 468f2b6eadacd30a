"""Checkpoints: a single ``.npz`` archive with a JSON header.

Array sections are keyed ``param/<name>``, ``buffer/<name>``, ``adam_m/<name>``
and ``adam_v/<name>``. Parameter names are per head and per W block (for
example ``enc.0.self.q.3`` or ``dec.1.cross.w.0``), so each expert's pieces are
individually addressable. The ``header`` entry is a JSON document holding the
format version, h and t of every MAE layer, the model config, the training
schedule, trainer counters, optimizer counters and the three RNG states, which
together make a resumed run continue exactly where it stopped.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from mae.models import MaeTransformer, ModelConfig
from mae.trainer import Trainer, TrainSchedule

FORMAT_VERSION = 1


def _header(model: MaeTransformer, trainer: Optional[Trainer], extra: Optional[dict]) -> dict:
    header = {
        "format": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "layers": [{"h": layer.h, "t": layer.t, "experts": layer.num_experts} for layer in model.mae_layers],
        "extra": extra or {},
    }
    if trainer is not None:
        header["schedule"] = trainer.schedule.to_dict()
        header["trainer"] = {
            "step_count": trainer.step_count,
            "epoch": trainer.epoch,
            "g_steps": trainer.g_steps,
            "adam": trainer.adam.state(),
            "rng": {
                "data": trainer.data_rng.bit_generator.state,
                "sample": trainer.sample_rng.bit_generator.state,
                "dropout": trainer.dropout_rng.bit_generator.state,
            },
        }
    return header


def save_checkpoint(path, model: MaeTransformer, trainer: Optional[Trainer] = None, extra: Optional[dict] = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{n}": p.data for n, p in model.params.items()}
    arrays.update({f"buffer/{n}": b for n, b in model.buffers().items()})
    if trainer is not None:
        arrays.update({f"adam_m/{n}": m for n, m in trainer.adam.m.items()})
        arrays.update({f"adam_v/{n}": v for n, v in trainer.adam.v.items()})
    arrays["header"] = np.array(json.dumps(_header(model, trainer, extra)))
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def read_header(path) -> dict:
    with np.load(path) as archive:
        return json.loads(str(archive["header"]))


def _sections(archive, prefix):
    return {k[len(prefix):]: np.array(archive[k]) for k in archive.files if k.startswith(prefix)}


def load_checkpoint(path, schedule: Optional[TrainSchedule] = None):
    """Rebuild (model, trainer, header) from ``path``.

    The trainer is None if the checkpoint has no training state. A caller may
    pass ``schedule`` to continue under different settings (finetuning); the
    optimizer moments then restart but the RNG streams still resume.
    """
    with np.load(path) as archive:
        header = json.loads(str(archive["header"]))
        if header.get("format") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        params = _sections(archive, "param/")
        buffers = _sections(archive, "buffer/")
        adam_m = _sections(archive, "adam_m/")
        adam_v = _sections(archive, "adam_v/")
    config = ModelConfig(**header["config"])
    model = MaeTransformer(config)
    missing = set(model.params) ^ set(params)
    if missing:
        raise ValueError(f"{path}: parameter sections do not match the model: {sorted(missing)[:5]}")
    for name, value in params.items():
        if value.shape != model.params[name].shape:
            raise ValueError(f"{path}: {name} has shape {value.shape}, model expects {model.params[name].shape}")
        model.params[name].data = value.astype(np.float64)
    model.load_buffers(buffers)

    trainer = None
    state = header.get("trainer")
    if schedule is not None or state is not None:
        resumed = schedule is None
        if schedule is None:
            saved = dict(header["schedule"])
            saved["betas"] = tuple(saved["betas"])
            schedule = TrainSchedule(**saved)
        trainer = Trainer(model, schedule)
        if state is not None:
            trainer.data_rng.bit_generator.state = state["rng"]["data"]
            trainer.sample_rng.bit_generator.state = state["rng"]["sample"]
            trainer.dropout_rng.bit_generator.state = state["rng"]["dropout"]
            if resumed:
                trainer.step_count = state["step_count"]
                trainer.epoch = state["epoch"]
                trainer.g_steps = state["g_steps"]
                trainer.adam.load_state(state["adam"], adam_m, adam_v)
    return model, trainer, header
