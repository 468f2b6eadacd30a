"""Block coordinate descent training for MAE models.

A G step runs the gate-weighted mixture and updates only the gate parameters
(plain SGD, fixed step size). An F step samples one expert per instance from
the gate, runs that expert alone and updates only the parameters the sampled
experts touch, plus the shared non-attention parameters. ``bcd_epoch`` takes
G steps in epochs divisible by the G-step period and F steps always.

Baselines: ``joint_step`` (mixture forward, everything updated together),
``uniform_step`` (one uniformly sampled expert, no gate) and ``base_step``
(plain multi-head attention).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

import numpy as np

from mae.attention import MixtureRouter, SampleRouter, UniformRouter
from mae.models import PAD, Batch, MaeTransformer
from mae.tensor import NonFiniteError, Tape

MODES = ("bcd", "joint", "uniform", "base")
FREEZE_MODES = ("none", "FtG", "FtG+", "FtAll")


class NonFiniteLoss(NonFiniteError):
    """A step produced a non-finite loss; no parameter was touched."""

    def __init__(self, kind: str, step: int):
        FloatingPointError.__init__(self, f"non-finite loss in {kind} step {step}")
        self.op = "loss"
        self.kind = kind
        self.step = step


@dataclass
class TrainSchedule:
    mode: str = "bcd"
    g_step_period: int = 5
    lr: float = 2e-3
    warmup: int = 100
    betas: tuple = (0.9, 0.98)
    adam_eps: float = 1e-9
    gate_lr: float = 1.0
    freeze: str = "none"
    seed: int = 0
    g_first: bool = True
    gate_norm: str = "batch"
    batch_size: int = 32

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.freeze not in FREEZE_MODES:
            raise ValueError(f"freeze must be one of {FREEZE_MODES}, got {self.freeze!r}")
        if self.g_step_period < 1:
            raise ValueError("g_step_period must be >= 1")
        if self.gate_norm not in ("batch", "running"):
            raise ValueError(f"gate_norm must be 'batch' or 'running', got {self.gate_norm!r}")
        self.betas = tuple(self.betas)
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class StepReport:
    kind: str
    loss: float
    step: int
    epoch: int
    experts: dict = field(default_factory=dict)  # layer -> per-instance expert index
    permitted: frozenset = frozenset()
    changed: frozenset = frozenset()
    fingerprints: dict = field(default_factory=dict)  # changed name -> new hash

    @property
    def partition_ok(self) -> bool:
        return self.changed == self.permitted


def fingerprint(model: MaeTransformer) -> dict[str, str]:
    """Content hash of every parameter and gate buffer."""
    out = {}
    for name, p in model.params.items():
        out[name] = hashlib.blake2b(p.data.tobytes(), digest_size=12).hexdigest()
    for name, buf in model.buffers().items():
        out[name] = hashlib.blake2b(np.ascontiguousarray(buf).tobytes(), digest_size=12).hexdigest()
    return out


def trainable_names(model: MaeTransformer, freeze: str) -> set[str]:
    """Parameters a finetuning regime may update."""
    phi = set(model.phi_names())
    if freeze == "FtG":
        return phi
    if freeze == "FtG+":
        return phi | set(model.w_block_names())
    if freeze in ("FtAll", "none"):
        return set(model.params)
    raise ValueError(f"unknown freeze mode {freeze!r}")


def apply_freeze(model: MaeTransformer, mode: str) -> MaeTransformer:
    """Mark only the parameters of the regime as requiring gradients."""
    keep = trainable_names(model, mode)
    for name, p in model.params.items():
        p.requires_grad = name in keep
    return model


class Adam:
    """Adam with linear warmup and inverse square-root decay.

    Only parameters passed to :meth:`step` move; moments of the others stay
    frozen, so an expert left out of a step is untouched bit for bit.
    """

    def __init__(self, lr, warmup, betas=(0.9, 0.98), eps=1e-9):
        self.lr, self.warmup, self.betas, self.eps = lr, warmup, betas, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.counts: dict[str, int] = {}

    def rate(self, t: int) -> float:
        return self.lr * min(t / self.warmup, math.sqrt(self.warmup / t)) if self.warmup else self.lr

    def step(self, params: dict):
        self.t += 1
        lr = self.rate(self.t)
        b1, b2 = self.betas
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            k = self.counts[name] = self.counts.get(name, 0) + 1
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** k)
            vhat = v / (1 - b2 ** k)
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "counts": dict(self.counts)}

    def load_state(self, state: dict, m: dict, v: dict):
        self.t = int(state["t"])
        self.counts = {k: int(c) for k, c in state["counts"].items()}
        self.m = {k: np.array(a) for k, a in m.items()}
        self.v = {k: np.array(a) for k, a in v.items()}


def sgd_step(params: dict, lr: float):
    for p in params.values():
        if p.grad is not None:
            p.data -= lr * p.grad


class Trainer:
    """Owns the optimizers and random streams of one training run.

    Three independent generators: ``data_rng`` (shuffling), ``sample_rng``
    (expert draws) and ``dropout_rng`` (dropout masks).
    """

    def __init__(self, model: MaeTransformer, schedule: TrainSchedule):
        self.model = model
        self.schedule = schedule.validate()
        seeds = np.random.SeedSequence(schedule.seed).spawn(3)
        self.data_rng, self.sample_rng, self.dropout_rng = (np.random.default_rng(s) for s in seeds)
        self.adam = Adam(schedule.lr, schedule.warmup, schedule.betas, schedule.adam_eps)
        self.step_count = 0
        self.epoch = 0
        self.g_steps = 0
        apply_freeze(model, schedule.freeze)
        self.trainable = trainable_names(model, schedule.freeze)

    # ------------------------------------------------------------ helpers

    def _zero_grads(self):
        for p in self.model.params.values():
            p.grad = None

    def _run(self, batch: Batch, router, kind: str) -> float:
        """Forward + backward on a fresh tape; gradients left in ``.grad``."""
        self._zero_grads()
        saved = {k: v.copy() for k, v in self.model.buffers().items()}
        with Tape() as tape:
            try:
                loss = self.model.loss(batch, router, training=True, rng=self.dropout_rng)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteError("loss", ())
                tape.backward(loss)
            except NonFiniteError as exc:
                self.model.load_buffers(saved)
                self._zero_grads()
                raise NonFiniteLoss(kind, self.step_count) from exc
        return value

    def compute_gradients(self, batch: Batch, kind: str) -> float:
        """Populate ``.grad`` as step ``kind`` would, without updating."""
        return self._run(batch, self._router(kind), kind)

    def _router(self, kind):
        s = self.schedule
        if kind in ("G", "joint"):
            norm = "batch" if s.gate_norm == "batch" else "running"
            return MixtureRouter(training=True, rng=self.dropout_rng, norm_stats=norm)
        if kind == "F":
            return SampleRouter(self.sample_rng)
        if kind == "uniform":
            return SampleRouter(self.sample_rng, uniform=True)
        if kind == "base":
            return UniformRouter()
        raise ValueError(f"unknown step kind {kind!r}")

    def _active_heads(self, router: SampleRouter, batch: Batch) -> set[str]:
        """Head parameters used by some sampled expert at an unpadded position."""
        names = set()
        tgt = batch.tgt_in if batch.tgt_in is not None else batch.src
        for index, picks in router.choices.items():
            layer = self.model.mae_layers[index]
            chosen = picks[tgt != PAD] if layer.causal else picks
            for head in np.flatnonzero(layer.keep[chosen].any(axis=0)):
                names.update(self.model.head_names(index, int(head)))
        return names

    def _finish(self, kind, loss, before, permitted, router=None) -> StepReport:
        after = fingerprint(self.model)
        changed = frozenset(n for n in after if after[n] != before[n])
        report = StepReport(
            kind=kind,
            loss=loss,
            step=self.step_count,
            epoch=self.epoch,
            experts={} if router is None else {k: v.copy() for k, v in router.choices.items()},
            permitted=frozenset(permitted),
            changed=changed,
            fingerprints={n: after[n] for n in changed},
        )
        self._zero_grads()
        self.step_count += 1
        return report

    def _params(self, names) -> dict:
        return {n: self.model.params[n] for n in self.model.params if n in names}

    def _gate_state_names(self) -> set[str]:
        if self.schedule.gate_norm != "batch":
            return set()
        return set(self.model.buffers())

    # -------------------------------------------------------------- steps

    def g_step(self, batch: Batch) -> StepReport:
        """Update the gates through the mixture forward; experts fixed."""
        before = fingerprint(self.model)
        router = self._router("G")
        loss = self._run(batch, router, "G")
        phi = set(self.model.phi_names()) & self.trainable
        if self.schedule.gate_lr != 0.0:
            sgd_step(self._params(phi), self.schedule.gate_lr)
        else:
            phi = set()
        self.g_steps += 1
        return self._finish("G", loss, before, phi | self._gate_state_names(), router)

    def f_step(self, batch: Batch) -> StepReport:
        """Sample an expert per instance from the gate; update what it used."""
        return self._sampled_step(batch, "F")

    def uniform_step(self, batch: Batch) -> StepReport:
        """Update one uniformly sampled expert per instance (no gate)."""
        return self._sampled_step(batch, "uniform")

    def _sampled_step(self, batch, kind):
        before = fingerprint(self.model)
        router = self._router(kind)
        loss = self._run(batch, router, kind)
        permitted = (set(self.model.shared_names()) | self._active_heads(router, batch)) & self.trainable
        if permitted:
            self.adam.step(self._params(permitted))
        return self._finish(kind, loss, before, permitted, router)

    def joint_step(self, batch: Batch) -> StepReport:
        """Mixture forward; experts and gates updated simultaneously."""
        before = fingerprint(self.model)
        router = self._router("joint")
        loss = self._run(batch, router, "joint")
        phi = set(self.model.phi_names()) & self.trainable
        rest = (set(self.model.params) - set(self.model.phi_names())) & self.trainable
        self.adam.step(self._params(rest))
        sgd_step(self._params(phi), self.schedule.gate_lr)
        return self._finish("joint", loss, before, rest | phi | self._gate_state_names(), router)

    def base_step(self, batch: Batch) -> StepReport:
        before = fingerprint(self.model)
        router = self._router("base")
        loss = self._run(batch, router, "base")
        rest = (set(self.model.params) - set(self.model.phi_names())) & self.trainable
        self.adam.step(self._params(rest))
        return self._finish("base", loss, before, rest, router)

    # ------------------------------------------------------------- epochs

    def is_g_epoch(self, epoch: int) -> bool:
        return epoch % self.schedule.g_step_period == 0

    def bcd_epoch(self, batches: Iterable[Batch], epoch: int) -> list[StepReport]:
        self.epoch = epoch
        reports = []
        g_epoch = self.is_g_epoch(epoch)
        for batch in batches:
            if g_epoch and self.schedule.g_first:
                reports.append(self.g_step(batch))
            reports.append(self.f_step(batch))
            if g_epoch and not self.schedule.g_first:
                reports.append(self.g_step(batch))
        return reports

    def train_epoch(self, batches: Iterable[Batch], epoch: int) -> list[StepReport]:
        mode = self.schedule.mode
        if mode == "bcd":
            return self.bcd_epoch(batches, epoch)
        self.epoch = epoch
        step = {"joint": self.joint_step, "uniform": self.uniform_step, "base": self.base_step}[mode]
        return [step(b) for b in batches]
