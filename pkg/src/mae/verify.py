"""Invariant battery behind ``mae verify`` and ``mae gradcheck``.

Every check returns a :class:`CheckResult`; the report prints one JSON line
per check.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from mae.attention import (
    MaeLayerParams,
    SampleRouter,
    enumerate_experts,
    expert_forward,
    gate_forward,
    mae_forward,
    multihead_concat,
    multihead_sum,
)
from mae.gradcheck import check_gradients
from mae.models import ModelConfig, MaeTransformer
from mae.tasks import TaskSpec, generate_task, make_batches
from mae.tensor import Tensor, mul, no_grad, sum_
from mae.trainer import Trainer, TrainSchedule

EQUIV_TOL = 1e-10
GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    seconds: float = 0.0
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        return json.dumps(asdict(self))


def _timed(name, threshold, fn: Callable[[], tuple]) -> CheckResult:
    t0 = time.perf_counter()
    passed, value, detail = fn()
    return CheckResult(name, bool(passed), float(value), threshold, time.perf_counter() - t0, detail)


def random_layer(seed: int, d=16, h=8, t=1, n=6, batch=3, causal=False, gate_dropout=0.0):
    rng = np.random.default_rng(seed)
    layer = MaeLayerParams(d, h, t, rng=rng, gate_hidden=12, gate_dropout=gate_dropout, causal=causal)
    x = Tensor(rng.normal(size=(batch, n, d)))
    return layer, x


# ------------------------------------------------------------- equivalences


def concat_sum_diff(seed: int, w_override=None) -> float:
    layer, x = random_layer(seed)
    with no_grad():
        a = multihead_concat(x, layer, w=w_override).data
        b = multihead_sum(x, layer).data
    return float(np.abs(a - b).max())


def expert_mean_diff(seed: int, t: int) -> float:
    layer, x = random_layer(seed, t=t)
    with no_grad():
        outs = [expert_forward(x, e, layer).data for e in layer.experts]
        ref = multihead_sum(x, layer).data
    return float(np.abs(np.mean(outs, axis=0) - ref).max())


def uniform_reduction_diff(seed: int) -> float:
    layer, x = random_layer(seed)
    g = np.full((x.shape[0], layer.num_experts), 1.0 / layer.num_experts)
    with no_grad():
        a = mae_forward(x, layer, g=g).data
        b = multihead_sum(x, layer).data
    return float(np.abs(a - b).max())


def check_concat_sum(seeds=20) -> CheckResult:
    def run():
        worst = max(concat_sum_diff(s) for s in range(seeds))
        return worst < EQUIV_TOL, worst, {"seeds": seeds}

    return _timed("concat_equals_sum", EQUIV_TOL, run)


def check_expert_mean(seeds=20) -> CheckResult:
    def run():
        worst = {t: max(expert_mean_diff(s, t) for s in range(seeds)) for t in (1, 2)}
        value = max(worst.values())
        return value < EQUIV_TOL, value, {"seeds": seeds, "t1": worst[1], "t2": worst[2]}

    return _timed("expert_mean_equals_sum", EQUIV_TOL, run)


def check_uniform_reduction(seeds=20) -> CheckResult:
    def run():
        worst = max(uniform_reduction_diff(s) for s in range(seeds))
        return worst < EQUIV_TOL, worst, {"seeds": seeds}

    return _timed("uniform_gate_reduction", EQUIV_TOL, run)


def check_corrupted_w(seed=0) -> CheckResult:
    """Negative control: a perturbed W block must break concat == sum."""

    def run():
        layer, _ = random_layer(seed)
        blocks = [w.data.copy() for w in layer.w]
        blocks[3][0, 0] += 0.5
        diff = concat_sum_diff(seed, Tensor(np.concatenate(blocks, axis=0)))
        return diff > EQUIV_TOL, diff, {"corrupted_block": 3}

    return _timed("corrupted_w_detected", EQUIV_TOL, run)


# ------------------------------------------------------------ gradients


def gradient_errors(seed: int, t: int = 1, causal: bool = False) -> dict[str, float]:
    """Relative errors of every parameter group of one MAE layer.

    The gate runs in training mode (batch statistics), with dropout masks
    redrawn from a fixed seed on every call so the loss is deterministic.
    """
    layer, x = random_layer(seed, d=8, h=4, t=t, n=4, batch=3, causal=causal, gate_dropout=0.1)
    probe = np.random.default_rng(seed + 1000).normal(size=(3, 4, 8))

    def loss():
        out = mae_forward(x, layer, training=True, rng=np.random.default_rng(seed))
        return sum_(mul(out, probe))

    params = [layer.q[0], layer.k[1], layer.v[2], layer.w[3], *layer.gate.parameters()]
    return check_gradients(loss, params)


GRAD_CONFIGS = ((0, 1, False), (1, 2, False), (2, 1, True))


def check_gradcheck(configs=GRAD_CONFIGS) -> CheckResult:
    def run():
        detail = {}
        for seed, t, causal in configs:
            for name, err in gradient_errors(seed, t, causal).items():
                detail[f"seed{seed}.t{t}{'.causal' if causal else ''}.{name}"] = err
        worst = max(detail.values())
        return worst < GRAD_TOL, worst, detail

    return _timed("gradient_check", GRAD_TOL, run)


# ------------------------------------------------------------ training


def tiny_setup(seed=0, mode="bcd", period=2, gate_norm="batch"):
    ds = generate_task(TaskSpec("two-regime", vocab=10, min_len=2, max_len=5, train_size=16, dev_size=0,
                                test_size=0, seed=seed))
    model = MaeTransformer(ModelConfig(layers=1, d_model=16, heads=4, ffn=16, vocab=10, max_len=12, seed=seed))
    trainer = Trainer(model, TrainSchedule(mode=mode, g_step_period=period, warmup=5, seed=seed,
                                           gate_norm=gate_norm, batch_size=4))
    return ds, model, trainer


def check_partition(steps=40, seed=0) -> CheckResult:
    """Every step kind changes exactly its permitted parameters."""

    def run():
        violations, kinds = [], {}
        for mode in ("bcd", "joint", "uniform", "base"):
            ds, _, trainer = tiny_setup(seed, mode)
            epoch = 0
            while sum(kinds.get((mode, k), 0) for k in ("G", "F", "joint", "uniform", "base")) < steps // 4:
                for r in trainer.train_epoch(make_batches(ds["train"], 4, rng=trainer.data_rng), epoch):
                    kinds[(mode, r.kind)] = kinds.get((mode, r.kind), 0) + 1
                    if not r.partition_ok:
                        violations.append({"mode": mode, "step": r.step, "kind": r.kind,
                                           "extra": sorted(r.changed - r.permitted)[:3],
                                           "missing": sorted(r.permitted - r.changed)[:3]})
                epoch += 1
        detail = {f"{m}.{k}": c for (m, k), c in kinds.items()}
        detail["violations"] = violations[:5]
        return not violations, len(violations), detail

    return _timed("partition_safety", 0, run)


def head_drop_frequencies(samples=10_000, h=8, t=1, seed=0) -> np.ndarray:
    """Per-head drop rate of F-step expert draws under uniform gates."""
    rng = np.random.default_rng(seed)
    layer = MaeLayerParams(h * 2, h, t, rng=rng, gate_hidden=8)
    layer.gate.w2.data[:] = 0.0
    router = SampleRouter(rng)
    x = Tensor(rng.normal(size=(samples, 2, h * 2)))
    router(0, layer, x, None)
    dropped = layer.keep[router.choices[0]] == 0
    return dropped.mean(axis=0)


def check_sampler(samples=10_000) -> CheckResult:
    def run():
        freq = head_drop_frequencies(samples)
        worst = float(np.abs(freq - 1 / 8).max())
        return worst <= 0.01, worst, {"frequencies": freq.tolist()}

    return _timed("sampler_head_drop_rate", 0.01, run)


def check_expert_counts() -> CheckResult:
    def run():
        counts = {f"h8_t{t}": len(enumerate_experts(8, t)) for t in (1, 2)}
        ok = counts == {"h8_t1": 8, "h8_t2": 28}
        return ok, counts["h8_t2"], counts

    return _timed("expert_counts", 28, run)


def check_gate_distribution(seeds=5) -> CheckResult:
    def run():
        worst = 0.0
        for s in range(seeds):
            layer, x = random_layer(s)
            with no_grad():
                g = gate_forward(x, layer.gate, False).data
            worst = max(worst, float(np.abs(g.sum(-1) - 1).max()), float(max(0.0, -g.min())))
        return worst < 1e-9, worst, {"seeds": seeds}

    return _timed("gate_rows_are_distributions", 1e-9, run)


def run_battery(include_training=True) -> list[CheckResult]:
    checks = [
        check_concat_sum(),
        check_expert_mean(),
        check_uniform_reduction(),
        check_corrupted_w(),
        check_gate_distribution(),
        check_expert_counts(),
        check_gradcheck(),
        check_sampler(),
    ]
    if include_training:
        checks.append(check_partition())
    return checks

