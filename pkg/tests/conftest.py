import numpy as np
import pytest

from mae.models import MaeTransformer, ModelConfig
from mae.tasks import TaskSpec, generate_task, make_batches, to_batch
from mae.trainer import Trainer, TrainSchedule


def tiny_config(**kw):
    base = dict(layers=1, d_model=16, heads=4, ffn=16, vocab=10, max_len=12, gate_hidden=8)
    base.update(kw)
    return ModelConfig(**base)


def tiny_task(**kw):
    base = dict(kind="two-regime", vocab=10, min_len=2, max_len=5, train_size=16, dev_size=8, test_size=8)
    base.update(kw)
    return generate_task(TaskSpec(**base))


def tiny_trainer(mode="bcd", model_kw=None, **sched):
    model = MaeTransformer(tiny_config(**(model_kw or {})))
    base = dict(mode=mode, warmup=5, batch_size=4, g_step_period=2)
    base.update(sched)
    return Trainer(model, TrainSchedule(**base))


@pytest.fixture
def dataset():
    return tiny_task()


@pytest.fixture
def batch(dataset):
    return to_batch(dataset["train"][:4])


@pytest.fixture
def batches(dataset):
    return make_batches(dataset["train"], 4)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, summary: str) -> bool:
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {summary}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
