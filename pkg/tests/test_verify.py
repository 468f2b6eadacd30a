"""The invariant battery and its negative control."""

import json

import numpy as np
import pytest

from mae.attention import enumerate_experts
from mae.verify import (
    EQUIV_TOL,
    GRAD_CONFIGS,
    check_concat_sum,
    check_corrupted_w,
    check_expert_counts,
    check_expert_mean,
    check_gate_distribution,
    check_gradcheck,
    check_partition,
    check_sampler,
    check_uniform_reduction,
    concat_sum_diff,
    gradient_errors,
    head_drop_frequencies,
    random_layer,
)
from mae.tensor import Tensor


class TestEquivalences:
    @pytest.mark.parametrize("check", [check_concat_sum, check_expert_mean, check_uniform_reduction])
    def test_pass(self, check):
        r = check(seeds=5)
        assert r.passed and r.value <= EQUIV_TOL

    def test_corrupted_w_is_detected(self):
        r = check_corrupted_w()
        assert r.passed
        assert r.value > 1e-3

    def test_override_breaks_equivalence(self):
        layer, _ = random_layer(0)
        assembled = np.concatenate([w.data for w in layer.w], axis=0)
        assert concat_sum_diff(0, Tensor(assembled)) < EQUIV_TOL
        assert concat_sum_diff(0, Tensor(assembled + 0.5)) > 1e-3


class TestOtherChecks:
    def test_expert_counts(self):
        assert check_expert_counts().passed
        assert len(enumerate_experts(8, 2)) == 28

    def test_gate_distribution(self):
        assert check_gate_distribution(seeds=2).passed

    def test_sampler(self):
        r = check_sampler()
        assert r.passed and r.value <= 0.01
        assert len(r.detail["frequencies"]) == 8

    def test_drop_frequencies_sum_to_t(self):
        for t in (1, 2):
            freq = head_drop_frequencies(2000, h=4, t=t)
            assert freq.sum() == pytest.approx(t)

    def test_partition(self):
        assert check_partition(steps=8).passed

    def test_gradcheck(self):
        r = check_gradcheck(GRAD_CONFIGS[:1])
        assert r.passed and r.value <= 1e-4

    def test_gradient_errors_cover_all_parameter_groups(self):
        errs = gradient_errors(0)
        assert any("gate" in k for k in errs) and any(".w" in k or "w." in k for k in errs)
        assert max(errs.values()) < 1e-4

    def test_result_line_is_json(self):
        line = json.loads(check_expert_counts().line())
        assert set(line) == {"name", "passed", "value", "threshold", "seconds", "detail"}
        assert np.isfinite(line["seconds"])
