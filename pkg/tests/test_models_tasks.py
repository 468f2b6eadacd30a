"""Desk models, synthetic tasks, dataset files and evaluation."""

import numpy as np
import pytest
from conftest import tiny_config

from mae.evaluation import evaluate, greedy_decode, make_router
from mae.models import COPY, PAD, REVERSE, MaeTransformer, ModelConfig, build_model
from mae.tasks import (
    TaskSpec,
    copy_target,
    generate_task,
    load_dataset,
    make_batches,
    read_split,
    reverse_target,
    save_dataset,
    to_batch,
    two_regime_target,
    write_split,
)
from mae.tensor import no_grad
from mae.trainer import Trainer, TrainSchedule


class TestBuildModel:
    def test_gate_share_below_ten_percent_at_default(self):
        counts = build_model(ModelConfig()).parameter_count()
        assert 0 < counts["gate_fraction"] < 0.10

    def test_decoder_only_has_no_cross_attention(self):
        model = build_model(ModelConfig(arch="decoder"))
        assert not any(".cross." in n for n in model.params)
        assert len(model.mae_layers) == 2

    def test_encdec_layer_count(self):
        assert len(build_model(ModelConfig(layers=2)).mae_layers) == 6

    def test_h8_t2_has_28_way_gates(self):
        model = build_model(ModelConfig(drop_count=2))
        assert all(layer.num_experts == 28 and layer.gate.w2.shape[1] == 28 for layer in model.mae_layers)

    @pytest.mark.parametrize("kw", [dict(d_model=30), dict(drop_count=8), dict(arch="rnn"), dict(pooling="max")])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            build_model(ModelConfig(**kw))

    def test_every_gate_is_distinct(self):
        model = build_model(ModelConfig())
        gates = [layer.gate for layer in model.mae_layers]
        assert len({id(g.w1) for g in gates}) == len(gates)


class TestTasks:
    def test_targets(self):
        assert copy_target([5, 3, 9]) == [5, 3, 9]
        assert reverse_target([5, 3, 9]) == [9, 3, 5]
        assert two_regime_target(COPY, [5, 3]) == [5, 3]
        assert two_regime_target(REVERSE, [5, 3]) == [3, 5]

    @pytest.mark.parametrize("kind", ["copy", "reverse", "two-regime"])
    def test_generated_targets_follow_the_rule(self, kind):
        ds = generate_task(TaskSpec(kind, train_size=40, dev_size=10, test_size=10))
        for src, tgt in ds["train"]:
            if kind == "copy":
                assert tgt == src
            elif kind == "reverse":
                assert tgt == src[::-1]
            else:
                assert tgt == two_regime_target(src[0], src[1:])

    def test_two_regime_is_balanced(self):
        ds = generate_task(TaskSpec("two-regime", train_size=100, dev_size=0, test_size=0))
        sentinels = [src[0] for src, _ in ds["train"]]
        assert sentinels.count(COPY) == sentinels.count(REVERSE) == 50

    def test_splits_are_disjoint(self):
        ds = generate_task(TaskSpec("copy", vocab=8, min_len=2, max_len=4, train_size=60, dev_size=20, test_size=20))
        keys = {s: {tuple(src) for src, _ in ds[s]} for s in ("train", "dev", "test")}
        assert not (keys["train"] & keys["dev"] or keys["train"] & keys["test"] or keys["dev"] & keys["test"])

    def test_seed_determinism(self):
        spec = TaskSpec("two-regime", seed=3, train_size=20, dev_size=5, test_size=5)
        assert generate_task(spec).splits == generate_task(spec).splits
        other = TaskSpec("two-regime", seed=4, train_size=20, dev_size=5, test_size=5)
        assert generate_task(spec).splits != generate_task(other).splits

    @pytest.mark.parametrize("kw", [dict(vocab=5), dict(min_len=0), dict(max_len=1, min_len=2), dict(kind="sort")])
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            generate_task(TaskSpec(**kw))

    def test_too_many_requested(self):
        with pytest.raises(ValueError):
            generate_task(TaskSpec("copy", vocab=6, min_len=1, max_len=1, train_size=5, dev_size=0, test_size=0))

    def test_char_lm(self, tmp_path):
        text = tmp_path / "text.txt"
        text.write_text("the quick brown fox jumps over the lazy dog " * 20)
        ds = generate_task(TaskSpec("char-lm", text_path=str(text), context=16))
        assert ds.arch == "decoder"
        src, tgt = ds["train"][0]
        assert src[1:] == tgt[:-1] and len(src) == 16

    def test_split_file_round_trip(self, tmp_path):
        ds = generate_task(TaskSpec("two-regime", train_size=10, dev_size=4, test_size=4))
        save_dataset(ds, tmp_path)
        assert (tmp_path / "train.tsv").read_text().split("\n")[0].count("\t") == 1
        loaded = load_dataset(tmp_path, ds.kind, ds.vocab)
        assert loaded.splits == ds.splits

    def test_malformed_split_file(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("5 6 7\n")
        with pytest.raises(ValueError, match="missing tab"):
            read_split(path)

    def test_write_read(self, tmp_path):
        write_split(tmp_path / "x.tsv", [([1, 5], [5]), ([2, 5, 6], [6, 5])])
        assert read_split(tmp_path / "x.tsv") == [([1, 5], [5]), ([2, 5, 6], [6, 5])]

    def test_batches_cover_all_instances(self):
        ds = generate_task(TaskSpec("copy", train_size=10, dev_size=0, test_size=0))
        batches = make_batches(ds["train"], 4, rng=np.random.default_rng(0))
        assert [b.size for b in batches] == [4, 4, 2]


class TestModelBehaviour:
    def test_decoder_only_is_causal(self, rng):
        model = MaeTransformer(tiny_config(arch="decoder"))
        seq = rng.integers(5, 10, size=(1, 8))
        other = seq.copy()
        other[0, 5:] = rng.integers(5, 10, size=3)
        for router_mode in ("mixture", "uniform"):
            with no_grad():
                a = model.logits(to_batch([(seq[0].tolist(), seq[0].tolist())], "decoder"),
                                 make_router(model, router_mode)).data
                b = model.logits(to_batch([(other[0].tolist(), other[0].tolist())], "decoder"),
                                 make_router(model, router_mode)).data
            np.testing.assert_allclose(a[0, :5], b[0, :5], atol=1e-13)
            assert not np.allclose(a[0, 5:], b[0, 5:])

    def test_padding_does_not_change_outputs(self):
        model = MaeTransformer(tiny_config())
        short = ([1, 5, 6], [5, 6])
        long = ([2, 5, 6, 7, 8, 9], [9, 8, 7, 6, 5])
        with no_grad():
            alone = model.logits(to_batch([short]), make_router(model, "mixture")).data
            padded = model.logits(to_batch([short, long]), make_router(model, "mixture")).data
        np.testing.assert_allclose(alone[0], padded[0, : alone.shape[1]], atol=1e-12)

    def test_untrained_perplexity_near_vocab(self):
        ds = generate_task(TaskSpec("copy", vocab=11, train_size=0, dev_size=64, test_size=0))
        model = MaeTransformer(tiny_config(vocab=11))
        ppl = evaluate(model, ds["dev"], decode=False)["perplexity"]
        assert 11 / 2 < ppl < 11 * 2

    def test_memorized_pair_decodes_exactly(self):
        pairs = [([5, 7, 6, 8], [5, 7, 6, 8]), ([9, 6, 5], [9, 6, 5])]
        model = MaeTransformer(tiny_config(dropout=0.0, gate_dropout=0.0, d_model=32, ffn=32))
        tr = Trainer(model, TrainSchedule(mode="bcd", lr=1e-2, warmup=1, batch_size=2))
        batch = to_batch(pairs)
        for epoch in range(150):
            tr.train_epoch([batch], epoch)
        out, hit_cap = greedy_decode(model, batch.src, lambda: make_router(model, "mixture"), 8)
        for (_, tgt), row in zip(pairs, out):
            assert row[: len(tgt) + 1].tolist() == tgt + [4]
        assert not hit_cap.any()
        metrics = evaluate(model, pairs)
        assert metrics["exact_match"] == 1.0 and metrics["token_accuracy"] == 1.0

    def test_decode_cap_reports_truncation(self):
        model = MaeTransformer(tiny_config())
        model.params["out.b"].data[4] = -50.0
        metrics = evaluate(model, [([5, 6], [5, 6])], max_decode=3)
        assert metrics["truncated"] == 1

    def test_modes_reported_side_by_side(self):
        from mae.evaluation import compare_modes

        ds = generate_task(TaskSpec("two-regime", vocab=10, train_size=0, dev_size=16, test_size=0))
        model = MaeTransformer(tiny_config())
        res = compare_modes(model, ds["dev"], ("mixture", "specialized"))
        assert res["specialized_delta"]["loss"] == pytest.approx(res["specialized"]["loss"] - res["mixture"]["loss"])

    def test_unknown_eval_mode(self):
        with pytest.raises(ValueError):
            make_router(MaeTransformer(tiny_config()), "oracle")

    def test_sequence_longer_than_max_len(self):
        model = MaeTransformer(tiny_config(max_len=4))
        with pytest.raises(ValueError):
            model.logits(to_batch([([5] * 10, [5] * 10)]))

    def test_pad_token_is_zero(self):
        assert to_batch([([5], [5]), ([5, 6], [5, 6])]).src[0, 1] == PAD
