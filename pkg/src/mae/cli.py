"""``mae`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from mae import analysis
from mae.checkpoint import load_checkpoint, read_header, save_checkpoint
from mae.config import RunConfig
from mae.evaluation import EVAL_MODES, evaluate
from mae.models import MaeTransformer
from mae.tasks import save_dataset
from mae.trainer import MODES, Trainer, trainable_names
from mae.training import MetricLog, fit
from mae.verify import check_gradcheck, run_battery

log = logging.getLogger("mae")

FINETUNE_MODES = ("FtG", "FtG+", "FtAll")


class CliError(Exception):
    """User-facing failure; reported without a traceback, exit code 2."""


def _run_config(args) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    except (ValueError, TypeError, OSError) as exc:
        raise CliError(f"cannot read config {args.config}: {exc}") from exc
    if getattr(args, "seed", None) is not None:
        cfg.with_seed(args.seed)
    if getattr(args, "mode", None) is not None:
        cfg.schedule.mode = args.mode
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    if getattr(args, "g_step_period", None) is not None:
        cfg.schedule.g_step_period = args.g_step_period
    if getattr(args, "drop_count", None) is not None:
        cfg.model.drop_count = args.drop_count
    if getattr(args, "out", None) is not None:
        cfg.out = args.out
    if cfg.schedule.mode == "uniform":
        cfg.model.gated = False
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise CliError("an output directory is required (--out or 'out' in the config)")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=float)


def _log_epoch(rec: dict):
    dev = f" dev {rec['dev_loss']:.4f}" if "dev_loss" in rec else ""
    log.info("epoch %d train %.4f%s (%d G steps, %.1fs)", rec["epoch"], rec["train_loss"], dev,
             rec["g_steps"], rec["seconds"])
    return False


# ----------------------------------------------------------------- train


def cmd_train(args) -> int:
    cfg = _run_config(args)
    try:
        cfg.model.validate()
        cfg.schedule.validate()
        dataset = cfg.dataset()
        cfg.fit_model_to(dataset)
    except (ValueError, OSError) as exc:
        raise CliError(f"invalid config: {exc}") from exc
    out = _out_dir(cfg)
    if args.resume:
        model, trainer, header = load_checkpoint(args.resume)
        if header["config"] != cfg.model.to_dict():
            raise CliError("resume mismatch: checkpoint model config differs from the run config")
        if trainer is None or header["schedule"] != cfg.schedule.to_dict() | {"betas": list(cfg.schedule.betas)}:
            raise CliError("resume mismatch: checkpoint schedule differs from the run config")
    else:
        model = MaeTransformer(cfg.model)
        trainer = Trainer(model, cfg.schedule)
    cfg.save(out / "config.json")
    save_dataset(dataset, out / "data")
    counts = model.parameter_count()
    log.info("parameters %d, gate share %.2f%%", counts["total"], 100 * counts["gate_fraction"])
    history = fit(trainer, dataset, cfg.epochs, MetricLog(out / "metrics.jsonl"), on_epoch=_log_epoch)
    save_checkpoint(out / "checkpoint.npz", model, trainer, {"run_config": cfg.to_dict()})
    summary = {
        "final_train_loss": history[-1]["train_loss"] if history else None,
        "final_dev_loss": history[-1].get("dev_loss") if history else None,
        "epochs": len(history),
        "steps": trainer.step_count,
        "g_steps": trainer.g_steps,
        "parameters": counts,
    }
    _dump(out / "summary.json", summary)
    print(json.dumps(summary, default=float))
    return 0


# -------------------------------------------------------------- finetune


def _config_from_checkpoint(args, path) -> RunConfig:
    if args.config:
        return _run_config(args)
    stored = read_header(path).get("extra", {}).get("run_config")
    if stored is None:
        raise CliError(f"{path} has no stored run config; pass --config")
    cfg = RunConfig.from_dict(stored)
    if args.seed is not None:
        cfg.with_seed(args.seed)
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    if getattr(args, "out", None) is not None:
        cfg.out = args.out
    return cfg


def cmd_finetune(args) -> int:
    cfg = _config_from_checkpoint(args, args.checkpoint)
    cfg.schedule.freeze = args.freeze
    cfg.schedule.mode = "bcd"
    cfg.schedule.g_step_period = 1
    out = _out_dir(cfg)
    dataset = cfg.dataset()
    model, trainer, _ = load_checkpoint(args.checkpoint, schedule=cfg.schedule)
    cfg.model = model.config
    cfg.save(out / "config.json")
    counts = {m: sum(model.params[n].size for n in trainable_names(model, m)) for m in FINETUNE_MODES}
    best = {"dev_loss": evaluate(model, dataset["dev"], decode=False)["loss"], "step": 0, "epoch": None}

    def track(rec):
        _log_epoch(rec)
        if rec.get("dev_loss", np.inf) < best["dev_loss"]:
            best.update(dev_loss=rec["dev_loss"], step=rec["steps"], epoch=rec["epoch"])
        return False

    start_step = trainer.step_count
    fit(trainer, dataset, cfg.epochs, MetricLog(out / "metrics.jsonl"), on_epoch=track)
    save_checkpoint(out / "checkpoint.npz", model, trainer, {"run_config": cfg.to_dict()})
    report = {
        "freeze": args.freeze,
        "trainable_parameters": counts[args.freeze],
        "trainable_by_mode": counts,
        "ratio_FtG+_to_FtAll": counts["FtG+"] / counts["FtAll"],
        "steps_to_best": best["step"] - start_step if best["epoch"] is not None else 0,
        "best_dev_loss": best["dev_loss"],
        "best_epoch": best["epoch"],
    }
    _dump(out / "finetune_report.json", report)
    print(json.dumps(report, default=float))
    return 0


# -------------------------------------------------------------- evaluate


def _eval_data(args, cfg: RunConfig):
    dataset = cfg.dataset()
    split = args.split
    if not dataset.splits.get(split):
        raise CliError(f"dataset has no {split!r} split")
    return dataset[split]


def cmd_evaluate(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    cfg = _config_from_checkpoint(args, args.checkpoint)
    instances = _eval_data(args, cfg)
    rng = np.random.default_rng(cfg.seed)
    results = {m: evaluate(model, instances, m, rng=rng) for m in args.eval_modes}
    first = args.eval_modes[0]
    for m in args.eval_modes[1:]:
        results[f"{m}_minus_{first}"] = {
            k: results[m][k] - results[first][k]
            for k in ("loss", "token_accuracy", "exact_match")
            if k in results[first]
        }
    if cfg.out:
        out = _out_dir(cfg)
        cfg.save(out / "config.json")
        _dump(out / "evaluation.json", results)
    print(json.dumps(results, default=float))
    return 0


# --------------------------------------------------------------- analyze


def cmd_analyze(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    cfg = _config_from_checkpoint(args, args.checkpoint)
    out = _out_dir(cfg)
    cfg.save(out / "config.json")
    instances = _eval_data(args, cfg)
    trace = analysis.collect_trace(model, instances)
    analysis.write_trace(out / "trace.jsonl", trace)
    ent = analysis.gate_entropy(trace)
    table = analysis.attribute(trace)
    pmi = {layer: analysis.token_expert_pmi(trace, layer, args.min_count, args.top_k) for layer in table}
    mode = "specialized" if model.config.gated else "random"
    delta = analysis.specialized_eval_delta(model, instances, mode, metric=args.metric,
                                            decode=args.metric != "loss", seed=cfg.seed)
    _dump(out / "entropy.json", ent)
    _dump(out / "attribution.json", {str(k): v.tolist() for k, v in table.items()})
    (out / "attribution.txt").write_text(analysis.attribution_report(table) + "\n", encoding="utf-8")
    _dump(out / "pmi.json", {str(layer): {str(e): rows for e, rows in per.items()} for layer, per in pmi.items()})
    _dump(out / "delta.json", delta)
    print(json.dumps({"entropy": ent["mean"], "delta": delta["delta"], "layers": len(table)}, default=float))
    print(analysis.attribution_report(table))
    return 0


# ---------------------------------------------------------------- verify


def _emit(results, out):
    lines = [r.line() for r in results]
    for line in lines:
        print(line)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "verify.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0 if all(r.passed for r in results) else 1


def cmd_verify(args) -> int:
    return _emit(run_battery(include_training=not args.skip_training), args.out)


def cmd_gradcheck(args) -> int:
    result = check_gradcheck()
    for name, err in sorted(result.detail.items()):
        log.info("%-40s %.3e", name, err)
    return _emit([result], args.out)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mae", description="Mixture of attentive experts at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON run config; flags override it")
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--epochs", type=int)
    t.add_argument("--g-step-period", type=int, default=None, help="epochs between G-step epochs (default 5)")
    t.add_argument("--drop-count", type=int, help="heads dropped per expert (t)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("finetune", help="finetune a checkpoint with frozen parameter groups")
    common(f)
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--freeze", choices=FINETUNE_MODES, required=True)
    f.add_argument("--epochs", type=int)
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint under several routings")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--eval-modes", nargs="+", choices=EVAL_MODES, default=["mixture", "specialized"])
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("analyze", help="gate entropy, attribution, PMI and specialization delta")
    common(a)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--split", default="dev")
    a.add_argument("--min-count", type=int, default=5)
    a.add_argument("--top-k", type=int, default=5)
    a.add_argument("--metric", default="token_accuracy", choices=["loss", "token_accuracy", "exact_match"])
    a.set_defaults(func=cmd_analyze)

    v = sub.add_parser("verify", help="run the invariant battery")
    v.add_argument("--config", help="accepted for symmetry; the battery is fixed")
    v.add_argument("--out")
    v.add_argument("--skip-training", action="store_true", help="skip the partition-safety training check")
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--config", help="accepted for symmetry; the checks are fixed")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"mae: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
