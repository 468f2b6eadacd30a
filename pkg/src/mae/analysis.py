"""Specialization analyses over recorded gate distributions.

A trace holds, for every instance and MAE layer, the gate distribution the
model assigns to that instance (for causal decoder layers, the distribution at
the last unpadded position, which pools the whole sequence).
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass

import numpy as np

from mae.attention import MixtureRouter
from mae.evaluation import evaluate
from mae.models import PAD, MaeTransformer
from mae.tasks import make_batches
from mae.tensor import no_grad


@dataclass
class GateRecord:
    instance: int
    layer: int
    gate: np.ndarray
    argmax: int
    tokens: list

    def to_json(self) -> str:
        return json.dumps({
            "instance": self.instance,
            "layer": self.layer,
            "gate": [float(x) for x in self.gate],
            "argmax": self.argmax,
            "tokens": [int(t) for t in self.tokens],
        })

    @classmethod
    def from_json(cls, line: str) -> "GateRecord":
        d = json.loads(line)
        return cls(d["instance"], d["layer"], np.asarray(d["gate"]), d["argmax"], d["tokens"])


def argmax_expert(g: np.ndarray) -> int:
    """Index of the largest weight; ties go to the lowest index."""
    return int(np.argmax(g))


def collect_trace(model: MaeTransformer, instances, batch_size: int = 64) -> list[GateRecord]:
    """Gate distributions of every layer for every instance (mixture, eval mode)."""
    records = []
    arch = model.config.arch
    offset = 0
    for batch in make_batches(instances, batch_size, arch):
        router = MixtureRouter(training=False)
        with no_grad():
            model.logits(batch, router)
        query = batch.tgt_in if arch == "encdec" else batch.src
        last = (query != PAD).sum(axis=1) - 1
        for layer, g in sorted(router.gates.items()):
            if g.ndim == 3:
                g = g[np.arange(g.shape[0]), last]
            for b in range(batch.size):
                src = batch.src[b]
                records.append(
                    GateRecord(offset + b, layer, g[b].copy(), argmax_expert(g[b]), [int(t) for t in src[src != PAD]])
                )
        offset += batch.size
    return records


def write_trace(path, trace):
    with open(path, "w", encoding="utf-8") as f:
        for r in trace:
            f.write(r.to_json() + "\n")


def read_trace(path) -> list[GateRecord]:
    with open(path, encoding="utf-8") as f:
        return [GateRecord.from_json(line) for line in f if line.strip()]


def entropy(g: np.ndarray) -> float:
    """Natural-log entropy with 0 ln 0 = 0."""
    g = np.asarray(g, dtype=float)
    nz = g[g > 0]
    return float(-(nz * np.log(nz)).sum())


def gate_entropy(trace) -> dict:
    """Mean entropy per layer and the average over layers."""
    per_layer: dict[int, list] = {}
    for r in trace:
        per_layer.setdefault(r.layer, []).append(entropy(r.gate))
    means = {layer: float(np.mean(v)) for layer, v in sorted(per_layer.items())}
    return {"per_layer": means, "mean": float(np.mean(list(means.values()))) if means else float("nan")}


def attribute(trace) -> dict[int, np.ndarray]:
    """Fraction of instances whose gate peaks on each expert, per layer."""
    counts: dict[int, np.ndarray] = {}
    for r in trace:
        c = counts.setdefault(r.layer, np.zeros(len(r.gate)))
        c[argmax_expert(r.gate)] += 1
    return {layer: c / c.sum() for layer, c in sorted(counts.items())}


def pmi_table(trace, layer: int):
    """Token x expert PMI from per-instance co-occurrence.

    An instance attributed to expert e contributes one co-occurrence of e with
    each distinct token type it contains. Returns (tokens, joint counts, PMI);
    PMI is -inf where a pair never co-occurs.
    """
    records = [r for r in trace if r.layer == layer]
    if not records:
        raise ValueError(f"trace has no records for layer {layer}")
    experts = len(records[0].gate)
    pairs = Counter()
    for r in records:
        e = argmax_expert(r.gate)
        for tok in set(r.tokens):
            pairs[(tok, e)] += 1
    tokens = sorted({t for t, _ in pairs})
    index = {t: i for i, t in enumerate(tokens)}
    joint = np.zeros((len(tokens), experts))
    for (t, e), c in pairs.items():
        joint[index[t], e] = c
    p = joint / joint.sum()
    p_tok = p.sum(axis=1, keepdims=True)
    p_exp = p.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        pmi = np.where(p > 0, np.log(p / (p_tok * p_exp)), -np.inf)
    return tokens, joint, pmi


def token_expert_pmi(trace, layer: int = 0, min_count: int = 5, top_k: int = 5) -> dict[int, list]:
    """Most indicative tokens of each expert: [(token, pmi, count), ...]."""
    tokens, joint, pmi = pmi_table(trace, layer)
    frequent = joint.sum(axis=1) >= min_count
    out = {}
    for e in range(joint.shape[1]):
        ranked = [
            (tokens[i], float(pmi[i, e]), int(joint[i, e]))
            for i in np.argsort(-pmi[:, e], kind="stable")
            if frequent[i] and joint[i, e] > 0
        ]
        out[e] = ranked[:top_k]
    return out


def specialized_eval_delta(
    model: MaeTransformer,
    instances,
    mode: str = "specialized",
    runs: int = 5,
    metric: str = "loss",
    seed: int = 0,
    decode: bool = False,
) -> dict:
    """Mixture metric, single-expert metric and their difference.

    ``mode`` "specialized" keeps the argmax expert of every layer; "random"
    picks one expert per layer at random and averages over ``runs`` draws.
    ``delta`` is signed so that positive means the single expert is worse.
    """
    mixture = evaluate(model, instances, "mixture", decode=decode)[metric]
    if mode == "random":
        rng = np.random.default_rng(seed)
        values = [evaluate(model, instances, "random", rng=rng, decode=decode)[metric] for _ in range(runs)]
        single = float(np.mean(values))
    else:
        single = evaluate(model, instances, mode, decode=decode)[metric]
    worse = single - mixture if metric in ("loss", "perplexity") else mixture - single
    return {"mixture": mixture, "single": single, "delta": worse, "mode": mode, "metric": metric}


def attribution_report(table: dict[int, np.ndarray]) -> str:
    lines = []
    for layer, frac in table.items():
        lines.append(f"layer {layer}: " + " ".join(f"{100 * f:5.1f}" for f in frac))
    return "\n".join(lines)
