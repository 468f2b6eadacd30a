"""Teacher-forced loss and greedy-decoding metrics under different routings."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from mae.attention import ArgmaxRouter, FixedRouter, MixtureRouter, UniformRouter
from mae.models import BOS, EOS, PAD, MaeTransformer
from mae.tasks import make_batches
from mae.tensor import no_grad

EVAL_MODES = ("mixture", "specialized", "random", "uniform")


def make_router(model: MaeTransformer, mode: str, rng: Optional[np.random.Generator] = None):
    """Fresh router for one forward pass.

    "random" draws one expert per layer (shared by every instance) from
    ``rng``; call it once and reuse via :class:`FixedRouter` to keep the draw
    fixed across a whole evaluation.
    """
    if mode == "mixture":
        return MixtureRouter(training=False)
    if mode == "specialized":
        return ArgmaxRouter()
    if mode == "uniform":
        return UniformRouter()
    if mode == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        return FixedRouter({i: int(rng.integers(l.num_experts)) for i, l in enumerate(model.mae_layers)})
    raise ValueError(f"unknown evaluation mode {mode!r}; expected one of {EVAL_MODES}")


def _router_factory(model, mode, rng):
    if mode == "random":
        fixed = make_router(model, "random", rng)
        return lambda: FixedRouter(fixed.picks)
    return lambda: make_router(model, mode)


def greedy_decode(model: MaeTransformer, src: np.ndarray, new_router, cap: int):
    """Greedy outputs (B x <=cap) and a per-row flag for hitting ``cap`` without EOS."""
    b = src.shape[0]
    with no_grad():
        memory, src_pad = model.encode(src, new_router())
        out = np.full((b, 1), BOS, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        for _ in range(cap):
            logits = model.decode(out, memory, src_pad, new_router()).data[:, -1]
            nxt = np.where(done, PAD, logits.argmax(axis=1))
            out = np.concatenate([out, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
    return out[:, 1:], ~done


def evaluate(
    model: MaeTransformer,
    instances,
    mode: str = "mixture",
    batch_size: int = 64,
    rng: Optional[np.random.Generator] = None,
    decode: bool = True,
    max_decode: Optional[int] = None,
) -> dict:
    """Loss/perplexity, plus token accuracy and exact match for seq2seq.

    Token accuracy counts target positions (EOS included) where the greedy
    output matches; instances that reach the decode cap without EOS are
    counted in ``truncated``.
    """
    arch = model.config.arch
    new_router = _router_factory(model, mode, rng)
    nll = tokens = correct = exact = truncated = 0.0
    n = 0
    for batch in make_batches(instances, batch_size, arch):
        with no_grad():
            logits = model.logits(batch, new_router()).data
        real = batch.tgt_out != PAD
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        picked = np.take_along_axis(logp, batch.tgt_out[..., None], axis=-1)[..., 0]
        nll -= (picked * real).sum()
        tokens += real.sum()
        n += batch.size
        if arch == "decoder" or not decode:
            correct += ((logits.argmax(-1) == batch.tgt_out) & real).sum()
            continue
        cap = max_decode or min(model.config.max_len, batch.src.shape[1] + 5)
        out, hit_cap = greedy_decode(model, batch.src, new_router, cap)
        truncated += hit_cap.sum()
        width = batch.tgt_out.shape[1]
        pred = np.full((batch.size, width), PAD, dtype=np.int64)
        k = min(width, out.shape[1])
        pred[:, :k] = out[:, :k]
        match = (pred == batch.tgt_out) & real
        correct += match.sum()
        exact += (match.sum(axis=1) == real.sum(axis=1)).sum()
    loss = nll / tokens
    metrics = {
        "mode": mode,
        "loss": float(loss),
        "perplexity": float(math.exp(loss)),
        "token_accuracy": float(correct / tokens),
        "instances": n,
    }
    if arch == "encdec" and decode:
        metrics["exact_match"] = float(exact / n)
        metrics["truncated"] = int(truncated)
    return metrics


def compare_modes(model, instances, modes=("mixture", "specialized"), **kw) -> dict:
    """Metrics for several routings of the same checkpoint, with differences."""
    results = {m: evaluate(model, instances, m, **kw) for m in modes}
    base = results[modes[0]]
    for m in modes[1:]:
        results[f"{m}_delta"] = {
            k: results[m][k] - base[k]
            for k in ("loss", "token_accuracy", "exact_match")
            if k in base
        }
    return results
