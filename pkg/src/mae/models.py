"""Desk-scale transformers whose attention sublayers are all MAE layers."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from mae.attention import MaeLayerParams, Router, UniformRouter, mixed_attention
from mae.tensor import (
    Tensor,
    add,
    cross_entropy,
    dropout,
    embedding,
    layer_norm,
    matmul,
    relu,
    reshape,
    scale,
)

PAD, COPY, REVERSE, BOS, EOS = 0, 1, 2, 3, 4
FIRST_CONTENT = 5


@dataclass
class ModelConfig:
    arch: str = "encdec"
    layers: int = 2
    d_model: int = 64
    heads: int = 8
    drop_count: int = 1
    ffn: int = 128
    vocab: int = 32
    max_len: int = 40
    dropout: float = 0.1
    gated: bool = True
    gate_hidden: int = 16
    gate_dropout: float = 0.1
    pooling: str = "mean"
    pool_window: int = 100
    seed: int = 0

    def validate(self):
        if self.arch not in ("encdec", "decoder"):
            raise ValueError(f"arch must be 'encdec' or 'decoder', got {self.arch!r}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if not 1 <= self.drop_count < self.heads:
            raise ValueError(f"drop_count must be in [1, heads), got {self.drop_count}")
        if self.layers < 1 or self.vocab <= FIRST_CONTENT or self.max_len < 2:
            raise ValueError("layers >= 1, vocab > 5 and max_len >= 2 required")
        if self.pooling not in ("mean", "recent"):
            raise ValueError(f"pooling must be 'mean' or 'recent', got {self.pooling!r}")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class Batch:
    src: np.ndarray  # B x S (encdec) or B x T inputs (decoder)
    tgt_in: Optional[np.ndarray]  # B x T, BOS-prefixed (encdec only)
    tgt_out: np.ndarray  # B x T, PAD where unscored

    @property
    def size(self):
        return self.src.shape[0]


def sinusoid_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class MaeTransformer:
    """Post-norm transformer: x = LN(x + dropout(sublayer(x))).

    MAE layers are indexed in the order encoder self-attention layers, then
    for each decoder layer its self-attention followed by its cross-attention.
    Decoder-side gates are causal: each position is routed on its prefix.
    """

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        c = config
        rng = np.random.default_rng(c.seed)
        d = c.d_model
        self.params: dict[str, Tensor] = {}
        self.mae_layers: list[MaeLayerParams] = []
        self.embed = self._param("embed", rng.normal(0.0, d ** -0.5, (c.vocab, d)))
        self.out_w = self._param("out.w", rng.normal(0.0, 0.5 * d ** -0.5, (d, c.vocab)))
        self.out_b = self._param("out.b", np.zeros(c.vocab))
        self.positions = sinusoid_positions(c.max_len + 2, d)
        n_enc = c.layers if c.arch == "encdec" else 0
        self.enc = [self._block(rng, f"enc.{i}", False, False) for i in range(n_enc)]
        self.dec = [self._block(rng, f"dec.{i}", c.arch == "encdec", True) for i in range(c.layers)]

    # ---------------------------------------------------------------- build

    def _param(self, name, value) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _mae(self, rng, name, causal) -> int:
        c = self.config
        layer = MaeLayerParams(
            c.d_model, c.heads, c.drop_count, rng=rng, gated=c.gated, gate_hidden=c.gate_hidden,
            gate_dropout=c.gate_dropout, pooling=c.pooling, window=c.pool_window, name=name,
            causal=causal,
        )
        for p in layer.theta() + layer.phi():
            self.params[p.name] = p
        self.mae_layers.append(layer)
        return len(self.mae_layers) - 1

    def _ln(self, name):
        d = self.config.d_model
        return self._param(f"{name}.g", np.ones(d)), self._param(f"{name}.b", np.zeros(d))

    def _block(self, rng, name, cross, causal):
        c = self.config
        d, f = c.d_model, c.ffn
        block = {"self": self._mae(rng, f"{name}.self", causal), "ln1": self._ln(f"{name}.ln1")}
        if cross:
            block["cross"] = self._mae(rng, f"{name}.cross", causal)
            block["ln_cross"] = self._ln(f"{name}.ln_cross")
        block["ffn"] = (
            self._param(f"{name}.ffn.w1", rng.uniform(-1, 1, (d, f)) * math.sqrt(6 / (d + f))),
            self._param(f"{name}.ffn.b1", np.zeros(f)),
            self._param(f"{name}.ffn.w2", rng.uniform(-1, 1, (f, d)) * math.sqrt(6 / (d + f))),
            self._param(f"{name}.ffn.b2", np.zeros(d)),
        )
        block["ln2"] = self._ln(f"{name}.ln2")
        return block

    # ---------------------------------------------------------- parameters

    def theta_names(self) -> list[str]:
        return [p.name for layer in self.mae_layers for p in layer.theta()]

    def w_block_names(self) -> list[str]:
        return [p.name for layer in self.mae_layers for p in layer.w]

    def phi_names(self) -> list[str]:
        return [p.name for layer in self.mae_layers for p in layer.phi()]

    def shared_names(self) -> list[str]:
        special = set(self.theta_names()) | set(self.phi_names())
        return [n for n in self.params if n not in special]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.mae_layers:
            if layer.gate is not None:
                out.update(layer.gate.buffers())
        return out

    def load_buffers(self, values: dict[str, np.ndarray]):
        for layer in self.mae_layers:
            if layer.gate is not None:
                layer.gate.load_buffers(values)

    def head_names(self, layer_index: int, head: int) -> list[str]:
        return [p.name for p in self.mae_layers[layer_index].head_parameters(head)]

    def parameter_count(self) -> dict[str, int]:
        gate = sum(self.params[n].size for n in self.phi_names())
        total = sum(p.size for p in self.params.values())
        return {"total": total, "gate": gate, "gate_fraction": gate / total}

    # -------------------------------------------------------------- forward

    def _embed(self, ids: np.ndarray) -> Tensor:
        n = ids.shape[1]
        if n > self.positions.shape[0]:
            raise ValueError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        x = scale(embedding(self.embed, ids), math.sqrt(self.config.d_model))
        return add(x, self.positions[:n])

    def _sublayer(self, x, out, ln, training, rng):
        return layer_norm(add(x, dropout(out, self.config.dropout, rng, training)), *ln)

    def _attention(self, index, x, router, pad_mask, attn_mask, memory=None):
        layer = self.mae_layers[index]
        coef = router(index, layer, x, pad_mask)
        return mixed_attention(x, layer, coef, attn_mask, memory)

    def _ffn(self, x, weights, training, rng):
        w1, b1, w2, b2 = weights
        h = relu(add(matmul(x, w1), b1))
        return add(matmul(dropout(h, self.config.dropout, rng, training), w2), b2)

    def encode(self, src: np.ndarray, router: Router, training=False, rng=None):
        pad = src != PAD
        key_mask = pad[:, None, None, :]
        x = dropout(self._embed(src), self.config.dropout, rng, training)
        for block in self.enc:
            a = self._attention(block["self"], x, router, pad, key_mask)
            x = self._sublayer(x, a, block["ln1"], training, rng)
            x = self._sublayer(x, self._ffn(x, block["ffn"], training, rng), block["ln2"], training, rng)
        return x, pad

    def decode(self, tgt_in: np.ndarray, memory, src_pad, router: Router, training=False, rng=None):
        """Logits B x T x V for decoder inputs; ``memory`` None for decoder-only."""
        pad = tgt_in != PAD
        n = tgt_in.shape[1]
        causal = np.tril(np.ones((n, n), dtype=bool))
        self_mask = causal[None, None] & pad[:, None, None, :]
        x = dropout(self._embed(tgt_in), self.config.dropout, rng, training)
        for block in self.dec:
            a = self._attention(block["self"], x, router, pad, self_mask)
            x = self._sublayer(x, a, block["ln1"], training, rng)
            if "cross" in block:
                a = self._attention(block["cross"], x, router, pad, src_pad[:, None, None, :], memory)
                x = self._sublayer(x, a, block["ln_cross"], training, rng)
            x = self._sublayer(x, self._ffn(x, block["ffn"], training, rng), block["ln2"], training, rng)
        return add(matmul(x, self.out_w), self.out_b)

    def logits(self, batch: Batch, router: Optional[Router] = None, training=False, rng=None) -> Tensor:
        router = router if router is not None else UniformRouter()
        if self.config.arch == "decoder":
            return self.decode(batch.src, None, None, router, training, rng)
        memory, src_pad = self.encode(batch.src, router, training, rng)
        return self.decode(batch.tgt_in, memory, src_pad, router, training, rng)

    def loss(self, batch: Batch, router: Optional[Router] = None, training=False, rng=None) -> Tensor:
        """Mean token cross-entropy over unpadded targets."""
        logits = self.logits(batch, router, training, rng)
        v = self.config.vocab
        return cross_entropy(reshape(logits, (-1, v)), batch.tgt_out.reshape(-1), ignore_index=PAD)


def build_model(config: ModelConfig) -> MaeTransformer:
    return MaeTransformer(config)
