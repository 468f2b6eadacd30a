"""Multi-head attention as a mixture of attentive experts.

An expert is identified by the set of heads it drops; its output is the sum of
the remaining projected heads, rescaled by ``h / (h - t)``. Mixing experts
with weights ``g`` is linear in the per-head outputs, so every mixture reduces
to per-head coefficients

    c_j = h / (h - t) * sum_{e : j not dropped by e} g_e

which is what :func:`combine_heads` consumes. The single-instance helpers
(:func:`head_forward`, :func:`multihead_concat`, :func:`multihead_sum`,
:func:`expert_forward`) compute the same quantities head by head and serve as
independent reference routes.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from mae import kernels
from mae.tensor import (
    BatchNormState,
    DimensionError,
    Tensor,
    as_tensor,
    add,
    apply_mask,
    batch_norm,
    concat,
    dropout,
    matmul,
    mul,
    no_grad,
    reshape,
    scale,
    scatter_rows,
    softmax,
    stack,
    sum_,
    swap_last,
    take_rows,
    tanh,
    transpose,
)

GATE_HIDDEN = 256
GATE_DROPOUT = 0.1
RECENT_WINDOW = 100


@dataclass(frozen=True, order=True)
class ExpertId:
    """Heads removed by one expert, kept sorted so the id is a stable key."""

    dropped: tuple[int, ...]

    def __post_init__(self):
        d = tuple(self.dropped)
        if len(set(d)) != len(d) or tuple(sorted(d)) != d:
            raise ValueError(f"ExpertId needs sorted distinct heads, got {self.dropped}")
        object.__setattr__(self, "dropped", d)

    def kept(self, h: int) -> tuple[int, ...]:
        return tuple(j for j in range(h) if j not in self.dropped)

    def __str__(self):
        return "-" + ",".join(map(str, self.dropped))


def enumerate_experts(h: int, t: int) -> list[ExpertId]:
    """All ``comb(h, t)`` experts in lexicographic order of dropped heads."""
    if h < 2 or not 1 <= t <= h - 1:
        raise ValueError(f"need 1 <= t <= h - 1, got h={h}, t={t}")
    return [ExpertId(c) for c in itertools.combinations(range(h), t)]


def keep_matrix(experts: list[ExpertId], h: int) -> np.ndarray:
    """(E, h) indicator: 1 where expert e keeps head j."""
    m = np.ones((len(experts), h))
    for e, ex in enumerate(experts):
        m[e, list(ex.dropped)] = 0.0
    return m


# --------------------------------------------------------------------------
# gate


def tanh_mlp_forward(x, w1, b1, w2, b2, dropout_rate=0.0, rng=None, training=False) -> Tensor:
    """w2 . dropout(tanh(w1 . x + b1)) + b2 on row vectors."""
    if x.shape[-1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise DimensionError(f"tanh_mlp: x {x.shape}, w1 {w1.shape}, w2 {w2.shape} do not chain")
    hidden = tanh(add(matmul(x, w1), b1))
    if training and dropout_rate > 0.0:
        hidden = dropout(hidden, dropout_rate, rng, True)
    return add(matmul(hidden, w2), b2)


class GateParams:
    """Batch norm over the pooled input, then a tanh MLP onto the experts."""

    def __init__(
        self,
        d: int,
        num_experts: int,
        rng: np.random.Generator,
        hidden: int = GATE_HIDDEN,
        dropout_rate: float = GATE_DROPOUT,
        pooling: str = "mean",
        window: int = RECENT_WINDOW,
        name: str = "gate",
    ):
        if pooling not in ("mean", "recent"):
            raise ValueError(f"unknown pooling policy {pooling!r}")
        self.bn = BatchNormState(d, name=f"{name}.bn")
        s1, s2 = math.sqrt(1.0 / d), math.sqrt(1.0 / hidden)
        self.w1 = Tensor(rng.uniform(-s1, s1, (d, hidden)), True, f"{name}.w1")
        self.b1 = Tensor(np.zeros(hidden), True, f"{name}.b1")
        self.w2 = Tensor(rng.uniform(-s2, s2, (hidden, num_experts)), True, f"{name}.w2")
        self.b2 = Tensor(np.zeros(num_experts), True, f"{name}.b2")
        self.num_experts = num_experts
        self.dropout_rate = dropout_rate
        self.pooling = pooling
        self.window = window
        self.name = name

    def parameters(self) -> list[Tensor]:
        return [self.bn.gamma, self.bn.beta, self.w1, self.b1, self.w2, self.b2]

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.bn.running_mean": self.bn.running_mean,
                f"{self.name}.bn.running_var": self.bn.running_var}

    def load_buffers(self, values: dict[str, np.ndarray]):
        self.bn.running_mean = np.array(values[f"{self.name}.bn.running_mean"], dtype=float)
        self.bn.running_var = np.array(values[f"{self.name}.bn.running_var"], dtype=float)


def pooling_weights(
    pad_mask: np.ndarray, policy: str, window: int = RECENT_WINDOW, causal: bool = False
) -> np.ndarray:
    """Averaging weights over real (unpadded) positions.

    Returns B x 1 x n, or B x n x n when ``causal`` (row k averages the
    positions up to k, so later tokens never reach earlier gates).
    """
    keep = np.asarray(pad_mask, dtype=bool)
    n = keep.shape[1]
    if causal:
        pos = np.arange(n)
        allowed = pos[None, :] <= pos[:, None]
        if policy == "recent":
            allowed &= pos[None, :] > pos[:, None] - window
        w = allowed[None, :, :] & keep[:, None, :]
    else:
        w = keep[:, None, :]
        if policy == "recent":
            # the last `window` real positions of each row
            rank_from_end = np.cumsum(keep[:, ::-1], axis=1)[:, ::-1]
            w = (keep & (rank_from_end <= window))[:, None, :]
    counts = w.sum(axis=2, keepdims=True)
    if (counts[:, 0] == 0).any():
        raise DimensionError("gate input has no unpadded positions")
    return w / np.maximum(counts, 1)


def gate_forward(
    x: Tensor,
    gate: GateParams,
    training: bool,
    pad_mask: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    norm_stats: Optional[str] = None,
    causal: bool = False,
) -> Tensor:
    """Expert responsibilities.

    ``x`` is n x d (one instance, returns shape (E,)) or B x n x d (returns
    B x E, or B x n x E per prefix when ``causal``; padded positions get the
    uniform distribution). ``norm_stats`` overrides the batch-norm mode,
    "batch" or "running"; by default it follows ``training``.
    """
    single = x.ndim == 2
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[1] == 0:
        raise DimensionError(f"gate input must be n x d or B x n x d with n > 0, got {x.shape}")
    b, n, d = x.shape
    if pad_mask is None:
        pad_mask = np.ones((b, n), dtype=bool)
    w = pooling_weights(pad_mask, gate.pooling, gate.window, causal)
    pooled = reshape(matmul(w, x), (-1, d))
    if causal:
        rows = np.flatnonzero(np.asarray(pad_mask, dtype=bool).reshape(-1))
        pooled = take_rows(pooled, rows)
    use_batch = training if norm_stats is None else norm_stats == "batch"
    normed = batch_norm(pooled, gate.bn, training=use_batch)
    logits = tanh_mlp_forward(
        normed, gate.w1, gate.b1, gate.w2, gate.b2, gate.dropout_rate, rng, training
    )
    g = softmax(logits)
    e = gate.num_experts
    if causal:
        g = reshape(scatter_rows(g, rows, b * n, fill=1.0 / e), (b, n, e))
        return reshape(g, (n, e)) if single else g
    return reshape(g, (e,)) if single else g


# --------------------------------------------------------------------------
# layer parameters


class MaeLayerParams:
    """Heads (Q_i, K_i, V_i), output blocks W_i and the layer's gate.

    W_i is the i-th block of rows of the output matrix W, so stacking the
    blocks vertically reconstitutes W.
    """

    def __init__(
        self,
        d: int,
        h: int,
        t: int = 1,
        rng: Optional[np.random.Generator] = None,
        d_head: Optional[int] = None,
        gated: bool = True,
        gate_hidden: int = GATE_HIDDEN,
        gate_dropout: float = GATE_DROPOUT,
        pooling: str = "mean",
        window: int = RECENT_WINDOW,
        name: str = "attn",
        causal: bool = False,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.causal = causal
        self.experts = enumerate_experts(h, t)
        self.d, self.h, self.t = d, h, t
        self.d_head = d_head or d // h
        if self.d_head < 1:
            raise ValueError(f"d={d} too small for {h} heads")
        s_in = math.sqrt(1.0 / d)
        s_out = math.sqrt(1.0 / (self.d_head * h))

        def init(shape, s, label, i):
            return Tensor(rng.uniform(-math.sqrt(3) * s, math.sqrt(3) * s, shape), True, f"{name}.{label}.{i}")

        self.q = [init((d, self.d_head), s_in, "q", i) for i in range(h)]
        self.k = [init((d, self.d_head), s_in, "k", i) for i in range(h)]
        self.v = [init((d, self.d_head), s_in, "v", i) for i in range(h)]
        self.w = [init((self.d_head, d), s_out, "w", i) for i in range(h)]
        self.keep = keep_matrix(self.experts, h)
        self.gate = (
            GateParams(d, len(self.experts), rng, gate_hidden, gate_dropout, pooling, window, f"{name}.gate")
            if gated
            else None
        )
        self.name = name

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def expert_scale(self) -> float:
        return self.h / (self.h - self.t)

    def head_parameters(self, i: int) -> list[Tensor]:
        return [self.q[i], self.k[i], self.v[i], self.w[i]]

    def theta(self) -> list[Tensor]:
        return [p for i in range(self.h) for p in self.head_parameters(i)]

    def phi(self) -> list[Tensor]:
        return [] if self.gate is None else self.gate.parameters()

    def assembled_w(self) -> Tensor:
        return concat(self.w, axis=0)


# --------------------------------------------------------------------------
# single-instance reference forms


def _attend(xq, xkv, q, k, v, mask) -> Tensor:
    """softmax(xq Q (xkv K)^T / sqrt(d_k)) xkv V for stacked or single heads."""
    dk = q.shape[-1]
    qs = matmul(xq, q)
    ks = matmul(xkv, k)
    vs = matmul(xkv, v)
    scores = scale(matmul(qs, swap_last(ks)), 1.0 / math.sqrt(dk))
    return matmul(softmax(scores, mask), vs)


def _check_input(x: Tensor, params: MaeLayerParams, memory):
    if x.ndim < 2 or x.shape[-2] == 0 or x.shape[-1] != params.d:
        raise DimensionError(f"attention input {x.shape} does not match model dim {params.d}")
    if memory is not None and memory.shape[-1] != params.d:
        raise DimensionError(f"attention memory {memory.shape} does not match model dim {params.d}")


def unprojected_head(x, i, params, mask=None, memory=None) -> Tensor:
    """H~_i: the attention output before its W_i block."""
    _check_input(x, params, memory)
    kv = x if memory is None else memory
    return _attend(x, kv, params.q[i], params.k[i], params.v[i], mask)


def head_forward(x, i, params, mask=None, memory=None) -> Tensor:
    """H_i = H~_i W_i."""
    if not 0 <= i < params.h:
        raise IndexError(f"head {i} out of range for h={params.h}")
    return matmul(unprojected_head(x, i, params, mask, memory), params.w[i])


def multihead_concat(x, params, mask=None, memory=None, w: Optional[Tensor] = None) -> Tensor:
    """[H~_1; ...; H~_h] W with W assembled from the blocks unless given."""
    heads = [unprojected_head(x, i, params, mask, memory) for i in range(params.h)]
    return matmul(concat(heads, axis=-1), params.assembled_w() if w is None else w)


def multihead_sum(x, params, mask=None, memory=None) -> Tensor:
    out = head_forward(x, 0, params, mask, memory)
    for i in range(1, params.h):
        out = add(out, head_forward(x, i, params, mask, memory))
    return out


def expert_forward(x, expert: ExpertId, params, mask=None, memory=None) -> Tensor:
    """h/(h-t) times the sum of the heads the expert keeps."""
    if len(expert.dropped) != params.t or any(not 0 <= j < params.h for j in expert.dropped):
        raise ValueError(f"{expert} is not a valid expert for h={params.h}, t={params.t}")
    kept = expert.kept(params.h)
    out = head_forward(x, kept[0], params, mask, memory)
    for j in kept[1:]:
        out = add(out, head_forward(x, j, params, mask, memory))
    return scale(out, params.expert_scale)


# --------------------------------------------------------------------------
# batched coefficient form


def head_outputs(x, params, mask=None, memory=None) -> Tensor:
    """All projected heads at once: B x h x n x d."""
    _check_input(x, params, memory)
    xq = reshape(x, x.shape[:-2] + (1,) + x.shape[-2:])
    kv = xq if memory is None else reshape(memory, memory.shape[:-2] + (1,) + memory.shape[-2:])
    ht = _attend(xq, kv, stack(params.q), stack(params.k), stack(params.v), mask)
    return matmul(ht, stack(params.w))


def _split_heads(x2: Tensor, b: int, n: int, h: int) -> Tensor:
    return transpose(reshape(x2, (b, n, h, -1)), (0, 2, 1, 3))


def mixed_attention(x, params: MaeLayerParams, coef=None, mask=None, memory=None) -> Tensor:
    """Batched sum_j c_j H_j computed as [c_1 H~_1; ...; c_h H~_h] W.

    ``x`` is B x n x d; ``coef`` as in :func:`combine_heads`. One projection
    GEMM per Q/K/V and one for W, so this is the path the models use.
    """
    _check_input(x, params, memory)
    b, n, d = x.shape
    h = params.h
    kv = x if memory is None else memory
    m = kv.shape[1]
    q = _split_heads(matmul(reshape(x, (b * n, d)), concat(params.q, axis=1)), b, n, h)
    k = _split_heads(matmul(reshape(kv, (b * m, d)), concat(params.k, axis=1)), b, m, h)
    v = _split_heads(matmul(reshape(kv, (b * m, d)), concat(params.v, axis=1)), b, m, h)
    scores = scale(matmul(q, swap_last(k)), 1.0 / math.sqrt(params.d_head))
    ht = matmul(softmax(scores, mask), v)
    if coef is not None:
        if isinstance(coef, Tensor):
            c = transpose(coef, (0, 2, 1)) if coef.ndim == 3 else coef
            ht = mul(ht, reshape(c, c.shape + (1,) if coef.ndim == 3 else c.shape + (1, 1)))
        else:
            c = np.asarray(coef)
            c = np.transpose(c, (0, 2, 1))[..., None] if c.ndim == 3 else c[..., None, None]
            ht = apply_mask(ht, c)
    flat = reshape(transpose(ht, (0, 2, 1, 3)), (b * n, h * params.d_head))
    return reshape(matmul(flat, params.assembled_w()), (b, n, d))


def head_coefficients(g, params: MaeLayerParams) -> Tensor:
    """Per-head weights induced by expert weights ``g`` (... x E -> ... x h)."""
    g = as_tensor(g)
    if g.ndim == 1:
        return reshape(head_coefficients(reshape(g, (1, g.shape[0])), params), (params.h,))
    return scale(matmul(g, params.keep), params.expert_scale)


def expert_coefficients(expert_index: np.ndarray, params: MaeLayerParams) -> np.ndarray:
    """Constant head weights when instance b runs only expert ``expert_index[b]``."""
    return params.keep[np.asarray(expert_index)] * params.expert_scale


def combine_heads(heads: Tensor, coef=None) -> Tensor:
    """sum_j c_j H_j over the head axis (-3).

    ``coef`` is ... x h (one weight per head) or B x n x h (per position);
    None means c_j = 1.
    """
    if coef is None:
        return sum_(heads, axis=-3)
    per_position = coef.ndim == heads.ndim - 1
    if isinstance(coef, Tensor):
        if per_position:
            coef = transpose(coef, (0, 2, 1))
        weighted = mul(heads, reshape(coef, coef.shape + (1,) if per_position else coef.shape + (1, 1)))
    else:
        coef = np.asarray(coef)
        if per_position:
            coef = np.transpose(coef, (0, 2, 1))[..., None]
        else:
            coef = coef[..., None, None]
        weighted = apply_mask(heads, coef)
    return sum_(weighted, axis=-3)


def mae_forward(
    x,
    params: MaeLayerParams,
    training: bool = False,
    mask=None,
    memory=None,
    pad_mask=None,
    rng=None,
    g=None,
) -> Tensor:
    """sum_e g_e f_e(x) with g from the layer's gate unless supplied."""
    if g is None:
        if params.gate is None:
            raise ValueError(f"{params.name} has no gate; pass g explicitly")
        g = gate_forward(x, params.gate, training, pad_mask, rng, causal=params.causal)
    return combine_heads(head_outputs(x, params, mask, memory), head_coefficients(g, params))


# --------------------------------------------------------------------------
# routing: how each MAE layer picks its head coefficients during a forward


class Router:
    """Decides head coefficients for every MAE layer in one forward pass.

    ``choices`` maps layer index to the per-instance expert index used (for
    routers that pick a single expert); ``gates`` maps layer index to the
    gate distribution observed.
    """

    uses_gate = False

    def __init__(self):
        self.choices: dict[int, np.ndarray] = {}
        self.gates: dict[int, np.ndarray] = {}

    def __call__(self, index: int, layer: MaeLayerParams, x: Tensor, pad_mask) -> Optional[object]:
        raise NotImplementedError

    @staticmethod
    def _uniform(layer, x) -> np.ndarray:
        shape = x.shape[:2] if layer.causal else x.shape[:1]
        return np.full(shape + (layer.num_experts,), 1.0 / layer.num_experts)

    def _probs(self, layer, x, pad_mask) -> np.ndarray:
        if layer.gate is None:
            return self._uniform(layer, x)
        with no_grad():
            return gate_forward(x, layer.gate, False, pad_mask, causal=layer.causal).data


class UniformRouter(Router):
    """Plain multi-head attention: every expert weighted 1/E (c_j = 1)."""

    def __call__(self, index, layer, x, pad_mask):
        self.gates[index] = self._uniform(layer, x)
        return None


class MixtureRouter(Router):
    """Gate-weighted mixture, differentiable in the gate parameters."""

    uses_gate = True

    def __init__(self, training: bool = False, rng=None, norm_stats: Optional[str] = None):
        super().__init__()
        self.training = training
        self.rng = rng
        self.norm_stats = norm_stats

    def __call__(self, index, layer, x, pad_mask):
        if layer.gate is None:
            return UniformRouter.__call__(self, index, layer, x, pad_mask)
        g = gate_forward(
            x, layer.gate, self.training, pad_mask, self.rng, self.norm_stats, layer.causal
        )
        self.gates[index] = g.data
        return head_coefficients(g, layer)


class SampleRouter(Router):
    """Draw one expert per instance from the gate (or uniformly).

    The gate is evaluated without recording, so nothing flows back into it.
    """

    def __init__(self, rng: np.random.Generator, uniform: bool = False):
        super().__init__()
        self.rng = rng
        self.uniform = uniform
        self.uses_gate = not uniform

    def __call__(self, index, layer, x, pad_mask):
        probs = self._uniform(layer, x) if self.uniform else self._probs(layer, x, pad_mask)
        flat = np.ascontiguousarray(probs.reshape(-1, layer.num_experts))
        picks = kernels.sample_categorical(flat, self.rng.random(flat.shape[0]))
        picks = picks.reshape(probs.shape[:-1])
        self.gates[index] = probs
        self.choices[index] = picks
        return expert_coefficients(picks, layer)


class ArgmaxRouter(Router):
    """Most specialized expert: argmax of the gate, lowest index on ties."""

    uses_gate = True

    def __call__(self, index, layer, x, pad_mask):
        probs = self._probs(layer, x, pad_mask)
        picks = np.argmax(probs, axis=-1)
        self.gates[index] = probs
        self.choices[index] = picks
        return expert_coefficients(picks, layer)


class FixedRouter(Router):
    """Use given expert indices per layer (an int or a per-instance array)."""

    def __init__(self, picks: dict[int, object]):
        super().__init__()
        self.picks = picks

    def __call__(self, index, layer, x, pad_mask):
        shape = x.shape[:2] if layer.causal else x.shape[:1]
        picks = np.broadcast_to(np.asarray(self.picks[index], dtype=np.int64), shape).copy()
        self.choices[index] = picks
        return expert_coefficients(picks, layer)
