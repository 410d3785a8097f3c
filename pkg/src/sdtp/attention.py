"""Multi-head attention core shared by the intra-level and cross-level stages.

Queries come from one token matrix; keys and values are projected from a
list of token matrices and concatenated along the token axis, which is how
both the multi-receptive-state attention and the cross-level grouped
attention consume several sources at once.  Scores are scaled by
1/sqrt(d_head) and passed through a pluggable activation: row softmax,
elementwise tanh, or the refinement gate.  Projections are bias-free.

Every dense matmul in this core reports its multiply-accumulate count to
the instrumentation hook in the complexity module; convolutions and MLPs
elsewhere do not, so measured counts can be compared against the analytic
attention-cost formulas term by term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .arf import arf_op
from .complexity import record_macs
from .config import ConfigurationError
from .tensor import ContractViolation, Tensor


@dataclass
class AttentionWeights:
    """Bias-free projection matrices; heads are column blocks of each."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    n_heads: int

    def __post_init__(self):
        c = self.wq.shape[0]
        for nm, w in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            if w.shape != (c, c):
                raise ContractViolation(f"attention weight {nm} must be ({c}, {c}), got {w.shape}")
        if self.n_heads < 1 or c % self.n_heads:
            raise ConfigurationError(
                f"n_heads={self.n_heads} does not divide embed width {c}")

    @property
    def c(self) -> int:
        return self.wq.shape[0]

    def params(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv, self.wo]


def attention_weights(rng: np.random.Generator, c: int, n_heads: int,
                      name: str = "attn") -> AttentionWeights:
    def mk(nm):
        return T.uniform_param(rng, (c, c), c, name=f"{name}.{nm}")
    return AttentionWeights(wq=mk("wq"), wk=mk("wk"), wv=mk("wv"), wo=mk("wo"),
                            n_heads=n_heads)


def apply_activation(scores: Tensor, mode: str, tau: float) -> Tensor:
    if mode == "softmax":
        return T.softmax_rows(scores)
    if mode == "tanh":
        return T.tanh_t(scores)
    if mode == "arf":
        return arf_op(scores, tau=tau)
    raise ConfigurationError(f"unknown attention activation mode {mode!r}")


def _project(tokens: Tensor, w: Tensor) -> Tensor:
    record_macs(tokens.shape[0] * w.shape[0] * w.shape[1])
    return T.matmul(tokens, w)


def multi_head_attention(queries: Tensor, keys_values: list[Tensor],
                         weights: AttentionWeights, mode: str = "softmax",
                         tau: float = 2.0) -> Tensor:
    """Attend from `queries` over the concatenation of `keys_values`.

    queries: (n_q, c); each entry of keys_values: (n_k, c).  Returns
    (n_q, c) after concatenating per-head outputs and projecting.
    """
    c = weights.c
    if queries.ndim != 2 or queries.shape[1] != c:
        raise ContractViolation(f"queries must be (n, {c}), got {queries.shape}")
    if not keys_values:
        raise ContractViolation("attention needs at least one key/value source")
    for t in keys_values:
        if t.ndim != 2 or t.shape[1] != c:
            raise ContractViolation(
                f"key/value tokens must share embed width {c}, got {t.shape}")

    source = keys_values[0] if len(keys_values) == 1 else T.concat(keys_values, axis=0)
    q_full = _project(queries, weights.wq)
    k_full = _project(source, weights.wk)
    v_full = _project(source, weights.wv)

    d_head = c // weights.n_heads
    inv_sqrt = 1.0 / np.sqrt(float(d_head))
    n_q, n_k = q_full.shape[0], k_full.shape[0]
    head_outs = []
    for h in range(weights.n_heads):
        lo = h * d_head
        q = T.narrow(q_full, 1, lo, d_head)
        k = T.narrow(k_full, 1, lo, d_head)
        v = T.narrow(v_full, 1, lo, d_head)
        record_macs(n_q * n_k * d_head)
        scores = T.scale(T.matmul(q, T.transpose2d(k)), inv_sqrt)
        w = apply_activation(scores, mode, tau)
        record_macs(n_q * n_k * d_head)
        head_outs.append(T.matmul(w, v))
    merged = head_outs[0] if len(head_outs) == 1 else T.concat(head_outs, axis=1)
    return _project(merged, weights.wo)
