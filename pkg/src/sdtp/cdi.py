"""Cross-level stage: decouple each level into axis factors, let the factors
attend across levels, and recouple.

Attention across pyramid levels is quadratic in token count if every pixel
is a token, so each (c, h, w) level is first collapsed into a vertical
factor (c, h, 1) and a horizontal factor (c, 1, w): a 1x1 convolution
produces logits, a softmax along the axis being reduced turns them into
pooling weights, and a 3x1 (resp. 1x3) convolution refines the pooled
vector.  Grouped attention then runs over the vertical factors of all
levels jointly, and separately over the horizontal factors, with shared
projections, pre-norm, and residuals.  Recoupling broadcasts the refined
factors back to (c, h, w) by addition, an outer-sum expansion.

The decoupling penalty measures, per level, the Frobenius distance between
the original map and the outer-sum of its raw (pre-attention) factors; the
training objective is task loss + lambda * penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionWeights, attention_weights, multi_head_attention
from .tensor import ContractViolation, Tensor


@dataclass
class DecoupledPair:
    """Axis factors of one level: y is (c, h, 1), x is (c, 1, w)."""

    y: Tensor
    x: Tensor
    level: int

    def __post_init__(self):
        if self.y.ndim != 3 or self.y.shape[2] != 1:
            raise ContractViolation(f"vertical factor must be (c, h, 1), got {self.y.shape}")
        if self.x.ndim != 3 or self.x.shape[1] != 1:
            raise ContractViolation(f"horizontal factor must be (c, 1, w), got {self.x.shape}")


class DecoupleWeights:
    """Shared-across-levels weights for the decoupling step: one 1x1 logit
    conv and one refinement conv per axis."""

    def __init__(self, rng: np.random.Generator, c: int, name: str = "decouple"):
        self.c = c
        self.logit_v = T.conv_param(rng, c, c, 1, 1, name=f"{name}.logit_v")
        self.logit_h = T.conv_param(rng, c, c, 1, 1, name=f"{name}.logit_h")
        self.refine_v = T.conv_param(rng, c, c, 3, 1, name=f"{name}.refine_v")
        self.refine_h = T.conv_param(rng, c, c, 1, 3, name=f"{name}.refine_h")

    def params(self) -> list[Tensor]:
        return [self.logit_v, self.logit_h, self.refine_v, self.refine_h]


def _softmax_axis(x: Tensor, axis: int) -> Tensor:
    """Softmax of a (c, h, w) tensor along axis 1 or 2."""
    c, h, w = x.shape
    if axis == 2:
        flat = T.reshape(x, (c * h, w))
        return T.reshape(T.softmax_rows(flat), (c, h, w))
    if axis == 1:
        perm = T.permute(x, (0, 2, 1))
        flat = T.reshape(perm, (c * w, h))
        sm = T.reshape(T.softmax_rows(flat), (c, w, h))
        return T.permute(sm, (0, 2, 1))
    raise ContractViolation(f"softmax axis must be 1 or 2, got {axis}")


def decouple(x: Tensor, weights: DecoupleWeights, level: int = 0) -> DecoupledPair:
    """Collapse (c, h, w) into axis factors by learned softmax pooling.

    Per axis: weights = softmax(1x1 conv logits) along the reduced axis;
    the weighted sum collapses that axis; a small conv along the kept axis
    refines the result.  With constant logits the pooling is an exact mean.
    """
    if x.ndim != 3:
        raise ContractViolation(f"decouple expects (c, h, w), got {x.shape}")
    if x.shape[0] != weights.c:
        raise ContractViolation(
            f"decouple channel mismatch: map has {x.shape[0]}, weights expect {weights.c}")
    att_v = _softmax_axis(T.conv2d(x, weights.logit_v), axis=2)
    pooled_v = T.sum_axis(T.mul(att_v, x), axis=2, keepdims=True)          # (c, h, 1)
    y = T.conv2d(pooled_v, weights.refine_v)
    att_h = _softmax_axis(T.conv2d(x, weights.logit_h), axis=1)
    pooled_h = T.sum_axis(T.mul(att_h, x), axis=1, keepdims=True)          # (c, 1, w)
    xf = T.conv2d(pooled_h, weights.refine_h)
    return DecoupledPair(y=y, x=xf, level=level)


def recouple(pair: DecoupledPair) -> Tensor:
    """Outer-sum expansion of the factors back to a (c, h, w) map:
    out[ch, i, j] = y[ch, i, 0] + x[ch, 0, j]."""
    if pair.y.shape[0] != pair.x.shape[0]:
        raise ContractViolation(
            f"recouple channel mismatch: {pair.y.shape[0]} vs {pair.x.shape[0]}")
    return T.add(pair.y, pair.x)


def decouple_loss(maps: list[Tensor], pairs: list[DecoupledPair]) -> Tensor:
    """Sum over levels of the Frobenius distance between each map and the
    outer-sum of its factors."""
    if len(maps) != len(pairs):
        raise ContractViolation(f"{len(maps)} maps but {len(pairs)} factor pairs")
    total = None
    for m, p in zip(maps, pairs):
        if m.shape[0] != p.y.shape[0]:
            raise ContractViolation(
                f"level {p.level}: map channels {m.shape[0]} != factor channels {p.y.shape[0]}")
        term = T.frobenius_norm(T.sub(m, recouple(p)))
        total = term if total is None else T.add(total, term)
    return total if total is not None else Tensor(0.0)


def total_loss(task_loss, dep_loss, lam: float = 0.01):
    """Training objective: task loss plus lambda-weighted decoupling penalty."""
    if lam < 0 or not np.isfinite(lam):
        raise ContractViolation(f"lambda must be finite and >= 0, got {lam}")
    if isinstance(task_loss, Tensor) or isinstance(dep_loss, Tensor):
        return T.add(task_loss, T.scale(T.as_tensor(dep_loss), lam))
    return float(task_loss) + lam * float(dep_loss)


def mga(token_sets: list[Tensor], weights: AttentionWeights, mode: str = "arf",
        tau: float = 2.0) -> list[Tensor]:
    """Grouped attention across levels: each level's tokens query the
    concatenation of every level's keys/values; projections are shared.
    Token counts per level are preserved."""
    if not token_sets:
        raise ContractViolation("mga needs at least one token set")
    d = token_sets[0].shape[1]
    for t in token_sets:
        if t.ndim != 2 or t.shape[1] != d:
            raise ContractViolation(
                f"mga token sets must share embed width {d}, got {t.shape}")
    return [multi_head_attention(q, token_sets, weights, mode=mode, tau=tau)
            for q in token_sets]


def _y_tokens(y: Tensor) -> Tensor:
    c, h, _ = y.shape
    return T.reshape(T.permute(y, (1, 2, 0)), (h, c))


def _tokens_y(t: Tensor, h: int) -> Tensor:
    return T.permute(T.reshape(t, (h, 1, t.shape[1])), (2, 0, 1))


def _x_tokens(x: Tensor) -> Tensor:
    c, _, w = x.shape
    return T.reshape(T.permute(x, (2, 1, 0)), (w, c))


def _tokens_x(t: Tensor, w: int) -> Tensor:
    return T.permute(T.reshape(t, (w, 1, t.shape[1])), (2, 1, 0))


class CdiBlock:
    """One round of cross-level interaction over a dict of (c, h, w) maps.

    Per level: decouple -> grouped attention over vertical factors of all
    levels (pre-norm, residual) and likewise horizontal -> recouple ->
    token MLP (pre-norm, residual) -> add back onto the input map.  The
    final residual means zeroing the refinement convs together with the
    attention and MLP output projections turns the whole block into an
    exact identity.  Returns (updated maps, decoupling penalty), the
    penalty computed from the raw pre-attention factors.
    """

    def __init__(self, rng: np.random.Generator, c: int, n_heads: int = 8,
                 mode: str = "arf", tau: float = 2.0, hidden_ratio: float = 4.0,
                 name: str = "cdi"):
        self.c = c
        self.mode = mode
        self.tau = tau
        self.dec = DecoupleWeights(rng, c, name=f"{name}.decouple")
        self.ln_v = T.LayerNorm(c, name=f"{name}.ln_v")
        self.ln_h = T.LayerNorm(c, name=f"{name}.ln_h")
        self.attn_v = attention_weights(rng, c, n_heads, name=f"{name}.attn_v")
        self.attn_h = attention_weights(rng, c, n_heads, name=f"{name}.attn_h")
        self.ln_m = T.LayerNorm(c, name=f"{name}.ln_m")
        self.mlp = T.Mlp(rng, c, hidden_ratio=hidden_ratio, name=f"{name}.mlp")

    def __call__(self, maps: dict[int, Tensor]) -> tuple[dict[int, Tensor], Tensor]:
        levels = sorted(maps)
        for lvl in levels:
            if maps[lvl].ndim != 3 or maps[lvl].shape[0] != self.c:
                raise ContractViolation(
                    f"level {lvl}: expected ({self.c}, h, w) map, got {maps[lvl].shape}")
        pairs = [decouple(maps[lvl], self.dec, level=lvl) for lvl in levels]
        dep = decouple_loss([maps[lvl] for lvl in levels], pairs)

        tv = [_y_tokens(p.y) for p in pairs]
        th = [_x_tokens(p.x) for p in pairs]
        attn_v = mga([self.ln_v(t) for t in tv], self.attn_v, mode=self.mode, tau=self.tau)
        attn_h = mga([self.ln_h(t) for t in th], self.attn_h, mode=self.mode, tau=self.tau)
        v_hat = [T.add(t, a) for t, a in zip(tv, attn_v)]
        h_hat = [T.add(t, a) for t, a in zip(th, attn_h)]

        outs: dict[int, Tensor] = {}
        for lvl, p, v, hh in zip(levels, pairs, v_hat, h_hat):
            c, h, w = maps[lvl].shape
            recoupled = recouple(DecoupledPair(y=_tokens_y(v, h), x=_tokens_x(hh, w), level=lvl))
            r_tok = T.map_to_tokens(recoupled)
            refined = T.add(r_tok, self.mlp(self.ln_m(r_tok)))
            outs[lvl] = T.add(maps[lvl], T.tokens_to_map(refined, (h, w)))
        return outs, dep

    def params(self) -> list[Tensor]:
        ps = self.dec.params()
        ps += self.ln_v.params() + self.ln_h.params()
        ps += self.attn_v.params() + self.attn_h.params()
        ps += self.ln_m.params() + self.mlp.params()
        return ps
