"""Intra-level stage: promote the deepest pyramid level with self-attention
over multi-receptive-field views of itself.

The level is expanded into S states, one per dilation rate (rate 1 first,
always), each produced by its own 3x3 dilated convolution plus a positional
embedding.  Attention queries come from the rate-1 state only; keys and
values come from every state, concatenated along the token axis.  The
surrounding block is a standard pre-norm transformer block: attention with
a residual, then an MLP with a residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionWeights, attention_weights, multi_head_attention
from .config import ConfigurationError
from .tensor import ContractViolation, Tensor


def sinusoidal_embedding_2d(c: int, h: int, w: int) -> np.ndarray:
    """Fixed 2-D sine/cosine position code of shape (c, h, w).

    The first half of the channels encodes the row index, the rest the
    column index, each with the standard geometric frequency ladder.
    """
    c_h = c // 2
    c_w = c - c_h
    out = np.zeros((c, h, w))
    if c_h:
        out[:c_h] = _axis_embedding(h, c_h).T[:, :, None]
    out[c_h:] = _axis_embedding(w, c_w).T[:, None, :]
    return out


def _axis_embedding(n: int, d: int) -> np.ndarray:
    pe = np.zeros((n, d))
    pos = np.arange(n, dtype=np.float64)[:, None]
    idx = np.arange(0, d, 2, dtype=np.float64)[None, :]
    rate = np.exp(-np.log(10000.0) * idx / max(d, 1))
    pe[:, 0::2] = np.sin(pos * rate)
    n_cos = pe[:, 1::2].shape[1]
    pe[:, 1::2] = np.cos(pos * rate[:, :n_cos])
    return pe


@dataclass
class ReceptiveStates:
    """One feature map per dilation rate; rate 1 is the query source."""

    maps: list[Tensor]
    rates: tuple[int, ...]

    def __post_init__(self):
        if len(self.maps) != len(self.rates):
            raise ContractViolation(
                f"{len(self.maps)} state maps for {len(self.rates)} rates")
        if not self.maps:
            raise ContractViolation("ReceptiveStates needs at least one state")
        shape = self.maps[0].shape
        for m in self.maps:
            if m.shape != shape:
                raise ContractViolation(f"state shapes differ: {m.shape} vs {shape}")

    @property
    def hw(self) -> tuple[int, int]:
        return self.maps[0].shape[1], self.maps[0].shape[2]

    def token_matrices(self) -> list[Tensor]:
        return [T.map_to_tokens(m) for m in self.maps]


def generate_states(c5: Tensor, conv_weights: list[Tensor], rates: tuple[int, ...],
                    pos_embed: np.ndarray | Tensor | None = None) -> ReceptiveStates:
    """Expand a (c, h, w) map into one state per rate.

    State s = dilated 3x3 convolution of the input at rates[s], plus the
    positional embedding (shared across states).  rates[0] must be 1 so the
    query state keeps the native receptive field.
    """
    if not rates or rates[0] != 1:
        raise ConfigurationError(f"dilation rates must start with 1, got {list(rates)}")
    if any(r < 1 for r in rates):
        raise ConfigurationError(f"dilation rates must be >= 1, got {list(rates)}")
    if len(conv_weights) != len(rates):
        raise ContractViolation(
            f"{len(conv_weights)} conv kernels for {len(rates)} rates")
    pos = None
    if pos_embed is not None:
        pos = pos_embed if isinstance(pos_embed, Tensor) else Tensor(pos_embed)
        if pos.shape != c5.shape:
            raise ContractViolation(
                f"positional embedding shape {pos.shape} does not match input {c5.shape}")
    maps = []
    for w, rate in zip(conv_weights, rates):
        m = T.conv2d(c5, w, dilation=rate)
        if pos is not None:
            m = T.add(m, pos)
        maps.append(m)
    return ReceptiveStates(maps=maps, rates=tuple(rates))


def mma(states: ReceptiveStates, weights: AttentionWeights, mode: str = "arf",
        tau: float = 2.0) -> Tensor:
    """Multi-receptive attention: queries from the rate-1 state, keys and
    values from all states concatenated along tokens.  Returns (h*w, c)."""
    tokens = states.token_matrices()
    return multi_head_attention(tokens[0], tokens, weights, mode=mode, tau=tau)


class IspBlock:
    """Pre-norm transformer block whose attention is the multi-receptive
    attention above; input and output are (c, h, w) maps."""

    def __init__(self, rng: np.random.Generator, c: int, rates: tuple[int, ...] = (1, 3, 6),
                 n_heads: int = 8, pos_embed: str = "sinusoidal", mode: str = "arf",
                 tau: float = 2.0, hidden_ratio: float = 4.0, name: str = "isp",
                 hw: tuple[int, int] | None = None):
        if not rates or rates[0] != 1:
            raise ConfigurationError(f"dilation rates must start with 1, got {list(rates)}")
        self.c = c
        self.rates = tuple(rates)
        self.pos_mode = pos_embed
        self.mode = mode
        self.tau = tau
        self.state_convs = [
            T.conv_param(rng, c, c, 3, 3, name=f"{name}.state_conv_r{r}") for r in self.rates
        ]
        self.learned_pos: dict[tuple[int, int], Tensor] = {}
        self._pos_rng = np.random.default_rng(rng.integers(2**63))
        self.ln1 = T.LayerNorm(c, name=f"{name}.ln1")
        self.ln2 = T.LayerNorm(c, name=f"{name}.ln2")
        self.attn = attention_weights(rng, c, n_heads, name=f"{name}.attn")
        self.mlp = T.Mlp(rng, c, hidden_ratio=hidden_ratio, name=f"{name}.mlp")
        if pos_embed == "learned" and hw is not None:
            self.pos_embedding(hw)  # eager so params() is complete before any forward

    def pos_embedding(self, hw: tuple[int, int]) -> Tensor | np.ndarray | None:
        if self.pos_mode == "none":
            return None
        if self.pos_mode == "sinusoidal":
            return sinusoidal_embedding_2d(self.c, *hw)
        if hw not in self.learned_pos:
            self.learned_pos[hw] = T.uniform_param(
                self._pos_rng, (self.c, *hw), self.c, name=f"pos_{hw[0]}x{hw[1]}")
        return self.learned_pos[hw]

    def generate_states(self, x: Tensor) -> ReceptiveStates:
        return generate_states(x, self.state_convs, self.rates,
                               pos_embed=self.pos_embedding((x.shape[1], x.shape[2])))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[0] != self.c:
            raise ContractViolation(f"expected ({self.c}, h, w) map, got {x.shape}")
        hw = (x.shape[1], x.shape[2])
        tokens = T.map_to_tokens(x)
        normed_map = T.tokens_to_map(self.ln1(tokens), hw)
        states = generate_states(normed_map, self.state_convs, self.rates,
                                 pos_embed=self.pos_embedding(hw))
        attended = T.add(mma(states, self.attn, mode=self.mode, tau=self.tau), tokens)
        out = T.add(self.mlp(self.ln2(attended)), attended)
        return T.tokens_to_map(out, hw)

    def params(self) -> list[Tensor]:
        ps = list(self.state_convs)
        ps += list(self.learned_pos.values())
        ps += self.ln1.params() + self.ln2.params()
        ps += self.attn.params() + self.mlp.params()
        return ps
